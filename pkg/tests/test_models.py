from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from reviewbench import autodiff as ad
from reviewbench import synthetic
from reviewbench.corpus import SplitDataset, split
from reviewbench.models import (
    Adam,
    Batch,
    BiasModel,
    HFTModel,
    TrainConfig,
    TrainingDiverged,
    build_model,
    hft_objective,
    hft_resample,
    train,
)
from reviewbench.models.reviews import trim_padding
from reviewbench.text import Layout, ReviewDocs, TokenCorpus, prepare_features

from conftest import make_dataset

TINY = TrainConfig(latent_dim=3, l2=1e-3, dropout=0.3, n_filters=4, lr=1e-2, batch_size=32, max_epochs=3)


@pytest.fixture(scope="module")
def tiny():
    p = synthetic.planted(n_users=30, n_items=20, n_interactions=240, with_text=True, topic_words=6, seed=11)
    s = split(p.dataset, 0)
    feats = prepare_features(s, emb_dim=4, seed=0)
    return s, feats


def _batch(s: SplitDataset, n: int = 12) -> Batch:
    rows = np.arange(n)
    u, i, r = s.arrays("train")
    return Batch(u[rows], i[rows], r[rows], rows)


def _bias_twin(model, s):
    """A bias model carrying ``model``'s alpha and biases."""
    twin = build_model("bias", s, model.cfg)
    for k in ("alpha", "beta_user", "beta_item"):
        twin.params[k].value = model.params[k].value.copy()
    return twin


def _randomize_biases(model, seed=1):
    rng = np.random.default_rng(seed)
    model.params["alpha"].value = np.asarray(3.1)
    model.params["beta_user"].value = rng.normal(0, 0.5, model.n_users)
    model.params["beta_item"].value = rng.normal(0, 0.5, model.n_items)


def _all_pairs(s):
    d = s.dataset
    return d.users, d.items


# ---------------------------------------------------------------- arithmetic


def test_bias_prediction_arithmetic(tiny):
    s, _ = tiny
    m = build_model("bias", s, TINY)
    for k in ("alpha", "beta_user", "beta_item"):
        m.params[k].value = np.zeros_like(m.params[k].value)
    assert m.score(Batch(np.array([0]), np.array([0]), np.zeros(1), None)).value[0] == 0.0
    m.params["alpha"].value = np.asarray(3.0)
    m.params["beta_user"].value[2] = 0.5
    m.params["beta_item"].value[4] = -0.2
    assert m.score(Batch(np.array([2]), np.array([4]), np.zeros(1), None)).value[0] == pytest.approx(3.3)


def test_mf_inner_product_arithmetic(tiny):
    s, _ = tiny
    m = build_model("mf", s, replace(TINY, latent_dim=2))
    for k in ("alpha", "beta_user", "beta_item"):
        m.params[k].value = np.zeros_like(m.params[k].value)
    m.params["gamma_user"].value[0] = (1.0, 2.0)
    m.params["gamma_item"].value[0] = (3.0, -1.0)
    assert m.score(Batch(np.array([0]), np.array([0]), np.zeros(1), None)).value[0] == 1.0


# ---------------------------------------------------------------- degeneracy ladder


def test_zero_gamma_mf_is_bias(tiny):
    s, _ = tiny
    m = build_model("mf", s, TINY)
    _randomize_biases(m)
    for k in ("gamma_user", "gamma_item"):
        m.params[k].value[:] = 0.0
    u, i = _all_pairs(s)
    np.testing.assert_array_equal(m.predict(u, i), _bias_twin(m, s).predict(u, i))


def test_zero_network_neumf_is_bias(tiny):
    s, _ = tiny
    m = build_model("neumf", s, TINY)
    _randomize_biases(m)
    for k in ("mlp_w1", "mlp_b1", "mlp_w2", "mlp_b2", "out_w", "out_b"):
        m.params[k].value[:] = 0.0
    u, i = _all_pairs(s)
    np.testing.assert_array_equal(m.predict(u, i), _bias_twin(m, s).predict(u, i))


def test_neumf_with_dot_product_weights_matches_mf(tiny):
    s, _ = tiny
    cfg = replace(TINY, latent_dim=4)
    neu, mf = build_model("neumf", s, cfg), build_model("mf", s, cfg)
    _randomize_biases(neu)
    for k in ("alpha", "beta_user", "beta_item", "gamma_user", "gamma_item"):
        mf.params[k].value = neu.params[k].value.copy()
    w = np.zeros_like(neu.params["out_w"].value)
    w[: cfg.latent_dim] = 1.0
    neu.params["out_w"].value = w
    neu.params["out_b"].value[:] = 0.0
    u, i = _all_pairs(s)
    np.testing.assert_allclose(neu.predict(u, i), mf.predict(u, i), rtol=0, atol=1e-12)


def test_zero_network_deepconn_plus_is_bias(tiny):
    s, feats = tiny
    m = build_model("deepconn++", s, TINY, feats)
    _randomize_biases(m)
    for k in ("conv_user", "conv_item", "proj_user", "proj_item", "reg_w", "reg_b"):
        m.params[k].value[:] = 0.0
    u, i = _all_pairs(s)
    np.testing.assert_array_equal(m.predict(u, i), _bias_twin(m, s).predict(u, i))


def test_zero_network_narre_is_bias(tiny):
    s, feats = tiny
    m = build_model("narre", s, TINY, feats)
    _randomize_biases(m)
    for k, p in m.params.items():
        if k not in ("alpha", "beta_user", "beta_item"):
            p.value[...] = 0.0
    u, i = _all_pairs(s)
    np.testing.assert_array_equal(m.predict(u, i), _bias_twin(m, s).predict(u, i))


def test_hft_with_zero_mu_trains_like_mf(small_text):
    _, s = small_text
    feats = prepare_features(s, need_embeddings=False, layouts=())
    cfg = TrainConfig(latent_dim=4, mu=0.0, lr=1e-2, max_epochs=10, patience=10)
    mf = train("mf", s, None, cfg)
    hft = train("hft", s, feats, cfg)
    assert mf.epochs_run == hft.epochs_run == 10
    np.testing.assert_allclose(hft.val_trace, mf.val_trace, rtol=0, atol=1e-10)


def test_hft_zero_mu_loss_equals_mf_loss(tiny):
    s, feats = tiny
    cfg = replace(TINY, mu=0.0)
    hft, mf = build_model("hft", s, cfg, feats), build_model("mf", s, cfg)
    hft.resample()
    b = _batch(s)
    assert float(hft_objective(hft, b).value) == float(mf.loss(b, training=False).value)


def test_deepconn_on_empty_documents_outputs_regressor_bias(tiny):
    s, feats = tiny
    empty = ReviewDocs(Layout.CONCAT, np.zeros_like(feats.concat.users), np.zeros_like(feats.concat.items))
    for kind in ("deepconn", "deepconn++"):
        m = build_model(kind, s, TINY, replace(feats, concat=empty))
        m.params["reg_b"].value[:] = 0.7
        b = _batch(s)
        out = m.score(b).value
        expect = 0.7 + (m.bias_terms(b.users, b.items).value if m.has_bias else 0.0)
        np.testing.assert_allclose(out, expect, rtol=0, atol=1e-15)


# ---------------------------------------------------------------- gradients


@pytest.mark.parametrize("kind", ["bias", "mf", "neumf", "hft", "deepconn", "deepconn++", "narre"])
def test_grad_check_every_model(tiny, kind):
    s, feats = tiny
    m = build_model(kind, s, TINY, feats)
    if m.has_bias:
        _randomize_biases(m)
    if isinstance(m, HFTModel):
        m.resample()
    b = _batch(s, 16)
    # a fresh generator per call keeps dropout masks fixed across perturbations
    report = ad.grad_check(lambda: m.loss(b, training=True, rng=np.random.default_rng(5)), m.trainable(), max_coords=40)
    assert report.checked > 0
    assert report.worst_rel_error < 1e-3, report


# ---------------------------------------------------------------- HFT


def test_theta_and_phi_stay_probability_vectors(small_text, monkeypatch):
    _, s = small_text
    feats = prepare_features(s, need_embeddings=False, layouts=())
    seen = []
    original = HFTModel.begin_epoch

    def check(self, epoch):
        original(self, epoch)
        for mat in (self.theta(), self.phi()):
            assert np.all(mat >= 0)
            np.testing.assert_allclose(mat.sum(axis=1), 1.0, rtol=0, atol=1e-9)
        seen.append(epoch)

    monkeypatch.setattr(HFTModel, "begin_epoch", check)
    res = train("hft", s, feats, TrainConfig(latent_dim=4, lr=5e-2, max_epochs=4, patience=4))
    assert seen == list(range(1, res.epochs_run + 1))


def _word_corpus(words, items=None):
    words = np.asarray(words, dtype=np.int64)
    items = np.zeros(len(words), dtype=np.int64) if items is None else np.asarray(items, dtype=np.int64)
    return TokenCorpus(words, np.array([0, len(words)]), items)


def _hft(corpus, vocab_size, latent_dim, n_items=1, seed=0):
    cfg = TrainConfig(latent_dim=latent_dim, seed=seed)
    return HFTModel(1, n_items, cfg, 3.0, np.random.default_rng([seed, 0]), corpus=corpus, vocab_size=vocab_size)


def test_resample_with_one_topic_is_forced():
    m = _hft(_word_corpus(np.arange(50) % 7), vocab_size=7, latent_dim=1)
    assert np.all(hft_resample(m, seed=3) == 0)


def test_resample_is_seeded():
    m = _hft(_word_corpus(np.arange(500) % 7), vocab_size=7, latent_dim=3)
    np.testing.assert_array_equal(hft_resample(m, seed=4), hft_resample(m, seed=4))


def test_resample_matches_analytic_posterior():
    vocab, w, draws = 5, 2, 10_000
    m = _hft(_word_corpus(np.full(draws, w)), vocab_size=vocab, latent_dim=2)
    m.params["gamma_item"].value[:] = 0.0  # uniform theta
    psi = np.zeros((2, vocab))
    psi[0, w] = 10.0
    m.params["psi"].value = psi
    phi = m.phi()
    expected = phi[0, w] / (phi[0, w] + phi[1, w])
    z = hft_resample(m, seed=0)
    assert abs(np.mean(z == 0) - expected) < 0.02


def test_single_topic_likelihood_peaks_at_unigram_distribution():
    words = np.array([0, 0, 0, 1, 2, 2, 3, 3, 3, 3])
    m = _hft(_word_corpus(words), vocab_size=4, latent_dim=1)
    counts = np.bincount(words, minlength=4)
    m.params["psi"].value = np.log(counts / counts.sum())[None, :]
    psi = m.params["psi"]
    with ad.Tape() as tape:
        lik = m.topic_loglik(np.array([0]))
    tape.backward(lik, [psi])
    np.testing.assert_allclose(psi.grad, 0.0, atol=1e-12)
    np.testing.assert_allclose(m.phi()[0], counts / counts.sum(), atol=1e-12)


def test_gradient_phase_does_not_increase_objective():
    p = synthetic.planted(n_users=15, n_items=10, n_interactions=50, with_text=True, topic_words=6, seed=2)
    s = split(p.dataset, 0)
    feats = prepare_features(s, need_embeddings=False, layouts=())
    m = build_model("hft", s, TrainConfig(latent_dim=2, mu=1.0), feats)
    u, i, r = s.arrays("train")
    full = Batch(u, i, r, np.arange(len(r)))
    params = m.trainable()
    for _ in range(5):
        m.resample()
        before = float(hft_objective(m, full).value)
        for _ in range(10):
            with ad.Tape() as tape:
                loss = hft_objective(m, full)
            tape.backward(loss, params.values())
            for prm in params.values():
                prm.value -= 1e-3 * prm.grad
        assert float(hft_objective(m, full).value) <= before


# ---------------------------------------------------------------- NARRE attention


def test_narre_attention_normalization(tiny):
    s, feats = tiny
    m = build_model("narre", s, TINY, feats)
    for side, docs in (("user", feats.per_review.users), ("item", feats.per_review.items)):
        ids = np.arange(docs.shape[0])
        w = m.attention(side, ids)
        present = (docs != 0).any(axis=-1)
        assert np.all(w[~present] == 0.0)
        has = present.any(axis=1)
        np.testing.assert_allclose(w[has].sum(axis=1), 1.0, rtol=0, atol=1e-9)
        single = present.sum(axis=1) == 1
        np.testing.assert_array_equal(w[single][present[single]], 1.0)


def test_narre_entity_without_reviews_has_zero_latent(tiny):
    s, feats = tiny
    pr = feats.per_review
    users = pr.users.copy()
    users[0] = 0
    partners = pr.user_partners.copy()
    partners[0] = -1
    docs = ReviewDocs(Layout.PER_REVIEW, users, pr.items, partners, pr.item_partners)
    m = build_model("narre", s, TINY, replace(feats, per_review=docs))
    latent, weights = m._side("user", np.array([0, 1]))
    assert np.all(latent.value[0] == 0.0)
    assert np.all(weights.value[0] == 0.0)


# ---------------------------------------------------------------- trim_padding


@settings(max_examples=40, deadline=None)
@given(
    lengths=st.lists(st.integers(0, 12), min_size=1, max_size=5),
    width=st.sampled_from([1, 3, 5]),
    seed=st.integers(0, 2**16),
)
def test_trim_padding_keeps_encoding(lengths, width, seed):
    rng = np.random.default_rng(seed)
    docs = np.zeros((len(lengths), 16), dtype=np.int64)
    for row, n in enumerate(lengths):
        docs[row, :n] = rng.integers(1, 9, n)
    table = rng.normal(size=(9, 3))
    table[0] = 0.0
    filters = ad.Tensor(rng.normal(size=(width, 3, 4)))
    full = ad.conv_relu_max(ad.embed_lookup(ad.Tensor(table), docs), filters).value
    cut = ad.conv_relu_max(ad.embed_lookup(ad.Tensor(table), trim_padding(docs, width)), filters).value
    # summation order may differ with the array width, so allow rounding
    np.testing.assert_allclose(full, cut, rtol=0, atol=1e-12)


# ---------------------------------------------------------------- fallback


def test_unseen_entities_fall_back_to_available_biases():
    rows = [(f"u{u}", f"i{i}", 1 + (u + i) % 5) for u in range(6) for i in range(5)]
    d = make_dataset(rows)
    s = split(d, 0)
    # force one user and one item to be absent from training
    train_rows = s.train[(d.users[s.train] != 0) & (d.items[s.train] != 0)]
    s = SplitDataset(d, train_rows, s.validation, s.test, 0)
    m = build_model("bias", s, TINY)
    _randomize_biases(m)
    assert not m.seen_users[0] and not m.seen_items[0]
    alpha = float(m.params["alpha"].value)
    bu, bi = m.params["beta_user"].value, m.params["beta_item"].value
    got = m.predict(np.array([0, 0, 2, 2]), np.array([0, 3, 0, 3]))
    np.testing.assert_allclose(got, [alpha, alpha + bi[3], alpha + bu[2], alpha + bu[2] + bi[3]], rtol=0, atol=1e-15)


def test_unseen_fallback_without_biases_uses_training_mean(tiny):
    s, feats = tiny
    m = build_model("deepconn", s, TINY, feats)
    m.seen_items = m.seen_items.copy()
    m.seen_items[1] = False
    got = m.predict(np.array([0]), np.array([1]))
    assert got[0] == pytest.approx(s.dataset.ratings[s.train].mean(), abs=1e-12)


# ---------------------------------------------------------------- training loop


def test_bias_model_fits_constant_ratings():
    rows = [(f"u{u}", f"i{(u * 7 + j) % 40}", 4.0) for u in range(50) for j in range(6)]
    s = split(make_dataset(rows), 0)
    res = train("bias", s, None, TrainConfig(max_epochs=20))
    assert res.epochs_run <= 20
    assert min(res.val_trace) < 1e-4


def test_bias_fit_for_single_pair_converges_to_mean_rating():
    # one user and one item: the squared-loss minimizer is the mean rating
    rows = [("u", "i", r) for r in (1, 2, 2, 4, 5, 3, 3, 4, 1, 5, 2, 4)]
    s = split(make_dataset(rows), 0)
    m = build_model("bias", s, TrainConfig(l2=0.0))
    m.params["alpha"].value = np.asarray(0.0)
    u, i, r = s.arrays("train")
    batch = Batch(u, i, r, np.arange(len(r)))
    params = m.trainable()
    opt = Adam(params, 5e-2)
    for _ in range(1500):
        with ad.Tape() as tape:
            loss = m.loss(batch)
        tape.backward(loss, params.values())
        opt.step()
    fit = m.predict(u[:1], i[:1])[0]
    assert fit == pytest.approx(r.mean(), abs=1e-3)


def test_patience_stops_two_epochs_after_best(tiny, monkeypatch):
    s, _ = tiny
    _, _, va_r = s.arrays("validation")
    calls = []

    def worsening(self, users, items, chunk=4096):
        calls.append(1)
        return va_r + 0.1 * len(calls)

    monkeypatch.setattr(BiasModel, "predict", worsening)
    res = train("bias", s, None, replace(TINY, patience=2, max_epochs=10))
    assert res.best_epoch == 1
    assert res.epochs_run == res.best_epoch + 2


def test_best_epoch_parameters_are_restored(tiny):
    s, _ = tiny
    res = train("mf", s, None, replace(TINY, lr=0.3, max_epochs=8, patience=8))
    u, i, r = s.arrays("validation")
    pred = np.clip(res.model.predict(u, i), 1, 5)
    assert np.mean((pred - r) ** 2) == pytest.approx(res.best_val_mse, abs=1e-12)


def test_divergence_reports_epoch_and_batch():
    rows = [(f"u{u}", f"i{i}", 1e200 * (1 + (u * i) % 3)) for u in range(8) for i in range(6)]
    s = split(make_dataset(rows, scale=(0.0, 1e201)), 0)
    with pytest.raises(TrainingDiverged) as exc:
        train("mf", s, None, TINY)
    assert (exc.value.epoch, exc.value.batch) == (1, 0)


@pytest.mark.parametrize("kind", ["neumf", "hft", "deepconn", "narre"])
def test_training_is_bitwise_deterministic(tiny, kind):
    s, feats = tiny
    cfg = replace(TINY, max_epochs=2)
    a, b = train(kind, s, feats, cfg), train(kind, s, feats, cfg)
    assert a.val_trace == b.val_trace
    for k, p in a.model.params.items():
        np.testing.assert_array_equal(p.value, b.model.params[k].value)


def test_different_seeds_give_different_initializations(tiny):
    s, _ = tiny
    a = build_model("mf", s, TINY)
    b = build_model("mf", s, replace(TINY, seed=1))
    assert not np.array_equal(a.params["gamma_user"].value, b.params["gamma_user"].value)


def test_state_round_trip(tiny):
    s, feats = tiny
    res = train("narre", s, feats, replace(TINY, max_epochs=1))
    fresh = build_model("narre", s, replace(TINY, seed=9), feats)
    fresh.load_state(res.model.state())
    u, i = _all_pairs(s)
    np.testing.assert_array_equal(fresh.predict(u, i), res.model.predict(u, i))


def test_load_state_rejects_wrong_shapes(tiny):
    s, _ = tiny
    state = build_model("mf", s, replace(TINY, latent_dim=2)).state()
    with pytest.raises(ValueError, match="shape mismatch"):
        build_model("mf", s, replace(TINY, latent_dim=3)).load_state(state)


def test_text_models_require_features(tiny):
    s, _ = tiny
    with pytest.raises(ValueError, match="text features"):
        build_model("deepconn", s, TINY)
    with pytest.raises(ValueError, match="unknown model"):
        build_model("transnet", s, TINY)


def test_invalid_config_is_rejected():
    with pytest.raises(ValueError, match="filter_width"):
        TrainConfig(filter_width=2).validate()
    with pytest.raises(ValueError, match="dropout"):
        TrainConfig(dropout=1.0).validate()

