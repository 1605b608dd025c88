"""Command line: prep | train | eval | sweep | report.

Every subcommand reads an :class:`~reviewbench.config.ExperimentConfig` from
``--config`` plus per-key flags (``--latent-dims 4,8`` overrides the file's
``latent_dims``). Prepared data lives in a content-addressed cache under
``<out_dir>/cache/<key>/``; the key covers the input file's bytes and every
setting that shapes the artifacts, so a changed input can never hit a stale
entry.

Exit codes: 0 success, 1 usage or config error, 2 data error (including a
checkpoint that does not match the current data), 3 training divergence.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import math
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import __version__
from .autodiff import load_params, save_params
from .config import (
    ALL_MODELS,
    ConfigError,
    ExperimentConfig,
    coerce,
    config_keys,
    load_config,
)
from .corpus import (
    DataError,
    Dataset,
    SplitDataset,
    k_core,
    load_interactions,
    mask_reviews,
    read_dataset,
    read_split,
    save_dataset,
    save_split,
    split,
)
from .eval import (
    MetricReport,
    SweepResult,
    bucket_improvement,
    density_sweep,
    evaluate,
    mask_sweep,
)
from .models import MODELS, TrainConfig, TrainingDiverged, build_model
from .search import GridSearchFailed, config_id, grid_search
from .text import (
    Caps,
    Layout,
    ReviewDocs,
    TextFeatures,
    TokenCorpus,
    Vocab,
    build_documents,
    build_token_corpus,
    build_vocab,
    length_caps,
    load_embeddings,
    save_embeddings,
    train_embeddings,
)

log = logging.getLogger("reviewbench")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_DIVERGED = 0, 1, 2, 3

RESULTS_COLUMNS = (
    "dataset", "k_core", "mask", "seed", "model", "config_id", "latent_dim", "l2", "dropout", "lr",
    "val_mse", "test_mse", "hr1", "hr1_users", "n_train", "n_test", "dataset_hash",
)  # fmt: skip
TRIALS_COLUMNS = (
    "model", "seed", "config_id", "latent_dim", "l2", "dropout", "val_mse", "best_epoch", "epochs_run", "error",
)  # fmt: skip
BUCKET_COLUMNS = ("dataset", "seed", "model", "freq_lo", "freq_hi", "n_items", "n_test", "improvement")
SWEEP_COLUMNS = (
    "axis", "value", "seed", "n_reviews", "n_users", "n_items", "model", "config_id", "latent_dim", "l2",
    "dropout", "val_mse", "test_mse", "hr1", "note",
)  # fmt: skip
TABLE_COLUMNS = ("dataset", "k_core", "mask", "n_seeds") + ALL_MODELS + ("best",)

SCHEMAS = {
    "results": RESULTS_COLUMNS,
    "trials": TRIALS_COLUMNS,
    "buckets": BUCKET_COLUMNS,
    "sweep": SWEEP_COLUMNS,
    "table1": TABLE_COLUMNS,
    "table2": TABLE_COLUMNS,
}
SCHEMA_LINE = "# reviewbench {name} v1"


class CheckpointMismatch(DataError):
    pass


# ------------------------------------------------------------------- CSV I/O


def _cell(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return "" if math.isnan(v) else repr(v)
    return str(v)


def write_csv(path: Path, name: str, rows: Iterable[dict]) -> int:
    """Write rows under the versioned schema ``name``; returns the row count."""
    columns = SCHEMAS[name]
    path.parent.mkdir(parents=True, exist_ok=True)
    n = 0
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(SCHEMA_LINE.format(name=name) + "\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for row in rows:
            w.writerow([_cell(row.get(c)) for c in columns])
            n += 1
    return n


def read_csv(path: Path, name: str) -> list[dict[str, str]]:
    with open(path, encoding="utf-8", newline="") as fh:
        first = fh.readline().rstrip("\n")
        if first != SCHEMA_LINE.format(name=name):
            raise DataError(f"{path}: expected schema line {SCHEMA_LINE.format(name=name)!r}, found {first!r}")
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != SCHEMAS[name]:
            raise DataError(f"{path}: columns do not match the {name} v1 schema")
        return list(reader)


def write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def run_manifest(cfg: ExperimentConfig, command: str, outputs: dict[str, int]) -> dict:
    return {
        "command": command,
        "version": __version__,
        "config_digest": cfg.digest(),
        "config": cfg.dumps(),
        "outputs": outputs,
    }


# --------------------------------------------------------------------- cache


def _file_sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def needs_of(kinds: Sequence[str]) -> set[str]:
    return {MODELS[k].text for k in kinds} - {None}


@dataclass
class Prepared:
    split: SplitDataset
    features: TextFeatures
    directory: Path
    key: str
    hit: bool


def cache_key(cfg: ExperimentConfig, seed: int, data_sha: str) -> str:
    inputs = {
        "cache": 1,
        "data_sha256": data_sha,
        "fields": cfg.field_map,
        "scale": list(cfg.rating_scale),
        "k_core": cfg.k_core,
        "mask": cfg.mask,
        "seed": seed,
        "emb_dim": cfg.emb_dim,
        "vocab_size": cfg.vocab_size,
    }
    return hashlib.sha256(json.dumps(inputs, sort_keys=True).encode()).hexdigest()


def _data_path(cfg: ExperimentConfig) -> Path:
    if not cfg.data:
        raise ConfigError("no data file given (set 'data' in the config or pass --data)")
    path = Path(cfg.data)
    if not path.is_file():
        raise DataError(f"data file {path} does not exist")
    return path


def load_source(cfg: ExperimentConfig) -> Dataset:
    path = _data_path(cfg)
    d, report = load_interactions(path, cfg.field_map, cfg.rating_scale)
    if len(d) == 0:
        raise DataError(f"{path}: no usable interactions ({report})")
    return d


def prepare(cfg: ExperimentConfig, seed: int, kinds: Sequence[str]) -> Prepared:
    """Load or build the split and the text artifacts ``kinds`` need.

    Artifacts are written once per cache directory; later runs read them
    back, and only artifacts missing so far are built and added.
    """
    data_path = _data_path(cfg)
    key = cache_key(cfg, seed, _file_sha256(data_path))
    directory = Path(cfg.out_dir) / "cache" / key[:16]
    directory.mkdir(parents=True, exist_ok=True)
    manifest_path = directory / "manifest.json"
    manifest = json.loads(manifest_path.read_text()) if manifest_path.exists() else {}
    if manifest and manifest.get("key") != key:
        raise DataError(f"cache directory {directory} belongs to key {manifest.get('key')}, not {key}")
    hit = True

    if (directory / "dataset.tsv").exists():
        d = read_dataset(directory / "dataset.tsv")
        s = read_split(d, directory / "split.txt")
    else:
        hit = False
        core = k_core(load_source(cfg), cfg.k_core)
        s = mask_reviews(split(core, seed), cfg.mask, seed) if cfg.mask > 0 else split(core, seed)
        save_dataset(s.dataset, directory / "dataset.tsv")
        save_split(s, directory / "split.txt")

    vocab_path = directory / "vocab.tsv"
    if vocab_path.exists():
        vocab = _read_vocab(vocab_path)
        caps = Caps(*manifest["caps"])
    else:
        hit = False
        vocab = build_vocab(s.train_reviews(), cfg.vocab_size)
        caps = length_caps(s)
        _write_vocab(vocab, vocab_path)

    needs = needs_of(kinds)
    emb = concat = per_review = corpus = None
    if needs & {"concat", "per_review"}:
        emb_path = directory / "embeddings.bin"
        if emb_path.exists():
            emb, _ = load_embeddings(emb_path)
        else:
            hit = False
            sentences = [vocab.encode(r) for r in s.train_reviews() if r]
            emb = (
                train_embeddings(sentences, len(vocab), dim=cfg.emb_dim, seed=seed)
                if sentences
                else np.zeros((len(vocab), cfg.emb_dim))
            )
            save_embeddings(emb, vocab, emb_path)
    for layout in (Layout.CONCAT, Layout.PER_REVIEW):
        if layout.value not in needs:
            continue
        if (directory / f"docs_{layout.value}_users.npy").exists():
            docs = ReviewDocs.load(directory, layout)
        else:
            hit = False
            docs = build_documents(s, vocab, caps, layout)
            docs.save(directory)
        if layout is Layout.CONCAT:
            concat = docs
        else:
            per_review = docs
    if "corpus" in needs:
        if (directory / "corpus_words.npy").exists():
            corpus = TokenCorpus(*(np.load(directory / f"corpus_{n}.npy") for n in ("words", "offsets", "items")))
        else:
            hit = False
            corpus = build_token_corpus(s, vocab)
            for n in ("words", "offsets", "items"):
                np.save(directory / f"corpus_{n}.npy", getattr(corpus, n))

    new_manifest = {
        "key": key,
        "seed": seed,
        "k_core": cfg.k_core,
        "mask": cfg.mask,
        "dataset_hash": s.dataset.fingerprint(),
        "vocab_hash": vocab.fingerprint(),
        "caps": list(caps),
        "artifacts": sorted(p.name for p in directory.iterdir() if p.name != "manifest.json"),
    }
    if new_manifest != manifest:
        write_json(manifest_path, new_manifest)
    features = TextFeatures(vocab, caps, emb, concat, per_review, corpus)
    return Prepared(s, features, directory, key, hit)


def _write_vocab(vocab: Vocab, path: Path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for tok, count in zip(vocab.tokens, vocab.counts):
            fh.write(f"{tok}\t{count}\n")


def _read_vocab(path: Path) -> Vocab:
    tokens, counts = [], []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            tok, count = line.rstrip("\n").split("\t")
            tokens.append(tok)
            counts.append(int(count))
    return Vocab(tuple(tokens), tuple(counts))


# --------------------------------------------------------------- checkpoints


def checkpoint_dir(cfg: ExperimentConfig, prep: Prepared, kind: str) -> Path:
    return Path(cfg.out_dir) / "models" / prep.key[:16] / kind.replace("+", "p")


def save_checkpoint(directory: Path, kind: str, model, prep: Prepared, val_mse: float, best_epoch: int) -> None:
    directory.mkdir(parents=True, exist_ok=True)
    save_params(model.state(), directory / "params.bin")
    write_json(
        directory / "manifest.json",
        {
            "kind": kind,
            "config": model.cfg.to_dict(),
            "config_id": config_id(model.cfg),
            "dataset_hash": prep.split.dataset.fingerprint(),
            "vocab_hash": prep.features.vocab.fingerprint(),
            "cache_key": prep.key,
            "val_mse": val_mse,
            "best_epoch": best_epoch,
        },
    )


def load_checkpoint(directory: Path, prep: Prepared):
    """Rebuild a trained model, refusing artifacts made from different data or vocabulary."""
    manifest_path = directory / "manifest.json"
    if not manifest_path.exists():
        raise DataError(f"no checkpoint in {directory}; run 'train' first")
    manifest = json.loads(manifest_path.read_text())
    current = {"dataset_hash": prep.split.dataset.fingerprint(), "vocab_hash": prep.features.vocab.fingerprint()}
    for name, value in current.items():
        if manifest[name] != value:
            raise CheckpointMismatch(
                f"checkpoint {directory} was trained on different data: "
                f"{name} in checkpoint {manifest[name]} vs current {value}"
            )
    cfg = TrainConfig.from_dict(manifest["config"])
    model = build_model(manifest["kind"], prep.split, cfg, prep.features)
    try:
        model.load_state(load_params(directory / "params.bin"))
    except (KeyError, ValueError) as exc:
        raise CheckpointMismatch(f"checkpoint {directory} does not fit a {manifest['kind']} model: {exc}") from None
    return model, manifest


# ------------------------------------------------------------------ commands


def _label(cfg: ExperimentConfig) -> str:
    return Path(cfg.data).stem


def _kinds(cfg: ExperimentConfig) -> tuple[str, ...]:
    return (cfg.model,) if cfg.model else cfg.models


def cmd_prep(cfg: ExperimentConfig, args) -> int:
    for seed in cfg.seeds:
        prep = prepare(cfg, seed, cfg.models)
        print(f"seed {seed}: {'cache hit' if prep.hit else 'built'} {prep.directory}")
    return EXIT_OK


def cmd_train(cfg: ExperimentConfig, args) -> int:
    kinds = _kinds(cfg)
    for seed in cfg.seeds:
        prep = prepare(cfg, seed, kinds)
        for kind in kinds:
            res = grid_search(prep.split, kind, prep.features, cfg.grid, cfg.train_config(seed), cfg.max_jobs)
            out = checkpoint_dir(cfg, prep, kind)
            save_checkpoint(out, kind, res.best.model, prep, res.best.best_val_mse, res.best.best_epoch)
            write_csv(out / "trials.csv", "trials", ({"model": kind, "seed": seed, **t.row()} for t in res.trials))
            print(f"seed {seed} {kind}: val MSE {res.best.best_val_mse:.5f} ({config_id(res.best.cfg)}) -> {out}")
    return EXIT_OK


def _result_row(cfg: ExperimentConfig, seed: int, r: MetricReport) -> dict:
    return {"dataset": _label(cfg), "k_core": cfg.k_core, "mask": cfg.mask, "lr": r.cfg.lr, **r.row(), "seed": seed}


def cmd_eval(cfg: ExperimentConfig, args) -> int:
    kinds = _kinds(cfg)
    rows, bucket_rows = [], []
    for seed in cfg.seeds:
        prep = prepare(cfg, seed, kinds)
        reports = {}
        for kind in kinds:
            directory = Path(args.checkpoint) if args.checkpoint else checkpoint_dir(cfg, prep, kind)
            model, manifest = load_checkpoint(directory, prep)
            reports[kind] = evaluate(model, prep.split, manifest["val_mse"], cfg.hr_seed)
            rows.append(_result_row(cfg, seed, reports[kind]))
            print(f"seed {seed} {kind}: test MSE {reports[kind].test_mse:.5f}")
        if "bias" in reports:
            for kind, r in reports.items():
                for b in bucket_improvement(r, reports["bias"], prep.split):
                    bucket_rows.append(
                        {"dataset": _label(cfg), "seed": seed, "model": kind, "freq_lo": b.lo, "freq_hi": b.hi,
                         "n_items": b.n_items, "n_test": b.n_test, "improvement": b.improvement}  # fmt: skip
                    )
    out = Path(cfg.out_dir)
    outputs = {"results.csv": write_csv(out / "results.csv", "results", rows)}
    if bucket_rows:
        outputs["buckets.csv"] = write_csv(out / "buckets.csv", "buckets", bucket_rows)
    write_json(out / "results.manifest.json", run_manifest(cfg, "eval", outputs))
    return EXIT_OK


def sweep_rows(result: SweepResult) -> list[dict]:
    rows = []
    for p in result.points:
        base = {"axis": result.axis, "value": p.value, "seed": result.seed, "n_reviews": p.stats.reviews,
                "n_users": p.stats.users, "n_items": p.stats.items, "note": p.note}  # fmt: skip
        if not p.reports:
            rows.append(base)
        for kind, r in p.reports.items():
            hr = "" if r.hr1 is None or r.hr1.value is None else r.hr1.value
            rows.append({**base, "model": kind, "config_id": config_id(r.cfg), "latent_dim": r.cfg.latent_dim,
                         "l2": r.cfg.l2, "dropout": r.cfg.dropout, "val_mse": r.val_mse, "test_mse": r.test_mse,
                         "hr1": hr})  # fmt: skip
    return rows


def cmd_sweep(cfg: ExperimentConfig, args) -> int:
    rows = []
    for seed in cfg.seeds:
        base = cfg.train_config(seed)
        if cfg.sweep == "density":
            result = density_sweep(
                load_source(cfg), cfg.models, cfg.grid, seed, base, cfg.retune, cfg.emb_dim, cfg.max_jobs,
                None if cfg.k_max < 0 else cfg.k_max,
            )  # fmt: skip
        else:
            s = split(k_core(load_source(cfg), cfg.k_core), seed)
            result = mask_sweep(s, cfg.models, cfg.mask_values, seed, cfg.grid, base, cfg.emb_dim, cfg.max_jobs)
        rows += sweep_rows(result)
    out = Path(cfg.out_dir)
    name = f"sweep_{cfg.sweep}.csv"
    outputs = {name: write_csv(out / name, "sweep", rows)}
    write_json(out / f"sweep_{cfg.sweep}.manifest.json", run_manifest(cfg, "sweep", outputs))
    print(f"wrote {len(rows)} rows to {out / name}")
    return EXIT_OK


def summarize(rows: Sequence[dict[str, str]], metric: str, lower_is_better: bool) -> list[dict]:
    """One line per (dataset, k_core, mask): the seed-averaged metric of each model."""
    groups: dict[tuple, dict[str, list[float]]] = {}
    seeds: dict[tuple, set] = {}
    for r in rows:
        key = (r["dataset"], r["k_core"], r["mask"])
        groups.setdefault(key, {})
        seeds.setdefault(key, set()).add(r["seed"])
        if r[metric] != "":
            groups[key].setdefault(r["model"], []).append(float(r[metric]))
    out = []
    for key in sorted(groups):
        means = {m: float(np.mean(v)) for m, v in groups[key].items()}
        line = {"dataset": key[0], "k_core": key[1], "mask": key[2], "n_seeds": len(seeds[key])}
        for m in ALL_MODELS:
            line[m] = f"{means[m]:.4f}" if m in means else ""
        if means:
            pick = min if lower_is_better else max
            line["best"] = pick(sorted(means), key=lambda m: means[m])
        out.append(line)
    return out


def cmd_report(cfg: ExperimentConfig, args) -> int:
    paths = [Path(p) for p in args.inputs] or [Path(cfg.out_dir) / "results.csv"]
    rows = []
    for p in paths:
        if not p.is_file():
            raise DataError(f"results file {p} does not exist")
        rows += read_csv(p, "results")
    out = Path(args.report_dir or cfg.out_dir)
    t1 = summarize(rows, "test_mse", lower_is_better=True)
    t2 = summarize(rows, "hr1", lower_is_better=False)
    outputs = {"table1.csv": write_csv(out / "table1.csv", "table1", t1)}
    outputs["table2.csv"] = write_csv(out / "table2.csv", "table2", t2)
    write_json(out / "report.manifest.json", run_manifest(cfg, "report", outputs))
    for title, table in (("Test MSE", t1), ("HR@1", t2)):
        print(title)
        print(format_table(table))
    return EXIT_OK


def format_table(rows: Sequence[dict]) -> str:
    present = [m for m in ALL_MODELS if any(r.get(m) for r in rows)]
    cols = ["dataset", "k_core", "mask", *present, "best"]
    cells = [cols] + [[str(r.get(c, "")) for c in cols] for r in rows]
    widths = [max(len(line[j]) for line in cells) for j in range(len(cols))]
    return "\n".join("  ".join(v.ljust(w) for v, w in zip(line, widths)).rstrip() for line in cells)


COMMANDS = {"prep": cmd_prep, "train": cmd_train, "eval": cmd_eval, "sweep": cmd_sweep, "report": cmd_report}


# ----------------------------------------------------------------- argparse


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="key = value config file")
    common.add_argument("-v", "--verbose", action="count", default=0)
    keys = common.add_argument_group("config keys (override the file)")
    for key in config_keys():
        if key == "schema_version":
            continue
        keys.add_argument("--" + key.replace("_", "-"), dest=f"key_{key}", metavar="VALUE")
    parser = _Parser(prog="reviewbench", description="Review-based rating prediction benchmark.")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    sub.add_parser("prep", parents=[common], help="build and cache datasets, vocabulary and documents")
    sub.add_parser("train", parents=[common], help="grid-search one or more models and save checkpoints")
    ev = sub.add_parser("eval", parents=[common], help="score saved checkpoints on the test partition")
    ev.add_argument("--checkpoint", help="checkpoint directory (default: the one 'train' writes)")
    sub.add_parser("sweep", parents=[common], help="run the density or masking sweep")
    rep = sub.add_parser("report", parents=[common], help="aggregate results CSVs into summary tables")
    rep.add_argument("inputs", nargs="*", help="results CSVs (default: <out_dir>/results.csv)")
    rep.add_argument("--report-dir", help="where to write table1.csv and table2.csv (default: out_dir)")
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(name)s: %(message)s"
    )
    try:
        overrides = {k[4:]: coerce(k[4:], v) for k, v in vars(args).items() if k.startswith("key_") and v is not None}
        cfg = load_config(args.config, overrides)
        return COMMANDS[args.command](cfg, args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (TrainingDiverged, GridSearchFailed) as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
