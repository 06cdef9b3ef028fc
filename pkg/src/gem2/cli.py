"""``gem2`` command-line entry point.

Exit codes: 0 success, 2 input error, 3 numeric failure, 4 config mismatch.
``GEM2_THREADS`` caps the BLAS thread pool.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import sys
from contextlib import nullcontext
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import bench
from .errors import ConfigError, ConfigMismatchError, Gem2Error, InputError, NumericError
from .featurize import (
    FeaturizerConfig,
    MoleculeRecord,
    featurize,
    load_features,
    read_jsonl,
    save_features,
    write_jsonl,
)
from .model import GEM2, ModelConfig, attention_weights, canonical_json, load_checkpoint, save_checkpoint
from .synth import LABEL_KINDS, synthetic_dataset
from .train import TargetScaler, TrainConfig, eval_grouped, split_records, train

logger = logging.getLogger("gem2")

EXIT_OK, EXIT_INPUT, EXIT_NUMERIC, EXIT_MISMATCH = 0, 2, 3, 4
MANIFEST = "manifest.json"
CHECKPOINT = "checkpoint.gem2ck"
RESOLVED_CONFIG = "config.resolved.json"
METRICS = "metrics.jsonl"


# --- run configuration ----------------------------------------------------------------

@dataclass
class RunConfig:
    train_data: str
    output_dir: str
    valid_data: str | None = None
    feature_cache: str | None = None
    seed: int = 0
    model: dict = field(default_factory=dict)
    train: dict = field(default_factory=dict)
    features: dict = field(default_factory=dict)

    FIELDS = ("train_data", "output_dir", "valid_data", "feature_cache", "seed", "model", "train", "features")

    @classmethod
    def from_dict(cls, d, base_dir="."):
        if not isinstance(d, dict):
            raise ConfigError("run config must be a JSON object")
        unknown = set(d) - set(cls.FIELDS)
        if unknown:
            raise ConfigError(f"unknown run config fields: {sorted(unknown)}")
        for key in ("train_data", "output_dir"):
            if key not in d:
                raise ConfigError(f"run config needs {key!r}")
        run = cls(**d)
        for key in ("train_data", "output_dir", "valid_data", "feature_cache"):
            value = getattr(run, key)
            if value is not None and not os.path.isabs(value):
                setattr(run, key, os.path.normpath(os.path.join(base_dir, value)))
        return run

    @classmethod
    def load(cls, path):
        try:
            with open(path, encoding="utf-8") as fh:
                d = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
        return cls.from_dict(d, os.path.dirname(os.path.abspath(path)))

    def resolve(self):
        """Fully-specified (featurizer, model, train) configs; the run seed wins over nested seeds."""
        fc = FeaturizerConfig.from_dict(self.features) if self.features else FeaturizerConfig()
        model = dict(self.model)
        widths = list(fc.widths)
        if "input_widths" in model and list(model["input_widths"]) != widths:
            raise ConfigError(f"model input_widths {model['input_widths']} disagree with featurizer widths {widths}")
        model["input_widths"] = widths
        scalars = {k: model.pop(k) for k in ("hidden", "heads", "dropout") if isinstance(model.get(k), (int, float))}
        mc = ModelConfig.make(**scalars, **model) if scalars else ModelConfig.from_dict(model)
        tc = TrainConfig.from_dict({**self.train, "seed": self.seed})
        return fc, mc, tc

    def resolved_dict(self):
        fc, mc, tc = self.resolve()
        return {
            "train_data": self.train_data,
            "valid_data": self.valid_data,
            "feature_cache": self.feature_cache,
            "output_dir": self.output_dir,
            "seed": self.seed,
            "features": fc.to_dict(),
            "model": mc.to_dict(),
            "train": tc.to_dict(),
        }


# --- featurization cache ----------------------------------------------------------------

def record_hash(record, fc):
    payload = canonical_json({"record": record.to_dict(), "features": fc.to_dict()})
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()


def _cache_name(mol_id):
    return hashlib.sha256(mol_id.encode("utf-8")).hexdigest()[:20] + ".gem2fs"


def _read_manifest(out_dir):
    path = Path(out_dir) / MANIFEST
    if not path.exists():
        return {}
    with open(path, encoding="utf-8") as fh:
        return {e["id"]: e for e in json.load(fh)["entries"]}


def featurize_file(input_path, out_dir, fc=None, skip_bad=False):
    """Featurize every record of a JSON-lines file into ``out_dir``.

    Returns ``(manifest, stats)``. Entries whose content hash matches the
    existing manifest are not recomputed.
    """
    fc = fc or FeaturizerConfig()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    previous = _read_manifest(out)
    entries, seen = [], {}
    stats = {"written": 0, "unchanged": 0, "bad": 0}
    with open(input_path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                record = MoleculeRecord.from_dict(json.loads(line))
            except (json.JSONDecodeError, Gem2Error) as exc:
                if not skip_bad:
                    raise InputError(f"{input_path}:{lineno}: {exc}") from exc
                logger.warning("%s:%d: skipped (%s)", input_path, lineno, exc)
                stats["bad"] += 1
                continue
            mol_id = record.id or f"line-{lineno}"
            if mol_id in seen:
                raise InputError(f"{input_path}:{lineno}: duplicate molecule id {mol_id!r} (first on line {seen[mol_id]})")
            digest = record_hash(record, fc)
            name = _cache_name(mol_id)
            old = previous.get(mol_id)
            if old and old["hash"] == digest and (out / old["file"]).exists():
                stats["unchanged"] += 1
            else:
                try:
                    save_features(out / name, featurize(record, fc))
                except Gem2Error as exc:
                    if not skip_bad:
                        raise InputError(f"{input_path}:{lineno}: {exc}") from exc
                    logger.warning("%s:%d: skipped (%s)", input_path, lineno, exc)
                    stats["bad"] += 1
                    continue
                stats["written"] += 1
            seen[mol_id] = lineno
            entries.append({"id": mol_id, "file": name, "hash": digest, "line": lineno, "num_atoms": record.num_atoms})
    manifest = {"version": 1, "features": fc.to_dict(), "entries": entries}
    with open(out / MANIFEST, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
        fh.write("\n")
    return manifest, stats


def cached_features(records, fc, cache_dir):
    """Features for ``records``, read from a featurize cache when the content hash matches."""
    entries = _read_manifest(cache_dir) if cache_dir else {}
    out = []
    for r in records:
        e = entries.get(r.id)
        if e and e["hash"] == record_hash(r, fc):
            out.append(load_features(Path(cache_dir) / e["file"]))
        else:
            out.append(featurize(r, fc))
    return out


# --- commands -----------------------------------------------------------------------------

def cmd_featurize(args):
    fc = _load_featurizer(args.config)
    manifest, stats = featurize_file(args.input, args.out_dir, fc, args.skip_bad)
    print(f"{len(manifest['entries'])} molecules: {stats['written']} written, "
          f"{stats['unchanged']} unchanged, {stats['bad']} skipped")
    return EXIT_OK


def _load_featurizer(path):
    if not path:
        return FeaturizerConfig()
    with open(path, encoding="utf-8") as fh:
        return FeaturizerConfig.from_dict(json.load(fh))


def cmd_train(args):
    run = RunConfig.load(args.config)
    fc, mc, tc = run.resolve()
    out = Path(run.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / RESOLVED_CONFIG).write_text(json.dumps(run.resolved_dict(), indent=1, sort_keys=True) + "\n")
    records = read_jsonl(run.train_data)
    if run.valid_data:
        train_records, valid_records = records, read_jsonl(run.valid_data)
    else:
        train_records, valid_records = split_records(records, tc.valid_fraction, tc.seed)
    log_path = out / METRICS
    log_path.write_text("")
    try:
        result = train(
            train_records,
            valid_records,
            mc,
            tc,
            fc,
            log_path=log_path,
            train_features=cached_features(train_records, fc, run.feature_cache),
            valid_features=cached_features(valid_records, fc, run.feature_cache),
        )
    except NumericError as exc:
        good = getattr(exc, "checkpoint", None)
        if good is not None:
            model = GEM2(mc)
            model.load_state_dict(good)
            save_checkpoint(out / "checkpoint.last_good.gem2ck", model, fc)
        raise
    result_extra = {**result.extra, "loss": tc.loss, "best_val_metric": result.best_metric}
    save_checkpoint(out / CHECKPOINT, result.model, fc, extra=result_extra)
    print(f"best validation metric {result.best_metric:.6g}; checkpoint {out / CHECKPOINT}")
    return EXIT_OK


def _expected_from(config_path):
    if not config_path:
        return None, None
    fc, mc, _ = RunConfig.load(config_path).resolve()
    return mc, fc


def cmd_eval(args):
    expected_model, expected_features = _expected_from(args.config)
    overrides = {"long_range_level": args.long_range_level} if args.long_range_level is not None else None
    model, fc, echo = load_checkpoint(args.checkpoint, expected_model, expected_features, overrides)
    extra = echo.get("extra", {})
    loss = extra.get("loss", "L1")
    scaler = TargetScaler(extra.get("target_mean", 0.0), extra.get("target_std", 1.0))
    records = read_jsonl(args.dataset)
    report = eval_grouped(model, records, scaler, fc, loss)
    if not args.group_topo:
        report.pop("groups")
    report["long_range_level"] = args.long_range_level
    text = json.dumps(report, indent=1, sort_keys=True) + "\n"
    if args.output:
        Path(args.output).write_text(text)
    sys.stdout.write(text)
    return EXIT_OK


def _int_list(values):
    out = []
    for v in values:
        for part in str(v).split(","):
            if part.strip():
                try:
                    out.append(int(part))
                except ValueError as exc:
                    raise InputError(f"not an integer: {part!r}") from exc
    return out


def cmd_bench(args):
    orders, sizes = _int_list(args.orders), _int_list(args.sizes)
    if not orders or not sizes or min(orders + sizes) < 1:
        raise InputError("--orders and --sizes need positive integers")
    rows = bench.run_bench(orders, sizes, args.mode, args.channels, args.repeats, args.warmup, args.max_tokens)
    fh = open(args.output, "w", newline="", encoding="utf-8") if args.output else nullcontext(sys.stdout)
    with fh as stream:
        writer = csv.DictWriter(stream, fieldnames=["m", "N", "mode", "wall_ns", "mac_count"], lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)
    return EXIT_OK


def cmd_inspect_attention(args):
    model, fc, _ = load_checkpoint(args.checkpoint)
    records = read_jsonl(args.molecule)
    if not records:
        raise InputError(f"{args.molecule}: no molecules")
    if not 0 <= args.record < len(records):
        raise InputError(f"--record {args.record} out of range for {len(records)} molecules")
    record = records[args.record]
    query = _int_list([args.query])
    weights = attention_weights(model, featurize(record, fc), query, args.block, args.axis)
    doc = {
        "molecule": record.id,
        "num_atoms": record.num_atoms,
        "query": query,
        "block": args.block,
        "axis": args.axis,
        "heads": int(weights["per_head"].shape[0]),
        "per_head": weights["per_head"].tolist(),
        "mean": weights["mean"].tolist(),
    }
    sys.stdout.write(json.dumps(doc, indent=1) + "\n")
    return EXIT_OK


def cmd_synth(args):
    if args.count < 0:
        raise InputError("--count must be non-negative")
    records = synthetic_dataset(args.count, args.seed, args.label, args.min_atoms, args.max_atoms)
    write_jsonl(args.output, records)
    labels = np.array([r.label for r in records]) if records else np.zeros(1)
    print(f"wrote {len(records)} molecules to {args.output} (label mean {labels.mean():.4f}, std {labels.std():.4f})")
    return EXIT_OK


# --- argument parsing -------------------------------------------------------------------

def build_parser():
    p = argparse.ArgumentParser(prog="gem2", description="Many-body axial attention models for molecules.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("featurize", help="build a per-molecule feature cache")
    s.add_argument("input", help="molecule records, JSON lines")
    s.add_argument("out_dir")
    s.add_argument("--skip-bad", action="store_true", help="skip malformed lines instead of aborting")
    s.add_argument("--config", help="featurizer config JSON")
    s.set_defaults(func=cmd_featurize)

    s = sub.add_parser("train", help="train a model from a run config")
    s.add_argument("config")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    s.add_argument("checkpoint")
    s.add_argument("dataset")
    s.add_argument("--group-topo", action="store_true", help="report MAE per max topological distance bin")
    s.add_argument("--long-range-level", type=int, help="restrict attention to atoms within k bonds")
    s.add_argument("--config", help="run config the checkpoint must match")
    s.add_argument("--output", help="also write the report here")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("bench", help="time axial or full attention kernels")
    s.add_argument("--orders", nargs="+", default=["2"])
    s.add_argument("--sizes", nargs="+", default=["8", "16", "32", "64"])
    s.add_argument("--mode", choices=bench.MODES, default="axial")
    s.add_argument("--channels", type=int, help="channel width (default 128 axial, 1024 full)")
    s.add_argument("--repeats", type=int, default=5)
    s.add_argument("--warmup", type=int, default=2)
    s.add_argument("--max-tokens", type=int, default=bench.DEFAULT_MAX_TOKENS, help="full-mode size guard on N^m")
    s.add_argument("--output", help="CSV path (default stdout)")
    s.set_defaults(func=cmd_bench)

    s = sub.add_parser("inspect-attention", help="dump attention weights for one query body")
    s.add_argument("checkpoint")
    s.add_argument("molecule", help="JSON lines; the first record is used unless --record is given")
    s.add_argument("--query", required=True, help="comma-separated 0-based atom indices, e.g. 6,7")
    s.add_argument("--block", type=int, default=0, help="0-based block index")
    s.add_argument("--axis", type=int, default=1, help="1-based attended axis")
    s.add_argument("--record", type=int, default=0)
    s.set_defaults(func=cmd_inspect_attention)

    s = sub.add_parser("synth", help="write a synthetic dataset with exact labels")
    s.add_argument("output")
    s.add_argument("--count", type=int, default=200)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--label", choices=LABEL_KINDS, default="angles")
    s.add_argument("--min-atoms", type=int, default=4)
    s.add_argument("--max-atoms", type=int, default=9)
    s.set_defaults(func=cmd_synth)
    return p


def _thread_limit():
    raw = os.environ.get("GEM2_THREADS")
    if not raw:
        return nullcontext()
    try:
        n = int(raw)
    except ValueError:
        raise InputError(f"GEM2_THREADS must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise InputError(f"GEM2_THREADS must be a positive integer, got {raw!r}")
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        with _thread_limit():
            return args.func(args)
    except ConfigMismatchError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MISMATCH
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (Gem2Error, OSError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
