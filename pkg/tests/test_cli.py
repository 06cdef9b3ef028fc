import csv
import json
import os

import numpy as np
import pytest

from gem2.cli import CHECKPOINT, MANIFEST, METRICS, RESOLVED_CONFIG, RunConfig, main
from gem2.errors import ConfigError
from gem2.featurize import FeaturizerConfig, read_jsonl, write_jsonl
from gem2.oracle import count_ops
from gem2.synth import path_molecule, synthetic_dataset

SMALL_FEATURES = {
    "hop": {"lo": 0, "hi": 4, "stride": 0.1, "gamma": 10.0},
    "distance": {"lo": 0, "hi": 4, "stride": 0.1, "gamma": 10.0},
    "angle": {"lo": 0, "hi": 3.2, "stride": 0.4, "gamma": 10.0},
}


def run(argv, capsys=None):
    code = main([str(a) for a in argv])
    out = capsys.readouterr() if capsys is not None else None
    return code, out


def dataset(tmp_path, name="mols.jsonl", records=None):
    path = tmp_path / name
    write_jsonl(path, records if records is not None else synthetic_dataset(3, seed=0))
    return path


def run_config(tmp_path, data, **over):
    doc = {
        "train_data": str(data),
        "output_dir": "out",
        "seed": 1,
        "features": SMALL_FEATURES,
        "model": {"hidden": 8, "heads": 2, "max_order": 2, "num_blocks": 1, "dropout": 0.0},
        "train": {"batch_size": 2, "base_lr": 3e-3, "warmup_epochs": 1, "hold_epochs": 2,
                  "decay_every": 1, "total_epochs": 3, "ema_decay": 0.5},
    }
    doc.update(over)
    path = tmp_path / "run.json"
    path.write_text(json.dumps(doc))
    return path


# --- featurize ----------------------------------------------------------------------------

def test_featurize_empty_input(tmp_path, capsys):
    src = tmp_path / "empty.jsonl"
    src.write_text("")
    code, _ = run(["featurize", src, tmp_path / "cache"], capsys)
    assert code == 0
    assert json.loads((tmp_path / "cache" / MANIFEST).read_text())["entries"] == []


def test_featurize_three_lines_and_idempotence(tmp_path, capsys):
    src = dataset(tmp_path)
    cache = tmp_path / "cache"
    code, out = run(["featurize", src, cache], capsys)
    assert code == 0 and "3 written" in out.out
    entries = json.loads((cache / MANIFEST).read_text())["entries"]
    assert len(entries) == 3 and len({e["id"] for e in entries}) == 3
    assert all((cache / e["file"]).exists() for e in entries)
    code, out = run(["featurize", src, cache], capsys)
    assert code == 0 and "0 written, 3 unchanged" in out.out


def test_featurize_rewrites_changed_record(tmp_path, capsys):
    recs = synthetic_dataset(2, seed=3)
    src = dataset(tmp_path, records=recs)
    run(["featurize", src, tmp_path / "c"], capsys)
    lines = src.read_text().splitlines()
    doc = json.loads(lines[1])
    doc["label"] = 123.0
    src.write_text(lines[0] + "\n" + json.dumps(doc) + "\n")
    _, out = run(["featurize", src, tmp_path / "c"], capsys)
    assert "1 written, 1 unchanged" in out.out


def test_featurize_duplicate_id_names_it(tmp_path, capsys):
    rec = synthetic_dataset(1, seed=0)[0]
    src = dataset(tmp_path, records=[rec, rec])
    code, out = run(["featurize", src, tmp_path / "c"], capsys)
    assert code == 2 and rec.id in out.err and ":2:" in out.err


def test_featurize_bad_line_number_and_skip(tmp_path, capsys):
    src = dataset(tmp_path)
    with open(src, "a") as fh:
        fh.write("{not json\n")
    code, out = run(["featurize", src, tmp_path / "c"], capsys)
    assert code == 2 and ":4:" in out.err
    code, out = run(["featurize", src, tmp_path / "c", "--skip-bad"], capsys)
    assert code == 0 and "1 skipped" in out.out


# --- run config ---------------------------------------------------------------------------

def test_run_config_rejects_unknown_fields(tmp_path):
    with pytest.raises(ConfigError, match="epochs"):
        RunConfig.from_dict({"train_data": "a", "output_dir": "b", "epochs": 3})
    with pytest.raises(ConfigError):
        RunConfig.from_dict({"output_dir": "b"})


def test_train_unknown_nested_field_is_input_error(tmp_path, capsys):
    cfg = run_config(tmp_path, dataset(tmp_path), train={"learning_rate": 1.0})
    code, out = run(["train", cfg], capsys)
    assert code == 2 and "learning_rate" in out.err


def test_run_config_relative_paths(tmp_path):
    run_cfg = RunConfig.load(run_config(tmp_path, "data.jsonl"))
    assert run_cfg.train_data == str(tmp_path / "data.jsonl")
    assert run_cfg.output_dir == str(tmp_path / "out")


# --- train / eval -------------------------------------------------------------------------

@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("trained")
    recs = synthetic_dataset(6, seed=5) + [path_molecule(9, label=2.0, mol_id="path9")]
    data = dataset(tmp, records=recs)
    cfg = run_config(tmp, data)
    assert main(["train", str(cfg)]) == 0
    return tmp, data, cfg


def test_train_writes_artifacts(trained):
    tmp, _, _ = trained
    out = tmp / "out"
    resolved = json.loads((out / RESOLVED_CONFIG).read_text())
    assert resolved["train"]["seed"] == 1 and resolved["model"]["input_widths"] == list(FeaturizerConfig.from_dict(SMALL_FEATURES).widths)
    assert set(resolved) >= {"features", "model", "train", "train_data", "output_dir", "seed"}
    lines = (out / METRICS).read_text().splitlines()
    assert len(lines) == 3 and json.loads(lines[-1])["epoch"] == 2
    assert (out / CHECKPOINT).read_bytes()[:7] == b"GEM2CK\0"


def test_eval_deterministic_bytes(trained, capsys):
    tmp, data, _ = trained
    ckpt = tmp / "out" / CHECKPOINT
    _, first = run(["eval", ckpt, data, "--group-topo", "--output", tmp / "r1.json"], capsys)
    _, second = run(["eval", ckpt, data, "--group-topo", "--output", tmp / "r2.json"], capsys)
    assert first.out == second.out
    assert (tmp / "r1.json").read_bytes() == (tmp / "r2.json").read_bytes()
    report = json.loads(first.out)
    assert report["count"] == 7 and set(report["groups"]) == {"short", "moderate"}


def test_eval_long_range_level_changes_predictions(trained, capsys):
    tmp, data, _ = trained
    ckpt = tmp / "out" / CHECKPOINT
    _, full = run(["eval", ckpt, data], capsys)
    _, local = run(["eval", ckpt, data, "--long-range-level", "1"], capsys)
    assert json.loads(full.out)["overall_mae"] != json.loads(local.out)["overall_mae"]
    assert json.loads(local.out)["long_range_level"] == 1


def test_eval_matching_config_passes(trained, capsys):
    tmp, data, cfg = trained
    code, _ = run(["eval", tmp / "out" / CHECKPOINT, data, "--config", cfg], capsys)
    assert code == 0


def test_eval_config_mismatch_exit_4(trained, tmp_path, capsys):
    tmp, data, _ = trained
    other = run_config(tmp_path, data, model={"hidden": 16, "heads": 2, "max_order": 2, "num_blocks": 1})
    code, out = run(["eval", tmp / "out" / CHECKPOINT, data, "--config", other], capsys)
    assert code == 4 and "hidden" in out.err


def test_eval_missing_checkpoint_exit_2(tmp_path, capsys):
    code, _ = run(["eval", tmp_path / "nope.gem2ck", dataset(tmp_path)], capsys)
    assert code == 2


def test_train_is_deterministic(tmp_path):
    data = dataset(tmp_path, records=synthetic_dataset(4, seed=9))
    outputs = []
    for k in range(2):
        cfg = run_config(tmp_path, data, output_dir=f"o{k}")
        assert main(["train", str(cfg)]) == 0
        outputs.append((tmp_path / f"o{k}" / CHECKPOINT).read_bytes())
    assert outputs[0] == outputs[1]


def test_overfit_model_has_small_training_mae(tmp_path, capsys):
    recs = synthetic_dataset(3, seed=11)
    data = dataset(tmp_path, records=recs)
    cfg = run_config(
        tmp_path, data, valid_data=str(data),
        train={"batch_size": 3, "base_lr": 1e-2, "warmup_epochs": 0, "hold_epochs": 150,
               "decay_every": 25, "total_epochs": 300, "ema_decay": 0.0},
    )
    assert run(["train", cfg], capsys)[0] == 0
    _, out = run(["eval", tmp_path / "out" / CHECKPOINT, data], capsys)
    std = np.std([r.label for r in recs])
    assert json.loads(out.out)["overall_mae"] < 0.02 * std


# --- bench --------------------------------------------------------------------------------

def test_bench_csv_and_mac_counts(tmp_path):
    out = tmp_path / "b.csv"
    code = main(["bench", "--orders", "1,2", "--sizes", "3", "4", "--repeats", "5", "--channels", "4", "--output", str(out)])
    assert code == 0
    rows = list(csv.DictReader(out.open()))
    assert list(rows[0]) == ["m", "N", "mode", "wall_ns", "mac_count"]
    assert [(r["m"], r["N"]) for r in rows] == [("1", "3"), ("1", "4"), ("2", "3"), ("2", "4")]
    for r in rows:
        assert int(r["mac_count"]) == count_ops("axial", int(r["N"]), int(r["m"]), 4)
        assert int(r["wall_ns"]) > 0


def test_bench_full_mode_ratio_and_guard(tmp_path, capsys):
    code, out = run(["bench", "--mode", "full", "--sizes", "16", "--channels", "32", "--repeats", "1", "--warmup", "0"], capsys)
    assert code == 0
    row = list(csv.DictReader(out.out.splitlines()))[0]
    assert int(row["mac_count"]) / count_ops("axial", 16, 2, 32) == 8
    code, out = run(["bench", "--mode", "full", "--sizes", "20", "--max-tokens", "300"], capsys)
    assert code == 2 and "guard" in out.err


def test_bench_rejects_bad_sizes(capsys):
    code, _ = run(["bench", "--sizes", "x"], capsys)
    assert code == 2


# --- inspect-attention --------------------------------------------------------------------

def test_inspect_attention_json(trained, capsys):
    tmp, data, _ = trained
    code, out = run(["inspect-attention", tmp / "out" / CHECKPOINT, data, "--query", "0,1", "--block", "0", "--axis", "1"], capsys)
    assert code == 0
    doc = json.loads(out.out)
    assert doc["query"] == [0, 1] and doc["heads"] == 2
    n = read_jsonl(data)[0].num_atoms
    per_head = np.array(doc["per_head"])
    assert per_head.shape == (2, n)
    np.testing.assert_allclose(per_head.sum(-1), 1.0, atol=1e-12)
    np.testing.assert_allclose(np.array(doc["mean"]), per_head.mean(0), atol=1e-15)
    assert json.loads(json.dumps(doc)) == doc


def test_inspect_attention_out_of_range(trained, capsys):
    tmp, data, _ = trained
    code, out = run(["inspect-attention", tmp / "out" / CHECKPOINT, data, "--query", "0,99"], capsys)
    assert code == 2 and "99" in out.err
    code, out = run(["inspect-attention", tmp / "out" / CHECKPOINT, data, "--query", "0,1", "--block", "5"], capsys)
    assert code == 2


# --- synth / environment ------------------------------------------------------------------

def test_synth_writes_labelled_records(tmp_path, capsys):
    out = tmp_path / "s.jsonl"
    code, _ = run(["synth", out, "--count", "5", "--label", "bonds"], capsys)
    assert code == 0
    recs = read_jsonl(out)
    assert len(recs) == 5 and all(r.label is not None for r in recs)


def test_thread_env(tmp_path, capsys, monkeypatch):
    monkeypatch.setenv("GEM2_THREADS", "1")
    code, _ = run(["synth", tmp_path / "s.jsonl", "--count", "1"], capsys)
    assert code == 0
    monkeypatch.setenv("GEM2_THREADS", "zero")
    code, out = run(["synth", tmp_path / "s.jsonl", "--count", "1"], capsys)
    assert code == 2 and "GEM2_THREADS" in out.err


def test_console_script_installed():
    import shutil

    assert shutil.which("gem2") is not None or os.environ.get("CI")
