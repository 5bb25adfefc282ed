"""End-to-end command line behavior, exercised in process via main(argv)."""

import csv
import hashlib
import json

import numpy as np
import pytest
from PIL import Image

from histocell.cli import main
from histocell.experiments import SyntheticSpec, generate_synthetic


def run_cli(*argv):
    return main(list(argv))


def make_data(tmp_path, **kwargs):
    kwargs.setdefault("n_patients", 3)
    kwargs.setdefault("spots_per_patient", 50)
    kwargs.setdefault("dim", 6)
    kwargs.setdefault("cell_types", 3)
    kwargs.setdefault("seed", 9)
    data = tmp_path / "data"
    generate_synthetic(SyntheticSpec(**kwargs), data)
    return data


def write_config(tmp_path, data, **extra):
    raw = {
        "dataset": {"spots": str(data / "spots.csv"),
                    "abundances": str(data / "abundance.csv")},
        "train": {"hidden_width": 16, "epochs": 2, "batch_size": 32},
    }
    raw.update(extra)
    path = tmp_path / "config.json"
    path.write_text(json.dumps(raw), encoding="utf-8")
    return path


def test_validate_clean_dataset(tmp_path, capsys):
    data = make_data(tmp_path)
    cfg = write_config(tmp_path, data)
    assert run_cli("validate", "--config", str(cfg)) == 0
    assert capsys.readouterr().out.strip() == "ok"


def test_validate_reports_duplicate_spot(tmp_path, capsys):
    data = make_data(tmp_path)
    lines = (data / "spots.csv").read_text().splitlines()
    lines.append(lines[1])  # duplicate id on the last line
    (data / "spots.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    cfg = write_config(tmp_path, data)
    assert run_cli("validate", "--config", str(cfg)) == 1
    out = capsys.readouterr().out
    dup_id = lines[1].split(",")[0]
    assert dup_id in out
    assert f":{len(lines)}:" in out
    assert "finding(s)" in out


def test_validate_reports_negative_abundance(tmp_path, capsys):
    data = make_data(tmp_path)
    lines = (data / "abundance.csv").read_text().splitlines()
    cells = lines[1].split(",")
    cells[1] = "-0.25"
    lines[1] = ",".join(cells)
    (data / "abundance.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    cfg = write_config(tmp_path, data)
    assert run_cli("validate", "--config", str(cfg)) == 1
    assert "negative" in capsys.readouterr().out


def test_missing_file_is_exit_2(tmp_path, capsys):
    cfg = tmp_path / "config.json"
    cfg.write_text(json.dumps({"dataset": {"spots": "nope.csv",
                                           "abundances": "nope2.csv"}}),
                   encoding="utf-8")
    assert run_cli("validate", "--config", str(cfg)) == 2
    assert capsys.readouterr().err.strip()


def test_unknown_config_key_is_exit_2(tmp_path, capsys):
    data = make_data(tmp_path)
    cfg = write_config(tmp_path, data)
    code = run_cli("train", "--config", str(cfg), "--out", str(tmp_path / "o"),
                   "--set", "train.warmup=5")
    assert code == 2
    assert "warmup" in capsys.readouterr().err


def test_synth_then_loo_pipeline(tmp_path, capsys):
    synth_cfg = tmp_path / "synth.json"
    synth_cfg.write_text(json.dumps({
        "synth": {"n_patients": 3, "spots_per_patient": 40, "dim": 6,
                  "cell_types": 3, "seed": 4},
    }), encoding="utf-8")
    data = tmp_path / "data"
    assert run_cli("synth", "--config", str(synth_cfg), "--out", str(data)) == 0
    assert (data / "spots.csv").exists()
    assert (data / "abundance.csv").exists()

    cfg = write_config(tmp_path, data)
    out = tmp_path / "loo"
    assert run_cli("loo", "--config", str(cfg), "--out", str(out)) == 0
    printed = capsys.readouterr().out
    assert "3/3 folds ok" in printed
    assert "mean CC" in printed
    with open(out / "summary.csv", newline="") as handle:
        rows = list(csv.DictReader(handle))
    assert [r["fold"] for r in rows] == ["P00", "P01", "P02", "MEAN"]

    record = json.loads((out / "run.json").read_text())
    assert record["command"] == "loo"
    assert record["config"]["dataset"]["spots"] == str(data / "spots.csv")
    digest = hashlib.sha256((out / "summary.csv").read_bytes()).hexdigest()
    assert record["artifacts"]["summary.csv"] == digest
    assert "run.json" not in record["artifacts"]


def test_train_then_eval_roundtrip(tmp_path, capsys):
    data = make_data(tmp_path)
    cfg = write_config(tmp_path, data)
    train_out = tmp_path / "train_out"
    assert run_cli("train", "--config", str(cfg), "--out", str(train_out)) == 0
    printed = capsys.readouterr().out
    assert "trained on 150 spots" in printed
    assert "checkpoint:" in printed
    ckpt = train_out / "model.ckpt"
    assert ckpt.exists()

    eval_out = tmp_path / "eval_out"
    code = run_cli("eval", "--config", str(cfg), "--out", str(eval_out),
                   "--set", f"eval.model={json.dumps(str(ckpt))}")
    assert code == 0
    assert "mean CC" in capsys.readouterr().out
    assert (eval_out / "report.csv").exists()
    assert (eval_out / "predictions.csv").exists()


def test_eval_without_model_is_exit_2(tmp_path, capsys):
    data = make_data(tmp_path)
    cfg = write_config(tmp_path, data)
    assert run_cli("eval", "--config", str(cfg), "--out", str(tmp_path / "o")) == 2
    assert "model" in capsys.readouterr().err


def test_coloc_on_truth_equals_itself(tmp_path, capsys):
    data = make_data(tmp_path)
    cfg = write_config(tmp_path, data, coloc={"predictions": str(data / "abundance.csv")})
    out = tmp_path / "coloc_out"
    assert run_cli("coloc", "--config", str(cfg), "--out", str(out)) == 0
    printed = capsys.readouterr().out
    assert "coloc cosine 1.000 correlation 1.000" in printed
    assert (out / "coloc_P00_s1.csv").exists()
    assert (out / "coloc_P00_s1.svg").exists()
    assert (out / "pred_coloc_P00_s1.csv").exists()


def test_seed_flag_reaches_run_record(tmp_path):
    data = make_data(tmp_path)
    cfg = write_config(tmp_path, data)
    out = tmp_path / "out"
    assert run_cli("train", "--config", str(cfg), "--out", str(out),
                   "--seed", "77", "--set", "train.lambda2=0") == 0
    record = json.loads((out / "run.json").read_text())
    assert record["config"]["train"]["seed"] == 77
    assert record["config"]["train"]["lambda2"] == 0
    assert record["overrides"] == ["train.lambda2=0"]


def test_cross_command(tmp_path, capsys):
    data = make_data(tmp_path)
    cfg = write_config(tmp_path, data,
                       cross={"spots": str(data / "spots.csv"),
                              "abundances": str(data / "abundance.csv")})
    out = tmp_path / "cross_out"
    assert run_cli("cross", "--config", str(cfg), "--out", str(out)) == 0
    assert "mean CC" in capsys.readouterr().out
    assert (out / "report.csv").exists()


def test_patches_command(tmp_path, capsys):
    patches = tmp_path / "patches"
    patches.mkdir()
    white = np.full((32, 32, 3), 255, dtype=np.uint8)
    dark = np.zeros((32, 32, 3), dtype=np.uint8)
    Image.fromarray(white).save(patches / "s1.png")
    Image.fromarray(dark).save(patches / "s2.png")
    cfg = tmp_path / "config.json"
    cfg.write_text(json.dumps({"patches": {"dir": str(patches)}}),
                   encoding="utf-8")
    out = tmp_path / "out"
    assert run_cli("patches", "--config", str(cfg), "--out", str(out)) == 0
    with open(out / "fractions.csv", newline="") as handle:
        rows = {r["spot_id"]: float(r["background_fraction"])
                for r in csv.DictReader(handle)}
    assert rows == {"s1": 1.0, "s2": 0.0}
    assert "2 patch(es)" in capsys.readouterr().out


def test_loo_with_failed_fold_exits_1(tmp_path, capsys):
    data = make_data(tmp_path)
    lines = (data / "spots.csv").read_text().splitlines()
    header, rest = lines[0], lines[1:]
    keep = [l for l in rest if not l.startswith("P02_s1_00")]
    lonely = next(l for l in rest if l.startswith("P02_s1_0000"))
    (data / "spots.csv").write_text("\n".join([header] + keep + [lonely]) + "\n",
                                    encoding="utf-8")
    cfg = write_config(tmp_path, data)
    code = run_cli("loo", "--config", str(cfg), "--out", str(tmp_path / "out"))
    assert code == 1
    captured = capsys.readouterr()
    assert "P02" in captured.err
    assert "2/3 folds ok" in captured.out
