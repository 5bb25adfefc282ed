"""Experiment orchestration: config schema, synthetic data, LOO and
cross-dataset runs.

Runs are deterministic for a fixed config: one seed drives everything,
BLAS pools are pinned to one thread while folds execute, and every number
is serialized at 17 significant digits, so repeated runs produce byte
identical artifacts regardless of the worker count.

Output layout for a leave-one-patient-out run:

    out/
      <patient>/            one directory per fold
        model.ckpt          trained network + standardizer
        history.csv         per-epoch training loss breakdown
        predictions.csv     held-out predictions (abundance CSV schema)
        report.csv          per-sample and pooled metrics
        coloc_<sample>.csv/.svg        predicted colocalization
        truth_coloc_<sample>.csv/.svg  ground-truth colocalization
      summary.csv           one row per fold, rebuilt from fold reports
"""

from __future__ import annotations

import csv
import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from .dataset import (AbundanceMatrix, SampleSplit, SpotTable, fmt_float,
                      assemble_embeddings, load_abundance_table,
                      load_embedding_block, load_spot_table, make_splits,
                      save_abundance_table, save_spot_table)
from .metrics import evaluate, report_rows, write_report
from .patchprep import filter_spots, load_fractions_csv
from .regressor import TrainConfig, predict, save_model, train
from .spatial import (average_coloc, colocalization_matrix,
                      compare_colocalization, default_length_scale,
                      render_heatmap, upgma_order, write_coloc_csv)

__all__ = [
    "ConfigError",
    "SyntheticSpec",
    "ExperimentConfig",
    "load_config_file",
    "parse_config",
    "set_override",
    "config_to_dict",
    "generate_synthetic",
    "run_loo",
    "run_cross_dataset",
    "evaluate_predictions",
]

log = logging.getLogger(__name__)


class ConfigError(ValueError):
    """Malformed configuration file or override."""


@dataclass
class SyntheticSpec:
    n_patients: int = 3
    spots_per_patient: int = 200
    dim: int = 16
    cell_types: int = 5
    noise_sigma: float = 0.0
    seed: int = 7
    grid_pitch: float = 1.0

    def __post_init__(self) -> None:
        for name in ("n_patients", "spots_per_patient", "dim", "cell_types"):
            if getattr(self, name) < 1:
                raise ConfigError(f"synth.{name} must be >= 1")
        if self.cell_types < 2:
            raise ConfigError("synth.cell_types must be >= 2")
        if self.noise_sigma < 0:
            raise ConfigError("synth.noise_sigma must be >= 0")
        if self.seed < 0:
            raise ConfigError("synth.seed must be >= 0")
        if self.grid_pitch <= 0:
            raise ConfigError("synth.grid_pitch must be > 0")


@dataclass
class ExperimentConfig:
    spots: str | None = None
    abundances: str | None = None
    embedding_blocks: tuple[str, ...] = ()
    fractions: str | None = None
    max_background: float = 0.8
    train: TrainConfig = field(default_factory=TrainConfig)
    length_scale: float | None = None
    nn_multiplier: float = 1.5
    normalize_l1: bool = False
    clamp_predictions: bool = False
    eval_model: str | None = None
    out_dir: str | None = None
    workers: int = 1
    patches_dir: str | None = None
    white_threshold: int = 220
    cross_spots: str | None = None
    cross_abundances: str | None = None
    cross_embedding_blocks: tuple[str, ...] = ()
    synth: SyntheticSpec = field(default_factory=SyntheticSpec)
    coloc_predictions: str | None = None

    def test_side(self) -> "ExperimentConfig":
        """Config view for the held-out dataset of a cross-dataset run."""
        if self.cross_spots is None or self.cross_abundances is None:
            raise ConfigError("cross.spots and cross.abundances are required for cross mode")
        return replace(self, spots=self.cross_spots, abundances=self.cross_abundances,
                       embedding_blocks=self.cross_embedding_blocks, fractions=None)


# ---------------------------------------------------------------------------
# Config file parsing
# ---------------------------------------------------------------------------

def load_config_file(path) -> dict:
    try:
        with open(path, encoding="utf-8") as handle:
            raw = json.load(handle)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be an object")
    return raw


def set_override(raw: dict, dotted: str, text: str) -> None:
    """Apply one `--set a.b=value` override to the raw config mapping.

    The value text is parsed as JSON when possible (numbers, booleans,
    null, quoted strings) and kept as a plain string otherwise.
    """
    keys = dotted.split(".")
    if not all(keys):
        raise ConfigError(f"bad override key {dotted!r}")
    node = raw
    for key in keys[:-1]:
        child = node.setdefault(key, {})
        if not isinstance(child, dict):
            raise ConfigError(f"override {dotted!r} descends into non-object {key!r}")
        node = child
    try:
        value = json.loads(text)
    except json.JSONDecodeError:
        value = text
    node[keys[-1]] = value


def _expect_keys(section: str, node: dict, allowed) -> None:
    unknown = sorted(set(node) - set(allowed))
    if unknown:
        raise ConfigError(f"unknown key {section}.{unknown[0]}" if section
                          else f"unknown key {unknown[0]}")


def _typed(section: str, node: dict, key: str, kind: str, default):
    value = node.get(key, default)
    if value is None and default is None:
        return None
    ok = {
        "str": lambda v: isinstance(v, str) and bool(v),
        "bool": lambda v: isinstance(v, bool),
        "int": lambda v: isinstance(v, int) and not isinstance(v, bool),
        "float": lambda v: isinstance(v, (int, float)) and not isinstance(v, bool),
        "list[str]": lambda v: isinstance(v, list) and all(isinstance(s, str) and s for s in v),
    }[kind]
    if not ok(value):
        raise ConfigError(f"{section}.{key} must be a {kind}, got {value!r}")
    if kind == "float":
        return float(value)
    return value


_DATASET_KEYS = ("spots", "abundances", "embedding_blocks", "fractions", "max_background")
_TRAIN_KEYS = ("lambda1", "lambda2", "epsilon", "learning_rate", "batch_size",
               "epochs", "seed", "hidden_width")
_SPATIAL_KEYS = ("length_scale", "nn_multiplier")
_EVAL_KEYS = ("normalize_l1", "clamp_predictions", "model")
_SYNTH_KEYS = ("n_patients", "spots_per_patient", "dim", "cell_types",
               "noise_sigma", "seed", "grid_pitch")
_PATCHES_KEYS = ("dir", "white_threshold")
_TOP_KEYS = ("dataset", "train", "spatial", "eval", "cross", "synth", "coloc",
             "patches", "out", "workers")


def _parse_dataset(section: str, node, with_filter: bool = True) -> dict:
    if not isinstance(node, dict):
        raise ConfigError(f"{section} must be an object")
    _expect_keys(section, node, _DATASET_KEYS if with_filter else _DATASET_KEYS[:3])
    parsed = {
        "spots": _typed(section, node, "spots", "str", None),
        "abundances": _typed(section, node, "abundances", "str", None),
        "embedding_blocks": tuple(_typed(section, node, "embedding_blocks", "list[str]", [])),
    }
    if with_filter:
        parsed["fractions"] = _typed(section, node, "fractions", "str", None)
        parsed["max_background"] = _typed(section, node, "max_background", "float", 0.8)
    return parsed


def parse_config(raw: dict) -> ExperimentConfig:
    """Validate the raw mapping against the full schema (unknown keys and
    wrong types are rejected) and build the typed config."""
    _expect_keys("", raw, _TOP_KEYS)

    ds = _parse_dataset("dataset", raw.get("dataset", {}))

    train_node = raw.get("train", {})
    if not isinstance(train_node, dict):
        raise ConfigError("train must be an object")
    _expect_keys("train", train_node, _TRAIN_KEYS)
    defaults = TrainConfig()
    try:
        train_cfg = TrainConfig(
            lambda1=_typed("train", train_node, "lambda1", "float", defaults.lambda1),
            lambda2=_typed("train", train_node, "lambda2", "float", defaults.lambda2),
            epsilon=_typed("train", train_node, "epsilon", "float", defaults.epsilon),
            learning_rate=_typed("train", train_node, "learning_rate", "float", defaults.learning_rate),
            batch_size=_typed("train", train_node, "batch_size", "int", defaults.batch_size),
            epochs=_typed("train", train_node, "epochs", "int", defaults.epochs),
            seed=_typed("train", train_node, "seed", "int", defaults.seed),
            hidden_width=_typed("train", train_node, "hidden_width", "int", defaults.hidden_width),
        )
    except ValueError as exc:
        raise ConfigError(f"train: {exc}") from None

    spatial_node = raw.get("spatial", {})
    if not isinstance(spatial_node, dict):
        raise ConfigError("spatial must be an object")
    _expect_keys("spatial", spatial_node, _SPATIAL_KEYS)
    length_scale = _typed("spatial", spatial_node, "length_scale", "float", None)
    if length_scale is not None and length_scale <= 0:
        raise ConfigError("spatial.length_scale must be > 0")
    nn_multiplier = _typed("spatial", spatial_node, "nn_multiplier", "float", 1.5)
    if nn_multiplier <= 0:
        raise ConfigError("spatial.nn_multiplier must be > 0")

    eval_node = raw.get("eval", {})
    if not isinstance(eval_node, dict):
        raise ConfigError("eval must be an object")
    _expect_keys("eval", eval_node, _EVAL_KEYS)

    cross = _parse_dataset("cross", raw.get("cross", {}), with_filter=False)

    synth_node = raw.get("synth", {})
    if not isinstance(synth_node, dict):
        raise ConfigError("synth must be an object")
    _expect_keys("synth", synth_node, _SYNTH_KEYS)
    sdef = SyntheticSpec()
    synth = SyntheticSpec(
        n_patients=_typed("synth", synth_node, "n_patients", "int", sdef.n_patients),
        spots_per_patient=_typed("synth", synth_node, "spots_per_patient", "int", sdef.spots_per_patient),
        dim=_typed("synth", synth_node, "dim", "int", sdef.dim),
        cell_types=_typed("synth", synth_node, "cell_types", "int", sdef.cell_types),
        noise_sigma=_typed("synth", synth_node, "noise_sigma", "float", sdef.noise_sigma),
        seed=_typed("synth", synth_node, "seed", "int", sdef.seed),
        grid_pitch=_typed("synth", synth_node, "grid_pitch", "float", sdef.grid_pitch),
    )

    coloc_node = raw.get("coloc", {})
    if not isinstance(coloc_node, dict):
        raise ConfigError("coloc must be an object")
    _expect_keys("coloc", coloc_node, ("predictions",))

    patches_node = raw.get("patches", {})
    if not isinstance(patches_node, dict):
        raise ConfigError("patches must be an object")
    _expect_keys("patches", patches_node, _PATCHES_KEYS)
    white_threshold = _typed("patches", patches_node, "white_threshold", "int", 220)
    if not (0 <= white_threshold <= 255):
        raise ConfigError("patches.white_threshold must be in [0, 255]")

    workers = _typed("", raw, "workers", "int", 1)
    if workers < 1:
        raise ConfigError("workers must be >= 1")
    max_background = ds["max_background"]
    if not (0.0 <= max_background <= 1.0):
        raise ConfigError("dataset.max_background must be in [0, 1]")

    return ExperimentConfig(
        spots=ds["spots"],
        abundances=ds["abundances"],
        embedding_blocks=ds["embedding_blocks"],
        fractions=ds["fractions"],
        max_background=max_background,
        train=train_cfg,
        length_scale=length_scale,
        nn_multiplier=nn_multiplier,
        normalize_l1=_typed("eval", eval_node, "normalize_l1", "bool", False),
        clamp_predictions=_typed("eval", eval_node, "clamp_predictions", "bool", False),
        eval_model=_typed("eval", eval_node, "model", "str", None),
        out_dir=_typed("", raw, "out", "str", None),
        workers=workers,
        patches_dir=_typed("patches", patches_node, "dir", "str", None),
        white_threshold=white_threshold,
        cross_spots=cross["spots"],
        cross_abundances=cross["abundances"],
        cross_embedding_blocks=cross["embedding_blocks"],
        synth=synth,
        coloc_predictions=_typed("coloc", coloc_node, "predictions", "str", None),
    )


def config_to_dict(cfg: ExperimentConfig) -> dict:
    """Fully resolved config in file schema form (for run records)."""
    return {
        "dataset": {
            "spots": cfg.spots,
            "abundances": cfg.abundances,
            "embedding_blocks": list(cfg.embedding_blocks),
            "fractions": cfg.fractions,
            "max_background": cfg.max_background,
        },
        "train": {
            "lambda1": cfg.train.lambda1,
            "lambda2": cfg.train.lambda2,
            "epsilon": cfg.train.epsilon,
            "learning_rate": cfg.train.learning_rate,
            "batch_size": cfg.train.batch_size,
            "epochs": cfg.train.epochs,
            "seed": cfg.train.seed,
            "hidden_width": cfg.train.hidden_width,
        },
        "spatial": {"length_scale": cfg.length_scale, "nn_multiplier": cfg.nn_multiplier},
        "eval": {"normalize_l1": cfg.normalize_l1,
                 "clamp_predictions": cfg.clamp_predictions,
                 "model": cfg.eval_model},
        "cross": {
            "spots": cfg.cross_spots,
            "abundances": cfg.cross_abundances,
            "embedding_blocks": list(cfg.cross_embedding_blocks),
        },
        "synth": {
            "n_patients": cfg.synth.n_patients,
            "spots_per_patient": cfg.synth.spots_per_patient,
            "dim": cfg.synth.dim,
            "cell_types": cfg.synth.cell_types,
            "noise_sigma": cfg.synth.noise_sigma,
            "seed": cfg.synth.seed,
            "grid_pitch": cfg.synth.grid_pitch,
        },
        "coloc": {"predictions": cfg.coloc_predictions},
        "patches": {"dir": cfg.patches_dir, "white_threshold": cfg.white_threshold},
        "out": cfg.out_dir,
        "workers": cfg.workers,
    }


# ---------------------------------------------------------------------------
# Dataset loading and synthetic generation
# ---------------------------------------------------------------------------

def load_dataset(cfg: ExperimentConfig) -> tuple[SpotTable, AbundanceMatrix]:
    """Spots (with all embedding sources attached, background-filtered if
    fractions are configured) plus aligned ground-truth abundances."""
    if cfg.spots is None or cfg.abundances is None:
        raise ConfigError("dataset.spots and dataset.abundances are required")
    spots = load_spot_table(cfg.spots)
    blocks = [load_embedding_block(path) for path in cfg.embedding_blocks]
    spots = assemble_embeddings(spots, blocks)
    if cfg.fractions is not None:
        fractions = load_fractions_csv(cfg.fractions)
        spots = filter_spots(spots, fractions, cfg.max_background)
        if spots.n == 0:
            raise ConfigError("background filter removed every spot")
    truth = load_abundance_table(cfg.abundances, spots)
    return spots, truth


def _softplus(t: np.ndarray) -> np.ndarray:
    return np.logaddexp(0.0, t)


def generate_synthetic(spec: SyntheticSpec, out_dir) -> tuple[Path, Path]:
    """Seeded synthetic dataset with a known smooth embedding->abundance map.

    Embeddings are standard normal; abundances are softplus(G z + h) with
    one shared random linear map, plus optional Gaussian noise (clamped at
    zero to keep ground truth nonnegative).  Coordinates sit on a jittered
    grid per sample, so nearest-neighbor distances never collapse to zero.
    Writes spots.csv and abundance.csv; identical specs give identical bytes.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(spec.seed)
    g_map = rng.standard_normal((spec.dim, spec.cell_types)) / np.sqrt(spec.dim)
    offset = rng.standard_normal(spec.cell_types) * 0.5
    cell_types = tuple(f"ct{k:02d}" for k in range(spec.cell_types))
    side = math.ceil(math.sqrt(spec.spots_per_patient))

    spot_ids: list[str] = []
    sample_ids: list[str] = []
    patient_ids: list[str] = []
    coords = []
    embeddings = []
    values = []
    for i in range(spec.n_patients):
        patient = f"P{i:02d}"
        sample = f"{patient}_s1"
        n = spec.spots_per_patient
        z = rng.standard_normal((n, spec.dim))
        jitter = rng.uniform(-0.25, 0.25, size=(n, 2)) * spec.grid_pitch
        noise = rng.standard_normal((n, spec.cell_types))
        y = _softplus(z @ g_map + offset)
        y = np.maximum(y + spec.noise_sigma * noise, 0.0)
        for j in range(n):
            spot_ids.append(f"{sample}_{j:04d}")
            sample_ids.append(sample)
            patient_ids.append(patient)
            coords.append(((j % side) * spec.grid_pitch + jitter[j, 0],
                           (j // side) * spec.grid_pitch + jitter[j, 1]))
        embeddings.append(z)
        values.append(y)

    spots = SpotTable(
        spot_ids=tuple(spot_ids),
        sample_ids=tuple(sample_ids),
        patient_ids=tuple(patient_ids),
        coords=np.array(coords),
        embeddings=np.vstack(embeddings),
    )
    truth = AbundanceMatrix(spot_ids=tuple(spot_ids), cell_types=cell_types,
                            values=np.vstack(values))
    spots_path = out_dir / "spots.csv"
    abundance_path = out_dir / "abundance.csv"
    save_spot_table(spots, spots_path)
    save_abundance_table(truth, abundance_path)
    return spots_path, abundance_path


# ---------------------------------------------------------------------------
# Evaluation plumbing shared by LOO folds and cross-dataset runs
# ---------------------------------------------------------------------------

def _sample_groups(spots: SpotTable) -> list[tuple[str, list[str]]]:
    groups: dict[str, list[str]] = {}
    for sid, sample in zip(spots.spot_ids, spots.sample_ids):
        groups.setdefault(sample, []).append(sid)
    return sorted(groups.items())


def _coloc_pair(pred, truth, spots, length_scale, sample_id, out_dir):
    cm_pred = colocalization_matrix(pred, spots.coords, length_scale, sample_id=sample_id)
    cm_truth = colocalization_matrix(truth, spots.coords, length_scale, sample_id=sample_id)
    order = upgma_order(cm_pred)
    write_coloc_csv(cm_pred, out_dir / f"coloc_{sample_id}.csv")
    (out_dir / f"coloc_{sample_id}.svg").write_text(render_heatmap(cm_pred, order),
                                                    encoding="utf-8")
    write_coloc_csv(cm_truth, out_dir / f"truth_coloc_{sample_id}.csv")
    (out_dir / f"truth_coloc_{sample_id}.svg").write_text(
        render_heatmap(cm_truth, upgma_order(cm_truth)), encoding="utf-8")
    return cm_pred, cm_truth


def evaluate_predictions(split_name: str, pred: AbundanceMatrix,
                         truth: AbundanceMatrix, spots: SpotTable,
                         cfg: ExperimentConfig, out_dir) -> dict:
    """Score predictions per sample and pooled, write report.csv plus
    colocalization artifacts, and return the pooled metric row."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    save_abundance_table(pred, out_dir / "predictions.csv")

    rows: list[dict] = []
    mats_pred, mats_truth, weights = [], [], []
    for sample, ids in _sample_groups(spots):
        spots_s = spots.subset(ids)
        pred_s = pred.subset(ids)
        truth_s = truth.subset(ids)
        if spots_s.n < 2:
            log.warning("sample %s has %d spot(s); correlation and "
                        "colocalization skipped", sample, spots_s.n)
            rows.append({"split": split_name, "sample_id": sample, "cell_type": "ALL",
                         "n_spots": spots_s.n,
                         "l1": float(np.abs(pred_s.values - truth_s.values).mean())})
            continue
        report = evaluate(pred_s, truth_s, sample, normalize=cfg.normalize_l1)
        length_scale = cfg.length_scale
        if length_scale is None:
            length_scale = default_length_scale(spots_s.coords, cfg.nn_multiplier)
        cm_pred, cm_truth = _coloc_pair(pred_s, truth_s, spots_s, length_scale,
                                        sample, out_dir)
        try:
            cosine, correlation = compare_colocalization(cm_pred, cm_truth)
        except ValueError:
            cosine = correlation = None
        rows.extend(report_rows(split_name, report, cosine, correlation))
        mats_pred.append(cm_pred)
        mats_truth.append(cm_truth)
        weights.append(spots_s.n)

    pooled = evaluate(pred, truth, "POOLED", normalize=cfg.normalize_l1)
    pooled_cosine = pooled_correlation = None
    if mats_pred:
        try:
            pooled_cosine, pooled_correlation = compare_colocalization(
                average_coloc(mats_pred, weights), average_coloc(mats_truth, weights))
        except ValueError:
            pass
    rows.extend(report_rows(split_name, pooled, pooled_cosine, pooled_correlation))
    write_report(out_dir / "report.csv", rows)
    return {
        "n_spots": pooled.n_spots,
        "mean_cc": pooled.mean_cc,
        "l1": pooled.l1,
        "coloc_cosine": pooled_cosine,
        "coloc_correlation": pooled_correlation,
    }


def _write_history(history, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(["epoch", "total", "mse", "mae", "pearson"])
        for record in history:
            writer.writerow([record["epoch"]] + [fmt_float(record[k])
                                                 for k in ("total", "mse", "mae", "pearson")])


def _run_fold(spots: SpotTable, truth: AbundanceMatrix, split: SampleSplit,
              cfg: ExperimentConfig, fold_dir: Path) -> dict:
    fold_dir.mkdir(parents=True, exist_ok=True)
    model, history = train(spots, truth, split, cfg.train)
    save_model(model, fold_dir / "model.ckpt")
    _write_history(history, fold_dir / "history.csv")
    test_ids = [sid for sid in spots.spot_ids if sid in split.test_spot_ids]
    spots_test = spots.subset(test_ids)
    truth_test = truth.subset(test_ids)
    pred = predict(model, spots_test, cell_types=truth.cell_types,
                   clamp=cfg.clamp_predictions)
    return evaluate_predictions(split.name, pred, truth_test, spots_test, cfg, fold_dir)


# ---------------------------------------------------------------------------
# Leave-one-patient-out
# ---------------------------------------------------------------------------

SUMMARY_COLUMNS = ("fold", "status", "n_spots", "mean_cc", "l1",
                   "coloc_cosine", "coloc_correlation")


def _pooled_row_from_report(report_path: Path) -> dict | None:
    if not report_path.exists():
        return None
    with open(report_path, newline="", encoding="utf-8") as handle:
        reader = csv.DictReader(handle)
        for row in reader:
            if row.get("sample_id") == "POOLED" and row.get("cell_type") == "ALL":
                return row
    return None


def write_summary(out_root, fold_names) -> Path:
    """Rebuild summary.csv purely from the per-fold report files, one row
    per fold plus a MEAN row over the folds that succeeded."""
    out_root = Path(out_root)
    rows = []
    for name in fold_names:
        pooled = _pooled_row_from_report(out_root / name / "report.csv")
        if pooled is None:
            rows.append([name, "failed", "", "", "", "", ""])
            continue
        rows.append([name, "ok", pooled["n_spots"], pooled["cc"], pooled["l1"],
                     pooled["coloc_cosine"], pooled["coloc_correlation"]])
    ok_rows = [row for row in rows if row[1] == "ok"]
    mean_row = ["MEAN", f"{len(ok_rows)}/{len(rows)}"]
    if ok_rows:
        mean_row.append(str(sum(int(row[2]) for row in ok_rows)))
        for col in range(3, 7):
            cells = [float(row[col]) for row in ok_rows if row[col] != ""]
            mean_row.append(fmt_float(sum(cells) / len(cells)) if cells else "")
    else:
        mean_row.extend([""] * 5)
    path = out_root / "summary.csv"
    with open(path, "w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(SUMMARY_COLUMNS)
        writer.writerows(rows)
        writer.writerow(mean_row)
    return path


def run_loo(cfg: ExperimentConfig, fold_names=None) -> list[tuple[str, str, dict | str]]:
    """Leave-one-patient-out over the configured dataset.

    Trains one model per patient on everybody else and evaluates the
    held-out spots.  A failing fold is recorded and skipped, not fatal.
    `fold_names` restricts execution to the named folds (other folds'
    artifacts are left untouched); summary.csv is always rebuilt from the
    per-fold reports on disk.
    """
    if cfg.out_dir is None:
        raise ConfigError("out directory is required")
    spots, truth = load_dataset(cfg)
    splits = make_splits(spots, "loo")
    all_names = [split.name for split in splits]
    if fold_names is not None:
        unknown = sorted(set(fold_names) - set(all_names))
        if unknown:
            raise ConfigError(f"unknown fold {unknown[0]!r}; patients are {all_names}")
        splits = [split for split in splits if split.name in set(fold_names)]
    out_root = Path(cfg.out_dir)
    out_root.mkdir(parents=True, exist_ok=True)

    def one(split: SampleSplit):
        try:
            summary = _run_fold(spots, truth, split, cfg, out_root / split.name)
            return split.name, "ok", summary
        except Exception as exc:  # noqa: BLE001 - fold isolation is the contract
            log.error("fold %s failed: %s", split.name, exc)
            return split.name, "failed", str(exc)

    # numpy's BLAS pool is pinned to one thread so results do not depend
    # on how folds are scheduled
    with threadpool_limits(limits=1):
        if cfg.workers > 1 and len(splits) > 1:
            with ThreadPoolExecutor(max_workers=cfg.workers) as pool:
                results = list(pool.map(one, splits))
        else:
            results = [one(split) for split in splits]

    write_summary(out_root, all_names)
    return results


# ---------------------------------------------------------------------------
# Cross-dataset protocol
# ---------------------------------------------------------------------------

def run_cross_dataset(cfg_train: ExperimentConfig, cfg_test: ExperimentConfig) -> dict:
    """Train on every spot of the first dataset, evaluate on every sample
    of the second.  Cell-type lists must match as sets; the test matrix is
    reordered to the training order."""
    if cfg_train.out_dir is None:
        raise ConfigError("out directory is required")
    spots_train, truth_train = load_dataset(cfg_train)
    spots_test, truth_test = load_dataset(cfg_test)

    if set(truth_train.cell_types) != set(truth_test.cell_types):
        only_a = sorted(set(truth_train.cell_types) - set(truth_test.cell_types))
        only_b = sorted(set(truth_test.cell_types) - set(truth_train.cell_types))
        raise ValueError(f"cell type lists differ: only in training data {only_a}, "
                         f"only in test data {only_b}")
    truth_test = truth_test.reorder_cell_types(truth_train.cell_types)
    if spots_train.dim != spots_test.dim:
        raise ValueError(f"embedding dim mismatch: train {spots_train.dim}, "
                         f"test {spots_test.dim}")

    out_dir = Path(cfg_train.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    with threadpool_limits(limits=1):
        model, history = train(spots_train, truth_train, None, cfg_train.train)
        save_model(model, out_dir / "model.ckpt")
        _write_history(history, out_dir / "history.csv")
        pred = predict(model, spots_test, cell_types=truth_train.cell_types,
                       clamp=cfg_test.clamp_predictions)
        return evaluate_predictions("cross", pred, truth_test, spots_test,
                                    cfg_test, out_dir)
