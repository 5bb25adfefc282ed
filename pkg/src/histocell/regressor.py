"""Seven-hidden-layer SiLU regressor with manual backprop and Adam.

The network is a fixed-depth MLP: seven hidden layers (SiLU after each)
followed by a linear output head.  Inputs are standardized with statistics
fit on the training split only; the statistics travel with the model.
Gradients are computed analytically (no autodiff framework) against the
composite objective, and the whole training loop is deterministic for a
fixed seed: one generator drives initialization and minibatch shuffling.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .dataset import AbundanceMatrix, SampleSplit, SpotTable, SchemaError, fmt_float
from .objective import composite_loss

__all__ = [
    "HIDDEN_LAYERS",
    "CHECKPOINT_HEADER",
    "TrainConfig",
    "Standardizer",
    "MlpModel",
    "fit_standardizer",
    "transform",
    "sigmoid",
    "silu",
    "silu_grad",
    "init_model",
    "forward",
    "train",
    "predict",
    "save_model",
    "load_model",
]

HIDDEN_LAYERS = 7
CHECKPOINT_HEADER = "histocell-mlp v1"

_ADAM_BETA1 = 0.9
_ADAM_BETA2 = 0.999
_ADAM_EPS = 1e-8


@dataclass
class TrainConfig:
    lambda1: float = 0.5
    lambda2: float = 0.5
    epsilon: float = 1e-8
    learning_rate: float = 1e-3
    batch_size: int = 256
    epochs: int = 50
    seed: int = 0
    hidden_width: int = 512

    def __post_init__(self) -> None:
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ValueError("lambda1 and lambda2 must be >= 0")
        if self.epsilon <= 0:
            raise ValueError("epsilon must be > 0")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2 (correlation term needs variance)")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.hidden_width < 1:
            raise ValueError("hidden_width must be >= 1")
        if self.seed < 0:
            raise ValueError("seed must be >= 0")


@dataclass
class Standardizer:
    """Per-column shift/scale; zero-variance columns store scale 1.0."""

    means: np.ndarray
    stds: np.ndarray

    def __post_init__(self) -> None:
        self.means = np.asarray(self.means, dtype=np.float64).ravel()
        self.stds = np.asarray(self.stds, dtype=np.float64).ravel()
        if self.means.shape != self.stds.shape:
            raise ValueError("means and stds must have equal length")
        if not (np.isfinite(self.means).all() and np.isfinite(self.stds).all()):
            raise ValueError("non-finite standardizer statistics")
        if (self.stds <= 0).any():
            raise ValueError("stds must be > 0")


def fit_standardizer(x: np.ndarray) -> Standardizer:
    """Column means and population standard deviations; std 0 stored as 1."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 1:
        raise ValueError("need a nonempty (n, D) matrix")
    means = x.mean(axis=0)
    stds = x.std(axis=0)
    stds = np.where(stds == 0.0, 1.0, stds)
    return Standardizer(means=means, stds=stds)


def transform(s: Standardizer, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != s.means.shape[0]:
        raise ValueError(f"expected (n, {s.means.shape[0]}) input, got {x.shape}")
    return (x - s.means) / s.stds


@dataclass
class MlpModel:
    layer_dims: tuple[int, ...]
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    standardizer: Standardizer
    seed: int

    def __post_init__(self) -> None:
        self.layer_dims = tuple(int(d) for d in self.layer_dims)
        if len(self.layer_dims) != HIDDEN_LAYERS + 2:
            raise ValueError(f"layer_dims must have {HIDDEN_LAYERS + 2} entries "
                             f"(input, {HIDDEN_LAYERS} hidden, output)")
        if any(d < 1 for d in self.layer_dims):
            raise ValueError("layer dims must be >= 1")
        if len(self.weights) != HIDDEN_LAYERS + 1 or len(self.biases) != HIDDEN_LAYERS + 1:
            raise ValueError(f"expected {HIDDEN_LAYERS + 1} weight matrices and bias vectors")
        for l, (w, b) in enumerate(zip(self.weights, self.biases)):
            expect = (self.layer_dims[l], self.layer_dims[l + 1])
            if w.shape != expect or b.shape != (expect[1],):
                raise ValueError(f"layer {l + 1}: parameter shape mismatch")
            if not (np.isfinite(w).all() and np.isfinite(b).all()):
                raise ValueError(f"layer {l + 1}: non-finite parameters")
        if self.standardizer.means.shape[0] != self.layer_dims[0]:
            raise ValueError("standardizer dim does not match input dim")

    @property
    def dim_in(self) -> int:
        return self.layer_dims[0]

    @property
    def dim_out(self) -> int:
        return self.layer_dims[-1]


# ---------------------------------------------------------------------------
# Activations
# ---------------------------------------------------------------------------

def sigmoid(z: np.ndarray) -> np.ndarray:
    """Numerically stable logistic function."""
    z = np.asarray(z, dtype=np.float64)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def silu(z: np.ndarray) -> np.ndarray:
    return z * sigmoid(z)


def silu_grad(z: np.ndarray) -> np.ndarray:
    s = sigmoid(z)
    return s * (1.0 + z * (1.0 - s))


# ---------------------------------------------------------------------------
# Parameters and forward pass
# ---------------------------------------------------------------------------

def _init_params(layer_dims, rng) -> tuple[list[np.ndarray], list[np.ndarray]]:
    # uniform +-sqrt(6/(fan_in+fan_out)), zero biases
    weights, biases = [], []
    for fan_in, fan_out in zip(layer_dims[:-1], layer_dims[1:]):
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-limit, limit, size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    return weights, biases


def init_model(dim_in: int, dim_out: int, cfg: TrainConfig,
               standardizer: Standardizer | None = None) -> MlpModel:
    """Fresh seeded model; identical seeds give identical parameters."""
    layer_dims = (dim_in,) + (cfg.hidden_width,) * HIDDEN_LAYERS + (dim_out,)
    rng = np.random.default_rng(cfg.seed)
    weights, biases = _init_params(layer_dims, rng)
    if standardizer is None:
        standardizer = Standardizer(means=np.zeros(dim_in), stds=np.ones(dim_in))
    return MlpModel(layer_dims=layer_dims, weights=weights, biases=biases,
                    standardizer=standardizer, seed=cfg.seed)


def _forward_cached(weights, biases, x):
    """All layer inputs and pre-activations, for backprop."""
    inputs = [x]   # inputs[l] feeds layer l
    pre = []       # pre[l] = inputs[l] @ W_l + b_l
    h = x
    last = len(weights) - 1
    for l, (w, b) in enumerate(zip(weights, biases)):
        z = h @ w + b
        if not np.isfinite(z).all():
            raise ValueError(f"non-finite activations after layer {l + 1} of {len(weights)}")
        pre.append(z)
        h = silu(z) if l < last else z
        inputs.append(h)
    return inputs, pre


def forward(model: MlpModel, x: np.ndarray, standardize: bool = False) -> np.ndarray:
    """Network output for a raw (n, D) batch.

    The caller owns standardization unless `standardize` is set; `predict`
    is the high-level path that always applies the model's statistics.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != model.dim_in:
        raise ValueError(f"expected (n, {model.dim_in}) input, got {x.shape}")
    if standardize:
        x = transform(model.standardizer, x)
    inputs, _ = _forward_cached(model.weights, model.biases, x)
    return inputs[-1]


def _backprop(weights, inputs, pre, grad_out):
    """Parameter gradients given d(loss)/d(output)."""
    grads_w = [None] * len(weights)
    grads_b = [None] * len(weights)
    delta = grad_out  # d loss / d pre[last] (output layer is linear)
    for l in range(len(weights) - 1, -1, -1):
        grads_w[l] = inputs[l].T @ delta
        grads_b[l] = delta.sum(axis=0)
        if l > 0:
            delta = (delta @ weights[l].T) * silu_grad(pre[l - 1])
    return grads_w, grads_b


def loss_and_grads(model: MlpModel, x: np.ndarray, y: np.ndarray, cfg: TrainConfig):
    """Composite loss breakdown plus parameter gradients for one batch.

    `x` must already be standardized.  Exposed for gradient checking.
    """
    inputs, pre = _forward_cached(model.weights, model.biases, x)
    breakdown = composite_loss(inputs[-1], y, lambda1=cfg.lambda1,
                               lambda2=cfg.lambda2, epsilon=cfg.epsilon)
    grads_w, grads_b = _backprop(model.weights, inputs, pre, breakdown.grad)
    return breakdown, grads_w, grads_b


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

def _batch_slices(n: int, batch_size: int) -> list[slice]:
    slices = [slice(s, min(s + batch_size, n)) for s in range(0, n, batch_size)]
    # a lone trailing row cannot carry a correlation term; fold it into the
    # previous batch
    if len(slices) > 1 and slices[-1].stop - slices[-1].start == 1:
        slices[-2] = slice(slices[-2].start, slices[-1].stop)
        slices.pop()
    return slices


def train(spots: SpotTable, abundances: AbundanceMatrix,
          split: SampleSplit | None, cfg: TrainConfig):
    """Fit the regressor on the split's training spots (all spots if
    `split` is None).

    Returns (model, history) where history holds one record per epoch with
    the minibatch-size-weighted mean of each loss component over that
    epoch.  Deterministic for a fixed config and thread count.
    """
    if split is not None:
        keep = split.train_spot_ids
        sub = spots.subset([sid for sid in spots.spot_ids if sid in keep])
    else:
        sub = spots
    if sub.dim < 1:
        raise ValueError("spots table has no embedding columns")
    if sub.n < 2:
        raise ValueError(f"need at least 2 training spots, got {sub.n}")

    index = {sid: i for i, sid in enumerate(abundances.spot_ids)}
    missing = [sid for sid in sub.spot_ids if sid not in index]
    if missing:
        raise ValueError(f"abundances missing training spot {missing[0]!r}")
    y = abundances.values[[index[sid] for sid in sub.spot_ids]]

    rng = np.random.default_rng(cfg.seed)
    standardizer = fit_standardizer(sub.embeddings)
    x = transform(standardizer, sub.embeddings)

    layer_dims = (sub.dim,) + (cfg.hidden_width,) * HIDDEN_LAYERS + (len(abundances.cell_types),)
    weights, biases = _init_params(layer_dims, rng)
    model = MlpModel(layer_dims=layer_dims, weights=weights, biases=biases,
                     standardizer=standardizer, seed=cfg.seed)

    m_w = [np.zeros_like(w) for w in weights]
    v_w = [np.zeros_like(w) for w in weights]
    m_b = [np.zeros_like(b) for b in biases]
    v_b = [np.zeros_like(b) for b in biases]
    step = 0
    history: list[dict] = []

    for epoch in range(cfg.epochs):
        perm = rng.permutation(sub.n)
        sums = {"total": 0.0, "mse": 0.0, "mae": 0.0, "pearson": 0.0}
        for bi, sl in enumerate(_batch_slices(sub.n, cfg.batch_size)):
            rows = perm[sl]
            try:
                breakdown, grads_w, grads_b = loss_and_grads(model, x[rows], y[rows], cfg)
            except ValueError as exc:
                raise ValueError(f"training aborted at epoch {epoch} batch {bi}: {exc}") from exc
            if not np.isfinite(breakdown.total):
                raise ValueError(f"non-finite loss at epoch {epoch} batch {bi}")

            step += 1
            scale = cfg.learning_rate * np.sqrt(1.0 - _ADAM_BETA2 ** step) / (1.0 - _ADAM_BETA1 ** step)
            for params, grads, ms, vs in ((weights, grads_w, m_w, v_w),
                                          (biases, grads_b, m_b, v_b)):
                for p, g, m, v in zip(params, grads, ms, vs):
                    m *= _ADAM_BETA1
                    m += (1.0 - _ADAM_BETA1) * g
                    v *= _ADAM_BETA2
                    v += (1.0 - _ADAM_BETA2) * g * g
                    p -= scale * m / (np.sqrt(v) + _ADAM_EPS)

            nb = len(rows)
            sums["total"] += nb * breakdown.total
            sums["mse"] += nb * breakdown.mse
            sums["mae"] += nb * breakdown.mae
            sums["pearson"] += nb * breakdown.pearson
        history.append({"epoch": epoch} | {k: s / sub.n for k, s in sums.items()})

    return model, history


def predict(model: MlpModel, spots: SpotTable, cell_types=None,
            clamp: bool = False) -> AbundanceMatrix:
    """Standardize, run the network, and package predictions per spot.

    `cell_types` names the output columns (generic names by default; the
    model file does not store them).  `clamp` floors raw outputs at zero.
    """
    if spots.dim != model.dim_in:
        raise ValueError(f"embedding dim {spots.dim} does not match model input {model.dim_in}")
    pred = forward(model, spots.embeddings, standardize=True)
    if clamp:
        pred = np.maximum(pred, 0.0)
    if cell_types is None:
        cell_types = tuple(f"c{i}" for i in range(model.dim_out))
    cell_types = tuple(cell_types)
    if len(cell_types) != model.dim_out:
        raise ValueError(f"expected {model.dim_out} cell type names, got {len(cell_types)}")
    return AbundanceMatrix(spot_ids=spots.spot_ids, cell_types=cell_types, values=pred)


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

def save_model(model: MlpModel, path) -> None:
    """Plain-text checkpoint; numbers carry 17 significant digits so that
    save -> load -> save is byte identical."""
    lines = [CHECKPOINT_HEADER]
    lines.append("layer_dims," + ",".join(str(d) for d in model.layer_dims))
    lines.append(f"seed,{model.seed}")
    lines.append("means," + ",".join(fmt_float(v) for v in model.standardizer.means))
    lines.append("stds," + ",".join(fmt_float(v) for v in model.standardizer.stds))
    for l, (w, b) in enumerate(zip(model.weights, model.biases), start=1):
        lines.append(f"W{l}," + ",".join(fmt_float(v) for v in w.ravel()))
        lines.append(f"b{l}," + ",".join(fmt_float(v) for v in b))
    with open(path, "w", newline="", encoding="utf-8") as handle:
        handle.write("\n".join(lines) + "\n")


def _take(fields: list[str], label: str, count: int, path) -> np.ndarray:
    if fields[0] != label:
        raise SchemaError(f"{path}: expected field {label!r}, got {fields[0]!r}")
    if len(fields) != count + 1:
        raise SchemaError(f"{path}: field {label!r} expects {count} values, got {len(fields) - 1}")
    try:
        values = np.array([float(v) for v in fields[1:]], dtype=np.float64)
    except ValueError:
        raise SchemaError(f"{path}: field {label!r} holds a non-numeric value") from None
    if not np.isfinite(values).all():
        raise SchemaError(f"{path}: field {label!r} holds a non-finite value")
    return values


def load_model(path) -> MlpModel:
    with open(path, newline="", encoding="utf-8") as handle:
        lines = handle.read().splitlines()
    if not lines or lines[0] != CHECKPOINT_HEADER:
        raise SchemaError(f"{path}: not a model checkpoint (missing {CHECKPOINT_HEADER!r} header)")
    rows = [line.split(",") for line in lines[1:] if line]
    expect_rows = 4 + 2 * (HIDDEN_LAYERS + 1)
    if len(rows) != expect_rows:
        raise SchemaError(f"{path}: expected {expect_rows} fields, got {len(rows)}")
    if rows[0][0] != "layer_dims":
        raise SchemaError(f"{path}: first field must be layer_dims")
    try:
        layer_dims = tuple(int(v) for v in rows[0][1:])
    except ValueError:
        raise SchemaError(f"{path}: layer_dims must be integers") from None
    if len(layer_dims) != HIDDEN_LAYERS + 2:
        raise SchemaError(f"{path}: layer_dims must have {HIDDEN_LAYERS + 2} entries")
    if rows[1][0] != "seed" or len(rows[1]) != 2:
        raise SchemaError(f"{path}: second field must be seed")
    try:
        seed = int(rows[1][1])
    except ValueError:
        raise SchemaError(f"{path}: seed must be an integer") from None
    dim = layer_dims[0]
    means = _take(rows[2], "means", dim, path)
    stds = _take(rows[3], "stds", dim, path)
    weights, biases = [], []
    for l in range(HIDDEN_LAYERS + 1):
        fan_in, fan_out = layer_dims[l], layer_dims[l + 1]
        w = _take(rows[4 + 2 * l], f"W{l + 1}", fan_in * fan_out, path)
        b = _take(rows[5 + 2 * l], f"b{l + 1}", fan_out, path)
        weights.append(w.reshape(fan_in, fan_out))
        biases.append(b)
    try:
        return MlpModel(layer_dims=layer_dims, weights=weights, biases=biases,
                        standardizer=Standardizer(means=means, stds=stds), seed=seed)
    except ValueError as exc:
        raise SchemaError(f"{path}: {exc}") from None
