"""Network forward/backward correctness, training determinism, checkpoints."""

import numpy as np
import pytest

from histocell.dataset import AbundanceMatrix, SampleSplit, SchemaError, SpotTable
from histocell.regressor import (CHECKPOINT_HEADER, HIDDEN_LAYERS, MlpModel,
                                 Standardizer, TrainConfig, fit_standardizer,
                                 forward, init_model, load_model,
                                 loss_and_grads, predict, save_model, silu,
                                 train, transform)
from histocell.regressor import _batch_slices


def unit_chain_model(weight=1.0):
    dims = (1,) * (HIDDEN_LAYERS + 2)
    weights = [np.full((1, 1), weight) for _ in range(HIDDEN_LAYERS + 1)]
    biases = [np.zeros(1) for _ in range(HIDDEN_LAYERS + 1)]
    s = Standardizer(means=np.zeros(1), stds=np.ones(1))
    return MlpModel(layer_dims=dims, weights=weights, biases=biases,
                    standardizer=s, seed=0)


def small_table(n=12, dim=5, seed=0):
    rng = np.random.default_rng(seed)
    return SpotTable(
        spot_ids=tuple(f"s{i}" for i in range(n)),
        sample_ids=tuple("a" if i < n // 2 else "b" for i in range(n)),
        patient_ids=tuple("pa" if i < n // 2 else "pb" for i in range(n)),
        coords=rng.uniform(0, 10, size=(n, 2)),
        embeddings=rng.normal(size=(n, dim)),
    )


# ---------------------------------------------------------------------------
# activations and forward pass
# ---------------------------------------------------------------------------

def test_silu_at_one():
    assert silu(np.array([1.0]))[0] == 0.7310585786300049


def test_silu_chain_through_seven_layers():
    # all-ones 1-unit net: seven silu applications then the linear head;
    # reference value from an independent scalar evaluation (agreement to
    # the last couple of ulps, exp implementations differ there)
    model = unit_chain_model()
    out = forward(model, np.array([[1.0]]))
    assert out[0, 0] == pytest.approx(0.025789308897457862, rel=1e-14, abs=0)


def test_zero_parameters_give_zero_output():
    model = unit_chain_model(weight=0.0)
    out = forward(model, np.array([[3.0], [-2.0]]))
    assert np.all(out == 0.0)


def test_equal_rows_give_equal_outputs():
    cfg = TrainConfig(hidden_width=6, seed=3)
    model = init_model(4, 2, cfg)
    x = np.tile(np.array([[0.3, -1.0, 2.0, 0.5]]), (2, 1))
    out = forward(model, x)
    assert np.array_equal(out[0], out[1])


@pytest.mark.filterwarnings("ignore:overflow")
def test_forward_reports_offending_layer():
    model = unit_chain_model(weight=1e200)
    with pytest.raises(ValueError, match="layer 2"):
        forward(model, np.array([[1.0]]))


def test_forward_finite_for_finite_inputs():
    rng = np.random.default_rng(9)
    for seed in range(10):
        cfg = TrainConfig(hidden_width=8, seed=seed)
        model = init_model(6, 3, cfg)
        x = rng.uniform(-50, 50, size=(5, 6))
        assert np.isfinite(forward(model, x)).all()


def test_forward_dim_mismatch():
    model = init_model(4, 2, TrainConfig(hidden_width=4))
    with pytest.raises(ValueError):
        forward(model, np.zeros((3, 5)))


# ---------------------------------------------------------------------------
# standardizer
# ---------------------------------------------------------------------------

def test_fit_standardizer_basics():
    s = fit_standardizer(np.array([[1.0], [3.0]]))
    assert s.means[0] == 2.0 and s.stds[0] == 1.0

    s = fit_standardizer(np.array([[5.0], [5.0], [5.0]]))
    assert s.means[0] == 5.0 and s.stds[0] == 1.0
    assert np.all(transform(s, np.array([[5.0]])) == 0.0)

    s = fit_standardizer(np.array([[2.0, -1.0]]))
    assert np.all(s.stds == 1.0)


def test_transform_centers_columns():
    rng = np.random.default_rng(4)
    x = rng.normal(3.0, 2.5, size=(200, 6))
    s = fit_standardizer(x)
    z = transform(s, x)
    assert np.abs(z.mean(axis=0)).max() < 1e-12
    with pytest.raises(ValueError):
        transform(s, np.zeros((4, 7)))


def test_fit_standardizer_rejects_empty():
    with pytest.raises(ValueError):
        fit_standardizer(np.zeros((0, 3)))


# ---------------------------------------------------------------------------
# gradients through the network
# ---------------------------------------------------------------------------

def test_parameter_gradients_match_finite_differences():
    cfg = TrainConfig(hidden_width=4, seed=1)
    model = init_model(5, 3, cfg)
    rng = np.random.default_rng(2)
    x = rng.normal(size=(6, 5))
    y = rng.normal(size=(6, 3))
    _, grads_w, grads_b = loss_and_grads(model, x, y, cfg)

    def total():
        from histocell.objective import composite_loss
        pred = forward(model, x)
        return composite_loss(pred, y, lambda1=cfg.lambda1, lambda2=cfg.lambda2,
                              epsilon=cfg.epsilon).total

    step = 1e-5
    checked = 0
    for params, grads in ((model.weights, grads_w), (model.biases, grads_b)):
        for p, g in zip(params, grads):
            flat_p = p.ravel()
            flat_g = g.ravel()
            for k in range(flat_p.size):
                keep = flat_p[k]
                flat_p[k] = keep + step
                up = total()
                flat_p[k] = keep - step
                down = total()
                flat_p[k] = keep
                fd = (up - down) / (2 * step)
                if abs(fd) < 1e-7 and abs(flat_g[k]) < 1e-7:
                    checked += 1
                    continue
                assert abs(flat_g[k] - fd) / max(abs(fd), 1e-7) < 1e-4, \
                    f"param {k}: analytic {flat_g[k]} vs fd {fd}"
                checked += 1
    assert checked == sum(w.size for w in model.weights) + sum(b.size for b in model.biases)


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

def test_batch_slices_merge_trailing_singleton():
    assert _batch_slices(5, 2) == [slice(0, 2), slice(2, 5)]
    assert _batch_slices(4, 2) == [slice(0, 2), slice(2, 4)]
    assert _batch_slices(3, 8) == [slice(0, 3)]


def tiny_training_problem(seed=0):
    spots = small_table(n=16, dim=4, seed=seed)
    rng = np.random.default_rng(seed + 100)
    w = rng.normal(size=(4, 3))
    values = np.maximum(spots.embeddings @ w, 0.0) + 1.0
    truth = AbundanceMatrix(spot_ids=spots.spot_ids,
                            cell_types=("x", "y", "z"), values=values)
    return spots, truth


def test_epochs_zero_returns_seeded_init():
    spots, truth = tiny_training_problem()
    cfg = TrainConfig(hidden_width=5, epochs=0, seed=9)
    model, history = train(spots, truth, None, cfg)
    assert history == []
    reference = init_model(spots.dim, 3, cfg, standardizer=model.standardizer)
    for a, b in zip(model.weights, reference.weights):
        assert np.array_equal(a, b)


def test_training_is_deterministic():
    spots, truth = tiny_training_problem()
    cfg = TrainConfig(hidden_width=5, epochs=4, batch_size=8, seed=2)
    m1, h1 = train(spots, truth, None, cfg)
    m2, h2 = train(spots, truth, None, cfg)
    assert h1 == h2
    for a, b in zip(m1.weights + m1.biases, m2.weights + m2.biases):
        assert np.array_equal(a, b)


def test_training_reduces_loss():
    spots, truth = tiny_training_problem()
    cfg = TrainConfig(hidden_width=16, epochs=40, batch_size=8, seed=0,
                      learning_rate=3e-3)
    _, history = train(spots, truth, None, cfg)
    assert history[-1]["total"] < history[0]["total"]


def test_train_respects_split():
    spots, truth = tiny_training_problem()
    split = SampleSplit(name="pb", train_spot_ids=frozenset(spots.spot_ids[:8]),
                        test_spot_ids=frozenset(spots.spot_ids[8:]))
    cfg = TrainConfig(hidden_width=5, epochs=1, batch_size=4, seed=1)
    model, _ = train(spots, truth, split, cfg)
    # standardizer must be fit on the training half only
    expect = fit_standardizer(spots.embeddings[:8])
    assert np.array_equal(model.standardizer.means, expect.means)


def test_train_rejects_degenerate_inputs():
    spots, truth = tiny_training_problem()
    with pytest.raises(ValueError):
        TrainConfig(batch_size=1)
    no_dim = spots.with_embeddings(np.zeros((spots.n, 0)))
    with pytest.raises(ValueError, match="no embedding"):
        train(no_dim, truth, None, TrainConfig(hidden_width=4, epochs=1))


# ---------------------------------------------------------------------------
# predict
# ---------------------------------------------------------------------------

def test_predict_clamp_and_purity():
    spots, truth = tiny_training_problem()
    model = init_model(spots.dim, 3, TrainConfig(hidden_width=5, seed=0))
    model.biases[-1][:] = -10.0  # force negative raw outputs
    raw = predict(model, spots, cell_types=truth.cell_types)
    clamped = predict(model, spots, cell_types=truth.cell_types, clamp=True)
    assert raw.values.min() < 0.0
    assert clamped.values.min() == 0.0
    again = predict(model, spots, cell_types=truth.cell_types)
    assert np.array_equal(raw.values, again.values)
    assert raw.cell_types == truth.cell_types


def test_predict_dim_mismatch():
    spots, _ = tiny_training_problem()
    model = init_model(spots.dim + 1, 3, TrainConfig(hidden_width=4))
    with pytest.raises(ValueError, match="dim"):
        predict(model, spots)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def test_checkpoint_roundtrip_is_byte_identical(tmp_path):
    spots, truth = tiny_training_problem()
    cfg = TrainConfig(hidden_width=5, epochs=2, batch_size=8, seed=3)
    model, _ = train(spots, truth, None, cfg)
    p1 = tmp_path / "a.ckpt"
    p2 = tmp_path / "b.ckpt"
    save_model(model, p1)
    loaded = load_model(p1)
    save_model(loaded, p2)
    assert p1.read_bytes() == p2.read_bytes()
    assert p1.read_text().splitlines()[0] == CHECKPOINT_HEADER
    for a, b in zip(model.weights, loaded.weights):
        assert np.array_equal(a, b)
    assert loaded.seed == model.seed


def test_checkpoint_rejects_garbage(tmp_path):
    path = tmp_path / "bad.ckpt"
    path.write_text("not a checkpoint\n")
    with pytest.raises(SchemaError):
        load_model(path)

    model = unit_chain_model()
    good = tmp_path / "good.ckpt"
    save_model(model, good)
    lines = good.read_text().splitlines()
    lines[2] = "seed,abc"
    bad = tmp_path / "tampered.ckpt"
    bad.write_text("\n".join(lines) + "\n")
    with pytest.raises(SchemaError):
        load_model(bad)
