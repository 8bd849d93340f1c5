import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from edgenat import serialize
from edgenat.config import TrainConfig, tiny_config
from edgenat.data import synth_dataset
from edgenat.model import EdgeNAT
from edgenat.tensor import NonFiniteError
from edgenat.train import AdamWState, TrainingDiverged, adamw_step, dataset_loss, lr_at, train

MICRO = tiny_config(head_dim=2)


def test_lr_schedule_landmarks():
    cfg = TrainConfig(total_steps=100, warmup_steps=20, peak_lr=1e-3)
    assert lr_at(0, cfg) == 0.0
    assert lr_at(10, cfg) == pytest.approx(5e-4)
    assert lr_at(20, cfg) == pytest.approx(1e-3)
    assert lr_at(60, cfg) == pytest.approx(5e-4)
    assert lr_at(100, cfg) == pytest.approx(0.0, abs=1e-18)


def test_lr_at_full_scale_peak():
    cfg = TrainConfig.full_scale()
    assert lr_at(15000, cfg) == pytest.approx(6e-5, rel=1e-12)
    assert lr_at(7500, cfg) == pytest.approx(3e-5, rel=1e-12)


@given(st.integers(1, 200), st.integers(0, 200))
def test_lr_continuous_and_bounded(total, warm):
    warm = min(warm, total)
    cfg = TrainConfig(total_steps=total, warmup_steps=warm, peak_lr=1.0)
    lrs = np.array([lr_at(s, cfg) for s in range(total + 1)])
    assert (lrs >= 0).all() and (lrs <= 1.0 + 1e-12).all()
    step = max(1.0 / max(warm, 1), math.pi / 2 / max(total - warm, 1) + 1e-12)
    assert np.abs(np.diff(lrs)).max() <= step + 1e-12


def _scalar_adamw(p, grads, lrs, b1=0.9, b2=0.999, eps=1e-8, wd=0.01):
    m = v = 0.0
    for t, (g, lr) in enumerate(zip(grads, lrs), start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        p = p * (1 - lr * wd)
        p = p - lr * (m / (1 - b1**t)) / (math.sqrt(v / (1 - b2**t)) + eps)
    return p


@pytest.mark.parametrize("steps", [10, 50])
def test_adamw_matches_scalar_oracle(steps):
    rng = np.random.default_rng(steps)
    cfg = TrainConfig()
    grads = rng.standard_normal((steps, 5))
    lrs = rng.uniform(1e-4, 1e-2, steps)
    p0 = rng.standard_normal(5)
    params = {"w": p0.copy()}
    state = AdamWState()
    for g, lr in zip(grads, lrs):
        adamw_step(params, {"w": g}, state, lr, cfg)
    expected = [_scalar_adamw(p0[i], grads[:, i], lrs) for i in range(5)]
    np.testing.assert_allclose(params["w"], expected, rtol=1e-6, atol=1e-12)
    assert state.step == steps


def test_zero_gradient_without_decay_is_fixed_point():
    cfg = TrainConfig(weight_decay=0.0)
    params = {"w": np.array([1.0, -2.0])}
    state = AdamWState()
    for _ in range(5):
        adamw_step(params, {"w": None}, state, 1e-2, cfg)
    np.testing.assert_array_equal(params["w"], [1.0, -2.0])


def test_weight_decay_alone_shrinks_geometrically():
    cfg = TrainConfig(weight_decay=0.1)
    params = {"w": np.array([3.0])}
    state = AdamWState()
    for _ in range(4):
        adamw_step(params, {"w": np.zeros(1)}, state, 0.5, cfg)
    assert params["w"][0] == pytest.approx(3.0 * 0.95**4)


def test_non_finite_gradient_raises():
    with pytest.raises(NonFiniteError):
        adamw_step({"w": np.zeros(2)}, {"w": np.array([np.nan, 0.0])}, AdamWState(), 1e-3, TrainConfig())


@pytest.fixture(scope="module")
def samples():
    return synth_dataset(2, size=32, seed=3)


def _cfg(**kw):
    base = dict(total_steps=4, warmup_steps=1, peak_lr=1e-3, batch_size=2, checkpoint_interval=0, log_interval=0)
    base.update(kw)
    return TrainConfig(**base)


def _run(samples, tmp, cfg=None, state=None, model=None):
    model = model or EdgeNAT.init(MICRO, seed=0)
    return model, train(model, samples, cfg or _cfg(), tmp, state=state)


def test_same_seed_same_trajectory(samples, tmp_path):
    m1, r1 = _run(samples, tmp_path / "a")
    m2, r2 = _run(samples, tmp_path / "b")
    assert [h[2] for h in r1.history] == [h[2] for h in r2.history]
    for k in m1.params:
        assert m1.params[k].data.tobytes() == m2.params[k].data.tobytes()


def test_checkpoint_round_trip(samples, tmp_path):
    model, result = _run(samples, tmp_path)
    loaded, extra, meta = EdgeNAT.load(result.checkpoint)
    assert meta["step"] == 4 and loaded.cfg == MICRO
    for k, p in model.params.items():
        assert loaded.params[k].data.tobytes() == p.data.tobytes()
    state = AdamWState.from_tensors(extra, meta["step"])
    for k in result.state.m:
        assert state.m[k].tobytes() == result.state.m[k].tobytes()
        assert state.v[k].tobytes() == result.state.v[k].tobytes()


def test_resume_continues_exactly(samples, tmp_path):
    full, _ = _run(samples, tmp_path / "full")
    # two updates under the same four-step schedule, then reload and finish
    half = EdgeNAT.init(MICRO, seed=0)
    cfg = _cfg()
    r = train(half, samples, cfg, tmp_path / "r", until=2)
    loaded, extra, meta = EdgeNAT.load(r.checkpoint)
    assert meta["step"] == 2
    train(loaded, samples, cfg, tmp_path / "r", state=AdamWState.from_tensors(extra, meta["step"]))
    for k in full.params:
        assert loaded.params[k].data.tobytes() == full.params[k].data.tobytes(), k


def test_divergence_keeps_last_checkpoint(samples, tmp_path):
    model = EdgeNAT.init(MICRO, seed=0)
    train(model, samples, _cfg(total_steps=2), tmp_path)
    before = (tmp_path / "checkpoint.enat").read_bytes()
    model.params["dec.side1.conv1.weight"].data[...] = np.nan
    loaded, extra, meta = EdgeNAT.load(tmp_path / "checkpoint.enat")
    with pytest.raises(TrainingDiverged):
        train(model, samples, _cfg(), tmp_path, state=AdamWState.from_tensors(extra, meta["step"]))
    assert (tmp_path / "checkpoint.enat").read_bytes() == before
    tensors, _ = serialize.load(tmp_path / "checkpoint.enat")
    assert all(np.isfinite(v).all() for v in tensors.values())


def test_zero_steps_writes_initial_checkpoint(samples, tmp_path):
    model, result = _run(samples, tmp_path, _cfg(total_steps=0, warmup_steps=0))
    assert result.history == [] and result.checkpoint.exists()


@pytest.mark.slow
@pytest.mark.xfail(
    strict=True,
    reason="a stride-4 logit map upsampled bilinearly cannot go below ~0.14x the initial loss "
    "on this set; see scripts/head_ceiling.py",
)
def test_two_hundred_step_overfit(tmp_path):
    samples = synth_dataset(8, 64, 7)
    cfg = TrainConfig(total_steps=200, warmup_steps=75, checkpoint_interval=0, log_interval=0)
    model = EdgeNAT.init(tiny_config(), seed=0)
    initial = dataset_loss(model, samples, cfg)
    train(model, samples, cfg, tmp_path)
    assert dataset_loss(model, samples, cfg) < 0.1 * initial
