import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from loraens import checkpoint
from loraens.adapters import ConfigError
from loraens.backbone import ModelConfig
from loraens.data import SyntheticSpec, gen_synthetic
from loraens.tensor import NumericError, Tensor
from loraens.training import (
    DivergenceError,
    OptimizerState,
    SchedulePlan,
    TrainConfig,
    adamw_step,
    class_weights,
    clip_gradients,
    global_norm,
    lr_at,
    read_history,
    sgd_step,
    snapshot_lr,
    train_run,
    weighted_ce_loss,
)

TINY = dict(image_size=8, patch_size=4, embed_dim=16, depth=1, num_heads=2, num_classes=3)
TINY_DATA = SyntheticSpec(num_classes=3, image_size=8, n_train=48, n_test=24, n_ood=24, noise_std=0.5)


def f64(x, grad=False):
    return Tensor(np.asarray(x, dtype=np.float64), requires_grad=grad)


# -- AdamW ------------------------------------------------------------------------

def test_adamw_first_step_closed_form():
    p = {"p": f64([1.0])}
    adamw_step(p, {"p": np.array([1.0])}, OptimizerState(weight_decay=0.01), lr=1e-3)
    expected = 1.0 - 1e-3 * 1.0 / (1.0 + 1e-8) - 1e-3 * 0.01 * 1.0
    assert p["p"].data[0] == pytest.approx(expected, abs=1e-15)
    assert round(p["p"].data[0], 6) == 0.998990


def test_adamw_zero_grad_no_decay_is_fixed_point():
    p = {"p": f64([0.3, -2.0])}
    st_ = OptimizerState(weight_decay=0.0)
    for _ in range(3):
        adamw_step(p, {"p": np.zeros(2)}, st_, lr=0.1)
    np.testing.assert_array_equal(p["p"].data, [0.3, -2.0])


def test_adamw_zero_grad_pure_decay():
    p = {"p": f64([0.3, -2.0])}
    adamw_step(p, {"p": np.zeros(2)}, OptimizerState(weight_decay=0.5), lr=0.1)
    np.testing.assert_allclose(p["p"].data, np.array([0.3, -2.0]) * (1 - 0.1 * 0.5), rtol=1e-15)


@given(arrays(np.float64, (5, 4), elements=st.floats(-3, 3)), st.floats(1e-4, 1e-1))
def test_adamw_without_decay_is_adam(gs, lr):
    """Reference Adam written out per step, coordinate by coordinate."""
    p = {"p": f64(np.zeros(4))}
    st_ = OptimizerState(weight_decay=0.0)
    ref = [0.0] * 4
    m, v = [0.0] * 4, [0.0] * 4
    for t, g in enumerate(gs, start=1):
        adamw_step(p, {"p": g.copy()}, st_, lr)
        for j in range(4):
            m[j] = 0.9 * m[j] + 0.1 * g[j]
            v[j] = 0.999 * v[j] + 0.001 * g[j] ** 2
            mh, vh = m[j] / (1 - 0.9**t), v[j] / (1 - 0.999**t)
            ref[j] -= lr * mh / (math.sqrt(vh) + 1e-8)
    np.testing.assert_allclose(p["p"].data, ref, rtol=1e-10, atol=1e-14)
    assert st_.step == len(gs)


def test_adamw_nan_gradient_aborts_step():
    p = {"p": f64([1.0, 2.0])}
    st_ = OptimizerState()
    with pytest.raises(NumericError):
        adamw_step(p, {"p": np.array([np.nan, 1.0])}, st_, lr=0.1)
    np.testing.assert_array_equal(p["p"].data, [1.0, 2.0])
    assert st_.step == 0


def test_sgd_momentum():
    p = {"p": f64([1.0])}
    st_ = OptimizerState(kind="sgd", weight_decay=0.0, momentum=0.9)
    sgd_step(p, {"p": np.array([1.0])}, st_, lr=0.1)
    sgd_step(p, {"p": np.array([1.0])}, st_, lr=0.1)
    assert p["p"].data[0] == pytest.approx(1.0 - 0.1 - 0.1 * 1.9)


def test_optimizer_buffers_match_shapes():
    p = {"a": f64(np.zeros((2, 3))), "b": f64(np.zeros(4))}
    st_ = OptimizerState()
    adamw_step(p, {"a": np.ones((2, 3)), "b": np.ones(4)}, st_, 0.01)
    assert all(st_.m[k].shape == p[k].shape and st_.v[k].shape == p[k].shape for k in p)


# -- schedules ------------------------------------------------------------------

def test_lr_warmup_midpoint():
    assert lr_at(250, SchedulePlan(1e-4, 500, 5000)) == pytest.approx(5e-5, rel=1e-15)


def test_lr_endpoints():
    plan = SchedulePlan(1e-4, 500, 5000)
    assert lr_at(0, plan) == 0.0
    assert lr_at(500, plan) == 1e-4
    assert lr_at(5000, plan) == pytest.approx(0.0, abs=1e-20)


def test_lr_exponential():
    plan = SchedulePlan(1e-3, 10, 10_000, shape="warmup_exponential", factor=0.94, every_epochs=4, steps_per_epoch=50)
    assert lr_at(8 * 50, plan) == pytest.approx(1e-3 * 0.94**2, rel=1e-14)
    assert lr_at(8 * 50 - 1, plan) == pytest.approx(1e-3 * 0.94, rel=1e-14)


@given(st.integers(1, 1000), st.integers(1, 1000))
def test_lr_continuous_at_warmup_boundary(w, extra):
    plan = SchedulePlan(3e-4, w, w + extra)
    left = 3e-4 * (w - 1e-9) / w
    assert lr_at(w, plan) == 3e-4
    assert abs(left - lr_at(w, plan)) < 1e-9
    assert abs(lr_at(w + 1, plan) - 3e-4) <= 3e-4 * (1 - math.cos(math.pi / extra)) / 2 + 1e-18


@given(st.integers(0, 50), st.integers(0, 30), st.integers(1, 20))
def test_snapshot_lr_cycles_hit_zero(warm, burn, cycle):
    for k in range(1, 4):
        assert snapshot_lr(burn + k * cycle, 1e-3, warm, burn, cycle) == pytest.approx(0.0, abs=1e-18)
        lo = snapshot_lr(burn + (k - 1) * cycle + 1, 1e-3, warm, burn, cycle)
        assert lo > snapshot_lr(burn + k * cycle, 1e-3, warm, burn, cycle) or cycle == 1
    if burn:
        assert snapshot_lr(burn, 1e-3, warm, burn, cycle) == pytest.approx(0.0, abs=1e-18)


# -- clipping -------------------------------------------------------------------------

def test_clip_scales_down():
    out, norm = clip_gradients({"a": np.array([2.0, 0.0])}, 1.0)
    assert norm == 2.0
    np.testing.assert_array_equal(out["a"], [1.0, 0.0])


def test_clip_leaves_small_norm():
    g = {"a": np.array([0.3, 0.4])}
    out, norm = clip_gradients(g, 1.0)
    assert norm == pytest.approx(0.5)
    np.testing.assert_array_equal(out["a"], g["a"])


@given(arrays(np.float64, 5, elements=st.floats(-10, 10)), arrays(np.float64, (2, 3), elements=st.floats(-10, 10)))
def test_clip_equals_clip_of_concatenation(a, b):
    parts, n1 = clip_gradients([a, b], 1.0)
    flat, n2 = clip_gradients([np.concatenate([a, b.ravel()])], 1.0)
    assert n1 == pytest.approx(n2, rel=1e-12)
    np.testing.assert_allclose(np.concatenate([parts[0], parts[1].ravel()]), flat[0], rtol=1e-12, atol=1e-300)
    assert global_norm(parts) <= 1.0 + 1e-12


def test_clip_rejects_nan():
    with pytest.raises(NumericError):
        clip_gradients([np.array([np.nan])])


# -- losses -----------------------------------------------------------------------

def test_beta_zero_weights_are_uniform():
    np.testing.assert_array_equal(class_weights([5, 100, 3], 0.0), [1, 1, 1])


def test_equal_counts_give_uniform_weights():
    np.testing.assert_allclose(class_weights([40, 40, 40], 0.9991), 1.0, rtol=1e-14)


def test_effective_number_weights_formula():
    w = class_weights([1000, 10], 0.9991)
    raw = [(1 - 0.9991) / (1 - 0.9991**1000), (1 - 0.9991) / (1 - 0.9991**10)]
    mean = (raw[0] + raw[1]) / 2
    np.testing.assert_allclose(w, [raw[0] / mean, raw[1] / mean], rtol=1e-13)
    assert w[1] > w[0]


@given(st.lists(st.integers(1, 5000), min_size=2, max_size=6, unique=True), st.floats(0.01, 0.9999))
def test_effective_number_weights_decrease_with_count(counts, beta):
    counts = sorted(counts)
    w = class_weights(counts, beta)
    assert np.all(np.diff(w) <= 0)
    # strict wherever beta**n is still resolvable next to 1 in double precision
    for (a, b), (wa, wb) in zip(zip(counts, counts[1:]), zip(w, w[1:])):
        if beta**a - beta**b > 1e-13:
            assert wa > wb


def test_weighted_ce_uniform_is_mean_nll():
    rng = np.random.default_rng(0)
    logits, y = rng.standard_normal((6, 4)), rng.integers(0, 4, 6)
    lp = logits - np.log(np.exp(logits).sum(1, keepdims=True))
    expected = -lp[np.arange(6), y].mean()
    assert float(weighted_ce_loss(f64(logits), y).data) == pytest.approx(expected, rel=1e-14)
    assert float(weighted_ce_loss(f64(logits), y, [3, 3, 3, 3], 0.99).data) == pytest.approx(expected, rel=1e-14)


def test_weighted_ce_weighted_formula():
    rng = np.random.default_rng(1)
    logits, y = rng.standard_normal((5, 2)), np.array([0, 1, 1, 0, 1])
    w = class_weights([1000, 10], 0.9991)
    lp = logits - np.log(np.exp(logits).sum(1, keepdims=True))
    expected = -sum(w[y[i]] * lp[i, y[i]] for i in range(5)) / sum(w[y[i]] for i in range(5))
    assert float(weighted_ce_loss(f64(logits), y, [1000, 10], 0.9991).data) == pytest.approx(expected, rel=1e-13)


def test_weighted_ce_member_mean():
    rng = np.random.default_rng(2)
    logits, y = rng.standard_normal((3, 5, 4)), rng.integers(0, 4, 5)
    per = [float(weighted_ce_loss(f64(logits[i]), y).data) for i in range(3)]
    assert float(weighted_ce_loss(f64(logits), y).data) == pytest.approx(np.mean(per), rel=1e-14)


def test_weighted_ce_bad_label():
    with pytest.raises(IndexError):
        weighted_ce_loss(f64(np.zeros((2, 3))), np.array([0, 3]))


# -- train_run ---------------------------------------------------------------------

@pytest.fixture(scope="module")
def tiny_train():
    return gen_synthetic(TINY_DATA, "train", seed=0)


def test_zero_epochs_returns_initialisation(tiny_train):
    from loraens.ensemble import build_model

    cfg = ModelConfig(**TINY, method="lora", ensemble_size=2, rank=2)
    res = train_run(cfg, TrainConfig(epochs=0), tiny_train, seed=3)
    init = build_model(cfg, seed=3).state_dict()
    assert res.history == [] and res.steps == 0
    for k, v in res.model.state_dict().items():
        np.testing.assert_array_equal(v, init[k])


def test_lr_zero_leaves_parameters(tiny_train):
    cfg = ModelConfig(**TINY, method="lora", ensemble_size=2, rank=2)
    from loraens.ensemble import build_model

    init = build_model(cfg, seed=1).state_dict()
    res = train_run(cfg, TrainConfig(epochs=2, base_lr=0.0, weight_decay=0.01), tiny_train, seed=1)
    for k, v in res.model.state_dict().items():
        np.testing.assert_array_equal(v, init[k])
    assert res.history[0]["loss"] == pytest.approx(res.history[1]["loss"], rel=1e-6)


@pytest.mark.parametrize("method", ["single", "lora", "batch", "batch_pp", "last_layer", "epinet", "mc_dropout",
                                    "explicit", "snapshot"])
def test_full_run_deterministic(method, tiny_train, tmp_path):
    cfg = ModelConfig(**TINY, method=method, ensemble_size=2, rank=2, epinet_hidden=8, dropout_rate=0.1)
    tc = TrainConfig(epochs=3, base_lr=1e-3, warmup_steps=2, snapshot_burn_in=1)
    a = train_run(cfg, tc, tiny_train, seed=5, history_path=tmp_path / "a.jsonl")
    b = train_run(cfg, tc, tiny_train, seed=5, history_path=tmp_path / "b.jsonl")
    assert checkpoint.encode(a.model.state_dict()) == checkpoint.encode(b.model.state_dict())
    assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()
    rows = read_history(tmp_path / "a.jsonl")
    assert set(rows[0]) == {"epoch", "member", "loss", "acc", "lr"}


def test_frozen_backbone_untouched_by_training(tiny_train):
    cfg = ModelConfig(**TINY, method="lora", ensemble_size=2, rank=2)
    from loraens.ensemble import build_model

    init = build_model(cfg, seed=0).state_dict()
    final = train_run(cfg, TrainConfig(epochs=2, base_lr=1e-2, warmup_steps=1), tiny_train, seed=0).model.state_dict()
    for k in init:
        if k.startswith("backbone/"):
            np.testing.assert_array_equal(final[k], init[k])
    assert any(not np.array_equal(final[k], init[k]) for k in init if k.endswith("/B"))


def test_trainable_backbone_is_updated(tiny_train):
    cfg = ModelConfig(**TINY, method="lora", ensemble_size=2, rank=2, backbone_trainable=True)
    from loraens.ensemble import build_model

    init = build_model(cfg, seed=0).state_dict()
    final = train_run(cfg, TrainConfig(epochs=1, base_lr=1e-2, warmup_steps=1), tiny_train, seed=0).model.state_dict()
    assert not np.array_equal(final["backbone/block0/query/W"], init["backbone/block0/query/W"])


def test_snapshot_run_collects_members(tiny_train):
    cfg = ModelConfig(**TINY, method="snapshot", ensemble_size=3)
    res = train_run(cfg, TrainConfig(epochs=7, base_lr=1e-3, warmup_steps=2, snapshot_burn_in=3), tiny_train, seed=0)
    assert len(res.model.snapshots) == 3
    # burn-in 3 -> 4 epochs left, not divisible by 3, so the plan extends it to 4 with one-epoch cycles
    steps = math.ceil(48 / 32)
    lrs = [h["lr"] for h in res.history]
    assert lrs[3] == pytest.approx(0.0, abs=1e-18) and lrs[4] == pytest.approx(0.0, abs=1e-18)
    assert res.steps == 7 * steps


def test_divergence_reports_step(tiny_train):
    cfg = ModelConfig(**TINY, method="single")
    bad = gen_synthetic(TINY_DATA, "train", seed=0)
    bad.images = bad.images.copy()
    bad.images[:] = np.inf
    with pytest.raises(DivergenceError) as exc, np.errstate(invalid="ignore"):
        train_run(cfg, TrainConfig(epochs=1), bad, seed=0)
    assert exc.value.step == 1


def test_train_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(schedule="linear").validate()
    with pytest.raises(ConfigError):
        TrainConfig.from_dict({"epochz": 3})


def test_class_mismatch_rejected(tiny_train):
    with pytest.raises(ConfigError):
        train_run(ModelConfig(**{**TINY, "num_classes": 4}), TrainConfig(epochs=1), tiny_train)


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_default_recipe_loss_decreases_over_first_epochs(seed):
    spec = SyntheticSpec(n_train=256)
    ds = gen_synthetic(spec, "train", seed=seed)
    res = train_run(ModelConfig(method="single"), TrainConfig(epochs=30), ds, seed=seed)
    losses = [h["loss"] for h in res.history[:5]]
    assert all(b < a for a, b in zip(losses, losses[1:])), losses
