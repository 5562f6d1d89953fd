"""Registry of finite-difference gradient checks for every differentiable op and the micro-ViT.

Each case builds float64 inputs and a scalar function of one input.  Ops are
looked up on their modules at call time, so a patched backward rule is seen
by the checks.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import adapters as A
from . import tensor as T

DEFAULT_TOL = 1e-4
DEFAULT_PROBES = 24


@dataclass
class CheckResult:
    name: str
    max_error: float
    probes: int
    passed: bool


def _t(rng, *shape, positive=False, away_from_zero=False) -> T.Tensor:
    x = rng.standard_normal(shape)
    if positive:
        x = np.abs(x) + 0.5
    if away_from_zero:
        x = np.where(np.abs(x) < 0.1, x + np.sign(x + 1e-12) * 0.2, x)
    return T.Tensor(x, dtype=np.float64)


def _proj(out: T.Tensor, rng_seed: int = 7) -> T.Tensor:
    R = np.random.default_rng(rng_seed).standard_normal(out.shape)
    return T.tensor_sum(T.mul(out, T.Tensor(R, dtype=np.float64)))


def _unary(op: Callable, **kw):
    def build(rng):
        x = _t(rng, 3, 4, **kw)
        return [(lambda t: _proj(op(t)), x)]
    return build


def _binary(op: Callable, b_shape=(3, 4)):
    def build(rng):
        a, b = _t(rng, 3, 4), _t(rng, *b_shape)
        return [(lambda t: _proj(op(t, b)), a), (lambda t: _proj(op(a, t)), b)]
    return build


def _matmul(a_shape, b_shape):
    def build(rng):
        a, b = _t(rng, *a_shape), _t(rng, *b_shape)
        return [(lambda t: _proj(T.matmul(t, b)), a), (lambda t: _proj(T.matmul(a, t)), b)]
    return build


def _layer_norm(rng):
    x, g, b = _t(rng, 2, 3, 5), _t(rng, 5), _t(rng, 5)
    return [(lambda t: _proj(T.layer_norm(t, g, b)), x),
            (lambda t: _proj(T.layer_norm(x, t, b)), g),
            (lambda t: _proj(T.layer_norm(x, g, t)), b)]


def _concat(rng):
    a, b = _t(rng, 2, 3), _t(rng, 4, 3)
    return [(lambda t: _proj(T.concat([t, b], axis=0)), a), (lambda t: _proj(T.concat([a, t], axis=0)), b)]


def _dropout(rng):
    x = _t(rng, 4, 6)
    return [(lambda t: _proj(T.dropout(t, 0.3, np.random.default_rng(3))), x)]


def _pick(rng):
    x = _t(rng, 5, 4)
    labels = np.array([0, 3, 1, 1, 2])
    return [(lambda t: T.tensor_sum(T.pick(T.log_softmax(t), labels)), x)]


def _lora(rng):
    n, d, k, r = 2, 6, 5, 2
    x, W0 = _t(rng, n, 3, d), _t(rng, k, d)
    a, b = _t(rng, n, r, d), _t(rng, n, k, r)
    return [(lambda t: _proj(A.lora_forward(t, W0, a, b)), x),
            (lambda t: _proj(A.lora_forward(x, W0, t, b)), a),
            (lambda t: _proj(A.lora_forward(x, W0, a, t)), b),
            (lambda t: _proj(A.lora_forward(x, t, a, b)), W0)]


def _batch(mode):
    def build(rng):
        n, d, k = 2, 6, 5
        x, W = _t(rng, n, 3, d), _t(rng, k, d)
        r, s = _t(rng, n, d), _t(rng, n, k)
        return [(lambda t: _proj(A.batch_forward(t, W, r, s, mode)), x),
                (lambda t: _proj(A.batch_forward(x, t, r, s, mode)), W),
                (lambda t: _proj(A.batch_forward(x, W, t, s, mode)), r),
                (lambda t: _proj(A.batch_forward(x, W, r, t, mode)), s)]
    return build


def _head(rng):
    f, W, b = _t(rng, 2, 3, 6), _t(rng, 2, 4, 6), _t(rng, 2, 4)
    return [(lambda t: _proj(A.head_forward(t, W, b)), f),
            (lambda t: _proj(A.head_forward(f, t, b)), W),
            (lambda t: _proj(A.head_forward(f, W, t)), b)]


def _epinet(rng):
    st = A.EpinetState(6, 3, 2, epistemic_dim=4, hidden=8, seed=1, dtype=np.float64)
    for layers in st.learnable:
        for W, b in layers:
            W.data[...] = rng.standard_normal(W.shape) * 0.5
            b.data[...] = rng.standard_normal(b.shape) * 0.1
    phi, z = _t(rng, 5, 6), _t(rng, 5, 4)
    W1, _ = st.learnable[1][0]
    # Features enter the epinet through a stop-gradient, which finite differences
    # cannot see, so they are not probed here.
    return [(lambda t: _proj(A.epinet_forward(st, phi, t, 1)), z),
            (lambda t: _proj(A.epinet_forward(st, phi, z, 1)), W1),
            (lambda t: _proj(A.epinet_forward(st, phi, z, 1)), st.head_W)]


def micro_vit_config(method: str = "lora"):
    from .backbone import ModelConfig

    return ModelConfig(image_size=8, patch_size=4, channels=1, embed_dim=16, depth=2, num_heads=2,
                       num_classes=3, ensemble_size=2, method=method, rank=2, init_scale=1.0,
                       backbone_trainable=True, epinet_hidden=8, epistemic_dim=3)


def _model(method: str):
    def build(rng):
        from .backbone import ViT
        from .training import weighted_ce_loss

        model = ViT(micro_vit_config(method), seed=3, dtype=np.float64)
        for name, p in model.all_tensors().items():
            if name.endswith("/B"):  # leave the zero start so A receives gradient
                p.data[...] = 0.3 * rng.standard_normal(p.shape)
        images = rng.standard_normal((3, 8, 8, 1))
        labels = np.array([0, 2, 1])
        z = rng.standard_normal((2, 3, 3)) if method == "epinet" else None

        def loss(_t):
            return weighted_ce_loss(model.forward(images, z=z), labels, [3, 1, 2], beta=0.5)

        params = model.parameters()
        if method == "epinet":  # backbone gradients deliberately skip the epinet path
            params = {k: v for k, v in params.items() if "epinet" in k or k.startswith("head")}
        return [(loss, p) for p in params.values()]
    return build


GRADCHECK_CASES: dict[str, Callable] = {
    "add": _binary(lambda a, b: T.add(a, b)),
    "add_bias": _binary(lambda a, b: T.add(a, b), b_shape=(4,)),
    "sub": _binary(lambda a, b: T.sub(a, b), b_shape=(1, 4)),
    "mul": _binary(lambda a, b: T.mul(a, b)),
    "mul_broadcast": _binary(lambda a, b: T.mul(a, b), b_shape=(4,)),
    "neg": _unary(lambda a: T.neg(a)),
    "scale": _unary(lambda a: T.scale(a, -1.7)),
    "matmul": _matmul((3, 4), (4, 5)),
    "matmul_shared": _matmul((2, 3, 4), (4, 5)),
    "matmul_batched": _matmul((2, 3, 4), (2, 4, 5)),
    "transpose": _unary(lambda a: T.transpose(a)),
    "reshape": _unary(lambda a: T.reshape(a, (2, 6))),
    "concat": _concat,
    "take": _unary(lambda a: T.take(a, np.array([2, 0, 2]), axis=0)),
    "take_scalar": _unary(lambda a: T.take(a, 1, axis=1)),
    "expand": _unary(lambda a: T.expand(a, 3)),
    "sum": _unary(lambda a: T.tensor_sum(a, axis=1)),
    "mean": _unary(lambda a: T.tensor_mean(a, axis=0, keepdims=True)),
    "exp": _unary(lambda a: T.exp(a)),
    "log": _unary(lambda a: T.log(a), positive=True),
    "relu": _unary(lambda a: T.relu(a), away_from_zero=True),
    "gelu": _unary(lambda a: T.gelu(a)),
    "softmax": _unary(lambda a: T.softmax(a)),
    "log_softmax": _unary(lambda a: T.log_softmax(a)),
    "layer_norm": _layer_norm,
    "dropout": _dropout,
    "pick": _pick,
    "lora_forward": _lora,
    "batch_forward": _batch("multiplicative"),
    "batch_pp_forward": _batch("additive"),
    "head_forward": _head,
    "epinet_forward": _epinet,
    "micro_vit_lora": _model("lora"),
    "micro_vit_batch": _model("batch"),
    "micro_vit_epinet": _model("epinet"),
}

MODEL_CASES = ("micro_vit_lora", "micro_vit_batch", "micro_vit_epinet")


def run_case(name: str, probes: int = DEFAULT_PROBES, tol: float = DEFAULT_TOL, seed: int = 0) -> CheckResult:
    rng = np.random.default_rng(seed)
    pairs = GRADCHECK_CASES[name](rng)
    worst, used = 0.0, 0
    if name in MODEL_CASES:
        # smallest tensors first so budget they cannot use passes on to larger ones
        order = sorted(range(len(pairs)), key=lambda i: pairs[i][1].size)
        budget = {}
        left = probes
        for j, i in enumerate(order):
            budget[i] = min(pairs[i][1].size, max(1, left // (len(order) - j)))
            left -= budget[i]
    else:
        budget = {i: min(x.size, probes) for i, (_, x) in enumerate(pairs)}
    for i, (f, x) in enumerate(pairs):
        k = budget[i]
        coords = rng.choice(x.size, size=k, replace=False)
        worst = max(worst, T.grad_check(f, x, coords=coords))
        used += k
    return CheckResult(name, worst, used, bool(worst < tol))


def run_gradcheck(names=None, probes: int = DEFAULT_PROBES, model_probes: int = 150,
                  tol: float = DEFAULT_TOL, seed: int = 0) -> list[CheckResult]:
    """Check every registered case; model cases spread ``model_probes`` over their parameters."""
    out = []
    for name in names or GRADCHECK_CASES:
        n = model_probes if name in MODEL_CASES else probes
        out.append(run_case(name, n, tol, seed))
    return out
