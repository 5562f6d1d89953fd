"""Per-member adapter state and forward rules for every ensembling method.

All member-indexed parameters carry the member index on axis 0, so a single
batched matmul evaluates every member at once.  Activations entering an
adapter are ``[N, M, d]`` (member, rows, features); 2-D inputs are accepted
for single-member use with 2-D parameters.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import (
    Tensor,
    add,
    concat,
    expand,
    matmul,
    mul,
    relu,
    reshape,
    stop_gradient,
    take,
    transpose,
)

GOLDEN = 0x9E3779B9
_MASK64 = (1 << 64) - 1


class ConfigError(ValueError):
    """Invalid model or adapter configuration."""


def member_seed(seed: int, member: int) -> int:
    return (int(seed) + int(member) * GOLDEN) & _MASK64


def member_rng(seed: int, member: int) -> np.random.Generator:
    """Counter-based (Philox) stream for ``member`` under run ``seed``."""
    return np.random.Generator(np.random.Philox(member_seed(seed, member)))


@dataclass(frozen=True)
class InitSpec:
    """How to draw LoRA ``A``: ``xavier_uniform`` with ``scale`` as gain, or
    ``gaussian`` with ``scale`` as standard deviation."""

    kind: str = "xavier_uniform"
    scale: float = 10.0

    def __post_init__(self):
        if self.kind not in ("xavier_uniform", "gaussian"):
            raise ConfigError(f"unknown init spec {self.kind!r}")
        if self.scale < 0:
            raise ConfigError("init scale must be nonnegative")

    def draw(self, rng: np.random.Generator, shape: tuple[int, int]) -> np.ndarray:
        fan_out, fan_in = shape
        if self.kind == "xavier_uniform":
            bound = self.scale * np.sqrt(6.0 / (fan_in + fan_out))
            return rng.uniform(-bound, bound, size=shape)
        return self.scale * rng.standard_normal(shape)


# ---------------------------------------------------------------------------
# LoRA


class LoraAdapter:
    """Member-stacked low-rank pairs ``A: [N, r, d]`` and ``B: [N, k, r]``."""

    def __init__(self, n_members: int, in_dim: int, out_dim: int, rank: int, dtype=np.float32):
        if rank < 1 or 2 * rank > min(in_dim, out_dim):
            raise ConfigError(f"rank {rank} must satisfy 1 <= r <= min(d, k)/2 = {min(in_dim, out_dim) // 2}")
        self.rank = rank
        self.A = Tensor(np.zeros((n_members, rank, in_dim), dtype=dtype), requires_grad=True)
        self.B = Tensor(np.zeros((n_members, out_dim, rank), dtype=dtype), requires_grad=True)

    @property
    def n_members(self) -> int:
        return self.A.shape[0]

    def params(self) -> dict[str, Tensor]:
        return {"A": self.A, "B": self.B}


def lora_init(adapter: LoraAdapter, init: InitSpec, seed: int | None = None,
              rngs: list[np.random.Generator] | None = None) -> LoraAdapter:
    """Zero every ``B_i`` and draw ``A_i`` from member ``i``'s stream."""
    if not isinstance(init, InitSpec):
        raise ConfigError(f"unknown init spec {init!r}")
    n, r, d = adapter.A.shape
    if rngs is None:
        if seed is None:
            raise ConfigError("lora_init needs a seed or explicit member streams")
        rngs = [member_rng(seed, i) for i in range(n)]
    for i in range(n):
        adapter.A.data[i] = init.draw(rngs[i], (r, d))
    adapter.B.data[...] = 0.0
    return adapter


def _stack_rows(x: Tensor, n: int) -> tuple[Tensor, tuple[int, ...]]:
    if x.shape[0] != n:
        raise ConfigError(f"activation has {x.shape[0]} members, adapter has {n}")
    return reshape(x, (n, -1, x.shape[-1])), x.shape


def lora_delta(x: Tensor, A: Tensor, B: Tensor) -> Tensor:
    """``B_i (A_i x)`` as two rank-r products."""
    if A.ndim == 2:
        return matmul(matmul(x, transpose(A)), transpose(B))
    x3, shape = _stack_rows(x, A.shape[0])
    low = matmul(matmul(x3, transpose(A)), transpose(B))
    return reshape(low, shape[:-1] + (B.shape[-2],))


def lora_forward(x: Tensor, W0: Tensor, A: Tensor, B: Tensor) -> Tensor:
    """``h_i = W0 x + B_i A_i x`` without materialising ``B_i A_i``."""
    return add(matmul(x, transpose(W0)), lora_delta(x, A, B))


def merge_lora_weights(W0, A, B) -> np.ndarray:
    """Dense ``W0 + B A`` (or ``[N, k, d]`` for member-stacked factors)."""
    W0 = W0.data if isinstance(W0, Tensor) else np.asarray(W0)
    A = A.data if isinstance(A, Tensor) else np.asarray(A)
    B = B.data if isinstance(B, Tensor) else np.asarray(B)
    return W0 + B @ A


# ---------------------------------------------------------------------------
# Batch-Ensemble and the additive variant


class BatchAdapter:
    """Per-member vectors ``r_i: [d]`` and ``s_i: [k]`` over a shared trainable matrix.

    ``multiplicative`` gives ``W_i = W * s_i r_i^T``; ``additive`` gives
    ``W_i = W + s_i r_i^T``.
    """

    def __init__(self, n_members: int, in_dim: int, out_dim: int, mode: str = "multiplicative",
                 dtype=np.float32):
        if mode not in ("multiplicative", "additive"):
            raise ConfigError(f"unknown batch-ensemble mode {mode!r}")
        self.mode = mode
        self.r = Tensor(np.zeros((n_members, in_dim), dtype=dtype), requires_grad=True)
        self.s = Tensor(np.zeros((n_members, out_dim), dtype=dtype), requires_grad=True)

    @property
    def n_members(self) -> int:
        return self.r.shape[0]

    def params(self) -> dict[str, Tensor]:
        return {"r": self.r, "s": self.s}


BATCH_INIT_STD = float(np.sqrt(0.02))


def batch_init(adapter: BatchAdapter, rngs: list[np.random.Generator], std: float = BATCH_INIT_STD) -> BatchAdapter:
    """Gaussian around 1 (multiplicative) or 0 (additive) with variance ``std**2``."""
    centre = 1.0 if adapter.mode == "multiplicative" else 0.0
    for i, rng in enumerate(rngs):
        adapter.r.data[i] = centre + std * rng.standard_normal(adapter.r.shape[1])
        adapter.s.data[i] = centre + std * rng.standard_normal(adapter.s.shape[1])
    return adapter


def batch_forward(x: Tensor, W: Tensor, r: Tensor, s: Tensor, mode: str) -> Tensor:
    """Member forward for Batch-Ensemble without forming the member matrix."""
    if r.ndim == 1:
        x3, shape, n = reshape(x, (1,) + x.shape), x.shape, 1
        r, s = reshape(r, (1, -1)), reshape(s, (1, -1))
    else:
        n = r.shape[0]
        x3, shape = _stack_rows(x, n)
    if mode == "multiplicative":
        h = matmul(mul(x3, reshape(r, (n, 1, -1))), transpose(W))
        h = mul(h, reshape(s, (n, 1, -1)))
    elif mode == "additive":
        proj = matmul(x3, reshape(r, (n, -1, 1)))
        h = add(matmul(x3, transpose(W)), matmul(proj, reshape(s, (n, 1, -1))))
    else:
        raise ConfigError(f"unknown batch-ensemble mode {mode!r}")
    return reshape(h, shape[:-1] + (W.shape[0],))


def batch_member_weight(W, r, s, mode: str) -> np.ndarray:
    """Explicit per-member matrix, for verification."""
    W = W.data if isinstance(W, Tensor) else np.asarray(W)
    r = r.data if isinstance(r, Tensor) else np.asarray(r)
    s = s.data if isinstance(s, Tensor) else np.asarray(s)
    outer = np.outer(s, r)
    return W * outer if mode == "multiplicative" else W + outer


# ---------------------------------------------------------------------------
# classification heads


def head_forward(features: Tensor, W: Tensor, b: Tensor) -> Tensor:
    """Member heads: features ``[N, B, d]`` with ``W: [N, C, d]``, ``b: [N, C]``."""
    n = W.shape[0]
    return add(matmul(features, transpose(W)), reshape(b, (n, 1, -1)))


def last_layer_forward(features: Tensor, W: Tensor, b: Tensor) -> Tensor:
    """Every head applied to the same shared features ``[B, d]`` -> ``[N, B, C]``."""
    return head_forward(expand(features, W.shape[0]), W, b)


def last_layer_init(W: Tensor, b: Tensor, seed: int = 0, std: float = 0.01) -> None:
    """Head ``i`` drawn from Normal(0, std^2) under seed ``seed + 42 + i``; bias zero."""
    for i in range(W.shape[0]):
        rng = np.random.Generator(np.random.Philox(seed + 42 + i))
        W.data[i] = std * rng.standard_normal(W.shape[1:])
    b.data[...] = 0.0


# ---------------------------------------------------------------------------
# EpiNet


@dataclass
class EpinetState:
    """Base head plus, per member, a learnable MLP and a frozen prior MLP.

    Each MLP maps ``concat(features, z)`` through two ReLU layers of
    ``hidden`` units to a ``[D_z, C]`` matrix which is contracted with ``z``.
    """

    feature_dim: int
    num_classes: int
    n_members: int
    epistemic_dim: int = 10
    hidden: int = 256
    prior_scale: float = 1.0
    seed: int = 0
    dtype: type = np.float32
    learnable: list = field(init=False)
    prior: list = field(init=False)
    head_W: Tensor = field(init=False)
    head_b: Tensor = field(init=False)

    def __post_init__(self):
        dims = [self.feature_dim + self.epistemic_dim, self.hidden, self.hidden,
                self.epistemic_dim * self.num_classes]
        rng = np.random.Generator(np.random.Philox(member_seed(self.seed, 0xE9)))
        self.head_W = Tensor((0.01 * rng.standard_normal((self.num_classes, self.feature_dim))).astype(self.dtype),
                             requires_grad=True)
        self.head_b = Tensor(np.zeros(self.num_classes, dtype=self.dtype), requires_grad=True)
        self.learnable, self.prior = [], []
        for i in range(self.n_members):
            lrng = member_rng(self.seed, i)
            prng = np.random.Generator(np.random.Philox(self.seed + 42 + i * 1000))
            layers, priors = [], []
            for fan_in, fan_out in zip(dims[:-1], dims[1:]):
                layers.append((
                    Tensor((0.01 * lrng.standard_normal((fan_in, fan_out))).astype(self.dtype), requires_grad=True),
                    Tensor(np.zeros(fan_out, dtype=self.dtype), requires_grad=True),
                ))
                bound = 1.0 / np.sqrt(fan_in)
                priors.append((
                    Tensor(prng.uniform(-bound, bound, (fan_in, fan_out)).astype(self.dtype)),
                    Tensor(prng.uniform(-bound, bound, fan_out).astype(self.dtype)),
                ))
            self.learnable.append(layers)
            self.prior.append(priors)

    def params(self) -> dict[str, Tensor]:
        out = {"head/W": self.head_W, "head/b": self.head_b}
        for i, layers in enumerate(self.learnable):
            for j, (W, b) in enumerate(layers):
                out[f"member{i}/epinet/fc{j}/W"] = W
                out[f"member{i}/epinet/fc{j}/b"] = b
        return out

    def buffers(self) -> dict[str, Tensor]:
        out = {}
        for i, layers in enumerate(self.prior):
            for j, (W, b) in enumerate(layers):
                out[f"member{i}/prior/fc{j}/W"] = W
                out[f"member{i}/prior/fc{j}/b"] = b
        return out


def _mlp_contract(layers, inp: Tensor, z: Tensor, dz: int, c: int) -> Tensor:
    h = inp
    for j, (W, b) in enumerate(layers):
        h = add(matmul(h, W), b)
        if j < len(layers) - 1:
            h = relu(h)
    M = reshape(h, (h.shape[0], dz, c))
    out = matmul(transpose(M), reshape(z, (z.shape[0], dz, 1)))
    return reshape(out, (z.shape[0], c))


def epinet_term(state: EpinetState, features: Tensor, z: Tensor, member: int) -> Tensor:
    """``sigma_L + alpha * sigma_P`` on stop-gradient features, shape ``[B, C]``."""
    if z.ndim == 1:
        z = expand(z, features.shape[0])
    if not z.is_finite():
        raise ValueError("epistemic index must be finite")
    inp = concat([stop_gradient(features), z], axis=-1)
    dz, c = state.epistemic_dim, state.num_classes
    term = _mlp_contract(state.learnable[member], inp, z, dz, c)
    if state.prior_scale != 0.0:
        prior = _mlp_contract(state.prior[member], inp, z, dz, c)
        term = add(term, prior * state.prior_scale)
    return term


def epinet_forward(state: EpinetState, features: Tensor, z: Tensor, member: int) -> Tensor:
    """Base logits plus the member's epinet term."""
    base = add(matmul(features, transpose(state.head_W)), state.head_b)
    return add(base, epinet_term(state, features, z, member))


# ---------------------------------------------------------------------------
# Snapshot ensembles


@dataclass(frozen=True)
class SnapshotPlan:
    total_epochs: int
    burn_in: int
    members: int
    cycle_length: int
    snapshot_epochs: tuple[int, ...]


def plan_snapshots(total_epochs: int, burn_in: int, members: int) -> SnapshotPlan:
    """Extend the burn-in until the remaining epochs split evenly into ``members`` cycles.

    Snapshots are taken at the end of burn-in and at the end of every cycle.
    """
    if members < 1 or burn_in < 0 or burn_in >= total_epochs:
        raise ConfigError(f"need 0 <= burn_in < total_epochs and members >= 1, got "
                          f"({total_epochs}, {burn_in}, {members})")
    b = burn_in
    while b < total_epochs and (total_epochs - b) % members:
        b += 1
    if b >= total_epochs:
        raise ConfigError(f"no burn-in >= {burn_in} leaves a multiple of {members} of {total_epochs} epochs")
    cycle = (total_epochs - b) // members
    return SnapshotPlan(total_epochs, b, members, cycle, tuple(b + k * cycle for k in range(members + 1)))


def select_members(t: Tensor, members) -> Tensor:
    return t if members is None else take(t, np.asarray(members), axis=0)
