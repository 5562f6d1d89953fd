"""Model construction for every method, ensemble wrappers and batched prediction."""

from __future__ import annotations

import copy
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from . import adapters as ad
from .backbone import ROLES, ModelConfig, ViT
from .tensor import Tensor, concat, no_grad, reshape, softmax


class ExplicitEnsemble:
    """``N`` independent single networks sharing the initial backbone weights.

    Members differ only in head initialisation (member streams) and, during
    training, in data order.
    """

    def __init__(self, config: ModelConfig, seed: int = 0, dtype=np.float32):
        self.config = config
        self.seed = seed
        single = config.replace(method="single", ensemble_size=1)
        self.members: list[ViT] = []
        for i in range(config.ensemble_size):
            net = ViT(single, seed=seed, dtype=dtype)
            rng = ad.member_rng(seed, i)
            bound = 1.0 / np.sqrt(config.embed_dim)
            net.head_W.data[0] = rng.uniform(-bound, bound, net.head_W.shape[1:])
            net.head_b.data[0] = rng.uniform(-bound, bound, net.head_b.shape[1:])
            self.members.append(net)

    @property
    def n_members(self) -> int:
        return len(self.members)

    def forward(self, images, members=None, rng=None, z=None, p_drop=None) -> Tensor:
        sel = range(self.n_members) if members is None else members
        outs = [self.members[i].forward(images, rng=rng) for i in sel]
        return concat(outs, axis=0) if len(outs) > 1 else outs[0]

    __call__ = forward

    def parameters(self) -> dict[str, Tensor]:
        return {f"member{i}/{k}": t for i, m in enumerate(self.members) for k, t in m.parameters().items()}

    def state_dict(self) -> dict[str, np.ndarray]:
        return {f"member{i}/{_strip(k)}": v for i, m in enumerate(self.members) for k, v in m.state_dict().items()}

    def load_state_dict(self, state, strict: bool = True) -> None:
        for i, m in enumerate(self.members):
            prefix = f"member{i}/"
            sub = {_unstrip(k[len(prefix):]): v for k, v in state.items() if k.startswith(prefix)}
            m.load_state_dict(sub, strict=strict)

    def zero_grad(self) -> None:
        for m in self.members:
            m.zero_grad()


class SnapshotEnsemble:
    """Frozen copies of one network's state, one per snapshot."""

    def __init__(self, config: ModelConfig, seed: int = 0, dtype=np.float32):
        self.config = config
        self.seed = seed
        self.net = ViT(config.replace(method="single", ensemble_size=1), seed=seed, dtype=dtype)
        self.snapshots: list[dict[str, np.ndarray]] = []

    @property
    def n_members(self) -> int:
        return len(self.snapshots) if self.snapshots else self.config.ensemble_size

    def take_snapshot(self) -> None:
        self.snapshots.append(copy.deepcopy(self.net.state_dict()))

    def forward(self, images, members=None, rng=None, z=None, p_drop=None) -> Tensor:
        if not self.snapshots:
            return self.net.forward(images, rng=rng)
        live = self.net.state_dict()
        sel = range(len(self.snapshots)) if members is None else members
        outs = []
        try:
            for i in sel:
                self.net.load_state_dict(self.snapshots[i])
                with no_grad():
                    outs.append(self.net.forward(images))
        finally:
            self.net.load_state_dict(live)
        return concat(outs, axis=0) if len(outs) > 1 else outs[0]

    __call__ = forward

    def parameters(self) -> dict[str, Tensor]:
        return self.net.parameters()

    def state_dict(self) -> dict[str, np.ndarray]:
        if not self.snapshots:
            return {f"member0/{_strip(k)}": v for k, v in self.net.state_dict().items()}
        return {f"member{i}/{_strip(k)}": v for i, s in enumerate(self.snapshots) for k, v in s.items()}

    def load_state_dict(self, state, strict: bool = True) -> None:
        n = len({k.split("/", 1)[0] for k in state if k.startswith("member")})
        self.snapshots = []
        for i in range(n):
            prefix = f"member{i}/"
            self.snapshots.append({_unstrip(k[len(prefix):]): v for k, v in state.items() if k.startswith(prefix)})
        if self.snapshots:
            self.net.load_state_dict(self.snapshots[-1], strict=strict)

    def zero_grad(self) -> None:
        self.net.zero_grad()


def _strip(name: str) -> str:
    return name[len("member0/"):] if name.startswith("member0/") else name


def _unstrip(name: str) -> str:
    return name if name.startswith("backbone/") else "member0/" + name


def build_model(config: ModelConfig, seed: int = 0, dtype=np.float32):
    if config.method == "explicit":
        return ExplicitEnsemble(config, seed, dtype)
    if config.method == "snapshot":
        return SnapshotEnsemble(config, seed, dtype)
    return ViT(config, seed, dtype)


def predict_logits(model, images: np.ndarray, batch_size: int = 250, seed: int = 0, jobs: int = 1) -> np.ndarray:
    """Member logits ``[N, S, C]`` for a whole dataset, without building a graph.

    MC Dropout draws ``ensemble_size`` stochastic passes; EpiNet draws one
    epistemic index per member and sample.  Both are seeded by ``seed``.
    Explicit members are evaluated on up to ``jobs`` threads.
    """
    config = model.config
    if isinstance(model, ExplicitEnsemble):
        def one(net):
            return predict_logits(net, images, batch_size, seed)

        if jobs > 1:
            with ThreadPoolExecutor(max_workers=jobs) as pool:
                parts = list(pool.map(one, model.members))
        else:
            parts = [one(net) for net in model.members]
        return np.concatenate(parts, axis=0)
    out = []
    with no_grad():
        if config.method == "mc_dropout":
            p = config.dropout_rate if config.dropout_rate > 0 else 0.2
            return mc_dropout_predict(model, images, config.ensemble_size, p, seed, batch_size, logits=True)
        rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, 0xE91])))
        for lo in range(0, len(images), batch_size):
            chunk = images[lo:lo + batch_size]
            z = None
            if config.method == "epinet":
                z = rng.standard_normal((config.ensemble_size, len(chunk), config.epistemic_dim))
            out.append(model.forward(chunk, z=z).data)
    return np.concatenate(out, axis=1)


def mc_dropout_predict(model: ViT, images: np.ndarray, samples: int, rate: float, seed: int,
                       batch_size: int = 250, logits: bool = False) -> np.ndarray:
    """``samples`` stochastic passes with dropout left on; ``[S, n, C]`` probabilities.

    Sample ``s`` uses the member stream ``(seed, s)``, so the set is
    reproducible for a fixed seed.
    """
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    sets = []
    with no_grad():
        for s in range(samples):
            rng = ad.member_rng(seed, s)
            parts = []
            for lo in range(0, len(images), batch_size):
                y = model.forward(images[lo:lo + batch_size], rng=rng, p_drop=rate)
                y = reshape(y, y.shape[1:])
                parts.append(y.data if logits else softmax(y).data)
            sets.append(np.concatenate(parts, axis=0))
    return np.stack(sets)


def member_attention_weights(model, role: str = "value") -> tuple[list[np.ndarray], list[list[np.ndarray]]]:
    """Initial weights per layer and final weights per member per layer for ``role``.

    For LoRA the final weight is ``W0 + B_i A_i``; for Batch-Ensemble it is the
    member's effective matrix; for explicit and snapshot members it is the
    trained matrix and the initial weights are rebuilt from the config seed.
    """
    if role not in ROLES:
        raise ValueError(role)
    c = model.config
    if isinstance(model, (ExplicitEnsemble, SnapshotEnsemble)):
        fresh = ViT(c.replace(method="single", ensemble_size=1), seed=model.seed)
        init = [blk["slots"][role].weight.data.astype(np.float64) for blk in fresh.blocks]
        key = "backbone/block{l}/" + role + "/W"
        finals = []
        st = model.state_dict()
        for i in range(model.n_members):
            finals.append([st[f"member{i}/" + key.format(l=l)].astype(np.float64) for l in range(c.depth)])
        return init, finals
    fresh = ViT(c, seed=model.seed)
    init = [blk["slots"][role].weight.data.astype(np.float64) for blk in fresh.blocks]
    finals = [[] for _ in range(model.n_members)]
    for blk in model.blocks:
        slot = blk["slots"][role]
        W0 = slot.weight.data.astype(np.float64)
        for i in range(model.n_members):
            a = slot.adapter
            if isinstance(a, ad.LoraAdapter):
                finals[i].append(ad.merge_lora_weights(W0, a.A.data[i].astype(np.float64),
                                                       a.B.data[i].astype(np.float64)))
            elif isinstance(a, ad.BatchAdapter):
                finals[i].append(ad.batch_member_weight(W0, a.r.data[i], a.s.data[i], a.mode))
            else:
                finals[i].append(W0)
    return init, finals


def member_updates(model, role: str = "value") -> list[list[np.ndarray]]:
    """Per member, per layer weight updates: ``B_i A_i`` for LoRA, else final minus initial."""
    if isinstance(model, ViT) and model.config.method == "lora":
        out = []
        for i in range(model.n_members):
            out.append([blk["slots"][role].adapter.B.data[i].astype(np.float64)
                        @ blk["slots"][role].adapter.A.data[i].astype(np.float64) for blk in model.blocks])
        return out
    init, finals = member_attention_weights(model, role)
    return [[f - w for f, w in zip(member, init)] for member in finals]
