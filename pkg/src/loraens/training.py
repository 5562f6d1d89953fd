"""Optimizers, learning-rate schedules, clipping, losses and the epoch loop."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import adapters as ad
from .backbone import ModelConfig
from .data import Dataset
from .ensemble import ExplicitEnsemble, SnapshotEnsemble, build_model
from .tensor import NumericError, Tape, Tensor, backward, log_softmax, pick, tensor_sum

log = logging.getLogger(__name__)

SCHEDULES = ("warmup_cosine", "warmup_exponential", "constant")
OPTIMIZERS = ("adamw", "sgd")


class DivergenceError(RuntimeError):
    """Non-finite loss or gradient during training."""

    def __init__(self, message: str, step: int):
        super().__init__(f"{message} at step {step}")
        self.step = step


# ---------------------------------------------------------------------------
# optimizers


@dataclass
class OptimizerState:
    kind: str = "adamw"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    momentum: float = 0.9
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in OPTIMIZERS:
            raise ValueError(f"unknown optimizer {self.kind!r}")


def _check_grads(params: Mapping[str, Tensor], grads: Mapping[str, np.ndarray], lr: float) -> None:
    if lr < 0:
        raise ValueError(f"learning rate must be >= 0, got {lr}")
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if g.shape != p.shape:
            raise ValueError(f"{name}: gradient shape {g.shape} != parameter shape {p.shape}")
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for {name}; step aborted")


def adamw_step(params: Mapping[str, Tensor], grads: Mapping[str, np.ndarray], state: OptimizerState,
               lr: float) -> Mapping[str, Tensor]:
    """One AdamW update in place; parameters without a gradient are skipped.

    Weight decay is decoupled: ``p <- p - lr * m_hat / (sqrt(v_hat) + eps) - lr * wd * p``.
    """
    _check_grads(params, grads, lr)
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1**t
    c2 = 1.0 - state.beta2**t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        m = state.m.setdefault(name, np.zeros_like(p.data))
        v = state.v.setdefault(name, np.zeros_like(p.data))
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        update = lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        decay = lr * state.weight_decay * p.data
        p.data -= (update + decay).astype(p.data.dtype, copy=False)
    return params


def sgd_step(params: Mapping[str, Tensor], grads: Mapping[str, np.ndarray], state: OptimizerState,
             lr: float) -> Mapping[str, Tensor]:
    """Heavy-ball SGD with coupled L2 weight decay."""
    _check_grads(params, grads, lr)
    state.step += 1
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if state.weight_decay:
            g = g + state.weight_decay * p.data
        buf = state.m.get(name)
        if buf is None:
            buf = state.m[name] = np.array(g, dtype=p.data.dtype)
        else:
            buf *= state.momentum
            buf += g
        p.data -= (lr * buf).astype(p.data.dtype, copy=False)
    return params


def optimizer_step(params, grads, state: OptimizerState, lr: float):
    return (adamw_step if state.kind == "adamw" else sgd_step)(params, grads, state, lr)


# ---------------------------------------------------------------------------
# schedules


@dataclass(frozen=True)
class SchedulePlan:
    base_lr: float
    warmup_steps: int
    total_steps: int
    shape: str = "warmup_cosine"
    factor: float = 0.94
    every_epochs: int = 4
    steps_per_epoch: int = 1

    def __post_init__(self):
        if self.shape not in SCHEDULES:
            raise ValueError(f"unknown schedule {self.shape!r}")
        if self.warmup_steps < 0 or self.total_steps < 0 or self.steps_per_epoch < 1:
            raise ValueError("schedule step counts must be non-negative")


def lr_at(step: int, plan: SchedulePlan) -> float:
    if not 0 <= step <= plan.total_steps:
        raise ValueError(f"step {step} outside [0, {plan.total_steps}]")
    w = plan.warmup_steps
    if step < w:
        return plan.base_lr * step / w
    if plan.shape == "constant":
        return plan.base_lr
    if plan.shape == "warmup_exponential":
        epoch = step // plan.steps_per_epoch
        return plan.base_lr * plan.factor ** (epoch // plan.every_epochs)
    span = plan.total_steps - w
    if span <= 0:
        return plan.base_lr
    return plan.base_lr * 0.5 * (1.0 + math.cos(math.pi * (step - w) / span))


def snapshot_lr(step: int, base_lr: float, warmup_steps: int, burn_steps: int, cycle_steps: int) -> float:
    """Warmup-cosine to zero over the burn-in, then cosine cycles restarting at ``base_lr``.

    Every cycle ends exactly at zero, which is where snapshots are taken.
    """
    if step <= burn_steps:
        if burn_steps == 0:
            return 0.0
        return lr_at(step, SchedulePlan(base_lr, min(warmup_steps, burn_steps - 1), burn_steps))
    u = (step - burn_steps - 1) % cycle_steps + 1
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * u / cycle_steps))


# ---------------------------------------------------------------------------
# clipping and losses


def global_norm(grads) -> float:
    values = grads.values() if isinstance(grads, Mapping) else grads
    total = 0.0
    for g in values:
        if g is None:
            continue
        g = np.asarray(g, dtype=np.float64)
        total += float(np.dot(g.ravel(), g.ravel()))
    return math.sqrt(total)


def clip_gradients(grads, max_norm: float = 1.0):
    """Scale all gradients by ``max_norm / norm`` when their joint L2 norm exceeds ``max_norm``.

    Accepts a mapping or a sequence and returns the same container kind,
    together with the pre-clip norm.
    """
    norm = global_norm(grads)
    if not math.isfinite(norm):
        raise NumericError("non-finite gradient norm")
    scale = max_norm / norm if norm > max_norm else 1.0

    def f(g):
        return None if g is None else (g * scale).astype(np.asarray(g).dtype, copy=False)

    if isinstance(grads, Mapping):
        return {k: f(g) for k, g in grads.items()}, norm
    return [f(g) for g in grads], norm


def class_weights(class_counts: Sequence[int], beta: float) -> np.ndarray:
    """Effective-number weights ``(1 - beta) / (1 - beta**n_c)`` normalised to mean 1."""
    counts = np.asarray(class_counts, dtype=np.float64)
    if np.any(counts < 1):
        raise ValueError("class counts must be >= 1")
    if not 0.0 <= beta < 1.0:
        raise ValueError(f"beta must be in [0, 1), got {beta}")
    if beta == 0.0:
        return np.ones_like(counts)
    w = (1.0 - beta) / (1.0 - np.power(beta, counts))
    return w / w.mean()


def weighted_ce_loss(logits: Tensor, labels: np.ndarray, class_counts=None, beta: float = 0.0) -> Tensor:
    """Class-weighted cross-entropy, averaged over members for ``[N, B, C]`` logits.

    Per member: ``-sum_i w_{y_i} log p_{y_i} / sum_i w_{y_i}``.  Without counts
    (or with ``beta = 0``) this is the plain mean negative log-likelihood.
    """
    labels = np.asarray(labels, dtype=np.int64)
    C = logits.shape[-1]
    if labels.size and (labels.min() < 0 or labels.max() >= C):
        raise IndexError(f"label out of range for {C} classes")
    if class_counts is None:
        w = np.ones(C)
    else:
        if len(class_counts) != C:
            raise ValueError(f"{len(class_counts)} class counts for {C} classes")
        w = class_weights(class_counts, beta)
    lp = pick(log_softmax(logits), np.broadcast_to(labels, logits.shape[:-1]))
    wy = w[labels]
    n = int(np.prod(logits.shape[:-2])) if logits.ndim > 2 else 1
    if np.all(wy == 1.0):
        return tensor_sum(lp) * (-1.0 / (n * len(labels)))
    weighted = lp * Tensor(wy.astype(lp.dtype))
    return tensor_sum(weighted) * (-1.0 / (n * float(wy.sum())))


# ---------------------------------------------------------------------------
# training loop


@dataclass
class TrainConfig:
    epochs: int = 60
    batch_size: int = 32
    base_lr: float = 1e-3
    warmup_steps: int = 100
    schedule: str = "warmup_cosine"
    decay_factor: float = 0.94
    decay_every: int = 4
    optimizer: str = "adamw"
    weight_decay: float = 0.01
    momentum: float = 0.9
    clip_norm: float = 1.0
    class_beta: float = 0.0
    snapshot_burn_in: int | None = None

    def validate(self) -> "TrainConfig":
        if self.epochs < 0 or self.batch_size < 1 or self.warmup_steps < 0:
            raise ad.ConfigError("epochs and warmup_steps must be >= 0, batch_size >= 1")
        if self.base_lr < 0 or self.clip_norm <= 0:
            raise ad.ConfigError("base_lr must be >= 0 and clip_norm > 0")
        if self.schedule not in SCHEDULES:
            raise ad.ConfigError(f"unknown schedule {self.schedule!r}; expected one of {SCHEDULES}")
        if self.optimizer not in OPTIMIZERS:
            raise ad.ConfigError(f"unknown optimizer {self.optimizer!r}; expected one of {OPTIMIZERS}")
        if not 0.0 <= self.class_beta < 1.0:
            raise ad.ConfigError("class_beta must be in [0, 1)")
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ad.ConfigError(f"unknown training keys: {sorted(unknown)}")
        return cls(**d).validate()


@dataclass
class TrainResult:
    model: object
    history: list[dict]
    steps: int


def _data_rng(seed: int, stream: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, 0xDA7A, stream])))


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for lo in range(0, n, batch_size):
        yield order[lo:lo + batch_size]


def _grads(params: Mapping[str, Tensor]) -> dict[str, np.ndarray]:
    return {k: p.grad for k, p in params.items() if p.grad is not None}


class _Trainer:
    """Runs optimisation of one parameter group over a fixed data order."""

    def __init__(self, forward, params, tcfg: TrainConfig, counts, lr_fn, member):
        self.forward = forward
        self.params = params
        self.tcfg = tcfg
        self.counts = counts
        self.lr_fn = lr_fn
        self.member = member
        self.opt = OptimizerState(kind=tcfg.optimizer, weight_decay=tcfg.weight_decay, momentum=tcfg.momentum)

    def epoch(self, ds: Dataset, epoch: int, data_rng, noise_rng) -> dict:
        losses, correct, seen = [], 0, 0
        lr = 0.0
        for idx in _batches(len(ds), self.tcfg.batch_size, data_rng):
            x, y = ds.images[idx], ds.labels[idx]
            step = self.opt.step + 1
            try:
                with Tape() as tape:
                    logits = self.forward(x, noise_rng)
                    loss = weighted_ce_loss(logits, y, self.counts, self.tcfg.class_beta)
                if not math.isfinite(float(loss.data)):
                    raise DivergenceError("non-finite loss", step)
                for p in self.params.values():
                    p.grad = None
                backward(loss, tape)
                grads, _ = clip_gradients(_grads(self.params), self.tcfg.clip_norm)
                lr = self.lr_fn(step)
                optimizer_step(self.params, grads, self.opt, lr)
            except NumericError as exc:
                raise DivergenceError(str(exc), step) from exc
            losses.append(float(loss.data) * len(idx))
            correct += int((logits.data.argmax(-1) == y).sum())
            seen += logits.data.shape[0] * len(idx) if logits.ndim == 3 else len(idx)
        return {"epoch": epoch, "member": self.member, "loss": sum(losses) / len(ds),
                "acc": correct / max(seen, 1), "lr": lr}


def train_run(model_config: ModelConfig, train_config: TrainConfig, dataset: Dataset, seed: int = 0,
              model=None, history_path=None) -> TrainResult:
    """Train every member of ``model_config`` on ``dataset`` and return the model and history.

    Members of shared-trunk methods see identical batches and their losses are
    averaged; explicit members are trained one after another, each with its own
    data order.  Snapshot training follows :func:`plan_snapshots` with a
    cyclic cosine schedule.  Deterministic for a fixed seed.
    """
    c = model_config.validate()
    t = train_config.validate()
    if dataset.num_classes != c.num_classes:
        raise ad.ConfigError(f"dataset has {dataset.num_classes} classes, model expects {c.num_classes}")
    if model is None:
        model = build_model(c, seed)
    counts = np.bincount(dataset.labels, minlength=c.num_classes) if t.class_beta > 0 else None
    if counts is not None:
        counts = np.maximum(counts, 1)
    steps_per_epoch = math.ceil(len(dataset) / t.batch_size)
    total = t.epochs * steps_per_epoch
    history: list[dict] = []
    if t.epochs == 0 or len(dataset) == 0:
        _write_history(history_path, history)
        return TrainResult(model, history, 0)

    # warmup is capped so the cosine tail keeps at least one step and ends at zero
    plan = SchedulePlan(t.base_lr, min(t.warmup_steps, total - 1), total, t.schedule,
                        t.decay_factor, t.decay_every, steps_per_epoch)

    def sched(step):
        return lr_at(min(step, total), plan)

    noise_rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, 0xD20])))

    if isinstance(model, ExplicitEnsemble):
        for i, net in enumerate(model.members):
            trainer = _Trainer(lambda x, r, net=net: net.forward(x, rng=r), net.parameters(), t, counts, sched, i)
            data_rng = _data_rng(seed, i)
            for e in range(t.epochs):
                history.append(trainer.epoch(dataset, e, data_rng, noise_rng))
                log.info("member %d epoch %d loss %.4f acc %.3f", i, e, history[-1]["loss"], history[-1]["acc"])
        steps = total * len(model.members)
    elif isinstance(model, SnapshotEnsemble):
        burn = t.snapshot_burn_in if t.snapshot_burn_in is not None else t.epochs // 2
        splan = ad.plan_snapshots(t.epochs, burn, c.ensemble_size)
        burn_steps = splan.burn_in * steps_per_epoch
        cycle_steps = splan.cycle_length * steps_per_epoch

        def cyc(step):
            return snapshot_lr(min(step, total), t.base_lr, t.warmup_steps, burn_steps, cycle_steps)

        net = model.net
        trainer = _Trainer(lambda x, r: net.forward(x, rng=r), net.parameters(), t, counts, cyc, None)
        data_rng = _data_rng(seed, 0)
        model.snapshots = []
        for e in range(t.epochs):
            history.append(trainer.epoch(dataset, e, data_rng, noise_rng))
            if e + 1 in splan.snapshot_epochs[1:]:
                model.take_snapshot()
        steps = total
    else:
        trainer = _Trainer(lambda x, r: model.forward(x, rng=r), model.parameters(), t, counts, sched, None)
        data_rng = _data_rng(seed, 0)
        for e in range(t.epochs):
            history.append(trainer.epoch(dataset, e, data_rng, noise_rng))
            log.info("epoch %d loss %.4f acc %.3f lr %.2e", e, history[-1]["loss"], history[-1]["acc"], history[-1]["lr"])
        steps = total
    _write_history(history_path, history)
    return TrainResult(model, history, steps)


def _write_history(path, history: list[dict]) -> None:
    if path is None:
        return
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text("".join(json.dumps(h, sort_keys=False) + "\n" for h in history))
    tmp.replace(path)


def read_history(path) -> list[dict]:
    return [json.loads(line) for line in Path(path).read_text().splitlines() if line.strip()]
