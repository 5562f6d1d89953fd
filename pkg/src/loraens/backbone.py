"""Micro vision transformer with pluggable attention projections.

Activations inside the transformer blocks are laid out ``[n, B*T, d]`` where
``n`` is the number of ensemble members being evaluated (1 for methods whose
backbone is shared by all members).  Each member slice is computed by its own
BLAS call, so members with identical inputs and identical adapters produce
bitwise-identical outputs.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields, replace

import numpy as np

from . import adapters as ad
from .adapters import ConfigError, InitSpec
from .tensor import (
    Tensor,
    add,
    concat,
    dropout,
    expand,
    gelu,
    layer_norm,
    matmul,
    reshape,
    scale,
    softmax,
    take,
    transpose,
)

METHODS = ("single", "lora", "explicit", "batch", "batch_pp", "mc_dropout", "snapshot", "last_layer", "epinet")
ROLES = ("query", "key", "value", "output")

# Methods whose members need their own activations from the first block on.
_PER_MEMBER_BACKBONE = ("lora", "batch", "batch_pp")
_FROZEN_BY_DEFAULT = ("lora", "batch", "batch_pp", "last_layer")


@dataclass
class ModelConfig:
    image_size: int = 16
    patch_size: int = 4
    channels: int = 1
    embed_dim: int = 64
    depth: int = 2
    num_heads: int = 4
    mlp_ratio: float = 4.0
    num_classes: int = 5
    ensemble_size: int = 1
    method: str = "single"
    rank: int = 4
    init: str = "xavier_uniform"
    init_scale: float = 10.0
    dropout_rate: float = 0.0
    backbone_trainable: bool | None = None
    epistemic_dim: int = 10
    epinet_hidden: int = 256
    prior_scale: float = 1.0
    ln_eps: float = 1e-6

    def __post_init__(self):
        self.validate()

    def validate(self) -> "ModelConfig":
        if self.method not in METHODS:
            raise ConfigError(f"unknown method {self.method!r}; expected one of {METHODS}")
        for name in ("image_size", "patch_size", "channels", "embed_dim", "depth", "num_heads",
                     "num_classes", "ensemble_size", "rank", "epistemic_dim", "epinet_hidden"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be a positive integer")
        if self.image_size % self.patch_size:
            raise ConfigError(f"image_size {self.image_size} not divisible by patch_size {self.patch_size}")
        if self.embed_dim % self.num_heads:
            raise ConfigError(f"num_heads {self.num_heads} must divide embed_dim {self.embed_dim}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError("dropout_rate must be in [0, 1)")
        if self.method == "lora" and 2 * self.rank > self.embed_dim:
            raise ConfigError(f"rank {self.rank} exceeds embed_dim/2 = {self.embed_dim // 2}")
        InitSpec(self.init, self.init_scale)
        return self

    @property
    def trainable_backbone(self) -> bool:
        if self.backbone_trainable is None:
            return self.method not in _FROZEN_BY_DEFAULT
        return bool(self.backbone_trainable)

    @property
    def n_patches(self) -> int:
        return (self.image_size // self.patch_size) ** 2

    @property
    def seq_len(self) -> int:
        return self.n_patches + 1

    @property
    def patch_dim(self) -> int:
        return self.patch_size * self.patch_size * self.channels

    @property
    def mlp_dim(self) -> int:
        return int(round(self.embed_dim * self.mlp_ratio))

    @property
    def n_heads_out(self) -> int:
        """Number of classification heads the network owns."""
        if self.method in ("lora", "batch", "batch_pp", "last_layer"):
            return self.ensemble_size
        return 1

    @property
    def init_spec(self) -> InitSpec:
        return InitSpec(self.init, self.init_scale)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown ModelConfig keys: {sorted(unknown)}")
        return cls(**d)

    def replace(self, **kw) -> "ModelConfig":
        return replace(self, **kw)

    @classmethod
    def vit_base_32(cls, **kw) -> "ModelConfig":
        """ViT-Base/32 geometry at 224px with a 100-class head."""
        base = dict(image_size=224, patch_size=32, channels=3, embed_dim=768, depth=12,
                    num_heads=12, mlp_ratio=4.0, num_classes=100)
        base.update(kw)
        return cls(**base)


# ---------------------------------------------------------------------------
# parameter accounting


def _backbone_counts(c: ModelConfig) -> tuple[int, int, int]:
    """(backbone without head, one head, the four attention matrices of all blocks)."""
    d, h = c.embed_dim, c.mlp_dim
    patch = c.patch_dim * d + d
    tokens = d + c.seq_len * d
    block = 2 * 2 * d + 4 * (d * d + d) + (d * h + h) + (h * d + d)
    backbone = patch + tokens + c.depth * block + 2 * d
    head = d * c.num_classes + c.num_classes
    return backbone, head, c.depth * 4 * d * d


def count_parameters(config: ModelConfig) -> dict:
    """Closed-form totals: ``total``, ``trainable``, ``per_member_overhead``.

    ``total`` counts every stored parameter needed at inference, including
    frozen ones; ``per_member_overhead`` is the growth from adding one member.
    """
    c = config
    n, d, L, r, C = c.ensemble_size, c.embed_dim, c.depth, c.rank, c.num_classes
    bb, head, attn = _backbone_counts(c)
    m = c.method
    if m in ("single", "mc_dropout"):
        total = bb + head
        trainable = total if c.trainable_backbone else head
        per_member = 0
    elif m == "lora":
        per_member = L * 4 * (r * d + d * r) + head
        total = bb + n * per_member
        trainable = n * per_member + (bb if c.trainable_backbone else 0)
    elif m in ("batch", "batch_pp"):
        per_member = L * 4 * (d + d) + head
        total = bb + n * per_member
        trainable = n * per_member + (bb if c.trainable_backbone else attn)
    elif m == "last_layer":
        per_member = head
        total = bb + n * head
        trainable = n * head + (bb if c.trainable_backbone else 0)
    elif m == "explicit":
        per_member = bb + head
        total = n * per_member
        trainable = total if c.trainable_backbone else n * head
    elif m == "snapshot":
        per_member = bb + head
        total = n * per_member
        trainable = per_member if c.trainable_backbone else head
    elif m == "epinet":
        dz, hid = c.epistemic_dim, c.epinet_hidden
        mlp = (d + dz) * hid + hid + hid * hid + hid + hid * dz * C + dz * C
        per_member = 2 * mlp
        total = bb + head + n * per_member
        trainable = (bb + head if c.trainable_backbone else head) + n * mlp
    else:  # pragma: no cover - validated upstream
        raise ConfigError(m)
    return {"total": total, "trainable": trainable, "per_member_overhead": per_member,
            "backbone": bb, "head": head}


# ---------------------------------------------------------------------------
# building blocks


def patchify(images: np.ndarray, patch_size: int) -> np.ndarray:
    """``[B, H, W, ch]`` (or one ``[H, W, ch]`` image) -> ``[B, P, p*p*ch]``.

    Patches are ordered left-to-right, then top-to-bottom; each is flattened
    row-major over (row, col, channel).
    """
    images = np.asarray(images)
    single = images.ndim == 3
    if single:
        images = images[None]
    b, h, w, ch = images.shape
    if h % patch_size or w % patch_size:
        raise ConfigError(f"image {h}x{w} not divisible by patch size {patch_size}")
    gh, gw = h // patch_size, w // patch_size
    x = images.reshape(b, gh, patch_size, gw, patch_size, ch).transpose(0, 1, 3, 2, 4, 5)
    x = x.reshape(b, gh * gw, patch_size * patch_size * ch)
    return x[0] if single else x


class ProjectionSlot:
    """One attention projection: frozen or shared weight ``[k, d]`` plus bias and an optional adapter."""

    def __init__(self, role: str, weight: Tensor, bias: Tensor, adapter=None):
        if role not in ROLES:
            raise ConfigError(f"unknown projection role {role!r}")
        self.role = role
        self.weight = weight
        self.bias = bias
        self.adapter = adapter

    def __call__(self, x: Tensor, members=None) -> Tensor:
        a = self.adapter
        if a is None:
            h = matmul(x, transpose(self.weight))
        elif isinstance(a, ad.LoraAdapter):
            h = add(matmul(x, transpose(self.weight)),
                    ad.lora_delta(x, ad.select_members(a.A, members), ad.select_members(a.B, members)))
        else:
            h = ad.batch_forward(x, self.weight, ad.select_members(a.r, members),
                                 ad.select_members(a.s, members), a.mode)
        return add(h, self.bias)


def attention_forward(x: Tensor, slots: dict, num_heads: int, members=None,
                      rng: np.random.Generator | None = None, p_drop: float = 0.0) -> Tensor:
    """Multi-head self-attention on ``[n, B, T, d]`` (or ``[T, d]``) activations.

    Every projection goes through its slot, so per-member adapters act on the
    corresponding member slice.  Dropout, when ``rng`` is given, hits the
    attention probabilities.
    """
    squeeze = x.ndim == 2
    if squeeze:
        x = reshape(x, (1, 1) + x.shape)
    n, b, t, d = x.shape
    dh = d // num_heads
    rows = reshape(x, (n, b * t, d))

    def heads(h):
        return transpose(reshape(h, (n, b, t, num_heads, dh)), (0, 1, 3, 2, 4))

    q = heads(slots["query"](rows, members))
    k = heads(slots["key"](rows, members))
    v = heads(slots["value"](rows, members))
    att = softmax(scale(matmul(q, transpose(k)), 1.0 / math.sqrt(dh)))
    att = dropout(att, p_drop, rng)
    ctx = transpose(matmul(att, v), (0, 1, 3, 2, 4))
    out = slots["output"](reshape(ctx, (n, b * t, d)), members)
    out = reshape(out, (n, b, t, d))
    return reshape(out, (t, d)) if squeeze else out


class ViT:
    """Micro ViT carrying the member-specific state of one ensembling method.

    ``method`` in ``single``, ``lora``, ``batch``, ``batch_pp``, ``mc_dropout``,
    ``last_layer`` and ``epinet`` is handled here; ``explicit`` and
    ``snapshot`` ensembles wrap several single-method networks.
    """

    def __init__(self, config: ModelConfig, seed: int = 0, dtype=np.float32):
        self.config = c = config.validate()
        self.seed = seed
        self.dtype = dtype
        if c.method in ("explicit", "snapshot"):
            raise ConfigError(f"{c.method} ensembles are built from single networks; use build_model")
        rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, 0xB0B])))
        train_bb = c.trainable_backbone
        d, h = c.embed_dim, c.mlp_dim
        self._entries: list[tuple[str, Tensor, bool]] = []  # (name, tensor, member_stacked)

        def param(name, shape, std=None, value=None, trainable=train_bb):
            if value is None:
                value = std * rng.standard_normal(shape) if std else np.zeros(shape)
            t = Tensor(np.asarray(value, dtype=dtype), requires_grad=trainable, name=name)
            self._entries.append((name, t, False))
            return t

        self.patch_W = param("backbone/patch_embed/W", (d, c.patch_dim), std=1.0 / math.sqrt(c.patch_dim))
        self.patch_b = param("backbone/patch_embed/b", (d,), std=0.02)
        self.cls_token = param("backbone/cls_token", (d,), std=1.0)
        self.pos_embed = param("backbone/pos_embed", (c.seq_len, d), std=1.0)
        self.blocks = []
        for layer in range(c.depth):
            pre = f"backbone/block{layer}"
            blk = {
                "ln1": (param(f"{pre}/ln1/g", (d,), value=np.ones(d)), param(f"{pre}/ln1/b", (d,))),
                "ln2": (param(f"{pre}/ln2/g", (d,), value=np.ones(d)), param(f"{pre}/ln2/b", (d,))),
                "fc1": (param(f"{pre}/mlp/fc1/W", (h, d), std=1.0 / math.sqrt(d)), param(f"{pre}/mlp/fc1/b", (h,), std=0.02)),
                "fc2": (param(f"{pre}/mlp/fc2/W", (d, h), std=1.0 / math.sqrt(h)), param(f"{pre}/mlp/fc2/b", (d,), std=0.02)),
                "slots": {},
            }
            for role in ROLES:
                shared = c.method in ("batch", "batch_pp")
                W = param(f"{pre}/{role}/W", (d, d), std=1.0 / math.sqrt(d), trainable=train_bb or shared)
                bias = param(f"{pre}/{role}/b", (d,), std=0.02)
                blk["slots"][role] = ProjectionSlot(role, W, bias)
            self.blocks.append(blk)
        self.norm = (param("backbone/norm/g", (d,), value=np.ones(d)), param("backbone/norm/b", (d,)))

        self.epinet = None
        if c.method == "epinet":
            self.epinet = ad.EpinetState(d, c.num_classes, c.ensemble_size, c.epistemic_dim,
                                         c.epinet_hidden, c.prior_scale, seed=seed, dtype=dtype)
            self.head_W, self.head_b = self.epinet.head_W, self.epinet.head_b
            for name, t in self.epinet.params().items():
                self._entries.append((name, t, False))
            for name, t in self.epinet.buffers().items():
                self._entries.append((name, t, False))
        else:
            nh = c.n_heads_out
            self.head_W = Tensor(np.zeros((nh, c.num_classes, d), dtype=dtype), requires_grad=True)
            self.head_b = Tensor(np.zeros((nh, c.num_classes), dtype=dtype), requires_grad=True)
            self._entries.append(("member{i}/head/W", self.head_W, True))
            self._entries.append(("member{i}/head/b", self.head_b, True))
            if c.method == "last_layer":
                ad.last_layer_init(self.head_W, self.head_b, seed=seed)
            else:
                self._default_head_init()

        if c.method == "lora":
            self._attach_lora()
        elif c.method in ("batch", "batch_pp"):
            self._attach_batch("multiplicative" if c.method == "batch" else "additive")

    # -- construction helpers ---------------------------------------------
    def _member_rngs(self):
        return [ad.member_rng(self.seed, i) for i in range(self.head_W.shape[0])]

    def _default_head_init(self):
        d = self.config.embed_dim
        bound = 1.0 / math.sqrt(d)
        for i, rng in enumerate(self._member_rngs()):
            self.head_W.data[i] = rng.uniform(-bound, bound, self.head_W.shape[1:])
            self.head_b.data[i] = rng.uniform(-bound, bound, self.head_b.shape[1:])

    def _attach_lora(self):
        c = self.config
        # Streams continue after the head draws so A is independent of the head.
        rngs = self._member_rngs()
        for rng in rngs:
            rng.uniform(size=self.head_W.shape[1:])
            rng.uniform(size=self.head_b.shape[1:])
        for layer, blk in enumerate(self.blocks):
            for role in ROLES:
                a = ad.LoraAdapter(c.ensemble_size, c.embed_dim, c.embed_dim, c.rank, dtype=self.dtype)
                ad.lora_init(a, c.init_spec, rngs=rngs)
                blk["slots"][role].adapter = a
                self._entries.append((f"member{{i}}/block{layer}/{role}/A", a.A, True))
                self._entries.append((f"member{{i}}/block{layer}/{role}/B", a.B, True))

    def _attach_batch(self, mode):
        c = self.config
        rngs = self._member_rngs()
        for layer, blk in enumerate(self.blocks):
            for role in ROLES:
                a = ad.BatchAdapter(c.ensemble_size, c.embed_dim, c.embed_dim, mode, dtype=self.dtype)
                ad.batch_init(a, rngs)
                blk["slots"][role].adapter = a
                self._entries.append((f"member{{i}}/block{layer}/{role}/r", a.r, True))
                self._entries.append((f"member{{i}}/block{layer}/{role}/s", a.s, True))

    # -- introspection ----------------------------------------------------
    @property
    def n_members(self) -> int:
        c = self.config
        return 1 if c.method in ("single", "mc_dropout") else c.ensemble_size

    def parameters(self) -> dict[str, Tensor]:
        """Trainable tensors, member-stacked ones under their template name."""
        return {name: t for name, t, _ in self._entries if t.requires_grad}

    def all_tensors(self) -> dict[str, Tensor]:
        return {name: t for name, t, _ in self._entries}

    def state_dict(self) -> dict[str, np.ndarray]:
        out = {}
        for name, t, stacked in self._entries:
            if stacked:
                for i in range(t.shape[0]):
                    out[name.format(i=i)] = t.data[i].copy()
            else:
                out[name] = t.data.copy()
        return out

    def load_state_dict(self, state: dict, strict: bool = True) -> None:
        for name, t, stacked in self._entries:
            if stacked:
                for i in range(t.shape[0]):
                    key = name.format(i=i)
                    self._assign(t.data, i, state, key, strict)
            else:
                self._assign(t, None, state, name, strict)

    @staticmethod
    def _assign(target, index, state, key, strict):
        if key not in state:
            if strict:
                raise KeyError(f"missing tensor {key!r} in state")
            return
        value = np.asarray(state[key])
        if index is None:
            if value.shape != target.shape:
                raise ConfigError(f"{key}: shape {value.shape} != {target.shape}")
            target.data[...] = value
        else:
            if value.shape != target.shape[1:]:
                raise ConfigError(f"{key}: shape {value.shape} != {target.shape[1:]}")
            target[index] = value

    def zero_grad(self) -> None:
        for _, t, _ in self._entries:
            t.grad = None

    # -- forward ----------------------------------------------------------
    def embed(self, images) -> Tensor:
        """Patch embedding, class token and positional embedding: ``[B, T, d]``."""
        c = self.config
        images = images.data if isinstance(images, Tensor) else np.asarray(images)
        if images.ndim != 4 or images.shape[1:] != (c.image_size, c.image_size, c.channels):
            raise ConfigError(f"expected images [B, {c.image_size}, {c.image_size}, {c.channels}], got {images.shape}")
        patches = Tensor(patchify(images.astype(self.dtype, copy=False), c.patch_size))
        x = add(matmul(patches, transpose(self.patch_W)), self.patch_b)
        cls = expand(reshape(self.cls_token, (1, c.embed_dim)), images.shape[0])
        x = concat([cls, x], axis=1)
        return add(x, self.pos_embed)

    def features(self, images, members=None, rng: np.random.Generator | None = None,
                 p_drop: float | None = None) -> Tensor:
        """Final-norm class-token features ``[n, B, d]`` (``n = 1`` for shared trunks)."""
        c = self.config
        x = self.embed(images)
        b, t, d = x.shape
        n = 1
        if c.method in _PER_MEMBER_BACKBONE:
            n = c.ensemble_size if members is None else len(members)
        x = reshape(expand(x, n), (n, b * t, d))
        p = (c.dropout_rate if p_drop is None else p_drop) if rng is not None else 0.0
        for blk in self.blocks:
            hdn = layer_norm(x, *blk["ln1"], eps=c.ln_eps)
            att = attention_forward(reshape(hdn, (n, b, t, d)), blk["slots"], c.num_heads, members, rng, p)
            x = add(x, reshape(att, (n, b * t, d)))
            hdn = layer_norm(x, *blk["ln2"], eps=c.ln_eps)
            W1, b1 = blk["fc1"]
            W2, b2 = blk["fc2"]
            m = gelu(add(matmul(hdn, transpose(W1)), b1))
            m = dropout(m, p, rng)
            x = add(x, add(matmul(m, transpose(W2)), b2))
        x = layer_norm(x, *self.norm, eps=c.ln_eps)
        return take(reshape(x, (n, b, t, d)), 0, axis=2)

    def forward(self, images, members=None, rng: np.random.Generator | None = None,
                z: np.ndarray | None = None, p_drop: float | None = None) -> Tensor:
        """Logits ``[n, B, C]`` for the selected members (all by default).

        ``rng`` activates dropout (when the config has a nonzero rate) and
        supplies fresh epistemic indices for EpiNet when ``z`` is not given.
        """
        c = self.config
        if members is not None:
            members = [int(m) for m in members]
            for m in members:
                if not 0 <= m < self.n_members:
                    raise IndexError(f"member {m} out of range for {self.n_members} members")
        feats = self.features(images, members, rng, p_drop)
        if c.method == "epinet":
            phi = reshape(feats, feats.shape[1:])
            sel = range(self.n_members) if members is None else members
            outs = []
            for i in sel:
                if z is not None:
                    zi = Tensor(np.asarray(z[i], dtype=self.dtype))
                elif rng is not None:
                    zi = Tensor(rng.standard_normal((phi.shape[0], c.epistemic_dim)).astype(self.dtype))
                else:
                    zi = Tensor(np.zeros((phi.shape[0], c.epistemic_dim), dtype=self.dtype))
                out = ad.epinet_forward(self.epinet, phi, zi, i)
                outs.append(reshape(out, (1,) + out.shape))
            return concat(outs, axis=0) if len(outs) > 1 else outs[0]
        W = ad.select_members(self.head_W, members if self.head_W.shape[0] > 1 else None)
        b = ad.select_members(self.head_b, members if self.head_b.shape[0] > 1 else None)
        if feats.shape[0] != W.shape[0]:
            feats = expand(reshape(feats, feats.shape[1:]), W.shape[0])
        return ad.head_forward(feats, W, b)

    __call__ = forward

    def vit_forward(self, images, member: int, rng=None) -> Tensor:
        """Logits ``[B, C]`` of one member."""
        out = self.forward(images, members=[member], rng=rng)
        return reshape(out, out.shape[1:])

    def astype(self, dtype) -> "ViT":
        clone = ViT(self.config, seed=self.seed, dtype=dtype)
        clone.load_state_dict(self.state_dict())
        return clone
