import numpy as np
import pytest

from loraens import adapters as A
from loraens import tensor as T
from loraens.backbone import ModelConfig, ViT
from loraens.ensemble import (
    ExplicitEnsemble,
    SnapshotEnsemble,
    build_model,
    mc_dropout_predict,
    member_attention_weights,
    member_updates,
    predict_logits,
)

SMALL = dict(image_size=8, patch_size=4, embed_dim=16, depth=2, num_heads=2, num_classes=3)


def images(n=6, seed=0):
    return np.random.default_rng(seed).standard_normal((n, 8, 8, 1)).astype(np.float32)


# -- mc dropout ---------------------------------------------------------------

def test_mc_dropout_rate_zero_samples_identical():
    model = ViT(ModelConfig(**SMALL, method="mc_dropout"))
    out = mc_dropout_predict(model, images(), samples=4, rate=0.0, seed=0)
    for s in range(1, 4):
        np.testing.assert_array_equal(out[s], out[0])


def test_mc_dropout_reproducible_and_stochastic():
    model = ViT(ModelConfig(**SMALL, method="mc_dropout"))
    a = mc_dropout_predict(model, images(), samples=3, rate=0.2, seed=7)
    b = mc_dropout_predict(model, images(), samples=3, rate=0.2, seed=7)
    np.testing.assert_array_equal(a, b)
    assert not np.array_equal(a[0], a[1])
    np.testing.assert_allclose(a.sum(-1), 1.0, atol=1e-5)


def test_mc_dropout_bad_rate():
    model = ViT(ModelConfig(**SMALL, method="mc_dropout"))
    with pytest.raises(ValueError):
        mc_dropout_predict(model, images(), samples=1, rate=1.0, seed=0)


def test_dropout_zero_fraction_binomial():
    p, n = 0.2, 200_000
    out = T.dropout(T.Tensor(np.ones(n)), p, np.random.default_rng(3)).data
    frac = float(np.mean(out == 0.0))
    sigma = np.sqrt(p * (1 - p) / n)
    assert abs(frac - p) < 3 * sigma
    np.testing.assert_allclose(out[out != 0], 1.0 / (1 - p))


# -- explicit and snapshot ensembles ------------------------------------------------

def test_explicit_members_share_backbone_but_not_heads():
    ens = ExplicitEnsemble(ModelConfig(**SMALL, method="explicit", ensemble_size=3), seed=2)
    a, b = ens.members[0].state_dict(), ens.members[1].state_dict()
    for k in a:
        if k.startswith("backbone/"):
            np.testing.assert_array_equal(a[k], b[k])
    assert not np.array_equal(a["member0/head/W"], b["member0/head/W"])
    assert ens.forward(images()).shape == (3, 6, 3)


def test_explicit_state_dict_roundtrip():
    cfg = ModelConfig(**SMALL, method="explicit", ensemble_size=2)
    ens = build_model(cfg, seed=1)
    state = ens.state_dict()
    assert "member1/backbone/block0/query/W" in state and "member1/head/W" in state
    other = build_model(cfg, seed=9)
    other.load_state_dict(state)
    np.testing.assert_array_equal(predict_logits(other, images()), predict_logits(ens, images()))


def test_explicit_parallel_prediction_matches_serial():
    ens = build_model(ModelConfig(**SMALL, method="explicit", ensemble_size=4), seed=1)
    np.testing.assert_array_equal(predict_logits(ens, images(), jobs=1), predict_logits(ens, images(), jobs=4))


def test_snapshot_collects_deep_copies():
    ens = SnapshotEnsemble(ModelConfig(**SMALL, method="snapshot", ensemble_size=2))
    ens.take_snapshot()
    ens.net.head_W.data[...] += 1.0
    ens.take_snapshot()
    ens.net.head_W.data[...] += 1.0
    out = ens.forward(images()).data
    assert out.shape == (2, 6, 3)
    assert not np.array_equal(out[0], out[1])
    live = ens.net.forward(images()).data[0]
    assert not np.array_equal(live, out[1])  # later edits do not leak into snapshots
    state = ens.state_dict()
    fresh = SnapshotEnsemble(ModelConfig(**SMALL, method="snapshot", ensemble_size=2), seed=4)
    fresh.load_state_dict(state)
    np.testing.assert_array_equal(fresh.forward(images()).data, out)


# -- prediction ------------------------------------------------------------------

@pytest.mark.parametrize("method", ["lora", "batch", "epinet", "last_layer", "mc_dropout", "single"])
def test_predict_logits_batching_invariant(method):
    model = build_model(ModelConfig(**SMALL, method=method, ensemble_size=3, rank=2, epinet_hidden=8,
                                    dropout_rate=0.1))
    x = images(7)
    full = predict_logits(model, x, batch_size=7)
    if method in ("epinet", "mc_dropout"):
        np.testing.assert_array_equal(full, predict_logits(model, x, batch_size=7))
    else:
        np.testing.assert_allclose(predict_logits(model, x, batch_size=3), full, rtol=1e-5, atol=1e-6)
    assert full.shape[1:] == (7, 3)


def test_epinet_members_differ_through_index():
    model = build_model(ModelConfig(**SMALL, method="epinet", ensemble_size=3, epinet_hidden=8))
    out = predict_logits(model, images())
    assert not np.array_equal(out[0], out[1])


# -- weight extraction --------------------------------------------------------------

def test_lora_updates_are_BA_and_merge_consistent():
    model = ViT(ModelConfig(**SMALL, method="lora", ensemble_size=2, rank=2), seed=3)
    for blk in model.blocks:
        blk["slots"]["value"].adapter.B.data[...] = np.random.default_rng(0).standard_normal((2, 16, 2))
    updates = member_updates(model)
    init, finals = member_attention_weights(model)
    for i in range(2):
        for l in range(2):
            a = model.blocks[l]["slots"]["value"].adapter
            np.testing.assert_allclose(updates[i][l], a.B.data[i].astype(float) @ a.A.data[i].astype(float))
            np.testing.assert_allclose(finals[i][l] - init[l], updates[i][l], atol=1e-12)


def test_zero_init_updates_vanish():
    model = ViT(ModelConfig(**SMALL, method="lora", ensemble_size=2, rank=2))
    assert all(not np.any(u) for member in member_updates(model) for u in member)
