"""Acceptance suite: one test per criterion, each printing a single verdict line.

Criteria 9, 10 and 12 share one set of trained models (LoRA ensembles at
gains 1, 10 and 40 plus the frozen single baseline, three seeds each), built
once per session.  Run with ``-s`` to see the verdict lines inline; they are
also repeated in the terminal summary.
"""

import json
import time

import numpy as np
import pytest

import oracles
from loraens import diversity as D
from loraens import metrics as M
from loraens.adapters import InitSpec, lora_forward, lora_init, plan_snapshots
from loraens.backbone import ModelConfig, ViT
from loraens.cli import main
from loraens.data import CORRUPTION_KINDS, SyntheticSpec, corrupt, gen_ood, gen_synthetic
from loraens.ensemble import member_updates, predict_logits
from loraens.tensor import Tensor
from loraens.training import TrainConfig, train_run

SEEDS = (0, 1, 2)
GAINS = (1.0, 10.0, 40.0)


# -- 1 ------------------------------------------------------------------------------------------

def test_c01_parameter_accounting(capsys, record_criterion):
    expected = {(8, 1): 666_724, (128, 1): 9_514_084, (8, 16): 10_667_584}
    got, ratio, slowest = {}, None, 0.0
    for (rank, members) in expected:
        t0 = time.perf_counter()
        code = main(["param-count", "--profile", "vit-b32", "--rank", str(rank), "--members", str(members),
                     "--json"])
        slowest = max(slowest, time.perf_counter() - t0)
        table = json.loads(capsys.readouterr().out)
        assert code == 0
        got[(rank, members)] = table["trainable"]
        if (rank, members) == (8, 16):
            ratio = table["ratio"]
    ok = got == expected and f"{ratio:.3g}" == "1.12" and slowest < 1.0
    record_criterion(1, ok, f"trainable {sorted(got.values())}, ratio {ratio:.4f}, slowest call {slowest:.3f}s")
    assert ok


# -- 2 ------------------------------------------------------------------------------------------

def test_c02_gradient_verification(capsys, record_criterion):
    t0 = time.perf_counter()
    code = main(["gradcheck"])
    elapsed = time.perf_counter() - t0
    lines = [ln.split() for ln in capsys.readouterr().out.splitlines() if ln.startswith(("PASS", "FAIL"))]
    worst = max(float(ln[2].split("=")[1]) for ln in lines)
    probes = sum(int(ln[3].split("=")[1]) for ln in lines)
    model_probes = {ln[1]: int(ln[3].split("=")[1]) for ln in lines if ln[1].startswith("micro_vit")}
    ok = (code == 0 and all(ln[0] == "PASS" for ln in lines) and worst < 1e-4 and probes >= 100
          and min(model_probes.values()) >= 100 and elapsed < 60)
    record_criterion(2, ok, f"{len(lines)} cases, max rel err {worst:.2e}, {probes} probes "
                            f"(model {min(model_probes.values())}+ each), {elapsed:.1f}s")
    assert ok


# -- 3 ------------------------------------------------------------------------------------------

def test_c03_merge_equivalence(record_criterion):
    rng = np.random.default_rng(2024)
    t0 = time.perf_counter()
    worst = 0.0
    for _ in range(100):
        d, k = rng.integers(2, 65, size=2)
        r = int(rng.integers(1, min(d, k) // 2 + 1))
        n = int(rng.integers(1, 9))
        # layer-scale factors (variance 1/fan_in) keep outputs O(1), the range where an
        # absolute 1e-5 is above float32 resolution
        W0 = (rng.standard_normal((k, d)) / np.sqrt(d)).astype(np.float32)
        A = (rng.standard_normal((r, d)) / np.sqrt(d)).astype(np.float32)
        B = (rng.standard_normal((k, r)) / np.sqrt(r)).astype(np.float32)
        x = rng.standard_normal((n, d)).astype(np.float32)
        low = lora_forward(Tensor(x), Tensor(W0), Tensor(A), Tensor(B)).data
        dense = x @ (W0 + B @ A).T
        assert low.dtype == np.float32 and dense.dtype == np.float32
        worst = max(worst, float(np.abs(low - dense).max()))
    elapsed = time.perf_counter() - t0
    ok = worst < 1e-5 and elapsed < 5
    record_criterion(3, ok, f"100 instances, max abs diff {worst:.2e}, {elapsed:.2f}s")
    assert ok


# -- 4 ------------------------------------------------------------------------------------------

def test_c04_zero_init_collapse(record_criterion):
    model = ViT(ModelConfig(method="lora", ensemble_size=8, rank=4, init_scale=10.0), seed=11)
    for blk in model.blocks:
        for slot in blk["slots"].values():
            lora_init(slot.adapter, InitSpec("xavier_uniform", 10.0), seed=12)
    x = np.random.default_rng(0).standard_normal((10, 16, 16, 1)).astype(np.float32)
    feats = model.features(x).data
    a_distinct = not np.array_equal(model.blocks[0]["slots"]["query"].adapter.A.data[0],
                                    model.blocks[0]["slots"]["query"].adapter.A.data[1])
    ok = feats.shape[0] == 8 and a_distinct and all(np.array_equal(feats[i], feats[0]) for i in range(8))
    record_criterion(4, ok, f"features {feats.shape} bitwise identical across members with distinct A")
    assert ok


# -- 5 ------------------------------------------------------------------------------------------

def _scores(rng, n):
    return rng.integers(0, 10, n) / 10.0 if rng.random() < 0.5 else rng.random(n)


def test_c05_metric_oracles(record_criterion):
    rng = np.random.default_rng(5)
    worst = {"ece": 0.0, "macro_f1": 0.0, "auprc": 0.0}
    exact = {"auroc": 0, "fpr95": 0}
    for _ in range(1000):
        n, c = int(rng.integers(1, 60)), int(rng.integers(2, 7))
        logits = rng.standard_normal((n, c)) * rng.uniform(0.1, 5)
        p = np.exp(logits)
        p /= p.sum(1, keepdims=True)
        if rng.random() < 0.2:  # confidences on bin edges
            p = np.round(p * 10) / 10
            p = p / p.sum(1, keepdims=True)
        y = rng.integers(0, c, n)
        worst["ece"] = max(worst["ece"], abs(M.ece_from_probs(p, y) - oracles.ece_loop(p, y)))
        pred = rng.integers(0, c, n)
        worst["macro_f1"] = max(worst["macro_f1"], abs(M.macro_f1(pred, y, c) - oracles.macro_f1_loop(pred, y, c)))
        pos, neg = _scores(rng, int(rng.integers(1, 60))), _scores(rng, int(rng.integers(1, 60)))
        exact["auroc"] += M.auroc(pos, neg) != oracles.auroc_pairs(list(pos), list(neg))
        exact["fpr95"] += M.fpr95(pos, neg) != oracles.fpr95_sweep(list(pos), list(neg))
        worst["auprc"] = max(worst["auprc"], abs(M.auprc(pos, neg) - oracles.auprc_sweep(list(pos), list(neg))))
    hand = (M.ece([0.95, 0.85, 0.65, 0.55], [True, False, True, True]),
            M.auroc([0.9, 0.6], [0.8, 0.5]),
            M.brier(np.array([[0.8, 0.2]]), [0]))
    hand_ok = abs(hand[0] - 0.425) <= 1e-12 and hand[1] == 0.75 and abs(hand[2] - 0.08) <= 1e-12
    ok = all(v <= 1e-12 for v in worst.values()) and not any(exact.values()) and hand_ok
    record_criterion(5, ok, f"1000 instances; float max dev {max(worst.values()):.1e}, rank mismatches "
                            f"{sum(exact.values())}; hand {hand[0]:.3f}/{hand[1]:.2f}/{hand[2]:.2f}")
    assert ok


# -- 6 ------------------------------------------------------------------------------------------

def test_c06_jensen(record_criterion):
    rng = np.random.default_rng(6)
    violations = 0
    for k in range(100):
        n, s, c = int(rng.integers(2, 9)), int(rng.integers(1, 50)), int(rng.integers(2, 10))
        logits = rng.standard_normal((n, s, c)) * rng.uniform(0.1, 4)
        identical = k % 10 == 0
        if identical:
            logits[:] = logits[0]
        ps = M.PredictionSet.from_logits(logits, rng.integers(0, c, s))
        ens = M.nll(ps.mean, ps.labels)
        per_member = [M.nll(p, ps.labels) for p in ps.probs]
        # identical members: equality must hold member by member, before any averaging rounds
        ok_k = all(v == ens for v in per_member) if identical else ens < float(np.mean(per_member))
        violations += not ok_k
    ok = violations == 0
    record_criterion(6, ok, f"100 prediction sets (10 with identical members), {violations} violations")
    assert ok


# -- 7 ------------------------------------------------------------------------------------------

def test_c07_temperature_recovery(record_criterion):
    rng = np.random.default_rng(7)
    S = 10_000
    true = 2.0 * rng.standard_normal((S, 5))
    p = np.exp(true - true.max(1, keepdims=True))
    p /= p.sum(1, keepdims=True)
    labels = (p.cumsum(1) > rng.random((S, 1))).argmax(1)
    mis = 2.0 * true
    T = M.fit_temperature(mis, labels)
    argmax_ok = all(np.array_equal(M.temperature_scale(mis, t).argmax(1), mis.argmax(1)) for t in M.TEMPERATURE_GRID)
    ok = abs(T - 2.0) <= 0.05 and argmax_ok
    record_criterion(7, ok, f"fitted T = {T:.2f} on S={S}; argmax invariant over {len(M.TEMPERATURE_GRID)} temperatures")
    assert ok


# -- 8 ------------------------------------------------------------------------------------------

def test_c08_snapshot_arithmetic(record_criterion):
    a, b = plan_snapshots(65, 20, 16), plan_snapshots(30, 15, 5)
    mismatches, checked = 0, 0
    for total in range(1, 70):
        for burn in range(total):
            for members in range(1, 20):
                want = oracles.minimal_burn_in(total, burn, members)
                if want is None:
                    continue
                checked += 1
                mismatches += plan_snapshots(total, burn, members).burn_in != want
    ok = a.burn_in == 33 and b.burn_in == 15 and b.cycle_length == 3 and mismatches == 0
    record_criterion(8, ok, f"(65,20,16) burn-in {a.burn_in}; (30,15,5) burn-in {b.burn_in} cycle {b.cycle_length}; "
                            f"{checked} feasible plans match brute force")
    assert ok


# -- trained models for 9, 10, 12 --------------------------------------------------------------

def _probs(model, images):
    return M.temperature_scale(predict_logits(model, images).astype(np.float64), 1.0)


@pytest.fixture(scope="session")
def trained():
    spec = SyntheticSpec()
    recipe = TrainConfig()
    out = {}
    for seed in SEEDS:
        train, test, ood = gen_synthetic(spec, "train", seed), gen_synthetic(spec, "test", seed), gen_ood(spec, seed)
        t0 = time.perf_counter()
        single = train_run(ModelConfig(method="single", backbone_trainable=False), recipe, train, seed=seed).model
        out[("single", seed)] = {"test": _probs(single, test.images)}
        out[("single", seed)]["seconds"] = time.perf_counter() - t0
        for gain in GAINS:
            t0 = time.perf_counter()
            model = train_run(ModelConfig(method="lora", ensemble_size=8, rank=4, init_scale=gain), recipe, train,
                              seed=seed).model
            rec = {"model": model, "test": _probs(model, test.images), "ood": _probs(model, ood.images)}
            rec["seconds"] = time.perf_counter() - t0
            out[(gain, seed)] = rec
        out[("data", seed)] = test
    return out


# -- 9 ------------------------------------------------------------------------------------------

def test_c09_desk_scale_training(trained, record_criterion):
    rows, ok = [], True
    for seed in SEEDS:
        ens, single, y = trained[(10.0, seed)], trained[("single", seed)], trained[("data", seed)].labels
        acc, acc_single = M.accuracy(ens["test"], y), M.accuracy(single["test"], y)
        ece = M.ece_from_probs(ens["test"], y)
        member_ece = float(np.mean([M.ece_from_probs(p, y) for p in ens["test"]]))
        auroc = M.ood_scores(ens["test"], ens["ood"])["auroc"]
        ok &= acc >= acc_single and ece <= member_ece and auroc > 0.7 and ens["seconds"] < 600
        rows.append(f"s{seed}: acc {acc:.3f}>={acc_single:.3f} ece {ece:.3f}<={member_ece:.3f} "
                    f"auroc {auroc:.3f} {ens['seconds']:.0f}s")
    record_criterion(9, ok, "; ".join(rows))
    assert ok


# -- 10 -----------------------------------------------------------------------------------------

def test_c10_diversity_gain_trend(trained, record_criterion):
    means = []
    for gain in GAINS:
        means.append(float(np.mean([D.diversity_score(member_updates(trained[(gain, s)]["model"], "value"))
                                    for s in SEEDS])))
    ok = all(a <= b for a, b in zip(means, means[1:]))
    record_criterion(10, ok, "diversity by gain " + ", ".join(f"{g:g}: {m:.4f}" for g, m in zip(GAINS, means)))
    assert ok


# -- 11 -----------------------------------------------------------------------------------------

def test_c11_intruder_detection(record_criterion):
    rng = np.random.default_rng(11)
    d, k = 64, 16
    W = rng.standard_normal((d, d))
    U, s, Vt = np.linalg.svd(W)
    u, v = U[:, -1], Vt[-1]  # orthogonal to every top-k singular direction of W
    spiked = W + 1.5 * s[0] * np.outer(u, v)
    planted = D.svd_intruder_analysis(W, spiked, top_k=k).count
    same = D.svd_intruder_analysis(W, W, top_k=k).count
    doubled = D.svd_intruder_analysis(W, 2.0 * W, top_k=k).count
    ok = planted >= 1 and same == 0 and doubled == 0
    record_criterion(11, ok, f"planted spike {planted} intruder(s); W_init {same}; 2*W_init {doubled}")
    assert ok


# -- 12 -----------------------------------------------------------------------------------------

def test_c12_shift_trend(trained, record_criterion):
    curve = np.zeros(5)
    for seed in SEEDS:
        model, test = trained[(10.0, seed)]["model"], trained[("data", seed)]
        for s in range(1, 6):
            accs = [M.accuracy(_probs(model, corrupt(test.images, kind, s, seed=seed)), test.labels)
                    for kind in CORRUPTION_KINDS]
            curve[s - 1] += np.mean(accs) / len(SEEDS)
    rises = np.diff(curve)[np.diff(curve) > 0]
    ok = len(rises) == 0 or (len(rises) == 1 and rises[0] <= 0.01)
    record_criterion(12, ok, "mean accuracy by severity " + ", ".join(f"{a:.3f}" for a in curve)
                     + f"; inversions {len(rises)}")
    assert ok
