"""Function-space and weight-space diversity diagnostics for ensemble members.

Function space: pairwise disagreement and Jensen-Shannon divergence.  Weight
space: SVD intruder dimensions, singular-vector similarity across members,
cosine similarity of updates and the correlation-based diversity score.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .tensor import NumericError

JACOBI_TOL = 1e-10
JACOBI_MAX_SWEEPS = 60


# ---------------------------------------------------------------------------
# SVD


def _round_robin(n: int) -> list[tuple[np.ndarray, np.ndarray]]:
    """``n - 1`` rounds of ``n / 2`` disjoint column pairs covering every pair once (``n`` even)."""
    players = list(range(n))
    rounds = []
    for _ in range(n - 1):
        p = np.array(players[: n // 2])
        q = np.array(players[n // 2:][::-1])
        rounds.append((np.minimum(p, q), np.maximum(p, q)))
        players = [players[0]] + [players[-1]] + players[1:-1]
    return rounds


def _complete_basis(U: np.ndarray, keep: np.ndarray) -> np.ndarray:
    """Replace columns not in ``keep`` by an orthonormal completion (Gram-Schmidt on the identity)."""
    m, k = U.shape
    basis = [U[:, j] for j in range(k) if keep[j]]
    out = U.copy()
    e = 0
    for j in range(k):
        if keep[j]:
            continue
        while True:
            v = np.zeros(m)
            v[e % m] = 1.0
            e += 1
            for _ in range(2):
                for b in basis:
                    v -= (b @ v) * b
            norm = np.linalg.norm(v)
            if norm > 1e-8:
                break
            if e > 2 * m:
                raise NumericError("could not complete singular basis")
        v /= norm
        basis.append(v)
        out[:, j] = v
    return out


def jacobi_svd(A, tol: float = JACOBI_TOL, max_sweeps: int = JACOBI_MAX_SWEEPS):
    """Thin SVD ``A = U diag(s) Vt`` by one-sided (Hestenes) Jacobi rotations.

    Column pairs are orthogonalised in parallel rounds; a sweep ends when every
    pair's normalised inner product is below ``tol``.  Singular values come
    back in descending order.  Raises NumericError when the sweeps run out.
    """
    A = np.asarray(A, dtype=np.float64)
    if A.ndim != 2 or A.size == 0:
        raise ValueError(f"expected a non-empty matrix, got shape {A.shape}")
    if not np.all(np.isfinite(A)):
        raise NumericError("SVD input contains non-finite values")
    transposed = A.shape[0] < A.shape[1]
    X = (A.T if transposed else A).copy()
    m, n = X.shape
    pad = n % 2
    if pad:
        X = np.hstack([X, np.zeros((m, 1))])
    nn = X.shape[1]
    V = np.eye(nn)
    rounds = _round_robin(nn) if nn > 1 else []
    for _sweep in range(max_sweeps):
        off = 0.0
        for p, q in rounds:
            xp, xq = X[:, p], X[:, q]
            alpha = np.einsum("ij,ij->j", xp, xp)
            beta = np.einsum("ij,ij->j", xq, xq)
            gamma = np.einsum("ij,ij->j", xp, xq)
            scale = np.sqrt(alpha * beta)
            rel = np.where(scale > 0, np.abs(gamma) / np.where(scale > 0, scale, 1.0), 0.0)
            off = max(off, float(rel.max(initial=0.0)))
            act = rel > tol
            if not act.any():
                continue
            p, q = p[act], q[act]
            alpha, beta, gamma = alpha[act], beta[act], gamma[act]
            zeta = (beta - alpha) / (2.0 * gamma)
            t = np.where(zeta >= 0, 1.0, -1.0) / (np.abs(zeta) + np.sqrt(1.0 + zeta * zeta))
            c = 1.0 / np.sqrt(1.0 + t * t)
            s = c * t
            for M in (X, V):
                mp, mq = M[:, p].copy(), M[:, q]
                M[:, p] = c * mp - s * mq
                M[:, q] = s * mp + c * mq
        if off <= tol:
            break
    else:
        raise NumericError(f"Jacobi SVD did not converge in {max_sweeps} sweeps")
    sv = np.linalg.norm(X, axis=0)
    order = np.argsort(-sv, kind="stable")[:n]
    sv, X, V = sv[order], X[:, order], V[:n, order]
    k = min(m, n)
    sv, X, V = sv[:k], X[:, :k], V[:, :k]
    keep = sv > max(sv[0] if k else 0.0, 1.0) * 1e-13
    U = np.where(keep, X / np.where(keep, sv, 1.0), 0.0)
    if not keep.all():
        U = _complete_basis(U, keep)
        sv = np.where(keep, sv, 0.0)
    if transposed:
        return V, sv, U.T
    return U, sv, V.T


@dataclass
class SpectralProfile:
    name: str
    singular_values: np.ndarray
    left: np.ndarray  # [m, k]
    right: np.ndarray  # [k, n]

    @property
    def top_k(self) -> int:
        return self.left.shape[1]


def spectral_profile(W, top_k: int | None = None, name: str = "") -> SpectralProfile:
    U, s, Vt = jacobi_svd(W)
    k = len(s) if top_k is None else min(top_k, len(s))
    return SpectralProfile(name, s, U[:, :k], Vt[:k])


# ---------------------------------------------------------------------------
# function space


def disagreement_rate(preds_i, preds_j) -> float:
    a, b = np.asarray(preds_i), np.asarray(preds_j)
    if a.shape != b.shape:
        raise ValueError("prediction vectors differ in length")
    return float(np.mean(a != b)) if a.size else 0.0


def disagreement_matrix(probs) -> np.ndarray:
    preds = np.asarray(probs).argmax(axis=-1)
    n = len(preds)
    D = np.zeros((n, n))
    for i in range(n):
        for j in range(i + 1, n):
            D[i, j] = D[j, i] = disagreement_rate(preds[i], preds[j])
    return D


def _check_simplex(p: np.ndarray, what: str) -> None:
    if np.any(p < 0) or abs(p.sum() - 1.0) > 1e-6:
        raise ValueError(f"{what} is not a probability distribution")


def _kl(p: np.ndarray, m: np.ndarray) -> float:
    nz = p > 0
    return float(np.sum(p[nz] * np.log(p[nz] / m[nz])))


def jsd(p, q) -> float:
    """Jensen-Shannon divergence in nats; ``0 log 0 = 0``."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape:
        raise ValueError("distributions differ in length")
    _check_simplex(p, "p")
    _check_simplex(q, "q")
    m = 0.5 * (p + q)
    return 0.5 * _kl(p, m) + 0.5 * _kl(q, m)


def jsd_matrix(probs) -> np.ndarray:
    """Pairwise JSD between each member's softmax averaged over all samples."""
    means = np.asarray(probs, dtype=np.float64).mean(axis=1)
    means = means / means.sum(axis=1, keepdims=True)
    n = len(means)
    J = np.zeros((n, n))
    for i in range(n):
        for j in range(i + 1, n):
            J[i, j] = J[j, i] = jsd(means[i], means[j])
    return J


def export_function_space(probs) -> np.ndarray:
    """One row per member: its ``[S, C]`` probability matrix flattened, for external embedding."""
    p = np.asarray(probs, dtype=np.float64)
    return p.reshape(p.shape[0], -1)


# ---------------------------------------------------------------------------
# weight space


@dataclass
class IntruderResult:
    count: int
    similarity: np.ndarray  # [k_final, k_init] absolute cosines
    intruders: list[int]


def svd_intruder_analysis(W_init, W_final, top_k: int = 16, threshold: float = 0.3) -> IntruderResult:
    """Count top-``top_k`` left singular vectors of ``W_final`` nearly orthogonal to those of ``W_init``."""
    W_init = np.asarray(W_init, dtype=np.float64)
    W_final = np.asarray(W_final, dtype=np.float64)
    if W_init.shape != W_final.shape:
        raise ValueError(f"shape mismatch {W_init.shape} vs {W_final.shape}")
    init = spectral_profile(W_init, top_k)
    final = spectral_profile(W_final, top_k)
    S = np.abs(final.left.T @ init.left)
    hits = [a for a in range(S.shape[0]) if S[a].max() < threshold]
    return IntruderResult(len(hits), S, hits)


def _as_layers(member) -> list[np.ndarray]:
    if isinstance(member, np.ndarray) and member.ndim == 2:
        return [member]
    return [np.asarray(m, dtype=np.float64) for m in member]


@dataclass
class SingularSimilarity:
    pairwise: np.ndarray  # [N, N] mean corresponding-rank |cos|
    by_rank: np.ndarray  # [k, k] |cos| averaged over member pairs and layers


def singular_vector_similarity(members, top_k: int = 16) -> SingularSimilarity:
    """Cross-member similarity of top left singular vectors.

    ``members`` is a list (one entry per member) of matrices or of per-layer
    matrix lists.  Absolute cosines make the result sign-invariant.
    """
    layers = [_as_layers(m) for m in members]
    n = len(layers)
    if n < 2:
        raise ValueError("need at least two members")
    L = len(layers[0])
    profiles = [[spectral_profile(layers[i][l], top_k).left for l in range(L)] for i in range(n)]
    k = profiles[0][0].shape[1]
    pairwise = np.eye(n)
    acc = np.zeros((k, k))
    count = 0
    for i in range(n):
        for j in range(i + 1, n):
            diag = []
            for l in range(L):
                S = np.abs(profiles[i][l].T @ profiles[j][l])
                acc += S
                count += 1
                diag.append(np.diag(S).mean())
            pairwise[i, j] = pairwise[j, i] = float(np.mean(diag))
    return SingularSimilarity(pairwise, acc / count)


def pearson(x, y) -> float | None:
    """Pearson correlation of two flattened arrays; None when either has zero variance."""
    x = np.asarray(x, dtype=np.float64).ravel()
    y = np.asarray(y, dtype=np.float64).ravel()
    xc, yc = x - x.mean(), y - y.mean()
    sxx, syy = float(xc @ xc), float(yc @ yc)
    if sxx == 0.0 or syy == 0.0:
        return None
    return float(np.clip((xc @ yc) / math.sqrt(sxx * syy), -1.0, 1.0))


def diversity_score(members) -> float:
    """``1 -`` mean Pearson correlation over layers and member pairs of flattened updates.

    Pairs where a member's update has zero variance are skipped with a warning.
    """
    layers = [_as_layers(m) for m in members]
    n = len(layers)
    if n < 2:
        raise ValueError("need at least two members")
    corrs = []
    skipped = 0
    for l in range(len(layers[0])):
        for i in range(n):
            for j in range(i + 1, n):
                r = pearson(layers[i][l], layers[j][l])
                if r is None:
                    skipped += 1
                else:
                    corrs.append(r)
    if skipped:
        warnings.warn(f"skipped {skipped} member pairs with zero-variance updates", RuntimeWarning, stacklevel=2)
    if not corrs:
        raise ValueError("no member pair has a defined correlation")
    return 1.0 - math.fsum(corrs) / len(corrs)


def weight_cosine_similarity(members) -> np.ndarray:
    """Cosine similarity of members' updates, flattened across layers; ``[N, N]``."""
    flat = [np.concatenate([m.ravel() for m in _as_layers(x)]) for x in members]
    n = len(flat)
    C = np.eye(n)
    for i in range(n):
        for j in range(i + 1, n):
            den = np.linalg.norm(flat[i]) * np.linalg.norm(flat[j])
            C[i, j] = C[j, i] = float(flat[i] @ flat[j] / den) if den > 0 else 0.0
    return C


# ---------------------------------------------------------------------------
# summary


@dataclass
class DiversitySummary:
    disagreement: np.ndarray
    jsd: np.ndarray
    intruder_counts: list  # [member][layer]
    diversity_score: float
    weight_cosine: np.ndarray
    singular_similarity: np.ndarray | None = None
    function_space: np.ndarray | None = None
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        out = {
            "disagreement": self.disagreement.tolist(),
            "jsd": self.jsd.tolist(),
            "intruder_counts": [list(map(int, row)) for row in self.intruder_counts],
            "diversity_score": float(self.diversity_score),
            "weight_cosine": self.weight_cosine.tolist(),
        }
        if self.singular_similarity is not None:
            out["singular_similarity"] = self.singular_similarity.tolist()
        if self.function_space is not None:
            out["function_space"] = self.function_space.tolist()
        out.update(self.extra)
        return out


SUMMARY_SCHEMA = {
    "type": "object",
    "required": ["disagreement", "jsd", "intruder_counts", "diversity_score", "weight_cosine"],
    "properties": {
        "disagreement": {"type": "array", "items": {"type": "array", "items": {"type": "number"}}},
        "jsd": {"type": "array", "items": {"type": "array", "items": {"type": "number"}}},
        "intruder_counts": {"type": "array", "items": {"type": "array", "items": {"type": "integer"}}},
        "diversity_score": {"type": "number", "minimum": 0, "maximum": 2},
        "weight_cosine": {"type": "array", "items": {"type": "array", "items": {"type": "number"}}},
        "singular_similarity": {"type": "array", "items": {"type": "array", "items": {"type": "number"}}},
        "function_space": {"type": "array", "items": {"type": "array", "items": {"type": "number"}}},
    },
}


def summarize(probs, updates, init_weights, final_weights, top_k: int = 16, threshold: float = 0.3,
              export: bool = True) -> DiversitySummary:
    """Assemble a DiversitySummary.

    ``probs`` is ``[N, S, C]``; ``updates`` and ``final_weights`` hold one
    per-layer matrix list per member; ``init_weights`` is the per-layer list of
    the shared starting matrices.
    """
    probs = np.asarray(probs, dtype=np.float64)
    if probs.shape[0] < 2:
        raise ValueError("diversity analysis needs at least two members")
    intruders = [[svd_intruder_analysis(w0, wf, top_k, threshold).count
                  for w0, wf in zip(init_weights, member)] for member in final_weights]
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        try:
            score = diversity_score(updates)
        except ValueError:
            score = 0.0
    return DiversitySummary(
        disagreement=disagreement_matrix(probs),
        jsd=jsd_matrix(probs),
        intruder_counts=intruders,
        diversity_score=score,
        weight_cosine=weight_cosine_similarity(updates),
        singular_similarity=singular_vector_similarity(final_weights, top_k).pairwise,
        function_space=export_function_space(probs) if export else None,
    )
