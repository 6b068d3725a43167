"""Single-pass selection: top-b heap and Sieve-Streaming++ over latents."""

import heapq
import math

import numpy as np
from scipy.linalg import solve_triangular


def stream_select_top_b(scored, b):
    """Keep the ``b`` highest-scoring frames from a stream of ``(k, score)``.

    Ties go to the earlier frame.  Returns selected indices in stream order.
    """
    if b < 1:
        raise ValueError(f"b must be >= 1, got {b}")
    heap = []  # min-heap of (score, -k): root is the weakest kept frame
    for k, s in scored:
        if not math.isfinite(s):
            raise ValueError(f"non-finite score at frame {k}")
        item = (s, -k)
        if len(heap) < b:
            heapq.heappush(heap, item)
        elif item > heap[0]:
            heapq.heapreplace(heap, item)
    return sorted(-negk for _, negk in heap)


def offline_top_b(scores, b):
    """Reference: sort by (-score, index) and take the first ``b``."""
    order = sorted(range(len(scores)), key=lambda k: (-scores[k], k))
    return sorted(order[:b])


# ------------------------------------------------------------ submodular objective


def rbf(u, V, h):
    d2 = ((np.atleast_2d(V) - u) ** 2).sum(axis=1)
    return np.exp(-d2 / (2 * h * h))


def median_bandwidth(latents, max_points=1000):
    """Median pairwise Euclidean distance (evenly spaced subsample if large)."""
    Z = np.asarray(latents, dtype=np.float64)
    if len(Z) > max_points:
        Z = Z[np.linspace(0, len(Z) - 1, max_points).astype(int)]
    if len(Z) < 2:
        return 1.0
    sq = (Z * Z).sum(axis=1)
    d2 = np.maximum(sq[:, None] + sq[None, :] - 2 * Z @ Z.T, 0.0)
    iu = np.triu_indices(len(Z), 1)
    h = float(np.median(np.sqrt(d2[iu])))
    return h if h > 0 else 1.0


def submodular_f(latents, h):
    """``0.5 * logdet(I + K)`` with RBF kernel of bandwidth ``h``; 0 for the empty set."""
    Z = np.asarray(latents, dtype=np.float64)
    if Z.size == 0:
        return 0.0
    Z = np.atleast_2d(Z)
    sq = (Z * Z).sum(axis=1)
    d2 = np.maximum(sq[:, None] + sq[None, :] - 2 * Z @ Z.T, 0.0)
    M = np.eye(len(Z)) + np.exp(-d2 / (2 * h * h))
    for jitter in (0.0, 1e-9):
        try:
            L = np.linalg.cholesky(M + jitter * np.eye(len(Z)))
            return float(np.log(np.diag(L)).sum())
        except np.linalg.LinAlgError:
            continue
    raise np.linalg.LinAlgError("Cholesky of I + K failed even with jitter")


class _Sieve:
    """One candidate set with an incrementally maintained Cholesky factor of I + K_S."""

    def __init__(self, tau, b, dim):
        self.tau = tau
        self.items = []
        self.Z = np.empty((b, dim))
        self.L = np.zeros((b, b))
        self.value = 0.0

    def gain(self, z, h):
        n = len(self.items)
        if n == 0:
            return 0.5 * math.log(2.0), None, math.sqrt(2.0)
        kv = rbf(z, self.Z[:n], h)
        w = solve_triangular(self.L[:n, :n], kv, lower=True, check_finite=False)
        schur = 2.0 - float(w @ w)
        if schur <= 0:
            schur = 1e-12
        return 0.5 * math.log(schur), w, math.sqrt(schur)

    def add(self, k, z, gain, w, diag):
        n = len(self.items)
        if n:
            self.L[n, :n] = w
        self.L[n, n] = diag
        self.Z[n] = z
        self.items.append(k)
        self.value += gain


def sieve_streaming_pp(latents, b, eps=0.1, h=1.0):
    """Single-pass threshold-lattice sieve for monotone submodular ``submodular_f``.

    ``latents`` is an iterable of ``(k, z)``.  Thresholds ``(1+eps)^j`` are
    kept for ``m <= tau <= 2*b*m`` where ``m`` is the largest singleton value
    seen so far; an element joins sieve ``tau`` when it has room and its
    marginal gain is at least ``(tau/2 - f(S)) / (b - |S|)``.  Returns the
    indices of the best sieve, in arrival order, together with its value.
    """
    if b < 1:
        raise ValueError(f"b must be >= 1, got {b}")
    if not 0 < eps < 1:
        raise ValueError(f"eps must be in (0, 1), got {eps}")
    sieves = {}
    m = 0.0
    base = math.log1p(eps)
    for k, z in latents:
        z = np.asarray(z, dtype=np.float64)
        if not np.isfinite(z).all():
            raise ValueError(f"non-finite latent at frame {k}")
        single = 0.5 * math.log(2.0)  # k(z, z) = 1 for every z
        if single > m:
            m = single
            lo = math.ceil(math.log(m) / base - 1e-12)
            hi = math.floor(math.log(2 * b * m) / base + 1e-12)
            sieves = {j: s for j, s in sieves.items() if lo <= j <= hi}
            for j in range(lo, hi + 1):
                if j not in sieves:
                    sieves[j] = _Sieve((1 + eps) ** j, b, len(z))
        for j in sorted(sieves):
            s = sieves[j]
            n = len(s.items)
            if n >= b:
                continue
            gain, w, diag = s.gain(z, h)
            if gain >= (s.tau / 2 - s.value) / (b - n):
                s.add(k, z, gain, w, diag)
    if not sieves:
        return [], 0.0
    best = max(sieves.values(), key=lambda s: (s.value, -s.tau))
    return list(best.items), best.value
