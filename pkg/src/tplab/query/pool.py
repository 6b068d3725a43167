"""Pool strategies: random, CoreSet k-center greedy, BADGE, BatchBALD."""

import numpy as np
from scipy.spatial.distance import cdist

from tplab import nnet, objective
from tplab.query.scores import bald_from_samples, entropy


def random_select(n, b, rng):
    """Uniform sample of ``min(b, n)`` indices without replacement, sorted."""
    if b >= n:
        return list(range(n))
    return sorted(rng.choice(n, size=b, replace=False).tolist())


def coreset_kcenter(labeled, pool, b):
    """Greedy k-center: repeatedly take the pool point farthest from every covered point.

    Covered points are the labeled set plus everything selected so far.
    Ties go to the lowest pool index.  Returns indices in selection order.
    """
    pool = np.asarray(pool, dtype=np.float64)
    labeled = np.asarray(labeled, dtype=np.float64).reshape(-1, pool.shape[1])
    n = len(pool)
    if n == 0:
        raise ValueError("pool is empty")
    b = min(b, n)
    if len(labeled):
        mind = cdist(labeled, pool).min(axis=0)
    else:
        mind = np.full(n, np.inf)
    chosen = []
    for _ in range(b):
        j = int(np.argmax(mind))
        chosen.append(j)
        mind = np.minimum(mind, np.sqrt(((pool - pool[j]) ** 2).sum(axis=1)))
        mind[j] = -1.0  # never re-pick, even when all remaining distances are 0
    return chosen


def covering_radius(centers, points):
    """Max over ``points`` of the distance to the nearest center."""
    centers = np.asarray(centers, dtype=np.float64)
    if len(centers) == 0:
        return np.inf
    return float(cdist(points, centers).min(axis=1).max())


def badge_embeddings(model, x):
    """Gradient of CE w.r.t. the final-layer weights at the predicted label, flattened.

    Entry ``[n, i * C + c]`` is ``latent[n, i] * (p[n, c] - onehot[n, c])``,
    matching the layout of ``Wout`` (latent_dim x C).
    """
    tr = nnet.forward(model, x, modules=False)
    p = objective.softmax(tr.logits)
    resid = p.copy()
    resid[np.arange(len(p)), np.argmax(p, axis=1)] -= 1.0
    return (tr.latent[:, :, None] * resid[:, None, :]).reshape(len(p), -1)


def kmeans_pp_seeds(X, b, rng):
    """k-means++ seeding: first pick uniform, later picks proportional to D^2."""
    n = len(X)
    b = min(b, n)
    first = int(rng.integers(n))
    chosen = [first]
    d2 = ((X - X[first]) ** 2).sum(axis=1)
    taken = np.zeros(n, dtype=bool)
    taken[first] = True
    while len(chosen) < b:
        w = np.where(taken, 0.0, d2)
        total = w.sum()
        if total > 0:
            j = int(rng.choice(n, p=w / total))
        else:
            j = int(rng.choice(np.flatnonzero(~taken)))
        chosen.append(j)
        taken[j] = True
        d2 = np.minimum(d2, ((X - X[j]) ** 2).sum(axis=1))
    return chosen


def badge_select(model, x, b, rng):
    return kmeans_pp_seeds(badge_embeddings(model, x), b, rng)


def _expected_cond_entropy(probs):
    # E_w H(y_n | w) for every pool point, shape (N,)
    return entropy(probs).mean(axis=0)


def batchbald_from_samples(probs, b, n_cfg_samples=10000, rng=None, exact_limit=4096):
    """Greedy BatchBALD over shared MC samples ``probs`` of shape (T, N, C).

    At each step the candidate maximising the joint mutual information
    ``H(y_1..y_k) - sum_i E_w H(y_i | w)`` is added.  The joint entropy is
    computed exactly over all ``C^(k-1)`` label configurations of the current
    batch while that count stays within ``exact_limit``; beyond it,
    ``n_cfg_samples`` configurations are sampled from the current batch's
    predictive distribution.  The first step is plain BALD.
    """
    probs = np.asarray(probs, dtype=np.float64)
    T, N, C = probs.shape
    if T < 2:
        raise ValueError(f"BatchBALD needs T >= 2, got {T}")
    if rng is None:
        rng = np.random.default_rng(0)
    b = min(b, N)
    cond = _expected_cond_entropy(probs)
    bald = bald_from_samples(probs)
    chosen = [int(np.argmax(bald))]
    available = np.ones(N, dtype=bool)
    available[chosen[0]] = False
    # log P(config | w_t) for configurations of the current batch, shape (M, T)
    log_cfg = np.log(np.maximum(probs[:, chosen[0], :].T, 1e-300))  # (C, T)
    exact = True
    while len(chosen) < b:
        W = np.exp(log_cfg - log_cfg.max(axis=1, keepdims=True))
        W /= W.sum(axis=1, keepdims=True)
        if exact:
            pcfg = np.exp(log_cfg).mean(axis=1)  # P(config), sums to 1
        score = _cond_joint_entropy(W, pcfg, probs, available) - cond
        score[~available] = -np.inf
        j = _first_max(score)
        chosen.append(j)
        available[j] = False
        if len(chosen) == b:
            break
        n_cfg = len(log_cfg) * C
        if exact and n_cfg <= exact_limit:
            log_cfg = (log_cfg[:, None, :] + np.log(np.maximum(probs[:, j, :].T, 1e-300))[None]).reshape(n_cfg, T)
        else:
            exact = False
            log_cfg, pcfg = _sample_configs(probs, chosen, n_cfg_samples, rng)
    return chosen


def _first_max(score, tol=1e-12):
    # lowest index among scores equal to the max up to rounding
    top = score.max()
    return int(np.flatnonzero(score >= top - tol * max(1.0, abs(top)))[0])


def _cond_joint_entropy(W, pcfg, probs, available, max_elems=4_000_000):
    """H(y_n | batch labels) for every available candidate ``n``.

    ``W[m, t]`` is the posterior weight of MC sample ``t`` given configuration
    ``m``; ``pcfg[m]`` the configuration's probability (or sample frequency).
    """
    T, N, C = probs.shape
    out = np.full(N, -np.inf)
    cand = np.flatnonzero(available)
    step = max(1, max_elems // (len(W) * C))
    for start in range(0, len(cand), step):
        idx = cand[start:start + step]
        flat = probs[:, idx, :].reshape(T, -1)
        q = (W @ flat).reshape(len(W), len(idx), C)  # P(y_n = c | config m)
        out[idx] = pcfg @ entropy(q)
    return out


def _sample_configs(probs, chosen, M, rng):
    """Draw M label configurations of ``chosen`` from the MC mixture.

    Returns ``(log P(cfg | w_t), weight)`` over the distinct configurations;
    weights are sample frequencies (duplicates merged, estimator unchanged).
    """
    T = probs.shape[0]
    ts = rng.integers(T, size=M)
    P = probs[:, chosen, :]  # (T, k, C)
    cum = np.cumsum(P[ts], axis=2)  # (M, k, C)
    u = rng.random((M, len(chosen), 1))
    labels = np.minimum((u > cum).sum(axis=2), P.shape[2] - 1)  # (M, k)
    labels, counts = np.unique(labels, axis=0, return_counts=True)
    logP = np.log(np.maximum(P, 1e-300))  # (T, k, C)
    k_idx = np.arange(len(chosen))
    return logP[:, k_idx[None, :], labels].sum(axis=2).T, counts / M


def batchbald_select(model, x, b, T=10, n_cfg_samples=10000, rng=None):
    probs = nnet.mc_predict(model, x, T, rng)
    return batchbald_from_samples(probs, b, n_cfg_samples, rng)
