"""Independent reference computations used by unit and acceptance tests."""

import itertools
import math

import numpy as np

from tplab import nnet, objective


# ------------------------------------------------------------ gradients


def random_grad_instance(seed):
    """Small random model and batch whose loss is smooth in a neighbourhood.

    Instances with ReLU pre-activations, hinge arguments or L1 thresholds
    within ``margin`` of a kink are resampled so central differences with
    step 1e-4 never straddle a non-differentiable point.
    """
    g = np.random.default_rng(seed)
    margin = 2e-3
    for _ in range(200):
        d = int(g.integers(2, 9))
        C = int(g.integers(2, 6))
        hidden = tuple(int(h) for h in g.integers(2, 9, size=int(g.integers(1, 4))))
        n_blocks = len(hidden)
        attach = tuple(sorted(g.choice(n_blocks, size=int(g.integers(1, n_blocks + 1)), replace=False).tolist()))
        arch = nnet.ArchSpec(d, C, hidden, float(g.uniform(0, 0.5)), attach, int(g.integers(1, 6)))
        model = nnet.init_model(arch, int(g.integers(2**31)))
        for k, v in model.params.items():
            v += g.normal(0, 0.3, size=v.shape)  # break init symmetry
        B = 2 * int(g.integers(1, 5))
        x = g.normal(0, 1.5, size=(B, d))
        y = g.integers(C, size=B)
        cfg = objective.LossCfg(
            xi=float(g.uniform(0, 1)), zeta=float(g.uniform(0, 1)), lam=float(g.uniform(0, 2)),
            eta=float(g.uniform(0.1, 2)), l1_mode=str(g.choice(["hard_threshold", "hinge"])),
            ranking_sign_mode=str(g.choice(["yoo_convention", "as_printed"])),
        )
        masks = [(g.random((B, h)) > arch.dropout_p) / (1 - arch.dropout_p) for h in hidden]
        tr = nnet.forward(model, x, train=True, masks=masks)
        pre = [tr.inputs[i] @ model.params[f"W{i}"] + model.params[f"b{i}"] for i in range(n_blocks)]
        pre += [tr.block_activations[a] @ model.params[f"U{a}"] + model.params[f"c{a}"] for a in attach]
        l = objective.cross_entropy(tr.logits, y)
        lhat = tr.predicted_loss
        s = objective.sign_star(l[0::2] - l[1::2])
        sgn = -s if cfg.ranking_sign_mode == "yoo_convention" else s
        hinge_arg = sgn * (lhat[0::2] - lhat[1::2]) + cfg.xi
        near = (
            min(np.abs(p).min() for p in pre) < margin
            or np.abs(hinge_arg).min() < margin
            or np.abs(np.abs(l - lhat) - cfg.zeta).min() < margin
            or np.abs(l[0::2] - l[1::2]).min() < margin
        )
        if not near:
            return model, x, y, cfg, masks, l
    raise RuntimeError("could not draw a kink-free instance")


def fd_grads(model, x, y, cfg, masks, targets, step=1e-4):
    """Central finite differences of the combined loss, CE targets held fixed."""
    out = {}
    for name, w in model.params.items():
        gw = np.zeros_like(w)
        it = np.nditer(w, flags=["multi_index"])
        for _ in it:
            i = it.multi_index
            old = w[i]
            w[i] = old + step
            fp = nnet.loss_and_grads(model, x, y, cfg, masks=masks, target_losses=targets)[0]
            w[i] = old - step
            fm = nnet.loss_and_grads(model, x, y, cfg, masks=masks, target_losses=targets)[0]
            w[i] = old
            gw[i] = (fp - fm) / (2 * step)
        out[name] = gw
    return out


def rel_err(a, n):
    scale = max(np.abs(a).max(), np.abs(n).max())
    return 0.0 if scale == 0 else float(np.abs(a - n).max() / scale)


# ------------------------------------------------------------ subset search


def kcenter_opt_radius(labeled, pool, b):
    """Smallest achievable max-distance from pool points to labeled ∪ chosen, |chosen| = b."""
    best = math.inf
    for S in itertools.combinations(range(len(pool)), min(b, len(pool))):
        centers = np.vstack([labeled, pool[list(S)]]) if len(labeled) else pool[list(S)]
        r = np.sqrt(((pool[:, None, :] - centers[None]) ** 2).sum(-1)).min(axis=1).max()
        best = min(best, r)
    return best


def submodular_opt(Z, b, f):
    best = 0.0
    for k in range(1, b + 1):
        for S in itertools.combinations(range(len(Z)), k):
            best = max(best, f(Z[list(S)]))
    return best


def logdet_objective(Z, h):
    """Direct 0.5 * log det(I + K) via slogdet (independent of the Cholesky path)."""
    if len(Z) == 0:
        return 0.0
    d2 = ((Z[:, None, :] - Z[None]) ** 2).sum(-1)
    K = np.exp(-d2 / (2 * h * h))
    return 0.5 * np.linalg.slogdet(np.eye(len(Z)) + K)[1]


# ------------------------------------------------------------ batch MI


def joint_mi(probs, idx):
    """Exact I(y_idx; w) from MC samples (T, N, C) by full enumeration."""
    T, _, C = probs.shape
    idx = list(idx)
    H_joint = 0.0
    for cfg in itertools.product(range(C), repeat=len(idx)):
        p_t = np.prod([probs[:, n, c] for n, c in zip(idx, cfg)], axis=0)
        p = p_t.mean()
        if p > 0:
            H_joint -= p * math.log(p)
    cond = 0.0
    for n in idx:
        q = probs[:, n, :]
        cond += float(-(np.where(q > 0, q * np.log(np.where(q > 0, q, 1)), 0)).sum(axis=1).mean())
    return H_joint - cond
