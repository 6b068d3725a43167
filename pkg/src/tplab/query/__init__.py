"""Acquisition strategies and their stream / pool dispatch."""

from dataclasses import dataclass

import numpy as np

from tplab import nnet
from tplab.query import pool, scores, stream
from tplab.query.pool import (
    badge_embeddings,
    badge_select,
    batchbald_from_samples,
    batchbald_select,
    coreset_kcenter,
    covering_radius,
    kmeans_pp_seeds,
    random_select,
)
from tplab.query.scores import (
    ABS_DERIVATIVE,
    POSITIVE_SLOPE,
    BALDScorer,
    EntropyScorer,
    FrameStream,
    LossLearningScorer,
    RandomScorer,
    TPLScorer,
    bald_from_samples,
    entropy,
    entropy_from_samples,
    score_bald,
    score_entropy,
    score_loss_learning,
    score_tpl,
    tpl_from_losses,
)
from tplab.query.stream import (
    median_bandwidth,
    offline_top_b,
    sieve_streaming_pp,
    stream_select_top_b,
    submodular_f,
)

STREAM_STRATEGIES = ("random", "losslearn", "tpl", "entropy", "bald", "aled")
POOL_ONLY = ("coreset", "badge", "batchbald")
STRATEGIES = STREAM_STRATEGIES + POOL_ONLY
LOSS_MODULE_STRATEGIES = ("losslearn", "tpl")


@dataclass(frozen=True)
class QueryCfg:
    T: int = 10
    epsilon: float = 0.1
    kernel_bandwidth: float | str = "median_heuristic"
    tpl_mode: str = ABS_DERIVATIVE
    batchbald_samples: int = 10000
    seed: int = 0

    def __post_init__(self):
        if self.T < 1:
            raise ValueError(f"T must be >= 1, got {self.T}")
        if not 0 < self.epsilon < 1:
            raise ValueError(f"epsilon must be in (0, 1), got {self.epsilon}")
        if self.tpl_mode not in (ABS_DERIVATIVE, POSITIVE_SLOPE):
            raise ValueError(f"unknown tpl_mode {self.tpl_mode!r}")
        if isinstance(self.kernel_bandwidth, str):
            if self.kernel_bandwidth != "median_heuristic":
                raise ValueError(f"unknown kernel_bandwidth {self.kernel_bandwidth!r}")
        elif not self.kernel_bandwidth > 0:
            raise ValueError("fixed kernel_bandwidth must be > 0")


def check_strategy(name):
    if name not in STRATEGIES:
        raise ValueError(f"unknown strategy {name!r}; choose from {', '.join(STRATEGIES)}")


def resolve_bandwidth(qcfg, model, reference_x):
    if qcfg.kernel_bandwidth == "median_heuristic":
        return median_bandwidth(nnet.latent(model, reference_x))
    return float(qcfg.kernel_bandwidth)


def _latent_stream(model, frames, chunk=256):
    for ks, _, xs in scores._chunks(frames, chunk):
        yield from zip(ks.tolist(), nnet.latent(model, xs))


def select_stream(strategy, model, drive, b, qcfg, rng, bandwidth=1.0):
    """Single pass over ``drive``; returns (selected frame indices, FrameStream)."""
    fs = FrameStream(drive)
    if strategy == "aled":
        chosen, _ = stream.sieve_streaming_pp(_latent_stream(model, fs), b, qcfg.epsilon, bandwidth)
        return sorted(chosen), fs
    if strategy == "random":
        scorer = RandomScorer(rng)
    elif strategy == "losslearn":
        scorer = LossLearningScorer(model)
    elif strategy == "tpl":
        scorer = TPLScorer(model, qcfg.tpl_mode)
    elif strategy == "entropy":
        scorer = EntropyScorer(model, qcfg.T, rng)
    elif strategy == "bald":
        scorer = BALDScorer(model, max(qcfg.T, 2), rng)
    else:
        raise ValueError(f"strategy {strategy!r} cannot run on a single-pass stream")
    return stream.stream_select_top_b(scorer.scores(fs), b), fs


def _pool_tpl(model, frames, mode):
    """TPL over a pool: each drive's remaining frames in time order."""
    out = np.zeros(len(frames))
    G = nnet.forward(model, frames.x).module_features
    for d in dict.fromkeys(frames.drive.tolist()):
        idx = np.flatnonzero(frames.drive == d)
        idx = idx[np.argsort(frames.t[idx], kind="stable")]
        out[idx] = scores._tpl(scores._module_delta(model, G[idx]), frames.t[idx], mode)
    return out


def select_pool(strategy, model, frames, labeled, b, qcfg, rng, bandwidth=1.0):
    """Select up to ``b`` indices from the pool ``frames`` (may scan it repeatedly)."""
    n = len(frames)
    if n == 0:
        return []
    b = min(b, n)
    if strategy == "random":
        return random_select(n, b, rng)
    if strategy == "losslearn":
        return offline_top_b(score_loss_learning(model, frames.x).tolist(), b)
    if strategy == "tpl":
        return offline_top_b(_pool_tpl(model, frames, qcfg.tpl_mode).tolist(), b)
    if strategy == "entropy":
        return offline_top_b(score_entropy(model, frames.x, qcfg.T, rng).tolist(), b)
    if strategy == "bald":
        return offline_top_b(score_bald(model, frames.x, max(qcfg.T, 2), rng).tolist(), b)
    if strategy == "aled":
        latents = nnet.latent(model, frames.x)
        chosen, _ = sieve_streaming_pp(enumerate(latents), b, qcfg.epsilon, bandwidth)
        return sorted(chosen)
    if strategy == "coreset":
        lab = nnet.latent(model, labeled.x) if len(labeled) else np.zeros((0, model.arch.hidden_dims[-1]))
        return sorted(coreset_kcenter(lab, nnet.latent(model, frames.x), b))
    if strategy == "badge":
        return sorted(badge_select(model, frames.x, b, rng))
    if strategy == "batchbald":
        return sorted(batchbald_select(model, frames.x, b, max(qcfg.T, 2), qcfg.batchbald_samples, rng))
    raise ValueError(f"unknown strategy {strategy!r}")
