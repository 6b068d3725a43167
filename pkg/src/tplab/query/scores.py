"""Per-frame acquisition scores and their single-pass streaming wrappers."""

from itertools import islice

import numpy as np
from scipy.special import entr

from tplab import nnet

ABS_DERIVATIVE = "abs_derivative"
POSITIVE_SLOPE = "positive_slope"


class FrameStream:
    """Iterate a drive once, counting how often frame features are handed out.

    Yields ``(k, t_k, x_k)``.  ``accesses[k]`` records how many times frame
    ``k`` was read, which lets tests assert the single-pass contract.
    """

    def __init__(self, drive):
        self.t = drive.t
        self.x = drive.x
        self.accesses = np.zeros(len(drive.t), dtype=np.int64)

    def __len__(self):
        return len(self.t)

    def __iter__(self):
        for k in range(len(self.t)):
            self.accesses[k] += 1
            yield k, self.t[k], self.x[k]


def _chunks(frames, size):
    it = iter(frames)
    while True:
        block = list(islice(it, size))
        if not block:
            return
        ks = np.array([b[0] for b in block])
        ts = np.array([b[1] for b in block], dtype=np.float64)
        xs = np.stack([b[2] for b in block])
        yield ks, ts, xs


def entropy(p, axis=-1):
    """Shannon entropy in nats along ``axis`` (0 log 0 = 0)."""
    return np.maximum(entr(np.asarray(p, dtype=np.float64)).sum(axis=axis), 0.0)


def entropy_from_samples(probs):
    """Predictive entropy from MC samples of shape (T, n, C)."""
    return entropy(probs.mean(axis=0))


def bald_from_samples(probs):
    """Mutual information H(mean) - mean(H), clamped at 0.

    Frames whose samples are all identical score exactly 0.
    """
    mi = np.maximum(entropy(probs.mean(axis=0)) - entropy(probs).mean(axis=0), 0.0)
    same = np.all(probs == probs[:1], axis=(0, 2))
    return np.where(same, 0.0, mi)


def tpl_from_losses(sigma, t, mode=ABS_DERIVATIVE):
    """Backward-difference time derivative of a predicted-loss sequence.

    The first frame copies the second frame's score; a single frame scores 0.
    """
    sigma = np.asarray(sigma, dtype=np.float64)
    t = np.asarray(t, dtype=np.float64)
    return _tpl(np.diff(sigma), t, mode)


def _tpl(dsigma, t, mode):
    if len(t) == 1:
        return np.zeros(1)
    dt = np.diff(t)
    if np.any(dt <= 0):
        k = int(np.argmax(dt <= 0)) + 1
        raise ValueError(f"timestamps not strictly increasing at frame {k}")
    rate = dsigma / dt
    if mode == ABS_DERIVATIVE:
        s = np.abs(rate)
    elif mode == POSITIVE_SLOPE:
        s = np.maximum(rate, 0.0)
    else:
        raise ValueError(f"unknown tpl_mode {mode!r}")
    return np.concatenate([s[:1], s])


def _module_delta(model, G):
    # differences of the pre-bias module output; bit-exactly independent of v0
    return np.diff(G, axis=0) @ model.params["v"]


def score_loss_learning(model, x):
    return nnet.forward(model, x).predicted_loss


def score_tpl(model, drive, mode=ABS_DERIVATIVE):
    G = nnet.forward(model, drive.x).module_features
    return _tpl(_module_delta(model, G), drive.t, mode)


def score_entropy(model, x, T=10, rng=None):
    return entropy_from_samples(nnet.mc_predict(model, x, T, rng))


def score_bald(model, x, T=10, rng=None):
    if T < 2:
        raise ValueError(f"BALD needs T >= 2, got {T}")
    return bald_from_samples(nnet.mc_predict(model, x, T, rng))


# ------------------------------------------------------------ streaming scorers


class StreamScorer:
    """Consumes ``(k, t, x)`` frames once and yields ``(k, score)`` in order.

    Frames are scored in small buffered chunks so the network runs
    vectorised; every frame is still read exactly once.
    """

    chunk = 256

    def scores(self, frames):
        for ks, ts, xs in _chunks(frames, self.chunk):
            yield from zip(ks.tolist(), self.score_chunk(ts, xs).tolist())

    def score_chunk(self, ts, xs):
        raise NotImplementedError


class LossLearningScorer(StreamScorer):
    def __init__(self, model):
        self.model = model

    def score_chunk(self, ts, xs):
        return score_loss_learning(self.model, xs)


class EntropyScorer(StreamScorer):
    def __init__(self, model, T=10, rng=None):
        self.model, self.T, self.rng = model, T, rng

    def score_chunk(self, ts, xs):
        return score_entropy(self.model, xs, self.T, self.rng)


class BALDScorer(EntropyScorer):
    def score_chunk(self, ts, xs):
        return score_bald(self.model, xs, self.T, self.rng)


class RandomScorer(StreamScorer):
    """Uniform random keys: top-b over them is a uniform sample without replacement."""

    def __init__(self, rng):
        self.rng = rng

    def score_chunk(self, ts, xs):
        return self.rng.random(len(ts))


class TPLScorer(StreamScorer):
    """Streaming TPL: keeps only the previous frame's module output and time.

    The first frame's score is emitted once the second frame arrives.
    """

    def __init__(self, model, mode=ABS_DERIVATIVE):
        self.model, self.mode = model, mode

    def scores(self, frames):
        prev_G = prev_t = None
        first = None  # index of the frame still waiting for its score
        for ks, ts, xs in _chunks(frames, self.chunk):
            G = nnet.forward(self.model, xs).module_features
            if prev_G is not None:
                G_all = np.vstack([prev_G, G])
                t_all = np.concatenate([[prev_t], ts])
            else:
                G_all, t_all = G, ts
            if len(t_all) < 2:
                first = int(ks[0])
                prev_G, prev_t = G[-1:], ts[-1]
                continue
            s = _tpl(_module_delta(self.model, G_all), t_all, self.mode)
            if prev_G is not None:
                s = s[1:]  # drop the carried-over frame
            if first is not None:
                yield first, float(s[0])
                first = None
            yield from zip(ks.tolist(), s.tolist())
            prev_G, prev_t = G[-1:], ts[-1]
        if first is not None:
            yield first, 0.0
