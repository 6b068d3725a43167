"""Active-learning cycles for the pool-stream and stream-batch scenarios."""

import math
import time
from dataclasses import dataclass, field, replace

import numpy as np

from tplab import metrics, nnet, query, trainer
from tplab import rng as rngmod
from tplab.query import QueryCfg
from tplab.streamgen import FrameSet, content_hash
from tplab.trainer import TrainCfg

POOL_STREAM = "pool_stream"
STREAM_BATCH = "stream_batch"
SCRATCH = "scratch"
CONTINUOUS = "continuous"


class ScenarioConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ScenarioCfg:
    kind: str = STREAM_BATCH
    strategy: str = "tpl"
    q: float = 0.10
    total_budget_fraction: float = 0.5
    train_cfg: TrainCfg = field(default_factory=TrainCfg)
    query_cfg: QueryCfg = field(default_factory=QueryCfg)
    retrain: str = SCRATCH
    seed: int = 0
    hidden_dims: tuple = (64, 64, 32)
    dropout_p: float = 0.25
    lossmod_mid_dim: int = 32
    timing: str = "wall"  # "off" records 0 seconds so reruns are byte-identical

    def validate(self):
        if self.kind not in (POOL_STREAM, STREAM_BATCH):
            raise ScenarioConfigError(f"kind: unknown scenario {self.kind!r}")
        try:
            query.check_strategy(self.strategy)
        except ValueError as e:
            raise ScenarioConfigError(f"strategy: {e}") from None
        if self.kind == STREAM_BATCH and self.strategy in query.POOL_ONLY:
            raise ScenarioConfigError(
                f"strategy: {self.strategy!r} needs repeated pool access and cannot run in stream_batch"
            )
        if not 0 < self.q <= 1:
            raise ScenarioConfigError(f"q must be in (0, 1], got {self.q}")
        if not self.total_budget_fraction > 0:
            raise ScenarioConfigError(f"total_budget_fraction must be > 0, got {self.total_budget_fraction}")
        if self.retrain not in (SCRATCH, CONTINUOUS):
            raise ScenarioConfigError(f"retrain: unknown mode {self.retrain!r}")
        if self.timing not in ("wall", "off"):
            raise ScenarioConfigError(f"timing must be 'wall' or 'off', got {self.timing!r}")
        return self

    def arch(self, bundle):
        return nnet.ArchSpec(
            input_dim=bundle.meta.feature_dim,
            n_classes=bundle.meta.n_classes,
            hidden_dims=tuple(self.hidden_dims),
            dropout_p=self.dropout_p,
            lossmod_mid_dim=self.lossmod_mid_dim,
        )

    def effective_train_cfg(self):
        """Per-run training config: fixed derived seed; loss module off for other strategies."""
        tc = replace(self.train_cfg, seed=rngmod.child_seed(self.seed, rngmod.TRAIN))
        if self.strategy not in query.LOSS_MODULE_STRATEGIES:
            tc = replace(tc, loss_cfg=replace(tc.loss_cfg, eta=0.0))
        return tc


@dataclass
class CycleRecord:
    cycle: int
    drive_id: str
    n_selected: int
    labeled_count: int
    labeled_fraction: float
    test_accuracy: float
    selection_seconds: float
    train_epochs: int
    # latent diversity of the selected batch (None when fewer than 2 frames)
    mean_pairwise_dist: float | None = None
    covering_radius: float | None = None


@dataclass
class RunResult:
    records: list
    selected: list = field(default_factory=list)  # per cycle: refs (drive id, index)
    models: list = field(default_factory=list)  # per cycle: trained model
    stream_accesses: list = field(default_factory=list)  # per cycle: access counter array

    def __iter__(self):
        return iter(self.records)

    def __len__(self):
        return len(self.records)

    def __getitem__(self, i):
        return self.records[i]


def total_budget(bundle, cfg):
    n_init = sum(len(d) for d in bundle.initial_labeled)
    return math.floor(cfg.total_budget_fraction * n_init)


def cycle_budget(drive_len, q, remaining):
    return max(0, min(math.floor(q * drive_len), remaining))


def _fit(labeled, val, cfg, tc, arch, prev):
    warm = prev if cfg.retrain == CONTINUOUS else None
    return trainer.train(labeled.canonical(), val, tc, arch=arch, model=warm)


def _diversity(model, frames):
    if len(frames) < 2:
        return None, None
    d = metrics.batch_diversity(nnet.latent(model, frames.x))
    return d["mean_pairwise_dist"], d["covering_radius"]


def run(bundle, cfg, keep_models=False):
    """Run the scenario named by ``cfg.kind``."""
    cfg.validate()
    if cfg.kind == STREAM_BATCH:
        return run_stream_batch(bundle, cfg, keep_models)
    return run_pool_stream(bundle, cfg, keep_models)


def _setup(bundle, cfg):
    labeled = FrameSet.from_drives(bundle.initial_labeled)
    val = FrameSet.from_drives(bundle.val)
    test = FrameSet.from_drives(bundle.test)
    denom = len(labeled) + sum(len(d) for d in bundle.unlabeled)
    return labeled, val, test, denom


def _cycles(bundle, cfg, keep_models, select):
    """Shared cycle loop; ``select(i, drive, model, b, rng, bw)`` returns (FrameSet, accesses)."""
    arch = cfg.arch(bundle)
    tc = cfg.effective_train_cfg()
    labeled, val, test, denom = _setup(bundle, cfg)
    remaining = total_budget(bundle, cfg)
    seen = set()

    model, hist = _fit(labeled, val, cfg, tc, arch, None)
    out = RunResult([])

    def record(i, drive_id, chosen, secs):
        div = _diversity(prev_model, chosen) if chosen is not None else (None, None)
        out.records.append(CycleRecord(
            cycle=i, drive_id=drive_id, n_selected=0 if chosen is None else len(chosen),
            labeled_count=len(labeled), labeled_fraction=len(labeled) / denom,
            test_accuracy=trainer.evaluate(model, test),
            selection_seconds=secs if cfg.timing == "wall" else 0.0,
            train_epochs=hist.stopped_epoch,
            mean_pairwise_dist=div[0], covering_radius=div[1],
        ))
        out.selected.append([] if chosen is None else chosen.refs)
        if keep_models:
            out.models.append(model)

    prev_model = model
    record(0, "", None, 0.0)
    for i, drive in enumerate(bundle.unlabeled, start=1):
        b = cycle_budget(len(drive), cfg.q, remaining)
        prev_model = model
        rng = rngmod.stream(cfg.seed, rngmod.QUERY, i)
        bw = 1.0
        if cfg.strategy == "aled":
            bw = query.resolve_bandwidth(cfg.query_cfg, model, FrameSet.from_drives(bundle.initial_labeled).x)
        start = time.perf_counter()
        chosen, accesses = select(i, drive, model, b, rng, bw)
        secs = time.perf_counter() - start
        out.stream_accesses.append(accesses)
        for ref in chosen.refs:
            if ref in seen:
                raise AssertionError(f"frame {ref} selected twice")
            seen.add(ref)
        remaining -= len(chosen)
        labeled = labeled.concat(chosen)
        model, hist = _fit(labeled, val, cfg, tc, arch, model)
        record(i, drive.id, chosen, secs)
    return out


def run_stream_batch(bundle, cfg, keep_models=False):
    """Each unlabeled drive is streamed once; up to ``b_i`` frames are kept."""
    cfg.validate()
    if cfg.kind != STREAM_BATCH:
        cfg = replace(cfg, kind=STREAM_BATCH).validate()

    def select(i, drive, model, b, rng, bw):
        if b == 0:
            return FrameSet.empty(drive.x.shape[1]), np.zeros(len(drive), np.int64)
        idx, fs = query.select_stream(cfg.strategy, model, drive, b, cfg.query_cfg, rng, bw)
        return FrameSet.from_drives([drive]).take(idx), fs.accesses

    return _cycles(bundle, cfg, keep_models, select)


def run_pool_stream(bundle, cfg, keep_models=False):
    """Drives accumulate in an unlabeled pool that selection may rescan freely."""
    cfg.validate()
    if cfg.kind != POOL_STREAM:
        cfg = replace(cfg, kind=POOL_STREAM).validate()
    state = {"pool": FrameSet.empty(bundle.meta.feature_dim),
             "labeled": FrameSet.from_drives(bundle.initial_labeled)}

    def select(i, drive, model, b, rng, bw):
        pool = state["pool"].concat(FrameSet.from_drives([drive]))
        idx = query.select_pool(cfg.strategy, model, pool, state["labeled"], b, cfg.query_cfg, rng, bw) if b else []
        chosen = pool.take(idx)
        keep = np.ones(len(pool), dtype=bool)
        keep[np.asarray(idx, dtype=np.int64)] = False
        state["pool"] = pool.take(np.flatnonzero(keep))
        state["labeled"] = state["labeled"].concat(chosen)
        return chosen, None

    result = _cycles(bundle, cfg, keep_models, select)
    result.pool_size = len(state["pool"])
    return result


_REF_CACHE = {}


def run_full_reference(bundle, train_cfg, arch=None):
    """Test accuracy of a model trained on the initial and all unlabeled drives.

    Results are cached per (bundle content, training config, architecture).
    """
    if arch is None:
        arch = nnet.ArchSpec(bundle.meta.feature_dim, bundle.meta.n_classes)
    key = (content_hash(bundle), repr(train_cfg), repr(arch))
    if key not in _REF_CACHE:
        full = FrameSet.from_drives([*bundle.initial_labeled, *bundle.unlabeled]).canonical()
        val = FrameSet.from_drives(bundle.val)
        model, _ = trainer.train(full, val, train_cfg, arch=arch)
        _REF_CACHE[key] = trainer.evaluate(model, FrameSet.from_drives(bundle.test))
    return _REF_CACHE[key]


def reference_accuracy(bundle, cfg):
    """Full-data reference for a scenario config (same architecture and training seed)."""
    tc = replace(cfg.train_cfg, seed=rngmod.child_seed(cfg.seed, rngmod.TRAIN))
    tc = replace(tc, loss_cfg=replace(tc.loss_cfg, eta=0.0))
    return run_full_reference(bundle, tc, cfg.arch(bundle))
