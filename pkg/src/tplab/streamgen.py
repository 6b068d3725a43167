"""Synthetic, temporally coherent drive streams.

A drive is a smooth path through feature space: it dwells at a sequence of
waypoints placed inside the Voronoi cells of the class centers and travels
between them at constant speed, sampled at ``rate_hz`` with small timestamp
jitter.  Ornstein-Uhlenbeck noise is added on top of the path.  The label of
a frame is the index of its nearest class center.

Bundles mirror the recorded-session split: one initial labeled drive, an
ordered list of unlabeled drives (one per AL cycle), one validation and one
test drive.  Recordings are never split across partitions.
"""

import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from tplab import rng as rngmod

SCHEMA_VERSION = 1


class BundleFormatError(ValueError):
    """A drive or manifest file could not be parsed."""


class SchemaVersionError(ValueError):
    """The manifest was written with a different schema version."""


class DegenerateStreamError(ValueError):
    """Noise destroys temporal coherence (labels flip too often)."""

    def __init__(self, message, flip_rate):
        super().__init__(message)
        self.flip_rate = flip_rate


@dataclass(frozen=True)
class GenConfig:
    n_classes: int = 4
    feature_dim: int = 8
    rate_hz: float = 10.0
    jitter: float = 0.05  # max |dt - 1/rate| as a fraction of 1/rate
    class_centers: tuple | None = None
    center_scale: float = 2.0
    waypoint_count: int = 10
    waypoint_spread: float = 1.0
    speed: float = 0.6  # feature units per second while travelling
    noise_sigma: float = 0.15
    ou_theta: float = 1.0
    drive_length_s: float = 60.0
    n_unlabeled_drives: int = 4
    full_coverage: bool = True
    max_flip_rate: float = 1.0  # label flips per second
    seed: int = 0

    def __post_init__(self):
        if self.class_centers is not None:
            centers = tuple(tuple(float(v) for v in row) for row in self.class_centers)
            object.__setattr__(self, "class_centers", centers)

    def validate(self):
        if self.n_classes < 2:
            raise ValueError(f"n_classes must be >= 2, got {self.n_classes}")
        if self.feature_dim < 2:
            raise ValueError(f"feature_dim must be >= 2, got {self.feature_dim}")
        if not self.rate_hz > 0:
            raise ValueError(f"rate_hz must be > 0, got {self.rate_hz}")
        if not 0 <= self.jitter < 1:
            raise ValueError(f"jitter must be in [0, 1), got {self.jitter}")
        if not self.noise_sigma >= 0:
            raise ValueError(f"noise_sigma must be >= 0, got {self.noise_sigma}")
        if not self.ou_theta > 0:
            raise ValueError(f"ou_theta must be > 0, got {self.ou_theta}")
        if not self.drive_length_s > 0:
            raise ValueError(f"drive_length_s must be > 0, got {self.drive_length_s}")
        if not self.speed > 0:
            raise ValueError(f"speed must be > 0, got {self.speed}")
        if self.waypoint_count < 1:
            raise ValueError(f"waypoint_count must be >= 1, got {self.waypoint_count}")
        if self.full_coverage and self.waypoint_count < self.n_classes:
            raise ValueError(
                f"waypoint_count must be >= n_classes ({self.n_classes}) "
                f"for full coverage, got {self.waypoint_count}"
            )
        if self.n_unlabeled_drives < 0:
            raise ValueError(f"n_unlabeled_drives must be >= 0, got {self.n_unlabeled_drives}")
        if self.class_centers is not None:
            c = np.asarray(self.class_centers)
            if c.shape != (self.n_classes, self.feature_dim):
                raise ValueError(
                    f"class_centers must have shape ({self.n_classes}, {self.feature_dim}), "
                    f"got {c.shape}"
                )
        return self

    def to_dict(self):
        d = dataclasses.asdict(self)
        if self.class_centers is not None:
            d["class_centers"] = [list(row) for row in self.class_centers]
        return d

    @classmethod
    def from_dict(cls, d):
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown GenConfig field(s): {', '.join(sorted(unknown))}")
        return cls(**d)

    def centers(self):
        if self.class_centers is not None:
            return np.asarray(self.class_centers, dtype=np.float64)
        g = rngmod.stream(self.seed, rngmod.CENTERS)
        raw = g.standard_normal((self.n_classes, self.feature_dim))
        return self.center_scale * raw / np.linalg.norm(raw, axis=1, keepdims=True)


@dataclass(frozen=True)
class Frame:
    t: float
    features: np.ndarray
    label: int


@dataclass(eq=False)
class Drive:
    """A recording: timestamps ``t`` (n,), features ``x`` (n, d), labels ``y`` (n,)."""

    id: str
    t: np.ndarray
    x: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        self.t = np.asarray(self.t, dtype=np.float64)
        self.x = np.asarray(self.x, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.int64)

    def __len__(self):
        return len(self.t)

    def __getitem__(self, k):
        return Frame(float(self.t[k]), self.x[k], int(self.y[k]))

    @property
    def frames(self):
        return [self[k] for k in range(len(self))]

    def __eq__(self, other):
        if not isinstance(other, Drive):
            return NotImplemented
        return (
            self.id == other.id
            and np.array_equal(self.t, other.t)
            and np.array_equal(self.x, other.x)
            and np.array_equal(self.y, other.y)
        )


@dataclass(eq=False)
class FrameSet:
    """Flat collection of frames from one or more drives, with provenance."""

    x: np.ndarray
    y: np.ndarray
    t: np.ndarray
    drive: np.ndarray  # drive id per frame (object array of str)
    index: np.ndarray  # frame index within its drive

    @classmethod
    def from_drives(cls, drives):
        drives = list(drives)
        if not drives:
            return cls.empty()
        return cls(
            x=np.concatenate([d.x for d in drives]),
            y=np.concatenate([d.y for d in drives]),
            t=np.concatenate([d.t for d in drives]),
            drive=np.concatenate([np.full(len(d), d.id, dtype=object) for d in drives]),
            index=np.concatenate([np.arange(len(d)) for d in drives]),
        )

    @classmethod
    def empty(cls, dim=0):
        return cls(
            np.zeros((0, dim)), np.zeros(0, np.int64), np.zeros(0),
            np.zeros(0, dtype=object), np.zeros(0, np.int64),
        )

    def __len__(self):
        return len(self.y)

    def take(self, idx):
        idx = np.asarray(idx, dtype=np.int64)
        return FrameSet(self.x[idx], self.y[idx], self.t[idx], self.drive[idx], self.index[idx])

    def concat(self, other):
        if len(self) == 0:
            return other
        if len(other) == 0:
            return self
        return FrameSet(
            np.concatenate([self.x, other.x]),
            np.concatenate([self.y, other.y]),
            np.concatenate([self.t, other.t]),
            np.concatenate([self.drive, other.drive]),
            np.concatenate([self.index, other.index]),
        )

    def canonical(self):
        """Same frames sorted by (drive id, index); order-independent identity."""
        order = sorted(range(len(self)), key=lambda k: (self.drive[k], int(self.index[k])))
        return self.take(order)

    @property
    def refs(self):
        return [(str(d), int(i)) for d, i in zip(self.drive, self.index)]


@dataclass
class DatasetBundle:
    initial_labeled: list
    unlabeled: list
    val: list
    test: list
    meta: GenConfig = field(default_factory=GenConfig)

    def all_drives(self):
        return [*self.initial_labeled, *self.unlabeled, *self.val, *self.test]

    def splits(self):
        return {
            "initial": [d.id for d in self.initial_labeled],
            "unlabeled": [d.id for d in self.unlabeled],
            "val": [d.id for d in self.val],
            "test": [d.id for d in self.test],
        }

    def __eq__(self, other):
        if not isinstance(other, DatasetBundle):
            return NotImplemented
        return (
            self.meta == other.meta
            and self.splits() == other.splits()
            and all(a == b for a, b in zip(self.all_drives(), other.all_drives()))
        )


def nearest_center(x, centers):
    d2 = ((x[:, None, :] - centers[None, :, :]) ** 2).sum(axis=-1)
    return np.argmin(d2, axis=1)


def _waypoints(cfg, centers, g):
    C = cfg.n_classes
    if cfg.full_coverage:
        classes = list(g.permutation(C))
    else:
        classes = [int(g.integers(C))]
    while len(classes) < cfg.waypoint_count:
        k = int(g.integers(C - 1))
        classes.append(k if k < classes[-1] else k + 1)  # no immediate repeat
    points = []
    for k in classes:
        offset = g.standard_normal(cfg.feature_dim) * cfg.waypoint_spread / np.sqrt(cfg.feature_dim)
        p = centers[k] + offset
        for _ in range(40):
            if nearest_center(p[None], centers)[0] == k:
                break
            offset = offset / 2
            p = centers[k] + offset
        else:
            p = centers[k].copy()
        points.append(p)
    return np.asarray(points)


def _timestamps(cfg, g):
    period = 1.0 / cfg.rate_hz
    n_max = int(np.ceil(cfg.drive_length_s * cfg.rate_hz / (1 - cfg.jitter))) + 2
    dt = period * (1 + g.uniform(-cfg.jitter, cfg.jitter, size=n_max))
    t = np.concatenate([[0.0], np.cumsum(dt)])
    return t[t < cfg.drive_length_s]


def _path(cfg, waypoints, t, g):
    """Piecewise-linear dwell/travel path evaluated at times ``t``."""
    if len(waypoints) == 1:
        return np.repeat(waypoints[:1], len(t), axis=0)
    legs = np.linalg.norm(np.diff(waypoints, axis=0), axis=1)
    travel = legs / cfg.speed
    slack = cfg.drive_length_s - travel.sum()
    if slack <= 0:
        raise ValueError(
            f"drive_length_s={cfg.drive_length_s} too short: travelling between "
            f"{len(waypoints)} waypoints at speed {cfg.speed} takes {travel.sum():.3f}s"
        )
    dwell = g.dirichlet(np.ones(len(waypoints))) * slack
    knots_t, knots_x = [], []
    now = 0.0
    for i, p in enumerate(waypoints):
        knots_t += [now, now + dwell[i]]
        knots_x += [p, p]
        now += dwell[i]
        if i < len(travel):
            now += travel[i]
    knots_t = np.asarray(knots_t)
    knots_x = np.asarray(knots_x)
    return np.stack([np.interp(t, knots_t, knots_x[:, j]) for j in range(cfg.feature_dim)], axis=1)


def _ou_noise(cfg, t, g):
    n, d = len(t), cfg.feature_dim
    if cfg.noise_sigma == 0:
        return np.zeros((n, d))
    th, sig = cfg.ou_theta, cfg.noise_sigma
    out = np.empty((n, d))
    out[0] = g.standard_normal(d) * sig / np.sqrt(2 * th)
    decay = np.exp(-th * np.diff(t))
    scale = sig * np.sqrt((1 - decay**2) / (2 * th))
    z = g.standard_normal((n - 1, d))
    for k in range(1, n):
        out[k] = out[k - 1] * decay[k - 1] + scale[k - 1] * z[k - 1]
    return out


def flip_rate(drive):
    duration = max(float(drive.t[-1] - drive.t[0]), 1e-12) if len(drive) > 1 else 1.0
    return float(np.count_nonzero(np.diff(drive.y))) / duration


def gen_drive(cfg, drive_seed, drive_id=None):
    """Generate one drive deterministically from ``(cfg, drive_seed)``."""
    cfg.validate()
    centers = cfg.centers()
    g = rngmod.stream(drive_seed)
    waypoints = _waypoints(cfg, centers, g)
    t = _timestamps(cfg, g)
    x = _path(cfg, waypoints, t, g) + _ou_noise(cfg, t, g)
    y = nearest_center(x, centers)
    drive = Drive(drive_id or f"drive_{drive_seed}", t, x, y)
    rate = flip_rate(drive)
    if rate > cfg.max_flip_rate:
        raise DegenerateStreamError(
            f"label flip rate {rate:.3f}/s exceeds {cfg.max_flip_rate}/s "
            f"(noise_sigma={cfg.noise_sigma} too large for temporal coherence)",
            rate,
        )
    return drive


def gen_bundle(cfg):
    """Initial / unlabeled / val / test drives, each from its own derived seed."""
    cfg.validate()
    if cfg.n_unlabeled_drives < 1:
        raise ValueError("n_unlabeled_drives must be >= 1")
    names = (
        ["initial_0"]
        + [f"unlabeled_{i}" for i in range(cfg.n_unlabeled_drives)]
        + ["val_0", "test_0"]
    )
    drives = []
    for k, name in enumerate(names):
        seed = rngmod.child_seed(cfg.seed, rngmod.DRIVE, k)
        try:
            drives.append(gen_drive(cfg, seed, drive_id=name))
        except DegenerateStreamError as e:
            raise DegenerateStreamError(f"drive {name}: {e}", e.flip_rate) from e
        except ValueError as e:
            raise ValueError(f"drive {name}: {e}") from e
    n = cfg.n_unlabeled_drives
    return DatasetBundle(drives[:1], drives[1:1 + n], [drives[1 + n]], [drives[2 + n]], cfg)


# ---------------------------------------------------------------- file format


def _fmt(v):
    return repr(float(v))


def drive_to_jsonl(drive):
    lines = []
    for k in range(len(drive)):
        rec = {"t": _fmt(drive.t[k]), "x": [_fmt(v) for v in drive.x[k]], "y": int(drive.y[k])}
        lines.append(json.dumps(rec, separators=(",", ":")))
    return ("\n".join(lines) + "\n").encode()


def drive_from_jsonl(text, drive_id, source="<drive>"):
    t, x, y = [], [], []
    lines = text.splitlines()
    if not lines:
        raise BundleFormatError(f"{source}: empty drive file")
    for lineno, line in enumerate(lines, 1):
        where = f"{source}:{lineno}"
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as e:
            raise BundleFormatError(f"{where}: invalid JSON ({e.msg})") from None
        if not isinstance(rec, dict):
            raise BundleFormatError(f"{where}: expected an object")
        for key in ("t", "x", "y"):
            if key not in rec:
                raise BundleFormatError(f"{where}: missing field '{key}'")
        try:
            tv = float(rec["t"])
        except (TypeError, ValueError):
            raise BundleFormatError(f"{where}: field 't' is not a decimal string") from None
        if not isinstance(rec["x"], list):
            raise BundleFormatError(f"{where}: field 'x' must be a list")
        try:
            xv = [float(v) for v in rec["x"]]
        except (TypeError, ValueError):
            raise BundleFormatError(f"{where}: field 'x' holds a non-decimal entry") from None
        if x and len(xv) != len(x[0]):
            raise BundleFormatError(f"{where}: field 'x' has length {len(xv)}, expected {len(x[0])}")
        if not isinstance(rec["y"], int) or isinstance(rec["y"], bool):
            raise BundleFormatError(f"{where}: field 'y' must be an integer")
        t.append(tv)
        x.append(xv)
        y.append(rec["y"])
    return Drive(drive_id, t, x, y)


def manifest_bytes(bundle):
    doc = {"version": SCHEMA_VERSION, "splits": bundle.splits(), "gen": bundle.meta.to_dict()}
    return (json.dumps(doc, indent=2, sort_keys=True) + "\n").encode()


def bundle_files(bundle):
    """Mapping of relative file name to bytes for the on-disk bundle."""
    files = {"manifest.json": manifest_bytes(bundle)}
    for d in bundle.all_drives():
        files[f"{d.id}.jsonl"] = drive_to_jsonl(d)
    return files


def content_hash(bundle):
    h = hashlib.sha256()
    for name, data in sorted(bundle_files(bundle).items()):
        h.update(name.encode() + b"\0" + data + b"\0")
    return h.hexdigest()


def save_bundle(bundle, path):
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    for name, data in bundle_files(bundle).items():
        tmp = path / (name + ".tmp")
        tmp.write_bytes(data)
        os.replace(tmp, path / name)
    return path


def load_bundle(path):
    path = Path(path)
    src = path / "manifest.json"
    try:
        doc = json.loads(src.read_text())
    except json.JSONDecodeError as e:
        raise BundleFormatError(f"{src}:{e.lineno}: invalid JSON ({e.msg})") from None
    if not isinstance(doc, dict):
        raise BundleFormatError(f"{src}: expected an object")
    if doc.get("version") != SCHEMA_VERSION:
        raise SchemaVersionError(
            f"{src}: schema version {doc.get('version')!r}, expected {SCHEMA_VERSION}"
        )
    for key in ("splits", "gen"):
        if key not in doc:
            raise BundleFormatError(f"{src}: missing field '{key}'")
    try:
        cfg = GenConfig.from_dict(doc["gen"])
    except (TypeError, ValueError) as e:
        raise BundleFormatError(f"{src}: field 'gen': {e}") from None
    splits = doc["splits"]
    parts = {}
    seen = set()
    for key in ("initial", "unlabeled", "val", "test"):
        if key not in splits:
            raise BundleFormatError(f"{src}: field 'splits.{key}' missing")
        drives = []
        for did in splits[key]:
            if did in seen:
                raise BundleFormatError(f"{src}: drive id '{did}' appears in more than one split")
            seen.add(did)
            f = path / f"{did}.jsonl"
            drives.append(drive_from_jsonl(f.read_text(), did, source=str(f)))
        parts[key] = drives
    return DatasetBundle(parts["initial"], parts["unlabeled"], parts["val"], parts["test"], cfg)


def io_roundtrip(bundle, path):
    save_bundle(bundle, path)
    return load_bundle(path)
