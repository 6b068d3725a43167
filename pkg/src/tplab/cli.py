"""Command-line entry point: ``tplab gen | run | report``.

Exit codes: 0 success, 1 IO error, 2 configuration error, 3 training abort.
"""

import argparse
import csv
import dataclasses
import hashlib
import io
import json
import os
import platform
import sys
from collections import defaultdict
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np
import scipy

from tplab import __version__, metrics, query, scenario, streamgen
from tplab.objective import LossCfg
from tplab.query import QueryCfg
from tplab.scenario import ScenarioCfg
from tplab.trainer import TrainCfg, TrainingAborted

EXIT_OK, EXIT_IO, EXIT_CONFIG, EXIT_ABORT = 0, 1, 2, 3
WORKERS_ENV = "TPLAB_WORKERS"

RESULTS_HEADER = [
    "strategy", "seed", "cycle", "drive_id", "n_selected", "labeled_count",
    "labeled_fraction", "test_accuracy", "selection_seconds", "train_epochs",
]
DIVERSITY_HEADER = ["strategy", "seed", "cycle", "n_selected", "mean_pairwise_dist", "covering_radius"]

# Learning rate used when a run config does not set one.  The small MLP trains
# from scratch on a few hundred frames, which needs a larger step than the
# library default.
DEFAULT_RUN_LR = 0.03

SCENARIO_FIELDS = ("kind", "q", "total_budget_fraction", "retrain", "hidden_dims",
                   "dropout_p", "lossmod_mid_dim", "timing")
TRAIN_FIELDS = ("batch_size", "lr", "momentum", "patience", "max_epochs", "detach_schedule", "detach_at")
LOSS_FIELDS = tuple(f.name for f in dataclasses.fields(LossCfg))
QUERY_FIELDS = ("T", "epsilon", "kernel_bandwidth", "tpl_mode", "batchbald_samples")


class ConfigError(ValueError):
    pass


class CellAborted(RuntimeError):
    pass


def _strict(d, allowed, where):
    if not isinstance(d, dict):
        raise ConfigError(f"{where}: expected a JSON object, got {type(d).__name__}")
    unknown = sorted(set(d) - set(allowed))
    if unknown:
        raise ConfigError(f"{where}: unknown field(s) {', '.join(unknown)}")
    return d


def _hash(obj):
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()


# ----------------------------------------------------------------- run config


@dataclasses.dataclass(frozen=True)
class RunConfig:
    dataset: str
    out: str
    strategies: tuple
    seeds: tuple = (1, 42, 64)
    base: ScenarioCfg = dataclasses.field(default_factory=ScenarioCfg)  # strategy/seed unset

    @classmethod
    def from_dict(cls, d):
        _strict(d, ("dataset", "out", "strategies", "seeds", "scenario", "train", "query"), "run config")
        for req in ("dataset", "out", "strategies"):
            if req not in d:
                raise ConfigError(f"run config: missing required field {req!r}")
        strategies = d["strategies"]
        if isinstance(strategies, str) or not isinstance(strategies, list) or not strategies:
            raise ConfigError("strategies: expected a non-empty list of strategy ids")
        for s in strategies:
            if s not in query.STRATEGIES:
                raise ConfigError(f"strategies: unknown strategy {s!r}; choose from {', '.join(query.STRATEGIES)}")
        seeds = d.get("seeds", [1, 42, 64])
        if not isinstance(seeds, list) or not seeds or not all(isinstance(s, int) and not isinstance(s, bool) for s in seeds):
            raise ConfigError("seeds: expected a non-empty list of integers")
        sc = dict(_strict(d.get("scenario", {}), SCENARIO_FIELDS, "scenario"))
        tr = dict(_strict(d.get("train", {}), TRAIN_FIELDS + ("loss",), "train"))
        loss = _strict(tr.pop("loss", {}), LOSS_FIELDS, "train.loss")
        qu = _strict(d.get("query", {}), QUERY_FIELDS, "query")
        tr.setdefault("lr", DEFAULT_RUN_LR)
        if "hidden_dims" in sc:
            sc["hidden_dims"] = tuple(sc["hidden_dims"])
        try:
            base = ScenarioCfg(
                train_cfg=TrainCfg(loss_cfg=LossCfg(**loss), **tr),
                query_cfg=QueryCfg(**qu),
                **sc,
            )
            cfg = cls(str(d["dataset"]), str(d["out"]), tuple(strategies), tuple(seeds), base)
            cfg.validate()
        except (TypeError, ValueError) as e:
            raise ConfigError(str(e)) from None
        return cfg

    def validate(self):
        for s in self.strategies:
            self.scenario_cfg(s, self.seeds[0]).validate()
        for s in self.seeds:
            if s < 0:
                raise ConfigError(f"seeds: must be non-negative, got {s}")
        return self

    def scenario_cfg(self, strategy, seed):
        return dataclasses.replace(self.base, strategy=strategy, seed=seed)

    def experiment_dict(self):
        """Everything that affects results (paths excluded)."""
        b = self.base
        tc = b.train_cfg
        return {
            "scenario": {
                "kind": b.kind, "q": b.q, "total_budget_fraction": b.total_budget_fraction,
                "retrain": b.retrain, "hidden_dims": list(b.hidden_dims), "dropout_p": b.dropout_p,
                "lossmod_mid_dim": b.lossmod_mid_dim, "timing": b.timing,
            },
            "train": {
                **{k: getattr(tc, k) for k in TRAIN_FIELDS},
                "loss": dataclasses.asdict(tc.loss_cfg),
            },
            "query": {k: getattr(b.query_cfg, k) for k in QUERY_FIELDS},
        }

    def to_dict(self):
        return {
            "dataset": self.dataset, "out": self.out,
            "strategies": list(self.strategies), "seeds": list(self.seeds),
            **self.experiment_dict(),
        }

    def config_hash(self):
        return _hash({**self.experiment_dict(), "strategies": list(self.strategies), "seeds": list(self.seeds)})

    def cell_hash(self, strategy, seed, bundle_hash):
        return _hash({**self.experiment_dict(), "strategy": strategy, "seed": seed, "bundle": bundle_hash})

    def reference_hash(self, seed, bundle_hash):
        d = self.experiment_dict()
        return _hash({"scenario": {k: d["scenario"][k] for k in ("hidden_dims", "dropout_p", "lossmod_mid_dim")},
                      "train": d["train"], "seed": seed, "bundle": bundle_hash})


# ----------------------------------------------------------------- file helpers


def _atomic_write(path, data):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(f".{path.name}.tmp{os.getpid()}")
    tmp.write_bytes(data.encode() if isinstance(data, str) else data)
    os.replace(tmp, path)


def _hash_line(**kv):
    return "# " + " ".join(f"{k}={v}" for k, v in kv.items()) + "\n"


def _parse_hash_line(line):
    if not line.startswith("# "):
        return {}
    return dict(tok.split("=", 1) for tok in line[2:].split() if "=" in tok)


def _csv_text(header, rows, **hashes):
    buf = io.StringIO()
    buf.write(_hash_line(**hashes))
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def record_rows(strategy, seed, records):
    return [
        [strategy, seed, r.cycle, r.drive_id, r.n_selected, r.labeled_count,
         _fmt(float(r.labeled_fraction)), _fmt(float(r.test_accuracy)),
         _fmt(float(r.selection_seconds)), r.train_epochs]
        for r in records
    ]


def diversity_rows(strategy, seed, records):
    return [
        [strategy, seed, r.cycle, r.n_selected, _fmt(r.mean_pairwise_dist), _fmt(r.covering_radius)]
        for r in records if r.cycle > 0
    ]


def _read_csv(path):
    lines = Path(path).read_text().splitlines(keepends=True)
    hashes = _parse_hash_line(lines[0]) if lines else {}
    body = lines[1:] if hashes else lines
    rows = list(csv.reader(body))
    return hashes, rows


# ----------------------------------------------------------------- gen


def _gen_flag(name):
    return "--" + name.replace("_", "-")


def cmd_gen(args):
    try:
        d = {}
        if args.config:
            d = json.loads(Path(args.config).read_text())
            if not isinstance(d, dict):
                raise ConfigError("gen config: expected a JSON object")
        for f in dataclasses.fields(streamgen.GenConfig):
            v = getattr(args, f.name, None)
            if v is not None:
                d[f.name] = v
        cfg = streamgen.GenConfig.from_dict(d).validate()
        bundle = streamgen.gen_bundle(cfg)
    except OSError as e:
        return _fail(EXIT_IO, f"cannot read config: {e}")
    except (ValueError, TypeError) as e:
        return _fail(EXIT_CONFIG, f"config error: {e}")
    try:
        streamgen.save_bundle(bundle, args.out)
    except OSError as e:
        return _fail(EXIT_IO, f"cannot write bundle: {e}")
    print(streamgen.content_hash(bundle))
    return EXIT_OK


# ----------------------------------------------------------------- run


def _load_run_config(args):
    d = {}
    if args.config:
        d = json.loads(Path(args.config).read_text())
        if not isinstance(d, dict):
            raise ConfigError("run config: expected a JSON object")
    if args.data is not None:
        d["dataset"] = args.data
    if args.out is not None:
        d["out"] = args.out
    if args.strategies is not None:
        d["strategies"] = [s for s in args.strategies.split(",") if s]
    if args.seeds is not None:
        try:
            d["seeds"] = [int(s) for s in args.seeds.split(",") if s]
        except ValueError:
            raise ConfigError(f"seeds: not a comma-separated integer list: {args.seeds!r}") from None
    for flag, section, key in (
        ("kind", "scenario", "kind"), ("q", "scenario", "q"),
        ("budget", "scenario", "total_budget_fraction"), ("retrain", "scenario", "retrain"),
        ("timing", "scenario", "timing"), ("lr", "train", "lr"), ("max_epochs", "train", "max_epochs"),
    ):
        v = getattr(args, flag)
        if v is not None:
            d.setdefault(section, {})[key] = v
    return RunConfig.from_dict(d)


def _cell_paths(out, strategy, seed):
    cells = Path(out) / "cells"
    return cells / f"{strategy}_seed{seed}.csv", cells / f"{strategy}_seed{seed}.diversity.csv"


def _cell_done(path, cell_hash):
    try:
        with open(path) as fh:
            return _parse_hash_line(fh.readline()).get("cell_hash") == cell_hash
    except OSError:
        return False


def _run_cell(cfg, strategy, seed, bundle_hash):
    """Run one (strategy, seed) cell and write its files; no-op if already complete."""
    res_path, div_path = _cell_paths(cfg.out, strategy, seed)
    h = cfg.cell_hash(strategy, seed, bundle_hash)
    if _cell_done(res_path, h) and _cell_done(div_path, h):
        return "skipped"
    bundle = streamgen.load_bundle(cfg.dataset)
    try:
        records = scenario.run(bundle, cfg.scenario_cfg(strategy, seed)).records
    except TrainingAborted as e:
        raise CellAborted(f"cell strategy={strategy} seed={seed}: training aborted at {e}") from None
    hashes = {"cell_hash": h, "bundle_hash": bundle_hash}
    _atomic_write(div_path, _csv_text(DIVERSITY_HEADER, diversity_rows(strategy, seed, records), **hashes))
    _atomic_write(res_path, _csv_text(RESULTS_HEADER, record_rows(strategy, seed, records), **hashes))
    return "ran"


def _reference(cfg, seed, bundle, bundle_hash):
    path = Path(cfg.out) / "reference" / f"seed{seed}.json"
    h = cfg.reference_hash(seed, bundle_hash)
    try:
        doc = json.loads(path.read_text())
        if doc.get("reference_hash") == h:
            return doc["accuracy"]
    except (OSError, ValueError):
        pass
    try:
        acc = scenario.reference_accuracy(bundle, cfg.scenario_cfg("random", seed))
    except TrainingAborted as e:
        raise CellAborted(f"reference seed={seed}: training aborted at {e}") from None
    _atomic_write(path, json.dumps({"reference_hash": h, "seed": seed, "accuracy": acc}, indent=2) + "\n")
    return acc


def _workers():
    raw = os.environ.get(WORKERS_ENV, "1")
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"{WORKERS_ENV} must be an integer, got {raw!r}") from None
    if n < 1:
        raise ConfigError(f"{WORKERS_ENV} must be >= 1, got {n}")
    return n


def execute_run(cfg):
    """Run the grid described by ``cfg``; returns the path of the merged results CSV."""
    bundle = streamgen.load_bundle(cfg.dataset)
    bundle_hash = streamgen.content_hash(bundle)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    refs = {s: _reference(cfg, s, bundle, bundle_hash) for s in cfg.seeds}
    grid = [(st, s) for st in cfg.strategies for s in cfg.seeds]
    n = _workers()
    if n == 1:
        for st, s in grid:
            _run_cell(cfg, st, s, bundle_hash)
    else:
        with ProcessPoolExecutor(max_workers=n) as ex:
            futures = [ex.submit(_run_cell, cfg, st, s, bundle_hash) for st, s in grid]
            errors = []
            for f in futures:
                try:
                    f.result()
                except CellAborted as e:
                    errors.append(e)
            if errors:
                raise errors[0]

    config_hash = cfg.config_hash()
    hashes = {"config_hash": config_hash, "bundle_hash": bundle_hash}
    results, diversity = [], []
    for st, s in grid:
        res_path, div_path = _cell_paths(cfg.out, st, s)
        results += _read_csv(res_path)[1][1:]
        diversity += _read_csv(div_path)[1][1:]
    _atomic_write(out / "results.csv", _csv_text(RESULTS_HEADER, results, **hashes))
    _atomic_write(out / "diversity.csv", _csv_text(DIVERSITY_HEADER, diversity, **hashes))
    manifest = {
        "version": 1,
        "config": cfg.to_dict(),
        "config_hash": config_hash,
        "bundle_hash": bundle_hash,
        "reference_accuracy": {str(s): refs[s] for s in cfg.seeds},
        "environment": {
            "tplab": __version__, "python": platform.python_version(),
            "numpy": np.__version__, "scipy": scipy.__version__, "platform": platform.platform(),
        },
    }
    _atomic_write(out / "manifest.json", json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return out / "results.csv"


def cmd_run(args):
    try:
        cfg = _load_run_config(args)
        _workers()
    except OSError as e:
        return _fail(EXIT_IO, f"cannot read config: {e}")
    except (ValueError, TypeError) as e:
        return _fail(EXIT_CONFIG, f"config error: {e}")
    try:
        path = execute_run(cfg)
    except CellAborted as e:
        return _fail(EXIT_ABORT, str(e))
    except (OSError, streamgen.BundleFormatError, streamgen.SchemaVersionError) as e:
        return _fail(EXIT_IO, f"io error: {e}")
    print(path)
    return EXIT_OK


# ----------------------------------------------------------------- report


def _load_results(results_dir):
    files = sorted(p for p in Path(results_dir).glob("*.csv") if _is_results_csv(p))
    if not files:
        raise ConfigError(f"no results CSV found in {results_dir}")
    bundle_hashes, config_hashes = set(), set()
    rows = []
    for p in files:
        hashes, table = _read_csv(p)
        bundle_hashes.add(hashes.get("bundle_hash"))
        config_hashes.add(hashes.get("config_hash"))
        rows += table[1:]
    if len(bundle_hashes) > 1:
        raise ConfigError(f"results in {results_dir} come from different bundles: {sorted(map(str, bundle_hashes))}")
    runs = defaultdict(lambda: defaultdict(list))
    seen = set()
    for r in rows:
        d = dict(zip(RESULTS_HEADER, r))
        key = (d["strategy"], int(d["seed"]), int(d["cycle"]))
        if key in seen:
            raise ConfigError(f"duplicate result row for strategy={key[0]} seed={key[1]} cycle={key[2]}")
        seen.add(key)
        runs[d["strategy"]][int(d["seed"])].append(scenario.CycleRecord(
            cycle=int(d["cycle"]), drive_id=d["drive_id"], n_selected=int(d["n_selected"]),
            labeled_count=int(d["labeled_count"]), labeled_fraction=float(d["labeled_fraction"]),
            test_accuracy=float(d["test_accuracy"]), selection_seconds=float(d["selection_seconds"]),
            train_epochs=int(d["train_epochs"]),
        ))
    for st in runs:
        for s in runs[st]:
            runs[st][s].sort(key=lambda r: r.cycle)
    return runs, bundle_hashes.pop(), sorted(map(str, config_hashes))


def _is_results_csv(path):
    try:
        _, rows = _read_csv(path)
    except (OSError, UnicodeDecodeError):
        return False
    return bool(rows) and rows[0] == RESULTS_HEADER


def _reference_from_manifest(results_dir, seeds):
    try:
        doc = json.loads((Path(results_dir) / "manifest.json").read_text())
    except (OSError, ValueError):
        return None
    accs = doc.get("reference_accuracy", {})
    vals = [accs[str(s)] for s in seeds if str(s) in accs]
    return float(np.mean(vals)) if vals else None


def build_report(results_dir, out_dir):
    runs, bundle_hash, config_hashes = _load_results(results_dir)
    seeds = sorted({s for st in runs for s in runs[st]})
    reference = _reference_from_manifest(results_dir, seeds)
    out = Path(out_dir)
    hashes = {"config_hash": ",".join(config_hashes), "bundle_hash": bundle_hash}
    strategies = [s for s in query.STRATEGIES if s in runs] + sorted(set(runs) - set(query.STRATEGIES))

    summary = {"bundle_hash": bundle_hash, "config_hashes": config_hashes,
               "reference_accuracy": reference, "strategies": {}}
    curves, curve_rows, timing_rows = {}, [], []
    for st in strategies:
        try:
            s = metrics.summarize(runs[st])
        except ValueError as e:
            raise ConfigError(f"strategy {st}: {e}") from None
        c = s["curve"]
        curves[st] = c
        inter = None if reference is None else metrics.intersection_fraction(c, reference)
        summary["strategies"][st] = {
            "n_seeds": len(runs[st]),
            "auc": s["auc"],
            "intersection_fraction": inter,
            "mean_selection_seconds": s["mean_selection_seconds"],
            "curve": [{"labeled_fraction": float(f), "mean_accuracy": float(m), "stderr": float(e)}
                      for f, m, e in zip(c.fractions, c.mean, c.stderr)],
        }
        curve_rows += [[st, _fmt(float(f)), _fmt(float(m)), _fmt(float(e))]
                       for f, m, e in zip(c.fractions, c.mean, c.stderr)]
        timing_rows.append([st, _fmt(s["mean_selection_seconds"])])

    div_rows = _diversity_table(Path(results_dir) / "diversity.csv", strategies)
    out.mkdir(parents=True, exist_ok=True)
    _atomic_write(out / "summary.json", json.dumps(summary, indent=2, sort_keys=True) + "\n")
    _atomic_write(out / "curves.csv", _csv_text(
        ["strategy", "labeled_fraction", "mean_accuracy", "stderr"], curve_rows, **hashes))
    _atomic_write(out / "timing.csv", _csv_text(["strategy", "mean_selection_seconds"], timing_rows, **hashes))
    if div_rows is not None:
        _atomic_write(out / "diversity_summary.csv", _csv_text(
            ["strategy", "cycle", "n_seeds", "mean_pairwise_dist", "covering_radius"], div_rows, **hashes))
    from tplab import plotting  # matplotlib import is slow; only pay for it here

    plotting.plot_curves(curves, reference, str(out / "accuracy"))
    return summary


def _diversity_table(path, strategies):
    if not path.exists():
        return None
    _, rows = _read_csv(path)
    acc = defaultdict(list)
    for r in rows[1:]:
        d = dict(zip(DIVERSITY_HEADER, r))
        if d["mean_pairwise_dist"] == "":
            continue
        acc[(d["strategy"], int(d["cycle"]))].append(
            (float(d["mean_pairwise_dist"]), float(d["covering_radius"])))
    out = []
    for st in strategies:
        for cyc in sorted(c for s, c in acc if s == st):
            v = np.array(acc[(st, cyc)])
            out.append([st, cyc, len(v), _fmt(float(v[:, 0].mean())), _fmt(float(v[:, 1].mean()))])
    return out


def cmd_report(args):
    out = args.out or str(Path(args.results) / "report")
    try:
        build_report(args.results, out)
    except ConfigError as e:
        return _fail(EXIT_CONFIG, f"report error: {e}")
    except (OSError, ValueError) as e:
        return _fail(EXIT_IO, f"cannot read results: {e}")
    print(out)
    return EXIT_OK


# ----------------------------------------------------------------- main


def _fail(code, msg):
    print(f"tplab: {msg}", file=sys.stderr)
    return code


def build_parser():
    p = argparse.ArgumentParser(prog="tplab", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="cmd", required=True)

    g = sub.add_parser("gen", help="generate a synthetic drive bundle")
    g.add_argument("--config", help="GenConfig JSON file")
    g.add_argument("--out", required=True, help="bundle directory")
    for f in dataclasses.fields(streamgen.GenConfig):
        if f.name == "class_centers":
            continue
        if f.type is bool or f.type == "bool":
            g.add_argument(_gen_flag(f.name), dest=f.name, action=argparse.BooleanOptionalAction, default=None)
        else:
            g.add_argument(_gen_flag(f.name), dest=f.name, type=type(f.default), default=None)
    g.set_defaults(func=cmd_gen)

    r = sub.add_parser("run", help="run a strategy x seed grid")
    r.add_argument("--config", help="run config JSON file")
    r.add_argument("--data", help="bundle directory")
    r.add_argument("--out", help="output directory")
    r.add_argument("--strategies", help="comma-separated strategy ids")
    r.add_argument("--seeds", help="comma-separated seeds (default 1,42,64)")
    r.add_argument("--kind", choices=[scenario.STREAM_BATCH, scenario.POOL_STREAM])
    r.add_argument("--q", type=float, help="per-drive selection fraction")
    r.add_argument("--budget", type=float, help="total budget as a fraction of the initial labeled size")
    r.add_argument("--retrain", choices=[scenario.SCRATCH, scenario.CONTINUOUS])
    r.add_argument("--timing", choices=["wall", "off"])
    r.add_argument("--lr", type=float)
    r.add_argument("--max-epochs", type=int)
    r.set_defaults(func=cmd_run)

    rep = sub.add_parser("report", help="summarize a results directory")
    rep.add_argument("results", help="directory holding results CSVs and manifest.json")
    rep.add_argument("--out", help="report directory (default <results>/report)")
    rep.set_defaults(func=cmd_report)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
