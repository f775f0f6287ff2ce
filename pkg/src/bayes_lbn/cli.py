"""Command-line interface: simulate, learn, eval, sweep, theory.

Every command takes an optional JSON config (``--config``); command-line
flags override config keys.  Each run writes ``resolved_config.json`` with
all defaults filled in; wall-clock information goes to ``metadata.json`` so
the primary outputs are byte-identical across reruns.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
import tempfile
import time
from pathlib import Path

import numpy as np

from . import __version__
from .bagus import BagusConfig
from .datagen import (
    ERROR_SPECS,
    DataFormatError,
    ScenarioSpec,
    dataset_to_csv,
    format_float,
    make_scenario,
    read_dataset,
)
from .evaluation import (
    chain_star_closed_forms,
    default_parallelism,
    edge_confusion,
    expand_grid,
    hamming_distance,
    ordering_correct,
    recommend_hyperparams,
    run_sweep,
    theory_report,
)
from .learner import learn_structure
from .model import Dag, LinearSemModel

logger = logging.getLogger("bayes_lbn")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4


class ConfigError(ValueError):
    pass


class DataError(ValueError):
    pass


COMMAND_KEYS = {
    "simulate": {"scenario", "out"},
    "learn": {"data", "bagus", "warm_start", "out"},
    "eval": {"truth", "estimate", "out"},
    "sweep": {"grid", "replications", "bagus", "seed", "threads", "out"},
    "theory": {"model", "n", "epsilon1", "out"},
}


# --------------------------------------------------------------------------
# io helpers


def _dumps(obj) -> str:
    return json.dumps(_jsonable(obj), indent=2, sort_keys=True, allow_nan=False) + "\n"


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        if not np.isfinite(v):
            return None
        return float(format_float(v))
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    return obj


def _write_atomic(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _read_json(path) -> dict:
    path = Path(path)
    try:
        return json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise DataError(f"{path}: file not found") from None
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: invalid JSON ({exc})") from None


def _load_config(args, command: str) -> dict:
    cfg: dict = {}
    if args.config:
        path = Path(args.config)
        try:
            cfg = json.loads(path.read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise ConfigError(f"{path}: config file not found") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from None
        if not isinstance(cfg, dict):
            raise ConfigError(f"{path}: config must be a JSON object")
    unknown = set(cfg) - COMMAND_KEYS[command]
    if unknown:
        raise ConfigError(f"unknown config keys for '{command}': {sorted(unknown)}")
    if getattr(args, "out", None):
        cfg["out"] = args.out
    cfg.setdefault("out", ".")
    return cfg


def _bagus_config(value) -> BagusConfig:
    if value is None or value == "auto":
        return BagusConfig()
    if not isinstance(value, dict):
        raise ConfigError("'bagus' must be \"auto\" or an object of hyper-parameters")
    try:
        return BagusConfig.from_dict(value)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid bagus config: {exc}") from None


def _finish(out: Path, resolved: dict, started: float) -> None:
    _write_atomic(out / "resolved_config.json", _dumps(resolved))
    meta = {
        "version": __version__,
        "started_unix": started,
        "elapsed_s": time.time() - started,
        "argv": sys.argv[1:],
    }
    _write_atomic(out / "metadata.json", json.dumps(meta, indent=2) + "\n")


def _edges_from_json(doc: dict) -> tuple[int, frozenset]:
    if "model" in doc:
        model = LinearSemModel.from_dict(doc["model"])
        return model.p, model.dag.edges
    p = doc.get("p")
    if p is None:
        raise DataError("graph document lacks 'p'")
    edges = []
    for e in doc.get("edges", []):
        if isinstance(e, dict):
            edges.append((int(e["parent"]), int(e["child"])))
        else:
            edges.append((int(e[0]), int(e[1])))
    return int(p), frozenset(edges)


# --------------------------------------------------------------------------
# commands


def cmd_simulate(cfg: dict, seed: int | None) -> dict:
    scenario = dict(cfg.get("scenario", {}))
    if seed is not None:
        scenario["seed"] = seed
    try:
        spec = ScenarioSpec.from_dict(scenario)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid scenario: {exc}") from None
    out = Path(cfg["out"])
    model, data = make_scenario(spec)
    truth = {
        "scenario": spec.to_dict(),
        "model": model.to_dict(),
        "column_names": data.column_names,
        "p": model.p,
        "edges": sorted([list(e) for e in model.dag.edges]),
    }
    _write_atomic(out / "data.csv", dataset_to_csv(data))
    _write_atomic(out / "truth.json", _dumps(truth))
    return {"command": "simulate", "scenario": spec.to_dict(), "out": str(out)}


def cmd_learn(cfg: dict, seed: int | None) -> dict:
    if "data" not in cfg:
        raise ConfigError("learn needs a data path ('data' key or --data)")
    data = read_dataset(cfg["data"])
    if data.n < 2:
        raise DataError(f"{cfg['data']}: need at least 2 observations")
    bagus = _bagus_config(cfg.get("bagus", "auto")).resolved(data.n)
    warm = bool(cfg.get("warm_start", False))
    if data.p == 1:
        result = learn_structure(data, bagus)
    else:
        result = learn_structure(data, bagus, warm_start=warm)
    out = Path(cfg["out"])
    doc = result.to_dict()
    doc["column_names"] = data.column_names
    names = data.column_names
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["parent", "child", "inclusion_probability"])
    for j, k in sorted(result.edges_hat):
        w.writerow([names[j], names[k], format_float(result.edge_inclusion[(j, k)])])
    _write_atomic(out / "result.json", _dumps(doc))
    _write_atomic(out / "edges.csv", buf.getvalue())
    if not result.converged:
        logger.warning("solver did not converge at every step; see result.json diagnostics")
    return {"command": "learn", "data": str(cfg["data"]), "bagus": bagus.to_dict(),
            "warm_start": warm, "out": str(out)}


def cmd_eval(cfg: dict, seed: int | None) -> dict:
    for key in ("truth", "estimate"):
        if key not in cfg:
            raise ConfigError(f"eval needs '{key}'")
    p_t, e_t = _edges_from_json(_read_json(cfg["truth"]))
    p_e, e_e = _edges_from_json(_read_json(cfg["estimate"]))
    if p_t != p_e:
        raise DataError(f"truth has p={p_t} but estimate has p={p_e}")
    truth = Dag(p_t, e_t)
    metrics = {"p": p_t, "hamming": hamming_distance(truth, Dag(p_e, e_e)), **edge_confusion(truth, e_e)}
    est_doc = _read_json(cfg["estimate"])
    if "ordering" in est_doc:
        metrics["ordering_ok"] = ordering_correct(truth, est_doc["ordering"])
    out = Path(cfg["out"])
    _write_atomic(out / "metrics.json", _dumps(metrics))
    return {"command": "eval", "truth": str(cfg["truth"]), "estimate": str(cfg["estimate"]), "out": str(out)}


def cmd_sweep(cfg: dict, seed: int | None, threads: int | None) -> dict:
    grid = dict(cfg.get("grid", {}))
    unknown = set(grid) - {"p", "d_M", "n", "error_spec"}
    if unknown:
        raise ConfigError(f"unknown grid keys: {sorted(unknown)}")
    for key in ("p", "d_M", "n"):
        if not grid.get(key):
            raise ConfigError(f"grid needs a non-empty '{key}' list")
    grid.setdefault("error_spec", ["gaussian"])
    bad = set(grid["error_spec"]) - set(ERROR_SPECS)
    if bad:
        raise ConfigError(f"unknown error_spec values {sorted(bad)}")
    reps = int(cfg.get("replications", 30))
    master = int(seed if seed is not None else cfg.get("seed", 0))
    nthreads = int(threads or cfg.get("threads") or default_parallelism())
    bagus_raw = cfg.get("bagus", "auto")
    bagus = _bagus_config(bagus_raw)
    cells = expand_grid(grid["p"], grid["d_M"], grid["n"], grid["error_spec"])
    result = run_sweep(cells, reps, bagus, parallelism=nthreads, master_seed=master)
    out = Path(cfg["out"])
    _write_atomic(out / "replications.csv", result.raw_csv(include_runtime=False))
    _write_atomic(out / "aggregate.csv", result.aggregate_csv())
    _write_atomic(out / "runtimes.csv", _runtime_csv(result))
    return {"command": "sweep", "grid": grid, "replications": reps, "seed": master,
            "threads": nthreads, "bagus": bagus.to_dict(), "out": str(out)}


def _runtime_csv(result) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["p", "d_M", "n", "error_spec", "replication", "runtime_ms"])
    for r in result.rows:
        w.writerow([r.p, r.d_M, r.n, r.error_spec, r.replication, f"{r.runtime_ms:.3f}"])
    return buf.getvalue()


def cmd_theory(cfg: dict, seed: int | None) -> dict:
    if "model" not in cfg:
        raise ConfigError("theory needs a model JSON path")
    doc = _read_json(cfg["model"])
    try:
        model = LinearSemModel.from_dict(doc.get("model", doc))
    except (KeyError, TypeError) as exc:
        raise DataError(f"{cfg['model']}: not a model document ({exc})") from None
    n = float(cfg.get("n", 1000))
    eps1 = float(cfg.get("epsilon1", 1.0))
    report = theory_report(model)
    rec = recommend_hyperparams(report, n, model.p, eps1)
    doc_out = {"report": report.to_dict(), "recommendation": rec.to_dict()}
    shape = _chain_or_star(model)
    if shape is not None:
        kind, beta, s2 = shape
        doc_out["closed_forms"] = {"kind": kind, **chain_star_closed_forms(kind, model.p, beta, s2)}
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["constraint", "satisfiable"])
    for name, ok in rec.constraints.items():
        w.writerow([name, int(ok)])
    out = Path(cfg["out"])
    _write_atomic(out / "theory.json", _dumps(doc_out))
    _write_atomic(out / "admissibility.csv", buf.getvalue())
    return {"command": "theory", "model": str(cfg["model"]), "n": n, "epsilon1": eps1, "out": str(out)}


def _chain_or_star(model: LinearSemModel):
    """(kind, beta, sigma2) if the model is an equal-weight chain or star."""
    p = model.p
    if p < 3 or not np.allclose(model.sigma2, model.sigma2[0]):
        return None
    B = model.B
    w = B[1, 0]
    if w == 0:
        return None
    chain = np.zeros_like(B)
    chain[np.arange(1, p), np.arange(p - 1)] = w
    star = np.zeros_like(B)
    star[1:, 0] = w
    if np.array_equal(B, chain):
        return "chain", float(w), float(model.sigma2[0])
    if np.array_equal(B, star):
        return "star", float(w), float(model.sigma2[0])
    return None


# --------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="bayes-lbn", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="JSON config file")
        sp.add_argument("--out", help="output directory")
        sp.add_argument("--seed", type=int, help="master RNG seed")
        return sp

    sp = common(sub.add_parser("simulate", help="generate a random linear SEM and data"))
    sp.add_argument("--p", type=int)
    sp.add_argument("--d-M", dest="d_M_cap", type=int)
    sp.add_argument("--n", type=int)
    sp.add_argument("--error-spec", choices=ERROR_SPECS)

    sp = common(sub.add_parser("learn", help="learn a DAG from a CSV dataset"))
    sp.add_argument("--data", help="CSV with a header row")
    sp.add_argument("--nu0", type=float)
    sp.add_argument("--nu1", type=float)
    sp.add_argument("--eta", type=float)
    sp.add_argument("--tau", type=float)
    sp.add_argument("--threshold", dest="threshold_T", type=float)
    sp.add_argument("--warm-start", action="store_true", default=None)

    sp = common(sub.add_parser("eval", help="compare an estimate with the truth"))
    sp.add_argument("--truth")
    sp.add_argument("--estimate")

    sp = common(sub.add_parser("sweep", help="replicated simulation study"))
    sp.add_argument("--threads", type=int)
    sp.add_argument("--replications", type=int)

    sp = common(sub.add_parser("theory", help="theory quantities and hyper-parameter admissibility"))
    sp.add_argument("--model", help="truth.json or model JSON")
    sp.add_argument("--n", type=float)
    sp.add_argument("--epsilon1", type=float)
    return parser


def _apply_overrides(args, cfg: dict) -> None:
    cmd = args.command
    if cmd == "simulate":
        sc = cfg.setdefault("scenario", {})
        for key in ("p", "d_M_cap", "n", "error_spec"):
            if getattr(args, key) is not None:
                sc[key] = getattr(args, key)
    elif cmd == "learn":
        if args.data:
            cfg["data"] = args.data
        over = {k: getattr(args, k) for k in ("nu0", "nu1", "eta", "tau", "threshold_T") if getattr(args, k) is not None}
        if over:
            base = cfg.get("bagus", "auto")
            base = {} if base in (None, "auto") else dict(base)
            base.update(over)
            cfg["bagus"] = base
        if args.warm_start is not None:
            cfg["warm_start"] = args.warm_start
    elif cmd == "eval":
        for key in ("truth", "estimate"):
            if getattr(args, key):
                cfg[key] = getattr(args, key)
    elif cmd == "sweep":
        if args.replications is not None:
            cfg["replications"] = args.replications
    elif cmd == "theory":
        for key in ("model", "n", "epsilon1"):
            if getattr(args, key) is not None:
                cfg[key] = getattr(args, key)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    started = time.time()
    try:
        cfg = _load_config(args, args.command)
        _apply_overrides(args, cfg)
        if args.command == "sweep":
            resolved = cmd_sweep(cfg, args.seed, args.threads)
        else:
            resolved = {
                "simulate": cmd_simulate,
                "learn": cmd_learn,
                "eval": cmd_eval,
                "theory": cmd_theory,
            }[args.command](cfg, args.seed)
        _finish(Path(cfg["out"]), resolved, started)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, DataFormatError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (np.linalg.LinAlgError, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
