"""Command-line front end.

Subcommands: discretize, calibrate, project, compare, synth. Every command
writes into ``--out-dir`` together with a ``manifest.json`` describing how
the outputs were produced. Options may also come from a JSON file passed
with ``--config``; flags given on the command line take precedence.

Exit codes: 0 success, 2 usage or configuration error, 3 empty data,
4 calibration failure.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import math
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .calibrate import (CalibrationConfig, Ensemble, EnsembleError, bands, bootstrap_observations)
from .chain import Chain, ChainError, ChainTopology, TopologyKind, example_single_chain
from .discretize import (DiscretizationConfig, EmptyTableError, drop_out_of_range, observations,
                         table_from_observations)
from .ingest import (ConfigError, DataError, assign_cohort, clean, damage_codes, inspections_for,
                     load_cohorts, load_dataset)
from .synth import SynthesisConfig, generate_dataset, grid_ages

log = logging.getLogger("sewermarkov")

EXIT_OK, EXIT_USAGE, EXIT_EMPTY, EXIT_CALIBRATION = 0, 2, 3, 4

DEFAULTS = {
    "cohorts_config": None,
    "cohort": None,
    "damage_code": None,
    "delta_t": 3,
    "max_age": 126,
    "chain": "single",
    "replicas": 1000,
    "seed": 0,
    "horizon_years": 125,
    "threads": 1,
    "max_iterations": 500,
    "convergence_tol": 1e-10,
    "fix_initial_vector": False,
    "out_dir": None,
    "horizon": None,
    "labels": None,
    "quantity": "expectation",
    "model": None,
    "n_pipes": 10000,
    "max_age_years": 75,
    "inspections_per_pipe": 1,
    "material": "concrete",
    "content": "mixed",
    "width_mm": 300.0,
}


class UsageError(Exception):
    pass


class EmptyDataError(Exception):
    pass


def _sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _write(out_dir: Path, name: str, text: str):
    (out_dir / name).write_text(text, encoding="utf-8")


def _write_manifest(out_dir: Path, command: str, inputs, config: dict, started: float):
    manifest = {
        "command": command,
        "input_fingerprints": {str(p): _sha256(p) for p in inputs},
        "config": config,
        "tool_version": __version__,
        "wall_time_s": round(time.perf_counter() - started, 6),
    }
    _write(out_dir, "manifest.json", json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _resolve(args) -> dict:
    """Merge built-in defaults, the --config file and explicit flags."""
    cfg = {k: v for k, v in DEFAULTS.items()}
    if args.config:
        try:
            loaded = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config file {args.config}: {exc}")
        if not isinstance(loaded, dict):
            raise UsageError("config file must hold a JSON object")
        cfg.update({k.replace("-", "_"): v for k, v in loaded.items()})
    for k, v in vars(args).items():
        if v is not None and k not in ("func", "config"):
            cfg[k] = v
    return cfg


def _disc_config(cfg) -> DiscretizationConfig:
    try:
        return DiscretizationConfig(cfg["damage_code"], int(cfg["delta_t"]), int(cfg["max_age"]))
    except (TypeError, ValueError) as exc:
        raise UsageError(str(exc))


def _cohort_observations(cfg):
    """Load, clean and cohort-filter a dataset; returns (observations, config)."""
    for key in ("pipes", "inspections"):
        if not cfg.get(key):
            raise UsageError(f"--{key} is required")
    try:
        loaded = load_dataset(cfg["pipes"], cfg["inspections"])
    except DataError as exc:
        raise UsageError(str(exc))
    if loaded.rejects:
        log.warning("%d malformed row(s) skipped", len(loaded.rejects))
    pipes, inspections, _ = clean(loaded.pipes, loaded.inspections)
    codes = damage_codes(inspections)
    code = cfg.get("damage_code")
    if not code:
        raise UsageError(f"--damage-code is required; available codes: {', '.join(codes) or '(none)'}")
    if code not in codes:
        raise UsageError(f"unknown damage code {code!r}; available codes: {', '.join(codes) or '(none)'}")
    disc = _disc_config(cfg)
    if cfg.get("cohort"):
        try:
            cohorts = load_cohorts(cfg.get("cohorts_config"))
        except ConfigError as exc:
            raise UsageError(str(exc))
        if cfg["cohort"] not in cohorts:
            raise UsageError(f"unknown cohort {cfg['cohort']!r}; known: {', '.join(cohorts)}")
        pipes = assign_cohort(pipes, cohorts[cfg["cohort"]])
        inspections = inspections_for(pipes, inspections)
    obs = drop_out_of_range(observations(pipes, inspections, code), disc)
    if len(obs) == 0:
        raise EmptyDataError(f"cohort {cfg.get('cohort') or '(all pipes)'} has no usable inspections")
    return obs, disc


def _out_dir(cfg) -> Path:
    out = Path(cfg["out_dir"] or "out")
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_discretize(cfg, started):
    obs, disc = _cohort_observations(cfg)
    table = table_from_observations(obs.ages, obs.states, disc)
    out = _out_dir(cfg)
    _write(out, "table.csv", table.to_csv())
    print(f"rows: {len(table)}  observations: {table.total}")
    _write_manifest(out, "discretize", [cfg["pipes"], cfg["inspections"]], _snapshot(cfg), started)


def _topology(cfg) -> ChainTopology:
    try:
        return ChainTopology(TopologyKind(str(cfg["chain"]).lower()))
    except ValueError:
        raise UsageError(f"--chain must be 'single' or 'multi', got {cfg['chain']!r}")


def _horizon_steps(cfg, delta_t) -> int:
    years = float(cfg["horizon_years"])
    if years < 0:
        raise UsageError("--horizon-years must be non-negative")
    return int(math.ceil(years / delta_t))


def cmd_calibrate(cfg, started):
    obs, disc = _cohort_observations(cfg)
    try:
        calib = CalibrationConfig(_topology(cfg), int(cfg["max_iterations"]), float(cfg["convergence_tol"]),
                                  int(cfg["replicas"]), int(cfg["seed"]), not cfg["fix_initial_vector"])
    except ValueError as exc:
        raise UsageError(str(exc))
    if int(cfg["threads"]) < 1:
        raise UsageError("--threads must be >= 1")
    if len(obs.pipe_ids) < 2:
        raise EmptyDataError("cohort needs at least two pipes for half-sampling")
    table = table_from_observations(obs.ages, obs.states, disc)
    ens = bootstrap_observations(obs, disc, calib, threads=int(cfg["threads"]))
    out = _out_dir(cfg)
    _write(out, "table.csv", table.to_csv())
    _write(out, "ensemble.json", ens.to_json())
    horizon = _horizon_steps(cfg, disc.delta_t)
    _write(out, "bands_expectation.csv", bands(ens, horizon).to_csv())
    for k in range(1, ens.K + 1):
        _write(out, f"bands_state_{k}.csv", bands(ens, horizon, "state_prob", k).to_csv())
    diagnostics = {
        "members": len(ens.members),
        "failures": len(ens.failures),
        "not_converged": sum(not m.converged for m in ens.members),
        "near_absorbing_counts": {str(k): v for k, v in ens.absorption_counts().items()},
    }
    _write(out, "diagnostics.json", json.dumps(diagnostics, indent=2, sort_keys=True) + "\n")
    print(f"members: {len(ens.members)}  failures: {len(ens.failures)}  "
          f"median err: {np.median([m.err for m in ens.members]):.6g}")
    _write_manifest(out, "calibrate", [cfg["pipes"], cfg["inspections"]], _snapshot(cfg), started)


def _read_chain(path) -> Chain:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise UsageError(f"cannot read model file {path}: {exc}")
    try:
        return Chain.from_json(text)
    except ChainError as exc:
        raise UsageError(f"malformed model file {path}: {exc}")


def projection_csv(chain: Chain, horizon: int) -> str:
    path = chain.path(horizon)
    expect = path @ np.arange(1, chain.K + 1)
    lines = ["step," + ",".join(f"s{k}" for k in range(1, chain.K + 1)) + ",expectation"]
    for n in range(horizon + 1):
        lines.append(f"{n}," + ",".join(repr(float(x)) for x in path[n]) + f",{float(expect[n])!r}")
    return "\n".join(lines) + "\n"


def cmd_project(cfg, started):
    if not cfg.get("model"):
        raise UsageError("--model is required")
    if cfg.get("horizon") is None or int(cfg["horizon"]) < 0:
        raise UsageError("--horizon (non-negative number of steps) is required")
    chain = _read_chain(cfg["model"])
    text = projection_csv(chain, int(cfg["horizon"]))
    if cfg.get("out_dir"):
        out = _out_dir(cfg)
        _write(out, "projections.csv", text)
        _write_manifest(out, "project", [cfg["model"]], _snapshot(cfg), started)
    else:
        sys.stdout.write(text)


def _quantity(text: str):
    if text == "expectation":
        return "expectation", None
    if text.startswith("state:"):
        try:
            return "state_prob", int(text.split(":", 1)[1])
        except ValueError:
            pass
    raise UsageError(f"--quantity must be 'expectation' or 'state:<k>', got {text!r}")


def cmd_compare(cfg, started):
    paths = cfg.get("ensembles") or []
    if len(paths) < 2:
        raise UsageError("compare needs at least two ensemble files")
    ensembles = []
    for p in paths:
        try:
            ensembles.append(Ensemble.from_json(Path(p).read_text()))
        except (OSError, ValueError, KeyError, TypeError) as exc:
            raise UsageError(f"cannot read ensemble {p}: {exc}")
    if len({e.K for e in ensembles}) > 1:
        raise UsageError("ensembles disagree on the number of states K")
    if len({e.delta_t for e in ensembles}) > 1:
        raise UsageError("ensembles disagree on delta_t")
    labels = cfg.get("labels") or [Path(p).stem for p in paths]
    if len(labels) != len(paths):
        raise UsageError("--labels must give one label per ensemble")
    if len(set(labels)) < len(labels):
        labels = [f"{lab}_{i + 1}" for i, lab in enumerate(labels)]
    quantity, state = _quantity(cfg["quantity"])
    if state is not None and not 1 <= state <= ensembles[0].K:
        raise UsageError(f"state must lie in 1..{ensembles[0].K}")
    delta_t = ensembles[0].delta_t
    horizon = _horizon_steps(cfg, delta_t)
    bs = [bands(e, horizon, quantity, state) for e in ensembles]
    header = ["step", "t_years"] + [f"{lab}_{col}" for lab in labels for col in ("lower", "median", "upper")]
    lines = [",".join(header)]
    for n in range(horizon + 1):
        vals = [str(n), repr(n * delta_t + delta_t / 2)]
        for b in bs:
            vals += [repr(float(b.lower[n])), repr(float(b.median[n])), repr(float(b.upper[n]))]
        lines.append(",".join(vals))
    out = _out_dir(cfg)
    _write(out, "comparison.csv", "\n".join(lines) + "\n")
    _write_manifest(out, "compare", paths, _snapshot(cfg), started)


def cmd_synth(cfg, started):
    chain = _read_chain(cfg["model"]) if cfg.get("model") else example_single_chain()
    delta_t = int(cfg["delta_t"])
    if delta_t < 1 or int(cfg["n_pipes"]) < 1 or int(cfg["inspections_per_pipe"]) < 1:
        raise UsageError("--delta-t, --n-pipes and --inspections-per-pipe must be positive")
    try:
        config = SynthesisConfig(chain, int(cfg["n_pipes"]), grid_ages(int(cfg["max_age_years"]), delta_t),
                                 int(cfg["inspections_per_pipe"]), int(cfg["seed"]), delta_t,
                                 cfg.get("damage_code") or "BAF", cfg["material"], cfg["content"],
                                 float(cfg["width_mm"]))
    except ValueError as exc:
        raise UsageError(str(exc))
    pipes_csv, inspections_csv = generate_dataset(config)
    out = _out_dir(cfg)
    _write(out, "pipes.csv", pipes_csv)
    _write(out, "inspections.csv", inspections_csv)
    if not cfg.get("model"):
        _write(out, "truth.json", chain.to_json() + "\n")
    _write_manifest(out, "synth", [cfg["model"]] if cfg.get("model") else [], _snapshot(cfg), started)


def _snapshot(cfg) -> dict:
    return dict(sorted(cfg.items()))


def _common(p: argparse.ArgumentParser):
    p.add_argument("--config", help="JSON file with option values; flags override it")
    p.add_argument("--out-dir")


def _data_options(p: argparse.ArgumentParser):
    p.add_argument("--pipes", help="pipes CSV")
    p.add_argument("--inspections", help="inspections CSV")
    p.add_argument("--cohorts-config", help="cohorts JSON (default: bundled cohorts)")
    p.add_argument("--cohort", help="cohort name; omit to use every pipe")
    p.add_argument("--damage-code")
    p.add_argument("--delta-t", type=int, help="bin width and step length in years (default 3)")
    p.add_argument("--max-age", type=int, help="table horizon in years (default 126)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sewermarkov", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("discretize", help="write the age-binned state-frequency table")
    _common(p)
    _data_options(p)
    p.set_defaults(func=cmd_discretize)

    p = sub.add_parser("calibrate", help="bootstrap-calibrate chains and write bands")
    _common(p)
    _data_options(p)
    p.add_argument("--chain", choices=["single", "multi"])
    p.add_argument("--replicas", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--horizon-years", type=float)
    p.add_argument("--threads", type=int, help="worker processes; does not change results")
    p.add_argument("--max-iterations", type=int)
    p.add_argument("--convergence-tol", type=float)
    p.add_argument("--fix-initial-vector", action="store_true", default=None,
                   help="keep the initial state vector pristine instead of fitting it")
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("project", help="state probabilities and expectation of a chain")
    _common(p)
    p.add_argument("--model", help="chain JSON file")
    p.add_argument("--horizon", type=int, help="number of steps")
    p.set_defaults(func=cmd_project)

    p = sub.add_parser("compare", help="align band curves of several ensembles")
    _common(p)
    p.add_argument("ensembles", nargs="*", help="ensemble JSON files (two or more)")
    p.add_argument("--labels", nargs="+")
    p.add_argument("--horizon-years", type=float)
    p.add_argument("--quantity", help="'expectation' (default) or 'state:<k>'")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("synth", help="simulate pipes and inspections from a chain")
    _common(p)
    p.add_argument("--model", help="chain JSON file (default: built-in reference chain)")
    p.add_argument("--n-pipes", type=int)
    p.add_argument("--max-age-years", type=int)
    p.add_argument("--delta-t", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--inspections-per-pipe", type=int)
    p.add_argument("--damage-code")
    p.add_argument("--material")
    p.add_argument("--content")
    p.add_argument("--width-mm", type=float)
    p.set_defaults(func=cmd_synth)
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    started = time.perf_counter()
    try:
        cfg = _resolve(args)
        args.func(cfg, started)
    except UsageError as exc:
        print(f"sewermarkov {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (EmptyDataError, EmptyTableError) as exc:
        print(f"sewermarkov {args.command}: empty data: {exc}", file=sys.stderr)
        return EXIT_EMPTY
    except EnsembleError as exc:
        print(f"sewermarkov {args.command}: calibration failed: {exc}", file=sys.stderr)
        return EXIT_CALIBRATION
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
