"""Command-line driver for fitting, updating, deriving, comparing and timing.

Every subcommand reads an optional JSON config (``--config``); flags given on
the command line override it. Randomness comes from one root seed: child
seeds are spawned from ``numpy.random.SeedSequence(seed)`` in the fixed order
``[em, synth-history, synth-new, js]``.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time
from dataclasses import replace
from pathlib import Path
from typing import Optional

import numpy as np
import pandas as pd

from . import __version__
from .consensus import ConsensusConfig, build_topology, load_topology, nine_node_topology, save_topology
from .dataio import load_csv, make_truth, synth_from_gmm, write_csv
from .em import EmConfig, fit_em, time_refit
from .gmm import Gmm, Mixture1D, condition_centralized
from .igmm import IgmmConfig, igmm_step
from .metrics import js_divergence, rse
from .node import DistributedScheme, NodeParams, SchemeConfig, reassemble_from_snapshots

log = logging.getLogger("dimgmm")

SEED_SLOTS = ("em", "synth-history", "synth-new", "js")


class CliError(RuntimeError):
    pass


def child_seed(root: int, slot: str) -> int:
    seq = np.random.SeedSequence(root).spawn(len(SEED_SLOTS))[SEED_SLOTS.index(slot)]
    return int(seq.generate_state(1)[0])


# ---------------------------------------------------------------------------
# config and io helpers
# ---------------------------------------------------------------------------


def load_config(args) -> dict:
    cfg = {}
    if getattr(args, "config", None):
        cfg = json.loads(Path(args.config).read_text())
        if not isinstance(cfg, dict):
            raise CliError("config must be a JSON object")
    if getattr(args, "seed", None) is not None:
        cfg["seed"] = args.seed
    cfg.setdefault("seed", 0)
    return cfg


def _num_sites(path) -> int:
    cols = list(pd.read_csv(path, nrows=0).columns)
    if len(cols) < 3 or (len(cols) - 1) % 2:
        raise CliError(f"{path}: expected timestamp plus power/forecast column pairs")
    return (len(cols) - 1) // 2


def read_data(path, cfg: dict):
    if path is None:
        raise CliError("--data is required")
    caps = cfg.get("capacities") or [1.0] * _num_sites(path)
    return load_csv(path, caps, check_range=cfg.get("check_range", True))


def read_model(path) -> Gmm:
    return Gmm.from_dict(json.loads(Path(path).read_text()))


def write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def out_dir(args) -> Path:
    d = Path(args.out_dir)
    d.mkdir(parents=True, exist_ok=True)
    return d


def em_config(cfg: dict) -> EmConfig:
    opts = dict(cfg.get("em", {}))
    opts.setdefault("seed", child_seed(cfg["seed"], "em"))
    return EmConfig(**opts)


def igmm_config(cfg: dict, data: np.ndarray) -> IgmmConfig:
    opts = dict(cfg.get("igmm", {}))
    if "initial_covariance" not in opts:
        fraction = opts.pop("initial_spread_fraction", 0.1)
        return IgmmConfig.from_data(data, fraction=fraction, **opts)
    opts.pop("initial_spread_fraction", None)
    return IgmmConfig.from_dict(opts)


def scheme_config(cfg: dict, data: np.ndarray) -> SchemeConfig:
    return SchemeConfig(
        igmm=igmm_config(cfg, data),
        consensus=ConsensusConfig(**cfg.get("consensus", {})),
        batching=cfg.get("batching", "scalar"),
    )


def default_topology(num_nodes: int):
    if num_nodes == 9:
        return nine_node_topology()
    if num_nodes == 1:
        return build_topology([], 1)
    if num_nodes == 2:
        return build_topology([(0, 1)], 2)
    return build_topology([(m, (m + 1) % num_nodes) for m in range(num_nodes)], num_nodes)


def read_topology(args, num_nodes: int):
    if getattr(args, "topology", None):
        topo = load_topology(args.topology)
        if topo.num_nodes != num_nodes:
            raise CliError(f"topology has {topo.num_nodes} nodes, model has {num_nodes} sites")
        return topo
    log.info("no --topology given; using the default %d-node graph", num_nodes)
    return default_topology(num_nodes)


def parse_y0(text: str, num_sites: int) -> np.ndarray:
    y0 = np.array([float(v) for v in text.split(",")])
    if y0.shape != (num_sites,):
        raise CliError(f"--y0 needs {num_sites} comma-separated values, got {y0.size}")
    return y0


def curve_rows(mixtures: list[Mixture1D], num: int = 2001) -> list[list]:
    rows = []
    for m, mix in enumerate(mixtures):
        grid = mix.grid(num)
        for g, f, c in zip(grid, mix.pdf(grid), mix.cdf(grid)):
            rows.append([m + 1, repr(float(g)), repr(float(f)), repr(float(c))])
    return rows


def write_curves(path: Path, mixtures: list[Mixture1D]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["site", "error", "pdf", "cdf"])
        w.writerows(curve_rows(mixtures))


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_synth(args, cfg: dict) -> dict:
    truth = make_truth(args.sites, args.components, cfg["seed"])
    hist = synth_from_gmm(truth, args.history, child_seed(cfg["seed"], "synth-history"))
    source = make_truth(args.sites, args.components, cfg["seed"], shift=args.shift) if args.shift else truth
    start = str(hist.timestamps[-1] + np.timedelta64(3600, "s"))
    new = synth_from_gmm(source, args.new, child_seed(cfg["seed"], "synth-new"), start=start)
    d = out_dir(args)
    caps = [1.0] * args.sites
    write_csv(hist, d / "history.csv", caps)
    write_csv(new, d / "new.csv", caps)
    write_json(d / "truth.json", truth.to_dict())
    # Gaussian tails can leave the per-unit range, so the companion config skips that check
    write_json(d / "config.json", {"seed": cfg["seed"], "check_range": False})
    return {"history": str(d / "history.csv"), "new": str(d / "new.csv"), "truth": str(d / "truth.json"),
            "config": str(d / "config.json")}


def cmd_fit_em(args, cfg: dict) -> dict:
    data = read_data(args.data, cfg)
    ecfg = em_config(cfg)
    if args.components:
        ecfg = replace(ecfg, num_components=args.components)
    gmm, trace = fit_em(data.joint, ecfg)
    d = out_dir(args)
    write_json(d / "model.json", gmm.to_dict())
    with open(d / "trace.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iteration", "log_likelihood"])
        w.writerows([i, repr(v)] for i, v in enumerate(trace))
    return {"components": gmm.num_components, "iterations": len(trace), "log_likelihood": trace[-1]}


def _snapshot_path(d: Path, n: int) -> Path:
    return d / "snapshots" / f"model_{n:06d}.json"


def cmd_run_centralized(args, cfg: dict) -> dict:
    gmm = read_model(args.model)
    data = read_data(args.data, cfg)
    stream = data.joint
    icfg = igmm_config(cfg, stream)
    d = out_dir(args)
    every = args.snapshot_every
    write_json(_snapshot_path(d, 0), gmm.to_dict())
    outcomes = []
    for n, u in enumerate(stream, start=1):
        gmm, res = igmm_step(gmm, u, icfg)
        outcomes.append([n, res.kind, repr(float(np.min(res.d_squared))) if res.d_squared.size else "inf"])
        if every and n % every == 0:
            write_json(_snapshot_path(d, n), gmm.to_dict())
    write_json(d / "model.json", gmm.to_dict())
    with open(d / "outcomes.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["update", "kind", "min_d_squared"])
        w.writerows(outcomes)
    created = sum(1 for o in outcomes if o[1] == "created")
    return {"updates": len(outcomes), "created": created, "components": gmm.num_components}


def cmd_run_distributed(args, cfg: dict) -> dict:
    gmm = read_model(args.model)
    data = read_data(args.data, cfg)
    M = gmm.num_participants
    topo = read_topology(args, M)
    scheme = DistributedScheme(gmm, topo, scheme_config(cfg, data.joint))
    d = out_dir(args)
    every = args.snapshot_every
    write_json(_snapshot_path(d, 0), scheme.reassemble().to_dict())
    for n, u in enumerate(data.joint, start=1):
        scheme.update_step(u)
        if every and n % every == 0:
            write_json(_snapshot_path(d, n), scheme.reassemble().to_dict())
    for snap in scheme.snapshots():
        write_json(d / "nodes" / f"node_{snap['index']:02d}.json", snap)
    write_json(d / "model.json", scheme.reassemble().to_dict())
    save_topology(topo, d / "topology.json")
    summary = {"updates": len(data), "components": scheme.num_components, "disagreement": scheme.disagreement()}
    if args.y0:
        conds = scheme.derive(parse_y0(args.y0, M))
        write_json(d / "conditionals.json", [c.to_dict() for c in conds])
        write_curves(d / "curves.csv", [c.error_mixture() for c in conds])
    stats = scheme.stats.to_dict()
    write_json(d / "stats.json", stats)
    summary.update({k: stats[k] for k in ("messages_total", "scalars_total", "phases", "rounds_total")})
    return summary


def cmd_derive(args, cfg: dict) -> dict:
    src = Path(args.model)
    d = out_dir(args)
    if src.is_dir():
        params = [NodeParams.from_dict(json.loads(p.read_text())) for p in sorted(src.glob("node_*.json"))]
        if not params:
            raise CliError(f"{src} holds no node_*.json snapshots")
        M = len(params)
        y0 = parse_y0(args.y0, M)
        topo = read_topology(args, M)
        scheme = DistributedScheme.from_params(params, topo, scheme_config(cfg, np.zeros((1, 2 * M))))
        mixtures = [c.error_mixture() for c in scheme.derive(y0)]
        how = "distributed"
    else:
        gmm = read_model(src)
        y0 = parse_y0(args.y0, gmm.num_participants)
        cond = condition_centralized(gmm, y0)
        mixtures = [cond.error_mixture(m) for m in range(gmm.num_participants)]
        how = "centralized"
    write_curves(d / "curves.csv", mixtures)
    return {"sites": len(mixtures), "method": how}


def _load_artifact(path):
    p = Path(path)
    if p.is_dir():
        params = [NodeParams.from_dict(json.loads(q.read_text())) for q in sorted(p.glob("node_*.json"))]
        if not params:
            raise CliError(f"{p} holds no node_*.json snapshots")
        return reassemble_from_snapshots(params)
    if p.suffix == ".csv":
        return pd.read_csv(p)
    return read_model(p)


def cmd_compare(args, cfg: dict) -> dict:
    a, b = _load_artifact(args.a), _load_artifact(args.b)
    if args.metric == "js":
        if not (isinstance(a, Gmm) and isinstance(b, Gmm)):
            raise CliError("js compares two models")
        value = js_divergence(a, b, samples=args.samples, seed=child_seed(cfg["seed"], "js"))
        result = {"metric": "js", "bits": value}
    else:
        if not (isinstance(a, pd.DataFrame) and isinstance(b, pd.DataFrame)):
            raise CliError("rse compares two curves CSV files")
        per_site = {}
        for site, ga in a.groupby("site"):
            gb = b[b["site"] == site]
            if gb.empty:
                raise CliError(f"site {site} missing from {args.b}")
            other = np.interp(ga["error"], gb["error"], gb["cdf"])
            per_site[int(site)] = rse(other, ga["cdf"].to_numpy())
        result = {"metric": "rse", "percent": per_site, "max_percent": max(per_site.values())}
    if args.out_dir:
        write_json(out_dir(args) / "metrics.json", result)
    return result


def cmd_bench(args, cfg: dict) -> dict:
    data = read_data(args.data, cfg)
    joint = data.joint
    split = args.split or cfg.get("split_index") or len(joint) // 2
    updates = args.updates
    hist, new = joint[:split], joint[split:split + updates]
    if new.shape[0] < updates:
        raise CliError(f"only {new.shape[0]} rows after the split, need {updates}")
    ecfg = em_config(cfg)
    idx, em_times = time_refit(hist, new, ecfg)
    gmm, _ = fit_em(hist, ecfg)
    gmm.accumulators = gmm.weights * hist.shape[0]
    icfg = igmm_config(cfg, hist)
    inc_times = []
    for u in new:
        start = time.perf_counter()
        gmm, _ = igmm_step(gmm, u, icfg)
        inc_times.append(time.perf_counter() - start)
    d = out_dir(args)
    with open(d / "timing.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["update", "method", "seconds"])
        for n, t in zip(idx, em_times):
            w.writerow([int(n), "em-refit", repr(float(t))])
        for n, t in enumerate(inc_times, start=1):
            w.writerow([n, "incremental", repr(float(t))])
    return {"updates": updates, "em_mean": float(np.mean(em_times)), "incremental_mean": float(np.mean(inc_times))}


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file")
    common.add_argument("--seed", type=int, help="root seed (overrides config)")
    common.add_argument("--out-dir", default=".", help="output directory")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="dimgmm", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", parents=[common], help="write synthetic history/new CSVs")
    s.add_argument("--sites", type=int, default=9)
    s.add_argument("--components", type=int, default=3)
    s.add_argument("--history", type=int, default=960)
    s.add_argument("--new", type=int, default=960)
    s.add_argument("--shift", type=float, default=0.0, help="mean shift of the new rows")
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("fit-em", parents=[common], help="batch EM on a CSV")
    s.add_argument("--data", required=True)
    s.add_argument("--components", type=int, help="number of components (overrides em.num_components)")
    s.set_defaults(func=cmd_fit_em)

    for name, func in (("run-centralized-igmm", cmd_run_centralized), ("run-distributed", cmd_run_distributed)):
        s = sub.add_parser(name, parents=[common], help="stream new rows into a model")
        s.add_argument("--model", required=True)
        s.add_argument("--data", required=True)
        s.add_argument("--snapshot-every", type=int, default=96)
        if func is cmd_run_distributed:
            s.add_argument("--topology")
            s.add_argument("--y0", help="comma-separated forecast vector to derive at the end")
        s.set_defaults(func=func)

    s = sub.add_parser("derive", parents=[common], help="conditional error curves")
    s.add_argument("--model", required=True, help="model JSON or directory of node snapshots")
    s.add_argument("--y0", required=True)
    s.add_argument("--topology")
    s.set_defaults(func=cmd_derive)

    s = sub.add_parser("compare", parents=[common], help="JS between models or RSE between curves")
    s.add_argument("a")
    s.add_argument("b")
    s.add_argument("--metric", choices=("js", "rse"), default="js")
    s.add_argument("--samples", type=int, default=100_000)
    s.set_defaults(func=cmd_compare, out_dir=None)

    s = sub.add_parser("bench", parents=[common], help="EM-refit vs incremental timing")
    s.add_argument("--data", required=True)
    s.add_argument("--split", type=int)
    s.add_argument("--updates", type=int, default=160)
    s.set_defaults(func=cmd_bench)
    return p


def main(argv: Optional[list[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args)
        result = args.func(args, cfg)
    except Exception as exc:  # report every failure as JSON
        sys.stderr.write(json.dumps({"error": type(exc).__name__, "message": str(exc)}) + "\n")
        return 1
    sys.stdout.write(json.dumps(result, sort_keys=True) + "\n")
    return 0


if __name__ == "__main__":
    sys.exit(main())
