"""Command line runner: ``loopsoup {exact,sample,verify,kn,renewal,perc}``.

Each subcommand reads a JSON config (``--config``), applies flag overrides,
validates the result and writes CSV/JSON files into ``--out``.  Every output
starts with (CSV: a ``#`` comment line) or embeds (JSON) the SHA-256 of the
resolved config and the library version.

Exit codes: 0 ok, 2 invalid config, 3 verification failure, 4 I/O failure.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import sys
from pathlib import Path

import jsonschema
import numpy as np
from scipy import stats

from . import __version__
from .complete import cover_and_coalescence_times, finer_frequency, ks_gumbel, semigroup_finer
from .errors import ConfigInvalid, IOFailure, LoopSoupError, VerificationFailed
from .exact import MAX_EXACT_SUM_VERTICES, prob_equal, prob_finer, prob_finer_exit
from .graph import WeightedGraph, complete_graph, cycle_graph, graph_from_dict, path_graph
from .loops import total_mass
from .partition import Partition, all_partitions
from .percolation import estimate_theta, kappa_threshold_scan, lattice_box
from .renewal import closed_edge_prob, conditional_closed_prob, gap_law, subordinator_limit_check
from .sampler import batch_cluster_labels, build_plan, dump_soup_jsonl, finer_than, load_soup_jsonl, sample_batch
from .stats import binomial_ci, z_score
from .verify import as_records, check_soup_file, require, run_checks

log = logging.getLogger("loopsoup")

EXIT_OK, EXIT_CONFIG, EXIT_VERIFY, EXIT_IO = 0, 2, 3, 4

_pos = {"type": "number", "exclusiveMinimum": 0}
_nonneg = {"type": "number", "minimum": 0}
_count = {"type": "integer", "minimum": 1}
_seed = {"type": "integer", "minimum": 0, "maximum": 2**64 - 1}
_grid = lambda item: {"type": "array", "items": item, "minItems": 1}  # noqa: E731
_blocks = {"type": "array", "items": {"type": "array", "items": {"type": "integer", "minimum": 0}, "minItems": 1}, "minItems": 1}

GRAPH_SCHEMA = {
    "type": "object",
    "oneOf": [
        {"required": ["file"]},
        {"required": ["generator"]},
        {"required": ["n", "edges", "kappa"]},
    ],
    "properties": {
        "file": {"type": "string"},
        "generator": {"enum": ["complete", "path", "cycle", "box"]},
        "n": _count,
        "kappa": {},
        "d": {"type": "integer", "minimum": 1},
        "L": {"type": "integer", "minimum": 2},
        "bc": {"enum": ["free", "torus"]},
    },
}

_common = {"tolerance": _pos, "seed": _seed, "replicas": _count}

SCHEMAS = {
    "exact": {
        "type": "object",
        "required": ["graph", "alpha"],
        "properties": {"graph": GRAPH_SCHEMA, "alpha": _grid(_nonneg), "partitions": _grid(_blocks), **_common},
        "additionalProperties": False,
    },
    "sample": {
        "type": "object",
        "required": ["graph", "alpha", "replicas", "seed"],
        "properties": {
            "graph": GRAPH_SCHEMA,
            "alpha": _nonneg,
            "partitions": _grid(_blocks),
            "eps_tail": _pos,
            "dump_replicas": {"type": "integer", "minimum": 0},
            **_common,
        },
        "additionalProperties": False,
    },
    "verify": {
        "type": "object",
        "properties": {"soup_file": {"type": "string"}, "graph": GRAPH_SCHEMA, **_common},
        "additionalProperties": False,
    },
    "kn": {
        "type": "object",
        "required": ["n", "eps", "t", "replicas", "seed"],
        "properties": {
            "n": {"type": "integer", "minimum": 2},
            "eps": _pos,
            "t": _grid(_nonneg),
            "partitions": _grid(_blocks),
            "times_replicas": {"type": "integer", "minimum": 0},
            **_common,
        },
        "additionalProperties": False,
    },
    "renewal": {
        "type": "object",
        "required": ["kappa", "alpha", "n_max"],
        "properties": {
            "kappa": _pos,
            "alpha": _nonneg,
            "n_max": _count,
            "s_grid": _grid(_pos),
            "eps_grid": _grid(_pos),
            **_common,
        },
        "additionalProperties": False,
    },
    "perc": {
        "type": "object",
        "required": ["d", "L", "alpha", "kappa", "replicas", "seed"],
        "properties": {
            "d": {"type": "integer", "minimum": 2},
            "L": _grid({"type": "integer", "minimum": 4}),
            "bc": {"enum": ["free", "torus"]},
            "alpha": _nonneg,
            "kappa": _nonneg,
            "p_c": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
            "scan": {
                "type": "object",
                "required": ["theta_cut"],
                "properties": {"theta_cut": _pos, "kappa_range": {"type": "array", "items": _pos, "minItems": 2, "maxItems": 2}},
                "additionalProperties": False,
            },
            **_common,
        },
        "additionalProperties": False,
    },
}


# -- config handling ----------------------------------------------------------


def config_hash(config: dict) -> str:
    return hashlib.sha256(json.dumps(config, sort_keys=True, separators=(",", ":")).encode()).hexdigest()


def resolve_config(command: str, path: str | None, overrides: dict) -> dict:
    config: dict = {}
    if path is not None:
        try:
            with open(path) as fh:
                config = json.load(fh)
        except OSError as exc:
            raise IOFailure(f"cannot read config {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigInvalid(f"config {path} is not valid JSON: {exc}") from exc
    if not isinstance(config, dict):
        raise ConfigInvalid("config must be a JSON object")
    config.update({k: v for k, v in overrides.items() if v is not None})
    try:
        jsonschema.validate(config, SCHEMAS[command])
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigInvalid(f"{where}: {exc.message}") from exc
    return config


def make_graph(spec: dict) -> WeightedGraph:
    try:
        if "file" in spec:
            try:
                with open(spec["file"]) as fh:
                    doc = json.load(fh)
            except OSError as exc:
                raise IOFailure(f"cannot read graph {spec['file']}: {exc}") from exc
            return graph_from_dict(doc)
        if "generator" in spec:
            kind = spec["generator"]
            kappa = spec.get("kappa", 1.0)
            if kind == "box":
                return lattice_box(spec.get("d", 2), spec.get("L", 4), float(kappa), spec.get("bc", "free")).graph
            if "n" not in spec:
                raise ConfigInvalid(f"graph generator {kind!r} needs n")
            build = {"complete": complete_graph, "path": path_graph, "cycle": cycle_graph}[kind]
            return build(spec["n"], kappa)
        return graph_from_dict(spec)
    except (ValueError, TypeError) as exc:
        if isinstance(exc, ConfigInvalid):
            raise
        raise ConfigInvalid(f"graph: {exc}") from exc


def make_partitions(spec, n: int) -> list[Partition]:
    if spec is None:
        if n > 8:
            raise ConfigInvalid("partitions must be given for graphs with more than 8 vertices")
        return list(all_partitions(n))
    out = []
    for i, blocks in enumerate(spec):
        try:
            pi = Partition.from_blocks(blocks, n=n)
        except ValueError as exc:
            raise ConfigInvalid(f"partitions[{i}]: {exc}") from exc
        out.append(pi)
    return out


# -- output -------------------------------------------------------------------


class Output:
    def __init__(self, out_dir: str, config: dict, command: str):
        self.dir = Path(out_dir)
        self.config = config
        self.command = command
        self.hash = config_hash(config)
        try:
            self.dir.mkdir(parents=True, exist_ok=True)
        except OSError as exc:
            raise IOFailure(f"cannot create {self.dir}: {exc}") from exc

    def header(self) -> dict:
        return {"command": self.command, "version": __version__, "config_sha256": self.hash, "config": self.config}

    def write_csv(self, name: str, columns: list[str], rows: list[dict]) -> Path:
        path = self.dir / name
        try:
            with open(path, "w", newline="") as fh:
                fh.write(f"# loopsoup {__version__} {self.command} config_sha256={self.hash}\n")
                w = csv.DictWriter(fh, fieldnames=columns, lineterminator="\n")
                w.writeheader()
                for r in rows:
                    w.writerow({k: _fmt(r.get(k)) for k in columns})
        except OSError as exc:
            raise IOFailure(f"cannot write {path}: {exc}") from exc
        return path

    def write_json(self, name: str, body: dict) -> Path:
        path = self.dir / name
        try:
            with open(path, "w") as fh:
                json.dump({**self.header(), **body}, fh, indent=1, sort_keys=True, default=_json_default)
                fh.write("\n")
        except OSError as exc:
            raise IOFailure(f"cannot write {path}: {exc}") from exc
        return path


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, Partition):
        return "|".join(" ".join(str(x) for x in b) for b in v.blocks)
    return v


def _json_default(v):
    if isinstance(v, np.ndarray):
        return v.tolist()
    if isinstance(v, np.generic):
        return v.item()
    if isinstance(v, Partition):
        return v.to_json()
    raise TypeError(f"cannot serialize {type(v).__name__}")


# -- subcommands ----------------------------------------------------------------


def cmd_exact(cfg: dict, out: Output) -> int:
    g = make_graph(cfg["graph"])
    parts = make_partitions(cfg.get("partitions"), g.n)
    rows = []
    for pi in parts:
        for a in cfg["alpha"]:
            rows.append(
                dict(
                    partition=pi,
                    alpha=float(a),
                    prob_finer=prob_finer(g, pi, a),
                    prob_finer_exit=prob_finer_exit(g, pi, a, check=False),
                    prob_equal=prob_equal(g, pi, a) if g.n <= MAX_EXACT_SUM_VERTICES else None,
                )
            )
    out.write_csv("exact.csv", ["partition", "alpha", "prob_finer", "prob_finer_exit", "prob_equal"], rows)
    out.write_json("exact.json", {"n": g.n, "m": g.m, "total_mass": total_mass(g)})
    return EXIT_OK


def cmd_sample(cfg: dict, out: Output) -> int:
    g = make_graph(cfg["graph"])
    plan = build_plan(g, eps_tail=cfg.get("eps_tail", 1e-9))
    a, R, seed = float(cfg["alpha"]), cfg["replicas"], cfg["seed"]
    batch = sample_batch(g, plan, a, R, seed)
    labels = batch_cluster_labels(g, batch.open_edges(g))
    rows = []
    for pi in make_partitions(cfg.get("partitions"), g.n):
        k = int(finer_than(labels, pi).sum())
        exact = prob_finer(g, pi, a)
        lo, hi = binomial_ci(k, R)
        rows.append(dict(partition=pi, alpha=a, finer_hat=k / R, ci_lo=lo, ci_hi=hi, replicas=R, exact=exact, z=z_score(k, R, exact)))
    out.write_csv("sample.csv", ["partition", "alpha", "finer_hat", "ci_lo", "ci_hi", "replicas", "exact", "z"], rows)
    counts = batch.loop_counts()
    out.write_json(
        "sample.json",
        {
            "replicas": R,
            "mean_loops": float(counts.mean()),
            "expected_loops": a * plan.truncated_mass,
            "max_length": plan.max_length,
            "tail_mass_bound": plan.tail_bound,
            "tv_bound": plan.tv_bound(a),
        },
    )
    for r in range(min(cfg.get("dump_replicas", 0), R)):
        try:
            dump_soup_jsonl(batch.soup(r, seed), out.dir / f"soup_{r}.jsonl")
        except OSError as exc:
            raise IOFailure(str(exc)) from exc
    return EXIT_OK


def cmd_verify(cfg: dict, out: Output) -> int:
    checks = run_checks(tol=cfg.get("tolerance", 1e-10), replicas=cfg.get("replicas", 20000), seed=cfg.get("seed", 1))
    if "soup_file" in cfg:
        if "graph" not in cfg:
            raise ConfigInvalid("soup_file needs the graph it was sampled on")
        try:
            soup = load_soup_jsonl(cfg["soup_file"])
        except OSError as exc:
            raise IOFailure(f"cannot read soup {cfg['soup_file']}: {exc}") from exc
        except (ValueError, KeyError) as exc:
            raise ConfigInvalid(f"soup_file: {exc}") from exc
        checks.append(check_soup_file(make_graph(cfg["graph"]), soup))
    out.write_json("verify.json", {"checks": as_records(checks), "passed": all(c.passed for c in checks)})
    for c in checks:
        log.info("%-24s %s  %.3e (limit %.3e)", c.name, "ok" if c.passed else "FAIL", c.value, c.limit)
    require(checks)
    return EXIT_OK


def cmd_kn(cfg: dict, out: Output) -> int:
    n, eps, R, seed = cfg["n"], float(cfg["eps"]), cfg["replicas"], cfg["seed"]
    if "partitions" in cfg:
        parts = make_partitions(cfg["partitions"], n)
    else:
        parts = [Partition.from_blocks([range(n // 2), range(n // 2, n)], n=n)]
    rows = []
    for i, pi in enumerate(parts):
        for j, t in enumerate(cfg["t"]):
            exact = semigroup_finer(n, eps, t, pi.block_sizes())
            hat = finer_frequency(n, eps, t, pi, R, seed + 1000 * i + j)
            k = round(hat * R)
            lo, hi = binomial_ci(k, R)
            rows.append(dict(partition=pi, t=float(t), exact=exact, finer_hat=hat, ci_lo=lo, ci_hi=hi, replicas=R))
    out.write_csv("kn.csv", ["partition", "t", "exact", "finer_hat", "ci_lo", "ci_hi", "replicas"], rows)
    if cfg.get("times_replicas", 0) > 0:
        ts = cover_and_coalescence_times(n, eps, cfg["times_replicas"], seed)
        rows = [
            dict(n=n, epsilon=eps, seed=seed, T_norm=float(a), tau_norm=float(b), n_events=int(k))
            for a, b, k in zip(ts.T_norm, ts.tau_norm, ts.n_events)
        ]
        out.write_csv("kn_times.csv", ["n", "epsilon", "seed", "T_norm", "tau_norm", "n_events"], rows)
        out.write_json(
            "kn_times.json",
            {
                "replicas": cfg["times_replicas"],
                "cover": _ks_summary(ts.T_norm, seed),
                "coalescence": _ks_summary(ts.tau_norm, seed),
            },
        )
    return EXIT_OK


def _ks_summary(x: np.ndarray, seed: int, resamples: int = 1000) -> dict:
    """KS distance to the Gumbel law with a percentile bootstrap band."""
    ks = ks_gumbel(x)
    if len(x) < 2:
        return {"ks": ks, "ci_lo": None, "ci_hi": None, "resamples": 0}
    res = stats.bootstrap((x,), ks_gumbel, n_resamples=resamples, method="percentile", vectorized=False, random_state=np.random.default_rng(seed))
    return {"ks": ks, "ci_lo": float(res.confidence_interval.low), "ci_hi": float(res.confidence_interval.high), "resamples": resamples}


def cmd_renewal(cfg: dict, out: Output) -> int:
    kappa, a, N = float(cfg["kappa"]), float(cfg["alpha"]), cfg["n_max"]
    law = gap_law(kappa, a, N)
    q = np.atleast_1d(conditional_closed_prob(kappa, a, np.arange(1, N + 1)))
    rows = [dict(n=i + 1, q=float(q[i]), nu=float(law.nu[i])) for i in range(N)]
    out.write_csv("renewal.csv", ["n", "q", "nu"], rows)
    body = {"closed_edge_prob": closed_edge_prob(kappa, a), "gap_law_deficit": law.deficit, "clamped_residual": law.clamped_residual}
    if "s_grid" in cfg and "eps_grid" in cfg:
        if not 0 < a < 1:
            raise ConfigInvalid("the limit check needs alpha in (0, 1)")
        body["limit_check"] = [vars(r) for r in subordinator_limit_check(kappa, a, cfg["s_grid"], cfg["eps_grid"])]
    out.write_json("renewal.json", body)
    return EXIT_OK


def cmd_perc(cfg: dict, out: Output) -> int:
    bc = cfg.get("bc", "free")
    est = estimate_theta(cfg["d"], cfg["L"], bc, cfg["alpha"], cfg["kappa"], cfg["replicas"], cfg["seed"], p_c=cfg.get("p_c"))
    out.write_csv("theta.csv", ["d", "L", "bc", "alpha", "kappa", "theta_hat", "ci_lo", "ci_hi", "replicas"], est.csv_rows())
    if "scan" in cfg:
        sc = cfg["scan"]
        br = kappa_threshold_scan(
            cfg["d"], cfg["alpha"], cfg["L"], sc["theta_cut"], cfg["seed"], replicas=cfg["replicas"], kappa_range=tuple(sc.get("kappa_range", (0.01, 10.0)))
        )
        out.write_json("scan.json", {"bracket": vars(br)})
    return EXIT_OK


COMMANDS = {"exact": cmd_exact, "sample": cmd_sample, "verify": cmd_verify, "kn": cmd_kn, "renewal": cmd_renewal, "perc": cmd_perc}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="loopsoup", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        s = sub.add_parser(name)
        s.add_argument("--config", help="JSON config file")
        s.add_argument("--seed", type=int, help="random seed (overrides the config)")
        s.add_argument("--replicas", type=int, help="number of independent replicas (overrides the config)")
        s.add_argument("--out", default=".", help="output directory (default: current)")
        s.add_argument("--tolerance", type=float, help="absolute tolerance for exact identities")
        s.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = resolve_config(args.command, args.config, {"seed": args.seed, "replicas": args.replicas, "tolerance": args.tolerance})
        out = Output(args.out, cfg, args.command)
        return COMMANDS[args.command](cfg, out)
    except ConfigInvalid as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except VerificationFailed as exc:
        print(f"verification failed: {exc}", file=sys.stderr)
        return EXIT_VERIFY
    except (IOFailure, OSError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except LoopSoupError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
