"""Command-line front end for reproducible experiment runs.

Subcommands: synth, ingest, solve, evaluate, simulate, sweep.  Every command
writes deterministic JSON/CSV into an output directory plus a manifest of
content hashes; identical config + seed gives byte-identical payloads (wall
time goes to stderr, never into files).

Exit codes: 0 success, 1 validation failure, 2 I/O failure.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import sys
import time
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from . import comm, predictor, profiles, scheduler, solver, tables


@dataclass
class ExperimentConfig:
    topology: str | None = None
    trace: str | None = None
    embeddings: str | None = None
    bundle: str | None = None
    out: str = "run"
    seed: int = 0
    solver: str = "ceo"
    theta: float = 0.5
    steps: int = 60
    samples: int = 64
    eta: float = 0.7
    ngram: int = 2
    split: float = 0.25
    noise: float = 0.0
    tokens_per_cluster: int = 50
    reps: int = 8
    G: int = 4
    k: int = 2
    sweep_steps: int = 11


def _apply_config_file(cfg: ExperimentConfig, path: str) -> ExperimentConfig:
    with open(path) as fh:
        overrides = json.load(fh)
    known = {f.name for f in fields(ExperimentConfig)}
    unknown = set(overrides) - known
    if unknown:
        raise ValueError(f"unknown config keys: {sorted(unknown)}")
    for key, val in overrides.items():
        setattr(cfg, key, val)
    return cfg


def _write_json(path: Path, payload) -> None:
    path.write_text(json.dumps(payload, sort_keys=True, indent=2) + "\n")


def _write_manifest(out: Path) -> None:
    entries = {}
    for p in sorted(out.iterdir()):
        if p.name == "manifest.json" or not p.is_file():
            continue
        entries[p.name] = hashlib.sha256(p.read_bytes()).hexdigest()
    _write_json(out / "manifest.json", {"artifacts": entries})


def _load_topology(cfg: ExperimentConfig) -> profiles.Topology:
    if cfg.topology is None:
        raise ValueError("a topology config file is required (--topology)")
    return profiles.Topology.from_config(cfg.topology)


def _aggregate_matrix(mats) -> profiles.TokenExpertMatrix:
    total = np.zeros(mats[0].counts.shape, dtype=np.int64)
    for m in mats:
        total += m.counts.astype(np.int64)
    return profiles.TokenExpertMatrix(layer=-1, counts=total)


def cmd_synth(cfg: ExperimentConfig) -> int:
    topo = _load_topology(cfg)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    mats, trace, truth = profiles.synthesize_planted_profile(
        topo, cfg.noise, cfg.tokens_per_cluster, cfg.seed, cfg.reps)
    profiles.emit_profile(out / "trace.jsonl", trace=trace)
    topo.to_config(out / "topology.cfg")
    emb = profiles.synthesize_embeddings(truth["token_labels"],
                                         topo.clusters, dim=16, seed=cfg.seed)
    profiles.write_embeddings(out / "embeddings.bin", emb)
    with open(out / "truth_labels.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["token", "cluster"])
        for tok in np.nonzero(truth["token_labels"] >= 0)[0]:
            writer.writerow([int(tok), int(truth["token_labels"][tok])])
    with open(out / "truth_experts.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["expert", "cluster"])
        for e, c in enumerate(truth["expert_labels"]):
            writer.writerow([int(e), int(c)])
    _write_manifest(out)
    print(f"wrote planted profile to {out}")
    return 0


def cmd_ingest(cfg: ExperimentConfig) -> int:
    topo = _load_topology(cfg)
    if cfg.trace is None:
        raise ValueError("--trace is required")
    mats, trace = profiles.ingest_profile(cfg.trace, topo)
    problems = []
    for m in mats:
        problems.extend(profiles.validate(m))
    summary = {
        "layers": len(mats),
        "requests": len(trace.requests),
        "occurrences": trace.n_occurrences,
        "distinct_tokens": _aggregate_matrix(mats).t,
        "total_events": int(sum(m.total for m in mats)),
        "has_routing": trace.routed is not None,
        "problems": problems,
    }
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "ingest.json", summary)
    _write_manifest(out)
    print(json.dumps(summary, sort_keys=True))
    return 0 if not problems else 1


def _solve(cfg: ExperimentConfig, topo, mats, trace):
    matrix = _aggregate_matrix(mats)
    config = solver.SolverConfig(theta=cfg.theta, n_steps=cfg.steps,
                                 n_samples=cfg.samples, eta=cfg.eta,
                                 seed=cfg.seed)
    name = cfg.solver
    if name == "ceo":
        assign, _ = solver.solve_ceo(matrix, config, topo)
    elif name == "alternating":
        assign, _ = solver.solve_alternating(matrix, trace, config, topo)
    elif name == "kmeans":
        assign = solver.baseline_two_stage_kmeans(matrix, topo, cfg.seed)
    elif name == "round_robin":
        assign = solver.baseline_round_robin(topo)
    elif name == "bruteforce":
        assign, _ = solver.solve_bruteforce(matrix, topo, cfg.theta)
    else:
        raise ValueError(f"unknown solver {name!r}")
    return matrix, assign


def _build_bundle(topo, matrix, trace, assign, n: int) -> scheduler.LookupBundle:
    counts = matrix.counts.astype(np.float64)
    freq = counts.sum(axis=1)
    mass = np.zeros((counts.shape[0], topo.clusters))
    for c in range(topo.clusters):
        cols = assign.expert_labels == c
        if cols.any():
            mass[:, c] = counts[:, cols].sum(axis=1)
    conf = np.divide(mass[np.arange(len(freq)), assign.token_labels], freq,
                     out=np.zeros_like(freq), where=freq > 0)
    token_table = predictor.token_table_from_assignment(
        assign.token_labels, conf, topo.clusters, matrix.seen)
    if trace.routed is not None:
        ngram = predictor.build_ngram_table(trace, assign.expert_labels, n)
    else:
        E = topo.clusters
        ngram = predictor.DeviceNGramTable(
            n=n, n_clusters=E, probs=np.zeros((E ** n, E)),
            counts=np.zeros((E ** n, E), dtype=np.int64))
    return scheduler.LookupBundle(token_table=token_table, ngram_table=ngram,
                                  expert_labels=assign.expert_labels,
                                  layers=topo.layers)


def cmd_solve(cfg: ExperimentConfig) -> int:
    topo = _load_topology(cfg)
    if cfg.trace is None:
        raise ValueError("--trace is required")
    started = time.monotonic()
    mats, trace = profiles.ingest_profile(cfg.trace, topo)
    matrix, assign = _solve(cfg, topo, mats, trace)
    violations = solver.check_constraints(assign, topo)
    if violations:
        raise ValueError("solver produced an infeasible assignment: "
                         + "; ".join(violations))
    obj = solver.objective(assign, matrix, cfg.theta)
    quality = solver.metrics(assign, matrix)
    bundle = _build_bundle(topo, matrix, trace, assign, cfg.ngram)

    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    tables.write_bundle(out / "bundle.bin", bundle)
    tables.export_token_csv(out / "token_table.csv", bundle)
    mem = scheduler.bundle_memory(bundle)
    summary = {
        "solver": cfg.solver,
        "seed": cfg.seed,
        "objective": {"l1": obj.l1, "l2": obj.l2, "theta": obj.theta,
                      "combined": obj.combined},
        "lar": quality["lar"],
        "imbalance": quality["imbalance"],
        "distinct_tokens": matrix.t,
        "memory_bytes": mem,
    }
    _write_json(out / "solve.json", summary)
    _write_manifest(out)
    print(json.dumps(summary, sort_keys=True))
    print(f"solve wall time: {time.monotonic() - started:.2f}s",
          file=sys.stderr)
    return 0


def cmd_evaluate(cfg: ExperimentConfig) -> int:
    topo = _load_topology(cfg)
    if cfg.trace is None:
        raise ValueError("--trace is required")
    mats, trace = profiles.ingest_profile(cfg.trace, topo)
    if trace.routed is None:
        raise ValueError("evaluation needs routed ground truth in the trace")
    train, hold = profiles.split_trace(trace, cfg.split, cfg.seed)
    train_mat = _aggregate_matrix(profiles.matrices_from_trace(train, topo))
    hold_mat = _aggregate_matrix(profiles.matrices_from_trace(hold, topo))
    conf = predictor.build_confidence_table(train_mat)
    scores = predictor.evaluate_predictor(conf, hold_mat, topo.top_k)
    kurt = predictor.activation_kurtosis(train_mat)
    finite = kurt[np.isfinite(kurt)]
    quantiles = ({q: float(np.quantile(finite, float(q)))
                  for q in ("0.1", "0.5", "0.9")} if finite.size else {})
    report = {
        "split": cfg.split,
        "seed": cfg.seed,
        "top_k": topo.top_k,
        "precision": scores["precision"],
        "f1": scores["f1"],
        "set_precision": scores["set_precision"],
        "set_recall": scores["set_recall"],
        "holdout_events": scores["events"],
        "kurtosis_quantiles": quantiles,
        "kurtosis_infinite_fraction": float(np.isinf(kurt).sum()
                                            / max(train_mat.t, 1)),
    }
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "evaluate.json", report)
    _write_manifest(out)
    print(json.dumps(report, sort_keys=True))
    return 0


def cmd_simulate(cfg: ExperimentConfig) -> int:
    topo = _load_topology(cfg)
    if cfg.trace is None or cfg.bundle is None:
        raise ValueError("--trace and --bundle are required")
    mats, trace = profiles.ingest_profile(cfg.trace, topo)
    if trace.routed is None:
        raise ValueError("simulation needs routed ground truth in the trace")
    bundle = tables.read_bundle(cfg.bundle)
    assign = solver.Assignment(
        token_labels=bundle.token_table.labels.astype(np.int64),
        expert_labels=bundle.expert_labels.astype(np.int64))
    train_matrix = _aggregate_matrix(mats)
    rows = comm.simulate_trace(trace, topo, assign, train_matrix)

    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "simulate.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["mode", "layer", "alpha", "remote_tokens",
                         "volume_total", "saving"])
        for row in rows:
            writer.writerow([row["mode"], row["layer"],
                             f"{row['measured_alpha']:.6f}",
                             row["remote_tokens"],
                             f"{row['pipeline_volume']:.6f}",
                             f"{row['saving']:.6f}"])
    aggregate = {}
    for mode in comm.MODES:
        sel = [r for r in rows if r["mode"] == mode]
        local = sum(r["local_tokens"] for r in sel)
        remote = sum(r["remote_tokens"] for r in sel)
        aggregate[mode] = {
            "measured_alpha": local / (local + remote),
            "remote_tokens": remote,
            "volume_total": sum(r["pipeline_volume"] for r in sel),
            "saving": sum(r["saving"] for r in sel) / len(sel),
        }
    _write_json(out / "simulate.json", aggregate)
    _write_manifest(out)
    print(json.dumps(aggregate, sort_keys=True))
    return 0


def cmd_sweep(cfg: ExperimentConfig) -> int:
    rows = comm.sweep_alpha(cfg.G, cfg.k, cfg.sweep_steps)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "sweep.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["alpha", "dense_volume", "sharded_volume", "saving"])
        for row in rows:
            writer.writerow([f"{row['alpha']:.6f}",
                             f"{row['dense_volume']:.6f}",
                             f"{row['sharded_volume']:.6f}",
                             f"{row['saving']:.6f}"])
    summary = {"G": cfg.G, "k": cfg.k, "steps": cfg.sweep_steps,
               "min_saving": min(r["saving"] for r in rows),
               "max_saving": max(r["saving"] for r in rows)}
    _write_json(out / "sweep.json", summary)
    _write_manifest(out)
    print(json.dumps(summary, sort_keys=True))
    return 0


_COMMANDS = {"synth": cmd_synth, "ingest": cmd_ingest, "solve": cmd_solve,
             "evaluate": cmd_evaluate, "simulate": cmd_simulate,
             "sweep": cmd_sweep}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="moesched",
        description="Model-data collaborative MoE scheduling toolkit")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in _COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="JSON file overriding other flags")
        p.add_argument("--topology", help="key=value topology config file")
        p.add_argument("--trace", help="JSONL activation trace")
        p.add_argument("--embeddings", help="embedding table file")
        p.add_argument("--bundle", help="serialized lookup bundle")
        p.add_argument("--out", default="run", help="output directory")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--solver", default="ceo",
                       choices=["ceo", "alternating", "kmeans",
                                "round_robin", "bruteforce"])
        p.add_argument("--theta", type=float, default=0.5)
        p.add_argument("--steps", type=int, default=60)
        p.add_argument("--samples", type=int, default=64)
        p.add_argument("--eta", type=float, default=0.7)
        p.add_argument("--ngram", type=int, default=2)
        p.add_argument("--split", type=float, default=0.25)
        p.add_argument("--noise", type=float, default=0.0)
        p.add_argument("--tokens-per-cluster", type=int, default=50,
                       dest="tokens_per_cluster")
        p.add_argument("--reps", type=int, default=8)
        p.add_argument("--G", type=int, default=4)
        p.add_argument("--k", type=int, default=2)
        p.add_argument("--sweep-steps", type=int, default=11,
                       dest="sweep_steps")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    cfg = ExperimentConfig(**{f.name: getattr(args, f.name)
                              for f in fields(ExperimentConfig)})
    try:
        if args.config:
            cfg = _apply_config_file(cfg, args.config)
        return _COMMANDS[args.command](cfg)
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return 2
    except (ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
