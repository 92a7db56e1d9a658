"""Collective-communication volume model and event-counting simulator.

Volumes are in token-slot units (multiples of B*S); the hidden-dimension and
dtype factors cancel in every ratio this package reports.  The simulator
replays recorded routing decisions against a device layout and counts how
many expert activations cross devices, which cross-checks the analytic
all-to-all term.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .profiles import RequestTrace, TokenExpertMatrix, Topology
from .solver import Assignment

ALL_REDUCE = "all_reduce"
ALL_GATHER = "all_gather"
REDUCE_SCATTER = "reduce_scatter"
ALL_TO_ALL = "all_to_all"
_KINDS = {ALL_REDUCE, ALL_GATHER, REDUCE_SCATTER, ALL_TO_ALL}


class CommError(ValueError):
    pass


@dataclass(frozen=True)
class Stage:
    kind: str
    top_k: int = 1
    alpha: float = 0.0  # local activation rate; only all_to_all uses it

    def __post_init__(self):
        if self.kind not in _KINDS:
            raise CommError(f"unknown collective {self.kind!r}")
        if not 0.0 <= self.alpha <= 1.0:
            raise CommError("alpha must lie in [0, 1]")


@dataclass(frozen=True)
class PipelineSpec:
    stages: tuple
    devices: int
    batch: int = 1
    seq: int = 1

    def __post_init__(self):
        if not self.stages:
            raise CommError("pipeline needs at least one stage")
        if self.devices < 1:
            raise CommError("need at least one device")


@dataclass(frozen=True)
class VolumeReport:
    stage_volumes: tuple
    total: float
    devices: int
    batch: int
    seq: int
    saving: float | None = None


def volume_collective(kind: str, G: int, B: float, S: float, k: int = 1,
                      alpha: float = 0.0) -> float:
    """Per-device volume of one collective over a B*S token-slot payload.

    Ring reductions move (G-1)/G of the payload per direction: all-reduce
    twice, all-gather and reduce-scatter once.  The all-to-all dispatch moves
    the remote fraction (1-alpha) of the k expert copies of each device's
    B*S/G token share.
    """
    if G < 1:
        raise CommError("need at least one device")
    if not 0.0 <= alpha <= 1.0:
        raise CommError("alpha must lie in [0, 1]")
    payload = B * S
    if kind == ALL_REDUCE:
        return 2.0 * (G - 1) * payload / G
    if kind in (ALL_GATHER, REDUCE_SCATTER):
        return (G - 1) * payload / G
    if kind == ALL_TO_ALL:
        return (1.0 - alpha) * k * payload / G
    raise CommError(f"unknown collective {kind!r}")


def pipeline_volume(spec: PipelineSpec) -> VolumeReport:
    """Sum the per-stage volumes of a pipeline."""
    vols = tuple(volume_collective(st.kind, spec.devices, spec.batch,
                                   spec.seq, st.top_k, st.alpha)
                 for st in spec.stages)
    return VolumeReport(stage_volumes=vols, total=float(sum(vols)),
                        devices=spec.devices, batch=spec.batch, seq=spec.seq)


def dense_pipeline(G: int, B: float = 1.0, S: float = 1.0,
                   k: int = 1) -> PipelineSpec:
    """Densely-replicated MoE layer: all-reduce, two dispatch/combine
    all-to-alls at the 1/G natural locality, all-gather."""
    a = 1.0 / G
    return PipelineSpec(stages=(Stage(ALL_REDUCE),
                                Stage(ALL_TO_ALL, top_k=k, alpha=a),
                                Stage(ALL_TO_ALL, top_k=k, alpha=a),
                                Stage(ALL_GATHER)),
                        devices=G, batch=B, seq=S)


def sharded_pipeline(G: int, B: float = 1.0, S: float = 1.0, k: int = 1,
                     alpha: float = 0.0) -> PipelineSpec:
    """Sharded MoE layer: reduce-scatter then two all-to-alls whose cost
    shrinks with the achieved locality alpha."""
    return PipelineSpec(stages=(Stage(REDUCE_SCATTER),
                                Stage(ALL_TO_ALL, top_k=k, alpha=alpha),
                                Stage(ALL_TO_ALL, top_k=k, alpha=alpha)),
                        devices=G, batch=B, seq=S)


def tensor_parallel_pipeline(G: int, B: float = 1.0,
                             S: float = 1.0) -> PipelineSpec:
    """Tensor-parallel dense reference: two all-reduces per layer."""
    return PipelineSpec(stages=(Stage(ALL_REDUCE), Stage(ALL_REDUCE)),
                        devices=G, batch=B, seq=S)


def saving_ratio(reference: VolumeReport, candidate: VolumeReport) -> float:
    """Fractional volume saved by the candidate relative to the reference."""
    if (reference.batch, reference.seq) != (candidate.batch, candidate.seq):
        raise CommError("saving ratio needs matching payload dimensions")
    if reference.total == 0:
        raise CommError("reference pipeline has zero volume")
    return (reference.total - candidate.total) / reference.total


def sweep_alpha(G: int, k: int, steps: int, B: float = 1.0,
                S: float = 1.0) -> list[dict]:
    """Evaluate both pipelines over a uniform locality grid.

    Returns rows of (alpha, dense volume, sharded volume, saving); the
    sharded volume is affine decreasing in alpha with slope -2kBS/G.
    """
    if steps < 2:
        raise CommError("need at least two sweep points")
    dense = pipeline_volume(dense_pipeline(G, B, S, k))
    rows = []
    prev = None
    for a in np.linspace(0.0, 1.0, steps):
        sharded = pipeline_volume(sharded_pipeline(G, B, S, k, float(a)))
        if prev is not None and sharded.total >= prev:
            raise CommError("sharded volume failed to decrease with alpha")
        prev = sharded.total
        rows.append({"alpha": float(a), "dense_volume": dense.total,
                     "sharded_volume": sharded.total,
                     "saving": saving_ratio(dense, sharded)})
    return rows


def vanilla_token_labels(matrix: TokenExpertMatrix,
                         topology: Topology) -> np.ndarray:
    """Token labels implied by the contiguous expert layout: each token goes
    to the device block holding most of its activation mass."""
    E = topology.clusters
    npc = topology.experts_per_cluster
    counts = matrix.counts.astype(np.int64)
    mass = counts.reshape(counts.shape[0], E, npc).sum(axis=2)
    return mass.argmax(axis=1).astype(np.int64)


MODES = ("ds_moe", "s_ts", "s_ts_eg")


def simulate_layer(trace: RequestTrace, topology: Topology, mode: str,
                   layer: int, assign: Assignment | None = None,
                   train_matrix: TokenExpertMatrix | None = None) -> dict:
    """Replay one layer's recorded routing against a device layout.

    ds_moe: contiguous expert blocks, tokens sharded by arrival position.
    s_ts: contiguous expert blocks, tokens shuffled to the block holding
    most of their profiled mass (needs train_matrix).  s_ts_eg: tokens and
    experts both follow the solved assignment.  Each of a token's k routed
    experts counts as one event; an event is local when the expert sits on
    the token's device.
    """
    if mode not in MODES:
        raise CommError(f"unknown simulation mode {mode!r}")
    routed = trace.all_routed()
    if routed.size == 0:
        raise CommError("trace carries no routed ground truth")
    if not 0 <= layer < routed.shape[1]:
        raise CommError("layer index out of range")
    E = topology.clusters
    npc = topology.experts_per_cluster
    tokens = trace.all_tokens()
    experts = routed[:, layer, :]          # (occ, k)
    if experts.max() >= topology.experts:
        raise CommError("routed expert id exceeds the topology")

    if mode == "ds_moe":
        expert_dev = np.arange(topology.experts) // npc
        token_dev = np.arange(len(tokens)) % E
    elif mode == "s_ts":
        if train_matrix is None:
            raise CommError("s_ts needs the profiled activation matrix")
        expert_dev = np.arange(topology.experts) // npc
        token_dev = vanilla_token_labels(train_matrix, topology)[tokens]
    else:
        if assign is None:
            raise CommError("s_ts_eg needs a solved assignment")
        expert_dev = assign.expert_labels
        token_dev = assign.token_labels[tokens]

    local = int((expert_dev[experts] == token_dev[:, None]).sum())
    total = int(experts.size)
    remote = total - local
    alpha = local / total
    occ = len(tokens)
    k = experts.shape[1]
    report = pipeline_volume(sharded_pipeline(E, B=1.0, S=float(occ), k=k,
                                              alpha=alpha))
    a2a_events = 2.0 * remote / E  # both all-to-all stages, per device
    return {"mode": mode, "layer": layer, "local_tokens": local,
            "remote_tokens": remote, "measured_alpha": alpha,
            "a2a_event_volume": a2a_events,
            "pipeline_volume": report.total, "occurrences": occ,
            "stage_volumes": report.stage_volumes}


def simulate_trace(trace: RequestTrace, topology: Topology,
                   assign: Assignment | None = None,
                   train_matrix: TokenExpertMatrix | None = None,
                   modes=MODES) -> list[dict]:
    """simulate_layer over every layer and requested mode, with the dense
    pipeline as the saving reference."""
    routed = trace.all_routed()
    if routed.size == 0:
        raise CommError("trace carries no routed ground truth")
    layers = routed.shape[1]
    k = routed.shape[2]
    occ = len(trace.all_tokens())
    dense = pipeline_volume(dense_pipeline(topology.clusters, B=1.0,
                                           S=float(occ), k=k))
    rows = []
    for mode in modes:
        for layer in range(layers):
            row = simulate_layer(trace, topology, mode, layer, assign,
                                 train_matrix)
            row["saving"] = (dense.total - row["pipeline_volume"]) / dense.total
            rows.append(row)
    return rows
