import numpy as np
import pytest

from moesched import comm, profiles, solver
from conftest import aggregate


def closed_form_dense(G, B, S, k):
    return 3 * B * S * (G - 1) / G + 2 * B * S * k * (G - 1) / G ** 2


def closed_form_sharded(G, B, S, k, alpha):
    return B * S * (G - 1) / G + 2 * B * S * k * (1 - alpha) / G


def test_collective_formulas():
    assert comm.volume_collective("all_reduce", 2, 1, 1) == 1.0
    assert comm.volume_collective("all_to_all", 4, 1, 1, k=2, alpha=1.0) == 0.0
    # the natural-locality all-to-all term of the dense pipeline
    G, B, S, k = 8, 3, 5, 2
    v = comm.volume_collective("all_to_all", G, B, S, k=k, alpha=1 / G)
    assert v == pytest.approx(B * S * k * (G - 1) / G ** 2, abs=1e-12)


def test_collective_rejects_bad_alpha():
    with pytest.raises(comm.CommError):
        comm.volume_collective("all_to_all", 4, 1, 1, alpha=1.5)
    with pytest.raises(comm.CommError):
        comm.volume_collective("ring_exchange", 4, 1, 1)


def test_pipeline_closed_forms():
    for G in (2, 4, 8, 16):
        for k in (1, 2, 6):
            dense = comm.pipeline_volume(comm.dense_pipeline(G, 1, 1, k))
            assert dense.total == pytest.approx(closed_form_dense(G, 1, 1, k),
                                                abs=1e-12)
            for alpha in np.linspace(0, 1, 11):
                rep = comm.pipeline_volume(
                    comm.sharded_pipeline(G, 1, 1, k, float(alpha)))
                assert rep.total == pytest.approx(
                    closed_form_sharded(G, 1, 1, k, alpha), abs=1e-12)


def test_pipeline_point_values():
    # dense at G=8, k=1 equals 3 - 1/8 - 2/64
    dense = comm.pipeline_volume(comm.dense_pipeline(8, 1, 1, 1))
    assert dense.total == pytest.approx(2.84375, abs=1e-12)
    sharded = comm.pipeline_volume(comm.sharded_pipeline(8, 1, 1, 6, 1.0))
    assert sharded.total == pytest.approx(0.875, abs=1e-12)


def test_saving_ratio_basics():
    a = comm.pipeline_volume(comm.dense_pipeline(8))
    assert comm.saving_ratio(a, a) == 0.0
    zero = comm.VolumeReport(stage_volumes=(), total=0.0, devices=8,
                             batch=1, seq=1)
    assert comm.saving_ratio(a, zero) == 1.0
    with pytest.raises(comm.CommError):
        comm.saving_ratio(zero, a)


def test_saving_band_vs_tensor_parallel():
    """Against the two-all-reduce dense reference at G=8, k=6 the saving
    spans roughly 32%..75% as locality sweeps 0..1."""
    tp = comm.pipeline_volume(comm.tensor_parallel_pipeline(8))
    lo = comm.saving_ratio(tp, comm.pipeline_volume(
        comm.sharded_pipeline(8, k=6, alpha=0.0)))
    hi = comm.saving_ratio(tp, comm.pipeline_volume(
        comm.sharded_pipeline(8, k=6, alpha=1.0)))
    assert lo == pytest.approx(0.3214285714, abs=1e-9)
    assert hi == pytest.approx(0.75, abs=1e-9)


def test_sweep_alpha_grid():
    rows = comm.sweep_alpha(8, 6, 11)
    assert len(rows) == 11
    assert rows[0]["alpha"] == 0.0 and rows[-1]["alpha"] == 1.0
    assert rows[0]["sharded_volume"] == pytest.approx(
        closed_form_sharded(8, 1, 1, 6, 0.0), abs=1e-12)
    assert rows[-1]["sharded_volume"] == pytest.approx(
        closed_form_sharded(8, 1, 1, 6, 1.0), abs=1e-12)
    # affine in alpha with slope -2k/G
    diffs = np.diff([r["sharded_volume"] for r in rows])
    step = 1.0 / 10
    assert np.allclose(diffs / step, -2 * 6 / 8, atol=1e-9)
    with pytest.raises(comm.CommError):
        comm.sweep_alpha(8, 6, 1)


def test_simulate_perfect_recovery(planted):
    topo, mats, trace, truth = planted
    token_labels = truth["token_labels"].copy()
    token_labels[token_labels < 0] = 0
    assign = solver.Assignment(token_labels=token_labels,
                               expert_labels=truth["expert_labels"])
    row = comm.simulate_layer(trace, topo, "s_ts_eg", 0, assign=assign)
    assert row["remote_tokens"] == 0
    assert row["measured_alpha"] == 1.0


def test_simulate_conservation_and_modes(planted):
    topo, mats, trace, truth = planted
    token_labels = truth["token_labels"].copy()
    token_labels[token_labels < 0] = 0
    assign = solver.Assignment(token_labels=token_labels,
                               expert_labels=truth["expert_labels"])
    agg = aggregate(mats)
    occ = trace.n_occurrences
    alphas = {}
    for mode in comm.MODES:
        row = comm.simulate_layer(trace, topo, mode, 1, assign=assign,
                                  train_matrix=agg)
        assert row["local_tokens"] + row["remote_tokens"] == topo.top_k * occ
        alphas[mode] = row["measured_alpha"]
    # planted structure is non-contiguous, so each upgrade strictly helps
    assert alphas["s_ts_eg"] > alphas["s_ts"] > alphas["ds_moe"]


def test_simulate_uniform_routing_ds_moe():
    """Position sharding against uniform routing localizes ~1/G of events."""
    rng = np.random.default_rng(3)
    topo = profiles.Topology(devices=4, clusters=4, experts=8, top_k=2,
                             layers=1, vocab=64)
    n = 4000
    toks = rng.integers(0, 64, size=n)
    routed = np.stack([rng.permutation(8)[:2] for _ in range(n)])[:, None, :]
    trace = profiles.RequestTrace(requests=((0, toks),), routed=(routed,))
    row = comm.simulate_layer(trace, topo, "ds_moe", 0)
    events = row["local_tokens"] + row["remote_tokens"]
    p = 1 / topo.clusters
    sigma = np.sqrt(p * (1 - p) / events)
    assert abs(row["measured_alpha"] - p) < 3 * sigma


def test_analytic_matches_event_count(planted_noisy):
    topo, mats, trace, truth = planted_noisy
    token_labels = truth["token_labels"].copy()
    token_labels[token_labels < 0] = 0
    assign = solver.Assignment(token_labels=token_labels,
                               expert_labels=truth["expert_labels"])
    agg = aggregate(mats)
    for row in comm.simulate_trace(trace, topo, assign, agg):
        analytic_a2a = 2 * comm.volume_collective(
            "all_to_all", topo.clusters, 1, row["occurrences"],
            k=topo.top_k, alpha=row["measured_alpha"])
        assert abs(analytic_a2a - row["a2a_event_volume"]) <= 1.0


def test_simulate_requires_routing():
    topo = profiles.Topology(devices=2, clusters=2, experts=4, top_k=1,
                             layers=1, vocab=8)
    trace = profiles.RequestTrace(requests=((0, np.array([1, 2])),))
    with pytest.raises((comm.CommError, profiles.ProfileError)):
        comm.simulate_layer(trace, topo, "ds_moe", 0)
