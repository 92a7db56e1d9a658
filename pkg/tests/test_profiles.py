import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from moesched import profiles
from conftest import aggregate


def small_topo(**kw):
    base = dict(devices=2, clusters=2, experts=4, top_k=2, layers=2,
                vocab=16)
    base.update(kw)
    return profiles.Topology(**base)


def test_topology_validation():
    with pytest.raises(profiles.ProfileError):
        small_topo(experts=5)  # clusters must divide experts
    with pytest.raises(profiles.ProfileError):
        small_topo(top_k=9)
    with pytest.raises(profiles.ProfileError):
        small_topo(layers=0)


def test_topology_config_roundtrip(tmp_path):
    topo = small_topo()
    path = tmp_path / "topo.cfg"
    topo.to_config(path)
    assert profiles.Topology.from_config(path) == topo
    path.write_text("G=2\nbogus=1\n")
    with pytest.raises(profiles.ProfileError):
        profiles.Topology.from_config(path)


def test_ingest_aggregates_counts(tmp_path):
    topo = small_topo()
    path = tmp_path / "trace.jsonl"
    recs = [
        {"req": 0, "pos": 0, "token": 3, "layer": 0, "experts": [0, 1]},
        {"req": 0, "pos": 0, "token": 3, "layer": 1, "experts": [2, 3]},
        {"req": 0, "pos": 1, "token": 5, "layer": 0, "experts": [0, 2]},
        {"req": 1, "pos": 0, "token": 3, "layer": 0, "experts": [0, 1]},
    ]
    path.write_text("\n".join(json.dumps(r) for r in recs) + "\n")
    mats, trace = profiles.ingest_profile(path, topo)
    assert mats[0].counts[3, 0] == 2 and mats[0].counts[3, 1] == 2
    assert mats[0].counts[5, 2] == 1
    assert mats[1].counts[3, 2] == 1
    assert len(trace.requests) == 2
    assert trace.requests[0][1].tolist() == [3, 5]
    # routed records preserved per layer
    assert trace.routed[0][0, 1].tolist() == [2, 3]


def test_ingest_rejects_malformed(tmp_path):
    topo = small_topo()
    path = tmp_path / "trace.jsonl"
    path.write_text('{"req": 0, "pos": 0, "token": 99, "layer": 0, '
                    '"experts": [0, 1]}\n')
    with pytest.raises(profiles.ProfileError, match="token 99"):
        profiles.ingest_profile(path, topo)
    path.write_text("not json\n")
    with pytest.raises(profiles.ProfileError, match=":1:"):
        profiles.ingest_profile(path, topo)
    path.write_text('{"req": 0, "pos": 0, "token": 1, "layer": 0, '
                    '"experts": [0, 0]}\n')
    with pytest.raises(profiles.ProfileError, match="distinct"):
        profiles.ingest_profile(path, topo)


def test_ingest_empty_file(tmp_path):
    topo = small_topo()
    path = tmp_path / "trace.jsonl"
    path.write_text("")
    mats, trace = profiles.ingest_profile(path, topo)
    assert all(m.total == 0 for m in mats)
    assert trace.requests == ()


def test_emit_ingest_roundtrip(tmp_path, planted):
    topo, mats, trace, truth = planted
    path = tmp_path / "trace.jsonl"
    profiles.emit_profile(path, trace=trace)
    mats2, trace2 = profiles.ingest_profile(path, topo)
    for a, b in zip(mats, mats2):
        assert np.array_equal(a.counts, b.counts)
    assert len(trace2.requests) == len(trace.requests)
    got = {rid: toks.tolist() for rid, toks in trace2.requests}
    for rid, toks in trace.requests:
        assert got[rid] == toks.tolist()


def test_validate_reports_mismatches():
    mat = profiles.TokenExpertMatrix(layer=0, counts=np.array([[1, 2],
                                                               [0, 3]]))
    assert profiles.validate(mat) == []
    report = profiles.validate(mat, freq=np.array([3, 4]), total=7)
    assert any("freq[1]" in r for r in report)
    assert any("total=7" in r for r in report)


def test_planted_profile_structure(planted):
    topo, mats, trace, truth = planted
    agg = aggregate(mats)
    # every planted token keeps all its mass inside its own expert block
    R, C = truth["token_labels"], truth["expert_labels"]
    for tok in np.nonzero(R >= 0)[0]:
        cols = np.nonzero(agg.counts[tok])[0]
        assert set(C[cols]) == {R[tok]}
    # equal per-cluster token loads
    freq = agg.freq
    loads = np.bincount(R[R >= 0], weights=freq[R >= 0])
    assert len(set(loads.tolist())) == 1
    # expert blocks are a random permutation, not contiguous blocks
    assert not all(C[e] == e // topo.experts_per_cluster
                   for e in range(topo.experts))


def test_planted_deterministic():
    topo = profiles.Topology(devices=2, clusters=2, experts=4, top_k=1,
                             layers=2, vocab=32)
    a = profiles.synthesize_planted_profile(topo, 0.1, 8, seed=5)
    b = profiles.synthesize_planted_profile(topo, 0.1, 8, seed=5)
    for m1, m2 in zip(a[0], b[0]):
        assert np.array_equal(m1.counts, m2.counts)


def test_embeddings_roundtrip(tmp_path):
    labels = np.array([0, 1, -1, 2, 1])
    table = profiles.synthesize_embeddings(labels, 3, dim=8, seed=0)
    assert table.zero_norm.tolist() == [False, False, True, False, False]
    path = tmp_path / "emb.bin"
    profiles.write_embeddings(path, table)
    back = profiles.read_embeddings(path)
    assert np.array_equal(back.vectors, table.vectors)


def test_embeddings_csv_fallback(tmp_path):
    path = tmp_path / "emb.csv"
    path.write_text("2,3\n1.0,0.0,0.5\n0.0,2.0,0.0\n")
    table = profiles.read_embeddings(path)
    assert table.vectors.shape == (2, 3)
    assert table.vectors[1, 1] == 2.0


def test_split_trace_partitions(planted):
    topo, mats, trace, truth = planted
    train, hold = profiles.split_trace(trace, 0.25, seed=0)
    assert len(train.requests) + len(hold.requests) == len(trace.requests)
    assert len(train.requests) == round(len(trace.requests) * 0.25)
    ids = sorted(r for r, _ in train.requests + hold.requests)
    assert ids == sorted(r for r, _ in trace.requests)
    # recounted matrices sum back to the full profile
    back = [profiles.TokenExpertMatrix(layer=l, counts=a.counts.astype(np.int64)
                                       + b.counts.astype(np.int64))
            for l, (a, b) in enumerate(zip(
                profiles.matrices_from_trace(train, topo),
                profiles.matrices_from_trace(hold, topo)))]
    for m, b in zip(mats, back):
        assert np.array_equal(m.counts, b.counts)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2 ** 31 - 1), st.floats(0.1, 0.9))
def test_split_fraction_property(seed, fraction):
    reqs = tuple((i, np.array([i % 7])) for i in range(20))
    trace = profiles.RequestTrace(requests=reqs)
    train, hold = profiles.split_trace(trace, fraction, seed)
    assert len(train.requests) >= 1 and len(hold.requests) >= 1
    assert len(train.requests) + len(hold.requests) == 20
