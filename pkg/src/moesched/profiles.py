"""Activation-profile data model: ingestion, synthesis, validation.

A profile is a set of per-layer token-expert activation count matrices plus
the raw request trace it was collected from.  Token ids index matrix rows
directly (dense in [0, vocab)); tokens never seen in the profile keep an
all-zero row.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

COUNT_DTYPE = np.uint32
COUNT_MAX = np.iinfo(np.uint32).max


class ProfileError(ValueError):
    """Malformed trace input or violated structural precondition."""


@dataclass(frozen=True)
class Topology:
    """Cluster-level deployment shape.

    devices: number of devices (G); clusters: EP degree / co-cluster count (E);
    experts: routed experts per MoE layer (N); top_k: experts routed per token;
    layers: MoE layer count; batch_size / seq_len: global batch shape used by
    the communication model; vocab: token-id space size.
    """

    devices: int
    clusters: int
    experts: int
    top_k: int
    layers: int
    batch_size: int = 1
    seq_len: int = 1
    vocab: int = 1024

    def __post_init__(self):
        for name in ("devices", "clusters", "experts", "top_k", "layers",
                     "batch_size", "seq_len", "vocab"):
            if getattr(self, name) < 1:
                raise ProfileError(f"{name} must be >= 1")
        if self.experts % self.clusters != 0:
            raise ProfileError("clusters must divide experts")
        if self.top_k > self.experts:
            raise ProfileError("top_k must not exceed experts")

    @property
    def experts_per_cluster(self) -> int:
        return self.experts // self.clusters

    CONFIG_KEYS = ("G", "E", "N", "k", "L", "B", "S_seq", "vocab")

    @classmethod
    def from_config(cls, path) -> "Topology":
        """Parse a key=value config file with keys G, E, N, k, L, B, S_seq, vocab."""
        values = {}
        with open(path) as fh:
            for line in fh:
                line = line.split("#", 1)[0].strip()
                if not line:
                    continue
                if "=" not in line:
                    raise ProfileError(f"bad config line: {line!r}")
                key, val = (part.strip() for part in line.split("=", 1))
                values[key] = int(val)
        unknown = set(values) - set(cls.CONFIG_KEYS)
        if unknown:
            raise ProfileError(f"unknown topology keys: {sorted(unknown)}")
        return cls(
            devices=values.get("G", 1),
            clusters=values.get("E", 1),
            experts=values.get("N", 1),
            top_k=values.get("k", 1),
            layers=values.get("L", 1),
            batch_size=values.get("B", 1),
            seq_len=values.get("S_seq", 1),
            vocab=values.get("vocab", 1024),
        )

    def to_config(self, path):
        mapping = dict(zip(self.CONFIG_KEYS,
                           (self.devices, self.clusters, self.experts,
                            self.top_k, self.layers, self.batch_size,
                            self.seq_len, self.vocab)))
        with open(path, "w") as fh:
            for key, val in mapping.items():
                fh.write(f"{key}={val}\n")


@dataclass(frozen=True)
class TokenExpertMatrix:
    """Per-layer activation counts; row j = token id j, column k = expert k."""

    layer: int
    counts: np.ndarray  # (vocab, N) uint32

    def __post_init__(self):
        counts = np.asarray(self.counts, dtype=COUNT_DTYPE)
        counts.setflags(write=False)
        object.__setattr__(self, "counts", counts)

    @property
    def freq(self) -> np.ndarray:
        """Per-token occurrence-weighted activation count a[j]."""
        return self.counts.sum(axis=1, dtype=np.int64)

    @property
    def total(self) -> int:
        """Un-deduplicated activation mass S."""
        return int(self.counts.sum(dtype=np.int64))

    @property
    def t(self) -> int:
        """Number of distinct tokens seen in the profile."""
        return int(np.count_nonzero(self.freq))

    @property
    def seen(self) -> np.ndarray:
        return self.freq > 0


@dataclass(frozen=True)
class RequestTrace:
    """Ordered token-id sequences with optional per-layer routed experts.

    routed[i] has shape (len(tokens_i), layers, k): the observed gate output
    for every token occurrence, used as simulation ground truth.  Expert rank
    0 is the top-1 choice.
    """

    requests: tuple  # ((request_id, token id ndarray), ...)
    routed: tuple | None = None

    def __post_init__(self):
        object.__setattr__(self, "requests", tuple(
            (int(rid), np.asarray(toks, dtype=np.int64))
            for rid, toks in self.requests))
        if self.routed is not None:
            object.__setattr__(self, "routed", tuple(
                np.asarray(r, dtype=np.int64) for r in self.routed))
            if len(self.routed) != len(self.requests):
                raise ProfileError("routed must parallel requests")

    @property
    def n_occurrences(self) -> int:
        return sum(len(toks) for _, toks in self.requests)

    def all_tokens(self) -> np.ndarray:
        if not self.requests:
            return np.empty(0, dtype=np.int64)
        return np.concatenate([toks for _, toks in self.requests])

    def all_routed(self) -> np.ndarray:
        """Flattened routed experts, shape (n_occurrences, layers, k)."""
        if self.routed is None:
            raise ProfileError("trace has no routed records")
        if not self.routed:
            return np.empty((0, 0, 0), dtype=np.int64)
        return np.concatenate(self.routed, axis=0)


@dataclass(frozen=True)
class EmbeddingTable:
    dim: int
    vectors: np.ndarray  # (vocab, dim) float32

    def __post_init__(self):
        vectors = np.asarray(self.vectors, dtype=np.float32)
        if np.isnan(vectors).any():
            raise ProfileError("embedding table contains NaN")
        vectors.setflags(write=False)
        object.__setattr__(self, "vectors", vectors)

    @property
    def zero_norm(self) -> np.ndarray:
        """Rows excluded from nearest-neighbor search."""
        return np.linalg.norm(self.vectors, axis=1) == 0.0


def ingest_profile(path, topology: Topology):
    """Read a JSONL trace and aggregate it into per-layer count matrices.

    Each line: {"req": int, "pos": int, "token": int, "layer": int,
    "experts": [int; k]}.  Records for the same token are aggregated; an
    empty file yields all-zero matrices and an empty trace.
    """
    counts = np.zeros((topology.layers, topology.vocab, topology.experts),
                      dtype=np.int64)
    per_request: dict[int, dict[int, tuple[int, np.ndarray]]] = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
                req = int(rec["req"])
                pos = int(rec["pos"])
                token = int(rec["token"])
                layer = int(rec["layer"])
                experts = np.asarray(rec["experts"], dtype=np.int64)
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise ProfileError(f"{path}:{lineno}: malformed record ({exc})")
            if not 0 <= token < topology.vocab:
                raise ProfileError(f"{path}:{lineno}: token {token} out of range")
            if not 0 <= layer < topology.layers:
                raise ProfileError(f"{path}:{lineno}: layer {layer} >= L")
            if experts.size != topology.top_k or len(set(experts.tolist())) != topology.top_k:
                raise ProfileError(
                    f"{path}:{lineno}: expected {topology.top_k} distinct experts")
            if experts.min() < 0 or experts.max() >= topology.experts:
                raise ProfileError(f"{path}:{lineno}: expert index >= N")
            counts[layer, token, experts] += 1
            per_request.setdefault(req, {}).setdefault(pos, []).append(
                (token, layer, experts))
    if counts.max(initial=0) > COUNT_MAX:
        raise ProfileError("activation count overflows 32-bit storage")

    matrices = [TokenExpertMatrix(layer=l, counts=counts[l])
                for l in range(topology.layers)]
    requests = []
    routed = []
    has_routing = False
    for req in sorted(per_request):
        by_pos: dict[int, dict] = {}
        tok_by_pos: dict[int, int] = {}
        for pos, records in per_request[req].items():
            for token, layer, experts in records:
                by_pos.setdefault(pos, {})[layer] = experts
                tok_by_pos[pos] = token
        seq = sorted(by_pos)
        requests.append((req, np.array([tok_by_pos[p] for p in seq],
                                       dtype=np.int64)))
        route = np.zeros((len(seq), topology.layers, topology.top_k),
                         dtype=np.int64)
        for i, pos in enumerate(seq):
            for l in range(topology.layers):
                if l in by_pos[pos]:
                    route[i, l] = by_pos[pos][l]
                    has_routing = True
        routed.append(route)
    trace = RequestTrace(requests=tuple(requests),
                         routed=tuple(routed) if has_routing else None)
    return matrices, trace


def emit_profile(path, matrices=None, trace: RequestTrace | None = None,
                 layers: int | None = None):
    """Write a trace (or raw matrices as synthetic single-occurrence records)
    back to the JSONL format; inverse of ingest_profile."""
    with open(path, "w") as fh:
        if trace is not None and trace.routed is not None:
            for rix, (rid, toks) in enumerate(trace.requests):
                route = trace.routed[rix]
                for pos, token in enumerate(toks):
                    for layer in range(route.shape[1]):
                        rec = {"req": int(rid), "pos": int(pos),
                               "token": int(token), "layer": int(layer),
                               "experts": [int(e) for e in route[pos, layer]]}
                        fh.write(json.dumps(rec) + "\n")
        elif matrices is not None:
            req = 0
            for mat in matrices:
                pos = 0
                rows, cols = np.nonzero(mat.counts)
                for j, k in zip(rows, cols):
                    for _ in range(int(mat.counts[j, k])):
                        rec = {"req": req, "pos": pos, "token": int(j),
                               "layer": int(mat.layer), "experts": [int(k)]}
                        fh.write(json.dumps(rec) + "\n")
                        pos += 1
        else:
            raise ProfileError("nothing to emit")


def validate(matrix: TokenExpertMatrix, freq=None, total=None) -> list[str]:
    """Report every violated structural invariant (empty list = valid).

    freq/total allow checking externally supplied aggregates against the
    stored counts.
    """
    report = []
    counts = np.asarray(matrix.counts, dtype=np.int64)
    if counts.ndim != 2:
        return [f"counts must be 2-D, got ndim={counts.ndim}"]
    neg = np.argwhere(counts < 0)
    for j, k in neg:
        report.append(f"negative count at token {j}, expert {k}")
    row_sums = counts.sum(axis=1)
    if freq is not None:
        freq = np.asarray(freq, dtype=np.int64)
        for j in np.nonzero(freq != row_sums)[0]:
            report.append(f"freq[{j}]={freq[j]} != row sum {row_sums[j]}")
    if total is not None and total != row_sums.sum():
        report.append(f"total={total} != sum of frequencies {row_sums.sum()}")
    return report


def synthesize_planted_profile(topology: Topology, noise: float,
                               tokens_per_cluster: int, seed: int,
                               reps: int = 8):
    """Generate a profile with planted token/expert co-cluster structure.

    Experts are split into E hidden blocks of N/E (a random permutation of
    expert ids, so blocks are not contiguous).  Token j of cluster c routes
    every occurrence to a fixed set of k experts inside block c with
    probability 1-noise, and to k random experts of a uniformly chosen
    *other* block with probability noise.  Every token occurs exactly
    `reps * layers` times, so planted cluster frequencies are equal.

    Requests are cluster-pure: `reps` requests per cluster, each a random
    permutation of the cluster's tokens.

    Returns (matrices, trace, truth) where truth carries the hidden
    `token_labels` (length vocab, -1 for tokens outside the planted set) and
    `expert_labels` (length N).
    """
    E, N, k, L = (topology.clusters, topology.experts, topology.top_k,
                  topology.layers)
    npc = topology.experts_per_cluster
    m = tokens_per_cluster
    if m * E > topology.vocab:
        raise ProfileError("tokens_per_cluster * clusters exceeds vocab")
    if not 0.0 <= noise < 1.0:
        raise ProfileError("noise must be in [0, 1)")
    if k > npc:
        raise ProfileError("top_k must not exceed experts per cluster")
    rng = np.random.default_rng(seed)

    perm = rng.permutation(N)
    blocks = perm.reshape(E, npc)
    expert_labels = np.empty(N, dtype=np.int64)
    for c in range(E):
        expert_labels[blocks[c]] = c
    token_labels = np.full(topology.vocab, -1, dtype=np.int64)
    token_labels[:m * E] = np.repeat(np.arange(E), m)
    # fixed preferred expert set per token: a rotated window inside its block
    preferred = np.empty((m * E, k), dtype=np.int64)
    for tok in range(m * E):
        c = token_labels[tok]
        i = tok - c * m
        preferred[tok] = blocks[c][(i + np.arange(k)) % npc]

    counts = np.zeros((L, topology.vocab, N), dtype=np.int64)
    requests = []
    routed = []
    rid = 0
    for c in range(E):
        cluster_tokens = np.arange(c * m, (c + 1) * m)
        for _ in range(reps):
            toks = rng.permutation(cluster_tokens)
            route = np.empty((m, L, k), dtype=np.int64)
            for i, tok in enumerate(toks):
                for l in range(L):
                    if noise > 0.0 and rng.random() < noise:
                        other = int(rng.integers(E - 1))
                        other += other >= c
                        start = int(rng.integers(npc))
                        route[i, l] = blocks[other][(start + np.arange(k)) % npc]
                    else:
                        route[i, l] = preferred[tok]
                    counts[l, tok, route[i, l]] += 1
            requests.append((rid, toks))
            routed.append(route)
            rid += 1

    matrices = [TokenExpertMatrix(layer=l, counts=counts[l]) for l in range(L)]
    trace = RequestTrace(requests=tuple(requests), routed=tuple(routed))
    truth = {"token_labels": token_labels, "expert_labels": expert_labels}
    return matrices, trace, truth


def synthesize_embeddings(token_labels, n_clusters: int, dim: int,
                          seed: int, noise: float = 0.05) -> EmbeddingTable:
    """Embeddings clustered along per-cluster axes; unlabeled tokens (-1)
    get a zero-norm row so they exercise the fallback path."""
    if dim < n_clusters:
        raise ProfileError("dim must be >= number of clusters")
    rng = np.random.default_rng(seed)
    token_labels = np.asarray(token_labels)
    vectors = np.zeros((len(token_labels), dim), dtype=np.float32)
    labeled = token_labels >= 0
    vectors[labeled, token_labels[labeled]] = 1.0
    vectors[labeled] += rng.normal(0.0, noise,
                                   size=(int(labeled.sum()), dim)).astype(np.float32)
    return EmbeddingTable(dim=dim, vectors=vectors)


EMBEDDING_MAGIC = b"MDEB"


def write_embeddings(path, table: EmbeddingTable):
    """Binary layout: magic, u32 version, u64 vocab, u32 dim, row-major f32."""
    import struct
    with open(path, "wb") as fh:
        fh.write(EMBEDDING_MAGIC)
        fh.write(struct.pack("<IQI", 1, table.vectors.shape[0], table.dim))
        fh.write(np.ascontiguousarray(table.vectors, dtype="<f4").tobytes())


def read_embeddings(path) -> EmbeddingTable:
    import struct
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != EMBEDDING_MAGIC:
            # CSV fallback: header line "vocab,dim" then rows of floats
            return _read_embeddings_csv(path)
        version, vocab, dim = struct.unpack("<IQI", fh.read(16))
        if version != 1:
            raise ProfileError(f"unsupported embedding file version {version}")
        data = np.frombuffer(fh.read(), dtype="<f4")
    if data.size != vocab * dim:
        raise ProfileError("embedding payload size mismatch")
    return EmbeddingTable(dim=int(dim), vectors=data.reshape(vocab, dim))


def _read_embeddings_csv(path) -> EmbeddingTable:
    with open(path) as fh:
        header = fh.readline().strip()
        try:
            vocab, dim = (int(x) for x in header.split(","))
        except ValueError:
            raise ProfileError("embedding CSV must start with 'vocab,dim'")
        data = np.loadtxt(fh, delimiter=",", dtype=np.float32, ndmin=2)
    if data.shape != (vocab, dim):
        raise ProfileError("embedding CSV shape mismatch")
    return EmbeddingTable(dim=dim, vectors=data)


def split_trace(trace: RequestTrace, fraction: float, seed: int):
    """Split by request: `fraction` of requests become the training part."""
    if not 0.0 < fraction < 1.0:
        raise ProfileError("split fraction must be in (0, 1)")
    rng = np.random.default_rng(seed)
    n = len(trace.requests)
    order = rng.permutation(n)
    cut = max(1, int(round(n * fraction)))
    if cut >= n:
        raise ProfileError("split leaves an empty holdout")
    train_ix, hold_ix = np.sort(order[:cut]), np.sort(order[cut:])

    def take(ix):
        reqs = tuple(trace.requests[i] for i in ix)
        routes = tuple(trace.routed[i] for i in ix) if trace.routed else None
        return RequestTrace(requests=reqs, routed=routes)

    return take(train_ix), take(hold_ix)


def matrices_from_trace(trace: RequestTrace, topology: Topology):
    """Re-count per-layer matrices from a (sub)trace's routed records."""
    counts = np.zeros((topology.layers, topology.vocab, topology.experts),
                      dtype=np.int64)
    if trace.routed is not None:
        for (_, toks), route in zip(trace.requests, trace.routed):
            for i, tok in enumerate(toks):
                for l in range(route.shape[1]):
                    counts[l, tok, route[i, l]] += 1
    return [TokenExpertMatrix(layer=l, counts=counts[l])
            for l in range(topology.layers)]
