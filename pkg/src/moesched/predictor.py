"""Routing-path prediction from activation profiles.

Three artifacts come out of this module: the per-token expert confidence
table (row-normalized activation counts), the token-to-cluster lookup table
with out-of-vocabulary extrapolation via embedding nearest neighbor, and the
n-gram device-transition table capturing inter-layer routing conjugacy.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .profiles import EmbeddingTable, ProfileError, RequestTrace, TokenExpertMatrix

PROVENANCE_PROFILED = 0
PROVENANCE_EXTRAPOLATED = 1
PROVENANCE_FALLBACK = 2


@dataclass(frozen=True)
class TokenExpertConfidence:
    """Row-stochastic Pr(expert | token); zero rows mark unseen tokens."""

    layer: int
    probs: np.ndarray  # (vocab, N) float64

    def __post_init__(self):
        probs = np.asarray(self.probs, dtype=np.float64)
        probs.setflags(write=False)
        object.__setattr__(self, "probs", probs)

    @property
    def seen(self) -> np.ndarray:
        return self.probs.sum(axis=1) > 0


@dataclass(frozen=True)
class TokenDeviceTable:
    """Token -> cluster label with per-token confidence and provenance."""

    labels: np.ndarray       # (vocab,) int16
    confidence: np.ndarray   # (vocab,) float32
    provenance: np.ndarray   # (vocab,) uint8
    n_clusters: int

    def __post_init__(self):
        object.__setattr__(self, "labels",
                           np.asarray(self.labels, dtype=np.int16))
        object.__setattr__(self, "confidence",
                           np.asarray(self.confidence, dtype=np.float32))
        object.__setattr__(self, "provenance",
                           np.asarray(self.provenance, dtype=np.uint8))


@dataclass(frozen=True)
class DeviceNGramTable:
    """Device-sequence transition model over E^n look-back rows.

    probs rows sum to 1 for observed histories and are all-zero otherwise;
    `best` is the row argmax (lowest index on ties) and `confidence` the
    argmax probability, zero for unobserved rows so the token table always
    wins the lookup comparison.
    """

    n: int
    n_clusters: int
    probs: np.ndarray        # (E**n, E) float64
    counts: np.ndarray       # (E**n, E) int64

    @property
    def best(self) -> np.ndarray:
        return self.probs.argmax(axis=1).astype(np.int16)

    @property
    def confidence(self) -> np.ndarray:
        return self.probs.max(axis=1).astype(np.float32)

    @property
    def observed(self) -> np.ndarray:
        return self.counts.sum(axis=1) > 0


def build_confidence_table(matrix: TokenExpertMatrix) -> TokenExpertConfidence:
    """Row-normalize activation counts into Pr(expert | token)."""
    counts = matrix.counts.astype(np.float64)
    freq = counts.sum(axis=1, keepdims=True)
    probs = np.divide(counts, freq, out=np.zeros_like(counts), where=freq > 0)
    return TokenExpertConfidence(layer=matrix.layer, probs=probs)


def token_table_from_assignment(labels, confidence, n_clusters: int,
                                profiled) -> TokenDeviceTable:
    """Wrap solver output (labels over the vocab) into a TokenDeviceTable."""
    labels = np.asarray(labels, dtype=np.int64).copy()
    confidence = np.asarray(confidence, dtype=np.float64).copy()
    profiled = np.asarray(profiled, dtype=bool)
    provenance = np.full(len(labels), PROVENANCE_FALLBACK, dtype=np.uint8)
    provenance[profiled] = PROVENANCE_PROFILED
    labels[~profiled] = np.nonzero(~profiled)[0] % n_clusters
    confidence[~profiled] = 1.0 / n_clusters
    return TokenDeviceTable(labels=labels, confidence=confidence,
                            provenance=provenance, n_clusters=n_clusters)


def extrapolate_oov(table: TokenDeviceTable, embeddings: EmbeddingTable,
                    profiled) -> TokenDeviceTable:
    """Give every non-profiled token the label of its cosine-nearest
    profiled neighbor (ties break to the lowest token id); zero-norm
    embeddings fall back to label `token mod E` at confidence 1/E."""
    profiled = np.asarray(profiled, dtype=bool)
    profiled_ids = np.nonzero(profiled)[0]
    if profiled_ids.size == 0:
        raise ProfileError("cannot extrapolate from an empty profiled set")
    vectors = embeddings.vectors.astype(np.float64)
    norms = np.linalg.norm(vectors, axis=1)
    zero = norms == 0.0
    unit = np.divide(vectors, norms[:, None],
                     out=np.zeros_like(vectors), where=norms[:, None] > 0)

    labels = table.labels.astype(np.int64).copy()
    confidence = table.confidence.astype(np.float64).copy()
    provenance = table.provenance.copy()
    E = table.n_clusters

    targets = np.nonzero(~profiled)[0]
    good = targets[~zero[targets]]
    bad = targets[zero[targets]]
    if good.size:
        # candidates with zero-norm embeddings are excluded from the search
        cand = profiled_ids[~zero[profiled_ids]]
        if cand.size == 0:
            bad = targets
            good = targets[:0]
        else:
            sims = unit[good] @ unit[cand].T
            nearest = cand[sims.argmax(axis=1)]
            labels[good] = labels[nearest]
            confidence[good] = confidence[nearest]
            provenance[good] = PROVENANCE_EXTRAPOLATED
    labels[bad] = bad % E
    confidence[bad] = 1.0 / E
    provenance[bad] = PROVENANCE_FALLBACK
    return TokenDeviceTable(labels=labels, confidence=confidence,
                            provenance=provenance, n_clusters=E)


def encode_history(history, n_clusters: int) -> np.ndarray:
    """Base-E row index of a device sequence; most recent layer is the least
    significant digit."""
    history = np.asarray(history, dtype=np.int64)
    weights = n_clusters ** np.arange(history.shape[-1] - 1, -1, -1)
    return history @ weights


def build_ngram_table(trace: RequestTrace, expert_to_cluster, n: int = 2
                      ) -> DeviceNGramTable:
    """Count device transitions over the trace's routed ground truth.

    The device of a routing event is the cluster of the top-1 routed expert.
    For every token occurrence and layer l >= n, the device sequence of
    layers l-n .. l-1 selects the row and the device at layer l the column.
    """
    if trace.routed is None:
        raise ProfileError("trace has no routed records")
    expert_to_cluster = np.asarray(expert_to_cluster, dtype=np.int64)
    E = int(expert_to_cluster.max(initial=0)) + 1
    counts = np.zeros((E ** n, E), dtype=np.int64)
    for route in trace.routed:
        if route.shape[0] == 0 or route.shape[1] <= n:
            continue
        devices = expert_to_cluster[route[:, :, 0]]  # (len, layers)
        windows = np.lib.stride_tricks.sliding_window_view(
            devices, n, axis=1)[:, :-1]              # histories for layers n..L-1
        rows = encode_history(windows.reshape(-1, n), E)
        cols = devices[:, n:].reshape(-1)
        np.add.at(counts, (rows, cols), 1)
    totals = counts.sum(axis=1, keepdims=True)
    probs = np.divide(counts, totals, out=np.zeros((E ** n, E)),
                      where=totals > 0)
    return DeviceNGramTable(n=n, n_clusters=E, probs=probs, counts=counts)


def evaluate_predictor(confidence: TokenExpertConfidence,
                       holdout: TokenExpertMatrix, k: int) -> dict:
    """Score static top-k expert prediction against holdout activations.

    precision: fraction of holdout activation events whose expert lies in the
    token's static top-k set (micro, event-weighted).  f1: micro F1 over the
    binary (token, expert) support sets, where the predicted set per token is
    its static top-k and the actual set is the experts it activates in the
    holdout.  Both reported alongside the set-level precision/recall.
    """
    h = holdout.counts.astype(np.int64)
    seen_holdout = h.sum(axis=1) > 0
    if not seen_holdout.any():
        raise ProfileError("empty holdout")
    probs = confidence.probs
    n_experts = probs.shape[1]
    k = min(k, n_experts)
    # static top-k with ties to the lowest expert index
    order = np.argsort(-probs, axis=1, kind="stable")
    topk = order[:, :k]

    tokens = np.nonzero(seen_holdout)[0]
    pred_mask = np.zeros_like(h, dtype=bool)
    pred_mask[np.repeat(tokens, k), topk[tokens].reshape(-1)] = True

    total_events = int(h[tokens].sum())
    hit_events = int(h[pred_mask].sum())
    precision = hit_events / total_events

    actual_mask = h > 0
    actual_mask[~seen_holdout] = False
    tp = int((pred_mask & actual_mask).sum())
    pred_n = int(pred_mask.sum())
    act_n = int(actual_mask.sum())
    set_precision = tp / pred_n if pred_n else 0.0
    set_recall = tp / act_n if act_n else 0.0
    denom = set_precision + set_recall
    f1 = 2 * set_precision * set_recall / denom if denom else 0.0
    return {"precision": precision, "f1": f1,
            "set_precision": set_precision, "set_recall": set_recall,
            "events": total_events, "tokens": int(len(tokens))}


def activation_kurtosis(matrix: TokenExpertMatrix) -> np.ndarray:
    """Pearson kurtosis E[(x-mu)^4]/sigma^4 of each seen token's count row;
    +inf marks zero-variance rows."""
    counts = matrix.counts.astype(np.float64)
    seen = counts.sum(axis=1) > 0
    mu = counts.mean(axis=1, keepdims=True)
    dev = counts - mu
    var = (dev ** 2).mean(axis=1)
    fourth = (dev ** 4).mean(axis=1)
    out = np.full(counts.shape[0], np.nan)
    zero_var = var == 0.0
    with np.errstate(divide="ignore", invalid="ignore"):
        out[seen & ~zero_var] = (fourth / var ** 2)[seen & ~zero_var]
    out[seen & zero_var] = np.inf
    return out
