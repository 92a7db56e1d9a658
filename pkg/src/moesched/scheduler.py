"""Online lookup-driven token and request scheduling.

At serving time each token consults two tiny tables: a token-to-device label
with a confidence threshold, and an n-gram table keyed on the devices of the
previous n layers.  Tokens are regrouped device-contiguously before dispatch
and restored afterwards; a small DP assigns whole requests to devices under a
per-window capacity.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .predictor import DeviceNGramTable, TokenDeviceTable, encode_history


class SchedulerError(ValueError):
    pass


@dataclass(frozen=True)
class LookupBundle:
    """Everything the serving side needs: per-token device labels with
    confidence thresholds, and the layer-history device table."""

    token_table: TokenDeviceTable
    ngram_table: DeviceNGramTable
    expert_labels: np.ndarray  # cluster of each expert, int16
    layers: int

    def __post_init__(self):
        object.__setattr__(self, "expert_labels",
                           np.asarray(self.expert_labels, dtype=np.int16))
        if self.token_table.n_clusters != self.ngram_table.n_clusters:
            raise SchedulerError("table cluster counts disagree")


def bundle_memory_bytes(vocab: int, n_clusters: int, n: int, layers: int,
                        n_experts: int | None = None) -> dict:
    """Itemized serving-side footprint in bytes.

    Token labels are int16, one per (token, layer); the n-gram table stores
    float32 probabilities plus an int16 best-device label per history row;
    the expert table is one int16 per expert."""
    token = vocab * layers * 2
    ngram = n_clusters ** n * (n_clusters * 4 + 2)
    expert = 2 * (n_experts if n_experts is not None else 0)
    return {"token_table": token, "ngram_table": ngram,
            "expert_table": expert, "total": token + ngram + expert}


def bundle_memory(bundle: LookupBundle) -> dict:
    """bundle_memory_bytes taken from an actual bundle's dimensions."""
    return bundle_memory_bytes(vocab=len(bundle.token_table.labels),
                               n_clusters=bundle.token_table.n_clusters,
                               n=bundle.ngram_table.n, layers=bundle.layers,
                               n_experts=len(bundle.expert_labels))


def lookup_device(bundle: LookupBundle, token: int,
                  history: np.ndarray | None) -> tuple[int, str]:
    """Pick a device for one token.

    Uses the history-table prediction when its confidence strictly exceeds
    the token's own threshold; otherwise falls back to the static token
    label.  Returns (device, source) with source in {"ngram", "token"}.
    """
    static = int(bundle.token_table.labels[token])
    threshold = float(bundle.token_table.confidence[token])
    if history is not None and len(history) == bundle.ngram_table.n:
        row = encode_history(np.asarray(history, dtype=np.int64),
                             bundle.ngram_table.n_clusters)
        conf = float(bundle.ngram_table.confidence[row])
        if conf > threshold:
            return int(bundle.ngram_table.best[row]), "ngram"
    return static, "token"


def lookup_devices(bundle: LookupBundle, tokens: np.ndarray,
                   histories: np.ndarray | None) -> np.ndarray:
    """Vectorized lookup_device over a batch; histories is (n_tokens, n) or
    None for the first n layers."""
    tokens = np.asarray(tokens, dtype=np.int64)
    static = bundle.token_table.labels[tokens].astype(np.int64)
    if histories is None:
        return static
    histories = np.asarray(histories, dtype=np.int64)
    rows = np.zeros(len(tokens), dtype=np.int64)
    for j in range(histories.shape[1]):
        rows = rows * bundle.ngram_table.n_clusters + histories[:, j]
    conf = bundle.ngram_table.confidence[rows]
    use = conf > bundle.token_table.confidence[tokens]
    out = static.copy()
    out[use] = bundle.ngram_table.best[rows[use]].astype(np.int64)
    return out


@dataclass(frozen=True)
class ShuffleIndices:
    """Permutation that groups a batch device-contiguously, with padding so
    every device group has equal length."""

    forward: np.ndarray      # original position of each shuffled slot, -1 pad
    inverse: np.ndarray      # shuffled slot of each original position
    group_size: int
    n_devices: int

    @property
    def n_tokens(self) -> int:
        return len(self.inverse)


PAD_TOKEN = -1


def rebatch_tokens(tokens: np.ndarray, devices: np.ndarray,
                   n_devices: int) -> tuple[np.ndarray, ShuffleIndices]:
    """Reorder a batch so tokens bound for the same device are contiguous.

    Groups are padded (PAD_TOKEN) to a common size so the downstream
    all-to-all sees equal splits.  The sort is stable: within a device,
    original order is preserved.
    """
    tokens = np.asarray(tokens)
    devices = np.asarray(devices, dtype=np.int64)
    if len(tokens) != len(devices):
        raise SchedulerError("tokens and devices must align")
    if devices.size and (devices.min() < 0 or devices.max() >= n_devices):
        raise SchedulerError("device label out of range")
    order = np.argsort(devices, kind="stable")
    sizes = np.bincount(devices, minlength=n_devices)
    group = int(sizes.max(initial=0))
    forward = np.full(n_devices * group, -1, dtype=np.int64)
    inverse = np.empty(len(tokens), dtype=np.int64)
    start = 0
    for d in range(n_devices):
        members = order[start:start + sizes[d]]
        slots = d * group + np.arange(sizes[d])
        forward[slots] = members
        inverse[members] = slots
        start += sizes[d]
    shuffled = np.full(n_devices * group, PAD_TOKEN, dtype=tokens.dtype)
    shuffled[forward >= 0] = tokens[forward[forward >= 0]]
    indices = ShuffleIndices(forward=forward, inverse=inverse,
                             group_size=group, n_devices=n_devices)
    return shuffled, indices


def resume_tokens(shuffled: np.ndarray, indices: ShuffleIndices) -> np.ndarray:
    """Invert rebatch_tokens: drop padding and restore original order."""
    shuffled = np.asarray(shuffled)
    if len(shuffled) != len(indices.forward):
        raise SchedulerError("shuffled batch does not match the indices")
    return shuffled[indices.inverse]


def schedule_requests_dp(lengths: np.ndarray, affinities: np.ndarray,
                         n_devices: int) -> np.ndarray:
    """Assign requests to devices by affinity under a rolling capacity.

    Requests are taken in arrival order; each goes to the highest-affinity
    device still open in the current window.  A device closes after one take
    and all devices reopen every n_devices requests, so each window of
    n_devices consecutive decisions uses each device exactly once.
    """
    lengths = np.asarray(lengths)
    affinities = np.asarray(affinities, dtype=np.float64)
    K = len(lengths)
    if affinities.shape != (K, n_devices):
        raise SchedulerError("affinity matrix must be (n_requests, n_devices)")
    labels = np.empty(K, dtype=np.int64)
    open_mask = np.ones(n_devices, dtype=bool)
    for r in range(K):
        if r % n_devices == 0:
            open_mask[:] = True
        score = np.where(open_mask, affinities[r], -np.inf)
        d = int(score.argmax())
        labels[r] = d
        open_mask[d] = False
    return labels


@dataclass(frozen=True)
class GatePermutation:
    """Expert permutation making each cluster's experts contiguous.

    new_to_old[i] is the original id of the expert now sitting at slot i.
    Applying the same permutation to gate output columns and to the expert
    weights leaves top-k routing decisions unchanged.
    """

    new_to_old: np.ndarray
    old_to_new: np.ndarray
    n_clusters: int


def gate_permutation(expert_labels: np.ndarray,
                     n_clusters: int) -> GatePermutation:
    """Build the cluster-contiguous relabeling, stable within a cluster."""
    expert_labels = np.asarray(expert_labels, dtype=np.int64)
    if expert_labels.size and (expert_labels.min() < 0
                               or expert_labels.max() >= n_clusters):
        raise SchedulerError("expert label out of range")
    new_to_old = np.argsort(expert_labels, kind="stable")
    old_to_new = np.argsort(new_to_old)
    return GatePermutation(new_to_old=new_to_old, old_to_new=old_to_new,
                           n_clusters=n_clusters)


def apply_expert_shuffle(gate_logits: np.ndarray,
                         perm: GatePermutation) -> np.ndarray:
    """Permute gate output columns into the cluster-contiguous order."""
    gate_logits = np.asarray(gate_logits)
    if gate_logits.shape[-1] != len(perm.new_to_old):
        raise SchedulerError("gate width does not match the permutation")
    return gate_logits[..., perm.new_to_old]


def remap_topk(topk_experts: np.ndarray, perm: GatePermutation) -> np.ndarray:
    """Translate routed expert ids from the original to the shuffled layout."""
    return perm.old_to_new[np.asarray(topk_experts, dtype=np.int64)]
