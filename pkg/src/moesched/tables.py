"""Binary serialization of the serving-side lookup bundle.

Layout: an 8+20-byte header (magic, version, vocab, clusters, n-gram depth,
layers, experts) followed by row-major payload sections — token labels
(int16), token confidences (float32), token provenance (uint8), n-gram
probabilities (float32), n-gram counts (uint32), expert labels (int16).
A CSV export of the token table exists for eyeballing.
"""

from __future__ import annotations

import csv
import struct

import numpy as np

from .predictor import DeviceNGramTable, TokenDeviceTable
from .scheduler import LookupBundle

BUNDLE_MAGIC = b"MDLB"
BUNDLE_VERSION = 1
_HEADER = struct.Struct("<4sHQIIII")


class TableError(ValueError):
    pass


def write_bundle(path, bundle: LookupBundle) -> None:
    tok = bundle.token_table
    ng = bundle.ngram_table
    vocab = len(tok.labels)
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(BUNDLE_MAGIC, BUNDLE_VERSION, vocab,
                              tok.n_clusters, ng.n, bundle.layers,
                              len(bundle.expert_labels)))
        fh.write(tok.labels.astype("<i2").tobytes())
        fh.write(tok.confidence.astype("<f4").tobytes())
        fh.write(tok.provenance.astype("u1").tobytes())
        fh.write(ng.probs.astype("<f4").tobytes())
        fh.write(ng.counts.astype("<u4").tobytes())
        fh.write(bundle.expert_labels.astype("<i2").tobytes())


def read_bundle(path) -> LookupBundle:
    with open(path, "rb") as fh:
        head = fh.read(_HEADER.size)
        if len(head) < _HEADER.size:
            raise TableError("truncated bundle header")
        magic, version, vocab, E, n, layers, n_experts = _HEADER.unpack(head)
        if magic != BUNDLE_MAGIC:
            raise TableError("not a lookup bundle (bad magic)")
        if version != BUNDLE_VERSION:
            raise TableError(f"unsupported bundle version {version}")
        data = fh.read()

    def take(count, dtype):
        nonlocal data
        arr = np.frombuffer(data, dtype=dtype, count=count)
        if len(arr) < count:
            raise TableError("truncated bundle payload")
        data = data[arr.nbytes:]
        return arr.copy()

    labels = take(vocab, "<i2")
    confidence = take(vocab, "<f4")
    provenance = take(vocab, "u1")
    rows = E ** n
    probs = take(rows * E, "<f4").astype(np.float64).reshape(rows, E)
    counts = take(rows * E, "<u4").astype(np.int64).reshape(rows, E)
    expert_labels = take(n_experts, "<i2")
    token_table = TokenDeviceTable(labels=labels, confidence=confidence,
                                   provenance=provenance, n_clusters=E)
    ngram_table = DeviceNGramTable(n=n, n_clusters=E, probs=probs,
                                   counts=counts)
    return LookupBundle(token_table=token_table, ngram_table=ngram_table,
                        expert_labels=expert_labels, layers=layers)


def export_token_csv(path, bundle: LookupBundle) -> None:
    """Human-readable dump of the token table."""
    tok = bundle.token_table
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["token", "label", "confidence", "provenance"])
        for j in range(len(tok.labels)):
            writer.writerow([j, int(tok.labels[j]),
                             f"{float(tok.confidence[j]):.6f}",
                             int(tok.provenance[j])])
