"""Balanced token-expert co-clustering.

The optimization places N experts into E equal-size clusters (hard
constraint) and labels every profiled token with a cluster, minimizing a mix
of load-balance deviation (L1) and cross-cluster activation mass (L2).
Solvers: cross-entropy search over capacity-masked multinomial samples, an
alternating request/expert greedy optimizer, a two-stage balanced k-means,
round-robin, and an exhaustive oracle for tiny instances.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np

from .profiles import ProfileError, RequestTrace, TokenExpertMatrix, Topology


class SolverError(ValueError):
    pass


@dataclass(frozen=True)
class Assignment:
    """Cluster labels: R for tokens (vocab length), C for experts (N)."""

    token_labels: np.ndarray
    expert_labels: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "token_labels",
                           np.asarray(self.token_labels, dtype=np.int64))
        object.__setattr__(self, "expert_labels",
                           np.asarray(self.expert_labels, dtype=np.int64))


@dataclass
class SolverConfig:
    theta: float = 0.5          # objective mix between L1 and L2
    n_steps: int = 60
    n_samples: int = 64         # K samples per cross-entropy iteration
    rho: float = 0.2            # elite fraction
    beta: float = 1.1           # token load relaxation
    eta: float = 0.7            # probability-matrix smoothing rate
    ft_steps: int = 200         # swap fine-tune rounds (alternating solver)
    alpha_e: float = 1.0        # expert-expert affinity weight
    beta_e: float = 1.0         # request-expert affinity weight
    gamma_e: float = 1.0        # cluster-load penalty weight
    alpha_r: float = 1.0        # request-request affinity weight
    beta_r: float = 1.0         # request-expert affinity weight
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.rho <= 1.0:
            raise SolverError("rho must be in (0, 1]")
        if self.beta < 1.0:
            raise SolverError("beta must be >= 1")
        if not 0.0 < self.eta <= 1.0:
            raise SolverError("eta must be in (0, 1]")
        if not 0.0 < self.theta < 1.0:
            raise SolverError("theta must be in (0, 1)")


@dataclass(frozen=True)
class ObjectiveValue:
    l1: float   # load-balance deviation, token-occurrence units
    l2: float   # cross-cluster activation mass
    theta: float

    @property
    def combined(self) -> float:
        return self.theta * self.l1 + (1.0 - self.theta) * self.l2


def objective(assign: Assignment, matrix: TokenExpertMatrix,
              theta: float) -> ObjectiveValue:
    """Evaluate the load-balance and cross-cluster terms for an assignment."""
    counts = matrix.counts.astype(np.int64)
    R, C = assign.token_labels, assign.expert_labels
    if len(R) != counts.shape[0] or len(C) != counts.shape[1]:
        raise SolverError("assignment dimensions do not match the matrix")
    E = int(max(R.max(initial=0), C.max(initial=0))) + 1
    freq = counts.sum(axis=1)
    total = int(freq.sum())
    loads = np.bincount(R, weights=freq, minlength=E)
    l1 = float(np.abs(loads - total / E).sum())
    l2 = float(total - within_mass(R, C, counts))
    return ObjectiveValue(l1=l1, l2=l2, theta=theta)


def within_mass(token_labels, expert_labels, counts) -> int:
    """Activation mass landing inside matching token/expert clusters."""
    same = np.asarray(expert_labels)[None, :] == np.asarray(token_labels)[:, None]
    return int(counts[same].sum())


def check_constraints(assign: Assignment, topology: Topology) -> list[str]:
    """Report violations of the hard constraints: labels in range and exactly
    N/E experts per cluster."""
    report = []
    E = topology.clusters
    if topology.experts % E != 0:
        return ["clusters do not divide experts (configuration error)"]
    cap = topology.experts_per_cluster
    R, C = assign.token_labels, assign.expert_labels
    if len(C) != topology.experts:
        report.append(f"expected {topology.experts} expert labels, got {len(C)}")
        return report
    if R.size and (R.min() < 0 or R.max() >= E):
        report.append("token label out of range")
    if C.min() < 0 or C.max() >= E:
        report.append("expert label out of range")
        return report
    sizes = np.bincount(C, minlength=E)
    for c in np.nonzero(sizes != cap)[0]:
        report.append(f"cluster {c} holds {sizes[c]} experts, expected {cap}")
    return report


def sample_labels(p_matrix, kind: str, matrix: TokenExpertMatrix | None,
                  beta: float, rng, n_samples: int = 1) -> np.ndarray:
    """Draw label vectors by sequential capacity-masked multinomial sampling.

    kind="expert": a cluster is masked once it holds N/E experts (exact
    capacity).  kind="token": a cluster is masked once its accumulated token
    frequency reaches S/E*beta; if every cluster is masked the token goes to
    the currently least-loaded cluster.  Returns (n_samples, rows) labels.
    """
    p_matrix = np.asarray(p_matrix, dtype=np.float64)
    rows, E = p_matrix.shape
    labels = np.empty((n_samples, rows), dtype=np.int64)
    mask = np.ones((n_samples, E))
    counter = np.zeros((n_samples, E))
    if kind == "expert":
        cap = rows // E
        weight = None
    elif kind == "token":
        if matrix is None:
            raise SolverError("token sampling needs the activation matrix")
        weight = matrix.freq.astype(np.float64)
        cap = weight.sum() / E * beta
    else:
        raise SolverError(f"unknown sampling kind {kind!r}")

    sample_ix = np.arange(n_samples)
    draws = rng.random((rows, n_samples))
    for i in range(rows):
        p = p_matrix[i] * mask
        tot = p.sum(axis=1)
        dead = tot <= 0.0
        if dead.any():
            # one-hot probability on a masked cluster: fall back to the mask
            # itself (uniform over open clusters) if any cluster is open
            open_any = mask[dead].sum(axis=1) > 0
            p[dead] = np.where(open_any[:, None], mask[dead], 1.0)
            tot = p.sum(axis=1)
        cls = (np.cumsum(p, axis=1) > (draws[i] * tot)[:, None]).argmax(axis=1)
        if kind == "token":
            exhausted = mask.sum(axis=1) == 0
            if exhausted.any():
                cls[exhausted] = counter[exhausted].argmin(axis=1)
        labels[:, i] = cls
        if kind == "expert":
            counter[sample_ix, cls] += 1.0
            mask[counter >= cap] = 0.0
        else:
            counter[sample_ix, cls] += weight[i]
            mask[counter >= cap] = 0.0
    return labels


def _sample_scores(ep_labels, tk_labels, counts):
    """Within-cluster activation mass of each (expert, token) sample pair."""
    K, N = ep_labels.shape
    t = tk_labels.shape[1]
    E = int(max(ep_labels.max(initial=0), tk_labels.max(initial=0))) + 1
    tk_onehot = np.zeros((K, t, E))
    tk_onehot[np.arange(K)[:, None], np.arange(t)[None, :], tk_labels] = 1.0
    proj = np.einsum("ste,tn->sen", tk_onehot, counts)  # mass per (cluster, expert)
    return proj[np.arange(K)[:, None], ep_labels, np.arange(N)[None, :]].sum(axis=1)


def _combined_batch(tk_labels, joint_scores, freq, total, E, theta):
    """Combined objective of every (expert, token) sample pair, given the
    within-cluster mass already computed for each pair."""
    K, t = tk_labels.shape
    loads = np.zeros((K, E))
    np.add.at(loads, (np.arange(K)[:, None], tk_labels), freq[None, :])
    l1 = np.abs(loads - total / E).sum(axis=1)
    return theta * l1 + (1 - theta) * (total - joint_scores)


def _combined_of(ep, tk, counts, freq, total, E, theta):
    loads = np.bincount(tk, weights=freq, minlength=E)
    l1 = np.abs(loads - total / E).sum()
    l2 = total - within_mass(tk, ep, counts)
    return theta * l1 + (1 - theta) * l2


def _improve_tokens(ep_labels, tk_labels, counts, freq, total, E, theta,
                    max_passes: int = 8):
    """Greedy single-token label moves that lower the combined objective.

    Cheap polish for the final candidates: each pass tries every token's
    best alternative cluster and applies it when the combined objective
    strictly drops; stops at a fixed point."""
    t = counts.shape[0]
    mass = np.zeros((t, E))
    for c in range(E):
        cols = ep_labels == c
        if cols.any():
            mass[:, c] = counts[:, cols].sum(axis=1)
    labels = tk_labels.copy()
    loads = np.bincount(labels, weights=freq, minlength=E)
    target = total / E
    for _ in range(max_passes):
        moved = False
        for j in range(t):
            if freq[j] == 0:
                continue
            old = labels[j]
            base_l1 = abs(loads[old] - target)
            best_delta, best_c = 0.0, old
            for c in range(E):
                if c == old:
                    continue
                d_l1 = (abs(loads[old] - freq[j] - target)
                        + abs(loads[c] + freq[j] - target)
                        - base_l1 - abs(loads[c] - target))
                d_l2 = mass[j, old] - mass[j, c]
                delta = theta * d_l1 + (1 - theta) * d_l2
                if delta < best_delta - 1e-12:
                    best_delta, best_c = delta, c
            if best_c != old:
                loads[old] -= freq[j]
                loads[best_c] += freq[j]
                labels[j] = best_c
                moved = True
        # cross-cluster token swaps: trade mass for balance in one step
        active = np.nonzero(freq > 0)[0]
        for j1 in active:
            c1 = labels[j1]
            for j2 in active[active > j1]:
                c2 = labels[j2]
                if c1 == c2:
                    continue
                shift = freq[j2] - freq[j1]
                d_l1 = (abs(loads[c1] + shift - target)
                        + abs(loads[c2] - shift - target)
                        - abs(loads[c1] - target) - abs(loads[c2] - target))
                d_l2 = (mass[j1, c1] - mass[j1, c2]
                        + mass[j2, c2] - mass[j2, c1])
                if theta * d_l1 + (1 - theta) * d_l2 < -1e-12:
                    labels[j1], labels[j2] = c2, c1
                    loads[c1] += shift
                    loads[c2] -= shift
                    c1 = labels[j1]
                    moved = True
        if not moved:
            break
    return labels


def _improve_experts(ep_labels, tk_labels, counts, E, max_passes: int = 8):
    """Greedy cross-cluster expert swaps that raise within-cluster mass.

    Token labels stay fixed, so the load term is unaffected and only the
    cross-cluster mass can improve.  Accepts the best positive-gain swap per
    pass until a fixed point."""
    labels = ep_labels.copy()
    t = counts.shape[0]
    onehot = np.zeros((t, E))
    onehot[np.arange(t), tk_labels] = 1.0
    A = counts.T @ onehot  # A[e, c] = mass expert e captures in cluster c
    for _ in range(max_passes * len(labels)):
        place = A[np.arange(len(labels)), labels]
        cross = A[:, labels]  # cross[e1, e2] = mass of e1 in e2's cluster
        gain = cross + cross.T - place[:, None] - place[None, :]
        gain[labels[:, None] == labels[None, :]] = 0.0
        i, j = np.unravel_index(int(gain.argmax()), gain.shape)
        if gain[i, j] <= 1e-12:
            break
        labels[i], labels[j] = labels[j], labels[i]
    return labels


def _token_best_response(ep_labels, counts, freq, E, beta):
    """Capacity-respecting greedy token labeling given fixed expert labels:
    heaviest tokens first, each to the open cluster holding most of its
    activation mass."""
    t = counts.shape[0]
    mass = np.zeros((t, E))
    for c in range(E):
        cols = ep_labels == c
        if cols.any():
            mass[:, c] = counts[:, cols].sum(axis=1)
    cap = freq.sum() / E * beta
    loads = np.zeros(E)
    labels = np.zeros(t, dtype=np.int64)
    for j in np.argsort(-freq, kind="stable"):
        open_c = loads < cap
        if open_c.any():
            c = int(np.where(open_c, mass[j], -np.inf).argmax())
        else:
            c = int(loads.argmin())
        labels[j] = c
        loads[c] += freq[j]
    return labels


def _repair_expert_argmax(p_ep, E):
    """Capacity-respecting argmax: greedily place experts (highest-confidence
    first) on their best open cluster."""
    N = p_ep.shape[0]
    cap = N // E
    order = np.argsort(-p_ep.max(axis=1), kind="stable")
    sizes = np.zeros(E, dtype=np.int64)
    labels = np.empty(N, dtype=np.int64)
    for e in order:
        prefs = np.argsort(-p_ep[e], kind="stable")
        for c in prefs:
            if sizes[c] < cap:
                labels[e] = c
                sizes[c] += 1
                break
    return labels


def solve_ceo(matrix: TokenExpertMatrix, config: SolverConfig,
              topology: Topology):
    """Cross-entropy co-clustering.

    Each iteration draws K capacity-masked expert and token label samples,
    scores each pair by within-cluster activation mass, and refits both
    probability matrices to the elite fraction with exponential smoothing.
    The returned assignment is the better (by the combined objective) of the
    final argmax labels and the best feasible sample seen.

    Returns (assignment, info) where info carries token confidences, the
    per-iteration best elite scores, and the chosen objective.
    """
    E = topology.clusters
    N = topology.experts
    if N % E != 0:
        raise SolverError("clusters must divide experts")
    if config.n_samples < 2:
        raise SolverError("need at least 2 samples per iteration")
    counts = matrix.counts.astype(np.float64)
    if counts.shape[1] != N:
        raise SolverError("matrix width does not match expert count")
    seen = matrix.freq > 0
    active = np.nonzero(seen)[0]
    t = len(active)
    sub = TokenExpertMatrix(layer=matrix.layer, counts=matrix.counts[active])
    sub_counts = counts[active]
    freq = sub.freq.astype(np.float64)
    total = freq.sum()
    rng = np.random.default_rng(config.seed)

    if E == 1:
        assign = Assignment(token_labels=np.zeros(counts.shape[0], dtype=np.int64),
                            expert_labels=np.zeros(N, dtype=np.int64))
        info = {"token_confidence": np.ones(counts.shape[0]),
                "elite_curve": [], "objective": objective(assign, matrix,
                                                          config.theta)}
        return assign, info

    p_ep = np.full((N, E), 1.0 / E)
    p_tk = np.full((t, E), 1.0 / E) if t else np.zeros((0, E))
    K = config.n_samples
    n_elite = max(1, int(round(config.rho * K)))
    best_combined = math.inf
    best_pair = None
    best_elite = -math.inf
    elite_curve = []

    for _ in range(config.n_steps):
        ep_samples = sample_labels(p_ep, "expert", None, config.beta, rng, K)
        if t:
            tk_samples = sample_labels(p_tk, "token", sub, config.beta, rng, K)
            # expert elite score: within-cluster mass with each token placed
            # on its best cluster for that partition (couples the expert
            # search to the mass it can capture, not to one noisy token draw)
            onehot = np.zeros((K, N, E))
            onehot[np.arange(K)[:, None], np.arange(N)[None, :],
                   ep_samples] = 1.0
            cluster_mass = np.tensordot(
                sub_counts, onehot, axes=([1], [1])).transpose(1, 0, 2)
            ep_scores = cluster_mass.max(axis=2).sum(axis=1)
            # token elite score: expected local mass under current p_ep
            W = sub_counts @ p_ep
            tk_scores = W[np.arange(t)[None, :], tk_samples].sum(axis=1)
            joint = cluster_mass[np.arange(K)[:, None],
                                 np.arange(t)[None, :],
                                 tk_samples].sum(axis=1)
        else:
            tk_samples = np.zeros((K, 0), dtype=np.int64)
            ep_scores = tk_scores = joint = np.zeros(K)
        ep_elite = np.argsort(-ep_scores, kind="stable")[:n_elite]
        tk_elite = np.argsort(-tk_scores, kind="stable")[:n_elite]
        best_elite = max(best_elite, float(joint.max(initial=0.0)))
        elite_curve.append(best_elite)

        ep_freq = np.zeros((N, E))
        np.add.at(ep_freq, (np.arange(N)[None, :], ep_samples[ep_elite]),
                  1.0 / n_elite)
        p_ep = (1 - config.eta) * p_ep + config.eta * ep_freq
        p_ep /= p_ep.sum(axis=1, keepdims=True)
        if t:
            tk_freq = np.zeros((t, E))
            np.add.at(tk_freq, (np.arange(t)[None, :], tk_samples[tk_elite]),
                      1.0 / n_elite)
            p_tk = (1 - config.eta) * p_tk + config.eta * tk_freq
            p_tk /= p_tk.sum(axis=1, keepdims=True)

            combined = _combined_batch(tk_samples, joint, freq, total, E,
                                       config.theta)
            s = int(combined.argmin())
            if combined[s] < best_combined:
                best_combined = float(combined[s])
                best_pair = (ep_samples[s].copy(), tk_samples[s].copy())

    # final labels: row argmax (ties to the lowest cluster), with a greedy
    # capacity repair when the expert argmax is infeasible; also consider
    # the best sampled pair and the capacity-greedy token response to the
    # final expert labels, keeping whichever scores best
    ep_labels = p_ep.argmax(axis=1)
    if np.any(np.bincount(ep_labels, minlength=E) != N // E):
        ep_labels = _repair_expert_argmax(p_ep, E)
    candidates = []
    if t:
        tk_argmax = p_tk.argmax(axis=1)
        candidates.append((ep_labels, tk_argmax))
        candidates.append((ep_labels,
                           _token_best_response(ep_labels, sub_counts, freq,
                                                E, config.beta)))
        if best_pair is not None:
            candidates.append(best_pair)
        # tiny expert spaces: consider every balanced partition outright,
        # with the capacity-greedy token response as its labeling
        n_parts = math.prod(math.comb(N - i * (N // E), N // E)
                            for i in range(E))
        if n_parts <= 200:
            for part in _balanced_expert_labelings(N, E):
                ep = np.asarray(part, dtype=np.int64)
                candidates.append((ep, _token_best_response(
                    ep, sub_counts, freq, E, config.beta)))
        polished = []
        for ep, tk in candidates:
            for _ in range(3):  # alternate swap and move passes
                tk = _improve_tokens(ep, tk, sub_counts, freq, total, E,
                                     config.theta)
                new_ep = _improve_experts(ep, tk, sub_counts, E)
                if np.array_equal(new_ep, ep):
                    break
                ep = new_ep
            polished.append((ep, tk))
        candidates = polished
        scored = [(float(_combined_of(ep, tk, sub_counts, freq, total, E,
                                      config.theta)), i)
                  for i, (ep, tk) in enumerate(candidates)]
        _, pick = min(scored)
        ep_labels, tk_labels = candidates[pick]
        tk_conf = p_tk[np.arange(t), tk_labels]
    else:
        tk_labels = np.zeros(0, dtype=np.int64)
        tk_conf = np.zeros(0)

    token_labels = np.zeros(counts.shape[0], dtype=np.int64)
    token_conf = np.zeros(counts.shape[0])
    token_labels[active] = tk_labels
    token_conf[active] = tk_conf
    assign = Assignment(token_labels=token_labels,
                        expert_labels=np.asarray(ep_labels, dtype=np.int64))
    info = {"token_confidence": token_conf, "elite_curve": elite_curve,
            "objective": objective(assign, matrix, config.theta)}
    return assign, info


def solve_bruteforce(matrix: TokenExpertMatrix, topology: Topology,
                     theta: float, max_enumerations: int = 10_000_000):
    """Exhaustive optimum over balanced expert partitions x token labelings.

    Ties go to the lexicographically smallest (expert labels, token labels)
    pair.  Guarded against instances larger than `max_enumerations`.
    """
    E, N = topology.clusters, topology.experts
    counts = matrix.counts.astype(np.int64)
    seen = matrix.freq > 0
    active = np.nonzero(seen)[0]
    t = len(active)
    n_parts = math.prod(math.comb(N - i * (N // E), N // E) for i in range(E))
    if n_parts * E ** t > max_enumerations:
        raise SolverError("instance too large for exhaustive enumeration")
    sub = counts[active]
    freq = sub.sum(axis=1)
    total = int(freq.sum())

    best = None
    for ep in _balanced_expert_labelings(N, E):
        ep_arr = np.asarray(ep, dtype=np.int64)
        for tk in itertools.product(range(E), repeat=t):
            tk_arr = np.asarray(tk, dtype=np.int64)
            loads = np.bincount(tk_arr, weights=freq, minlength=E)
            l1 = float(np.abs(loads - total / E).sum())
            l2 = float(total - within_mass(tk_arr, ep_arr, sub))
            combined = theta * l1 + (1 - theta) * l2
            key = (combined, ep, tk)
            if best is None or key < best:
                best = key
    combined, ep, tk = best
    token_labels = np.zeros(counts.shape[0], dtype=np.int64)
    token_labels[active] = tk
    assign = Assignment(token_labels=token_labels,
                        expert_labels=np.asarray(ep, dtype=np.int64))
    return assign, objective(assign, matrix, theta)


def _balanced_expert_labelings(N, E):
    """All label vectors with exactly N/E experts per cluster, in
    lexicographic order."""
    cap = N // E
    for labels in itertools.product(range(E), repeat=N):
        if all(labels.count(c) == cap for c in range(E)):
            yield labels


def baseline_round_robin(topology: Topology) -> Assignment:
    """Vanilla layout: contiguous expert blocks, tokens round-robin by id."""
    npc = topology.experts_per_cluster
    expert_labels = np.arange(topology.experts) // npc
    token_labels = np.arange(topology.vocab) % topology.clusters
    return Assignment(token_labels=token_labels, expert_labels=expert_labels)


def baseline_two_stage_kmeans(matrix: TokenExpertMatrix, topology: Topology,
                              seed: int, beta: float = 1.1):
    """Balanced k-means over expert columns, then capacity-limited token
    assignment by activation mass."""
    from sklearn.cluster import KMeans

    E, N = topology.clusters, topology.experts
    counts = matrix.counts.astype(np.float64)
    if counts.sum() == 0:
        raise SolverError("cannot cluster an all-zero matrix")
    freq = counts.sum(axis=1, keepdims=True)
    norm = np.divide(counts, freq, out=np.zeros_like(counts), where=freq > 0)
    features = norm.T  # one feature vector per expert

    km = KMeans(n_clusters=E, n_init=4, random_state=seed).fit(features)
    dists = km.transform(features)
    # greedy nearest-centroid with exact capacity: place the most decisive
    # experts first (largest gap between their best and second-best centroid)
    cap = N // E
    gap = np.sort(dists, axis=1)
    order = np.argsort(-(gap[:, 1] - gap[:, 0]), kind="stable")
    sizes = np.zeros(E, dtype=np.int64)
    expert_labels = np.empty(N, dtype=np.int64)
    for e in order:
        for c in np.argsort(dists[e], kind="stable"):
            if sizes[c] < cap:
                expert_labels[e] = c
                sizes[c] += 1
                break

    # stage 2: tokens to the cluster holding most of their mass, with a soft
    # frequency capacity
    mass = np.zeros((counts.shape[0], E))
    for c in range(E):
        mass[:, c] = counts[:, expert_labels == c].sum(axis=1)
    token_labels = np.zeros(counts.shape[0], dtype=np.int64)
    tok_freq = counts.sum(axis=1)
    seen = np.nonzero(tok_freq > 0)[0]
    cap_tok = tok_freq.sum() / E * beta
    loads = np.zeros(E)
    for j in seen[np.argsort(-tok_freq[seen], kind="stable")]:
        open_c = loads < cap_tok
        if open_c.any():
            cand = np.where(open_c, mass[j], -np.inf)
            c = int(cand.argmax())
        else:
            c = int(loads.argmin())
        token_labels[j] = c
        loads[c] += tok_freq[j]
    return Assignment(token_labels=token_labels, expert_labels=expert_labels)


# ---------------------------------------------------------------------------
# Alternating request/expert optimizer
# ---------------------------------------------------------------------------

def _request_expert_mass(requests, conf_probs):
    """Per-request expert-probability mass, normalized by request length."""
    K = len(requests)
    N = conf_probs.shape[1]
    mass = np.zeros((K, N))
    for i, (_, toks) in enumerate(requests):
        if len(toks):
            mass[i] = conf_probs[toks].sum(axis=0) / len(toks)
    return mass


def _cosine_rows(v, M):
    nv = np.linalg.norm(v)
    nM = np.linalg.norm(M, axis=1)
    denom = nv * nM
    out = np.zeros(len(M))
    ok = denom > 0
    out[ok] = (M[ok] @ v) / denom[ok]
    return out


def solve_alternating(matrix: TokenExpertMatrix, requests: RequestTrace,
                      config: SolverConfig, topology: Topology):
    """Alternate greedy expert placement and greedy request scheduling.

    Expert placement: experts in load-descending order go to the cluster
    maximizing alpha_e * expert-expert affinity + beta_e * request-expert
    affinity - gamma_e * cluster load, with exact N/E capacity, then ft_steps
    random cross-cluster swap proposals accepted on positive affinity gain.
    Request scheduling: requests in length-descending order go to the cluster
    maximizing alpha_r * request-request + beta_r * request-expert affinity,
    with ceil(K/E) capacity.  The best iterate by (max cluster load +
    cross-cluster mass) wins.  Token labels come from per-request placement
    counts.
    """
    E, N = topology.clusters, topology.experts
    if N % E != 0:
        raise SolverError("clusters must divide experts")
    if not requests.requests:
        raise SolverError("alternating solver needs a non-empty request list")
    counts = matrix.counts.astype(np.float64)
    tot = counts.sum(axis=0, keepdims=True)
    conf = np.divide(counts, counts.sum(axis=1, keepdims=True),
                     out=np.zeros_like(counts),
                     where=counts.sum(axis=1, keepdims=True) > 0)
    rng = np.random.default_rng(config.seed)
    K = len(requests.requests)
    cap_req = math.ceil(K / E)
    cap_ep = N // E
    req_mass = _request_expert_mass(requests.requests, conf)
    expert_load = counts.sum(axis=0)
    req_lens = np.array([len(toks) for _, toks in requests.requests])

    if E == 1:
        token_labels = np.zeros(counts.shape[0], dtype=np.int64)
        assign = Assignment(token_labels=token_labels,
                            expert_labels=np.zeros(N, dtype=np.int64))
        return assign, {"request_labels": np.zeros(K, dtype=np.int64),
                        "token_confidence": np.ones(counts.shape[0])}

    def schedule_requests(expert_labels):
        labels = np.full(K, -1, dtype=np.int64)
        sizes = np.zeros(E, dtype=np.int64)
        mask = np.ones(E, dtype=bool)
        order = np.argsort(-req_lens, kind="stable")
        for r in order:
            raff = np.zeros(E)
            for c in range(E):
                members = labels == c
                if members.any():
                    raff[c] = _cosine_rows(req_mass[r],
                                           req_mass[members]).mean()
            if expert_labels is not None:
                eaff = np.array([req_mass[r, expert_labels == c].sum()
                                 for c in range(E)])
            else:
                eaff = np.zeros(E)
            score = config.alpha_r * raff + config.beta_r * eaff
            score[~mask] = -np.inf
            c = int(score.argmax())
            labels[r] = c
            sizes[c] += 1
            if sizes[c] >= cap_req:
                mask[c] = False
            if not mask.any():
                mask[:] = sizes < cap_req
                if not mask.any():
                    mask[:] = True
        return labels

    def place_experts(req_labels):
        labels = np.full(N, -1, dtype=np.int64)
        sizes = np.zeros(E, dtype=np.int64)
        mask = np.ones(E, dtype=bool)
        loads_cls = np.zeros(E)
        # aggregate request mass per cluster, request-length weighted
        cluster_req = np.zeros((E, N))
        for c in range(E):
            members = req_labels == c
            if members.any():
                cluster_req[c] = (req_mass[members]
                                  * req_lens[members, None]).sum(axis=0)
        order = np.argsort(-expert_load, kind="stable")
        for e in order:
            eaff = np.zeros(E)
            for c in range(E):
                members = labels == c
                if members.any():
                    eaff[c] = _cosine_rows(counts[:, e],
                                           counts[:, members].T).mean()
            raff = cluster_req[:, e]
            scale = max(expert_load.max(), 1.0)
            score = (config.alpha_e * eaff
                     + config.beta_e * raff / max(raff.max(), 1.0)
                     - config.gamma_e * loads_cls / scale)
            score[~mask] = -np.inf
            c = int(score.argmax())
            labels[e] = c
            sizes[c] += 1
            loads_cls[c] += expert_load[e]
            if sizes[c] >= cap_ep:
                mask[c] = False
        # fine-tune: random cross-cluster swaps on positive within-mass gain
        def placement_mass(lab):
            return sum(cluster_req[lab[e], e] for e in range(N))
        current = placement_mass(labels)
        for _ in range(config.ft_steps):
            c1, c2 = rng.integers(E), rng.integers(E)
            if c1 == c2:
                continue
            e1 = rng.choice(np.nonzero(labels == c1)[0])
            e2 = rng.choice(np.nonzero(labels == c2)[0])
            gain = (cluster_req[c2, e1] + cluster_req[c1, e2]
                    - cluster_req[c1, e1] - cluster_req[c2, e2])
            if gain > 0:
                labels[e1], labels[e2] = c2, c1
                current += gain
        return labels

    def iterate_score(ep_labels, req_labels):
        loads = np.zeros(E)
        cross = 0.0
        for r, c in enumerate(req_labels):
            loads[c] += req_lens[r]
            local = req_mass[r, ep_labels == c].sum() * req_lens[r]
            cross += req_lens[r] - local
        return loads.max() + cross

    req_labels = schedule_requests(None)
    best = None
    for _ in range(config.n_steps):
        ep_labels = place_experts(req_labels)
        req_labels = schedule_requests(ep_labels)
        score = iterate_score(ep_labels, req_labels)
        if best is None or score < best[0]:
            best = (score, ep_labels.copy(), req_labels.copy())
    _, ep_labels, req_labels = best

    # token labels by majority vote over the requests carrying each token
    votes = np.zeros((counts.shape[0], E))
    for (rid, toks), c in zip(requests.requests, req_labels):
        np.add.at(votes, (toks, c), 1.0)
    totals = votes.sum(axis=1)
    token_labels = votes.argmax(axis=1)
    token_conf = np.divide(votes.max(axis=1), totals,
                           out=np.zeros_like(totals), where=totals > 0)
    assign = Assignment(token_labels=token_labels, expert_labels=ep_labels)
    return assign, {"request_labels": req_labels,
                    "token_confidence": token_conf}


def metrics(assign: Assignment, evaluation) -> dict:
    """Local activation rate and load-imbalance under an assignment.

    evaluation: a TokenExpertMatrix (counts-weighted) or a RequestTrace with
    routed ground truth (event-counted over all layers).  LAR is the fraction
    of activation events whose token and expert share a cluster; imbalance is
    the maximum per-cluster expert-side load divided by the median.
    """
    C = assign.expert_labels
    R = assign.token_labels
    E = int(C.max(initial=0)) + 1
    if isinstance(evaluation, TokenExpertMatrix):
        counts = evaluation.counts.astype(np.int64)
        total = int(counts.sum())
        if total == 0:
            raise SolverError("no activation events to evaluate")
        local = within_mass(R[:counts.shape[0]], C, counts)
        loads = np.array([counts[:, C == c].sum() for c in range(E)],
                         dtype=np.float64)
    elif isinstance(evaluation, RequestTrace):
        routed = evaluation.all_routed()
        tokens = evaluation.all_tokens()
        if routed.size == 0:
            raise SolverError("no activation events to evaluate")
        dev = R[tokens]                        # (occ,)
        expert_dev = C[routed]                 # (occ, layers, k)
        local = int((expert_dev == dev[:, None, None]).sum())
        total = int(expert_dev.size)
        loads = np.bincount(expert_dev.reshape(-1), minlength=E).astype(float)
    else:
        raise SolverError("unsupported evaluation payload")
    median = float(np.median(loads))
    imbalance = float(loads.max() / median) if median > 0 else math.inf
    return {"lar": local / total, "imbalance": imbalance,
            "events": total, "local_events": int(local)}
