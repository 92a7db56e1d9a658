import numpy as np
import pytest

from moesched import profiles


@pytest.fixture(scope="session")
def planted():
    """Noise-free planted profile: E=4, N=16, t=200, with ground truth."""
    topo = profiles.Topology(devices=4, clusters=4, experts=16, top_k=2,
                             layers=3, vocab=1024)
    mats, trace, truth = profiles.synthesize_planted_profile(
        topo, noise=0.0, tokens_per_cluster=50, seed=0, reps=8)
    return topo, mats, trace, truth


@pytest.fixture(scope="session")
def planted_noisy():
    """Planted profile with 20% routing noise."""
    topo = profiles.Topology(devices=4, clusters=4, experts=16, top_k=2,
                             layers=3, vocab=1024)
    mats, trace, truth = profiles.synthesize_planted_profile(
        topo, noise=0.2, tokens_per_cluster=50, seed=1, reps=8)
    return topo, mats, trace, truth


def aggregate(mats):
    total = np.zeros(mats[0].counts.shape, dtype=np.int64)
    for m in mats:
        total += m.counts.astype(np.int64)
    return profiles.TokenExpertMatrix(layer=-1, counts=total)
