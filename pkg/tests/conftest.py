import numpy as np
import pytest
from scipy.special import expit

from crtmethods.data import ClusterRecord, IndividualRecord, TrialData


def random_trial(rng, n_clusters=10, size_range=(5, 30), equal_sizes=False, binary=True,
                 paired=False, n_w=2):
    """Small synthetic trial with signal in W1 and E1."""
    J = n_clusters
    sizes = (np.full(J, size_range[0]) if equal_sizes
             else rng.integers(size_range[0], size_range[1] + 1, J))
    arm = rng.permutation(np.repeat([0, 1], J // 2))
    pair_ids = None
    if paired:
        arm = np.zeros(J, dtype=int)
        arm[1::2] = 1
        flip = rng.uniform(size=J // 2) < 0.5
        arm[0::2][flip], arm[1::2][flip] = 1, 0
        pair_ids = np.repeat(np.arange(J // 2), 2)
    E = rng.normal(size=(J, 1))
    idx = np.repeat(np.arange(J), sizes)
    u = rng.normal(0, 0.5, J)
    W = rng.normal(size=(idx.size, n_w)) + u[idx, None]
    eta = -0.3 + 0.8 * W[:, 0] + 0.3 * E[idx, 0] - 0.4 * arm[idx]
    if binary:
        y = (rng.uniform(size=idx.size) < expit(eta)).astype(float)
    else:
        y = eta + rng.normal(size=idx.size)
    return TrialData(arm=arm, sizes=sizes, y=y, cluster_covariates=E, individual_covariates=W,
                     cluster_covariate_names=("E1",),
                     individual_covariate_names=tuple(f"W{k + 1}" for k in range(n_w)),
                     pair_ids=pair_ids)


def toy_clusters():
    """Five clusters: four of size 10 with 2 events, one of 10000 with 7500."""
    clusters = []
    for j, (n, k) in enumerate([(10, 2)] * 4 + [(10000, 7500)]):
        inds = tuple(IndividualRecord((), 1.0 if i < k else 0.0) for i in range(n))
        clusters.append(ClusterRecord(j, 0, (), inds))
    return clusters


@pytest.fixture
def rng():
    return np.random.default_rng(20240601)


@pytest.fixture
def small_trial(rng):
    return random_trial(rng)


#: one line per acceptance criterion, repeated in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
