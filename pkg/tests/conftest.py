import pytest

from clusterdp.model import OutcomeSpace, PopulationDataset, UnitRecord
from clusterdp.rng import RngStreams


def make_population(space_values, outcomes_by_cluster):
    """Build a population from {cluster_label: [(y0, y1), ...]}."""
    space = OutcomeSpace(tuple(space_values))
    records = []
    for label, pairs in outcomes_by_cluster.items():
        for i, (y0, y1) in enumerate(pairs):
            records.append(UnitRecord(f"{label}_{i}", label, float(y0), float(y1)))
    return PopulationDataset.from_records(records, space)


def random_population(rng, n_clusters=3, size_range=(4, 8), space_values=(0.0, 1.0, 2.0)):
    space_values = tuple(space_values)
    k = len(space_values)
    clusters = {}
    for c in range(n_clusters):
        size = int(rng.integers(size_range[0], size_range[1] + 1))
        clusters[c] = [
            (space_values[rng.integers(0, k)], space_values[rng.integers(0, k)])
            for _ in range(size)
        ]
    return make_population(space_values, clusters)


@pytest.fixture
def binary_space():
    return OutcomeSpace((0.0, 1.0))


@pytest.fixture
def small_pop():
    return make_population(
        (0.0, 1.0, 2.0),
        {
            "a": [(0, 1), (1, 2), (0, 0), (2, 2)],
            "b": [(1, 1), (2, 0), (0, 1), (1, 2), (2, 1), (0, 2)],
        },
    )


@pytest.fixture
def streams():
    return RngStreams(20240811)
