import pytest

from gridbench.synthgrid import GridConfig, build_grid


@pytest.fixture(scope="session")
def tiny_grid():
    """4 classes x 3 domains, 12px, small pools; shared read-only."""
    cfg = GridConfig(n_classes=4, n_domains=3, image_size=12,
                     samples_per_cell=(30, 10, 8, 60), seed=42)
    return build_grid(cfg)


@pytest.fixture(scope="session")
def ten_by_five_grid():
    """Full-width class/domain layout with minimal pools, for grouping tests."""
    cfg = GridConfig(n_classes=10, n_domains=5, image_size=8,
                     samples_per_cell=(6, 2, 2, 0), seed=7)
    return build_grid(cfg)
