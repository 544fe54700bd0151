import numpy as np
import pytest

from loiv import Dataset, build_weights


def labeled_dataset(rng, n, n_cells, with_w=False, min_cell=4):
    """Random dataset with judge-style labels, every cell at least min_cell rows."""
    labels = rng.integers(0, n_cells, size=n)
    for cell in range(n_cells):
        short = min_cell - np.count_nonzero(labels == cell)
        if short > 0:
            donors = np.flatnonzero(np.bincount(labels, minlength=n_cells)[labels] > min_cell)
            labels[rng.choice(donors, short, replace=False)] = cell
    y = rng.standard_normal(n)
    x = rng.standard_normal(n)
    w = rng.standard_normal((n, 2)) if with_w else None
    return Dataset(y=y, x=x, z=labels, w=w)


def labeled_weights(rng, n, n_cells, with_w=False):
    ds = labeled_dataset(rng, n, n_cells, with_w=with_w)
    kind = "ujive" if with_w else "jive"
    return ds, build_weights(ds, kind=kind)


@pytest.fixture
def rng():
    return np.random.default_rng(20260816)
