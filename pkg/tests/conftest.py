import numpy as np
import pytest

from ddseq.harness import PoissonStack
from ddseq.krylov import StoppingRule
from ddseq.meshfem import BoundaryCondition, Partition, build_grid


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def make_stack(nx, ny, px, py, edges=("left", "right", "bottom", "top"),
               **kwargs):
    mesh = build_grid(nx, ny)
    bc = BoundaryCondition.on_edges(mesh, list(edges), 0.0)
    partition = Partition(mesh, px, py)
    kwargs.setdefault("rule", StoppingRule(tol=1e-10))
    return PoissonStack(mesh, bc, partition, **kwargs)


def random_spd(n, rng, kind="generic"):
    """Dense SPD matrix with order-one diagonal dominance."""
    B = rng.standard_normal((n, n))
    A = B @ B.T + n * np.eye(n)
    return 0.5 * (A + A.T)
