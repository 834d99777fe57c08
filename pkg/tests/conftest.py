import numpy as np
import pytest

from parahom.cell_solver import TorusGrid, solve_corrector
from parahom.effective_tensor import compute_abar
from parahom.flux_correctors import build_flux_data
from parahom.tensor_algebra import CoefficientField

# a(y, s) = 2 + sin 2pi(y + s)
TRAVELLING = [((0, 0), 2.0), ((1, 1), -0.5j)]
# a(y) = 2 + sin 2pi y
STATIC = [((0, 0), 2.0), ((1, 0), -0.5j)]


def travelling(m=1):
    return CoefficientField.isotropic(1, m, 1 / 3, TRAVELLING)


def static(m=1):
    return CoefficientField.isotropic(1, m, 1 / 3, STATIC)


def suite():
    """Space-time dependent tensors used for the property checks."""
    out = [travelling(1), travelling(2)]
    # full 2x2 tensor in d=2, m=1, two modes in space and one in time
    modes = []
    for a, b, c0 in (((1, 0), (1, 0), 2.0), ((0, 1), (0, 1), 2.5), ((1, 0), (0, 1), 0.3), ((0, 1), (1, 0), 0.1)):
        modes.append(dict(alpha=a, beta=b, i=0, j=0, k=(0, 0, 0), re=c0))
    modes.append(dict(alpha=(1, 0), beta=(1, 0), i=0, j=0, k=(1, 0, 1), re=0.2, im=-0.3))
    modes.append(dict(alpha=(0, 1), beta=(0, 1), i=0, j=0, k=(0, 1, 0), im=0.4))
    modes.append(dict(alpha=(1, 0), beta=(0, 1), i=0, j=0, k=(1, 1, -1), re=0.1))
    out.append(CoefficientField.from_modes(2, 1, 1, 0.25, modes))
    # 2x2 system in d=1, m=1
    sys_modes = [dict(alpha=(1,), beta=(1,), i=0, j=0, k=(0, 0), re=2.0),
                 dict(alpha=(1,), beta=(1,), i=1, j=1, k=(0, 0), re=3.0),
                 dict(alpha=(1,), beta=(1,), i=0, j=1, k=(0, 0), re=0.4),
                 dict(alpha=(1,), beta=(1,), i=0, j=0, k=(1, 1), im=-0.5),
                 dict(alpha=(1,), beta=(1,), i=1, j=0, k=(2, -1), re=0.3)]
    out.append(CoefficientField.from_modes(1, 1, 2, 0.25, sys_modes))
    return out


@pytest.fixture(scope="session")
def grid1():
    return TorusGrid(1, 32, 32)


@pytest.fixture(scope="session")
def travelling_data(grid1):
    A = travelling(1)
    chi = solve_corrector(A, grid1)
    abar = compute_abar(A, chi)
    return A, chi, abar, build_flux_data(A, chi, abar)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
