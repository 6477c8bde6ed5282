import functools

import numpy as np

from tiltsde import CATALOG, make_instance
from tiltsde.analytic_models import GaussianMixture
from tiltsde.diffusion_core import DiffusionSpec
from tiltsde.grids import GridDensity, SpatialGrid

GRID_1D = SpatialGrid((-10.0,), (10.0,), (4096,))
INSTANCES = tuple(CATALOG)
# rewards with a finite upper bound admit an exact rejection sampler
BOUNDED_INSTANCES = tuple(n for n in CATALOG if make_instance(n).reward.upper is not None)


@functools.lru_cache(maxsize=None)
def instance(name):
    return make_instance(name)


def bm_spec(T=1.0, d=1, sigma=1.0):
    return DiffusionSpec(d, lambda t, y: np.zeros_like(y), lambda t: sigma, T,
                         drift_jacobian=lambda t, y: np.zeros((y.shape[0], d, d)), name="bm")


def ou_spec(k=1.0, T=1.0, sigma=1.0, d=1):
    return DiffusionSpec(d, lambda t, y: -k * y, lambda t: sigma, T,
                         drift_jacobian=lambda t, y: np.broadcast_to(-k * np.eye(d), (y.shape[0], d, d)).copy(),
                         name="ou")


def gaussian_density(grid, mean, var):
    return GridDensity.from_logpdf(grid, GaussianMixture.gaussian(np.full(grid.dim, mean), var).logpdf)


def se_mean(x):
    x = np.asarray(x, dtype=float)
    return x.mean(), x.std(ddof=1) / np.sqrt(x.size)
