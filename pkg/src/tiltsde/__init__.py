"""Reward fine-tuning of diffusion samplers by stochastic control, on gridded toy models.

The main entry points are :class:`FineTuneProblem` (or :func:`make_instance`
for the built-in toy problems) and the ``tiltsde`` command line tool.
"""

__version__ = "0.1.0"

from .errors import TiltError  # noqa: E402
from .grids import GridDensity, SpatialGrid  # noqa: E402
from .problem import CATALOG, FineTuneProblem, build_problem, make_instance  # noqa: E402

__all__ = ["TiltError", "GridDensity", "SpatialGrid", "CATALOG", "FineTuneProblem", "build_problem",
           "make_instance", "__version__"]
