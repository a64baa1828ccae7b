"""Offline reinforcement learning with function-valued actions.

The package trains and evaluates policies whose actions are whole functions
on [0, 1] (daily-step distributions encoded as log-quantile-density curves),
using kernel ridge regression over a tensor-product RKHS for the Q-function
and penalized B-spline functional linear policies.

Submodules are imported lazily so the command line can cap BLAS thread
counts before numpy loads.
"""

from importlib import import_module

__version__ = "0.1.0"

_SUBMODULES = (
    "core",
    "bspline",
    "kernel",
    "density",
    "reward",
    "fqe",
    "fqi",
    "env",
    "ingest",
    "report",
    "svgplot",
    "cli",
)


def __getattr__(name):
    if name in _SUBMODULES:
        module = import_module(f"{__name__}.{name}")
        globals()[name] = module
        return module
    raise AttributeError(f"module {__name__!r} has no attribute {name!r}")


def __dir__():
    return sorted(list(globals()) + list(_SUBMODULES))
