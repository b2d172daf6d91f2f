"""Ancilla-chain dilation of linear stochastic differential equations.

Thin Python layer over the C++ core: chain construction, builtin systems,
presampled noise, pathwise runs, the second-moment pipeline, and the
experiment driver.
"""

try:
    from ._stochdil import *  # noqa: F401,F403  (installed layout)
    from ._stochdil import __doc__ as _core_doc
except ImportError:  # pragma: no cover - build-tree layout
    from _stochdil import *  # noqa: F401,F403
    from _stochdil import __doc__ as _core_doc

__all__ = [name for name in dir() if not name.startswith("_")]
__version__ = "0.1.0"
