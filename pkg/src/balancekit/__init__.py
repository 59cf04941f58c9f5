"""balancekit: muscle-actuated balance-recovery controllers and balance regions."""

__version__ = "0.1.0"

from ._kernels import NUMBA_ENABLED  # noqa: F401
