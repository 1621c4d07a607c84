"""Backend selection for the hot sampling kernels.

The compiled extension is used when importable. Set the environment
variable ``MTDLNM_PURE_PYTHON=1`` before import to force the fallback.
"""

import os

from . import _pykernels

BACKEND = "python"
_impl = _pykernels

if os.environ.get("MTDLNM_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _ckernels as _impl  # noqa: F811
        BACKEND = "cython"
    except ImportError:  # extension not built
        _impl = _pykernels

ghk_log_orthant = _impl.ghk_log_orthant
tmvn_gibbs = _impl.tmvn_gibbs
pg_sum_draws = _impl.pg_sum_draws
tn_lower = _impl.tn_lower

__all__ = ["BACKEND", "ghk_log_orthant", "tmvn_gibbs", "pg_sum_draws", "tn_lower"]
