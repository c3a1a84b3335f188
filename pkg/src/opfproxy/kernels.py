"""Kernel backend selection.

The compiled extension is preferred when it imported cleanly; setting
``OPFPROXY_PURE_PYTHON=1`` in the environment forces the numpy
fallback (useful for benchmarking and debugging).
"""

import os

if os.environ.get("OPFPROXY_PURE_PYTHON", "") not in ("", "0"):
    from . import _kernels_np as _impl
else:
    try:
        from . import _kernels_c as _impl  # type: ignore[attr-defined]
    except ImportError:
        from . import _kernels_np as _impl

BACKEND = _impl.BACKEND

bus_injections = _impl.bus_injections
nodal_jacobian_data = _impl.nodal_jacobian_data
branch_flows = _impl.branch_flows
branch_jacobian_cols = _impl.branch_jacobian_cols
