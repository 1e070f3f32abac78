"""Backend selection for the hot geometry/assignment kernels.

The compiled ``_core`` extension is used when importable; otherwise the
pure-Python ``_pycore`` twin. Set ``DPO_PURE_PYTHON=1`` to force the fallback.
"""
import os

from . import _pycore

if os.environ.get("DPO_PURE_PYTHON") == "1":
    _impl = _pycore
else:
    try:
        from . import _core as _impl
    except ImportError:
        _impl = _pycore

BACKEND = _impl.BACKEND
bev_intersection = _impl.bev_intersection
bev_iou_pair = _impl.bev_iou_pair
bev_iou_matrix = _impl.bev_iou_matrix
nms_sorted = _impl.nms_sorted
hungarian = _impl.hungarian


def backends():
    """Every importable backend module, fallback first."""
    mods = [_pycore]
    try:
        from . import _core
        mods.append(_core)
    except ImportError:
        pass
    return mods
