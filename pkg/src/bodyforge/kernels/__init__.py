"""Hot-kernel routing: compiled Cython core when available, numpy fallback
otherwise. Set BODYFORGE_KERNELS=reference to force the pure route (used by
the dual-route tests and the benchmark).
"""

import os

from . import reference

_forced = os.environ.get("BODYFORGE_KERNELS", "").strip().lower()

if _forced in ("", "native"):
    try:
        from . import _native as _impl  # type: ignore[attr-defined]
    except ImportError:
        if _forced == "native":
            raise
        _impl = reference
elif _forced == "reference":
    _impl = reference
else:
    raise ImportError(f"BODYFORGE_KERNELS={_forced!r} (expected 'native' or 'reference')")

BACKEND = _impl.BACKEND

body_sdf = _impl.body_sdf
body_nearest_primitive = _impl.body_nearest_primitive
raymarch_body = _impl.raymarch_body
nn_sqdist = _impl.nn_sqdist
rasterize_mesh = _impl.rasterize_mesh

__all__ = [
    "BACKEND",
    "body_sdf",
    "body_nearest_primitive",
    "raymarch_body",
    "nn_sqdist",
    "rasterize_mesh",
    "reference",
]
