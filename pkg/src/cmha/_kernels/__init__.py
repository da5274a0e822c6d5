"""Hot-kernel dispatch: compiled extension when available, NumPy otherwise.

Set ``CMHA_NO_EXT=1`` to force the NumPy lane even when the extension built.
"""

from __future__ import annotations

import os

if os.environ.get("CMHA_NO_EXT"):
    from cmha._kernels import _fallback as impl

    HAVE_EXT = False
else:
    try:
        from cmha._kernels import _core as impl  # type: ignore[attr-defined]

        HAVE_EXT = True
    except ImportError:
        from cmha._kernels import _fallback as impl

        HAVE_EXT = False

LANE = impl.LANE

sinkhorn_core = impl.sinkhorn_core
triplet_angles = impl.triplet_angles
jacobi_svd3 = impl.jacobi_svd3
count_inliers_batch = impl.count_inliers_batch
