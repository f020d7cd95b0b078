"""Pure-numpy bilinear warp kernel (fallback backend).

Mirrors _warp_cy arithmetic exactly: float64 intermediate math with the same
expression tree, so both backends produce bit-identical float32 output.
"""

from __future__ import annotations

import numpy as np


def warp_bilinear_kernel(image: np.ndarray, inv: np.ndarray) -> np.ndarray:
    """Inverse-map bilinear sampling with zero fill outside the source frame.

    image: H×W×C float32; inv: flat (a, b, c, d, e, f) float64 for the
    output→source map sx = a·x + b·y + c, sy = d·x + e·y + f.
    """
    h, w, c = image.shape
    a, b, cc, d, e, f = (float(v) for v in inv)
    ys, xs = np.meshgrid(np.arange(h, dtype=np.float64),
                         np.arange(w, dtype=np.float64), indexing="ij")
    sx = a * xs + b * ys + cc
    sy = d * xs + e * ys + f

    x0f = np.floor(sx)
    y0f = np.floor(sy)
    fx = sx - x0f
    fy = sy - y0f
    x0 = x0f.astype(np.int64)
    y0 = y0f.astype(np.int64)
    x1 = x0 + 1
    y1 = y0 + 1

    def tap(yy, xx):
        valid = (yy >= 0) & (yy < h) & (xx >= 0) & (xx < w)
        vals = image[np.clip(yy, 0, h - 1), np.clip(xx, 0, w - 1), :]
        return np.where(valid[:, :, None], vals, np.float32(0.0)).astype(np.float64)

    v00 = tap(y0, x0)
    v01 = tap(y0, x1)
    v10 = tap(y1, x0)
    v11 = tap(y1, x1)

    fx3 = fx[:, :, None]
    fy3 = fy[:, :, None]
    top = (1.0 - fx3) * v00 + fx3 * v01
    bot = (1.0 - fx3) * v10 + fx3 * v11
    val = (1.0 - fy3) * top + fy3 * bot
    return np.clip(val, 0.0, 1.0).astype(np.float32)
