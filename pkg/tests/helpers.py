"""Shared independent oracles for the test suite.

Everything here is deliberately written as straight-line loops over plain
numpy arrays, with no reuse of the library's fast paths, so a bug in the
implementation cannot hide in its own oracle.
"""

import numpy as np


def naive_conv2d(x, w, bias=None, stride=1, padding=1, dilation=1):
    """Reference dilated cross-correlation via explicit nested loops."""
    n, cin, h, wid = x.shape
    cout, _, k, _ = w.shape
    ho = (h + 2 * padding - dilation * (k - 1) - 1) // stride + 1
    wo = (wid + 2 * padding - dilation * (k - 1) - 1) // stride + 1
    xp = np.zeros((n, cin, h + 2 * padding, wid + 2 * padding), dtype=x.dtype)
    xp[:, :, padding:padding + h, padding:padding + wid] = x
    out = np.zeros((n, cout, ho, wo), dtype=x.dtype)
    for b in range(n):
        for co in range(cout):
            for oy in range(ho):
                for ox in range(wo):
                    acc = 0.0
                    for ci in range(cin):
                        for ky in range(k):
                            for kx in range(k):
                                acc += (
                                    xp[b, ci, oy * stride + ky * dilation, ox * stride + kx * dilation]
                                    * w[co, ci, ky, kx]
                                )
                    out[b, co, oy, ox] = acc
            if bias is not None:
                out[b, co] += bias[co]
    return out


def box_iou(a, b):
    """IoU of two (x, y, w, h) boxes, scalar arithmetic only."""
    ax0, ay0, aw, ah = a
    bx0, by0, bw, bh = b
    ix0 = max(ax0, bx0)
    iy0 = max(ay0, by0)
    ix1 = min(ax0 + aw, bx0 + bw)
    iy1 = min(ay0 + ah, by0 + bh)
    iw = max(0.0, ix1 - ix0)
    ih = max(0.0, iy1 - iy0)
    inter = iw * ih
    union = aw * ah + bw * bh - inter
    return inter / union if union > 0 else 0.0
