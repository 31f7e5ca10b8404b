"""NumPy fallback for the compiled convolution kernels.

Same contract as ``_convolve.pyx``: true 2-D convolution, half-sample
symmetric ("reflect") borders, float64 in and out.
"""

import numpy as np


def convolve_reflect(image, kernel):
    image = np.ascontiguousarray(image, dtype=np.float64)
    kernel = np.ascontiguousarray(kernel, dtype=np.float64)
    kh, kw = kernel.shape
    ry, rx = kh // 2, kw // 2
    h, w = image.shape
    padded = np.pad(image, ((ry, ry), (rx, rx)), mode="symmetric")
    out = np.zeros((h, w), dtype=np.float64)
    # out[y, x] = sum_ij k[i, j] * img[y + ry - i, x + rx - j]
    for i in range(kh):
        for j in range(kw):
            oy = 2 * ry - i
            ox = 2 * rx - j
            out += kernel[i, j] * padded[oy:oy + h, ox:ox + w]
    return out


def unsharp_reflect(image, kernel, amount):
    image = np.ascontiguousarray(image, dtype=np.float64)
    blurred = convolve_reflect(image, kernel)
    return np.clip(image + amount * (image - blurred), 0.0, 255.0)
