"""Thermal frame enhancement: linear grayscale stretch plus unsharp masking.

Frames are 2-D float64 arrays with values in [0, 255]. All arithmetic is done
in floating point; quantization to 8 bits only happens in :func:`save_png`.
"""

import math
import os
import shutil
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from thermoloc import kernels
from thermoloc.errors import InvalidParameterError


def default_kernel_size(sigma):
    """Smallest odd integer >= 6 sigma."""
    size = math.ceil(6.0 * sigma)
    return size if size % 2 == 1 else size + 1


@dataclass
class PreprocessConfig:
    a: float = 1.2
    b: float = 10.0
    h: float = 1.0
    sigma: float = 2.0
    kernel_size: int | None = None

    def __post_init__(self):
        if self.kernel_size is None:
            self.kernel_size = default_kernel_size(self.sigma)
        self.validate()

    def validate(self):
        for name in ("a", "b", "h", "sigma"):
            if not math.isfinite(getattr(self, name)):
                raise InvalidParameterError(f"{name} must be finite")
        if self.a <= 0:
            raise InvalidParameterError(f"contrast gain a must be > 0, got {self.a}")
        if self.h < 0:
            raise InvalidParameterError(f"sharpening intensity h must be >= 0, got {self.h}")
        if self.sigma <= 0:
            raise InvalidParameterError(f"sigma must be > 0, got {self.sigma}")
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise InvalidParameterError(f"kernel_size must be odd and >= 1, got {self.kernel_size}")


def as_frame(values):
    """Validate and convert to a float64 frame."""
    frame = np.ascontiguousarray(values, dtype=np.float64)
    if frame.ndim != 2 or frame.shape[0] == 0 or frame.shape[1] == 0:
        raise InvalidParameterError(f"frame must be a non-empty 2-D array, got shape {frame.shape}")
    if not np.all(np.isfinite(frame)):
        raise InvalidParameterError("frame contains non-finite values")
    return frame


def linear_transform(frame, a, b):
    """Contrast/brightness stretch ``clip(a * P + b, 0, 255)``."""
    if not (math.isfinite(a) and math.isfinite(b)):
        raise InvalidParameterError(f"a and b must be finite, got a={a}, b={b}")
    if a <= 0:
        raise InvalidParameterError(f"contrast gain a must be > 0, got {a}")
    frame = as_frame(frame)
    return np.clip(a * frame + b, 0.0, 255.0)


def gaussian_kernel(sigma, size):
    """Sampled 2-D Gaussian on integer offsets around 0, renormalized to sum 1."""
    if not (math.isfinite(sigma) and sigma > 0):
        raise InvalidParameterError(f"sigma must be a positive finite number, got {sigma}")
    if int(size) != size or size < 1 or size % 2 == 0:
        raise InvalidParameterError(f"kernel size must be a positive odd integer, got {size}")
    r = int(size) // 2
    offsets = np.arange(-r, r + 1, dtype=np.float64)
    xx, yy = np.meshgrid(offsets, offsets)
    kernel = np.exp(-(xx**2 + yy**2) / (2.0 * sigma**2)) / (2.0 * math.pi * sigma**2)
    return kernel / kernel.sum()


def unsharp_sharpen(frame, h, kernel):
    """Detail enhancement ``clip(P + h (P - P * G), 0, 255)`` with reflect borders."""
    if not (math.isfinite(h) and h >= 0):
        raise InvalidParameterError(f"sharpening intensity h must be >= 0, got {h}")
    frame = as_frame(frame)
    kernel = np.ascontiguousarray(kernel, dtype=np.float64)
    if kernel.ndim != 2 or kernel.shape[0] % 2 == 0 or kernel.shape[1] % 2 == 0:
        raise InvalidParameterError(f"kernel must be 2-D with odd sides, got {kernel.shape}")
    if kernel.shape[0] > frame.shape[0] or kernel.shape[1] > frame.shape[1]:
        raise InvalidParameterError(
            f"kernel {kernel.shape} is larger than frame {frame.shape}"
        )
    if h == 0:
        return np.clip(frame, 0.0, 255.0)
    return kernels.unsharp_reflect(frame, kernel, h)


def preprocess(frame, cfg):
    stretched = linear_transform(frame, cfg.a, cfg.b)
    return unsharp_sharpen(stretched, cfg.h, gaussian_kernel(cfg.sigma, cfg.kernel_size))


def load_png(path):
    with Image.open(path) as img:
        return np.asarray(img.convert("L"), dtype=np.float64)


def save_png(frame, path):
    data = np.clip(np.rint(frame), 0, 255).astype(np.uint8)
    Image.fromarray(data, mode="L").save(path)


def preprocess_tree(src, dst, cfg):
    """Process every PNG under ``src`` into the same relative path under ``dst``.

    Non-image files (e.g. ``poses.txt``) are copied so the output stays a
    usable dataset. Returns the number of images written.
    """
    src, dst = Path(src), Path(dst)
    if not src.is_dir():
        raise InvalidParameterError(f"input directory does not exist: {src}")
    count = 0
    for root, _, files in os.walk(src):
        for name in sorted(files):
            path = Path(root) / name
            target = dst / path.relative_to(src)
            target.parent.mkdir(parents=True, exist_ok=True)
            if path.suffix.lower() == ".png":
                save_png(preprocess(load_png(path), cfg), target)
                count += 1
            else:
                shutil.copyfile(path, target)
    return count
