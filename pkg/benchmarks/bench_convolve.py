"""Compare the compiled and NumPy convolution backends.

    python benchmarks/bench_convolve.py --size 270 480 --repeat 20
"""

import argparse
import timeit

import numpy as np

from thermoloc.kernels import backends
from thermoloc.preproc import default_kernel_size, gaussian_kernel


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--size", type=int, nargs=2, default=[270, 480], metavar=("H", "W"))
    parser.add_argument("--sigma", type=float, default=2.0)
    parser.add_argument("--repeat", type=int, default=20)
    args = parser.parse_args(argv)

    rng = np.random.default_rng(0)
    image = rng.uniform(0, 255, size=tuple(args.size))
    kernel = gaussian_kernel(args.sigma, default_kernel_size(args.sigma))
    found = backends()
    if "cython" not in found:
        print("compiled backend not built; only the NumPy fallback is available")

    reference = found["python"].unsharp_reflect(image, kernel, 1.0)
    timings = {}
    for name, module in found.items():
        out = module.unsharp_reflect(image, kernel, 1.0)
        err = float(np.max(np.abs(out - reference)))
        best = min(timeit.repeat(lambda: module.unsharp_reflect(image, kernel, 1.0),
                                 number=1, repeat=args.repeat))
        timings[name] = best
        print(f"{name:<8} {best * 1e3:9.2f} ms/frame  max|diff| {err:.2e}")
    if len(timings) == 2:
        print(f"speedup  {timings['python'] / timings['cython']:.1f}x "
              f"({args.size[0]}x{args.size[1]}, kernel {kernel.shape[0]})")


if __name__ == "__main__":
    main()
