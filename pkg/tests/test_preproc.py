import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from scipy import ndimage

from thermoloc import kernels
from thermoloc.errors import InvalidParameterError
from thermoloc.preproc import (
    PreprocessConfig,
    default_kernel_size,
    gaussian_kernel,
    linear_transform,
    preprocess,
    preprocess_tree,
    save_png,
    load_png,
    unsharp_sharpen,
)

frames = arrays(np.float64, st.tuples(st.integers(5, 12), st.integers(5, 12)),
                elements=st.floats(0, 255))


def laplacian_energy(img):
    lap = (img[1:-1, :-2] + img[1:-1, 2:] + img[:-2, 1:-1] + img[2:, 1:-1]
           - 4 * img[1:-1, 1:-1])
    return np.abs(lap).mean()


class TestLinearTransform:
    @pytest.mark.parametrize("p, a, b, expected", [
        (100, 1.0, 0.0, 100.0),
        (100, 1.5, 20.0, 170.0),
        (200, 1.5, 20.0, 255.0),
    ])
    def test_examples(self, p, a, b, expected):
        out = linear_transform(np.full((3, 4), float(p)), a, b)
        assert out.shape == (3, 4)
        assert np.all(out == expected)

    def test_negative_result_clamps_to_zero(self):
        assert np.all(linear_transform(np.full((2, 2), 10.0), 1.0, -50.0) == 0.0)

    @pytest.mark.parametrize("a, b", [(math.nan, 0.0), (1.0, math.inf), (0.0, 0.0), (-1.0, 0.0)])
    def test_rejects_bad_parameters(self, a, b):
        with pytest.raises(InvalidParameterError):
            linear_transform(np.zeros((2, 2)), a, b)

    @given(frames)
    def test_identity_clamp_idempotent(self, frame):
        once = linear_transform(frame, 1.0, 0.0)
        np.testing.assert_array_equal(linear_transform(once, 1.0, 0.0), once)

    @given(frames, st.floats(0.5, 2.0), st.floats(-50, 50), st.floats(0.0, 50))
    def test_monotone_in_brightness(self, frame, a, b1, delta):
        lo = linear_transform(frame, a, b1)
        hi = linear_transform(frame, a, b1 + delta)
        assert np.all(hi >= lo)


class TestGaussianKernel:
    def test_single_sample(self):
        np.testing.assert_array_equal(gaussian_kernel(0.7, 1), [[1.0]])

    def test_flat_limit(self):
        np.testing.assert_allclose(gaussian_kernel(1e6, 3), np.full((3, 3), 1 / 9), atol=1e-12)

    def test_sigma_one_size_three(self):
        # sampled formula at offsets {-1,0,1}^2, normalized (independent script)
        k = gaussian_kernel(1.0, 3)
        assert k[1, 1] == pytest.approx(0.2041799555716581, abs=1e-12)
        assert k[0, 1] == pytest.approx(0.12384140315297398, abs=1e-12)
        assert k[0, 0] == pytest.approx(0.07511360795411151, abs=1e-12)

    @pytest.mark.parametrize("sigma, size", [(0.3, 1), (1.0, 3), (2.0, 13), (5.0, 31)])
    def test_normalized(self, sigma, size):
        assert abs(gaussian_kernel(sigma, size).sum() - 1.0) < 1e-12

    @pytest.mark.parametrize("size", [0, 2, 4, -3])
    def test_even_or_nonpositive_size_rejected(self, size):
        with pytest.raises(InvalidParameterError):
            gaussian_kernel(1.0, size)

    def test_default_size_covers_six_sigma(self):
        assert default_kernel_size(2.0) == 13
        assert default_kernel_size(1.0) == 7
        assert default_kernel_size(0.5) == 3


class TestUnsharp:
    def test_h_zero_is_identity(self, rng):
        frame = rng.uniform(0, 255, (16, 20))
        np.testing.assert_array_equal(unsharp_sharpen(frame, 0.0, gaussian_kernel(2, 7)), frame)

    @pytest.mark.parametrize("h", [0.0, 0.5, 1.0, 3.0])
    def test_constant_frame_fixed_point(self, h):
        frame = np.full((9, 11), 128.0)
        np.testing.assert_allclose(unsharp_sharpen(frame, h, gaussian_kernel(1.5, 5)), frame,
                                   atol=1e-9)

    def test_step_edge_by_hand(self):
        # rows identical, so the 3x3 kernel reduces to its 1-D marginal
        # [0.27407, 0.45186, 0.27407]; values computed by hand-convolution.
        kernel = gaussian_kernel(1.0, 3)
        frame = np.tile([50.0] * 4 + [200.0] * 4, (4, 1))
        out = unsharp_sharpen(frame, 1.0, kernel)
        expected = [50, 50, 50, 8.889707140820448, 241.11029285917954, 200, 200, 200]
        np.testing.assert_allclose(out, np.tile(expected, (4, 1)), atol=1e-9)
        # pixels next to the edge move away from the mean
        mean = frame.mean()
        assert abs(out[0, 3] - mean) > abs(frame[0, 3] - mean)
        assert abs(out[0, 4] - mean) > abs(frame[0, 4] - mean)

    def test_full_range_step_overshoot_is_clamped(self):
        # pre-clamp values -69.887 and 324.887 (hand-convolution), both clamped
        frame = np.tile([0.0] * 4 + [255.0] * 4, (4, 1))
        out = unsharp_sharpen(frame, 1.0, gaussian_kernel(1.0, 3))
        np.testing.assert_allclose(out, frame, atol=1e-9)

    def test_kernel_larger_than_frame(self):
        with pytest.raises(InvalidParameterError):
            unsharp_sharpen(np.zeros((4, 10)), 1.0, gaussian_kernel(1.0, 5))

    def test_negative_h_rejected(self):
        with pytest.raises(InvalidParameterError):
            unsharp_sharpen(np.zeros((4, 4)), -0.1, gaussian_kernel(1.0, 3))

    def test_detail_amplification(self, natural_image):
        kernel = gaussian_kernel(2.0, 13)
        energies = [laplacian_energy(unsharp_sharpen(natural_image, h, kernel))
                    for h in (0.0, 0.5, 1.0)]
        assert energies[0] < energies[1] < energies[2]


@pytest.mark.parametrize("backend", sorted(kernels.backends()))
class TestConvolutionBackends:
    @settings(max_examples=30, deadline=None)
    @given(frame=frames, sigma=st.floats(0.3, 3.0), size=st.sampled_from([1, 3, 5]))
    def test_matches_scipy(self, backend, frame, sigma, size):
        kernel = gaussian_kernel(sigma, size)
        impl = kernels.backends()[backend]
        expected = ndimage.convolve(frame, kernel, mode="reflect")
        np.testing.assert_allclose(impl.convolve_reflect(frame, kernel), expected, atol=1e-9)

    def test_asymmetric_kernel_is_convolution_not_correlation(self, backend, rng):
        frame = rng.uniform(0, 255, (7, 9))
        kernel = rng.uniform(-1, 1, (3, 5))
        impl = kernels.backends()[backend]
        expected = ndimage.convolve(frame, kernel, mode="reflect")
        np.testing.assert_allclose(impl.convolve_reflect(frame, kernel), expected, atol=1e-9)

    def test_unsharp_matches_formula(self, backend, rng):
        frame = rng.uniform(0, 255, (12, 10))
        kernel = gaussian_kernel(1.2, 5)
        impl = kernels.backends()[backend]
        blurred = ndimage.convolve(frame, kernel, mode="reflect")
        expected = np.clip(frame + 0.7 * (frame - blurred), 0, 255)
        np.testing.assert_allclose(impl.unsharp_reflect(frame, kernel, 0.7), expected, atol=1e-9)


def test_backends_agree(rng):
    found = kernels.backends()
    if len(found) < 2:
        pytest.skip("compiled extension not built")
    frame = rng.uniform(0, 255, (40, 50))
    kernel = gaussian_kernel(2.0, 13)
    np.testing.assert_allclose(found["cython"].unsharp_reflect(frame, kernel, 1.0),
                               found["python"].unsharp_reflect(frame, kernel, 1.0), atol=1e-9)


class TestPreprocess:
    def test_identity_config(self, rng):
        frame = rng.uniform(0, 255, (16, 16))
        cfg = PreprocessConfig(a=1.0, b=0.0, h=0.0)
        np.testing.assert_array_equal(preprocess(frame, cfg), frame)

    def test_constant_frame_unchanged(self):
        frame = np.full((15, 15), 77.0)
        cfg = PreprocessConfig(a=1.0, b=0.0, h=2.0, sigma=1.0)
        np.testing.assert_allclose(preprocess(frame, cfg), frame, atol=1e-9)

    def test_is_composition(self, rng):
        frame = rng.uniform(0, 255, (20, 20))
        cfg = PreprocessConfig(a=1.3, b=-5.0, h=0.8, sigma=1.5)
        expected = unsharp_sharpen(linear_transform(frame, 1.3, -5.0), 0.8,
                                   gaussian_kernel(1.5, cfg.kernel_size))
        np.testing.assert_array_equal(preprocess(frame, cfg), expected)

    @pytest.mark.parametrize("seed", range(10))
    def test_sharpening_raises_variance(self, seed):
        frame = np.random.default_rng(seed).uniform(0, 255, (32, 32))
        cfg = PreprocessConfig(a=1.0, b=0.0, h=1.0, sigma=1.0)
        stretched = linear_transform(frame, cfg.a, cfg.b)
        # direct computation of the sharpened frame as the reference
        blurred = ndimage.convolve(stretched, gaussian_kernel(1.0, cfg.kernel_size), mode="reflect")
        direct = np.clip(stretched + (stretched - blurred), 0, 255)
        out = preprocess(frame, cfg)
        np.testing.assert_allclose(out, direct, atol=1e-9)
        assert out.var() >= stretched.var()

    @pytest.mark.parametrize("kwargs", [
        {"a": 0.0}, {"h": -1.0}, {"sigma": 0.0}, {"kernel_size": 4}, {"b": math.nan},
    ])
    def test_invalid_config(self, kwargs):
        with pytest.raises(InvalidParameterError):
            PreprocessConfig(**kwargs)

    def test_output_stays_in_range(self, natural_image):
        out = preprocess(natural_image, PreprocessConfig(a=1.8, b=30.0, h=3.0))
        assert out.min() >= 0.0 and out.max() <= 255.0


def test_preprocess_tree_preserves_names(tmp_path, natural_image):
    src = tmp_path / "in"
    (src / "scene" / "seq1" / "images").mkdir(parents=True)
    save_png(natural_image, src / "scene" / "seq1" / "images" / "100.png")
    (src / "scene" / "seq1" / "poses.txt").write_text("0.0 0 0 0 1 0 0 0\n")
    cfg = PreprocessConfig()
    assert preprocess_tree(src, tmp_path / "out", cfg) == 1
    out_img = load_png(tmp_path / "out" / "scene" / "seq1" / "images" / "100.png")
    expected = np.clip(np.rint(preprocess(natural_image, cfg)), 0, 255)
    np.testing.assert_array_equal(out_img, expected)
    assert (tmp_path / "out" / "scene" / "seq1" / "poses.txt").read_text() == "0.0 0 0 0 1 0 0 0\n"
