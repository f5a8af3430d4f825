"""Flow pipeline tests: polynomial expansion against generating
polynomials, displacement recovery on known shifts, and the quantizer
against a brute-force reimplementation."""

import math

import numpy as np
import pytest

from temporalab import flow as F
from temporalab.errors import ConfigError, InputError
from temporalab.flow import FarnebackParams


def textured_image(size=64, seed=0):
    """Smooth random texture with structure at several scales."""
    rng = np.random.default_rng(seed)
    img = np.zeros((size, size))
    for cell in (4, 8, 16):
        coarse = rng.standard_normal((size // cell + 1, size // cell + 1))
        rows = np.linspace(0, coarse.shape[0] - 1, size)
        cols = np.linspace(0, coarse.shape[1] - 1, size)
        r0 = np.floor(rows).astype(int).clip(0, coarse.shape[0] - 2)
        c0 = np.floor(cols).astype(int).clip(0, coarse.shape[1] - 2)
        fr = (rows - r0)[:, None]
        fc = (cols - c0)[None, :]
        img += ((1 - fr) * (1 - fc) * coarse[np.ix_(r0, c0)]
                + (1 - fr) * fc * coarse[np.ix_(r0, c0 + 1)]
                + fr * (1 - fc) * coarse[np.ix_(r0 + 1, c0)]
                + fr * fc * coarse[np.ix_(r0 + 1, c0 + 1)])
    return img * 40.0 + 128.0


def quantize_reference(r, phi, tau):
    """Independent scalar reimplementation of the 9-way rule."""
    if r < tau:
        return 0
    for k in range(1, 9):
        if (k - 1) * math.pi / 4 <= phi < k * math.pi / 4:
            return k
    raise AssertionError("phi outside [0, 2*pi)")


class TestPolynomialExpansion:
    def test_constant_image(self):
        A, b, c = F.polynomial_expansion(np.full((20, 20), 7.0), FarnebackParams())
        assert np.abs(A).max() < 1e-9
        assert np.abs(b).max() < 1e-9
        assert np.abs(c - 7.0).max() < 1e-9

    def test_linear_ramp(self):
        # f(x, y) = 2x, x along columns
        cols = np.arange(24, dtype=np.float64)
        img = np.tile(2.0 * cols, (24, 1))
        A, b, c = F.polynomial_expansion(img, FarnebackParams())
        inner = (slice(4, -4), slice(4, -4))
        assert np.abs(b[inner][..., 0] - 2.0).max() < 1e-3
        assert np.abs(b[inner][..., 1]).max() < 1e-3
        assert np.abs(A[inner]).max() < 1e-3

    def test_quadratic_surface(self):
        # f(x, y) = x^2 + xy around each pixel's own origin: build globally
        # and compare recovered local coefficients with the analytic shift.
        n = 30
        ys, xs = np.meshgrid(np.arange(n, dtype=np.float64), np.arange(n, dtype=np.float64), indexing="ij")
        img = xs**2 + xs * ys
        A, b, c = F.polynomial_expansion(img, FarnebackParams())
        inner = (slice(5, -5), slice(5, -5))
        # local expansion at (x0, y0): A stays [[1, .5], [.5, 0]],
        # b = (2 x0 + y0, x0), c = x0^2 + x0 y0
        assert np.abs(A[inner][..., 0, 0] - 1.0).max() < 1e-2
        assert np.abs(A[inner][..., 0, 1] - 0.5).max() < 1e-2
        assert np.abs(A[inner][..., 1, 1]).max() < 1e-2
        expect_bx = 2 * xs + ys
        expect_by = xs
        assert np.abs(b[inner][..., 0] - expect_bx[inner]).max() < 1e-2
        assert np.abs(b[inner][..., 1] - expect_by[inner]).max() < 1e-2

    def test_nonfinite_rejected(self):
        img = np.zeros((10, 10))
        img[3, 3] = np.nan
        with pytest.raises(InputError):
            F.polynomial_expansion(img, FarnebackParams())


class TestEstimateFlow:
    def test_identical_frames_zero_flow(self):
        img = textured_image(seed=1)
        flow = F.estimate_flow(img, img)
        assert np.abs(flow).max() < 0.1

    @pytest.mark.parametrize("shift", [(1, 0), (-2, 0), (0, 3), (0, -3), (2, 2)])
    def test_known_integer_shift(self, shift):
        dx, dy = shift
        img = textured_image(seed=2)
        moved = np.roll(img, (dy, dx), axis=(0, 1))
        flow = F.estimate_flow(img, moved)
        interior = flow[8:-8, 8:-8]
        med = np.median(interior.reshape(-1, 2), axis=0)
        assert abs(med[0] - dx) < 0.5
        assert abs(med[1] - dy) < 0.5

    def test_antisymmetry(self):
        img = textured_image(seed=3)
        moved = np.roll(img, (0, 2), axis=(0, 1))
        fwd = F.estimate_flow(img, moved)[8:-8, 8:-8]
        bwd = F.estimate_flow(moved, img)[8:-8, 8:-8]
        residual = np.median(np.abs((fwd + bwd).reshape(-1, 2)), axis=0)
        assert residual.max() < 0.5

    def test_color_frames_accepted(self):
        img = textured_image(size=32, seed=4)
        color = np.stack([img, img * 0.5, img * 0.25], axis=-1)
        flow = F.estimate_flow(color, color)
        assert flow.shape == (32, 32, 2)
        assert np.abs(flow).max() < 0.1

    def test_shape_mismatch_rejected(self):
        with pytest.raises(InputError):
            F.estimate_flow(np.zeros((16, 16)), np.zeros((16, 17)))

    def test_deterministic(self):
        img = textured_image(seed=5)
        moved = np.roll(img, (1, 1), axis=(0, 1))
        assert F.estimate_flow(img, moved).tobytes() == F.estimate_flow(img, moved).tobytes()


class TestAggregate:
    def test_uniform_field(self):
        flow = np.zeros((8, 8, 2))
        flow[..., 0] = 2.0
        tokens = F.aggregate_to_tokens(flow, (4, 4))
        assert tokens.shape == (4, 2)
        assert np.allclose(tokens, [[2.0, 0.0]] * 4)

    def test_opposite_halves_cancel(self):
        flow = np.zeros((4, 4, 2))
        flow[:2, :, 0] = 1.0
        flow[2:, :, 0] = -1.0
        tokens = F.aggregate_to_tokens(flow, (4, 4))
        assert np.allclose(tokens, 0.0)

    def test_matches_loop_oracle(self):
        rng = np.random.default_rng(6)
        flow = rng.standard_normal((8, 12, 2))
        tokens = F.aggregate_to_tokens(flow, (4, 4))
        gh, gw = 2, 3
        for r in range(gh):
            for c in range(gw):
                acc = np.zeros(2)
                for i in range(4):
                    for j in range(4):
                        acc += flow[r * 4 + i, c * 4 + j]
                assert np.abs(tokens[r * gw + c] - acc / 16).max() < 1e-6

    def test_divisibility_enforced(self):
        with pytest.raises(ConfigError):
            F.aggregate_to_tokens(np.zeros((9, 8, 2)), (4, 4))


class TestPolarize:
    def test_rightward(self):
        r, phi = F.polarize(np.array([1.0, 0.0]))
        assert (r, phi) == (1.0, 0.0)

    def test_upward_is_half_pi(self):
        r, phi = F.polarize(np.array([0.0, -1.0]))
        assert r == 1.0
        assert phi == pytest.approx(math.pi / 2)

    def test_leftward(self):
        r, phi = F.polarize(np.array([-3.0, 0.0]))
        assert r == 3.0
        assert phi == pytest.approx(math.pi)

    def test_zero_vector(self):
        r, phi = F.polarize(np.array([0.0, 0.0]))
        assert (r, phi) == (0.0, 0.0)

    def test_range_always_valid(self):
        rng = np.random.default_rng(7)
        vecs = rng.standard_normal((500, 2)) * 5
        r, phi = F.polarize(vecs)
        assert (r >= 0).all()
        assert (phi >= 0).all() and (phi < 2 * math.pi).all()


class TestQuantize:
    def test_below_threshold(self):
        assert F.quantize(0.1, 1.234, 0.5) == 0

    def test_named_angles(self):
        assert F.quantize(1.0, 0.0, 0.5) == 1
        assert F.quantize(1.0, math.pi / 2, 0.5) == 3
        assert F.quantize(1.0, math.pi, 0.5) == 5
        assert F.quantize(1.0, 7 * math.pi / 4 + 0.01, 0.5) == 8

    def test_bad_phi_rejected(self):
        with pytest.raises(InputError):
            F.quantize(1.0, -0.1, 0.5)
        with pytest.raises(InputError):
            F.quantize(1.0, 2 * math.pi, 0.5)

    def test_bad_tau_rejected(self):
        with pytest.raises(InputError):
            F.quantize(1.0, 0.0, 0.0)

    def test_grid_against_brute_force(self):
        rng = np.random.default_rng(8)
        r = rng.uniform(0.0, 2.0, size=1000)
        phi = rng.uniform(0.0, 2 * math.pi, size=1000)
        phi = np.minimum(phi, np.nextafter(2 * math.pi, 0.0))
        got = F.quantize(r, phi, 0.5)
        for i in range(1000):
            assert got[i] == quantize_reference(r[i], phi[i], 0.5)

    def test_octants_partition_circle(self):
        phis = np.linspace(0, 2 * math.pi, 4000, endpoint=False)
        labels = F.quantize(np.ones_like(phis), phis, 0.5)
        assert set(labels.tolist()) == set(range(1, 9))
        counts = np.bincount(labels, minlength=9)[1:]
        assert counts.max() - counts.min() <= 1

    def test_antipode(self):
        assert F.antipode(0) == 0
        assert F.antipode(1) == 5
        assert F.antipode(3) == 7
        assert F.antipode(8) == 4
        for k in range(1, 9):
            assert F.antipode(F.antipode(k)) == k


class TestFlowLabels:
    def make_sliding_video(self, dx, dy=-1, frames=4, size=64, span=16):
        """Textured square translating over a textured background.

        The default motion (3, -1) is deliberately off-axis: pure
        rightward motion sits exactly on the octant-1/octant-8 boundary,
        so any angle jitter would flip labels there.  Returns the video
        plus a (s, frames-1) mask of token/pair cells whose 8x8 patch
        lies fully inside the square in both frames of the pair.
        """
        bg = textured_image(size=size, seed=9)
        obj = textured_image(size=size, seed=12)[:span, :span] + 90.0
        video = np.empty((frames, size, size))
        rects = []
        for j in range(frames):
            frame = bg.copy()
            y0, x0 = 28 + j * dy, 6 + j * dx
            frame[y0:y0 + span, x0:x0 + span] = obj
            rects.append((y0, y0 + span, x0, x0 + span))
            video[j] = frame

        grid = size // 8
        covered = np.zeros((grid * grid, frames - 1), dtype=bool)
        for j in range(frames - 1):
            for r in range(grid):
                for c in range(grid):
                    inside = all(
                        rect[0] <= r * 8 and (r + 1) * 8 <= rect[1]
                        and rect[2] <= c * 8 and (c + 1) * 8 <= rect[3]
                        for rect in (rects[j], rects[j + 1])
                    )
                    covered[r * grid + c, j] = inside
        assert covered.any()
        return video, covered

    def test_static_video_all_zero(self):
        frame = textured_image(size=32, seed=10)
        video = np.stack([frame] * 4)
        labels = F.make_flow_labels(video, FarnebackParams(), 0.5, (8, 8))
        assert labels.shape == (16, 3)
        assert (labels == 0).all()

    def test_slide_labels_object_tokens(self):
        video, covered = self.make_sliding_video(dx=3)
        labels = F.make_flow_labels(video, FarnebackParams(), 0.5, (8, 8))
        agree = (labels[covered] == 1).mean()
        assert agree >= 0.9
        # the outer two grid rows never come near the object
        grid = 8
        far = list(range(2 * grid)) + list(range(6 * grid, 8 * grid))
        assert (labels[far, :] == 0).mean() >= 0.9

    def test_reversed_video_flips_labels(self):
        video, covered = self.make_sliding_video(dx=3)
        rev = F.make_flow_labels(video[::-1], FarnebackParams(), 0.5, (8, 8))
        # pair j of the reversed video spans original frames (t-1-j, t-2-j)
        agree = (rev[covered[:, ::-1]] == F.antipode(1)).mean()
        assert agree >= 0.9

    def test_label_determinism(self):
        video, _ = self.make_sliding_video(dx=2)
        a = F.make_flow_labels(video, FarnebackParams(), 0.5, (8, 8))
        b = F.make_flow_labels(video, FarnebackParams(), 0.5, (8, 8))
        assert a.tobytes() == b.tobytes()


class TestLabelCache:
    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(11)
        labels = rng.integers(0, 9, size=(5, 16, 7)).astype(np.uint8)
        params = FarnebackParams()
        path = tmp_path / "labels.bin"
        F.save_label_cache(path, labels, 0.5, params, (8, 8))
        loaded = F.load_label_cache(path, 0.5, params, (8, 8))
        assert np.array_equal(loaded, labels)

    def test_params_mismatch_returns_none(self, tmp_path):
        labels = np.zeros((2, 4, 3), dtype=np.uint8)
        path = tmp_path / "labels.bin"
        F.save_label_cache(path, labels, 0.5, FarnebackParams(), (8, 8))
        assert F.load_label_cache(path, 0.5, FarnebackParams(window_size=17), (8, 8)) is None
        assert F.load_label_cache(path, 0.6, FarnebackParams(), (8, 8)) is None

    def test_corrupt_file_rejected(self, tmp_path):
        path = tmp_path / "bad.bin"
        path.write_bytes(b"WRONGMAG" + b"\x00" * 60)
        with pytest.raises(InputError, match="magic"):
            F.load_label_cache(path, 0.5, FarnebackParams(), (8, 8))

    def test_truncated_payload_rejected(self, tmp_path):
        labels = np.zeros((2, 4, 3), dtype=np.uint8)
        path = tmp_path / "labels.bin"
        F.save_label_cache(path, labels, 0.5, FarnebackParams(), (8, 8))
        blob = path.read_bytes()
        path.write_bytes(blob[:-5])
        with pytest.raises(InputError, match="payload"):
            F.load_label_cache(path, 0.5, FarnebackParams(), (8, 8))


class TestParams:
    def test_defaults_valid(self):
        p = FarnebackParams()
        assert p.pyramid_scale == 0.5 and p.levels == 3

    @pytest.mark.parametrize("kw", [
        {"pyramid_scale": 1.0},
        {"pyramid_scale": 0.0},
        {"levels": 0},
        {"iterations": 0},
        {"poly_n": 4},
        {"poly_n": 3},
        {"window_size": 3},
        {"window_size": 14},
        {"poly_sigma": 0.0},
    ])
    def test_invalid_rejected(self, kw):
        with pytest.raises(ConfigError):
            FarnebackParams(**kw)
