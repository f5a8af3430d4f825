"""Dense optical flow and the 9-way direction labels built from it.

The estimator follows Farnebäck's method of local polynomial expansion: each
neighbourhood is modeled as f(x) ~ x'Ax + b'x + c under a Gaussian
applicability, and the displacement between two frames follows from the
relation A d = -0.5 (b2 - b1), averaged over a Gaussian window and solved
per pixel, coarse to fine over an image pyramid.

Coordinates: u is horizontal displacement (+right), v is vertical
(+down, the image row axis).  The polar angle convention is pinned so
upward motion maps to pi/2: phi = mod(atan2(-v, u), 2*pi).
"""

import hashlib
import math
import struct
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import ConfigError, InputError

LUMA = np.array([0.299, 0.587, 0.114])

CACHE_MAGIC = b"TLABFLOW"
CACHE_VERSION = 1


@dataclass(frozen=True)
class FarnebackParams:
    pyramid_scale: float = 0.5
    levels: int = 3
    window_size: int = 15
    iterations: int = 3
    poly_n: int = 5
    poly_sigma: float = 1.1

    def __post_init__(self):
        if not 0.0 < self.pyramid_scale < 1.0:
            raise ConfigError(f"pyramid_scale must be in (0,1), got {self.pyramid_scale}")
        if self.levels < 1 or self.iterations < 1:
            raise ConfigError("levels and iterations must be >= 1")
        if self.poly_n < 5 or self.poly_n % 2 == 0:
            raise ConfigError(f"poly_n must be odd and >= 5, got {self.poly_n}")
        if self.window_size % 2 == 0 or self.window_size < self.poly_n:
            raise ConfigError(f"window_size must be odd and >= poly_n, got {self.window_size}")
        if self.poly_sigma <= 0:
            raise ConfigError("poly_sigma must be positive")

    def cache_key(self, tau, patch_grid):
        payload = "|".join(
            f"{v:.17g}" if isinstance(v, float) else str(v)
            for v in (self.pyramid_scale, self.levels, self.window_size,
                      self.iterations, self.poly_n, self.poly_sigma,
                      float(tau), patch_grid[0], patch_grid[1])
        )
        return hashlib.sha256(payload.encode()).digest()


def to_grayscale(frame):
    arr = np.asarray(frame, dtype=np.float64)
    if arr.ndim == 2:
        return arr
    if arr.ndim == 3 and arr.shape[-1] == 3:
        return arr @ LUMA
    raise InputError(f"frame must be HxW or HxWx3, got shape {arr.shape}")


def polynomial_expansion(frame, params: FarnebackParams):
    """Per-pixel quadratic fit.  Returns (A, b, c) with A (H, W, 2, 2)
    symmetric, b (H, W, 2) in (x, y) order, c (H, W).

    The Gaussian-weighted normal equations have a constant system matrix
    because the applicability never changes, so one 6x6 inverse serves
    every pixel; border pixels see the replicate-padded signal.
    """
    f = np.asarray(frame, dtype=np.float64)
    if not np.isfinite(f).all():
        raise InputError("polynomial_expansion: frame contains non-finite values")
    m = (params.poly_n - 1) // 2
    offsets = np.arange(-m, m + 1, dtype=np.float64)
    g = np.exp(-(offsets**2) / (2.0 * params.poly_sigma**2))

    k0, k1, k2 = g, offsets * g, offsets**2 * g
    row = {p: ndimage.correlate1d(f, k, axis=1, mode="nearest")
           for p, k in (("0", k0), ("1", k1), ("2", k2))}

    def col(base, k):
        return ndimage.correlate1d(base, k, axis=0, mode="nearest")

    # projections onto {1, x, y, x^2, y^2, xy}; x along columns, y along rows
    s = np.stack([
        col(row["0"], k0),
        col(row["1"], k0),
        col(row["0"], k1),
        col(row["2"], k0),
        col(row["0"], k2),
        col(row["1"], k1),
    ], axis=-1)

    xx, yy = np.meshgrid(offsets, offsets, indexing="xy")
    a = np.exp(-(xx**2 + yy**2) / (2.0 * params.poly_sigma**2))
    basis = np.stack([np.ones_like(xx), xx, yy, xx**2, yy**2, xx * yy], axis=-1)
    gram = np.einsum("hw,hwi,hwj->ij", a, basis, basis)
    coef = s @ np.linalg.inv(gram).T

    c = coef[..., 0]
    b = coef[..., 1:3]
    A = np.empty(f.shape + (2, 2))
    A[..., 0, 0] = coef[..., 3]
    A[..., 1, 1] = coef[..., 4]
    A[..., 0, 1] = A[..., 1, 0] = 0.5 * coef[..., 5]
    return A, b, c


def _downscale(img, scale):
    sigma = math.sqrt(max(1.0 / scale**2 - 1.0, 0.25)) / 2.0
    smoothed = ndimage.gaussian_filter(img, sigma, mode="nearest")
    h = max(2, int(round(img.shape[0] * scale)))
    w = max(2, int(round(img.shape[1] * scale)))
    rows = np.linspace(0, img.shape[0] - 1, h)
    cols = np.linspace(0, img.shape[1] - 1, w)
    grid = np.meshgrid(rows, cols, indexing="ij")
    return ndimage.map_coordinates(smoothed, grid, order=1, mode="nearest")


def _resize_flow(flow, shape):
    h, w = shape
    oh, ow = flow.shape[:2]
    rows = np.linspace(0, oh - 1, h)
    cols = np.linspace(0, ow - 1, w)
    grid = np.meshgrid(rows, cols, indexing="ij")
    out = np.empty((h, w, 2))
    out[..., 0] = ndimage.map_coordinates(flow[..., 0], grid, order=1, mode="nearest") * (w / ow)
    out[..., 1] = ndimage.map_coordinates(flow[..., 1], grid, order=1, mode="nearest") * (h / oh)
    return out


def _warp_fields(A2, b2, flow):
    h, w = b2.shape[:2]
    rows, cols = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
    sample_r = np.clip(rows + flow[..., 1], 0, h - 1)
    sample_c = np.clip(cols + flow[..., 0], 0, w - 1)
    coords = [sample_r, sample_c]

    def warp(field):
        return ndimage.map_coordinates(field, coords, order=1, mode="nearest")

    Aw = np.empty_like(A2)
    bw = np.empty_like(b2)
    for i in range(2):
        bw[..., i] = warp(b2[..., i])
        for j in range(2):
            Aw[..., i, j] = warp(A2[..., i, j])
    return Aw, bw


def _update_flow(A1, b1, A2, b2, flow, params: FarnebackParams):
    Aw, bw = _warp_fields(A2, b2, flow)
    A = 0.5 * (A1 + Aw)
    # delta-b absorbs the motion already explained by the current estimate
    db = -0.5 * (bw - b1) + np.einsum("hwij,hwj->hwi", A, flow)

    m = (params.window_size - 1) // 2
    sigma = max(params.window_size / 4.0, 1.0)
    offsets = np.arange(-m, m + 1, dtype=np.float64)
    kernel = np.exp(-(offsets**2) / (2.0 * sigma**2))
    kernel /= kernel.sum()

    def smooth(field):
        tmp = ndimage.correlate1d(field, kernel, axis=0, mode="nearest")
        return ndimage.correlate1d(tmp, kernel, axis=1, mode="nearest")

    G = np.einsum("hwki,hwkj->hwij", A, A)
    hvec = np.einsum("hwki,hwk->hwi", A, db)
    g11 = smooth(G[..., 0, 0])
    g12 = smooth(G[..., 0, 1])
    g22 = smooth(G[..., 1, 1])
    h1 = smooth(hvec[..., 0])
    h2 = smooth(hvec[..., 1])

    det = g11 * g22 - g12**2
    safe = np.abs(det) > 1e-12
    inv_det = np.where(safe, 1.0 / np.where(safe, det, 1.0), 0.0)
    out = np.empty_like(flow)
    out[..., 0] = (g22 * h1 - g12 * h2) * inv_det
    out[..., 1] = (g11 * h2 - g12 * h1) * inv_det
    return out


def estimate_flow(frame_a, frame_b, params: FarnebackParams = FarnebackParams()):
    """Dense displacement field (H, W, 2) f32 carrying (u, v) per pixel."""
    a = to_grayscale(frame_a)
    b = to_grayscale(frame_b)
    if a.shape != b.shape:
        raise InputError(f"estimate_flow: frame shapes differ, {a.shape} vs {b.shape}")

    pyr_a, pyr_b = [a], [b]
    for _ in range(params.levels - 1):
        if min(pyr_a[-1].shape) <= 8:
            break
        pyr_a.append(_downscale(pyr_a[-1], params.pyramid_scale))
        pyr_b.append(_downscale(pyr_b[-1], params.pyramid_scale))

    flow = np.zeros(pyr_a[-1].shape + (2,))
    for level in range(len(pyr_a) - 1, -1, -1):
        fa, fb = pyr_a[level], pyr_b[level]
        if flow.shape[:2] != fa.shape:
            flow = _resize_flow(flow, fa.shape)
        A1, b1, _ = polynomial_expansion(fa, params)
        A2, b2, _ = polynomial_expansion(fb, params)
        for _ in range(params.iterations):
            flow = _update_flow(A1, b1, A2, b2, flow, params)
    return flow.astype(np.float32)


def aggregate_to_tokens(flow, patch_grid):
    """Patch-mean displacement: (H, W, 2) -> (s, 2) in token order."""
    h_p, w_p = patch_grid
    h, w = flow.shape[:2]
    if h % h_p or w % w_p:
        raise ConfigError(f"patch {patch_grid} does not tile field {h}x{w}")
    gh, gw = h // h_p, w // w_p
    grouped = flow.reshape(gh, h_p, gw, w_p, 2)
    return grouped.mean(axis=(1, 3)).reshape(gh * gw, 2)


def polarize(vec):
    """(u, v) -> (r, phi) with phi in [0, 2*pi); upward motion is pi/2."""
    arr = np.asarray(vec, dtype=np.float64)
    u, v = arr[..., 0], arr[..., 1]
    r = np.hypot(u, v)
    phi = np.mod(np.arctan2(-v, u), 2.0 * np.pi)
    # mod can land exactly on the modulus for tiny negative angles
    phi = np.where(phi >= 2.0 * np.pi, 0.0, phi)
    return r, phi


def quantize(r, phi, tau):
    """0 when r < tau, else octant label 1..8 for phi in [0, 2*pi)."""
    r = np.asarray(r, dtype=np.float64)
    phi = np.asarray(phi, dtype=np.float64)
    if tau <= 0:
        raise InputError(f"quantize: tau must be positive, got {tau}")
    if (phi < 0).any() or (phi >= 2.0 * np.pi).any():
        raise InputError("quantize: phi outside [0, 2*pi); canonicalize first")
    octant = np.floor(phi * 4.0 / np.pi).astype(np.int64) + 1
    labels = np.where(r < tau, 0, octant)
    return labels if labels.ndim else int(labels)


def antipode(label):
    """Opposite direction for labels 1..8; 0 stays 0."""
    label = np.asarray(label)
    flipped = ((label + 3) % 8) + 1
    out = np.where(label == 0, 0, flipped)
    return out if out.ndim else int(out)


def make_flow_labels(video, params: FarnebackParams, tau, patch_grid):
    """Labels (s, t-1) uint8 for consecutive-frame flow of one video."""
    video = np.asarray(video)
    t = video.shape[0]
    if t < 2:
        raise InputError("make_flow_labels: need at least two frames")
    s = (video.shape[1] // patch_grid[0]) * (video.shape[2] // patch_grid[1])
    labels = np.empty((s, t - 1), dtype=np.uint8)
    for j in range(t - 1):
        flow = estimate_flow(video[j], video[j + 1], params)
        r, phi = polarize(aggregate_to_tokens(flow, patch_grid))
        labels[:, j] = quantize(r, phi, tau)
    return labels


# ---------------------------------------------------------------------------
# label cache file
# ---------------------------------------------------------------------------


def save_label_cache(path, labels, tau, params: FarnebackParams, patch_grid):
    """labels: (N, s, t-1) uint8.  Header carries enough to detect staleness."""
    labels = np.ascontiguousarray(np.asarray(labels, dtype=np.uint8))
    if labels.ndim != 3:
        raise InputError(f"label cache expects (videos, s, t-1), got {labels.shape}")
    n, s, tm1 = labels.shape
    with open(path, "wb") as fh:
        fh.write(CACHE_MAGIC)
        fh.write(struct.pack("<IIII", CACHE_VERSION, n, s, tm1 + 1))
        fh.write(struct.pack("<d", float(tau)))
        fh.write(params.cache_key(tau, patch_grid))
        fh.write(labels.tobytes())


def load_label_cache(path, tau, params: FarnebackParams, patch_grid):
    """Return the cached (N, s, t-1) array, or None when the stored
    parameter hash does not match (caller should recompute)."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:8] != CACHE_MAGIC:
        raise InputError(f"label cache: bad magic in {path}")
    version, n, s, t = struct.unpack_from("<IIII", blob, 8)
    if version != CACHE_VERSION:
        raise InputError(f"label cache: unsupported version {version}")
    (stored_tau,) = struct.unpack_from("<d", blob, 24)
    key = blob[32:64]
    if key != params.cache_key(tau, patch_grid) or stored_tau != float(tau):
        return None
    expected = n * s * (t - 1)
    payload = blob[64:]
    if len(payload) != expected:
        raise InputError(f"label cache: payload {len(payload)} bytes, expected {expected}")
    return np.frombuffer(payload, dtype=np.uint8).reshape(n, s, t - 1).copy()
