"""Structural similarity over sliding 8x8 windows, with its gradient.

Statistics are population (divide-by-N) moments over each window; the score is
the mean SSIM over all valid windows and channels. Pixel range L = 1.
"""
import numpy as np

WINDOW = 8
C1 = (0.01 * 1.0) ** 2
C2 = (0.03 * 1.0) ** 2


def _box(a, k):
    """Valid k x k window sums over axes 1, 2 of an (N, H, W, C) array."""
    s = np.cumsum(np.pad(a, ((0, 0), (1, 0), (1, 0), (0, 0))), axis=1).cumsum(axis=2)
    return s[:, k:, k:] - s[:, :-k, k:] - s[:, k:, :-k] + s[:, :-k, :-k]


def _box_adjoint(a, k):
    """Transpose of :func:`_box`: spread each window value back over its pixels."""
    return _box(np.pad(a, ((0, 0), (k - 1, k - 1), (k - 1, k - 1), (0, 0))), k)


def _prep(x, y):
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise ValueError(f"ssim inputs differ in shape: {x.shape} vs {y.shape}")
    single = x.ndim == 3
    if single:
        x, y = x[None], y[None]
    if x.ndim != 4:
        raise ValueError("ssim expects (H, W, C) or (N, H, W, C)")
    return x, y, single


def _stats(x, y, k):
    n = k * k
    mx, my = _box(x, k) / n, _box(y, k) / n
    vx = _box(x * x, k) / n - mx * mx
    vy = _box(y * y, k) / n - my * my
    cxy = _box(x * y, k) / n - mx * my
    a1, a2 = 2 * mx * my + C1, 2 * cxy + C2
    b1, b2 = mx * mx + my * my + C1, vx + vy + C2
    return mx, my, a1, a2, b1, b2


def ssim_batch(x, y, with_grad=False):
    """Per-image SSIM; with ``with_grad`` also d ssim_i / d y_i."""
    x, y, _ = _prep(x, y)
    k = min(WINDOW, x.shape[1], x.shape[2])
    if np.array_equal(x, y) and not with_grad:
        return np.ones(x.shape[0])
    mx, my, a1, a2, b1, b2 = _stats(x, y, k)
    s = (a1 * a2) / (b1 * b2)
    per_image = s.reshape(s.shape[0], -1).mean(axis=1)
    if not with_grad:
        return per_image
    count = s[0].size * k * k
    g_mu = (2 * mx * a2) / (b1 * b2) - s * 2 * my / b1
    g_var = -s / b2
    g_cov = 2 * a1 / (b1 * b2)
    grad = (_box_adjoint(g_mu, k)
            + 2 * y * _box_adjoint(g_var, k) - 2 * _box_adjoint(g_var * my, k)
            + x * _box_adjoint(g_cov, k) - _box_adjoint(g_cov * mx, k)) / count
    return per_image, grad


def ssim(x, y) -> float:
    """Mean windowed SSIM of two (H, W, C) images; exactly 1.0 for identical inputs."""
    x, y, single = _prep(x, y)
    if not single:
        raise ValueError("ssim() compares two single images; use ssim_batch for stacks")
    return float(ssim_batch(x, y)[0])
