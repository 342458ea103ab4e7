"""Reference implementations the tests compare against.

Written separately from the package code paths: high-precision arithmetic
for pacing, dense full-grid evaluation for density maps, central finite
differences for gradients.
"""

import mpmath
import numpy as np

mpmath.mp.dps = 40

SLACK = mpmath.mpf("1e-9")


def pacing_oracle(shape, N, b, a, T, t, K=4):
    N, b, a, T, t = (mpmath.mpf(v) for v in (N, b, a, T, t))
    u = t / (a * T)
    if u > 1:
        u = mpmath.mpf(1)
    if shape == "linear":
        phi = u
    elif shape == "quadratic":
        phi = u**2
    elif shape == "root":
        phi = mpmath.sqrt(u)
    elif shape == "exponential":
        phi = mpmath.expm1(10 * u) / mpmath.expm1(10)
    elif shape == "log":
        phi = 1 + mpmath.log(u + mpmath.exp(-10)) / 10
        phi = min(max(phi, mpmath.mpf(0)), mpmath.mpf(1))
    elif shape == "step":
        phi = mpmath.floor(u * K) / K
    else:
        raise ValueError(shape)
    lower = int(mpmath.ceil(N * b - SLACK))
    value = int(mpmath.ceil(N * b + N * (1 - b) * phi - SLACK))
    return min(max(value, lower), int(N))


def dense_density(heads, height, width, sigma, factor, radius_sigmas=4.0):
    """Evaluate every head's truncated Gaussian over the whole downsampled grid."""
    hd, wd = -(-height // factor), -(-width // factor)
    s = sigma / factor
    yy, xx = np.mgrid[0:hd, 0:wd].astype(np.float64) + 0.5
    out = np.zeros((hd, wd))
    for x, y in np.asarray(heads, dtype=np.float64).reshape(-1, 2):
        cx, cy = x / factor, y / factor
        k = np.exp(-((xx - cx) ** 2 + (yy - cy) ** 2) / (2 * s * s))
        k[(np.abs(xx - cx) > radius_sigmas * s) | (np.abs(yy - cy) > radius_sigmas * s)] = 0
        if k.sum() == 0:
            k[min(int(cy), hd - 1), min(int(cx), wd - 1)] = 1.0
        out += k / k.sum()
    return out


def finite_difference(loss_fn, param, index, eps=1e-6):
    """Central difference of ``loss_fn()`` w.r.t. ``param.view(-1)[index]``."""
    import torch

    flat = param.data.view(-1)
    orig = flat[index].item()
    with torch.no_grad():
        flat[index] = orig + eps
        up = loss_fn().item()
        flat[index] = orig - eps
        down = loss_fn().item()
        flat[index] = orig
    return (up - down) / (2 * eps)
