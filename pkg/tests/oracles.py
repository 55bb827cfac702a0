"""Independent direct implementations used as test oracles.

Everything here evaluates the defining formulas with plain numpy
(sliding windows, explicit loops), sharing no code path with the
package's autodiff-based implementations.
"""

import numpy as np


def conv2d_direct(x, kernel, bias, stride=1, padding="same"):
    """Nested-loop cross-correlation over CHW input, OIHW kernel."""
    c_in, h, w = x.shape
    c_out, _, k, _ = kernel.shape
    if padding == "same":
        ho = -(-h // stride)
        wo = -(-w // stride)
        th = max((ho - 1) * stride + k - h, 0)
        tw = max((wo - 1) * stride + k - w, 0)
        pt, pl = th // 2, tw // 2
        xp = np.zeros((c_in, h + th, w + tw), dtype=np.float64)
        xp[:, pt : pt + h, pl : pl + w] = x
    else:
        ho = (h - k) // stride + 1
        wo = (w - k) // stride + 1
        xp = x.astype(np.float64)
    out = np.zeros((c_out, ho, wo))
    for co in range(c_out):
        for oy in range(ho):
            for ox in range(wo):
                acc = 0.0
                for ci in range(c_in):
                    for ky in range(k):
                        for kx in range(k):
                            acc += xp[ci, oy * stride + ky, ox * stride + kx] * kernel[co, ci, ky, kx]
                out[co, oy, ox] = acc + (bias[co] if bias is not None else 0.0)
    return out


def gaussian_window_direct(window, sigma):
    ax = np.arange(window) - window // 2
    g = np.exp(-(ax ** 2) / (2.0 * sigma ** 2))
    g = g / g.sum()
    return np.outer(g, g)


def luma_direct(img):
    return 0.299 * img[0] + 0.587 * img[1] + 0.114 * img[2]


def ssim_maps_direct(x, y, window=11, sigma=1.5, k1=0.01, k2=0.03, data_range=1.0):
    """(cs map, full ssim map) of two 2-d arrays, valid window placement."""
    win = gaussian_window_direct(window, sigma)
    c1 = (k1 * data_range) ** 2
    c2 = (k2 * data_range) ** 2

    def filt(a):
        view = np.lib.stride_tricks.sliding_window_view(a, (window, window))
        return np.tensordot(view, win, axes=([2, 3], [0, 1]))

    mu_x, mu_y = filt(x), filt(y)
    sxx = filt(x * x) - mu_x * mu_x
    syy = filt(y * y) - mu_y * mu_y
    sxy = filt(x * y) - mu_x * mu_y
    lum = (2 * mu_x * mu_y + c1) / (mu_x ** 2 + mu_y ** 2 + c1)
    cs = (2 * sxy + c2) / (sxx + syy + c2)
    return cs, lum * cs


def downsample2_direct(a):
    h, w = a.shape
    ho, wo = h // 2, w // 2
    v = a[: 2 * ho, : 2 * wo]
    return (v[0::2, 0::2] + v[0::2, 1::2] + v[1::2, 0::2] + v[1::2, 1::2]) / 4.0


def msssim_direct(ximg, yimg, scales, weights, window=11, sigma=1.5,
                  k1=0.01, k2=0.03, data_range=1.0, floor=1e-6):
    """Direct MS-SSIM on CHW [0,1] images (luma, cs terms at fine scales,
    full SSIM at the coarsest)."""
    x = luma_direct(np.asarray(ximg, dtype=np.float64))
    y = luma_direct(np.asarray(yimg, dtype=np.float64))
    result = 1.0
    for s in range(scales):
        cs_map, ssim_map = ssim_maps_direct(x, y, window, sigma, k1, k2, data_range)
        term = ssim_map.mean() if s == scales - 1 else cs_map.mean()
        result *= max(term, floor) ** weights[s]
        if s != scales - 1:
            x, y = downsample2_direct(x), downsample2_direct(y)
    return result


def feature_loss_direct(maps_x, maps_y):
    """Eq-style nested-loop evaluation: sum_i ||a_i - b_i||^2 / (C H W)_i."""
    total = 0.0
    for a, b in zip(maps_x, maps_y):
        c, h, w = a.shape
        acc = 0.0
        for ci in range(c):
            for yy in range(h):
                for xx in range(w):
                    d = float(a[ci, yy, xx]) - float(b[ci, yy, xx])
                    acc += d * d
        total += acc / (c * h * w)
    return total


def adam_trajectory_direct(theta0, grad_fn, lr, beta1, beta2, eps, steps):
    """Reference Adam on a vector parameter; returns the final theta."""
    theta = np.array(theta0, dtype=np.float64)
    m = np.zeros_like(theta)
    v = np.zeros_like(theta)
    for t in range(1, steps + 1):
        g = grad_fn(theta)
        m = beta1 * m + (1 - beta1) * g
        v = beta2 * v + (1 - beta2) * g * g
        m_hat = m / (1 - beta1 ** t)
        v_hat = v / (1 - beta2 ** t)
        theta = theta - lr * m_hat / (np.sqrt(v_hat) + eps)
    return theta
