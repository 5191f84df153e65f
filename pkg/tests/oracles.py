"""Slow, obviously-correct reference implementations used by the tests."""

import math

import numpy as np


def dft_power(frame, n_fft):
    """|DFT|^2 over the non-redundant bins by direct summation."""
    x = np.zeros(n_fft)
    x[:len(frame)] = frame
    t = np.arange(n_fft)
    out = np.empty(n_fft // 2 + 1)
    for k in range(n_fft // 2 + 1):
        re = np.sum(x * np.cos(2 * np.pi * k * t / n_fft))
        im = -np.sum(x * np.sin(2 * np.pi * k * t / n_fft))
        out[k] = re * re + im * im
    return out


def hamming_table(n):
    return [0.54 - 0.46 * math.cos(2 * math.pi * i / (n - 1)) for i in range(n)]


def conv2d_loops(x, w, b, stride, pad):
    n, c, h, wd = x.shape
    o, _, k, _ = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    ho, wo = (h + 2 * pad - k) // stride + 1, (wd + 2 * pad - k) // stride + 1
    out = np.zeros((n, o, ho, wo))
    for i in range(n):
        for oc in range(o):
            for y in range(ho):
                for z in range(wo):
                    patch = xp[i, :, y * stride:y * stride + k, z * stride:z * stride + k]
                    out[i, oc, y, z] = np.sum(patch * w[oc]) + (b[oc] if b is not None else 0.0)
    return out


def mse_loops(a, b):
    a, b = np.asarray(a, dtype=np.float64).ravel(), np.asarray(b, dtype=np.float64).ravel()
    total = 0.0
    for u, v in zip(a, b):
        total += (u - v) * (u - v)
    return total / len(a)


def score_loss_loops(r, preds):
    total = 0.0
    for p in np.asarray(preds, dtype=np.float64).ravel():
        total += (r - p) ** 2
    return total / np.asarray(preds).size


def ma_loss_loops(current, epoch_means, t, k):
    """Average of the current loss and the epoch means of epochs max(1, t-k+1) .. t-1."""
    vals = [current]
    for e in range(t - 1, 0, -1):
        if len(vals) == k:
            break
        vals.append(epoch_means[e - 1])
    return sum(vals) / len(vals)


def moving_average_prefix(values, w):
    prefix = [0.0]
    for v in values:
        prefix.append(prefix[-1] + v)
    out = []
    for i in range(1, len(values) + 1):
        lo = max(0, i - w)
        out.append((prefix[i] - prefix[lo]) / (i - lo))
    return np.array(out)
