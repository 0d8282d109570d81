"""Brute-force reference computations, deliberately independent of the package code."""

import itertools
import re

import numpy as np
from scipy import integrate, special


def prefix_means(xs):
    """Running mean after each frame via an explicit numpy cumulative sum."""
    xs = np.asarray(xs, dtype=float)
    return np.cumsum(xs) / np.arange(1, len(xs) + 1)


def window_means(xs, width=15):
    """Mean of the last min(width, N) frames, recomputed from scratch per frame."""
    return [float(np.mean(xs[max(0, i + 1 - width):i + 1])) for i in range(len(xs))]


def high_load_flags(xs, threshold=0.7, init_max=None, width=15):
    """Per-frame flags: window mean vs threshold x running max of window means."""
    means = window_means(xs, width)
    flags = []
    for i, w in enumerate(means):
        candidates = means[:i + 1] + ([init_max] if init_max is not None else [])
        flags.append(w > threshold * max(candidates))
    return flags


def count_peaks_regex(flags, min_run=3, gap=2):
    """Split the T/F string on runs of >= gap Fs; count chunks with >= min_run Ts."""
    s = "".join("T" if f else "F" for f in flags)
    chunks = re.split("F{%d,}" % gap, s)
    return sum(chunk.count("T") >= min_run for chunk in chunks)


def pearson_direct(x, y):
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    dx, dy = x - x.mean(), y - y.mean()
    return float(np.sum(dx * dy) / np.sqrt(np.sum(dx * dx) * np.sum(dy * dy)))


def t_density(t, df):
    log_c = special.gammaln((df + 1) / 2) - special.gammaln(df / 2) - 0.5 * np.log(df * np.pi)
    return np.exp(log_c - (df + 1) / 2 * np.log1p(t * t / df))


def p_value_quadrature(r, n):
    """Two-tailed tail mass of Student's t integrated numerically from the density."""
    df = n - 2
    t = abs(r) * np.sqrt(df / (1 - r * r))
    tail, _ = integrate.quad(t_density, t, np.inf, args=(df,), epsabs=1e-14, epsrel=1e-12,
                             limit=200)
    return 2 * tail


def all_bool_sequences(max_len):
    for n in range(max_len + 1):
        yield from itertools.product((False, True), repeat=n)
