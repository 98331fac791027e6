"""Analytic test images: band-limited random textures that can be sampled
at continuous coordinates, so translated pairs are generated without any
interpolation code shared with the implementation under test."""

import numpy as np


def make_texture(seed: int, size: int = 64, components: int = 12):
    rng = np.random.default_rng(seed)
    amps = rng.uniform(0.5, 1.0, components)
    freqs = rng.uniform(1.5, 6.0, components)
    angles = rng.uniform(0.0, np.pi, components)
    phases = rng.uniform(0.0, 2 * np.pi, components)

    def evaluate(xs, ys):
        out = np.zeros_like(xs, dtype=np.float64)
        for a, f, th, ph in zip(amps, freqs, angles, phases):
            out += a * np.cos(2 * np.pi * f * (np.cos(th) * xs + np.sin(th) * ys) / size + ph)
        return 0.5 + 0.4 * out / np.abs(amps).sum()

    return evaluate


def translated_pair(seed: int, dx: float, dy: float, size: int = 64):
    """Frame pair where the content of the first moves by (+dx, +dy)."""
    tex = make_texture(seed, size)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    return tex(xx, yy), tex(xx - dx, yy - dy)
