"""Shared test fixtures that are plain functions."""
import numpy as np


def disk(size, radius, value=1.0, supersample=8):
    n = size * supersample
    c = (np.arange(n) + 0.5) / supersample - size / 2
    inside = (c[None, :] ** 2 + c[:, None] ** 2) <= radius**2
    return value * inside.reshape(size, supersample, size, supersample).mean(axis=(1, 3))
