"""Seeded synthetic datasets: 2-D mixtures, noisy linear subspaces and toy images."""

from __future__ import annotations

import math

import numpy as np

from .numkit import ContractViolation


def gaussian_mixture_2d(count: int, components: int = 8, radius: float = 2.0, std: float = 0.6,
                        seed: int = 0, means: np.ndarray | None = None) -> np.ndarray:
    """Points from an equal-weight isotropic mixture whose means sit evenly on a
    ring of ``radius`` (with a random phase) unless ``means`` is given."""
    if components < 1 or count < 0 or std < 0:
        raise ContractViolation("mixture needs >= 1 component, count >= 0 and std >= 0")
    rng = np.random.default_rng(seed)
    if means is None:
        phase = rng.uniform(0, 2 * math.pi)
        angles = phase + 2 * math.pi * np.arange(components) / components
        means = radius * np.stack([np.cos(angles), np.sin(angles)], axis=1)
    means = np.asarray(means, dtype=np.float64)
    if means.shape != (components, 2):
        raise ContractViolation("means must be components x 2")
    which = rng.integers(0, components, size=count)
    return means[which] + std * rng.normal(size=(count, 2))


def subspace_points(count: int, p: int, d: int, noise: float = 0.0, seed: int = 0) -> np.ndarray:
    """p-dim points on a random d-dim linear subspace plus isotropic noise."""
    if not (1 <= d <= p) or count < 0 or noise < 0:
        raise ContractViolation("need 1 <= d <= p, count >= 0 and noise >= 0")
    rng = np.random.default_rng(seed)
    basis = np.linalg.qr(rng.normal(size=(p, d)))[0]
    return rng.normal(size=(count, d)) @ basis.T + noise * rng.normal(size=(count, p))


def synth_latents(kind: str, params: dict, seed: int = 0) -> np.ndarray:
    if kind == "gaussian_mixture_2d":
        return gaussian_mixture_2d(seed=seed, **params)
    if kind == "subspace_pd":
        return subspace_points(seed=seed, **params)
    raise ContractViolation(f"unknown latent dataset {kind!r}")


def synth_images(count: int, size: int = 16, seed: int = 0, patch: int = 4) -> np.ndarray:
    """``count`` x size x size images in [0, 1]: a linear gradient background
    with one to three axis-aligned rectangles of constant intensity."""
    if size % patch:
        raise ContractViolation("image size must be a multiple of the patch size")
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:size, 0:size] / max(size - 1, 1)
    out = np.empty((count, size, size))
    for i in range(count):
        theta = rng.uniform(0, 2 * math.pi)
        lo, hi = np.sort(rng.uniform(0, 1, size=2))
        ramp = np.cos(theta) * xx + np.sin(theta) * yy
        ramp = (ramp - ramp.min()) / max(np.ptp(ramp), 1e-12)
        img = lo + (hi - lo) * ramp
        for _ in range(rng.integers(1, 4)):
            r0, c0 = rng.integers(0, size - 1, size=2)
            r1 = rng.integers(r0 + 1, size + 1)
            c1 = rng.integers(c0 + 1, size + 1)
            img[r0:r1, c0:c1] = rng.uniform(0, 1)
        out[i] = img
    return np.clip(out, 0.0, 1.0)


def patchify(images: np.ndarray, patch: int) -> np.ndarray:
    """B x S x S images to (B * g * g) x patch^2 rows, image-major then row-major."""
    B, S, S2 = images.shape
    if S != S2 or S % patch:
        raise ContractViolation("images must be square with side a multiple of patch")
    g = S // patch
    return images.reshape(B, g, patch, g, patch).transpose(0, 1, 3, 2, 4).reshape(B * g * g, patch * patch)


def unpatchify(rows: np.ndarray, patch: int, size: int) -> np.ndarray:
    g = size // patch
    B = rows.shape[0] // (g * g)
    return rows.reshape(B, g, g, patch, patch).transpose(0, 1, 3, 2, 4).reshape(B, size, size)
