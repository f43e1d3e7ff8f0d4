"""Generated image-pair datasets with a known quality ordering."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .io import ImageBuffer, write_image, write_manifest


def smooth_image(rng, size):
    """Low-frequency colour pattern: a few random sinusoids per channel."""
    yy, xx = np.mgrid[0:size, 0:size] / size
    out = np.empty((size, size, 3))
    for c in range(3):
        acc = np.zeros((size, size))
        for _ in range(3):
            fy, fx = rng.uniform(0.5, 2.5, size=2)
            phase = rng.uniform(0, 2 * np.pi)
            acc += np.sin(2 * np.pi * (fy * yy + fx * xx) + phase)
        out[..., c] = 0.5 + 0.15 * acc
    return np.clip(out, 0.0, 1.0)


def distortion_ladder(size=16, levels=8, seed=0, references=1):
    """``levels`` distortions per reference with increasing noise and blur.

    Returns ``[(ref, dist, mos)]`` with ImageBuffers quantised to 8 bits and
    MOS falling linearly from 5 (pristine) to 1 (worst).
    """
    rng = np.random.default_rng(seed)
    pairs = []
    for _ in range(references):
        ref = smooth_image(rng, size)
        noise = rng.normal(0.0, 1.0, ref.shape)
        for k in range(levels):
            strength = k / max(levels - 1, 1)
            blurred = ref + strength * (ref.mean(axis=(0, 1)) - ref) * 0.5
            dist = np.clip(blurred + 0.25 * strength * noise, 0.0, 1.0)
            mos = 5.0 - 4.0 * strength
            pairs.append((_quantise(ref), _quantise(dist), mos))
    return pairs


def _quantise(pixels):
    return ImageBuffer.from_uint8(np.rint(pixels * 255.0).astype(np.uint8))


def write_dataset(directory, pairs):
    """Write PPM files plus ``manifest.csv`` under ``directory``; returns the manifest path."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    rows = []
    for i, (ref, dist, mos) in enumerate(pairs):
        ref_name, dist_name = f"ref_{i:03d}.ppm", f"dist_{i:03d}.ppm"
        write_image(directory / ref_name, ref)
        write_image(directory / dist_name, dist)
        rows.append((ref_name, dist_name, mos))
    manifest = directory / "manifest.csv"
    write_manifest(manifest, rows)
    return manifest
