"""Procedural toy scenes: dark shadow blobs vs dark colored distractors.

Scenes are built on the patch grid so a perfect patch-level prediction is a
perfect pixel-level prediction. Shadows darken the background
multiplicatively (keeping its hue); distractors are intrinsically dark
saturated objects labeled non-shadow, which is exactly the confusion the
detector must resolve.
"""

from __future__ import annotations

import numpy as np

from .errors import InputError

_DISTRACTOR_COLORS = (
    (0.30, 0.10, 0.08),  # dark red-brown
    (0.08, 0.10, 0.30),  # dark blue
    (0.08, 0.25, 0.10),  # dark green
)


def _place_rect(rng, occupied: np.ndarray, max_side: int):
    """Random unoccupied cell rectangle on the patch grid, or None."""
    g = occupied.shape[0]
    for _ in range(40):
        h = int(rng.integers(1, max_side + 1))
        w = int(rng.integers(1, max_side + 1))
        r = int(rng.integers(0, g - h + 1))
        c = int(rng.integers(0, g - w + 1))
        if not occupied[r:r + h, c:c + w].any():
            occupied[r:r + h, c:c + w] = True
            return r, c, h, w
    return None


def synthetic_scene(seed: int, image_size: int = 64, patch_size: int = 8,
                    n_shadows: int = 2, n_distractors: int = 2):
    """One (image, mask) pair; image float64 [H, W, 3] in [0, 1], mask uint8."""
    if image_size % patch_size != 0:
        raise InputError("image_size must be divisible by patch_size")
    rng = np.random.default_rng(seed)
    g = image_size // patch_size

    base = rng.uniform(0.65, 0.85)
    channel = base * (1.0 + rng.uniform(-0.05, 0.05, size=3))
    image = np.ones((image_size, image_size, 3)) * channel
    # mild horizontal illumination gradient
    gradient = np.linspace(0.92, 1.0, image_size)[None, :, None]
    image = image * gradient

    occupied = np.zeros((g, g), dtype=bool)
    mask = np.zeros((image_size, image_size), dtype=np.uint8)

    for _ in range(n_shadows):
        rect = _place_rect(rng, occupied, max_side=3)
        if rect is None:
            continue
        r, c, h, w = (v * patch_size for v in rect)
        image[r:r + h, c:c + w] *= rng.uniform(0.35, 0.5)
        mask[r:r + h, c:c + w] = 1

    for _ in range(n_distractors):
        rect = _place_rect(rng, occupied, max_side=3)
        if rect is None:
            continue
        r, c, h, w = (v * patch_size for v in rect)
        color = np.array(_DISTRACTOR_COLORS[int(rng.integers(len(_DISTRACTOR_COLORS)))])
        image[r:r + h, c:c + w] = color * rng.uniform(0.85, 1.15)

    image += rng.normal(0.0, 0.01, size=image.shape)
    return np.clip(image, 0.0, 1.0), mask


def synthetic_dataset(count: int, seed: int = 0, image_size: int = 64,
                      patch_size: int = 8):
    """List of (image, mask) scenes with per-scene derived seeds."""
    return [synthetic_scene(seed * 10_000 + i, image_size, patch_size)
            for i in range(count)]


def write_dataset(records, root) -> list[str]:
    """Write (image, mask) pairs as an images/ + masks/ PNG tree; returns ids."""
    from pathlib import Path

    from PIL import Image

    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)
    ids = []
    for i, (image, mask) in enumerate(records):
        image_id = f"scene_{i:03d}"
        Image.fromarray((np.asarray(image) * 255).round().astype(np.uint8)).save(
            root / "images" / f"{image_id}.png")
        Image.fromarray((np.asarray(mask) * 255).astype(np.uint8)).save(
            root / "masks" / f"{image_id}.png")
        ids.append(image_id)
    return ids
