"""Deterministic synthetic image corpus with a fixed train/test split.

Two styles are available: ``"shapes"`` (flat-shaded geometric illustrations
on gradient backgrounds) and ``"blobs"`` (soft color fields with fine
texture), the latter serving as the second content domain for prior swaps.
A directory of real images can be used instead.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

STYLES = ("shapes", "blobs")
IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp", ".ppm"}


def _soft(sd: np.ndarray, width: float = 0.75) -> np.ndarray:
    """Anti-aliased coverage from a signed distance (negative inside)."""
    return 1.0 / (1.0 + np.exp(np.clip(sd / width, -30, 30)))


def _gradient(rng, yy, xx, size):
    c0, c1 = rng.uniform(0, 1, 3), rng.uniform(0, 1, 3)
    angle = rng.uniform(0, 2 * np.pi)
    t = ((xx - size / 2) * np.cos(angle) + (yy - size / 2) * np.sin(angle)) / size + 0.5
    t = np.clip(t, 0, 1)[None]
    return c0[:, None, None] * (1 - t) + c1[:, None, None] * t


def _shape_sd(rng, yy, xx, size):
    kind = rng.integers(0, 4)
    cy, cx = rng.uniform(0.1, 0.9, 2) * size
    r = rng.uniform(0.08, 0.3) * size
    if kind == 0:  # disc
        return np.hypot(yy - cy, xx - cx) - r
    if kind == 1:  # rotated rectangle
        a = rng.uniform(0, np.pi)
        hw, hh = r, r * rng.uniform(0.3, 1.0)
        u = (xx - cx) * np.cos(a) + (yy - cy) * np.sin(a)
        v = -(xx - cx) * np.sin(a) + (yy - cy) * np.cos(a)
        return np.maximum(np.abs(u) - hw, np.abs(v) - hh)
    if kind == 2:  # ellipse (approximate distance)
        a = rng.uniform(0, np.pi)
        ax, ay = r, r * rng.uniform(0.35, 0.9)
        u = (xx - cx) * np.cos(a) + (yy - cy) * np.sin(a)
        v = -(xx - cx) * np.sin(a) + (yy - cy) * np.cos(a)
        return (np.hypot(u / ax, v / ay) - 1) * min(ax, ay)
    # triangle as intersection of three half-planes
    angles = rng.uniform(0, 2 * np.pi) + np.array([0, 2, 4]) * np.pi / 3
    sd = np.full_like(xx, -np.inf)
    for a in angles:
        sd = np.maximum(sd, (xx - cx) * np.cos(a) + (yy - cy) * np.sin(a) - r * 0.5)
    return sd


def _shapes_image(rng, size):
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) + 0.5
    img = _gradient(rng, yy, xx, size)
    for _ in range(rng.integers(2, 6)):
        color = rng.uniform(0, 1, 3)[:, None, None]
        cover = _soft(_shape_sd(rng, yy, xx, size))[None]
        if rng.uniform() < 0.3:
            # low-frequency stripes inside the shape
            period = rng.uniform(6, 14)
            a = rng.uniform(0, np.pi)
            phase = np.sin(2 * np.pi * ((xx * np.cos(a) + yy * np.sin(a)) / period))[None]
            color = np.clip(color + 0.15 * phase, 0, 1)
        img = img * (1 - cover) + color * cover
    return img


def _blobs_image(rng, size):
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) + 0.5
    img = np.broadcast_to(rng.uniform(0.2, 0.8, 3)[:, None, None], (3, size, size)).copy()
    for _ in range(rng.integers(3, 8)):
        cy, cx = rng.uniform(0, 1, 2) * size
        sig = rng.uniform(0.08, 0.3) * size
        w = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * sig**2))[None]
        color = rng.uniform(0, 1, 3)[:, None, None]
        img = img * (1 - 0.8 * w) + color * 0.8 * w
    # fine texture: smoothed noise
    noise = rng.normal(0, 1, (3, size // 4, size // 4))
    noise = np.repeat(np.repeat(noise, 4, axis=1), 4, axis=2)
    img = img + 0.04 * noise * rng.uniform(0.3, 1.0)
    return img


def synth_image(seed: int, index: int, size: int = 64, style: str = "shapes") -> np.ndarray:
    if style not in STYLES:
        raise ValueError(f"unknown style {style!r}; choose from {STYLES}")
    rng = np.random.default_rng([seed, index, STYLES.index(style)])
    img = _shapes_image(rng, size) if style == "shapes" else _blobs_image(rng, size)
    return np.clip(img, 0, 1).astype(np.float32)


def load_directory(path, size: int = 64) -> list[np.ndarray]:
    from PIL import Image

    images = []
    for p in sorted(Path(path).iterdir()):
        if p.suffix.lower() not in IMAGE_SUFFIXES:
            continue
        with Image.open(p) as im:
            im = im.convert("RGB")
            side = min(im.size)
            left, top = (im.width - side) // 2, (im.height - side) // 2
            im = im.crop((left, top, left + side, top + side)).resize((size, size), Image.BICUBIC)
            images.append(np.asarray(im, dtype=np.float32).transpose(2, 0, 1) / 255.0)
    if not images:
        raise FileNotFoundError(f"no images found in {path}")
    return images


class ToyCorpus:
    """Indexable train/test image sets.

    Synthetic images are a pure function of ``(seed, index, style)``; the test
    set uses indices after the training range so the split is disjoint by
    construction. A ``directory`` replaces the generator with real images,
    shuffled by ``seed`` before splitting.
    """

    def __init__(self, seed: int = 0, n_train: int = 2000, n_test: int = 100, size: int = 64,
                 style: str = "shapes", directory=None):
        self.seed = seed
        self.size = size
        self.style = style
        self.directory = directory
        if directory is not None:
            images = load_directory(directory, size)
            order = np.random.default_rng(seed).permutation(len(images))
            n_test = min(n_test, len(images) // 5 or 1)
            self._test = np.stack([images[i] for i in order[:n_test]])
            self._train = np.stack([images[i] for i in order[n_test:]])
        else:
            # generated on first access so test-only users skip the train split
            self._train = self._test = None
        self.n_train = n_train if directory is None else len(self._train)
        self.n_test = n_test if directory is None else len(self._test)

    @property
    def train(self) -> np.ndarray:
        if self._train is None:
            self._train = np.stack([synth_image(self.seed, i, self.size, self.style)
                                    for i in range(self.n_train)])
        return self._train

    @property
    def test(self) -> np.ndarray:
        if self._test is None:
            self._test = np.stack([synth_image(self.seed, self.n_train + i, self.size, self.style)
                                   for i in range(self.n_test)])
        return self._test

    def batches(self, batch_size: int, rng: np.random.Generator):
        """Endless shuffled training batches, reshuffled every epoch."""
        train = self.train
        n = len(train)
        while True:
            order = rng.permutation(n)
            for start in range(0, n - batch_size + 1, batch_size):
                yield train[order[start:start + batch_size]]
