"""Datasets: deterministic synthetic shape images and image-folder loading.

The synthetic corpus exists so every test and demo runs without downloads:
small images of one colored shape on a dark background, class = shape and
color pair. Geometry is drawn from a numpy PCG64 stream and rasterized
analytically, so a given (n, seed) pair is bit-identical across platforms.
"""

from __future__ import annotations

import os

import numpy as np
import torch

from .errors import ValidationError

SHAPES = ("disk", "square", "bar")
COLORS = (
    (1.0, -0.6, -0.6),
    (-0.6, 1.0, -0.6),
    (-0.5, -0.5, 1.0),
    (1.0, 1.0, -0.7),
)
NUM_CLASSES = len(SHAPES) * len(COLORS)


def class_name(label: int) -> str:
    return f"{SHAPES[label // len(COLORS)]}-{label % len(COLORS)}"


def synth_dataset(n: int, seed: int = 0, size: int = 32):
    """Returns (images, labels): (n, size, size, 3) float32 in [-1, 1] and
    (n,) long. Classes are assigned round-robin so any n >= 2 covers at
    least two classes; geometry (position, scale) is the random part.
    """
    if n < 1:
        raise ValidationError("need at least one image")
    rng = np.random.Generator(np.random.PCG64(seed))
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float32)
    images = np.empty((n, size, size, 3), dtype=np.float32)
    labels = np.empty(n, dtype=np.int64)
    for i in range(n):
        label = i % NUM_CLASSES
        shape = SHAPES[label // len(COLORS)]
        color = np.array(COLORS[label % len(COLORS)], dtype=np.float32)
        cy = rng.uniform(0.3, 0.7) * size
        cx = rng.uniform(0.3, 0.7) * size
        r = rng.uniform(0.15, 0.3) * size
        if shape == "disk":
            mask = (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
        elif shape == "square":
            mask = (np.abs(yy - cy) <= r) & (np.abs(xx - cx) <= r)
        else:
            mask = (np.abs(yy - cy) <= 0.35 * r) & (np.abs(xx - cx) <= 1.6 * r)
        img = np.full((size, size, 3), -0.85, dtype=np.float32)
        img[mask] = color
        images[i] = img
        labels[i] = label
    return torch.from_numpy(images), torch.from_numpy(labels)


_IMAGE_EXTS = (".png", ".jpg", ".jpeg", ".bmp", ".webp")


def load_folder(root, size: int = 32):
    """Reads a class-per-subfolder image tree into ((n,size,size,3), (n,)).

    Center-crops to square, resizes to size x size, scales to [-1, 1].
    Classes are subfolder names in sorted order; file order inside a class
    is sorted for determinism.
    """
    from PIL import Image

    root = os.fspath(root)
    if not os.path.isdir(root):
        raise ValidationError(f"dataset folder not found: {root}")
    classes = sorted(d for d in os.listdir(root)
                     if os.path.isdir(os.path.join(root, d)))
    if not classes:
        raise ValidationError(f"no class subfolders under {root}")
    images, labels = [], []
    for ci, cls in enumerate(classes):
        folder = os.path.join(root, cls)
        names = sorted(f for f in os.listdir(folder)
                       if f.lower().endswith(_IMAGE_EXTS))
        for name in names:
            with Image.open(os.path.join(folder, name)) as im:
                im = im.convert("RGB")
                w, h = im.size
                side = min(w, h)
                im = im.crop(((w - side) // 2, (h - side) // 2,
                              (w - side) // 2 + side, (h - side) // 2 + side))
                im = im.resize((size, size), Image.BILINEAR)
                arr = np.asarray(im, dtype=np.float32) / 127.5 - 1.0
            images.append(torch.from_numpy(arr))
            labels.append(ci)
    if not images:
        raise ValidationError(f"no images under {root}")
    return torch.stack(images), torch.tensor(labels, dtype=torch.long)


def save_image(path, image: torch.Tensor) -> None:
    """Writes one (H, W, 3) image in [-1, 1] as an 8-bit PNG."""
    from PIL import Image

    if image.dim() != 3 or image.shape[-1] != 3:
        raise ValidationError(f"expected (H, W, 3) image, got {tuple(image.shape)}")
    arr = ((image.clamp(-1, 1) + 1.0) * 127.5).round().to(torch.uint8).numpy()
    Image.fromarray(arr).save(os.fspath(path))


def load_image(path, size: int | None = None) -> torch.Tensor:
    """Reads one image file to (H, W, 3) in [-1, 1]; optional center-crop
    to square plus resize, same treatment as load_folder."""
    from PIL import Image

    with Image.open(os.fspath(path)) as im:
        im = im.convert("RGB")
        if size is not None:
            w, h = im.size
            side = min(w, h)
            im = im.crop(((w - side) // 2, (h - side) // 2,
                          (w - side) // 2 + side, (h - side) // 2 + side))
            im = im.resize((size, size), Image.BILINEAR)
        arr = np.asarray(im, dtype=np.float32) / 127.5 - 1.0
    return torch.from_numpy(arr)


def hflip(images: torch.Tensor, flip_mask: torch.Tensor) -> torch.Tensor:
    """Horizontal flip for rows where flip_mask is True; used as the only
    train-time augmentation when enabled. Images are (n, H, W, 3), so the
    flip runs over dim -2."""
    out = images.clone()
    out[flip_mask] = out[flip_mask].flip(-2)
    return out
