"""Regenerate the bundled synthetic datasets (deterministic, seed 7).

Produces the two-cluster 8x8 binary image set (plus a disjoint-support
out-of-distribution family) and a 16-variable binary mixture in DEBD file
layout with label files.
"""

import os
import sys

import numpy as np

sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "src"))

from circuitae.dataio import atomic_write, save_idx  # noqa: E402

DATA = os.path.join(os.path.dirname(__file__), "..", "src", "circuitae", "data")
FLIP = 0.03


def blob_images(rng, n, corner, flip=FLIP):
    """8x8 binary images with a bright 4x4 block at the given corner."""
    base = np.zeros((8, 8), dtype=np.uint8)
    r, c = corner
    base[r:r + 4, c:c + 4] = 1
    imgs = np.repeat(base[None], n, axis=0)
    flips = rng.random(imgs.shape) < flip
    return np.where(flips, 1 - imgs, imgs) * 255


def image_family(rng, n):
    labels = rng.integers(0, 2, size=n).astype(np.uint8)
    imgs = np.empty((n, 8, 8), dtype=np.uint8)
    imgs[labels == 0] = blob_images(rng, int(np.sum(labels == 0)), (0, 0))
    imgs[labels == 1] = blob_images(rng, int(np.sum(labels == 1)), (4, 4))
    return imgs, labels


def ood_family(rng, n):
    """Anti-diagonal blobs: support disjoint from the training clusters."""
    labels = rng.integers(0, 2, size=n)
    imgs = np.empty((n, 8, 8), dtype=np.uint8)
    imgs[labels == 0] = blob_images(rng, int(np.sum(labels == 0)), (0, 4))
    imgs[labels == 1] = blob_images(rng, int(np.sum(labels == 1)), (4, 0))
    return imgs


def tabular(rng, n, prototypes):
    labels = rng.integers(0, len(prototypes), size=n)
    x = prototypes[labels]
    flips = rng.random(x.shape) < 0.1
    return np.where(flips, 1 - x, x), labels


def write_debd(path, x):
    atomic_write(path, "".join(",".join(str(int(v)) for v in row) + "\n"
                               for row in x))


def write_label_file(path, labels):
    atomic_write(path, "".join(f"{int(y)}\n" for y in labels))


def main():
    rng = np.random.default_rng(7)
    img_dir = os.path.join(DATA, "synth8x8")
    tab_dir = os.path.join(DATA, "tab16")
    os.makedirs(img_dir, exist_ok=True)
    os.makedirs(tab_dir, exist_ok=True)

    xtr, ytr = image_family(rng, 2000)
    xte, yte = image_family(rng, 500)
    save_idx(os.path.join(img_dir, "train-images.idx"), xtr)
    save_idx(os.path.join(img_dir, "train-labels.idx"), ytr)
    save_idx(os.path.join(img_dir, "test-images.idx"), xte)
    save_idx(os.path.join(img_dir, "test-labels.idx"), yte)
    save_idx(os.path.join(img_dir, "ood-images.idx"), ood_family(rng, 500))

    prototypes = rng.integers(0, 2, size=(4, 16))
    ttr, ltr = tabular(rng, 2000, prototypes)
    tte, lte = tabular(rng, 500, prototypes)
    write_debd(os.path.join(tab_dir, "tab16.train.data"), ttr)
    write_label_file(os.path.join(tab_dir, "tab16.train.labels"), ltr)
    write_debd(os.path.join(tab_dir, "tab16.test.data"), tte)
    write_label_file(os.path.join(tab_dir, "tab16.test.labels"), lte)
    print("wrote", img_dir, "and", tab_dir)


if __name__ == "__main__":
    main()
