"""
Synthetic scenes and the netpbm round trip
==========================================

Scenes are colored shapes (circle / square / triangle) on noisy gray,
with a pixel-exact ground-truth mask and a multi-hot label vector.
Datasets are written as binary PPM images plus PGM masks and a
labels.csv; reading the directory back reproduces the arrays exactly.
"""

import tempfile
from pathlib import Path

import numpy as np

from attrvit.data import SceneSpec, generate_scene, make_dataset, read_dataset, write_dataset

spec = SceneSpec(image_size=32, seed=5)
sample = generate_scene(spec, np.random.default_rng(5))
print("image:", sample.image.shape, "mask ids:", np.unique(sample.mask), "labels:", sample.labels)

# Per-index generator streams make any prefix of a dataset stable:
# the first 4 scenes of a 16-scene set ARE the 4-scene set.
short = make_dataset(spec, 4)
longer = make_dataset(spec, 16)
same = all(np.array_equal(a.image, b.image) for a, b in zip(short, longer))
print("prefix stability:", same)

with tempfile.TemporaryDirectory() as tmp:
    write_dataset(longer, tmp)
    files = sorted(p.name for p in Path(tmp).iterdir())
    print("files per scene:", files[:3], "...")

    back = read_dataset(tmp, num_classes=spec.num_classes)
    masks_ok = all(np.array_equal(a.mask, b.mask) for a, b in zip(longer, back))
    labels_ok = all(np.array_equal(a.labels, b.labels) for a, b in zip(longer, back))
    # Images pass through 8-bit quantization, so equality holds to 1/510.
    image_err = max(np.abs(a.image - b.image).max() for a, b in zip(longer, back))
    print(f"masks exact: {masks_ok}, labels exact: {labels_ok}, image error <= {image_err:.6f}")
