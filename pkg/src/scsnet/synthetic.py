"""A small synthetic scene with known class structure.

Three land-cover classes occupy vertical strips of a 32x32 grid, each
with a Gaussian spectral signature centered on a different band of 20, so
the classes are separable from the spectrum alone.  Per-pixel amplitude
jitter and additive noise keep the task nontrivial; background pixels get
low-level noise and label 0.  Everything is a pure function of the seed,
so the shipped fixture files can be regenerated and compared byte for
byte.
"""

import numpy as np

from .hsio import HsiCube, LabelGrid, save_cube, save_labels

GRID = 32
BANDS = 20
BAND_CENTERS = (4.0, 10.0, 16.0)
BAND_WIDTH = 2.0
DEFAULT_SEED = 7


def class_signature(class_id):
    """Unit-peak Gaussian over bands for class_id in {1, 2, 3}."""
    center = BAND_CENTERS[class_id - 1]
    b = np.arange(BANDS, dtype=np.float64)
    return np.exp(-((b - center) ** 2) / (2.0 * BAND_WIDTH ** 2))


def strip_labels():
    """Three 8-column strips of classes 1..3 with background margins."""
    labels = np.zeros((GRID, GRID), dtype=np.int64)
    for c, col0 in enumerate((2, 12, 22), start=1):
        labels[2:30, col0:col0 + 8] = c
    return LabelGrid(labels)


def generate_synthetic(seed=DEFAULT_SEED):
    """Build the (cube, labels) pair for a seed; deterministic."""
    labels = strip_labels()
    rng = np.random.Generator(np.random.Philox(
        key=np.array([seed, 3], dtype=np.uint64)))
    data = rng.uniform(0.0, 0.1, (GRID, GRID, BANDS))
    for c in (1, 2, 3):
        mask = labels.labels == c
        n = int(mask.sum())
        amplitude = rng.uniform(0.8, 1.2, (n, 1))
        noise = rng.normal(0.0, 0.02, (n, BANDS))
        data[mask] = np.clip(amplitude * class_signature(c) + noise, 0.0, None)
    return HsiCube(data), labels


def write_synthetic(cube_path, label_path, seed=DEFAULT_SEED):
    cube, labels = generate_synthetic(seed)
    save_cube(cube_path, cube)
    save_labels(label_path, labels)
