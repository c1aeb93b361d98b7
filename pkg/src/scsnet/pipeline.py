"""From raw cubes to training batches.

Stages, in order: per-band min-max normalization, PCA band reduction,
zero-padded patch extraction around each labeled pixel, per-class
stratified splitting, and epoch-shuffled batching.  Every stage is a pure
function of its inputs and an explicit seed; randomness comes from
counter-based Philox streams keyed by purpose, so re-running any stage
reproduces its output bit for bit.

PCA is fitted on the whole cube, labeled and background pixels alike,
before the split exists.  Band reduction therefore sees test pixels; maps
need every pixel projected anyway, and per-pixel classification papers
conventionally accept this.  Callers comparing against split-aware
protocols should treat reported accuracies accordingly.
"""

import math
from dataclasses import dataclass

import numpy as np

from .errors import ContractError, DataError
from .hsio import ROLE_TEST, ROLE_TRAIN, ROLE_VAL, HsiCube, SplitAssignment


@dataclass
class PcaModel:
    """Fitted projection: columns of `components` are orthonormal
    eigenvectors of the population covariance, eigenvalues descending."""

    mean: np.ndarray
    components: np.ndarray
    eigenvalues: np.ndarray


@dataclass
class Sample:
    """One training example: a k*k spatial patch with the source pixel's
    spectrum at its center."""

    patch: np.ndarray
    label: int
    coord: tuple


def normalize(cube):
    """Scale each band to [0, 1] over the whole scene.

    Constant bands carry no information and map to all zeros.
    """
    data = cube.data
    lo = data.min(axis=(0, 1))
    hi = data.max(axis=(0, 1))
    span = hi - lo
    out = np.zeros_like(data)
    live = span > 0
    out[:, :, live] = (data[:, :, live] - lo[live]) / span[live]
    return HsiCube(out)


def pca_fit(cube, keep):
    """Eigendecompose the population covariance of the pixel spectra.

    keep: number of leading components to retain (<= band count).
    Component signs are canonicalized so each column's largest-magnitude
    entry is positive, making the fit deterministic.
    """
    b = cube.bands
    if not 1 <= keep <= b:
        raise ContractError(f"cannot keep {keep} of {b} bands")
    x = cube.data.reshape(-1, b)
    if x.shape[0] < 2:
        raise ContractError("PCA needs at least 2 pixels")
    mean = x.mean(axis=0)
    centered = x - mean
    cov = centered.T @ centered / x.shape[0]
    if not np.all(np.isfinite(cov)):
        raise DataError("covariance is non-finite")
    eigenvalues, eigenvectors = np.linalg.eigh(cov)
    order = np.argsort(eigenvalues)[::-1][:keep]
    components = eigenvectors[:, order]
    flip = np.sign(components[np.argmax(np.abs(components), axis=0),
                              np.arange(keep)])
    components = components * flip
    return PcaModel(mean=mean, components=components,
                    eigenvalues=np.maximum(eigenvalues[order], 0.0))


def pca_reduce(cube, model):
    """Project every pixel spectrum onto the retained components."""
    b = cube.bands
    if model.components.shape[0] != b:
        raise ContractError(f"model was fitted on {model.components.shape[0]} "
                            f"bands, cube has {b}")
    x = cube.data.reshape(-1, b)
    reduced = (x - model.mean) @ model.components
    return HsiCube(reduced.reshape(cube.rows, cube.cols, -1))


def extract_patches(cube, labels, k):
    """Cut a k*k spatial window around every labeled pixel.

    The cube is zero-padded by k//2 on each spatial side first, so border
    patches exist and their out-of-scene positions are exact zero vectors.
    """
    if k < 1 or k % 2 == 0:
        raise ContractError(f"patch size must be odd and >= 1, got {k}")
    if labels.labels.shape != cube.data.shape[:2]:
        raise DataError(f"label grid {labels.labels.shape} does not match "
                        f"cube grid {cube.data.shape[:2]}")
    r = k // 2
    padded = np.pad(cube.data, ((r, r), (r, r), (0, 0)))
    ii, jj = np.nonzero(labels.labels)
    windows = np.lib.stride_tricks.sliding_window_view(padded, (k, k), axis=(0, 1))
    # windows[i, j] is [B', k, k]; put the spatial axes first again
    patches = np.ascontiguousarray(np.moveaxis(windows[ii, jj], 1, 3))
    return [Sample(patch=patches[s], label=int(labels.labels[i, j]), coord=(int(i), int(j)))
            for s, (i, j) in enumerate(zip(ii, jj))]


def _ceil_frac(fraction, n):
    # nudge below the exact product so 0.4 * 100 rounds to 40, not 41
    return math.ceil(fraction * n - 1e-9)


def split(labels, seed, fractions=(0.4, 0.3, 0.3)):
    """Assign every labeled pixel a train/val/test role, per class.

    Per class with n pixels: round-up(f_train * n) go to train (at least
    one), round-up of the val share of the remainder go to val, the rest
    to test.  The shuffle for class c draws from a Philox stream keyed
    (seed, c), so classes are independent and the whole assignment is
    reproducible from (seed, labels) alone.
    """
    f_train, f_val, f_test = (float(f) for f in fractions)
    if min(f_train, f_val, f_test) < 0 or abs(f_train + f_val + f_test - 1.0) > 1e-9:
        raise ContractError(f"fractions must be nonnegative and sum to 1, "
                            f"got {fractions}")
    grid = labels.labels
    roles = np.zeros(grid.shape, dtype=np.uint8)
    for c in range(1, labels.num_classes + 1):
        ii, jj = np.nonzero(grid == c)
        n = ii.size
        if n == 0:
            continue
        n_train = max(1, _ceil_frac(f_train, n))
        rest = n - n_train
        n_val = _ceil_frac(f_val / (f_val + f_test), rest) if f_val + f_test > 0 else 0
        rng = np.random.Generator(np.random.Philox(
            key=np.array([seed, c], dtype=np.uint64)))
        order = rng.permutation(n)
        roles[ii[order[:n_train]], jj[order[:n_train]]] = ROLE_TRAIN
        roles[ii[order[n_train:n_train + n_val]],
              jj[order[n_train:n_train + n_val]]] = ROLE_VAL
        roles[ii[order[n_train + n_val:]], jj[order[n_train + n_val:]]] = ROLE_TEST
    return SplitAssignment(seed=seed, roles=roles)


def samples_for_role(samples, assignment, role):
    """Filter samples down to one side of the split."""
    return [s for s in samples if assignment.roles[s.coord] == role]


def batch_iter(samples, batch_size, seed, epoch):
    """Yield (patches, labels) batches in an epoch-specific shuffled order.

    patches is [n, k, k, B'] float64, labels is [n] int64 with the original
    1-based class ids.  The last batch may be short.  Order is drawn from a
    Philox stream keyed (seed, 2^32 + epoch); the offset keeps batch
    shuffles off the split streams, whose second key word is a class id.
    """
    if batch_size < 1:
        raise ContractError(f"batch_size must be >= 1, got {batch_size}")
    if epoch < 0:
        raise ContractError(f"epoch must be >= 0, got {epoch}")
    rng = np.random.Generator(np.random.Philox(
        key=np.array([seed, (1 << 32) + epoch], dtype=np.uint64)))
    order = rng.permutation(len(samples))
    for start in range(0, len(samples), batch_size):
        chunk = [samples[i] for i in order[start:start + batch_size]]
        yield (np.stack([s.patch for s in chunk]),
               np.array([s.label for s in chunk], dtype=np.int64))
