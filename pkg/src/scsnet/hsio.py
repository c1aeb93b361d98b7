"""Binary file formats for cubes, label grids and split assignments.

Three little-endian formats share the layout magic | u32 version | header
| payload:

    cube   "HSIC" | version=1 | u32 M, N, B | M*N*B float32, laid out so
           scan position (i, j, b) sits at index ((i*N)+j)*B + b
    labels "HSIG" | version=1 | u32 M, N    | M*N uint16, 0 = unlabeled
    split  "HSIS" | version=1 | u64 seed    | M*N uint8 roles

Split files carry no dims of their own; the payload length must match the
label grid they were generated from.  All parse failures raise FormatError
with the byte offset at which the file stopped making sense.
"""

import struct
from dataclasses import dataclass

import numpy as np

from .errors import ContractError, DataError, FormatError

CUBE_MAGIC = b"HSIC"
LABEL_MAGIC = b"HSIG"
SPLIT_MAGIC = b"HSIS"
FORMAT_VERSION = 1

ROLE_NONE = 0
ROLE_TRAIN = 1
ROLE_VAL = 2
ROLE_TEST = 3
ROLE_NAMES = {ROLE_NONE: "none", ROLE_TRAIN: "train",
              ROLE_VAL: "val", ROLE_TEST: "test"}


@dataclass
class HsiCube:
    """A hyperspectral scene: data[i, j, b] is band b of pixel (i, j)."""

    data: np.ndarray

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        if data.ndim != 3 or min(data.shape) < 1:
            raise ContractError(f"cube data must be [M, N, B] with positive "
                                f"dims, got shape {data.shape}")
        if not np.all(np.isfinite(data)):
            raise DataError("cube contains non-finite values")
        self.data = data

    @property
    def rows(self):
        return self.data.shape[0]

    @property
    def cols(self):
        return self.data.shape[1]

    @property
    def bands(self):
        return self.data.shape[2]


@dataclass
class LabelGrid:
    """Per-pixel class ids on the cube's spatial grid; 0 marks background."""

    labels: np.ndarray

    def __post_init__(self):
        labels = np.asarray(self.labels)
        if labels.ndim != 2 or min(labels.shape) < 1:
            raise ContractError(f"labels must be [M, N] with positive dims, "
                                f"got shape {labels.shape}")
        if not np.issubdtype(labels.dtype, np.integer):
            raise ContractError("labels must be integers")
        if labels.min() < 0 or labels.max() > np.iinfo(np.uint16).max:
            raise DataError("labels must fit in [0, 65535]")
        self.labels = labels.astype(np.int64)

    @property
    def rows(self):
        return self.labels.shape[0]

    @property
    def cols(self):
        return self.labels.shape[1]

    @property
    def num_classes(self):
        """Highest class id present (classes are 1..C)."""
        return int(self.labels.max())

    def class_counts(self):
        """Pixel count per class id 1..C (absent classes report 0)."""
        counts = np.bincount(self.labels.reshape(-1),
                             minlength=self.num_classes + 1)
        return {c: int(counts[c]) for c in range(1, self.num_classes + 1)}


@dataclass
class SplitAssignment:
    """Role per pixel: 0 none, 1 train, 2 val, 3 test."""

    seed: int
    roles: np.ndarray

    def __post_init__(self):
        roles = np.asarray(self.roles)
        if roles.ndim != 2:
            raise ContractError(f"roles must be [M, N], got shape {roles.shape}")
        if not np.all(np.isin(roles, list(ROLE_NAMES))):
            raise DataError("roles must be in {0, 1, 2, 3}")
        self.seed = int(self.seed)
        self.roles = roles.astype(np.uint8)

    def mask(self, role):
        return self.roles == role


def check_split_matches(assignment, labels):
    """Reject a split whose roles disagree with the label grid's support."""
    if assignment.roles.shape != labels.labels.shape:
        raise DataError(f"split grid {assignment.roles.shape} does not match "
                        f"label grid {labels.labels.shape}")
    labeled = labels.labels > 0
    assigned = assignment.roles != ROLE_NONE
    if not np.array_equal(labeled, assigned):
        bad = int(np.flatnonzero(labeled != assigned)[0])
        i, j = divmod(bad, labels.cols)
        raise DataError(f"split roles disagree with labels at pixel "
                        f"({i}, {j})")


# ---- parsing helpers -----------------------------------------------------


class _Reader:
    def __init__(self, path, blob):
        self.path = str(path)
        self.blob = blob
        self.pos = 0

    def take(self, n, what):
        if self.pos + n > len(self.blob):
            raise FormatError(self.path, len(self.blob),
                              f"truncated while reading {what} "
                              f"({n} bytes needed at offset {self.pos})")
        out = self.blob[self.pos:self.pos + n]
        self.pos += n
        return out

    def u8(self, what):
        return self.take(1, what)[0]

    def u16(self, what):
        return struct.unpack("<H", self.take(2, what))[0]

    def u32(self, what):
        return struct.unpack("<I", self.take(4, what))[0]

    def u64(self, what):
        return struct.unpack("<Q", self.take(8, what))[0]

    def f64(self, what):
        return struct.unpack("<d", self.take(8, what))[0]

    def magic(self, expected):
        got = self.take(4, "magic")
        if got != expected:
            raise FormatError(self.path, 0,
                              f"bad magic {got!r}, expected {expected!r}")

    def version(self):
        at = self.pos
        got = self.u32("version")
        if got != FORMAT_VERSION:
            raise FormatError(self.path, at,
                              f"unsupported version {got}, expected "
                              f"{FORMAT_VERSION}")

    def dim(self, what):
        at = self.pos
        value = self.u32(what)
        if value < 1:
            raise FormatError(self.path, at, f"{what} must be >= 1, got 0")
        return value

    def payload(self, count, itemsize, what):
        start = self.pos
        expected = count * itemsize
        actual = len(self.blob) - start
        if actual < expected:
            raise FormatError(self.path, len(self.blob),
                              f"payload truncated: {what} needs {expected} "
                              f"bytes, file holds {actual}")
        if actual > expected:
            raise FormatError(self.path, start + expected,
                              f"trailing data: {what} ends here but the file "
                              f"continues for {actual - expected} more bytes")
        return self.take(expected, what)


def load_cube(path):
    with open(path, "rb") as fh:
        r = _Reader(path, fh.read())
    r.magic(CUBE_MAGIC)
    r.version()
    m = r.dim("row count")
    n = r.dim("column count")
    b = r.dim("band count")
    raw = r.payload(m * n * b, 4, "cube values")
    data = np.frombuffer(raw, dtype="<f4").astype(np.float64).reshape(m, n, b)
    return HsiCube(data)


def save_cube(path, cube):
    with open(path, "wb") as fh:
        fh.write(CUBE_MAGIC)
        fh.write(struct.pack("<IIII", FORMAT_VERSION,
                             cube.rows, cube.cols, cube.bands))
        fh.write(np.ascontiguousarray(cube.data, dtype="<f4").tobytes())


def load_labels(path):
    with open(path, "rb") as fh:
        r = _Reader(path, fh.read())
    r.magic(LABEL_MAGIC)
    r.version()
    m = r.dim("row count")
    n = r.dim("column count")
    raw = r.payload(m * n, 2, "labels")
    labels = np.frombuffer(raw, dtype="<u2").astype(np.int64).reshape(m, n)
    return LabelGrid(labels)


def save_labels(path, grid):
    with open(path, "wb") as fh:
        fh.write(LABEL_MAGIC)
        fh.write(struct.pack("<III", FORMAT_VERSION, grid.rows, grid.cols))
        fh.write(np.ascontiguousarray(grid.labels, dtype="<u2").tobytes())


def load_split(path, shape):
    """Read a split file; shape is (M, N) from the paired label grid."""
    m, n = shape
    with open(path, "rb") as fh:
        r = _Reader(path, fh.read())
    r.magic(SPLIT_MAGIC)
    r.version()
    seed = r.u64("seed")
    raw = r.payload(m * n, 1, "roles")
    roles = np.frombuffer(raw, dtype=np.uint8).reshape(m, n)
    bad = np.flatnonzero(~np.isin(roles, list(ROLE_NAMES)))
    if bad.size:
        raise FormatError(path, r.pos - m * n + int(bad[0]),
                          f"role byte {int(roles.reshape(-1)[bad[0]])} is not "
                          f"in {{0, 1, 2, 3}}")
    return SplitAssignment(seed, roles)


def save_split(path, assignment):
    with open(path, "wb") as fh:
        fh.write(SPLIT_MAGIC)
        fh.write(struct.pack("<IQ", FORMAT_VERSION, assignment.seed))
        fh.write(np.ascontiguousarray(assignment.roles, dtype=np.uint8).tobytes())
