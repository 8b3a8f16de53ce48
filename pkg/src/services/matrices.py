#!/usr/bin/env python3
"""
Feature matrices and their on-disk formats.

Binary layout (little-endian)::

    offset  size  field
    0       4     magic b"LSEM"
    4       4     version, u32 = 1
    8       8     rows, u64
    16      8     cols, u64
    24      8*n   rows*cols float64 values, column-major

Column ``j`` of a matrix is instance ``j``.
"""
import io
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .exceptions import MatrixFormatError, ValidationError

logger = logging.getLogger('lse')

MAGIC = b"LSEM"
VERSION = 1
HEADER = struct.Struct('<4sIQQ')
HEADER_SIZE = HEADER.size  # 24


def _frozen(values):
    array = np.array(values, dtype=np.float64, order='F', copy=True)
    if array.ndim == 1:
        array = array.reshape(-1, 1, order='F')
    array.setflags(write=False)
    return array


def first_non_finite(values):
    """(row, col) of the first non-finite entry in column-major order, or None"""
    bad = ~np.isfinite(values)
    if not bad.any():
        return None
    flat = np.flatnonzero(bad.ravel(order='F'))[0]
    rows = values.shape[0]
    return int(flat % rows), int(flat // rows)


@dataclass(frozen=True, eq=False)
class ModalityMatrix:
    """One modality's feature matrix X (features x instances)"""

    name: str
    values: np.ndarray
    kind: str = "visual"

    def __post_init__(self):
        values = _frozen(self.values)
        if values.ndim != 2:
            raise ValidationError(f"Modality {self.name}: expected a 2-D matrix, got {values.ndim}-D", contract="matrix-shape")
        if values.shape[0] < 1 or values.shape[1] < 1:
            raise ValidationError(f"Modality {self.name}: rows and cols must be >= 1, got {values.shape}", contract="matrix-shape")
        bad = first_non_finite(values)
        if bad is not None:
            raise ValidationError(f"Modality {self.name}: non-finite value at row {bad[0]}, col {bad[1]}", contract="finite-values")
        if self.kind not in ("visual", "semantic"):
            raise ValidationError(f"Modality {self.name}: kind must be visual or semantic, got {self.kind!r}", contract="modality-kind")
        object.__setattr__(self, 'values', values)

    @property
    def rows(self):
        return self.values.shape[0]

    @property
    def cols(self):
        return self.values.shape[1]

    def column(self, j):
        return self.values[:, j]

    def select(self, indices):
        """New matrix holding the given instance columns, in the given order"""
        indices = np.asarray(indices, dtype=np.intp)
        return ModalityMatrix(self.name, self.values[:, indices], self.kind)

    def renamed(self, name, kind=None):
        return ModalityMatrix(name, self.values, kind or self.kind)


@dataclass(frozen=True, eq=False)
class PrototypeMatrix:
    """Per-class semantic vectors for one class-semantic modality"""

    modality_name: str
    class_ids: tuple
    vectors: np.ndarray
    _index: dict = field(default=None, init=False, repr=False, compare=False)

    def __post_init__(self):
        vectors = _frozen(self.vectors)
        class_ids = tuple(int(c) for c in self.class_ids)
        if vectors.shape[1] != len(class_ids):
            raise ValidationError(
                f"Prototypes {self.modality_name}: {vectors.shape[1]} columns but {len(class_ids)} class ids",
                contract="prototype-columns")
        if len(set(class_ids)) != len(class_ids):
            raise ValidationError(f"Prototypes {self.modality_name}: duplicate class ids", contract="prototype-columns")
        bad = first_non_finite(vectors)
        if bad is not None:
            raise ValidationError(
                f"Prototypes {self.modality_name}: non-finite value at row {bad[0]}, col {bad[1]}",
                contract="finite-values")
        object.__setattr__(self, 'vectors', vectors)
        object.__setattr__(self, 'class_ids', class_ids)
        object.__setattr__(self, '_index', {c: j for j, c in enumerate(class_ids)})

    @property
    def dim(self):
        return self.vectors.shape[0]

    def has(self, class_id):
        return int(class_id) in self._index

    def columns_for(self, class_ids):
        """Matrix of prototype columns for class_ids, in that order"""
        missing = [c for c in class_ids if int(c) not in self._index]
        if missing:
            raise ValidationError(
                f"missing prototype for class(es) {missing} in modality {self.modality_name}",
                contract="missing prototype")
        return self.vectors[:, [self._index[int(c)] for c in class_ids]]

    def restricted(self, class_ids):
        class_ids = [int(c) for c in class_ids]
        return PrototypeMatrix(self.modality_name, tuple(class_ids), self.columns_for(class_ids))


def encode_matrix(values):
    """Bytes of the binary matrix format for a 2-D float64 array"""
    values = np.asarray(values, dtype=np.float64)
    rows, cols = values.shape
    payload = np.asarray(values, dtype='<f8').tobytes(order='F')
    return HEADER.pack(MAGIC, VERSION, rows, cols) + payload


def decode_matrix(data, path=None):
    """Decode the binary matrix format, validating header, size and values"""
    if len(data) < HEADER_SIZE:
        raise MatrixFormatError(f"truncated header: {len(data)} bytes, need {HEADER_SIZE}", path, "offset 0")
    magic, version, rows, cols = HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        raise MatrixFormatError(f"bad magic {magic!r}", path, "offset 0")
    if version != VERSION:
        raise MatrixFormatError(f"unsupported version {version}", path, "offset 4")
    if rows < 1 or cols < 1:
        raise MatrixFormatError(f"rows and cols must be >= 1, got {rows}x{cols}", path, "offset 8")
    expected = HEADER_SIZE + 8 * rows * cols
    if len(data) != expected:
        raise MatrixFormatError(
            f"dimension/value-count mismatch: header says {rows}x{cols} ({expected} bytes), file has {len(data)} bytes",
            path, f"offset {HEADER_SIZE}")
    values = np.frombuffer(data, dtype='<f8', count=rows * cols, offset=HEADER_SIZE)
    values = values.reshape((rows, cols), order='F').astype(np.float64)
    bad = first_non_finite(values)
    if bad is not None:
        offset = HEADER_SIZE + 8 * (bad[1] * rows + bad[0])
        raise MatrixFormatError(f"non-finite value at row {bad[0]}, col {bad[1]}", path, f"offset {offset}")
    return values


def _locate_csv_error(text, path):
    for line_no, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        for col_no, token in enumerate(line.split(','), start=1):
            try:
                float(token)
            except ValueError:
                raise MatrixFormatError(f"cannot parse {token.strip()!r} as a number", path, f"line {line_no}, column {col_no}")
    raise MatrixFormatError("rows have differing numbers of values", path)


def parse_csv(text, path=None):
    """Parse CSV text, one file row per feature dimension"""
    try:
        values = np.loadtxt(io.StringIO(text), delimiter=',', dtype=np.float64, ndmin=2)
    except ValueError:
        _locate_csv_error(text, path)
    if values.size == 0:
        raise MatrixFormatError("empty CSV matrix", path)
    bad = first_non_finite(values)
    if bad is not None:
        raise MatrixFormatError("non-finite value", path, f"line {bad[0] + 1}, column {bad[1] + 1}")
    return values


def read_matrix_values(path):
    """Raw float64 array from a binary or CSV matrix file (sniffed by magic bytes)"""
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as e:
        raise OSError(f"Cannot read matrix file {path}: {e}") from e
    if data[:4] == MAGIC:
        return decode_matrix(data, path)
    try:
        text = data.decode('utf-8')
    except UnicodeDecodeError:
        raise MatrixFormatError("neither an LSEM binary matrix nor UTF-8 CSV", path, "offset 0")
    return parse_csv(text, path)


def load_matrix(path, name=None, kind="visual"):
    """Load a validated ModalityMatrix from a binary or CSV file"""
    path = Path(path)
    values = read_matrix_values(path)
    logger.debug(f"Loaded matrix {path} with shape {values.shape}")
    return ModalityMatrix(name or path.stem, values, kind)


def save_matrix(m, path):
    """Write m in the binary matrix format"""
    values = m.values if isinstance(m, ModalityMatrix) else np.asarray(m, dtype=np.float64)
    if values.ndim == 1:
        values = values.reshape(-1, 1)
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(encode_matrix(values))
    except OSError as e:
        raise OSError(f"Cannot write matrix file {path}: {e}") from e
    logger.debug(f"Saved matrix {path} with shape {values.shape}")


def load_prototypes(path, modality_name, class_ids):
    return PrototypeMatrix(modality_name, tuple(class_ids), read_matrix_values(path))


def save_csv(values, path, header=None):
    values = np.asarray(values)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fmt = '%d' if np.issubdtype(values.dtype, np.integer) else '%.17g'
    np.savetxt(path, values, delimiter=',', fmt=fmt, header=header or '', comments='')
