"""Frozen class-name embedding tables.

Synthetic tables stand in for a pretrained text encoder; real encoder
outputs can be loaded from JSON or the C3EM binary format.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import LabelVocabulary, TruncatedFileError, MagicMismatchError

EMBED_MAGIC = b"C3EM"


class EmbeddingError(ValueError):
    pass


class MissingNameError(EmbeddingError):
    pass


class DimensionMismatchError(EmbeddingError):
    pass


class NonFiniteError(EmbeddingError):
    pass


@dataclass(frozen=True)
class EmbeddingTable:
    names: LabelVocabulary
    vectors: np.ndarray

    def __post_init__(self):
        v = np.array(self.vectors, dtype=np.float64)
        if v.ndim != 2 or v.shape[0] != len(self.names):
            raise ValueError("need one embedding row per vocabulary entry")
        v.setflags(write=False)
        object.__setattr__(self, "vectors", v)

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def __len__(self):
        return len(self.names)

    def row(self, name: str) -> np.ndarray:
        return self.vectors[self.names.index(name)]


def normalize_rows(matrix) -> np.ndarray:
    m = np.asarray(matrix, dtype=np.float64)
    norms = np.sqrt((m * m).sum(axis=1))
    zero = np.flatnonzero(norms == 0)
    if len(zero):
        raise ValueError(f"row {int(zero[0])} has zero norm")
    return m / norms[:, None]


def _name_key(name: str) -> int:
    return int.from_bytes(hashlib.sha256(name.encode("utf-8")).digest()[:16], "little")


def synth_embeddings(vocab: LabelVocabulary, dim: int = 64, seed: int = 0) -> EmbeddingTable:
    """Isotropic random unit vectors, one RNG stream per (seed, class name).

    A name maps to the same row regardless of its position in ``vocab``.
    """
    if dim < 2:
        raise ValueError("embedding dimension must be >= 2")
    rows = []
    for name in vocab.names:
        rng = np.random.default_rng([int(seed), _name_key(name)])
        rows.append(rng.standard_normal(dim))
    return EmbeddingTable(vocab, normalize_rows(np.array(rows)))


def _check_and_build(found: dict, vocab: LabelVocabulary, path) -> EmbeddingTable:
    missing = [n for n in vocab.names if n not in found]
    if missing:
        raise MissingNameError(f"{path}: no embedding for class {missing[0]!r}")
    extra = sorted(set(found) - set(vocab.names))
    if extra:
        raise MissingNameError(f"{path}: class {extra[0]!r} is not in the vocabulary")
    dims = {len(v) for v in found.values()}
    if len(dims) != 1:
        raise DimensionMismatchError(f"{path}: rows have differing dimensions {sorted(dims)}")
    mat = np.array([found[n] for n in vocab.names], dtype=np.float64)
    if not np.all(np.isfinite(mat)):
        bad = vocab.names[int(np.flatnonzero(~np.isfinite(mat).all(axis=1))[0])]
        raise NonFiniteError(f"{path}: non-finite value in the row for {bad!r}")
    return EmbeddingTable(vocab, normalize_rows(mat))


def load_embeddings(path, vocab: LabelVocabulary, dim: int | None = None) -> EmbeddingTable:
    """Load a JSON (name -> list) or C3EM binary embedding file.

    Rows come back unit-normalized in ``vocab`` order. ``dim``, when given,
    must match the file.
    """
    raw = Path(path).read_bytes()
    if raw[:4] == EMBED_MAGIC:
        found = _parse_binary(raw, path)
    else:
        try:
            obj = json.loads(raw.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise MagicMismatchError(f"{path} is neither C3EM nor JSON: {exc}") from None
        if not isinstance(obj, dict):
            raise EmbeddingError(f"{path}: JSON embeddings must be an object")
        found = {k: [float(x) for x in v] for k, v in obj.items()}
    table = _check_and_build(found, vocab, path)
    if dim is not None and table.dim != dim:
        raise DimensionMismatchError(f"{path}: expected dimension {dim}, file has {table.dim}")
    return table


def _parse_binary(raw: bytes, path) -> dict:
    def need(end):
        if end > len(raw):
            raise TruncatedFileError(f"{path}: truncated embedding file")

    need(12)
    count, dim = struct.unpack_from("<II", raw, 4)
    pos = 12
    found = {}
    for _ in range(count):
        need(pos + 2)
        (length,) = struct.unpack_from("<H", raw, pos)
        pos += 2
        need(pos + length + 4 * dim)
        name = raw[pos:pos + length].decode("utf-8")
        pos += length
        found[name] = np.frombuffer(raw, dtype="<f4", count=dim, offset=pos).astype(np.float64)
        pos += 4 * dim
    return found


def save_embeddings(table: EmbeddingTable, path, binary: bool = False) -> None:
    if binary:
        with open(path, "wb") as fh:
            fh.write(EMBED_MAGIC)
            fh.write(struct.pack("<II", len(table), table.dim))
            for name, row in zip(table.names.names, table.vectors):
                raw = name.encode("utf-8")
                fh.write(struct.pack("<H", len(raw)) + raw)
                fh.write(row.astype("<f4").tobytes())
    else:
        obj = {n: [float(x) for x in row] for n, row in zip(table.names.names, table.vectors)}
        Path(path).write_text(json.dumps(obj) + "\n")
