"""Frozen language-derived concept spaces and the text classifier built on them.

A concept space is an ``n x d`` matrix of unit-norm basis vectors (one per
label).  Projecting a visual feature onto it gives cosine similarities, which
is all the "text classifier" does; the basis is never trained.
"""

from __future__ import annotations

import hashlib
import os
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import numerics as nx
from .errors import DegenerateInputError, FormatError, InvalidArgumentError, ParseError

KINDS = ("category", "description")
FILE_KINDS = KINDS + ("raw", "descriptions")
MAGIC = "LSS-EMB"
UNIT_TOL = 1e-10


def _freeze(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=np.float64)
    a.flags.writeable = False
    return a


@dataclass(frozen=True)
class EmbeddingSet:
    labels: tuple
    vectors: np.ndarray
    source: str = "file"

    def __post_init__(self):
        labels = tuple(str(s) for s in self.labels)
        vectors = np.asarray(self.vectors, dtype=np.float64)
        if vectors.ndim != 2 or len(labels) != vectors.shape[0] or not labels:
            raise InvalidArgumentError("need n >= 1 labels and an n x d matrix")
        if len(set(labels)) != len(labels):
            raise InvalidArgumentError("labels must be unique")
        if self.source not in ("file", "synthetic"):
            raise InvalidArgumentError(f"unknown source tag {self.source!r}")
        for label, row in zip(labels, vectors):
            if not np.all(np.isfinite(row)):
                raise InvalidArgumentError(f"non-finite embedding for label {label!r}")
            if not np.any(row):
                raise DegenerateInputError(f"zero embedding for label {label!r}")
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "vectors", _freeze(vectors))

    def __len__(self):
        return len(self.labels)

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]


@dataclass(frozen=True)
class ConceptSpace:
    labels: tuple
    basis: np.ndarray
    kind: str
    frozen: bool = field(default=True, init=False)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise InvalidArgumentError(f"unknown concept space kind {self.kind!r}")
        basis = np.asarray(self.basis, dtype=np.float64)
        if basis.ndim != 2 or basis.shape[0] != len(self.labels):
            raise InvalidArgumentError("basis must have one row per label")
        norms = np.linalg.norm(basis, axis=1)
        if np.any(np.abs(norms - 1.0) > UNIT_TOL):
            raise FormatError("concept space rows must be unit norm")
        object.__setattr__(self, "labels", tuple(self.labels))
        object.__setattr__(self, "basis", _freeze(basis))

    @property
    def n(self) -> int:
        return self.basis.shape[0]

    @property
    def dim(self) -> int:
        return self.basis.shape[1]

    def digest(self) -> str:
        """SHA-256 over labels and raw basis bytes; stable while the space is frozen."""
        h = hashlib.sha256()
        h.update(self.kind.encode())
        for label in self.labels:
            h.update(label.encode("utf-8") + b"\0")
        h.update(self.basis.tobytes())
        return h.hexdigest()

    def project(self, f) -> "ScoreDistribution":
        return project_to_space(self, f)


@dataclass(frozen=True)
class ScoreDistribution:
    """Cosine scores of one feature (or a batch) against every basis vector."""

    raw: nx.Tensor
    kind: str

    def sharpened(self, lam: float) -> nx.Tensor:
        return nx.softmax_temp(self.raw, lam)


def _unit_rows(vectors: np.ndarray, labels: Sequence[str]) -> np.ndarray:
    norms = np.linalg.norm(vectors, axis=1)
    for label, norm in zip(labels, norms):
        if norm == 0:
            raise DegenerateInputError(f"zero embedding for label {label!r}")
    return vectors / norms[:, None]


def build_category_space(emb: EmbeddingSet) -> ConceptSpace:
    return ConceptSpace(emb.labels, _unit_rows(emb.vectors, emb.labels), "category")


def build_description_space(groups: Sequence[tuple[str, Sequence]],
                            normalize_each: bool = True) -> ConceptSpace:
    """One basis row per label: the re-normalized mean of its description embeddings.

    With ``normalize_each=False`` the raw vectors are averaged instead (the mean
    is still normalized so projections remain cosines).
    """
    if not groups:
        raise InvalidArgumentError("no description groups")
    labels, rows = [], []
    dim = None
    for label, vectors in groups:
        vecs = np.asarray(vectors, dtype=np.float64)
        if vecs.ndim == 1:
            vecs = vecs[None, :]
        if vecs.shape[0] == 0:
            raise InvalidArgumentError(f"empty description group for label {label!r}")
        if dim is None:
            dim = vecs.shape[1]
        elif vecs.shape[1] != dim:
            raise InvalidArgumentError(f"group {label!r} has dimension {vecs.shape[1]}, expected {dim}")
        if normalize_each:
            vecs = _unit_rows(vecs, [label] * len(vecs))
        avg = vecs.mean(axis=0)
        norm = np.linalg.norm(avg)
        if norm == 0:
            raise DegenerateInputError(f"description embeddings of {label!r} average to zero")
        labels.append(label)
        rows.append(avg / norm)
    if len(set(labels)) != len(labels):
        raise InvalidArgumentError("description group labels must be unique")
    return ConceptSpace(labels, np.stack(rows), "description")


def project_to_space(space: ConceptSpace, f) -> ScoreDistribution:
    """Text-classifier forward pass: ``basis @ (f / ||f||)`` for one or many features."""
    f = nx.as_tensor(f)
    if f.shape[-1] != space.dim:
        raise InvalidArgumentError(f"feature dim {f.shape[-1]} != space dim {space.dim}")
    return ScoreDistribution(nx.matmul(nx.l2_normalize(f), space.basis.T), space.kind)


def _canonical(label: str) -> str:
    return label.strip().casefold()


def merge_embedding_sets(*sets: EmbeddingSet) -> EmbeddingSet:
    """Concatenate label sets, dropping exact repeats (case-insensitive, trimmed)."""
    seen, labels, rows = set(), [], []
    for emb in sets:
        for label, row in zip(emb.labels, emb.vectors):
            key = _canonical(label)
            if key in seen:
                continue
            seen.add(key)
            labels.append(label.strip())
            rows.append(row)
    source = "synthetic" if all(e.source == "synthetic" for e in sets) else "file"
    return EmbeddingSet(labels, np.stack(rows), source)


def dedup_embeddings(emb: EmbeddingSet, sim_threshold: float) -> EmbeddingSet:
    """Greedy near-duplicate removal in input order.

    A row is kept iff its cosine to every previously kept row is below the
    threshold.
    """
    if not 0.0 < sim_threshold < 1.0:
        raise InvalidArgumentError(f"sim_threshold {sim_threshold} must lie in (0, 1)")
    units = _unit_rows(emb.vectors, emb.labels)
    kept: list[int] = []
    for i, u in enumerate(units):
        if kept and np.max(units[kept] @ u) >= sim_threshold:
            continue
        kept.append(i)
    return EmbeddingSet([emb.labels[i] for i in kept], emb.vectors[kept], emb.source)


# ---------------------------------------------------------------- LSS-EMB text files

def write_emb(path, labels: Sequence[str], vectors, kind: str):
    if kind not in FILE_KINDS:
        raise InvalidArgumentError(f"unknown file kind {kind!r}")
    vectors = np.asarray(vectors, dtype=np.float64)
    lines = [f"{MAGIC} 1 {vectors.shape[0]} {vectors.shape[1]} {kind}"]
    for label, row in zip(labels, vectors):
        if "\t" in label or "\n" in label or "\r" in label:
            raise InvalidArgumentError(f"label {label!r} contains a tab or newline")
        lines.append(label + "\t" + " ".join(repr(float(x)) for x in row))
    tmp = f"{path}.tmp"
    with open(tmp, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")
    os.replace(tmp, path)


def read_emb(path) -> tuple[str, list[str], np.ndarray]:
    """Parse an LSS-EMB file into ``(kind, labels, vectors)``."""
    with open(path, encoding="utf-8") as fh:
        text = fh.read()
    if not text:
        raise ParseError("empty file", line=1)
    lines = text.split("\n")
    if lines[-1] != "":
        # every record, including the last, is newline-terminated
        raise ParseError("truncated final record", line=len(lines))
    lines.pop()
    head = lines[0].split(" ")
    if len(head) != 5 or head[0] != MAGIC:
        raise ParseError(f"bad header {lines[0]!r}", line=1)
    if head[1] != "1":
        raise FormatError(f"unsupported LSS-EMB version {head[1]}")
    try:
        n, d = int(head[2]), int(head[3])
    except ValueError:
        raise ParseError("header counts are not integers", line=1) from None
    kind = head[4]
    if kind not in FILE_KINDS:
        raise FormatError(f"unknown kind {kind!r}")
    if n < 1 or d < 1:
        raise FormatError("header declares an empty matrix")
    if len(lines) - 1 < n:
        raise ParseError(f"truncated: expected {n} rows, found {len(lines) - 1}", line=len(lines) + 1)
    if len(lines) - 1 > n:
        raise FormatError(f"expected {n} rows, found {len(lines) - 1}")
    labels, vectors = [], np.empty((n, d))
    for i, line in enumerate(lines[1:], start=2):
        label, sep, rest = line.partition("\t")
        if not sep:
            raise ParseError("missing tab separator", line=i)
        fields = rest.split(" ")
        if len(fields) != d:
            raise FormatError(f"line {i}: {len(fields)} values, header says d={d}")
        try:
            vectors[i - 2] = [float(x) for x in fields]
        except ValueError:
            raise ParseError("malformed float", line=i) from None
        labels.append(label)
    return kind, labels, vectors


def save_space(space: ConceptSpace, path):
    write_emb(path, space.labels, space.basis, space.kind)


def load_space(path) -> ConceptSpace:
    kind, labels, vectors = read_emb(path)
    if kind not in KINDS:
        raise FormatError(f"file holds {kind!r} embeddings, not a concept space")
    return ConceptSpace(labels, vectors, kind)


def save_embeddings(emb: EmbeddingSet, path):
    write_emb(path, emb.labels, emb.vectors, "raw")


def load_embeddings(path) -> EmbeddingSet:
    kind, labels, vectors = read_emb(path)
    if kind == "descriptions":
        raise FormatError("description group file; use load_description_groups")
    return EmbeddingSet(labels, vectors, "file")


def save_description_groups(groups, path):
    labels, rows = [], []
    for label, vectors in groups:
        for v in np.atleast_2d(np.asarray(vectors, dtype=np.float64)):
            labels.append(label)
            rows.append(v)
    write_emb(path, labels, np.stack(rows), "descriptions")


def load_description_groups(path) -> list[tuple[str, np.ndarray]]:
    """Rows sharing a label form one group; groups keep first-appearance order."""
    kind, labels, vectors = read_emb(path)
    if kind != "descriptions":
        raise FormatError(f"expected a descriptions file, got {kind!r}")
    order: dict[str, list] = {}
    for label, row in zip(labels, vectors):
        order.setdefault(label, []).append(row)
    return [(label, np.stack(rows)) for label, rows in order.items()]
