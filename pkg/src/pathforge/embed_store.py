"""Binary storage for per-slide tile embeddings.

File layout, little-endian::

    magic   b"PEMB"
    version u32 (= 1)
    n_tiles u32
    dim     u32
    reserved u64 (= 0)
    coords  n_tiles x (x u32, y u32)
    values  n_tiles x dim float32, row-major

An embedding set is a directory holding one ``.pemb`` file per slide, a
``set.tsv`` manifest and a ``labels.tsv`` file.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

from .errors import (
    BadMagicError,
    BadVersionError,
    DimensionMismatchError,
    InvalidInputError,
    LengthMismatchError,
    NonFiniteError,
)

MAGIC = b"PEMB"
VERSION = 1
HEADER = struct.Struct("<4sIIIQ")


@dataclass(frozen=True)
class EncoderProfile:
    name: str
    dim: int


PROFILES = {
    p.name: p
    for p in (
        EncoderProfile("truncated-ResNet50-IN", 1024),
        EncoderProfile("ResNet50-IN", 2048),
        EncoderProfile("DINO-ViT-S", 384),
        EncoderProfile("MAE-ViT-L", 1024),
    )
}


def get_profile(name: str, dim: int | None = None) -> EncoderProfile:
    """Look up a registered profile, or build a custom one when ``dim`` is given."""
    if name in PROFILES:
        profile = PROFILES[name]
        if dim is not None and dim != profile.dim:
            raise DimensionMismatchError(f"profile {name} has dim {profile.dim}, not {dim}")
        return profile
    if dim is None:
        raise InvalidInputError(f"unknown encoder profile {name!r} and no dim given")
    return EncoderProfile(name, dim)


@dataclass
class EmbeddingMatrix:
    slide_id: str
    coords: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        self.values = np.ascontiguousarray(self.values, dtype="<f4")
        self.coords = np.ascontiguousarray(self.coords, dtype="<u4")
        if self.values.ndim != 2 or self.values.shape[0] < 1 or self.values.shape[1] < 1:
            raise InvalidInputError(f"{self.slide_id}: values must be a non-empty 2-D array")
        if self.coords.shape != (self.values.shape[0], 2):
            raise InvalidInputError(f"{self.slide_id}: coords must have shape ({self.values.shape[0]}, 2)")

    @property
    def n_tiles(self) -> int:
        return self.values.shape[0]

    @property
    def dim(self) -> int:
        return self.values.shape[1]


@dataclass
class EmbeddingSet:
    profile: EncoderProfile
    checkpoint_tag: str
    slides: dict[str, EmbeddingMatrix]
    labels: dict[str, int] = field(default_factory=dict)

    def __post_init__(self):
        for m in self.slides.values():
            if m.dim != self.profile.dim:
                raise DimensionMismatchError(
                    f"slide {m.slide_id} has dim {m.dim}, profile {self.profile.name} expects {self.profile.dim}"
                )
        missing = sorted(set(self.labels) - set(self.slides))
        if missing:
            raise InvalidInputError(f"labeled slides missing embeddings: {missing[:5]}")
        for sid, y in self.labels.items():
            if y not in (0, 1):
                raise InvalidInputError(f"label for {sid} must be 0 or 1, got {y}")

    @property
    def sample_ids(self) -> list[str]:
        return sorted(self.labels)

    def with_labels(self, labels: Mapping[str, int]) -> "EmbeddingSet":
        return EmbeddingSet(self.profile, self.checkpoint_tag, self.slides, dict(labels))


# --- single matrices --------------------------------------------------------


def encode_embeddings(matrix: EmbeddingMatrix) -> bytes:
    if not np.isfinite(matrix.values).all():
        raise NonFiniteError(f"{matrix.slide_id}: refusing to write non-finite values")
    header = HEADER.pack(MAGIC, VERSION, matrix.n_tiles, matrix.dim, 0)
    return header + matrix.coords.tobytes() + matrix.values.tobytes()


def decode_embeddings(data: bytes, slide_id: str = "", expected_dim: int | None = None) -> EmbeddingMatrix:
    if len(data) < HEADER.size:
        raise LengthMismatchError(f"{slide_id}: {len(data)} bytes is shorter than the header")
    magic, version, n_tiles, dim, _reserved = HEADER.unpack_from(data)
    if magic != MAGIC:
        raise BadMagicError(f"{slide_id}: bad magic {magic!r}")
    if version != VERSION:
        raise BadVersionError(f"{slide_id}: unsupported version {version}")
    expected = HEADER.size + n_tiles * 8 + n_tiles * dim * 4
    if len(data) != expected:
        raise LengthMismatchError(f"{slide_id}: header declares {expected} bytes, file has {len(data)}")
    if expected_dim is not None and dim != expected_dim:
        raise DimensionMismatchError(f"{slide_id}: dim {dim} does not match profile dim {expected_dim}")
    off = HEADER.size
    coords = np.frombuffer(data, dtype="<u4", count=n_tiles * 2, offset=off).reshape(n_tiles, 2)
    values = np.frombuffer(data, dtype="<f4", count=n_tiles * dim, offset=off + n_tiles * 8)
    values = values.reshape(n_tiles, dim)
    if not np.isfinite(values).all():
        raise NonFiniteError(f"{slide_id}: payload contains non-finite values")
    if n_tiles < 1:
        raise LengthMismatchError(f"{slide_id}: matrix has no tiles")
    return EmbeddingMatrix(slide_id, coords.copy(), values.copy())


def write_embeddings(matrix: EmbeddingMatrix, root: str | Path) -> Path:
    """Write ``<root>/<slide_id>.pemb``. Non-finite values are rejected before anything is written."""
    data = encode_embeddings(matrix)
    path = Path(root) / f"{matrix.slide_id}.pemb"
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(data)
    return path


def read_embeddings(path: str | Path, expected_dim: int | None = None) -> EmbeddingMatrix:
    path = Path(path)
    return decode_embeddings(path.read_bytes(), path.stem, expected_dim)


# --- sets -------------------------------------------------------------------


def write_embedding_set(es: EmbeddingSet, root: str | Path) -> Path:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    lines = [f"#profile={es.profile.name}", f"#dim={es.profile.dim}", f"#checkpoint={es.checkpoint_tag}"]
    for sid in sorted(es.slides):
        write_embeddings(es.slides[sid], root / "slides")
        lines.append(f"{sid}\tslides/{sid}.pemb")
    (root / "set.tsv").write_text("\n".join(lines) + "\n")
    write_labels(es.labels, root / "labels.tsv")
    return root


def read_embedding_set(root: str | Path, labels_path: str | Path | None = None) -> EmbeddingSet:
    root = Path(root)
    manifest = root / "set.tsv"
    if not manifest.exists():
        raise InvalidInputError(f"missing set manifest: {manifest}")
    header: dict[str, str] = {}
    entries = []
    for n, line in enumerate(manifest.read_text().splitlines(), 1):
        if line.startswith("#"):
            key, _, value = line[1:].partition("=")
            header[key] = value
        elif line.strip():
            parts = line.split("\t")
            if len(parts) != 2:
                raise InvalidInputError(f"{manifest}:{n}: expected slide_id<TAB>relative_path")
            entries.append(parts)
    try:
        profile = get_profile(header["profile"], int(header["dim"]))
    except KeyError as exc:
        raise InvalidInputError(f"{manifest}: missing header {exc}") from None
    slides = {}
    for sid, rel in entries:
        m = read_embeddings(root / rel, expected_dim=profile.dim)
        slides[sid] = EmbeddingMatrix(sid, m.coords, m.values)
    labels = read_labels(labels_path or root / "labels.tsv")
    return EmbeddingSet(profile, header.get("checkpoint", ""), slides, labels)


def write_labels(labels: Mapping[str, int], path: str | Path) -> None:
    rows = [f"{sid}\t{labels[sid]}" for sid in sorted(labels)]
    Path(path).write_text("\n".join(rows) + ("\n" if rows else ""))


def read_labels(path: str | Path) -> dict[str, int]:
    path = Path(path)
    if not path.exists():
        raise InvalidInputError(f"missing label file: {path}")
    labels = {}
    for n, line in enumerate(path.read_text().splitlines(), 1):
        if not line.strip() or line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 2 or parts[1] not in ("0", "1"):
            raise InvalidInputError(f"{path}:{n}: expected slide_id<TAB>0|1")
        labels[parts[0]] = int(parts[1])
    return labels


# --- synthetic data ---------------------------------------------------------


def synth_embedding_dataset(
    n_slides: int,
    tiles_range: tuple[int, int],
    dim: int,
    signal_frac: float,
    effect_size: float,
    seed: int,
    checkpoint_tag: str = "synthetic",
) -> EmbeddingSet:
    """Balanced binary dataset with a planted signal.

    Every tile is standard normal. In positive slides a ``signal_frac``
    fraction of tiles is shifted by ``effect_size`` along one seeded unit
    direction. Labels, tile counts and background noise depend only on
    ``seed``, so sets that differ only in ``effect_size`` share everything
    else.
    """
    if not 0.0 <= signal_frac <= 1.0:
        raise InvalidInputError(f"signal_frac must lie in [0, 1], got {signal_frac}")
    if effect_size < 0:
        raise InvalidInputError(f"effect_size must be non-negative, got {effect_size}")
    lo, hi = tiles_range
    if not 1 <= lo <= hi:
        raise InvalidInputError(f"tiles_range must satisfy 1 <= lo <= hi, got {tiles_range}")

    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xE3B]))
    direction = rng.standard_normal(dim)
    direction /= np.linalg.norm(direction)
    labels_arr = np.zeros(n_slides, dtype=np.int64)
    labels_arr[: n_slides // 2] = 1
    labels_arr = rng.permutation(labels_arr)

    width = len(str(max(n_slides - 1, 0)))
    slides, labels = {}, {}
    for i in range(n_slides):
        sid = f"slide_{i:0{width}d}"
        n = int(rng.integers(lo, hi + 1))
        values = rng.standard_normal((n, dim))
        k = int(round(signal_frac * n))
        chosen = rng.permutation(n)[:k]
        if labels_arr[i] == 1:
            values[chosen] += effect_size * direction
        grid = int(np.ceil(np.sqrt(n)))
        idx = np.arange(n)
        coords = np.stack([(idx % grid) * 224, (idx // grid) * 224], axis=1)
        slides[sid] = EmbeddingMatrix(sid, coords, values.astype(np.float32))
        labels[sid] = int(labels_arr[i])
    return EmbeddingSet(EncoderProfile(f"synthetic-{dim}", dim), checkpoint_tag, slides, labels)


def shuffle_labels(es: EmbeddingSet, seed: int) -> EmbeddingSet:
    """Same embeddings with labels permuted across slides (a null dataset)."""
    ids = es.sample_ids
    y = np.array([es.labels[s] for s in ids])
    y = np.random.default_rng(np.random.SeedSequence([seed, 0x5F1])).permutation(y)
    return es.with_labels(dict(zip(ids, y.tolist())))
