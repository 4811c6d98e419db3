"""Hardcoded, organ-balanced pseudo-epoch schedules.

The corpus is split into organ-stratified folds. Pseudo-epoch ``e`` draws
``tiles_per_epoch`` tiles from fold ``e % n_folds``; the tile budget is split
across organs by water-filling so rare organs are not swamped by common ones.
Each manifest is a fixed, pre-shuffled list of ``(slide_id, tile_index)``.
"""

from __future__ import annotations

import hashlib
import math
import warnings
from collections import defaultdict
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .errors import ChecksumError, InvalidConfigError, InvalidInputError

IMAGENET_SIZE = 1_281_167


@dataclass(frozen=True)
class SlideEntry:
    slide_id: str
    organ: str
    n_tiles: int


@dataclass(frozen=True)
class ScheduleConfig:
    tiles_per_epoch: int
    master_seed: int = 0
    n_pseudo_epochs: int = 50
    n_folds: int = 5
    imagenet_size: int = IMAGENET_SIZE
    # max draws per slide per epoch, as a multiple of its tile count; None = unbounded
    replacement_cap: float | None = 4.0

    def __post_init__(self):
        if self.tiles_per_epoch < 1:
            raise InvalidConfigError(f"tiles_per_epoch must be positive, got {self.tiles_per_epoch}")
        if self.n_folds < 1 or self.n_pseudo_epochs < 0:
            raise InvalidConfigError("n_folds must be >= 1 and n_pseudo_epochs >= 0")
        if self.imagenet_size < 1:
            raise InvalidConfigError(f"imagenet_size must be positive, got {self.imagenet_size}")
        if self.replacement_cap is not None and self.replacement_cap < 1:
            raise InvalidConfigError(f"replacement_cap must be >= 1, got {self.replacement_cap}")
        if self.n_pseudo_epochs % self.n_folds:
            warnings.warn(
                f"n_pseudo_epochs={self.n_pseudo_epochs} is not a multiple of n_folds={self.n_folds}; "
                "folds will be visited unevenly",
                stacklevel=3,
            )


@dataclass(frozen=True)
class PseudoEpochManifest:
    epoch_index: int
    fold_index: int
    seed: int
    slide_ids: tuple[str, ...]
    tile_indices: np.ndarray

    def __len__(self) -> int:
        return len(self.slide_ids)

    @property
    def entries(self) -> list[tuple[str, int]]:
        return list(zip(self.slide_ids, self.tile_indices.tolist()))

    def body(self) -> str:
        return "".join(f"{s}\t{t}\n" for s, t in zip(self.slide_ids, self.tile_indices.tolist()))

    @property
    def checksum(self) -> str:
        return hashlib.sha256(self.body().encode()).hexdigest()

    def to_text(self) -> str:
        body = self.body()
        digest = hashlib.sha256(body.encode()).hexdigest()
        header = (
            f"#pseudo_epoch={self.epoch_index} fold={self.fold_index} n={len(self)} "
            f"seed={self.seed} checksum={digest}\n"
        )
        return header + body


@dataclass(frozen=True)
class ScheduleStats:
    imagenet_epochs_per_pseudo_epoch: float
    total_passes_through_corpus: float
    optimization_steps: int
    steps_per_pseudo_epoch: int
    total_tiles: int


# --- folds ------------------------------------------------------------------


def partition_slides(corpus: Sequence[SlideEntry], n_folds: int, master_seed: int) -> list[list[str]]:
    """Organ-stratified fold assignment.

    Slides are grouped by organ, shuffled within each organ, and dealt
    round-robin over the folds with one running counter, so both the fold
    sizes and each organ's per-fold counts differ by at most one.
    """
    if not corpus:
        raise InvalidInputError("corpus is empty")
    if n_folds < 1 or n_folds > len(corpus):
        raise InvalidConfigError(f"n_folds={n_folds} must be between 1 and the corpus size {len(corpus)}")
    _check_unique(corpus)
    rng = np.random.default_rng(np.random.SeedSequence([master_seed, 0x5EED]))
    by_organ = _group_by_organ(corpus)
    fold_order = rng.permutation(n_folds)
    folds: list[list[str]] = [[] for _ in range(n_folds)]
    k = 0
    for organ in sorted(by_organ):
        ids = sorted(s.slide_id for s in by_organ[organ])
        for i in rng.permutation(len(ids)):
            folds[fold_order[k % n_folds]].append(ids[i])
            k += 1
    return [sorted(f) for f in folds]


# --- quotas -----------------------------------------------------------------


def water_fill(capacities: Mapping[str, float | None], total: int) -> dict[str, int]:
    """Split ``total`` as evenly as possible subject to per-key capacities.

    Keys whose capacity is below the current equal share are pinned at their
    capacity and the surplus is re-divided among the rest until nothing else
    saturates. The uncapped remainder is split with largest-remainder
    rounding; equal remainders go to keys in sorted order. ``None`` means
    unbounded capacity.
    """
    if total < 0:
        raise InvalidInputError(f"total must be non-negative, got {total}")
    keys = sorted(capacities)
    if not keys:
        raise InvalidInputError("no keys to allocate over")
    cap = {k: (math.inf if capacities[k] is None else math.floor(capacities[k])) for k in keys}
    if sum(cap.values()) < total:
        raise InvalidInputError(f"total capacity {sum(cap.values())} cannot supply {total}")

    quotas: dict[str, int] = {}
    active = list(keys)
    remaining = total
    while active:
        share = remaining / len(active)
        pinned = [k for k in active if cap[k] <= share]
        if not pinned:
            break
        for k in pinned:
            quotas[k] = int(cap[k])
            remaining -= int(cap[k])
        active = [k for k in active if k not in quotas]

    if active:
        base, extra = divmod(remaining, len(active))
        for i, k in enumerate(active):
            quotas[k] = base + (1 if i < extra else 0)
    return {k: quotas[k] for k in keys}


def organ_quotas(
    fold: Sequence[SlideEntry], tiles_per_epoch: int, replacement_cap: float | None = 4.0
) -> dict[str, int]:
    """Per-organ tile budget for one pseudo-epoch drawn from ``fold``."""
    if not fold:
        raise InvalidInputError("fold is empty")
    by_organ = _group_by_organ(fold)
    if sum(s.n_tiles for s in fold) == 0:
        raise InvalidInputError("fold has zero tiles")
    caps = {}
    for organ, slides in by_organ.items():
        n = sum(s.n_tiles for s in slides)
        caps[organ] = 0 if n == 0 else (None if replacement_cap is None else replacement_cap * n)
    return water_fill(caps, tiles_per_epoch)


# --- compilation ------------------------------------------------------------


def _epoch_seed(master_seed: int, epoch: int) -> int:
    return int(np.random.SeedSequence([master_seed, epoch]).generate_state(1, np.uint64)[0])


def compile_epoch(corpus: Sequence[SlideEntry], config: ScheduleConfig, epoch: int,
                  folds: list[list[str]] | None = None) -> PseudoEpochManifest:
    """Build the manifest of a single pseudo-epoch.

    Epochs are independent of one another, so they may be compiled in any
    order or in parallel and still come out identical.
    """
    if folds is None:
        folds = partition_slides(corpus, config.n_folds, config.master_seed)
    fold_index = epoch % config.n_folds
    members = set(folds[fold_index])
    fold = [s for s in corpus if s.slide_id in members]
    quotas = organ_quotas(fold, config.tiles_per_epoch, config.replacement_cap)

    seed = _epoch_seed(config.master_seed, epoch)
    rng = np.random.default_rng(seed)
    slide_col: list[str] = []
    tile_col: list[np.ndarray] = []
    by_organ = _group_by_organ(fold)
    for organ in sorted(by_organ):
        slides = sorted((s for s in by_organ[organ] if s.n_tiles > 0), key=lambda s: s.slide_id)
        if not slides:
            continue
        caps = {
            s.slide_id: None if config.replacement_cap is None else config.replacement_cap * s.n_tiles
            for s in slides
        }
        per_slide = water_fill(caps, quotas[organ])
        for s in slides:
            k = per_slide[s.slide_id]
            if k == 0:
                continue
            tile_col.append(_draw_tiles(rng, s.n_tiles, k))
            slide_col.extend([s.slide_id] * k)

    tiles = np.concatenate(tile_col) if tile_col else np.zeros(0, dtype=np.int64)
    order = rng.permutation(len(tiles))
    return PseudoEpochManifest(
        epoch_index=epoch,
        fold_index=fold_index,
        seed=seed,
        slide_ids=tuple(slide_col[i] for i in order),
        tile_indices=tiles[order].astype(np.int64),
    )


def _draw_tiles(rng: np.random.Generator, n_tiles: int, k: int) -> np.ndarray:
    # whole passes without replacement first, the remainder with replacement
    first = rng.permutation(n_tiles)[: min(k, n_tiles)]
    if k <= n_tiles:
        return first
    return np.concatenate([first, rng.integers(0, n_tiles, size=k - n_tiles)])


def compile_schedule(corpus: Sequence[SlideEntry], config: ScheduleConfig) -> list[PseudoEpochManifest]:
    n_organs = len({s.organ for s in corpus})
    if config.tiles_per_epoch < n_organs:
        raise InvalidConfigError(
            f"tiles_per_epoch={config.tiles_per_epoch} is smaller than the number of organs ({n_organs})"
        )
    folds = partition_slides(corpus, config.n_folds, config.master_seed)
    return [compile_epoch(corpus, config, e, folds) for e in range(config.n_pseudo_epochs)]


def schedule_stats(config: ScheduleConfig, effective_batch: int) -> ScheduleStats:
    if effective_batch < 1:
        raise InvalidConfigError(f"effective_batch must be positive, got {effective_batch}")
    total_tiles = config.n_pseudo_epochs * config.tiles_per_epoch
    return ScheduleStats(
        imagenet_epochs_per_pseudo_epoch=config.tiles_per_epoch / config.imagenet_size,
        total_passes_through_corpus=config.n_pseudo_epochs / config.n_folds,
        optimization_steps=total_tiles // effective_batch,
        steps_per_pseudo_epoch=config.tiles_per_epoch // effective_batch,
        total_tiles=total_tiles,
    )


# --- files ------------------------------------------------------------------


def manifest_filename(epoch: int) -> str:
    return f"pseudo_epoch_{epoch:04d}.tsv"


def write_manifest(manifest: PseudoEpochManifest, out_dir: str | Path) -> Path:
    path = Path(out_dir) / manifest_filename(manifest.epoch_index)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(manifest.to_text().encode())
    return path


def read_manifest(path: str | Path) -> PseudoEpochManifest:
    text = Path(path).read_bytes().decode()
    header, _, body = text.partition("\n")
    if not header.startswith("#"):
        raise InvalidInputError(f"{path}: missing manifest header")
    fields = dict(item.split("=", 1) for item in header[1:].split())
    try:
        epoch, fold, n, seed = (int(fields[k]) for k in ("pseudo_epoch", "fold", "n", "seed"))
        expected = fields["checksum"]
    except (KeyError, ValueError) as exc:
        raise InvalidInputError(f"{path}: malformed manifest header") from exc
    if hashlib.sha256(body.encode()).hexdigest() != expected:
        raise ChecksumError(f"{path}: checksum mismatch")
    slides, tiles = [], []
    for line in body.splitlines():
        s, t = line.split("\t")
        slides.append(s)
        tiles.append(int(t))
    if len(slides) != n:
        raise InvalidInputError(f"{path}: header says n={n} but {len(slides)} entries found")
    return PseudoEpochManifest(epoch, fold, seed, tuple(slides), np.asarray(tiles, dtype=np.int64))


def read_corpus(path: str | Path) -> list[SlideEntry]:
    lines = Path(path).read_text().splitlines()
    if not lines or lines[0].split("\t") != ["slide_id", "organ", "n_tiles"]:
        raise InvalidInputError(f"{path}: expected header slide_id<TAB>organ<TAB>n_tiles")
    corpus = []
    for n, line in enumerate(lines[1:], 2):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 3 or not parts[1]:
            raise InvalidInputError(f"{path}:{n}: expected three columns with a non-empty organ")
        try:
            n_tiles = int(parts[2])
        except ValueError:
            raise InvalidInputError(f"{path}:{n}: n_tiles is not an integer") from None
        if n_tiles < 0:
            raise InvalidInputError(f"{path}:{n}: n_tiles must be non-negative")
        corpus.append(SlideEntry(parts[0], parts[1], n_tiles))
    _check_unique(corpus)
    return corpus


def write_corpus(corpus: Sequence[SlideEntry], path: str | Path) -> None:
    rows = ["slide_id\torgan\tn_tiles"] + [f"{s.slide_id}\t{s.organ}\t{s.n_tiles}" for s in corpus]
    Path(path).write_text("\n".join(rows) + "\n")


def _group_by_organ(slides: Sequence[SlideEntry]) -> dict[str, list[SlideEntry]]:
    groups: dict[str, list[SlideEntry]] = defaultdict(list)
    for s in slides:
        if not s.organ:
            raise InvalidInputError(f"slide {s.slide_id!r} has an empty organ")
        groups[s.organ].append(s)
    return dict(groups)


def _check_unique(corpus: Sequence[SlideEntry]) -> None:
    seen = set()
    for s in corpus:
        if s.slide_id in seen:
            raise InvalidInputError(f"duplicate slide_id {s.slide_id!r}")
        seen.add(s.slide_id)
