"""fMRI preprocessing chain and functional ROI voxel partitioning.

All operations are pure functions over immutable inputs: z-scoring per
vertex, hemodynamic shifting by whole frames, run averaging, packing the
flattened voxel vector onto a 2-D surface grid, and gathering voxel groups
for the early / ventral / dorsal streams from a named ROI scheme.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import (
    DuplicateTarget,
    EmptyList,
    IndexOutOfRange,
    IOFailure,
    MissingLabel,
    NonIntegerShift,
    OverlappingIndices,
    ShapeMismatch,
    ShiftExceedsRun,
    TargetOutOfGrid,
    UnknownScheme,
)

EARLY_LABELS = ("V1", "V2", "V3", "V4")

SCHEME_A_DORSAL = (
    "V3A", "V3B", "V6", "V6A", "V7", "IPS1", "LO1", "LO2", "LO3",
    "FST", "MT", "MST", "V3CD", "V4t", "PH", "IP0",
)
SCHEME_A_VENTRAL = (
    "FFC", "PIT", "V8", "VMV1", "VMV2", "VMV3", "VVC",
    "PHA1", "PHA2", "PHA3", "TE2p",
)

SCHEME_B_DORSAL = (
    "V3A", "V3B", "V6", "V6A", "V7", "IPS1", "FST", "MT", "MST",
    "V3CD", "V4t", "IP0",
)
SCHEME_B_VENTRAL = (
    "FFC", "PIT", "V8", "VMV1", "VMV2", "VMV3", "VVC",
    "PHA1", "PHA2", "PHA3", "TE2p", "LO1", "LO2", "LO3", "PH",
)

SCHEME_LABELS = {
    "A": {"early": EARLY_LABELS, "ventral": SCHEME_A_VENTRAL, "dorsal": SCHEME_A_DORSAL},
    "B": {"early": EARLY_LABELS, "ventral": SCHEME_B_VENTRAL, "dorsal": SCHEME_B_DORSAL},
}

STREAMS = ("early", "ventral", "dorsal")

# every label either scheme can ask for; used to build synthetic atlases
ALL_ATLAS_LABELS = EARLY_LABELS + SCHEME_A_DORSAL + SCHEME_A_VENTRAL


@dataclass(frozen=True)
class RoiScheme:
    """Named partition of atlas region labels into stream groups.

    Label tuples keep the scheme's canonical order; group voxel indices
    are the order-preserving concatenation of per-region index lists.
    """

    scheme_id: str
    early_labels: tuple[str, ...]
    ventral_labels: tuple[str, ...]
    dorsal_labels: tuple[str, ...]
    index_map: dict[str, tuple[int, ...]]

    def labels_for(self, stream: str) -> tuple[str, ...]:
        if stream not in STREAMS:
            raise UnknownScheme(f"unknown stream {stream!r}")
        return getattr(self, f"{stream}_labels")

    def group_indices(self, stream: str) -> np.ndarray:
        idx: list[int] = []
        for label in self.labels_for(stream):
            idx.extend(self.index_map[label])
        return np.asarray(idx, dtype=np.int64)

    def validate(self, n_voxels: int | None = None) -> None:
        groups = (self.early_labels, self.ventral_labels, self.dorsal_labels)
        seen_labels: set[str] = set()
        for group in groups:
            for label in group:
                if label in seen_labels:
                    raise OverlappingIndices(f"label {label} in more than one group")
                seen_labels.add(label)
                if label not in self.index_map or len(self.index_map[label]) == 0:
                    raise MissingLabel(f"region {label} has no voxel indices")
        seen_idx: set[int] = set()
        for label in seen_labels:
            for i in self.index_map[label]:
                if i in seen_idx:
                    raise OverlappingIndices(f"voxel index {i} assigned twice")
                seen_idx.add(i)
                if i < 0 or (n_voxels is not None and i >= n_voxels):
                    raise IndexOutOfRange(f"voxel index {i} outside [0, {n_voxels})")


def load_roi_scheme(scheme_id: str, atlas_table: dict[str, list[int]],
                    n_voxels: int | None = None) -> RoiScheme:
    """Build scheme A or B from an atlas table mapping label -> voxel indices."""
    if scheme_id not in SCHEME_LABELS:
        raise UnknownScheme(f"scheme_id must be A or B, got {scheme_id!r}")
    wanted = SCHEME_LABELS[scheme_id]
    index_map: dict[str, tuple[int, ...]] = {}
    for group in STREAMS:
        for label in wanted[group]:
            if label not in atlas_table:
                raise MissingLabel(f"atlas table lacks region {label}")
            index_map[label] = tuple(int(i) for i in atlas_table[label])
    scheme = RoiScheme(
        scheme_id=scheme_id,
        early_labels=tuple(wanted["early"]),
        ventral_labels=tuple(wanted["ventral"]),
        dorsal_labels=tuple(wanted["dorsal"]),
        index_map=index_map,
    )
    scheme.validate(n_voxels)
    return scheme


def read_atlas_table(path: str | Path) -> dict[str, list[int]]:
    """Parse an atlas table: one ``LABEL idx idx ...`` line per region."""
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise IOFailure(f"cannot read atlas table {path}: {exc}") from exc
    table: dict[str, list[int]] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        parts = stripped.split()
        label, indices = parts[0], parts[1:]
        try:
            table[label] = [int(i) for i in indices]
        except ValueError as exc:
            raise IOFailure(f"atlas table line {lineno}: bad index") from exc
    return table


def write_atlas_table(path: str | Path, table: dict[str, list[int]]) -> None:
    lines = [f"{label} " + " ".join(str(i) for i in idx) for label, idx in table.items()]
    Path(path).write_text("\n".join(lines) + "\n")


def partition_voxels(x: np.ndarray, scheme: RoiScheme) -> dict[str, np.ndarray]:
    """Gather the early/ventral/dorsal voxel columns of a (..., V) array.

    Outputs are copies; column i of a group equals the input column at the
    i-th entry of that group's concatenated index list.
    """
    x = np.asarray(x)
    n_voxels = x.shape[-1]
    out: dict[str, np.ndarray] = {}
    for stream in STREAMS:
        idx = scheme.group_indices(stream)
        if idx.size and (idx.min() < 0 or idx.max() >= n_voxels):
            raise IndexOutOfRange(
                f"{stream} indices exceed voxel axis of length {n_voxels}"
            )
        out[stream] = x[..., idx].copy()
    return out


@dataclass(eq=False)
class RawRun:
    """One fMRI run: time x vertex BOLD values at a fixed TR."""

    volumes: np.ndarray
    tr_seconds: float
    subject_id: int

    def __post_init__(self):
        self.volumes = np.asarray(self.volumes, dtype=np.float64)
        if self.volumes.ndim != 2 or self.volumes.shape[0] < 1:
            raise ShapeMismatch("volumes must be a time x vertex array, time >= 1")


@dataclass(eq=False)
class FmriSurfaceSample:
    """Preprocessed record: flattened voxels plus their packed surface image."""

    voxels: np.ndarray
    surface_image: np.ndarray
    subject_id: int
    stimulus_id: int


def z_transform(run: RawRun, eps: float = 1e-8) -> RawRun:
    """Per-vertex temporal z-scoring with population std; eps guards flat series."""
    mean = run.volumes.mean(axis=0, keepdims=True)
    std = run.volumes.std(axis=0, keepdims=True)
    normalized = (run.volumes - mean) / np.maximum(std, eps)
    return RawRun(normalized, run.tr_seconds, run.subject_id)


def hemodynamic_shift(run: RawRun, delay_seconds: float) -> RawRun:
    """Advance the series by delay/TR whole frames, dropping the sourceless tail."""
    if delay_seconds < 0:
        raise NonIntegerShift("delay must be nonnegative")
    frames = delay_seconds / run.tr_seconds
    rounded = round(frames)
    if not math.isclose(frames, rounded, rel_tol=0, abs_tol=1e-9):
        raise NonIntegerShift(
            f"delay {delay_seconds}s is not a whole number of {run.tr_seconds}s frames"
        )
    k = int(rounded)
    if k >= run.volumes.shape[0]:
        raise ShiftExceedsRun(f"shift of {k} frames empties a {run.volumes.shape[0]}-frame run")
    return RawRun(run.volumes[k:].copy(), run.tr_seconds, run.subject_id)


def average_runs(runs: list[RawRun]) -> RawRun:
    """Element-wise mean of repeated runs of the same stimulus."""
    if not runs:
        raise EmptyList("no runs to average")
    first = runs[0]
    for run in runs[1:]:
        if run.volumes.shape != first.volumes.shape:
            raise ShapeMismatch("runs differ in time or vertex count")
        if run.subject_id != first.subject_id:
            raise ShapeMismatch("runs belong to different subjects")
    stacked = np.stack([run.volumes for run in runs])
    return RawRun(stacked.mean(axis=0), first.tr_seconds, first.subject_id)


def _check_layout(layout: np.ndarray, h: int, w: int) -> np.ndarray:
    layout = np.asarray(layout, dtype=np.int64)
    if layout.ndim != 2 or layout.shape[1] != 2:
        raise ShapeMismatch("layout must be a (V, 2) array of row/col targets")
    rows, cols = layout[:, 0], layout[:, 1]
    if rows.size and (rows.min() < 0 or rows.max() >= h or cols.min() < 0 or cols.max() >= w):
        raise TargetOutOfGrid(f"layout targets outside {h}x{w} grid")
    flat = rows * w + cols
    if np.unique(flat).size != flat.size:
        raise DuplicateTarget("layout maps two voxels to the same cell")
    return layout


def pack_surface(voxels: np.ndarray, layout: np.ndarray, h: int, w: int) -> np.ndarray:
    """Scatter a length-V voxel vector into an h x w image, zeros elsewhere."""
    voxels = np.asarray(voxels, dtype=np.float64)
    layout = _check_layout(layout, h, w)
    if voxels.shape != (layout.shape[0],):
        raise ShapeMismatch(
            f"expected {layout.shape[0]} voxels, got shape {voxels.shape}"
        )
    image = np.zeros((h, w), dtype=np.float64)
    image[layout[:, 0], layout[:, 1]] = voxels
    return image


def unpack_surface(image: np.ndarray, layout: np.ndarray) -> np.ndarray:
    """Exact inverse of pack_surface on the packed cells."""
    image = np.asarray(image)
    layout = _check_layout(layout, image.shape[0], image.shape[1])
    return image[layout[:, 0], layout[:, 1]].copy()


def default_layout(n_voxels: int, h: int, w: int) -> np.ndarray:
    """Row-major packing of voxel i at (i // w, i % w)."""
    if n_voxels > h * w:
        raise TargetOutOfGrid(f"{n_voxels} voxels exceed {h}x{w} grid")
    idx = np.arange(n_voxels, dtype=np.int64)
    return np.stack([idx // w, idx % w], axis=1)


def read_layout(path: str | Path) -> np.ndarray:
    """Parse a vertex layout file: one ``voxel row col`` line per voxel."""
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise IOFailure(f"cannot read layout {path}: {exc}") from exc
    entries: dict[int, tuple[int, int]] = {}
    for line in text.splitlines():
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        i, r, c = (int(p) for p in stripped.split())
        entries[i] = (r, c)
    layout = np.zeros((len(entries), 2), dtype=np.int64)
    for i in range(len(entries)):
        if i not in entries:
            raise IOFailure(f"layout file skips voxel {i}")
        layout[i] = entries[i]
    return layout


def write_layout(path: str | Path, layout: np.ndarray) -> None:
    lines = [f"{i} {r} {c}" for i, (r, c) in enumerate(np.asarray(layout))]
    Path(path).write_text("\n".join(lines) + "\n")
