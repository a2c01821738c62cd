"""Bit-exact sequence persistence and an importer for planar scan logs.

Sequences are stored in the DTSEQ1 binary format: a 6-byte magic, a
little-endian header (grid side length as u16, cell size in whole millimeters
as u32, frame count as u32, flags as u8 with bit 0 marking truth presence),
then per frame a visibility bit-plane, an occupancy bit-plane, the egomotion
delta as three 64-bit reals (x, y, theta), and, when flagged, a truth
bit-plane. Bit-planes are row-major, packed 8 cells per byte, most significant
bit first. Reading back a written sequence reproduces it bit for bit.
"""

from __future__ import annotations

import json
import math
import os
import struct
from dataclasses import dataclass

import numpy as np

from .geometry import GridSpec, ObservationGrid, Pose2, encode_observation, se2_relative
from .simulator import SequenceBatch

__all__ = [
    "MAGIC",
    "DatasetManifest",
    "write_sequence",
    "read_sequence",
    "write_dataset",
    "read_dataset",
    "import_scans",
]

MAGIC = b"DTSEQ1"
_HEADER = struct.Struct("<HIIB")
_POSE = struct.Struct("<3d")
MANIFEST_NAME = "manifest.json"


def _plane_bytes(m: int) -> int:
    return (m * m + 7) // 8


def _cell_size_mm(spec: GridSpec) -> int:
    mm = round(spec.cell_size * 1000.0)
    if mm < 1 or mm > 0xFFFFFFFF or mm / 1000.0 != spec.cell_size:
        raise ValueError(
            f"cell_size {spec.cell_size!r} is not a whole number of millimeters; "
            "the sequence format stores cell size as integer mm"
        )
    return mm


def _check_storable(spec: GridSpec) -> int:
    if spec.size_cells > 0xFFFF:
        raise ValueError(f"grid side {spec.size_cells} exceeds the format's u16 limit")
    if spec.max_range != spec.size_cells * spec.cell_size:
        raise ValueError(
            "the sequence format stores no range cap; only the default "
            "max_range (grid side length) round-trips"
        )
    return _cell_size_mm(spec)


def _pack_plane(grid: np.ndarray) -> bytes:
    return np.packbits(grid.astype(np.uint8).reshape(-1)).tobytes()


def _unpack_plane(buf: bytes, offset: int, m: int) -> np.ndarray:
    raw = np.frombuffer(buf, dtype=np.uint8, count=_plane_bytes(m), offset=offset)
    return np.unpackbits(raw, count=m * m).reshape(m, m)


def write_sequence(batch: SequenceBatch, path) -> None:
    """Serialize one sequence; ``read_sequence`` restores it bit-identically."""
    mm = _check_storable(batch.spec)
    m = batch.spec.size_cells
    flags = 1 if batch.truth_occ is not None else 0
    out = bytearray(MAGIC)
    out += _HEADER.pack(m, mm, batch.frames, flags)
    for f in range(batch.frames):
        obs = batch.observations[f]
        out += _pack_plane(obs.vis)
        out += _pack_plane(obs.occ)
        t = batch.rel_transforms[f]
        out += _POSE.pack(t.x, t.y, t.theta)
        if flags:
            out += _pack_plane(batch.truth_occ[f])
    with open(path, "wb") as fh:
        fh.write(out)


def _read_header(blob: bytes, path) -> tuple:
    if blob[: len(MAGIC)] != MAGIC:
        raise ValueError(f"{path}: bad magic, not a DTSEQ1 sequence")
    if len(blob) < len(MAGIC) + _HEADER.size:
        raise ValueError(f"{path}: truncated header")
    m, mm, frames, flags = _HEADER.unpack_from(blob, len(MAGIC))
    if flags not in (0, 1):
        raise ValueError(f"{path}: unknown flags byte {flags:#x}")
    if frames < 1:
        raise ValueError(f"{path}: frame count must be positive, got {frames}")
    spec = GridSpec(size_cells=m, cell_size=mm / 1000.0)
    return spec, frames, flags


def read_sequence(path) -> SequenceBatch:
    with open(path, "rb") as fh:
        blob = fh.read()
    spec, frames, flags = _read_header(blob, path)
    m = spec.size_cells
    nb = _plane_bytes(m)
    frame_size = 2 * nb + _POSE.size + (nb if flags else 0)
    expected = len(MAGIC) + _HEADER.size + frames * frame_size
    if len(blob) != expected:
        raise ValueError(
            f"{path}: expected {expected} bytes for {frames} frames, got {len(blob)}"
        )
    off = len(MAGIC) + _HEADER.size
    observations, transforms, truth = [], [], []
    for _ in range(frames):
        vis = _unpack_plane(blob, off, m)
        off += nb
        occ = _unpack_plane(blob, off, m)
        off += nb
        observations.append(ObservationGrid(vis=vis, occ=occ))
        transforms.append(Pose2(*_POSE.unpack_from(blob, off)))
        off += _POSE.size
        if flags:
            truth.append(_unpack_plane(blob, off, m))
            off += nb
    return SequenceBatch(
        spec=spec,
        observations=tuple(observations),
        rel_transforms=tuple(transforms),
        truth_occ=tuple(truth) if flags else None,
    )


# ------------------------------------------------------------------ manifests


@dataclass(frozen=True)
class DatasetManifest:
    """Index of a dataset directory: the shared grid geometry, frame rate,
    sequence files with their frame counts, and where the data came from.
    Synthetic datasets record their seed; imported ones carry none."""

    grid: GridSpec
    frame_rate: float
    files: tuple
    frame_counts: tuple
    provenance: str
    seed: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "files", tuple(self.files))
        object.__setattr__(self, "frame_counts", tuple(int(n) for n in self.frame_counts))
        if self.provenance not in ("synthetic", "imported"):
            raise ValueError(f"provenance must be synthetic or imported, got {self.provenance!r}")
        if self.provenance == "synthetic" and self.seed is None:
            raise ValueError("synthetic datasets must record their seed")
        if self.provenance == "imported" and self.seed is not None:
            raise ValueError("imported datasets carry no seed")
        if len(self.files) != len(self.frame_counts):
            raise ValueError("files and frame_counts lengths differ")
        if not self.files:
            raise ValueError("a dataset needs at least one sequence")
        if not (self.frame_rate > 0.0 and math.isfinite(self.frame_rate)):
            raise ValueError(f"frame_rate must be positive, got {self.frame_rate}")

    @property
    def sequence_count(self) -> int:
        return len(self.files)

    def save(self, dirpath) -> None:
        doc = {
            "grid": {"size_cells": self.grid.size_cells, "cell_size": self.grid.cell_size},
            "frame_rate": self.frame_rate,
            "sequence_count": self.sequence_count,
            "files": list(self.files),
            "frame_counts": list(self.frame_counts),
            "provenance": self.provenance,
        }
        if self.seed is not None:
            doc["seed"] = self.seed
        with open(os.path.join(dirpath, MANIFEST_NAME), "w") as fh:
            json.dump(doc, fh, indent=2, sort_keys=True)
            fh.write("\n")

    @classmethod
    def load(cls, dirpath) -> "DatasetManifest":
        with open(os.path.join(dirpath, MANIFEST_NAME)) as fh:
            doc = json.load(fh)
        grid = GridSpec(
            size_cells=doc["grid"]["size_cells"], cell_size=doc["grid"]["cell_size"]
        )
        manifest = cls(
            grid=grid,
            frame_rate=doc["frame_rate"],
            files=tuple(doc["files"]),
            frame_counts=tuple(doc["frame_counts"]),
            provenance=doc["provenance"],
            seed=doc.get("seed"),
        )
        if doc["sequence_count"] != manifest.sequence_count:
            raise ValueError("manifest sequence_count disagrees with its file list")
        return manifest

    def verify(self, dirpath) -> None:
        """Check every referenced file exists and its header matches the
        declared grid and frame count."""
        for name, count in zip(self.files, self.frame_counts):
            path = os.path.join(dirpath, name)
            if not os.path.isfile(path):
                raise ValueError(f"manifest references missing file {name}")
            with open(path, "rb") as fh:
                head = fh.read(len(MAGIC) + _HEADER.size)
            spec, frames, _ = _read_header(head, path)
            if spec != self.grid:
                raise ValueError(f"{name}: grid {spec} does not match manifest {self.grid}")
            if frames != count:
                raise ValueError(f"{name}: {frames} frames, manifest declares {count}")


def write_dataset(dirpath, batches, frame_rate: float, provenance: str = "synthetic", seed: int | None = None) -> DatasetManifest:
    batches = list(batches)
    if not batches:
        raise ValueError("no sequences to write")
    spec = batches[0].spec
    for b in batches:
        if b.spec != spec:
            raise ValueError("all sequences in a dataset must share one GridSpec")
    os.makedirs(dirpath, exist_ok=True)
    files = []
    for i, b in enumerate(batches):
        name = f"seq_{i:05d}.dtseq"
        write_sequence(b, os.path.join(dirpath, name))
        files.append(name)
    manifest = DatasetManifest(
        grid=spec,
        frame_rate=frame_rate,
        files=tuple(files),
        frame_counts=tuple(b.frames for b in batches),
        provenance=provenance,
        seed=seed,
    )
    manifest.save(dirpath)
    return manifest


def read_dataset(dirpath) -> tuple:
    """Load a dataset directory: (manifest, list of sequences)."""
    manifest = DatasetManifest.load(dirpath)
    manifest.verify(dirpath)
    return manifest, [read_sequence(os.path.join(dirpath, n)) for n in manifest.files]


# ------------------------------------------------------------------- importer


def _parse_rows(path) -> list:
    """Numeric rows from a delimited text file. Commas and whitespace both
    separate fields; blank lines and '#' comments are skipped."""
    rows = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            text = line.split("#", 1)[0].replace(",", " ").strip()
            if not text:
                continue
            try:
                rows.append((lineno, [float(tok) for tok in text.split()]))
            except ValueError:
                raise ValueError(f"{path}:{lineno}: malformed row {line.strip()!r}") from None
    return rows


def _check_increasing(times, path) -> None:
    for a, b in zip(times, times[1:]):
        if not b > a:
            raise ValueError(f"{path}: timestamps must be strictly increasing ({a} then {b})")


def import_scans(
    scan_file,
    odom_file,
    spec: GridSpec,
    frame_period: float | None = None,
    tolerance: float | None = None,
) -> SequenceBatch:
    """Build a sequence from planar scan and odometry logs.

    Scan rows are ``timestamp bearing range bearing range ...`` (a bare
    timestamp means a frame with no returns); odometry rows are ``timestamp x
    y theta`` in a fixed world frame. Each scan is paired with the odometry
    pose nearest in time; pairs further apart than the tolerance (half the
    frame period unless given) are an error. Egomotion transforms come from
    consecutive paired poses; no ground truth is attached.
    """
    scan_rows = _parse_rows(scan_file)
    odom_rows = _parse_rows(odom_file)
    if not scan_rows:
        raise ValueError(f"{scan_file}: no scan rows")
    if not odom_rows:
        raise ValueError(f"{odom_file}: no odometry rows")
    scans = []
    for lineno, vals in scan_rows:
        if len(vals) % 2 != 1:
            raise ValueError(
                f"{scan_file}:{lineno}: expected a timestamp then (bearing, range) pairs"
            )
        beams = list(zip(vals[1::2], vals[2::2]))
        scans.append((vals[0], beams))
    poses_t, poses = [], []
    for lineno, vals in odom_rows:
        if len(vals) != 4:
            raise ValueError(f"{odom_file}:{lineno}: expected timestamp, x, y, theta")
        poses_t.append(vals[0])
        poses.append(Pose2(x=vals[1], y=vals[2], theta=vals[3]))
    scan_t = [t for t, _ in scans]
    _check_increasing(scan_t, scan_file)
    _check_increasing(poses_t, odom_file)

    if frame_period is None and len(scan_t) >= 2:
        frame_period = float(np.median(np.diff(scan_t)))
    if tolerance is None:
        tolerance = frame_period / 2.0 if frame_period else math.inf

    odom_t = np.asarray(poses_t)
    matched = []
    for t in scan_t:
        i = int(np.searchsorted(odom_t, t))
        best = min(
            (j for j in (i - 1, i) if 0 <= j < len(odom_t)),
            key=lambda j: abs(odom_t[j] - t),
        )
        if abs(odom_t[best] - t) > tolerance:
            raise ValueError(
                f"scan at t={t} has no odometry within {tolerance} "
                f"(nearest at t={poses_t[best]})"
            )
        matched.append(poses[best])

    observations = tuple(encode_observation(beams, spec) for _, beams in scans)
    transforms = [Pose2.identity()]
    for prev, cur in zip(matched, matched[1:]):
        transforms.append(se2_relative(prev, cur))
    return SequenceBatch(
        spec=spec,
        observations=observations,
        rel_transforms=tuple(transforms),
        truth_occ=None,
    )
