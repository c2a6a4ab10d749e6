"""
Profile export.

CSV: one row per cell, columns (freq_hz | range_m, angle_deg, value).
`export_profiles` writes a whole sequence in both formats plus an index.

Binary, all little-endian:

    offset  size  field
    0       4     magic b"SSTP"
    4       2     version (uint16, currently 1)
    6       2     kind (uint16: 0 = frequency x angle, 1 = range x angle)
    8       4     rows (uint32)
    12      4     cols (uint32)
    16      4*rows     row axis (float32)
    ...     4*cols     angle axis (float32)
    ...     4*rows*cols values (float32, row-major)
"""

import csv
import logging
import struct
from enum import IntEnum
from pathlib import Path
from typing import Sequence

import numpy as np

from SST.audible import MusicProfile
from SST.errors import CheckpointVersionError, DataError
from SST.inaudible import RangeAoAProfile

logger = logging.getLogger(__name__)

MAGIC = b"SSTP"
VERSION = 1
HEADER = struct.Struct("<4sHHII")


class ProfileKind(IntEnum):
    FREQUENCY = 0
    RANGE = 1


Profile = MusicProfile | RangeAoAProfile


def _layout(profile: Profile) -> tuple[ProfileKind, str, np.ndarray]:
    match profile:
        case MusicProfile():
            return ProfileKind.FREQUENCY, "freq_hz", profile.freq_axis
        case RangeAoAProfile():
            return ProfileKind.RANGE, "range_m", profile.range_axis
        case _:
            raise TypeError(f"not a profile: {type(profile).__name__}")


def write_profile_csv(profile: Profile, path: str | Path) -> None:
    _, row_name, rows = _layout(profile)
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow([row_name, "angle_deg", "value"])
        for i, row in enumerate(rows):
            for j, angle in enumerate(profile.angle_axis):
                value = profile.values[i, j]
                writer.writerow([f"{row:g}", f"{angle:g}", f"{value:.9g}"])


def write_profile_binary(profile: Profile, path: str | Path) -> None:
    kind, _, rows = _layout(profile)
    values = np.asarray(profile.values, dtype="<f4")
    with open(path, "wb") as f:
        f.write(HEADER.pack(MAGIC, VERSION, kind, *values.shape))
        f.write(np.asarray(rows, dtype="<f4").tobytes())
        f.write(np.asarray(profile.angle_axis, dtype="<f4").tobytes())
        f.write(values.tobytes(order="C"))


def read_profile_binary(path: str | Path) -> Profile:
    """Inverse of `write_profile_binary`; axes come back as float32 values."""
    data = Path(path).read_bytes()
    if len(data) < HEADER.size:
        raise DataError(f"{path}: truncated profile header")
    magic, version, kind, rows, cols = HEADER.unpack_from(data)
    if magic != MAGIC:
        raise DataError(f"{path}: not a profile file")
    if version != VERSION:
        raise CheckpointVersionError(f"{path}: profile version {version} unsupported")
    expected = HEADER.size + 4 * (rows + cols + rows * cols)
    if len(data) != expected:
        raise DataError(f"{path}: expected {expected} bytes, found {len(data)}")

    body = np.frombuffer(data, dtype="<f4", offset=HEADER.size).astype(np.float64)
    row_axis = body[:rows]
    angle_axis = body[rows : rows + cols]
    values = body[rows + cols :].reshape(rows, cols)
    match ProfileKind(kind):
        case ProfileKind.FREQUENCY:
            return MusicProfile(values, row_axis, angle_axis)
        case ProfileKind.RANGE:
            return RangeAoAProfile(values, row_axis, angle_axis)


def export_profiles(
    profiles: Sequence[Profile], out_dir: str | Path, stem: str
) -> list[Path]:
    """
    Write every profile as `<stem>_<nnnn>.csv` and `<stem>_<nnnn>.bin`.

    Dropped range-angle periods are skipped. `<stem>_index.csv` lists
    the written profiles with their timestamp (and speaker and period
    for range-angle profiles). Returns the index path first, then the
    profile files in order.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    index = out / f"{stem}_index.csv"
    written = [index]
    with open(index, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(["name", "time_s", "speaker", "period"])
        for i, profile in enumerate(profiles):
            match profile:
                case RangeAoAProfile(dropped=True):
                    continue
                case RangeAoAProfile():
                    extra = [profile.speaker, profile.period_index]
                case _:
                    extra = ["", ""]
            name = f"{stem}_{i:04d}"
            write_profile_csv(profile, out / f"{name}.csv")
            write_profile_binary(profile, out / f"{name}.bin")
            written += [out / f"{name}.csv", out / f"{name}.bin"]
            writer.writerow([name, f"{profile.time_s:.4f}", *extra])
    logger.info("exported %d %s profiles to %s", (len(written) - 1) // 2, stem, out)
    return written
