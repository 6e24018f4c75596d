"""
Util functions
"""

from __future__ import annotations

import csv
import datetime
import json
import os
import re
from dataclasses import dataclass, field
from logging import getLogger
from pathlib import Path
from typing import TYPE_CHECKING, Any, Sequence

import numpy as np

from .errors import InputError
from .helper import _jsonable

if TYPE_CHECKING:
    from .dynamics import Trajectory

_log = getLogger(__name__)

FLOAT_FORMAT = '%.8e'
_PGM_HEADER = re.compile(rb'P5\s+(\d+)\s+(\d+)\s+(\d+)\s')

PathLike = str | os.PathLike


def _fmt(value: Any) -> str:
    if isinstance(value, (float, np.floating)):
        return FLOAT_FORMAT % value
    return str(value)


def write_csv(path: PathLike, header: Sequence[str], columns: Sequence[Sequence[Any]]) -> Path:
    """
    Writes equal-length columns with a header row, floats in scientific notation.

    :param path:        Output file.
    :param header:      Column names, with the unit as suffix (e.g. 'z_m').
    :param columns:     One sequence per header entry.
    """
    if len(header) != len(columns):
        raise ValueError('write_csv: header and columns differ in length.')
    lengths = {len(c) for c in columns}
    if len(lengths) > 1:
        raise ValueError(f'write_csv: columns have different lengths {sorted(lengths)}.')
    path = Path(path)
    with open(path, 'w', newline='') as f:
        w = csv.writer(f, lineterminator='\n')
        w.writerow(header)
        for row in zip(*columns):
            w.writerow([_fmt(v) for v in row])
    _log.debug('write_csv: %s', path)
    return path


def write_profile_csv(path: PathLike, z: np.ndarray, density: np.ndarray,
                      uncertainties: np.ndarray | None = None) -> Path:
    """
    Profile as `z_m,density[,density_err]`.
    """
    z = np.asarray(z, dtype=float)
    density = np.asarray(density, dtype=float)
    if uncertainties is None:
        return write_csv(path, ('z_m', 'density'), (z, density))
    return write_csv(path, ('z_m', 'density', 'density_err'), (z, density, np.asarray(uncertainties, dtype=float)))


def read_profile_csv(path: PathLike) -> tuple[np.ndarray, np.ndarray, np.ndarray | None]:
    """
    Reads a profile written by write_profile_csv (or any file with the same columns).

    Returns (z, density, uncertainties or None).
    """
    path = Path(path)
    with open(path, newline='') as f:
        rows = list(csv.reader(f))
    rows = [r for r in rows if r and any(c.strip() for c in r)]
    if not rows:
        raise InputError(f'read_profile_csv: {path} is empty.')

    header = [c.strip() for c in rows[0]]
    if header[:2] != ['z_m', 'density'] or len(header) > 3 or (len(header) == 3 and header[2] != 'density_err'):
        raise InputError(f"read_profile_csv: {path} row 1: expected header 'z_m,density[,density_err]', "
                         f"got '{','.join(header)}'.")
    if len(rows) < 2:
        raise InputError(f'read_profile_csv: {path} has a header but no data rows.')

    data = np.empty((len(rows) - 1, len(header)))
    for i, row in enumerate(rows[1:]):
        if len(row) != len(header):
            raise InputError(f'read_profile_csv: {path} row {i + 2}: expected {len(header)} fields, got {len(row)}.')
        try:
            data[i] = [float(c) for c in row]
        except ValueError:
            raise InputError(f"read_profile_csv: {path} row {i + 2}: cannot parse '{','.join(row)}'.") from None
    if not np.all(np.isfinite(data)):
        raise InputError(f'read_profile_csv: {path} contains non-finite values.')
    return data[:, 0], data[:, 1], (data[:, 2] if len(header) == 3 else None)


def write_trajectory_csv(traj: Trajectory, path: PathLike) -> Path:
    """
    Trajectory as `t,z1,v1[,z2,v2]` in SI units.
    """
    header = ['t']
    columns = [traj.times]
    for i in range(traj.n_ions):
        header += [f'z{i + 1}', f'v{i + 1}']
        columns += [traj.positions[:, i], traj.velocities[:, i]]
    return write_csv(path, header, columns)


def write_pgm(path: PathLike, image: np.ndarray) -> Path:
    """
    16-bit binary portable graymap. Counts above 65535 are clipped.
    """
    image = np.asarray(image)
    if image.ndim != 2:
        raise ValueError('write_pgm: image must be 2-D.')
    if image.size and image.max() > 65535:
        _log.warning('write_pgm: counts above 65535 clipped in %s.', path)
    pixels = np.clip(image, 0, 65535).astype('>u2')
    rows, cols = pixels.shape
    path = Path(path)
    with open(path, 'wb') as f:
        f.write(f'P5\n{cols} {rows}\n65535\n'.encode('ascii'))
        f.write(pixels.tobytes())
    return path


def read_pgm(path: PathLike) -> np.ndarray:
    """
    Reads a file written by write_pgm.
    """
    raw = Path(path).read_bytes()
    head = _PGM_HEADER.match(raw)
    if head is None or head.group(3) != b'65535':
        raise InputError(f'read_pgm: {path} is not a 16-bit P5 graymap.')
    cols, rows = int(head.group(1)), int(head.group(2))
    data = raw[head.end():head.end() + 2 * rows * cols]
    if len(data) != 2 * rows * cols:
        raise InputError(f'read_pgm: {path} is truncated.')
    return np.frombuffer(data, dtype='>u2').reshape(rows, cols).astype(np.int64)


def write_image_csv(path: PathLike, image: np.ndarray) -> Path:
    """
    Image as a plain matrix, one pixel row per line.
    """
    path = Path(path)
    np.savetxt(path, np.asarray(image), fmt='%d' if np.issubdtype(np.asarray(image).dtype, np.integer)
               else FLOAT_FORMAT, delimiter=',')
    return path


def write_json(path: PathLike, obj: Any) -> Path:
    path = Path(path)
    with open(path, 'w') as f:
        json.dump(_jsonable(obj), f, indent=2, sort_keys=True)
        f.write('\n')
    return path


def _utc_now() -> str:
    return datetime.datetime.now(datetime.timezone.utc).replace(microsecond=0).isoformat()


@dataclass
class RunManifest:
    """
    Provenance record of one command run.

    :param command:         Subcommand name.
    :param config_hash:     sha256 of the resolved configuration.
    :param version:         iontrap version.
    :param seed:            Master seed.
    :param started:         UTC start time.
    :param finished:        UTC end time, set by write().
    :param outputs:         Files written by the run, relative to the run directory.
    :param status:          'ok', or 'failed' when the command raised.
    :param error:           Message of the error that ended a failed run.
    """
    command: str
    config_hash: str
    version: str
    seed: int
    started: str = field(default_factory=_utc_now)
    finished: str = ''
    outputs: list[str] = field(default_factory=list)
    status: str = 'ok'
    error: str = ''

    def add(self, path: PathLike) -> None:
        self.outputs.append(Path(path).name)

    def write(self, run_dir: PathLike) -> Path:
        """
        Writes manifest.json atomically through a temporary file.
        """
        self.finished = _utc_now()
        run_dir = Path(run_dir)
        target = run_dir / 'manifest.json'
        tmp = run_dir / '.manifest.json.tmp'
        write_json(tmp, self)
        os.replace(tmp, target)
        return target
