"""CSV and JSON readers/writers shared by the CLI and the library."""
import csv
import json
import math
from importlib import resources
from pathlib import Path

import numpy as np

from .models import LatentPath, ModelError, ObservationSeries


def fmt(x):
    """17 significant digits: round-trips any float64."""
    return format(float(x), ".17g")


def read_dataset(path, dt, n_steps=None):
    """Read ``time,y1[,y2,...]`` into an :class:`ObservationSeries`.

    Rows are placed on the grid ``i = round(time / dt)``; blank cells mean
    the observation at that grid time is missing. Without ``n_steps`` the
    grid ends at the last row.
    """
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header or header[0].strip() != "time" or len(header) < 2:
            raise ModelError(f"{path}: header must be 'time,y1[,y2,...]'")
        rows = [row for row in reader if row and any(cell.strip() for cell in row)]
    p0 = len(header) - 1
    entries = []
    for lineno, row in enumerate(rows, start=2):
        if len(row) != p0 + 1:
            raise ModelError(f"{path}:{lineno}: expected {p0 + 1} columns")
        t = float(row[0])
        index = int(round(t / dt))
        if index < 0 or not math.isclose(index * dt, t, rel_tol=1e-9, abs_tol=1e-9):
            raise ModelError(f"{path}:{lineno}: time {t} is not on the grid with dt={dt}")
        cells = [c.strip() for c in row[1:]]
        if any(cells) and not all(cells):
            raise ModelError(f"{path}:{lineno}: partially observed rows are not supported")
        entries.append((index, [float(c) for c in cells] if all(cells) else None))
    last = max(index for index, _ in entries) if entries else 0
    n_steps = last if n_steps is None else int(n_steps)
    if last > n_steps:
        raise ModelError(f"{path}: data extends past grid index {n_steps}")
    values = np.zeros((n_steps + 1, p0))
    mask = np.zeros(n_steps + 1, dtype=bool)
    for index, obs in entries:
        if obs is not None:
            values[index] = obs
            mask[index] = True
    return ObservationSeries(values, mask)


def write_dataset(path, obs, dt):
    p0 = obs.values.shape[1]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["time"] + [f"y{j + 1}" for j in range(p0)])
        for i in range(obs.values.shape[0]):
            cells = [fmt(v) for v in obs.values[i]] if obs.mask[i] else [""] * p0
            writer.writerow([fmt(i * dt)] + cells)


def write_path(path, latent, names):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["time"] + list(names))
        for t, row in zip(latent.times, latent.values):
            writer.writerow([fmt(t)] + [fmt(v) for v in row])


def read_path(path, dt):
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        next(reader)
        values = np.array([[float(c) for c in row[1:]] for row in reader if row])
    return LatentPath(values, dt)


def write_table(path, header, rows):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([c if isinstance(c, (int, str)) else fmt(c) for c in row])


def read_table(path):
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        rows = [row for row in reader if row]
    return header, rows


def write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def read_json(path):
    return json.loads(Path(path).read_text())


def boarding_school_path():
    """Packaged daily bed-confinement counts from the 1978 school influenza outbreak."""
    return resources.files("ssmflow") / "data" / "boarding_school.csv"
