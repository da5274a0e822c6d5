"""Minimal ASCII PLY reader/writer for xyz point clouds.

Unknown vertex properties and non-vertex elements are ignored on read.
Coordinates are written with 17 significant digits so a round trip is
lossless for doubles.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np


def write_ply(path, points: np.ndarray) -> None:
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise ValueError("points must be (n, 3)")
    lines = [
        "ply",
        "format ascii 1.0",
        f"element vertex {len(pts)}",
        "property float x",
        "property float y",
        "property float z",
        "end_header",
    ]
    for p in pts:
        lines.append(f"{p[0]:.17g} {p[1]:.17g} {p[2]:.17g}")
    Path(path).write_text("\n".join(lines) + "\n")


def read_ply(path) -> np.ndarray:
    text = Path(path).read_text()
    lines = [ln.strip() for ln in text.splitlines() if ln.strip()]
    if not lines or lines[0] != "ply":
        raise ValueError(f"cannot read {path}: not a PLY file")

    elements: list[tuple[str, int]] = []  # (name, count) in declaration order
    vertex_props: list[str] = []
    cursor = 1
    fmt_seen = False
    while cursor < len(lines):
        line = lines[cursor]
        cursor += 1
        if line.startswith("comment"):
            continue
        if line.startswith("format"):
            if "ascii" not in line:
                raise ValueError(f"cannot read {path}: only ascii PLY supported")
            fmt_seen = True
            continue
        if line.startswith("element"):
            _, name, count = line.split()
            elements.append((name, int(count)))
            continue
        if line.startswith("property"):
            if elements and elements[-1][0] == "vertex":
                parts = line.split()
                if parts[1] == "list":
                    raise ValueError(f"cannot read {path}: list property on vertex")
                vertex_props.append(parts[-1])
            continue
        if line == "end_header":
            break
        raise ValueError(f"cannot read {path}: unexpected header line {line!r}")
    else:
        raise ValueError(f"cannot read {path}: missing end_header")
    if not fmt_seen:
        raise ValueError(f"cannot read {path}: missing format line")

    try:
        cols = [vertex_props.index(axis) for axis in ("x", "y", "z")]
    except ValueError:
        raise ValueError(f"cannot read {path}: vertex element lacks x/y/z") from None

    points: np.ndarray | None = None
    for name, count in elements:
        rows = lines[cursor : cursor + count]
        if len(rows) < count:
            raise ValueError(f"cannot read {path}: truncated element {name}")
        cursor += count
        if name != "vertex":
            continue
        points = np.empty((count, 3), dtype=np.float64)
        for i, row in enumerate(rows):
            fields = row.split()
            points[i] = [float(fields[c]) for c in cols]
    if points is None:
        raise ValueError(f"cannot read {path}: no vertex element")
    return points
