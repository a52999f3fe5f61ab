import json
import logging
from pathlib import Path

import numpy as np
import yaml

from .exceptions import ExportError
from .geom import Pose, Quat
from .scan import RawScan

PLY_DTYPE = np.dtype([("x", "<f4"), ("y", "<f4"), ("z", "<f4"),
                      ("intensity", "<f4"), ("submap_id", "<u4")])


def _ensure_parent(path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    return path


def write_ply(path, points, intensity, submap_id):
    """
    Writes a binary little-endian PLY cloud.

    Arguments:
    path -- Destination file
    points -- (N, 3) coordinates
    intensity -- (N,) per-point intensity
    submap_id -- (N,) id of the submap each point came from

    Returns:
    Path -- The written file
    """
    points = np.asarray(points).reshape(-1, 3)
    data = np.empty(len(points), dtype=PLY_DTYPE)
    data["x"], data["y"], data["z"] = points[:, 0], points[:, 1], points[:, 2]
    data["intensity"] = np.asarray(intensity).reshape(-1)
    data["submap_id"] = np.asarray(submap_id).reshape(-1)
    header = (
        "ply\n"
        "format binary_little_endian 1.0\n"
        f"element vertex {len(data)}\n"
        "property float x\n"
        "property float y\n"
        "property float z\n"
        "property float intensity\n"
        "property uint submap_id\n"
        "end_header\n"
    )
    try:
        path = _ensure_parent(path)
        with open(path, "wb") as f:
            f.write(header.encode("ascii"))
            f.write(data.tobytes())
    except OSError as e:
        logging.error(f"PLY export failed for {path}: {e}")
        raise ExportError(path, e) from e
    logging.info(f"Wrote {len(data)} points to {path}")
    return path


def read_ply(path):
    """Reads a cloud written by write_ply; returns the structured array."""
    raw = Path(path).read_bytes()
    end = raw.index(b"end_header\n") + len(b"end_header\n")
    header = raw[:end].decode("ascii")
    if "binary_little_endian" not in header:
        raise ValueError(f"{path} is not a binary little-endian PLY")
    return np.frombuffer(raw[end:], dtype=PLY_DTYPE)


PLY_TYPES = {
    "char": "i1", "int8": "i1", "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2", "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4", "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4", "double": "f8", "float64": "f8",
}
SCAN_TIME_FIELDS = ("time", "timestamp", "t")


def _parse_ply_header(raw, path):
    """Returns (format, [(element, count, [(property, numpy type)])], payload offset)."""
    marker = raw.find(b"end_header")
    if not raw.startswith(b"ply") or marker < 0:
        raise ValueError(f"{path} is not a PLY file")
    newline = raw.find(b"\n", marker)
    start = len(raw) if newline < 0 else newline + 1
    fmt, elements = None, []
    for line in raw[:start].decode("ascii").splitlines()[1:]:
        parts = line.split()
        if not parts or parts[0] in ("comment", "obj_info", "end_header"):
            continue
        if parts[0] == "format":
            fmt = parts[1]
        elif parts[0] == "element":
            elements.append((parts[1], int(parts[2]), []))
        elif parts[0] == "property":
            if not elements:
                raise ValueError(f"{path}: property before any element")
            if parts[1] == "list":
                raise ValueError(f"{path}: list properties are not supported")
            if parts[1] not in PLY_TYPES:
                raise ValueError(f"{path}: unknown PLY type {parts[1]!r}")
            elements[-1][2].append((parts[2], PLY_TYPES[parts[1]]))
    if fmt not in ("ascii", "binary_little_endian"):
        raise ValueError(f"{path}: unsupported PLY format {fmt!r}")
    return fmt, elements, start


def _vertex_columns(raw, path):
    fmt, elements, start = _parse_ply_header(raw, path)
    skip_rows, skip_bytes = 0, 0
    for name, count, props in elements:
        if name == "vertex":
            break
        skip_rows += count
        skip_bytes += count * np.dtype([(p, "<" + t) for p, t in props]).itemsize
    else:
        raise ValueError(f"{path} has no vertex element")
    names = [p for p, _ in props]
    if fmt == "binary_little_endian":
        dtype = np.dtype([(p, "<" + t) for p, t in props])
        if start + skip_bytes + count * dtype.itemsize > len(raw):
            raise ValueError(f"{path}: payload shorter than {count} vertices")
        data = np.frombuffer(raw, dtype=dtype, count=count, offset=start + skip_bytes)
        return {p: data[p].astype(float) for p in names}
    rows = [line.split() for line in raw[start:].decode("ascii").splitlines() if line.strip()]
    rows = rows[skip_rows:skip_rows + count]
    if len(rows) != count or any(len(r) != len(names) for r in rows):
        raise ValueError(f"{path}: malformed ASCII vertex data")
    table = np.array(rows, dtype=float).reshape(count, len(names))
    return {p: table[:, i] for i, p in enumerate(names)}


def read_scan_ply(path, lidar_id, frame_time=None, frame_period=0.1):
    """
    Reads one LiDAR scan from an ASCII or binary little-endian PLY file.

    Arguments:
    path -- Source file with vertex properties x, y, z and optionally intensity and time
    lidar_id -- LidarId of the sensor that produced the scan
    frame_time -- Frame start; defaults to the earliest point time
    frame_period -- Sweep duration in seconds

    Returns:
    RawScan -- Points with t_offset = time - frame_time
    """
    path = Path(path)
    cols = _vertex_columns(path.read_bytes(), path)
    missing = [c for c in ("x", "y", "z") if c not in cols]
    if missing:
        raise ValueError(f"{path} lacks vertex properties {missing}")
    n = len(cols["x"])
    time_field = next((c for c in SCAN_TIME_FIELDS if c in cols), None)
    if time_field is None:
        # untimed clouds are treated as instantaneous
        frame_time = 0.0 if frame_time is None else frame_time
        offsets = np.zeros(n)
    else:
        t = cols[time_field]
        if frame_time is None:
            frame_time = float(t.min()) if n else 0.0
        offsets = t - frame_time
    intensity = cols.get("intensity", np.zeros(n))
    points = np.column_stack([cols["x"], cols["y"], cols["z"], intensity, offsets])
    logging.info(f"Read {n} points from {path}")
    return RawScan(points.reshape(-1, 5), lidar_id, frame_time, frame_period)


def write_scan_ply(path, scan, binary=True):
    """
    Writes a RawScan as PLY with absolute per-point time.

    Arguments:
    path -- Destination file
    scan -- RawScan to export
    binary -- Little-endian binary payload when True, ASCII otherwise

    Returns:
    Path -- The written file
    """
    n = len(scan)
    fmt = "binary_little_endian" if binary else "ascii"
    header = (
        "ply\n"
        f"format {fmt} 1.0\n"
        f"comment lidar {scan.lidar_id.value}\n"
        f"element vertex {n}\n"
        "property float x\n"
        "property float y\n"
        "property float z\n"
        "property float intensity\n"
        "property double time\n"
        "end_header\n"
    )
    times = scan.frame_time + scan.t_offset
    try:
        path = _ensure_parent(path)
        if binary:
            data = np.empty(n, dtype=[("x", "<f4"), ("y", "<f4"), ("z", "<f4"),
                                      ("intensity", "<f4"), ("time", "<f8")])
            for i, name in enumerate(("x", "y", "z", "intensity")):
                data[name] = scan.points[:, i]
            data["time"] = times
            with open(path, "wb") as f:
                f.write(header.encode("ascii"))
                f.write(data.tobytes())
        else:
            with open(path, "w") as f:
                f.write(header)
                np.savetxt(f, np.column_stack([scan.points[:, :4], times]),
                           fmt=["%.9g", "%.9g", "%.9g", "%.9g", "%.9f"])
    except OSError as e:
        logging.error(f"Scan export failed for {path}: {e}")
        raise ExportError(path, e) from e
    logging.info(f"Wrote {n}-point {scan.lidar_id.value} scan to {path}")
    return path


def format_tum(t, pose):
    q = pose.rotation
    p = pose.translation
    return (f"{t:.6f} {p[0]:.6f} {p[1]:.6f} {p[2]:.6f} "
            f"{q.x:.9f} {q.y:.9f} {q.z:.9f} {q.w:.9f}")


def read_tum(path):
    """
    Reads a TUM trajectory file.

    Returns:
    tuple -- (times (N,), list of Pose)
    """
    times, poses = [], []
    for line in Path(path).read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        v = [float(x) for x in line.split()]
        if len(v) != 8:
            raise ValueError(f"malformed TUM line in {path}: {line!r}")
        times.append(v[0])
        poses.append(Pose(Quat.from_xyzw(v[4:8]), v[1:4]))
    return np.asarray(times), poses


class TrajectoryWriter:
    """Appends TUM lines as keyframes become final."""

    def __init__(self, path):
        self.path = _ensure_parent(path) if path else None
        self.lines = []
        if self.path:
            self.path.write_text("")
            logging.info(f"Trajectory output: {self.path}")

    def write(self, t, pose):
        line = format_tum(t, pose)
        self.lines.append(line)
        if self.path:
            with open(self.path, "a") as f:
                f.write(line + "\n")


class DiagnosticsWriter:
    """Line-delimited JSON records, one per keyframe or event."""

    def __init__(self, path):
        self.path = _ensure_parent(path) if path else None
        self.count = 0
        if self.path:
            self.path.write_text("")

    def write(self, record):
        self.count += 1
        if self.path:
            with open(self.path, "a") as f:
                f.write(json.dumps(record, sort_keys=True, default=_json_default) + "\n")


def _json_default(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, np.generic):
        return obj.item()
    raise TypeError(f"not JSON serializable: {type(obj).__name__}")


def format_manifest_line(submap_id, t_first, anchor, n_points, degenerate):
    q = anchor.rotation
    p = anchor.translation
    return (f"{submap_id} {t_first:.6f} {p[0]:.6f} {p[1]:.6f} {p[2]:.6f} "
            f"{q.x:.9f} {q.y:.9f} {q.z:.9f} {q.w:.9f} {n_points} {int(bool(degenerate))}")


def write_manifest(path, lines):
    try:
        path = _ensure_parent(path)
        path.write_text("".join(line + "\n" for line in lines))
    except OSError as e:
        raise ExportError(path, e) from e
    logging.info(f"Wrote map manifest with {len(lines)} submaps to {path}")
    return path


def write_metrics(path, metrics):
    """Metrics report as ``key: value`` lines."""
    try:
        path = _ensure_parent(path)
        with open(path, "w") as f:
            yaml.safe_dump(_plain(metrics), f, sort_keys=True, default_flow_style=False)
    except OSError as e:
        raise ExportError(path, e) from e
    logging.info(f"Metrics written to {path}")
    return path


def read_metrics(path):
    with open(path) as f:
        return yaml.safe_load(f)


def _plain(value):
    if isinstance(value, dict):
        return {k: _plain(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, np.generic):
        return value.item()
    return value
