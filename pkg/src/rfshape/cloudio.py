"""Point-cloud serialization (ASCII PLY, RFPC binary) and atomic file writes.

RFPC layout (little-endian): magic b"RFPC", uint32 point count, uint8 has_power
flag, then count * (3 or 4) float32 records (x y z [power_db]).
"""

import os
import struct
import tempfile

import numpy as np

from .geometry import PointCloud

RFPC_MAGIC = b"RFPC"


class FormatError(ValueError):
    """Malformed or truncated cloud file."""


def atomic_write_bytes(path: str, data: bytes) -> None:
    """Write via a temp file in the target directory, then rename into place."""
    d = os.path.dirname(os.path.abspath(path))
    os.makedirs(d, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path: str, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def rfpc_bytes(cloud: PointCloud) -> bytes:
    has_power = cloud.powers_db is not None
    n = len(cloud)
    if has_power:
        data = np.empty((n, 4), dtype="<f4")
        data[:, :3] = cloud.points
        data[:, 3] = cloud.powers_db
    else:
        data = np.asarray(cloud.points, dtype="<f4")
    return RFPC_MAGIC + struct.pack("<IB", n, int(has_power)) + data.tobytes()


def save_rfpc(path: str, cloud: PointCloud) -> None:
    atomic_write_bytes(path, rfpc_bytes(cloud))


def load_rfpc(path: str) -> PointCloud:
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < 9 or raw[:4] != RFPC_MAGIC:
        raise FormatError(f"{path}: not an RFPC file")
    n, has_power = struct.unpack("<IB", raw[4:9])
    width = 4 if has_power else 3
    body = raw[9:]
    if len(body) != n * width * 4:
        raise FormatError(f"{path}: expected {n * width * 4} payload bytes, got {len(body)}")
    data = np.frombuffer(body, dtype="<f4").reshape(n, width).astype(float)
    if has_power:
        return PointCloud(data[:, :3], data[:, 3])
    return PointCloud(data)


def ply_text(cloud: PointCloud) -> str:
    has_power = cloud.powers_db is not None
    lines = [
        "ply",
        "format ascii 1.0",
        f"element vertex {len(cloud)}",
        "property float x",
        "property float y",
        "property float z",
    ]
    if has_power:
        lines.append("property float power")
    lines.append("end_header")
    for i, p in enumerate(cloud.points):
        row = f"{p[0]:.6f} {p[1]:.6f} {p[2]:.6f}"
        if has_power:
            row += f" {cloud.powers_db[i]:.6f}"
        lines.append(row)
    return "\n".join(lines) + "\n"


def save_ply(path: str, cloud: PointCloud) -> None:
    atomic_write_text(path, ply_text(cloud))


def load_ply(path: str) -> PointCloud:
    """Reads the ASCII PLY subset written by save_ply (vertex element, float props)."""
    with open(path, "r", encoding="utf-8") as f:
        lines = [ln.strip() for ln in f]
    if not lines or lines[0] != "ply":
        raise FormatError(f"{path}: not a PLY file")
    n = None
    props: list[str] = []
    body_at = None
    for i, ln in enumerate(lines[1:], start=1):
        if ln.startswith("element vertex"):
            n = int(ln.split()[-1])
        elif ln.startswith("property"):
            props.append(ln.split()[-1])
        elif ln == "end_header":
            body_at = i + 1
            break
    if n is None or body_at is None:
        raise FormatError(f"{path}: missing vertex element or end_header")
    if props[:3] != ["x", "y", "z"]:
        raise FormatError(f"{path}: unsupported property layout {props}")
    rows = []
    for ln in lines[body_at:body_at + n]:
        vals = [float(v) for v in ln.split()]
        if len(vals) != len(props):
            raise FormatError(f"{path}: bad vertex row {ln!r}")
        rows.append(vals)
    if len(rows) != n:
        raise FormatError(f"{path}: expected {n} vertices, got {len(rows)}")
    arr = np.array(rows, dtype=float).reshape(n, len(props))
    if "power" in props:
        return PointCloud(arr[:, :3], arr[:, props.index("power")])
    return PointCloud(arr[:, :3])
