"""Point-cloud files, dataset directories, checkpoints and metric CSVs.

Point formats
-------------
XYZ: one point per line, three whitespace-separated decimals.
RIPC: ``b"RIPC"``, little-endian u32 point count, then count x 3 little-endian f32.

Checkpoints are zip archives (stored, fixed timestamps so identical content
gives identical bytes) holding ``manifest.json`` plus one raw little-endian
float64 buffer per dotted parameter name.
"""

from __future__ import annotations

import csv
import json
import os
import struct
import zipfile
from pathlib import Path

import numpy as np

RIPC_MAGIC = b"RIPC"
CHECKPOINT_FORMAT = "rimae-checkpoint"
_ZIP_TIME = (1980, 1, 1, 0, 0, 0)


def write_xyz(path, points):
    pts = np.asarray(points, dtype=np.float64)
    with open(path, "w", encoding="ascii") as fh:
        for x, y, z in pts.tolist():
            fh.write(f"{x!r} {y!r} {z!r}\n")


def read_xyz(path):
    rows = []
    with open(path, encoding="ascii") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) != 3:
                raise ValueError(f"{path}:{lineno}: expected 3 values, got {len(parts)}")
            rows.append([float(v) for v in parts])
    if not rows:
        raise ValueError(f"{path}: no points")
    return np.array(rows, dtype=np.float64)


def write_ripc(path, points):
    pts = np.asarray(points, dtype="<f4")
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise ValueError(f"points must be (N, 3), got {pts.shape}")
    with open(path, "wb") as fh:
        fh.write(RIPC_MAGIC)
        fh.write(struct.pack("<I", pts.shape[0]))
        fh.write(np.ascontiguousarray(pts).tobytes())


def read_ripc(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != RIPC_MAGIC:
        raise ValueError(f"{path}: bad magic {blob[:4]!r}")
    (count,) = struct.unpack("<I", blob[4:8])
    body = blob[8:]
    if len(body) != count * 12:
        raise ValueError(f"{path}: expected {count * 12} payload bytes, got {len(body)}")
    return np.frombuffer(body, dtype="<f4").reshape(count, 3).astype(np.float64)


def read_cloud(path):
    path = Path(path)
    if path.suffix.lower() == ".ripc":
        return read_ripc(path)
    return read_xyz(path)


def write_cloud(path, points):
    path = Path(path)
    if path.suffix.lower() == ".ripc":
        write_ripc(path, points)
    else:
        write_xyz(path, points)


def write_labels(path, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["filename", "label"])
        for name, label in rows:
            w.writerow([name, int(label)])


def read_labels(path):
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != ["filename", "label"]:
            raise ValueError(f"{path}: header must be 'filename,label'")
        return [(r["filename"], int(r["label"])) for r in reader]


def load_dataset(data_dir, normalize=True):
    """Clouds and integer labels listed in ``data_dir/labels.csv``."""
    from .geometry import normalize_cloud

    data_dir = Path(data_dir)
    manifest = data_dir / "labels.csv"
    if not manifest.exists():
        raise FileNotFoundError(f"{manifest} not found")
    clouds, labels = [], []
    for name, label in read_labels(manifest):
        pts = read_cloud(data_dir / name)
        clouds.append(normalize_cloud(pts) if normalize else pts)
        labels.append(label)
    if not clouds:
        raise ValueError(f"{data_dir}: empty dataset")
    return clouds, np.array(labels, dtype=np.int64)


# ---------------------------------------------------------------- checkpoints

def _zip_entry(name):
    info = zipfile.ZipInfo(name, date_time=_ZIP_TIME)
    info.compress_type = zipfile.ZIP_STORED
    info.external_attr = 0o644 << 16
    return info


def save_checkpoint(path, arrays, manifest):
    """Write ``arrays`` (name -> ndarray) and a JSON ``manifest``."""
    entries = {}
    for name in sorted(arrays):
        arr = np.asarray(arrays[name], dtype="<f8")
        entries[name] = {"shape": list(arr.shape), "file": f"tensors/{name}.f64"}
    meta = dict(manifest)
    meta["format"] = CHECKPOINT_FORMAT
    meta["tensors"] = entries
    tmp = f"{path}.tmp"
    with zipfile.ZipFile(tmp, "w") as zf:
        zf.writestr(_zip_entry("manifest.json"), json.dumps(meta, indent=2, sort_keys=True))
        for name in sorted(arrays):
            data = np.ascontiguousarray(np.asarray(arrays[name], dtype="<f8")).tobytes()
            zf.writestr(_zip_entry(entries[name]["file"]), data)
    os.replace(tmp, path)


def load_checkpoint(path):
    """Return ``(arrays, manifest)``."""
    with zipfile.ZipFile(path) as zf:
        meta = json.loads(zf.read("manifest.json"))
        if meta.get("format") != CHECKPOINT_FORMAT:
            raise ValueError(f"{path}: not a {CHECKPOINT_FORMAT} archive")
        arrays = {}
        for name, info in meta["tensors"].items():
            buf = zf.read(info["file"])
            arrays[name] = np.frombuffer(buf, dtype="<f8").reshape(info["shape"]).copy()
    return arrays, meta


def write_metrics_csv(path, rows, columns):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for row in rows:
            w.writerow([repr(float(row[c])) if isinstance(row[c], float) else row[c] for c in columns])


def write_json(path, payload):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
