"""Scan, PLY, pair-list and CSV readers and writers.

Binary scans are KITTI-style: consecutive 16-byte records of four
little-endian float32 values (x, y, z, intensity). Intensity is dropped.

A pair directory holds the scans plus ``pairs.txt``; each non-comment line
is ``<scan_k> <scan_l> r00 r01 r02 t0 r10 r11 r12 t1 r20 r21 r22 t2``,
the 3x4 row-major transform mapping scan_k coordinates into scan_l's frame.
"""
from __future__ import annotations

import csv
import os

import numpy as np

from .detector import TrainingPair
from .errors import IOFailure, MalformedFile, MalformedHeader, MalformedRecord
from .geometry import PointCloud, RigidTransform, as_points

RECORD = np.dtype("<f4")
PAIRS_FILE = "pairs.txt"


def _read_bytes(path) -> bytes:
    try:
        with open(path, "rb") as fh:
            return fh.read()
    except OSError as exc:
        raise IOFailure(f"cannot read {path}: {exc}") from exc


def parse_lidar_bin(data: bytes) -> PointCloud:
    if len(data) % 16 != 0:
        raise MalformedFile(f"scan size {len(data)} is not a multiple of 16 bytes")
    if not data:
        raise MalformedFile("scan holds no points")
    rec = np.frombuffer(data, dtype=RECORD).reshape(-1, 4)
    if not np.all(np.isfinite(rec[:, :3])):
        raise MalformedFile("scan contains non-finite coordinates")
    return PointCloud(rec[:, :3].astype(np.float64))


def load_lidar_bin(path) -> PointCloud:
    return parse_lidar_bin(_read_bytes(path))


def save_lidar_bin(path, cloud, intensity=None) -> None:
    pts = as_points(cloud)
    rec = np.zeros((pts.shape[0], 4), dtype=RECORD)
    rec[:, :3] = pts
    if intensity is not None:
        rec[:, 3] = intensity
    with open(path, "wb") as fh:
        fh.write(rec.tobytes())


def parse_ply_ascii(text: str) -> PointCloud:
    lines = text.splitlines()
    if not lines or lines[0].strip() != "ply":
        raise MalformedHeader("missing 'ply' magic line")
    try:
        end = next(i for i, ln in enumerate(lines) if ln.strip() == "end_header")
    except StopIteration:
        raise MalformedHeader("missing end_header") from None
    fmt = None
    elements = []  # (name, count, [property names])
    for ln in lines[1:end]:
        tok = ln.split()
        if not tok or tok[0] in ("comment", "obj_info"):
            continue
        if tok[0] == "format":
            fmt = tok[1:]
        elif tok[0] == "element":
            if len(tok) != 3 or not (tok[2].isascii() and tok[2].isdigit()):
                raise MalformedHeader(f"bad element line: {ln!r}")
            elements.append((tok[1], int(tok[2]), []))
        elif tok[0] == "property":
            if not elements:
                raise MalformedHeader("property before any element")
            if len(tok) < 3 or tok[1] == "list" and len(tok) != 5:
                raise MalformedHeader(f"bad property line: {ln!r}")
            elements[-1][2].append(tok[-1])
        else:
            raise MalformedHeader(f"unknown header keyword {tok[0]!r}")
    if not fmt or fmt[0] != "ascii":
        raise MalformedHeader("only 'format ascii' PLY files are supported")
    if not elements or elements[0][0] != "vertex":
        raise MalformedHeader("first element must be 'vertex'")
    _, count, props = elements[0]
    try:
        cols = [props.index(c) for c in ("x", "y", "z")]
    except ValueError:
        raise MalformedHeader("vertex element lacks x, y or z") from None
    body = [ln for ln in lines[end + 1:end + 1 + count]]
    if len(body) != count or count == 0:
        raise MalformedRecord(f"expected {count} vertex records, found {len(body)}")
    pts = np.empty((count, 3))
    for i, ln in enumerate(body):
        tok = ln.split()
        if len(tok) != len(props):
            raise MalformedRecord(f"vertex {i}: expected {len(props)} values, got {len(tok)}")
        try:
            pts[i] = [float(tok[c]) for c in cols]
        except ValueError:
            raise MalformedRecord(f"vertex {i}: non-numeric value") from None
    if not np.all(np.isfinite(pts)):
        raise MalformedRecord("non-finite vertex coordinate")
    return PointCloud(pts)


def load_ply_ascii(path) -> PointCloud:
    data = _read_bytes(path)
    try:
        text = data.decode("ascii")
    except UnicodeDecodeError:
        raise MalformedHeader("PLY file is not ASCII text") from None
    return parse_ply_ascii(text)


def save_ply_ascii(path, cloud) -> None:
    """Write doubles with repr() so that load(save(c)) is bit-identical."""
    pts = as_points(cloud)
    head = ["ply", "format ascii 1.0", f"element vertex {pts.shape[0]}",
            "property double x", "property double y", "property double z", "end_header"]
    with open(path, "w", encoding="ascii") as fh:
        fh.write("\n".join(head) + "\n")
        for x, y, z in pts.tolist():
            fh.write(f"{x!r} {y!r} {z!r}\n")


def load_cloud(path) -> PointCloud:
    if str(path).lower().endswith(".ply"):
        return load_ply_ascii(path)
    return load_lidar_bin(path)


def save_pairs(directory, pairs, fmt: str = "bin") -> None:
    """Write pairs as scan files plus a pairs.txt index."""
    os.makedirs(directory, exist_ok=True)
    lines = []
    for i, p in enumerate(pairs):
        names = [f"pair{i:04d}_k.{fmt}", f"pair{i:04d}_l.{fmt}"]
        for name, cloud in zip(names, (p.cloud_k, p.cloud_l)):
            path = os.path.join(directory, name)
            save_ply_ascii(path, cloud) if fmt == "ply" else save_lidar_bin(path, cloud)
        m = p.truth.matrix()[:3].reshape(-1)
        lines.append(" ".join(names + [repr(float(v)) for v in m]))
    with open(os.path.join(directory, PAIRS_FILE), "w") as fh:
        fh.write("# scan_k scan_l T(3x4, row-major, k -> l)\n")
        fh.write("\n".join(lines) + "\n")


def load_pairs(directory) -> list:
    index = os.path.join(directory, PAIRS_FILE)
    if not os.path.exists(index):
        raise IOFailure(f"pair index not found: {index}")
    pairs = []
    with open(index) as fh:
        for lineno, ln in enumerate(fh, 1):
            tok = ln.split()
            if not tok or tok[0].startswith("#"):
                continue
            if len(tok) != 14:
                raise MalformedRecord(f"{index}:{lineno}: expected 14 fields, got {len(tok)}")
            try:
                m = np.array([float(v) for v in tok[2:]]).reshape(3, 4)
                truth = RigidTransform(m[:, :3], m[:, 3])
            except ValueError as exc:
                raise MalformedRecord(f"{index}:{lineno}: bad transform: {exc}") from None
            ck = load_cloud(os.path.join(directory, tok[0]))
            cl = load_cloud(os.path.join(directory, tok[1]))
            pairs.append(TrainingPair(ck, cl, truth))
    return pairs


def _fmt(v):
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def write_csv(path, header, rows) -> None:
    """Floats are written with repr(), so read_csv recovers them exactly."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])


def read_csv(path):
    """Return (header, rows) with numeric-looking fields converted to int or float."""
    def conv(s):
        for f in (int, float):
            try:
                return f(s)
            except ValueError:
                pass
        return s

    with open(path, newline="") as fh:
        r = csv.reader(fh)
        header = next(r)
        return header, [[conv(v) for v in row] for row in r]
