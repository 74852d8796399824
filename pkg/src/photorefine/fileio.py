"""Readers and writers for PFM, PGM masks, PNG/PPM colour images and PLY meshes."""

from __future__ import annotations

import json
import re
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import ValidationError


def write_pfm(path, data: np.ndarray) -> None:
    """Write a 1- or 3-channel float image as little-endian PFM (scale -1.0).

    PFM stores rows bottom-to-top; callers pass ordinary top-to-bottom arrays.
    """
    data = np.asarray(data)
    if data.ndim == 3 and data.shape[2] == 3:
        header = "PF"
    elif data.ndim == 2 or (data.ndim == 3 and data.shape[2] == 1):
        header = "Pf"
        data = data.reshape(data.shape[0], data.shape[1])
    else:
        raise ValidationError(f"PFM needs 1 or 3 channels, got shape {data.shape}")
    h, w = data.shape[:2]
    body = np.ascontiguousarray(np.flipud(data).astype("<f4"))
    with open(path, "wb") as f:
        f.write(f"{header}\n{w} {h}\n-1.0\n".encode("ascii"))
        f.write(body.tobytes())


def read_pfm(path) -> np.ndarray:
    """Read a PFM file into a float64 array (``(H, W)`` or ``(H, W, 3)``)."""
    with open(path, "rb") as f:
        header = f.readline().decode("ascii").strip()
        if header not in ("PF", "Pf"):
            raise ValidationError(f"{path}: not a PFM file")
        dims = f.readline().decode("ascii")
        m = re.match(r"^\s*(\d+)\s+(\d+)\s*$", dims)
        if not m:
            raise ValidationError(f"{path}: malformed PFM size line")
        w, h = int(m.group(1)), int(m.group(2))
        scale = float(f.readline().decode("ascii").strip())
        dtype = "<f4" if scale < 0 else ">f4"
        channels = 3 if header == "PF" else 1
        raw = np.frombuffer(f.read(), dtype=dtype)
    if raw.size != w * h * channels:
        raise ValidationError(f"{path}: truncated PFM data")
    shape = (h, w, 3) if channels == 3 else (h, w)
    return np.flipud(raw.reshape(shape)).astype(np.float64)


def write_mask(path, mask: np.ndarray) -> None:
    """Binary PGM (or PNG, by extension) with 0/255 values."""
    Image.fromarray(np.where(mask, 255, 0).astype(np.uint8), mode="L").save(path)


def read_mask(path) -> np.ndarray:
    img = np.asarray(Image.open(path).convert("L"))
    return img >= 128


def write_color(path, pixels: np.ndarray) -> None:
    """8-bit PNG/PPM preview of linear values clamped to ``[0, 1]`` (no gamma)."""
    data = np.round(np.clip(pixels, 0.0, 1.0) * 255).astype(np.uint8)
    Image.fromarray(data, mode="RGB").save(path)


def read_color(path, inverse_gamma: bool = False) -> np.ndarray:
    """Load a colour image as float64 in ``[0, 1]``.

    PFM files are returned as stored. 8-bit images are divided by 255 and,
    when ``inverse_gamma`` is set, linearised with a 2.2 power law.
    """
    path = Path(path)
    if path.suffix.lower() == ".pfm":
        img = read_pfm(path)
        if img.ndim != 3:
            raise ValidationError(f"{path}: expected a 3-channel PFM")
        return img
    img = np.asarray(Image.open(path).convert("RGB"), dtype=np.float64) / 255.0
    if inverse_gamma:
        img = img**2.2
    return img


_PLY_TYPES = {"float": "<f4", "uchar": "u1", "int": "<i4", "uint": "<u4", "double": "<f8"}


def write_ply(path, vertices: np.ndarray, faces: np.ndarray, normals: np.ndarray | None = None) -> None:
    """Binary little-endian PLY with optional per-vertex normals."""
    vertices = np.asarray(vertices, dtype="<f4").reshape(-1, 3)
    faces = np.asarray(faces, dtype="<i4").reshape(-1, 3)
    props = ["property float x", "property float y", "property float z"]
    fields = [("x", "<f4"), ("y", "<f4"), ("z", "<f4")]
    if normals is not None:
        props += ["property float nx", "property float ny", "property float nz"]
        fields += [("nx", "<f4"), ("ny", "<f4"), ("nz", "<f4")]
    header = "\n".join(
        [
            "ply",
            "format binary_little_endian 1.0",
            f"element vertex {len(vertices)}",
            *props,
            f"element face {len(faces)}",
            "property list uchar int vertex_indices",
            "end_header",
        ]
    )
    vdata = np.empty(len(vertices), dtype=fields)
    vdata["x"], vdata["y"], vdata["z"] = vertices.T
    if normals is not None:
        normals = np.asarray(normals, dtype="<f4").reshape(-1, 3)
        vdata["nx"], vdata["ny"], vdata["nz"] = normals.T
    fdata = np.empty(len(faces), dtype=[("n", "u1"), ("idx", "<i4", (3,))])
    fdata["n"] = 3
    fdata["idx"] = faces
    with open(path, "wb") as f:
        f.write((header + "\n").encode("ascii"))
        f.write(vdata.tobytes())
        f.write(fdata.tobytes())


def read_ply(path):
    """Read a binary little-endian triangle PLY written by :func:`write_ply`.

    Returns ``(vertices, faces, normals_or_None)``.
    """
    with open(path, "rb") as f:
        if f.readline().strip() != b"ply":
            raise ValidationError(f"{path}: not a PLY file")
        elements = []
        while True:
            line = f.readline().decode("ascii").strip()
            if not line:
                raise ValidationError(f"{path}: unterminated PLY header")
            if line == "end_header":
                break
            parts = line.split()
            if parts[0] == "format" and parts[1] != "binary_little_endian":
                raise ValidationError(f"{path}: only binary_little_endian PLY is supported")
            if parts[0] == "element":
                elements.append([parts[1], int(parts[2]), []])
            elif parts[0] == "property":
                elements[-1][2].append(parts[1:])
        body = f.read()

    offset = 0
    vertices = faces = normals = None
    for name, count, props in elements:
        if name == "vertex":
            dt = [(p[1], _PLY_TYPES[p[0]]) for p in props]
            arr = np.frombuffer(body, dtype=dt, count=count, offset=offset)
            offset += arr.nbytes
            vertices = np.stack([arr["x"], arr["y"], arr["z"]], axis=1).astype(np.float64)
            if "nx" in arr.dtype.names:
                normals = np.stack([arr["nx"], arr["ny"], arr["nz"]], axis=1).astype(np.float64)
        elif name == "face":
            dt = [("n", "u1"), ("idx", "<i4", (3,))]
            arr = np.frombuffer(body, dtype=dt, count=count, offset=offset)
            offset += arr.nbytes
            if np.any(arr["n"] != 3):
                raise ValidationError(f"{path}: only triangle faces are supported")
            faces = arr["idx"].astype(np.int64)
    return vertices, faces, normals


def write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True, allow_nan=False) + "\n")


def read_json(path):
    try:
        return json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{path}: invalid JSON ({exc})") from exc
