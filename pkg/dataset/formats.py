"""
On-disk formats: PCB1 point clouds and binary PPM (P6) images.
"""
import re
import struct

import numpy as np

from errors import DataError

PCB_MAGIC = b'PCB1'
_U32 = struct.Struct('<I')
_PPM_HEADER = re.compile(rb'P6\s+(?:#[^\n]*\n\s*)*(\d+)\s+(\d+)\s+(\d+)\s')


def write_pcb(path: str, points: np.ndarray) -> None:
    """Write N x 3 points as PCB1: magic, u32 N, N x 3 little-endian f32."""
    points = np.asarray(points, dtype='<f4').reshape(-1, 3)
    with open(path, 'wb') as f:
        f.write(PCB_MAGIC)
        f.write(_U32.pack(len(points)))
        f.write(points.tobytes())


def read_pcb(path: str) -> np.ndarray:
    try:
        with open(path, 'rb') as f:
            data = f.read()
    except OSError as e:
        raise DataError(f"cannot read point cloud {path}: {e}") from e
    if data[:4] != PCB_MAGIC:
        raise DataError(f"{path}: not a PCB1 point cloud")
    if len(data) < 8:
        raise DataError(f"{path}: truncated header")
    (n,) = _U32.unpack(data[4:8])
    if len(data) != 8 + 12 * n:
        raise DataError(f"{path}: expected {n} points, file holds {(len(data) - 8) / 12:g}")
    return np.frombuffer(data, dtype='<f4', offset=8).reshape(n, 3).astype(np.float32)


def write_ppm(path: str, image: np.ndarray) -> None:
    """Write a [3, H, W] uint8 image as binary PPM (maxval 255)."""
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[0] != 3 or image.dtype != np.uint8:
        raise DataError(f"expected a [3, H, W] uint8 image, got {image.shape} {image.dtype}")
    _, h, w = image.shape
    with open(path, 'wb') as f:
        f.write(f"P6\n{w} {h}\n255\n".encode('ascii'))
        f.write(np.ascontiguousarray(image.transpose(1, 2, 0)).tobytes())


def read_ppm(path: str) -> np.ndarray:
    """Read a binary PPM into a [3, H, W] uint8 array."""
    try:
        with open(path, 'rb') as f:
            data = f.read()
    except OSError as e:
        raise DataError(f"cannot read image {path}: {e}") from e
    match = _PPM_HEADER.match(data)
    if not match:
        raise DataError(f"{path}: not a binary PPM (P6) image")
    w, h, maxval = (int(g) for g in match.groups())
    if maxval != 255:
        raise DataError(f"{path}: unsupported maxval {maxval}")
    body = data[match.end():]
    if len(body) != 3 * w * h:
        raise DataError(f"{path}: expected {3 * w * h} pixel bytes, found {len(body)}")
    return np.frombuffer(body, dtype=np.uint8).reshape(h, w, 3).transpose(2, 0, 1).copy()
