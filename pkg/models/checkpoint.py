"""
Checkpoint container.

Layout (little-endian):
    b"FLC1"
    u64 header length, UTF-8 header (flat key = value run configuration)
    u64 record count
    per record: u64 name length, UTF-8 name, u64 rank, rank x u64 dims, f32 values
"""
import hashlib
import logging
import os
import struct
import tempfile
from typing import Dict, Tuple

import numpy as np

from config import RunConfig, dump_run_config, build_run_config, parse_flat_config
from errors import ArtifactMismatchError, ConfigError
from models.network import PlaceRecognitionNet

logger = logging.getLogger(__name__)

MAGIC = b'FLC1'
_U64 = struct.Struct('<Q')


def encode_checkpoint(state: Dict[str, np.ndarray], header: str) -> bytes:
    header_bytes = header.encode('utf-8')
    parts = [MAGIC, _U64.pack(len(header_bytes)), header_bytes, _U64.pack(len(state))]
    for name, values in state.items():
        name_bytes = name.encode('utf-8')
        values = np.asarray(values)
        parts.append(_U64.pack(len(name_bytes)))
        parts.append(name_bytes)
        parts.append(_U64.pack(values.ndim))
        parts.extend(_U64.pack(d) for d in values.shape)
        parts.append(values.astype('<f4').tobytes())
    return b''.join(parts)


class _Reader:
    def __init__(self, data: bytes):
        self.data, self.pos = data, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise ArtifactMismatchError("checkpoint is truncated")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def u64(self) -> int:
        return _U64.unpack(self.take(8))[0]


def decode_checkpoint(data: bytes) -> Tuple[str, Dict[str, np.ndarray]]:
    reader = _Reader(data)
    if reader.take(4) != MAGIC:
        raise ArtifactMismatchError("not a checkpoint file (bad magic)")
    header = reader.take(reader.u64()).decode('utf-8')
    state: Dict[str, np.ndarray] = {}
    for _ in range(reader.u64()):
        name = reader.take(reader.u64()).decode('utf-8')
        dims = tuple(reader.u64() for _ in range(reader.u64()))
        count = int(np.prod(dims)) if dims else 1
        state[name] = np.frombuffer(reader.take(4 * count), dtype='<f4').reshape(dims).copy()
    if reader.pos != len(data):
        raise ArtifactMismatchError("trailing bytes after the last checkpoint record")
    return header, state


def checkpoint_bytes(model: PlaceRecognitionNet, cfg: RunConfig) -> bytes:
    return encode_checkpoint(model.state_dict(), dump_run_config(cfg))


def checkpoint_digest(model: PlaceRecognitionNet, cfg: RunConfig) -> str:
    """sha256 of the serialized checkpoint."""
    return hashlib.sha256(checkpoint_bytes(model, cfg)).hexdigest()


def save_checkpoint(model: PlaceRecognitionNet, cfg: RunConfig, path: str) -> str:
    """Write atomically (temp file + rename); returns the digest."""
    data = checkpoint_bytes(model, cfg)
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp_path = tempfile.mkstemp(prefix='.ckpt-', dir=directory)
    try:
        with os.fdopen(fd, 'wb') as f:
            f.write(data)
        os.replace(tmp_path, path)
    except BaseException:
        if os.path.exists(tmp_path):
            os.unlink(tmp_path)
        raise
    digest = hashlib.sha256(data).hexdigest()
    logger.info("saved checkpoint %s (%d tensors, sha256 %s)", path, len(model.state_dict()), digest[:12])
    return digest


def read_checkpoint(path: str) -> Tuple[RunConfig, Dict[str, np.ndarray]]:
    try:
        with open(path, 'rb') as f:
            data = f.read()
    except OSError as e:
        raise ArtifactMismatchError(f"cannot read checkpoint {path}: {e}") from e
    header, state = decode_checkpoint(data)
    try:
        cfg = build_run_config(parse_flat_config(header))
    except ConfigError as e:
        raise ArtifactMismatchError(f"checkpoint header is not a valid run configuration: {e}") from e
    return cfg, state


def load_model(path: str) -> Tuple[PlaceRecognitionNet, RunConfig]:
    """Rebuild the model described by a checkpoint header and load its tensors."""
    cfg, state = read_checkpoint(path)
    model = PlaceRecognitionNet.from_run_config(cfg)
    model.load_state_dict(state)
    model.eval()
    return model, cfg
