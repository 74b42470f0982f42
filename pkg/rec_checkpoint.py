"""
Seqinit Checkpoint Container
Compact binary storage for named tensors (models, item tables, dataset snapshots)

File layout:
    [magic(4)] [version(1)] [manifest_len(4)]   little-endian header
    [manifest(N)]                               UTF-8 JSON, sorted keys
    [payload ...]                               raw little-endian 32-bit values

The manifest lists every tensor with name, dtype ('f4' or 'i4'), shape and
byte offset into the payload. Saving then loading is bit-exact, and the
container bytes are a pure function of the content so the SHA-256 digest
can serve as an artifact name.
"""

import hashlib
import json
import logging
import os
import struct
from dataclasses import dataclass, field
from typing import Any, Dict

import numpy as np

logger = logging.getLogger(__name__)

MAGIC = b'RCKP'
FORMAT_VERSION = 1
HEADER_FORMAT = '<4sBI'
HEADER_SIZE = struct.calcsize(HEADER_FORMAT)

_DTYPES = {'f4': np.dtype('<f4'), 'i4': np.dtype('<i4')}


class CheckpointError(ValueError):
    """Container bytes are not a valid checkpoint."""


@dataclass
class Checkpoint:
    """Named tensors plus a model kind and free-form metadata"""
    kind: str
    tensors: Dict[str, np.ndarray] = field(default_factory=dict)
    meta: Dict[str, Any] = field(default_factory=dict)

    def to_bytes(self) -> bytes:
        entries = []
        payload = bytearray()
        for name in self.tensors:
            arr = np.asarray(self.tensors[name])
            code = 'i4' if np.issubdtype(arr.dtype, np.integer) else 'f4'
            raw = np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes()
            entries.append({
                'name': name,
                'dtype': code,
                'shape': list(arr.shape),
                'offset': len(payload),
                'nbytes': len(raw),
            })
            payload += raw

        manifest = {
            'format_version': FORMAT_VERSION,
            'kind': self.kind,
            'meta': self.meta,
            'tensors': entries,
        }
        manifest_bytes = json.dumps(manifest, sort_keys=True, separators=(',', ':')).encode('utf-8')
        header = struct.pack(HEADER_FORMAT, MAGIC, FORMAT_VERSION, len(manifest_bytes))
        return header + manifest_bytes + bytes(payload)

    @classmethod
    def from_bytes(cls, data: bytes) -> "Checkpoint":
        if len(data) < HEADER_SIZE:
            raise CheckpointError("Invalid file format - truncated checkpoint header")
        magic, version, manifest_len = struct.unpack(HEADER_FORMAT, data[:HEADER_SIZE])
        if magic != MAGIC:
            raise CheckpointError("Invalid file format - not a seqinit checkpoint")
        if version != FORMAT_VERSION:
            raise CheckpointError(f"Unsupported format version: {version}. Only version {FORMAT_VERSION} is supported.")

        body_start = HEADER_SIZE + manifest_len
        try:
            manifest = json.loads(data[HEADER_SIZE:body_start].decode('utf-8'))
        except (UnicodeDecodeError, json.JSONDecodeError) as e:
            raise CheckpointError(f"Corrupt checkpoint manifest: {e}") from e

        tensors = {}
        for entry in manifest['tensors']:
            start = body_start + entry['offset']
            end = start + entry['nbytes']
            if end > len(data):
                raise CheckpointError(f"Truncated payload for tensor {entry['name']}")
            arr = np.frombuffer(data[start:end], dtype=_DTYPES[entry['dtype']])
            tensors[entry['name']] = arr.reshape(entry['shape']).copy()

        return cls(kind=manifest['kind'], tensors=tensors, meta=manifest.get('meta', {}))

    def content_hash(self) -> str:
        return hashlib.sha256(self.to_bytes()).hexdigest()

    def save(self, filepath: str) -> str:
        """Write the container; returns the content hash."""
        data = self.to_bytes()
        directory = os.path.dirname(filepath)
        if directory:
            os.makedirs(directory, exist_ok=True)
        with open(filepath, 'wb') as f:
            f.write(data)
        digest = hashlib.sha256(data).hexdigest()
        logger.debug("Saved %s checkpoint %s (%d bytes, %s)", self.kind, filepath, len(data), digest[:12])
        return digest


def load(filepath: str) -> Checkpoint:
    if not os.path.exists(filepath):
        raise FileNotFoundError(f"Checkpoint not found: {filepath}")
    with open(filepath, 'rb') as f:
        return Checkpoint.from_bytes(f.read())


def file_hash(filepath: str) -> str:
    with open(filepath, 'rb') as f:
        return hashlib.sha256(f.read()).hexdigest()


def artifact_name(label: str, digest: str, suffix: str = '.ckpt') -> str:
    """Content-hash artifact file name: <label>-<hash12><suffix>"""
    return f"{label}-{digest[:12]}{suffix}"


def save_artifact(checkpoint: Checkpoint, out_dir: str, label: str) -> str:
    """Save under a content-hash name in out_dir; returns the path."""
    digest = checkpoint.content_hash()
    path = os.path.join(out_dir, artifact_name(label, digest))
    checkpoint.save(path)
    return path


def get_file_info(filepath: str) -> Dict[str, Any]:
    """Summary of a checkpoint file without keeping its tensors around"""
    if not os.path.exists(filepath):
        return {}
    ckpt = load(filepath)
    file_size = os.path.getsize(filepath)
    return {
        'filepath': filepath,
        'format_version': FORMAT_VERSION,
        'kind': ckpt.kind,
        'meta': ckpt.meta,
        'tensor_count': len(ckpt.tensors),
        'value_count': int(sum(a.size for a in ckpt.tensors.values())),
        'file_size_bytes': file_size,
        'sha256': file_hash(filepath),
    }
