"""
Artifact storage and binary file formats

This module handles everything written to or read from disk: model
checkpoints (with their vocabulary sidecar), patches, inverted-embedding
files, PPM images and the JSON/CSV reports. Tensor files share one layout:

    magic (4 bytes) | version u32 | digest (32 bytes) | json length u32 |
    json (UTF-8) | payload sha256 (32 bytes) | payload length u64 | payload

The payload is a tensor count u32 followed by, for every tensor, name length
u32, name (UTF-8), rank u32, extents u32 each, then little-endian float64
data in row-major order. All integers are little-endian.
"""

import csv
import hashlib
import io
import json
import logging
import os
import re
import struct
from pathlib import Path
from typing import Any, Dict, Iterable, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from ..denoiser import Denoiser
from ..errors import ConfigError, FormatError, OutputPathError, ShapeError
from ..models import DenoiserConfig, ModelPatch
from ..tensor import Tensor
from ..text import Vocabulary

logger = logging.getLogger(__name__)

VERSION = 1
CHECKPOINT_MAGIC = b"RSTR"
PATCH_MAGIC = b"RPCH"
TENSORS_MAGIC = b"RTNS"
KINDS = {CHECKPOINT_MAGIC: "checkpoint", PATCH_MAGIC: "patch", TENSORS_MAGIC: "embeddings"}

_PREFIX = struct.Struct("<4sI32sI")
_TRAILER = struct.Struct("<32sQ")
_U32 = struct.Struct("<I")
_PPM_HEADER = re.compile(rb"P6\s+(\d+)\s+(\d+)\s+(\d+)\s")

PathLike = Union[str, os.PathLike]


def canonical_json(value: Any) -> str:
    """Stable JSON text: sorted keys, no insignificant whitespace"""
    return json.dumps(value, sort_keys=True, separators=(",", ":"))


# Tensor payload

def encode_tensors(tensors: Mapping[str, Union[np.ndarray, Tensor]]) -> bytes:
    buf = io.BytesIO()
    buf.write(_U32.pack(len(tensors)))
    for name, value in tensors.items():
        data = value.data if isinstance(value, Tensor) else np.asarray(value, dtype=np.float64)
        encoded = name.encode("utf-8")
        buf.write(_U32.pack(len(encoded)))
        buf.write(encoded)
        buf.write(_U32.pack(data.ndim))
        buf.write(np.asarray(data.shape, dtype="<u4").tobytes())
        buf.write(np.ascontiguousarray(data, dtype="<f8").tobytes())
    return buf.getvalue()


class _Reader:
    """Bounds-checked cursor over a byte buffer"""

    def __init__(self, data: bytes, what: str):
        self.data = memoryview(data)
        self.pos = 0
        self.what = what

    def take(self, size: int) -> memoryview:
        if self.pos + size > len(self.data):
            raise FormatError(f"{self.what} is truncated")
        chunk = self.data[self.pos:self.pos + size]
        self.pos += size
        return chunk

    def u32(self) -> int:
        return _U32.unpack(self.take(_U32.size))[0]


def decode_tensors(payload: bytes) -> Dict[str, np.ndarray]:
    reader = _Reader(payload, "tensor payload")
    tensors: Dict[str, np.ndarray] = {}
    for _ in range(reader.u32()):
        name = bytes(reader.take(reader.u32())).decode("utf-8")
        rank = reader.u32()
        shape = tuple(int(v) for v in np.frombuffer(reader.take(4 * rank), dtype="<u4"))
        count = int(np.prod(shape)) if shape else 1
        data = np.frombuffer(reader.take(8 * count), dtype="<f8").astype(np.float64).reshape(shape)
        if name in tensors:
            raise FormatError(f"duplicate tensor {name!r}")
        tensors[name] = data
    if reader.pos != len(payload):
        raise FormatError("trailing bytes after the last tensor")
    return tensors


# Framed files

def pack_file(magic: bytes, digest: bytes, header: Mapping[str, Any], tensors: Mapping[str, Any]) -> bytes:
    payload = encode_tensors(tensors)
    meta = canonical_json(header).encode("utf-8")
    return b"".join([
        _PREFIX.pack(magic, VERSION, digest, len(meta)),
        meta,
        _TRAILER.pack(hashlib.sha256(payload).digest(), len(payload)),
        payload,
    ])


def unpack_file(data: bytes, magic: bytes) -> Tuple[bytes, Dict[str, Any], Dict[str, np.ndarray]]:
    """Validate framing and return (digest, header json, tensors)"""
    kind = KINDS[magic]
    reader = _Reader(data, f"{kind} file")
    found, version, digest, meta_len = _PREFIX.unpack(reader.take(_PREFIX.size))
    if found != magic:
        other = KINDS.get(found)
        hint = f" (it is a {other} file)" if other else ""
        raise FormatError(f"not a {kind} file: magic {found!r}{hint}")
    if version != VERSION:
        raise FormatError(f"unsupported {kind} version {version}; this build reads version {VERSION}")
    try:
        header = json.loads(bytes(reader.take(meta_len)).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{kind} header is damaged: {exc}") from exc
    payload_hash, payload_len = _TRAILER.unpack(reader.take(_TRAILER.size))
    payload = bytes(reader.take(payload_len))
    if reader.pos != len(data):
        raise FormatError(f"{kind} file has trailing bytes")
    if hashlib.sha256(payload).digest() != payload_hash:
        raise FormatError(f"{kind} payload hash mismatch; the file is damaged")
    return digest, header, decode_tensors(payload)


def _read(path: PathLike) -> bytes:
    try:
        return Path(path).read_bytes()
    except OSError as exc:
        raise FormatError(f"cannot read {path}: {exc}") from exc


# Checkpoints

def checkpoint_bytes(model: Denoiser) -> bytes:
    header = {"format": "resteer-checkpoint", "denoiser": model.cfg.to_dict()}
    return pack_file(CHECKPOINT_MAGIC, model.vocab.digest(), header, model.state_dict())


def vocab_path(path: PathLike) -> Path:
    return Path(path).with_suffix(".vocab")


def load_checkpoint(path: PathLike) -> Denoiser:
    """Read a checkpoint and its vocabulary sidecar"""
    vocab_digest, header, tensors = unpack_file(_read(path), CHECKPOINT_MAGIC)
    sidecar = vocab_path(path)
    try:
        vocab = Vocabulary.from_text(sidecar.read_text(encoding="utf-8"))
    except OSError as exc:
        raise FormatError(f"missing vocabulary sidecar {sidecar}") from exc
    if vocab.digest() != vocab_digest:
        raise FormatError(f"vocabulary {sidecar} does not match the checkpoint header hash")
    try:
        cfg = DenoiserConfig(**header["denoiser"])
    except (KeyError, TypeError, ConfigError) as exc:
        raise FormatError(f"checkpoint header has no valid denoiser config: {exc}") from exc
    params = {name: Tensor(value, name=name) for name, value in tensors.items()}
    try:
        return Denoiser(cfg, vocab, params)
    except ShapeError as exc:
        raise FormatError(f"checkpoint tensors do not fit its config: {exc}") from exc


# Patches

def patch_bytes(patch: ModelPatch) -> bytes:
    return pack_file(PATCH_MAGIC, patch.base_fingerprint, patch.metadata, patch.deltas)


def load_patch(path: PathLike) -> ModelPatch:
    base, metadata, deltas = unpack_file(_read(path), PATCH_MAGIC)
    return ModelPatch(base_fingerprint=base, deltas=deltas, metadata=metadata)


# Inverted embeddings

def embeddings_bytes(embeddings: np.ndarray, metadata: Optional[Mapping[str, Any]] = None) -> bytes:
    return pack_file(TENSORS_MAGIC, bytes(32), dict(metadata or {}), {"placeholders": np.atleast_2d(embeddings)})


def load_embeddings(path: PathLike) -> np.ndarray:
    _, _, tensors = unpack_file(_read(path), TENSORS_MAGIC)
    if "placeholders" not in tensors:
        raise FormatError(f"{path} holds no placeholder vectors")
    return tensors["placeholders"]


# Images

def to_bytes_image(image: np.ndarray) -> np.ndarray:
    """Map [-1, 1] floats to uint8 pixels"""
    return np.clip(np.round((np.asarray(image) + 1.0) * 127.5), 0, 255).astype(np.uint8)


def ppm_bytes(image: np.ndarray) -> bytes:
    pixels = to_bytes_image(image)
    if pixels.ndim != 3 or pixels.shape[2] != 3:
        raise FormatError(f"PPM needs an (H, W, 3) image, got {pixels.shape}")
    height, width, _ = pixels.shape
    return f"P6\n{width} {height}\n255\n".encode("ascii") + pixels.tobytes()


def load_ppm(path: PathLike) -> np.ndarray:
    """Read a binary PPM as floats in [-1, 1]"""
    data = _read(path)
    header = _PPM_HEADER.match(data)
    if header is None:
        raise FormatError(f"{path} is not a binary PPM")
    width, height, maxval = (int(v) for v in header.groups())
    if maxval != 255:
        raise FormatError(f"{path}: only 8-bit PPM is supported")
    pixels = data[header.end():]
    if len(pixels) != width * height * 3:
        raise FormatError(f"{path} is truncated")
    arr = np.frombuffer(pixels, dtype=np.uint8).reshape(height, width, 3)
    return arr.astype(np.float64) / 127.5 - 1.0


def mosaic(images: Sequence[np.ndarray], columns: Optional[int] = None, gap: int = 1) -> np.ndarray:
    """Tile images into one grid, separated by ``gap`` pixels of -1"""
    if len(images) == 0:
        raise FormatError("mosaic needs at least one image")
    h, w, c = np.asarray(images[0]).shape
    columns = columns or int(np.ceil(np.sqrt(len(images))))
    rows = int(np.ceil(len(images) / columns))
    grid = -np.ones((rows * (h + gap) - gap, columns * (w + gap) - gap, c))
    for k, img in enumerate(images):
        r, col = divmod(k, columns)
        grid[r * (h + gap):r * (h + gap) + h, col * (w + gap):col * (w + gap) + w] = img
    return grid


class ArtifactStore:
    """Writes every artifact of a run beneath one output directory"""

    def __init__(self, root: PathLike = "out"):
        self.root = Path(root).resolve()

    def ensure_directory_exists(self, path: Optional[Path] = None):
        """Create the output directory (or a subdirectory of it) if needed"""
        os.makedirs(path or self.root, exist_ok=True)

    def path_for(self, name: PathLike) -> Path:
        """Absolute path of ``name`` inside the root; refuses anything that escapes it"""
        target = (self.root / name).resolve()
        if target != self.root and self.root not in target.parents:
            raise OutputPathError(f"{name} resolves outside the output directory {self.root}")
        return target

    def _write(self, name: PathLike, data: bytes) -> Path:
        path = self.path_for(name)
        self.ensure_directory_exists(path.parent)
        path.write_bytes(data)
        logger.info("wrote %s (%d bytes)", path, len(data))
        return path

    def save_checkpoint(self, name: PathLike, model: Denoiser) -> Path:
        path = self._write(name, checkpoint_bytes(model))
        self._write(vocab_path(path).relative_to(self.root), model.vocab.to_text().encode("utf-8"))
        return path

    def save_patch(self, name: PathLike, patch: ModelPatch) -> Path:
        return self._write(name, patch_bytes(patch))

    def save_embeddings(self, name: PathLike, embeddings: np.ndarray, metadata: Optional[Mapping[str, Any]] = None) -> Path:
        return self._write(name, embeddings_bytes(embeddings, metadata))

    def save_image(self, name: PathLike, image: np.ndarray) -> Path:
        return self._write(name, ppm_bytes(image))

    def save_mosaic(self, name: PathLike, images: Sequence[np.ndarray], columns: Optional[int] = None) -> Path:
        return self._write(name, ppm_bytes(mosaic(images, columns)))

    def write_json(self, name: PathLike, value: Any) -> Path:
        try:
            text = json.dumps(value, indent=2, sort_keys=True, allow_nan=False) + "\n"
        except ValueError as exc:
            raise FormatError(f"{name}: {exc}") from exc
        return self._write(name, text.encode("utf-8"))

    def write_csv(self, name: PathLike, header: Sequence[str], rows: Iterable[Sequence[Any]]) -> Path:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([_csv_value(v) for v in row])
        return self._write(name, buf.getvalue().encode("utf-8"))


def _csv_value(value: Any) -> Any:
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    return value


def read_csv(path: PathLike) -> List[Dict[str, str]]:
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))
