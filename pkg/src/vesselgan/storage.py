"""On-disk formats: raster input, preprocessed PNG output and the VGPS patch container.

VGPS layout (little endian)::

    magic  b"VGPS"      4 bytes
    version             uint16
    patch size S        uint16
    count N             uint32
    values              N * S * S float32, row-major
    labels              N * S * S uint8 (0/1; 0xFF everywhere when unlabeled)
"""

from __future__ import annotations

import hashlib
import io
import json
import struct
from pathlib import Path
from typing import BinaryIO, Iterable, List, Optional

import numpy as np
from PIL import Image

from .exceptions import ContainerFormatError
from .imaging import GrayImage, PatchSet, UNIT_RANGE

MAGIC = b"VGPS"
VERSION = 1
UNLABELED = 0xFF
_HEADER = struct.Struct("<4sHHI")


def read_raster(path) -> np.ndarray:
    """Read TIFF / GIF / PPM / PNG into a numpy array (RGB for colour, 2-D otherwise)."""
    with Image.open(path) as im:
        if im.mode in ("P", "1", "LA", "PA"):
            im = im.convert("L")
        elif im.mode in ("RGBA", "CMYK", "YCbCr"):
            im = im.convert("RGB")
        return np.asarray(im).copy()


def read_mask(path) -> np.ndarray:
    arr = read_raster(path)
    if arr.ndim == 3:
        arr = arr.max(axis=2)
    return arr > 0


def encode_png16(values: np.ndarray) -> bytes:
    """Lossless 16-bit PNG of a [0, 1] image (quantised to 1/65535)."""
    q = np.round(np.clip(values, 0.0, 1.0) * 65535).astype(np.uint16)
    buf = io.BytesIO()
    Image.fromarray(q).save(buf, format="PNG", optimize=False)
    return buf.getvalue()


def decode_png16(data_or_path) -> GrayImage:
    src = io.BytesIO(data_or_path) if isinstance(data_or_path, (bytes, bytearray)) else data_or_path
    with Image.open(src) as im:
        q = np.asarray(im).astype(np.float64)
    return GrayImage(q / 65535.0, UNIT_RANGE)


def sha256_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_preprocessed(out_dir, records: Iterable[tuple]) -> Path:
    """Write ``(image_id, split, GrayImage)`` records as PNGs plus ``manifest.jsonl``.

    Returns the manifest path. One JSON object per line: id, split, file, checksum.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = out_dir / "manifest.jsonl"
    lines = []
    for image_id, split, gray in records:
        data = encode_png16(gray.values)
        name = f"{image_id}.png"
        (out_dir / name).write_bytes(data)
        lines.append(json.dumps({"id": image_id, "split": split, "file": name, "checksum": sha256_bytes(data)}, sort_keys=True))
    manifest.write_text("\n".join(lines) + ("\n" if lines else ""))
    return manifest


def read_manifest(path) -> List[dict]:
    return [json.loads(line) for line in Path(path).read_text().splitlines() if line.strip()]


def write_patchset(fh: BinaryIO, patches: PatchSet) -> None:
    n, s = len(patches), patches.size
    fh.write(_HEADER.pack(MAGIC, VERSION, s, n))
    fh.write(np.ascontiguousarray(patches.values, dtype="<f4").tobytes())
    if patches.labels is None:
        fh.write(bytes([UNLABELED]) * (n * s * s))
    else:
        fh.write(np.ascontiguousarray(patches.labels, dtype=np.uint8).tobytes())


def _read_exact(fh: BinaryIO, n: int) -> bytes:
    data = fh.read(n)
    if len(data) != n:
        raise ContainerFormatError(f"truncated VGPS container: wanted {n} bytes, got {len(data)}")
    return data


def read_patchset(fh: BinaryIO, centers: Optional[np.ndarray] = None, source_ids=None) -> PatchSet:
    magic, version, s, n = _HEADER.unpack(_read_exact(fh, _HEADER.size))
    if magic != MAGIC:
        raise ContainerFormatError(f"bad magic {magic!r}, expected {MAGIC!r}")
    if version != VERSION:
        raise ContainerFormatError(f"unsupported VGPS version {version}")
    values = np.frombuffer(_read_exact(fh, 4 * n * s * s), dtype="<f4").reshape(n, s, s).astype(np.float32)
    raw = np.frombuffer(_read_exact(fh, n * s * s), dtype=np.uint8).reshape(n, s, s)
    if n and np.all(raw == UNLABELED):
        labels = None
    elif np.any(raw > 1):
        raise ContainerFormatError("label plane holds values other than 0, 1 or the unlabeled sentinel")
    else:
        labels = raw.astype(bool) if n else np.zeros((0, s, s), bool)
    if centers is None:
        centers = np.full((n, 2), -1, np.int64)
    if source_ids is None:
        source_ids = np.full(n, "", dtype=object)
    return PatchSet(values, labels, centers, source_ids, s)


def save_patchset(path, patches: PatchSet) -> None:
    with open(path, "wb") as fh:
        write_patchset(fh, patches)


def load_patchset(path) -> PatchSet:
    with open(path, "rb") as fh:
        return read_patchset(fh)
