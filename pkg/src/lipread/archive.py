"""Binary and text containers shared by every stage.

Feature archive layout: magic ``VLF1`` then repeated records of
``u32 id_len | id (utf-8) | u32 T | u32 D | T*D float64``, all little endian,
row-major.
"""

from __future__ import annotations

import io
import json
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

MAGIC = b"VLF1"
_U32 = struct.Struct("<I")


class ArchiveError(ValueError):
    pass


def _write_record(fh, key: str, mat: np.ndarray):
    mat = np.asarray(mat, dtype="<f8")
    if mat.ndim == 1:
        mat = mat[None, :]
    if mat.ndim != 2:
        raise ArchiveError(f"record {key!r}: expected a matrix, got shape {mat.shape}")
    if not np.all(np.isfinite(mat)):
        raise ArchiveError(f"record {key!r}: non-finite values")
    kb = key.encode("utf-8")
    fh.write(_U32.pack(len(kb)))
    fh.write(kb)
    fh.write(_U32.pack(mat.shape[0]))
    fh.write(_U32.pack(mat.shape[1]))
    fh.write(np.ascontiguousarray(mat).tobytes())


def _read_exact(fh, n):
    buf = fh.read(n)
    if len(buf) != n:
        raise ArchiveError("malformed archive: truncated record")
    return buf


def _read_records(fh):
    out: dict[str, np.ndarray] = {}
    while True:
        head = fh.read(4)
        if not head:
            return out
        if len(head) != 4:
            raise ArchiveError("malformed archive: truncated record")
        (klen,) = _U32.unpack(head)
        try:
            key = _read_exact(fh, klen).decode("utf-8")
        except UnicodeDecodeError:
            raise ArchiveError("malformed archive: bad utterance id") from None
        (T,) = _U32.unpack(_read_exact(fh, 4))
        (D,) = _U32.unpack(_read_exact(fh, 4))
        data = np.frombuffer(_read_exact(fh, 8 * T * D), dtype="<f8")
        if key in out:
            raise ArchiveError(f"duplicate id {key!r}")
        out[key] = data.reshape(T, D).astype(np.float64)


def write_feature_archive(mats: Mapping[str, np.ndarray], path):
    buf = io.BytesIO()
    buf.write(MAGIC)
    for key, mat in mats.items():
        _write_record(buf, key, mat)
    Path(path).write_bytes(buf.getvalue())


def read_feature_archive(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        if fh.read(4) != MAGIC:
            raise ArchiveError("malformed archive: bad magic")
        return _read_records(fh)


# ROI files: magic, u32 H, u32 W, then a single record with D = H*W.
def write_roi(utt_id: str, images: np.ndarray, path):
    images = np.asarray(images, dtype=np.float64)
    if images.ndim != 3:
        raise ArchiveError("ROI sequence must be T x H x W")
    T, H, W = images.shape
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(_U32.pack(H))
    buf.write(_U32.pack(W))
    _write_record(buf, utt_id, images.reshape(T, H * W))
    Path(path).write_bytes(buf.getvalue())


def read_roi(path) -> tuple[str, np.ndarray]:
    with open(path, "rb") as fh:
        if fh.read(4) != MAGIC:
            raise ArchiveError("malformed archive: bad magic")
        (H,) = _U32.unpack(_read_exact(fh, 4))
        (W,) = _U32.unpack(_read_exact(fh, 4))
        recs = _read_records(fh)
    if len(recs) != 1:
        raise ArchiveError("malformed archive: ROI file must hold one utterance")
    (key, mat), = recs.items()
    if mat.shape[1] != H * W:
        raise ArchiveError(f"dimension mismatch: {mat.shape[1]} != {H}x{W}")
    return key, mat.reshape(-1, H, W)


def read_transcripts(path) -> dict[str, list[str]]:
    out: dict[str, list[str]] = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        parts = line.split()
        if not parts:
            continue
        if parts[0] in out:
            raise ArchiveError(f"line {lineno}: duplicate id {parts[0]!r}")
        out[parts[0]] = parts[1:]
    return out


def write_transcripts(trans: Mapping[str, list[str]], path):
    text = "".join(f"{k} {' '.join(v)}\n" for k, v in trans.items())
    Path(path).write_text(text, encoding="utf-8")


FORMAT_VERSION = 1


def save_container(path, arrays: Mapping[str, np.ndarray], meta: dict):
    """Versioned model container: named arrays plus a JSON metadata blob."""
    meta = dict(meta, format_version=FORMAT_VERSION)
    payload = {k: np.asarray(v) for k, v in arrays.items()}
    payload["__meta__"] = np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)
    with open(path, "wb") as fh:
        np.savez(fh, **payload)


def load_container(path) -> tuple[dict[str, np.ndarray], dict]:
    with np.load(path, allow_pickle=False) as z:
        arrays = {k: z[k] for k in z.files if k != "__meta__"}
        meta = json.loads(z["__meta__"].tobytes().decode())
    if meta.get("format_version") != FORMAT_VERSION:
        raise ArchiveError(f"unsupported container version {meta.get('format_version')}")
    return arrays, meta
