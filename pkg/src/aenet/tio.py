"""FTNS tensor files, binary PGM masks and on-disk episode directories.

FTNS layout (all little-endian)::

    b"FTNS" | u8 version=1 | u8 dtype (0=f32, 1=f64) | u8 ndim | ndim x u32 dims | payload
"""

from __future__ import annotations

import json
import os
import struct
from pathlib import Path

import numpy as np

MAGIC = b"FTNS"
VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


class FormatError(ValueError):
    """A file does not follow the expected binary layout."""


def write_tensor(path, t) -> None:
    t = np.asarray(t)
    code = 0 if t.dtype.kind == "f" and t.dtype.itemsize == 4 else 1
    header = MAGIC + struct.pack("<BBB", VERSION, code, t.ndim) + struct.pack(f"<{t.ndim}I", *t.shape)
    payload = np.ascontiguousarray(t, dtype=_DTYPES[code]).tobytes()
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(payload)


def read_tensor(path) -> np.ndarray:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 7 or raw[:4] != MAGIC:
        raise FormatError(f"{path}: bad magic, not an FTNS file")
    version, code, ndim = struct.unpack_from("<BBB", raw, 4)
    if version != VERSION:
        raise FormatError(f"{path}: unsupported FTNS version {version}")
    if code not in _DTYPES:
        raise FormatError(f"{path}: unknown dtype code {code}")
    off = 7 + 4 * ndim
    if len(raw) < off:
        raise FormatError(f"{path}: truncated header")
    dims = struct.unpack_from(f"<{ndim}I", raw, 7)
    dt = _DTYPES[code]
    n = int(np.prod(dims, dtype=np.int64))
    if len(raw) - off != n * dt.itemsize:
        raise FormatError(f"{path}: payload has {len(raw) - off} bytes, expected {n * dt.itemsize}")
    out = np.frombuffer(raw, dtype=dt, count=n, offset=off).reshape(dims)
    return out.astype(dt.newbyteorder("="))


def mask_to_bytes(m) -> np.ndarray:
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2:
        raise ValueError(f"mask must be 2-D, got shape {m.shape}")
    if not np.all(np.isfinite(m)) or m.min() < 0.0 or m.max() > 1.0:
        raise ValueError("mask values must lie in [0, 1]")
    return np.floor(255.0 * m + 0.5).astype(np.uint8)


def write_mask_pgm(path, m) -> None:
    """Write a mask as binary PGM (P5, maxval 255), rounding half up."""
    px = mask_to_bytes(m)
    h, w = px.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(px.tobytes())


def read_pgm(path) -> np.ndarray:
    """Read a P5 PGM (maxval <= 255) into a uint8 ``H x W`` array."""
    with open(path, "rb") as fh:
        raw = fh.read()
    tokens: list[bytes] = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(raw) and raw[pos : pos + 1].isspace():
            pos += 1
        if raw[pos : pos + 1] == b"#":
            while pos < len(raw) and raw[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError(f"{path}: truncated PGM header")
        tokens.append(raw[start:pos])
    if tokens[0] != b"P5":
        raise FormatError(f"{path}: not a binary PGM")
    w, h, maxval = (int(t) for t in tokens[1:])
    if maxval > 255:
        raise FormatError(f"{path}: 16-bit PGM not supported")
    pos += 1
    data = raw[pos : pos + w * h]
    if len(data) != w * h:
        raise FormatError(f"{path}: truncated PGM payload")
    return np.frombuffer(data, dtype=np.uint8).reshape(h, w).copy()


def read_mask(path) -> np.ndarray:
    """Mask in [0, 1] from a PGM or FTNS file."""
    with open(path, "rb") as fh:
        head = fh.read(4)
    if head == MAGIC:
        return np.asarray(read_tensor(path), dtype=np.float64)
    return read_pgm(path).astype(np.float64) / 255.0


# --- episode directories ---------------------------------------------------------


def _check_target(path: Path, force: bool) -> None:
    if path.exists() and not force:
        raise FileExistsError(f"{path} exists; pass --force to overwrite")


def save_episode(ep, directory, force: bool = False, cfg=None) -> dict:
    """Write an episode as FTNS features + PGM masks with a JSON manifest."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    files = {
        "query_feat": "query_feat.ftns",
        "query_feat_high": "query_feat_high.ftns",
        "query_gt": "query_gt.pgm",
        "supports": [],
    }
    targets = [d / "manifest.json", d / files["query_feat"], d / files["query_feat_high"], d / files["query_gt"]]
    for i in range(ep.k):
        sf = {"feat": f"support{i}_feat.ftns", "feat_high": f"support{i}_feat_high.ftns", "mask": f"support{i}_mask.pgm"}
        files["supports"].append(sf)
        targets += [d / v for v in sf.values()]
    for t in targets:
        _check_target(t, force)

    write_tensor(d / files["query_feat"], ep.query_feat)
    write_tensor(d / files["query_feat_high"], ep.query_feat_high)
    write_mask_pgm(d / files["query_gt"], ep.query_gt)
    for s, sf in zip(ep.supports, files["supports"]):
        write_tensor(d / sf["feat"], s.feat)
        write_tensor(d / sf["feat_high"], s.feat_high)
        write_mask_pgm(d / sf["mask"], s.mask)
    manifest = {
        "config": cfg.to_dict() if cfg is not None else None,
        "split": ep.split,
        "fg_class": int(ep.fg_class),
        "blur_radius": float(ep.blur_radius),
        "query_bg_classes": list(ep.query_bg_classes),
        "support_bg_classes": [list(s.bg_classes) for s in ep.supports],
        "meta": ep.meta,
        "files": files,
    }
    with open(d / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2)
    return manifest


def load_episode(directory):
    from .synth import Episode, Support

    d = Path(directory)
    try:
        with open(d / "manifest.json") as fh:
            manifest = json.load(fh)
    except json.JSONDecodeError as exc:
        raise FormatError(f"{d / 'manifest.json'}: malformed JSON ({exc})") from None
    files = manifest["files"]
    supports = [
        Support(
            read_tensor(d / sf["feat"]).astype(np.float64),
            read_tensor(d / sf["feat_high"]).astype(np.float64),
            read_mask(d / sf["mask"]),
            tuple(bg),
        )
        for sf, bg in zip(files["supports"], manifest.get("support_bg_classes", [()] * len(files["supports"])))
    ]
    return Episode(
        read_tensor(d / files["query_feat"]).astype(np.float64),
        read_tensor(d / files["query_feat_high"]).astype(np.float64),
        read_mask(d / files["query_gt"]),
        supports,
        manifest["fg_class"],
        manifest["blur_radius"],
        manifest["split"],
        tuple(manifest.get("query_bg_classes", ())),
        manifest.get("meta", {}),
    )


def atomic_write_text(path, text: str, force: bool = False) -> None:
    path = Path(path)
    _check_target(path, force)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)
