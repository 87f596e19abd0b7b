"""On-disk formats: PFM rasters, binary checkpoints, the dataset manifest."""

from __future__ import annotations

import json
import os
import re
import struct

import numpy as np

CKPT_MAGIC = b"URGTCKPT"
CKPT_VERSION = 1


class PFMError(ValueError):
    pass


class CheckpointError(ValueError):
    pass


# --------------------------------------------------------------------- PFM


def write_pfm(path, raster):
    """Write ``[H, W]`` (``Pf``) or ``[3, H, W]`` (``PF``) as little-endian
    float32, rows bottom-to-top."""
    raster = np.asarray(raster)
    if raster.ndim == 2:
        tag, h, w = b"Pf", *raster.shape
        body = raster[::-1]
    elif raster.ndim == 3 and raster.shape[0] == 3:
        tag, (_, h, w) = b"PF", raster.shape
        body = raster.transpose(1, 2, 0)[::-1]
    else:
        raise PFMError(f"PFM holds 1 or 3 channels, got shape {raster.shape}")
    data = np.ascontiguousarray(body, dtype="<f4").tobytes()
    with open(path, "wb") as fh:
        fh.write(tag + b"\n" + f"{w} {h}\n".encode() + b"-1.0\n" + data)


def _read_token(buf, pos):
    while pos < len(buf) and buf[pos:pos + 1].isspace():
        pos += 1
    start = pos
    while pos < len(buf) and not buf[pos:pos + 1].isspace():
        pos += 1
    if start == pos:
        raise PFMError(f"truncated PFM header at byte {start}")
    return buf[start:pos], pos


def parse_pfm(buf: bytes):
    tag, pos = _read_token(buf, 0)
    if tag not in (b"Pf", b"PF"):
        raise PFMError(f"bad PFM magic {tag!r} at byte 0")
    fields = []
    for _ in range(3):
        start = pos
        tok, pos = _read_token(buf, pos)
        fields.append((tok, start))
    try:
        w = int(fields[0][0])
        h = int(fields[1][0])
    except ValueError:
        raise PFMError(f"bad PFM dimensions at byte {fields[0][1]}") from None
    try:
        scale = float(fields[2][0])
    except ValueError:
        raise PFMError(f"bad PFM scale at byte {fields[2][1]}") from None
    if w <= 0 or h <= 0 or scale == 0:
        raise PFMError(f"bad PFM header values at byte {fields[0][1]}")
    pos += 1  # single whitespace byte ends the header
    channels = 3 if tag == b"PF" else 1
    n_bytes = w * h * channels * 4
    if len(buf) - pos < n_bytes:
        raise PFMError(
            f"truncated PFM payload: need {n_bytes} bytes from byte {pos}, have {len(buf) - pos}"
        )
    dtype = "<f4" if scale < 0 else ">f4"
    data = np.frombuffer(buf, dtype=dtype, count=w * h * channels, offset=pos)
    data = data.astype(np.float32).reshape(h, w, channels)[::-1]
    if channels == 1:
        return np.ascontiguousarray(data[..., 0])
    return np.ascontiguousarray(data.transpose(2, 0, 1))


def read_pfm(path):
    with open(path, "rb") as fh:
        return parse_pfm(fh.read())


# -------------------------------------------------------------- checkpoint


def save_checkpoint(path, arch: dict, params: dict, moments=None, step=0, rng_state=None):
    """Versioned binary: magic, version, JSON header, then length-prefixed
    ``name / shape / float64 data`` records (little-endian throughout)."""
    records = [(k, np.asarray(v)) for k, v in params.items()]
    if moments:
        for kind in ("m", "v"):
            records += [(f"adam.{kind}/{k}", np.asarray(v)) for k, v in moments[kind].items()]
    header = json.dumps(
        {"arch": arch, "step": int(step), "rng_state": rng_state,
         "adam_t": int(moments["t"]) if moments else 0},
        sort_keys=True,
    ).encode()
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<II", CKPT_VERSION, len(header)))
        fh.write(header)
        fh.write(struct.pack("<I", len(records)))
        for name, arr in records:
            nb = name.encode()
            fh.write(struct.pack("<I", len(nb)))
            fh.write(nb)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_checkpoint(path):
    """Returns ``(header, params, moments)``; ``moments`` is None when the
    file carries no optimizer state."""
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:8] != CKPT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    pos = 8

    def take(fmt):
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > len(buf):
            raise CheckpointError(f"{path}: truncated at byte {pos}")
        out = struct.unpack_from(fmt, buf, pos)
        pos += size
        return out

    version, hlen = take("<II")
    if version != CKPT_VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    header = json.loads(buf[pos:pos + hlen].decode())
    pos += hlen
    (count,) = take("<I")
    params, m, v = {}, {}, {}
    for _ in range(count):
        (nlen,) = take("<I")
        name = buf[pos:pos + nlen].decode()
        pos += nlen
        (ndim,) = take("<I")
        shape = take(f"<{ndim}Q") if ndim else ()
        n = int(np.prod(shape)) if shape else 1
        if pos + 8 * n > len(buf):
            raise CheckpointError(f"{path}: truncated tensor {name!r} at byte {pos}")
        arr = np.frombuffer(buf, dtype="<f8", count=n, offset=pos).reshape(shape).astype(np.float64)
        pos += 8 * n
        if name.startswith("adam.m/"):
            m[name[7:]] = arr
        elif name.startswith("adam.v/"):
            v[name[7:]] = arr
        else:
            params[name] = arr
    moments = {"m": m, "v": v, "t": header.get("adam_t", 0)} if m else None
    return header, params, moments


# ---------------------------------------------------------------- manifest

MANIFEST = "manifest.txt"
_KEY = re.compile(r"^[A-Za-z_][A-Za-z0-9_]*$")


def write_manifest(root, records):
    """One tab-separated line per frame:
    ``id split rgb depth normal coarse_depth coarse_normal camera``."""
    lines = []
    for r in records:
        cam = ",".join(str(x) for x in r["camera"])
        lines.append("\t".join([r["id"], r["split"], r["rgb"], r["depth"], r["normal"],
                                r["coarse_depth"], r["coarse_normal"], cam]))
    with open(os.path.join(root, MANIFEST), "w") as fh:
        fh.write("\n".join(lines) + "\n")


def read_manifest(root):
    cols = ("id", "split", "rgb", "depth", "normal", "coarse_depth", "coarse_normal")
    out = []
    with open(os.path.join(root, MANIFEST)) as fh:
        for n, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 8:
                raise ValueError(f"{root}/{MANIFEST}:{n}: expected 8 fields, got {len(parts)}")
            rec = dict(zip(cols, parts[:7]))
            rec["camera"] = parts[7].split(",")
            out.append(rec)
    return out


def parse_key_values(text, source="<config>"):
    """``key = value`` lines with ``#`` comments -> ordered dict of strings."""
    out = {}
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{source}:{n}: expected 'key = value', got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if not _KEY.match(key):
            raise ValueError(f"{source}:{n}: bad key {key!r}")
        out[key] = value
    return out
