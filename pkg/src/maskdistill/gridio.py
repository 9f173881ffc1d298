"""Zero-dependency tensor I/O: portable pixmaps and a raw float container.

Two families are supported:

* the netpbm family for 8-bit images (``.pgm`` P2/P5, ``.ppm`` P3/P6, and
  bilevel ``.pbm`` P4 for binary masks), with pixel values mapped to [0, 1]
  by dividing by the stored maxval;
* ``.fgrid``, a dimension-tagged float64 container for masks and
  spectrogram-like tensors. Layout: the ASCII line ``FGRID 1``, an ASCII
  header line ``<ndim> <dim0> <dim1> ...``, then the raw little-endian
  float64 values in C order. Round trips are bitwise exact.
"""

from __future__ import annotations

import re
from pathlib import Path

import numpy as np

FGRID_MAGIC = b"FGRID 1\n"


class FormatError(ValueError):
    """Unsupported or corrupt input file."""


def save_fgrid(array, path):
    array = np.ascontiguousarray(array, dtype="<f8")
    header = f"{array.ndim} " + " ".join(str(d) for d in array.shape) + "\n"
    with open(path, "wb") as fh:
        fh.write(FGRID_MAGIC)
        fh.write(header.encode("ascii"))
        fh.write(array.tobytes())


def load_fgrid(path):
    with open(path, "rb") as fh:
        magic = fh.readline()
        if magic != FGRID_MAGIC:
            raise FormatError(f"{path}: not an FGRID 1 file")
        fields = fh.readline().split()
        if not fields:
            raise FormatError(f"{path}: missing dimension header")
        ndim = int(fields[0])
        dims = [int(v) for v in fields[1:]]
        if len(dims) != ndim:
            raise FormatError(f"{path}: header declares {ndim} dims, lists {len(dims)}")
        count = int(np.prod(dims)) if dims else 1
        data = np.frombuffer(fh.read(), dtype="<f8")
        if data.size != count:
            raise FormatError(f"{path}: expected {count} values, found {data.size}")
    return data.reshape(dims).astype(np.float64)


def _read_pnm_tokens(data, n_tokens):
    """Pull whitespace/comment-separated ASCII tokens off a pnm header."""
    tokens = []
    i = 0
    while len(tokens) < n_tokens:
        if i >= len(data):
            raise FormatError("truncated pnm header")
        ch = data[i:i + 1]
        if ch == b"#":
            while i < len(data) and data[i:i + 1] not in (b"\n", b"\r"):
                i += 1
        elif ch.isspace():
            i += 1
        else:
            j = i
            while j < len(data) and not data[j:j + 1].isspace() and data[j:j + 1] != b"#":
                j += 1
            tokens.append(data[i:j])
            i = j
    return tokens, i + 1  # consume the single whitespace after the last token


def load_image(path):
    """Read a pgm/ppm/pbm file into an (H, W, C) float64 array in [0, 1]."""
    data = Path(path).read_bytes()
    if len(data) < 2:
        raise FormatError(f"{path}: too short for a pnm file")
    magic = data[:2].decode("ascii", "replace")
    if magic in ("P2", "P5"):
        channels = 1
    elif magic in ("P3", "P6"):
        channels = 3
    elif magic == "P4":
        return _load_pbm(data, path)[..., None].astype(np.float64)
    else:
        raise FormatError(f"{path}: unsupported format {magic!r}")

    if magic in ("P2", "P3"):
        # ASCII variants allow comments anywhere; strip them, then tokenize
        text = re.sub(rb"#[^\n\r]*", b" ", data[2:])
        tokens = text.split()
        if len(tokens) < 3:
            raise FormatError(f"{path}: truncated pnm header")
        width, height, maxval = (int(t) for t in tokens[:3])
        if not (0 < maxval <= 255):
            raise FormatError(f"{path}: maxval {maxval} out of supported range (1..255)")
        count = width * height * channels
        values = np.array(tokens[3:3 + count], dtype=np.float64)
        if values.size != count:
            raise FormatError(f"{path}: expected {count} samples, found {values.size}")
        grid = values.reshape(height, width, channels)
        return grid / float(maxval)

    tokens, offset = _read_pnm_tokens(data[2:], 3)
    width, height, maxval = (int(t) for t in tokens)
    if not (0 < maxval <= 255):
        raise FormatError(f"{path}: maxval {maxval} out of supported range (1..255)")
    count = width * height * channels
    raw = data[2 + offset:2 + offset + count]
    if len(raw) != count:
        raise FormatError(f"{path}: expected {count} bytes, found {len(raw)}")
    values = np.frombuffer(raw, dtype=np.uint8).astype(np.float64)
    grid = values.reshape(height, width, channels)
    return grid / float(maxval)


def _load_pbm(data, path):
    tokens, offset = _read_pnm_tokens(data[2:], 2)
    width, height = (int(t) for t in tokens)
    row_bytes = (width + 7) // 8
    raw = data[2 + offset:2 + offset + row_bytes * height]
    if len(raw) != row_bytes * height:
        raise FormatError(f"{path}: truncated pbm payload")
    bits = np.unpackbits(np.frombuffer(raw, dtype=np.uint8).reshape(height, row_bytes),
                         axis=1)[:, :width]
    # pbm convention: 1 = black; return 1 = marked
    return bits.astype(bool)


def save_pgm(array, path, maxval=255):
    """Quantize an (H, W) array in [0, 1] to an 8-bit binary graymap."""
    array = np.asarray(array, dtype=np.float64)
    if array.ndim != 2:
        raise FormatError(f"pgm wants a 2-D array, got shape {array.shape}")
    q = np.clip(np.rint(array * maxval), 0, maxval).astype(np.uint8)
    h, w = q.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n{maxval}\n".encode("ascii"))
        fh.write(q.tobytes())


def save_ppm(array, path, maxval=255):
    array = np.asarray(array, dtype=np.float64)
    if array.ndim != 3 or array.shape[2] != 3:
        raise FormatError(f"ppm wants an (H, W, 3) array, got shape {array.shape}")
    q = np.clip(np.rint(array * maxval), 0, maxval).astype(np.uint8)
    h, w = q.shape[:2]
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n{maxval}\n".encode("ascii"))
        fh.write(q.tobytes())


def save_pbm(mask, path):
    """Write a boolean (H, W) mask as a bilevel P4 bitmap (1 = marked)."""
    mask = np.asarray(mask, dtype=bool)
    if mask.ndim != 2:
        raise FormatError(f"pbm wants a 2-D mask, got shape {mask.shape}")
    h, w = mask.shape
    packed = np.packbits(mask, axis=1)
    with open(path, "wb") as fh:
        fh.write(f"P4\n{w} {h}\n".encode("ascii"))
        fh.write(packed.tobytes())


def load_input(path):
    """Load any supported file as an (H, W, C) input tensor.

    fgrid arrays pass through unscaled; 2-D fgrids gain a channel axis.
    """
    path = Path(path)
    suffix = path.suffix.lower()
    if suffix == ".fgrid":
        grid = load_fgrid(path)
        if grid.ndim == 2:
            grid = grid[..., None]
        if grid.ndim != 3:
            raise FormatError(f"{path}: input tensor must be 2-D or 3-D, got {grid.ndim}-D")
        return grid
    if suffix in (".pgm", ".ppm", ".pbm", ".pnm"):
        return load_image(path)
    raise FormatError(f"{path}: unsupported input format {suffix!r}")
