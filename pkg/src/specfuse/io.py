"""On-disk formats: PGM label maps, PYRP pyramid containers, PYRC checkpoints, CSV reports.

All binary integers and floats are little-endian.

PYRP layout::

    b"PYRP" u8 version
    u32 L, u32 s_L, u32 C, u32 H, u32 W, u8 kind
    kind 0 (ground truth): semantic levels 1..L as u16 grids (0xFFFF = DONT_CARE),
                           then unity levels 1..L-1 as u8 grids (0 MIX, 1 UNITY, 2 DONT_CARE)
    kind 1 (prediction):   semantic levels 1..L as f32 (C, h, w) blocks,
                           then unity levels 1..L-1 as f32 grids

PYRC layout::

    b"PYRC" u8 version
    u32 n, n bytes of UTF-8 JSON (training config)
    u32 count, then per entry: u16 n, name, u8 ndim, ndim x u32 dims, f32 data
"""

from __future__ import annotations

import csv
import json
import struct
from pathlib import Path

import numpy as np

from .fuse import PredPyramid
from .gt import GtPyramid
from .pyramid import DONT_CARE, PyramidSpec

PYRP_MAGIC = b"PYRP"
PYRC_MAGIC = b"PYRC"
VERSION = 1
KIND_GT = 0
KIND_PRED = 1

_HEADER = struct.Struct("<4sBIIIIIB")
U16_DONT_CARE = 0xFFFF
PGM_DONT_CARE = 255


class FormatError(ValueError):
    pass


class VersionError(FormatError):
    pass


class KindError(FormatError):
    pass


# ---------------------------------------------------------------- PGM

def encode_pgm(image: np.ndarray) -> bytes:
    img = np.asarray(image)
    if img.ndim != 2:
        raise FormatError(f"PGM images are 2-D, got shape {img.shape}")
    if img.min(initial=0) < 0 or img.max(initial=0) > 255:
        raise FormatError("PGM values must lie in [0, 255]")
    h, w = img.shape
    return f"P5\n{w} {h}\n255\n".encode() + img.astype(np.uint8).tobytes()


def decode_pgm(data: bytes) -> np.ndarray:
    """Parse a binary (P5) PGM with maxval <= 255."""
    tokens, pos = [], 0
    while len(tokens) < 4:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if pos >= len(data):
            raise FormatError("truncated PGM header")
        if data[pos:pos + 1] == b"#":
            end = data.find(b"\n", pos)
            pos = len(data) if end < 0 else end + 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        tokens.append(data[start:pos])
    if tokens[0] != b"P5":
        raise FormatError(f"not a binary PGM (magic {tokens[0]!r})")
    try:
        w, h, maxval = (int(t) for t in tokens[1:])
    except ValueError:
        raise FormatError("malformed PGM header") from None
    if w <= 0 or h <= 0 or not 0 < maxval <= 255:
        raise FormatError(f"unsupported PGM geometry {w}x{h} maxval {maxval}")
    if pos >= len(data) or not data[pos:pos + 1].isspace():
        raise FormatError("missing whitespace after PGM header")
    payload = data[pos + 1:]
    if len(payload) != w * h:
        raise FormatError(f"PGM payload has {len(payload)} bytes, expected {w * h}")
    return np.frombuffer(payload, dtype=np.uint8).reshape(h, w).copy()


def write_pgm(path, image: np.ndarray) -> None:
    Path(path).write_bytes(encode_pgm(image))


def read_pgm(path) -> np.ndarray:
    return decode_pgm(Path(path).read_bytes())


def labels_to_pgm(labels: np.ndarray) -> np.ndarray:
    y = np.asarray(labels)
    if y.max(initial=0) >= PGM_DONT_CARE:
        raise FormatError("class ids >= 255 cannot be stored in a PGM label map")
    return np.where(y == DONT_CARE, PGM_DONT_CARE, y).astype(np.uint8)


def pgm_to_labels(image: np.ndarray) -> np.ndarray:
    img = np.asarray(image).astype(np.int64)
    return np.where(img == PGM_DONT_CARE, DONT_CARE, img)


def read_label_map(path) -> np.ndarray:
    return pgm_to_labels(read_pgm(path))


def write_label_map(path, labels: np.ndarray) -> None:
    write_pgm(path, labels_to_pgm(labels))


# ---------------------------------------------------------------- PYRP

def _level_shapes(spec: PyramidSpec, height: int, width: int):
    return [spec.level_shape(level, height, width) for level in spec.levels]


def encode_pyramid(pyr: GtPyramid | PredPyramid) -> bytes:
    spec = pyr.spec
    h, w = pyr.finest_shape
    height, width = h * spec.finest_stride, w * spec.finest_stride
    kind = KIND_GT if isinstance(pyr, GtPyramid) else KIND_PRED
    parts = [_HEADER.pack(PYRP_MAGIC, VERSION, spec.num_levels, spec.finest_stride,
                          spec.num_classes, height, width, kind)]
    if kind == KIND_GT:
        for sem in pyr.semantic:
            parts.append(np.where(sem == DONT_CARE, U16_DONT_CARE, sem).astype("<u2").tobytes())
        for uni in pyr.unity:
            parts.append(np.asarray(uni, dtype=np.uint8).tobytes())
    else:
        for sem in pyr.semantic:
            parts.append(np.asarray(sem, dtype="<f4").tobytes())
        for uni in pyr.unity:
            parts.append(np.asarray(uni, dtype="<f4").tobytes())
    return b"".join(parts)


def read_header(data: bytes) -> tuple[PyramidSpec, int, int, int]:
    """Return ``(spec, height, width, kind)`` from a PYRP header."""
    if len(data) < _HEADER.size:
        raise FormatError("truncated PYRP header")
    magic, version, L, s, C, H, W, kind = _HEADER.unpack_from(data)
    if magic != PYRP_MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {PYRP_MAGIC!r}")
    if version != VERSION:
        raise VersionError(f"unsupported PYRP version {version}")
    if kind not in (KIND_GT, KIND_PRED):
        raise FormatError(f"unknown PYRP kind {kind}")
    try:
        spec = PyramidSpec(L, s, C)
    except ValueError as e:
        raise FormatError(f"invalid PYRP header: {e}") from None
    top = spec.stride(1)
    if H % top or W % top or H == 0 or W == 0:
        raise FormatError(f"PYRP dimensions {H}x{W} are not divisible by the coarsest stride {top}")
    return spec, H, W, kind


def decode_pyramid(data: bytes, expect_kind: int | None = None) -> GtPyramid | PredPyramid:
    spec, H, W, kind = read_header(data)
    if expect_kind is not None and kind != expect_kind:
        raise KindError(f"expected a kind-{expect_kind} container, found kind {kind}")
    shapes = _level_shapes(spec, H, W)
    C, L = spec.num_classes, spec.num_levels
    if kind == KIND_GT:
        sizes = [(h * w * 2, "<u2", (h, w)) for h, w in shapes]
        sizes += [(h * w, "u1", (h, w)) for h, w in shapes[:-1]]
    else:
        sizes = [(C * h * w * 4, "<f4", (C, h, w)) for h, w in shapes]
        sizes += [(h * w * 4, "<f4", (h, w)) for h, w in shapes[:-1]]
    total = _HEADER.size + sum(n for n, _, _ in sizes)
    if len(data) != total:
        what = "trailing bytes" if len(data) > total else "truncated payload"
        raise FormatError(f"PYRP {what}: {len(data)} bytes, expected {total}")
    arrays, pos = [], _HEADER.size
    for n, dtype, shape in sizes:
        arrays.append(np.frombuffer(data, dtype=dtype, count=n // np.dtype(dtype).itemsize, offset=pos).reshape(shape))
        pos += n
    if kind == KIND_GT:
        semantic = []
        for a in arrays[:L]:
            sem = a.astype(np.int64)
            sem[a == U16_DONT_CARE] = DONT_CARE
            if (sem >= C).any():
                raise FormatError("class id out of range in PYRP payload")
            semantic.append(sem)
        unity = [a.copy() for a in arrays[L:]]
        if any((u > 2).any() for u in unity):
            raise FormatError("unity code out of range in PYRP payload")
        return GtPyramid(spec, semantic, unity)
    return PredPyramid(spec, [a.astype(np.float32) for a in arrays[:L]], [a.astype(np.float32) for a in arrays[L:]])


def write_pyramid(path, pyr) -> None:
    Path(path).write_bytes(encode_pyramid(pyr))


def read_pyramid(path, expect_kind: int | None = None):
    return decode_pyramid(Path(path).read_bytes(), expect_kind)


# ---------------------------------------------------------------- PYRC

def encode_checkpoint(config: dict, state: dict[str, np.ndarray]) -> bytes:
    blob = json.dumps(config, sort_keys=True).encode()
    parts = [PYRC_MAGIC, struct.pack("<B", VERSION), struct.pack("<I", len(blob)), blob,
             struct.pack("<I", len(state))]
    for name, arr in state.items():
        raw = name.encode()
        a = np.asarray(arr, dtype="<f4")
        parts.append(struct.pack("<H", len(raw)) + raw + struct.pack("<B", a.ndim))
        parts.append(struct.pack(f"<{a.ndim}I", *a.shape))
        parts.append(a.tobytes())
    return b"".join(parts)


def decode_checkpoint(data: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    def take(n):
        nonlocal pos
        if pos + n > len(data):
            raise FormatError("truncated PYRC checkpoint")
        chunk = data[pos:pos + n]
        pos += n
        return chunk

    pos = 0
    if take(4) != PYRC_MAGIC:
        raise FormatError("bad checkpoint magic")
    (version,) = struct.unpack("<B", take(1))
    if version != VERSION:
        raise VersionError(f"unsupported checkpoint version {version}")
    (n,) = struct.unpack("<I", take(4))
    config = json.loads(take(n).decode())
    (count,) = struct.unpack("<I", take(4))
    state = {}
    for _ in range(count):
        (n,) = struct.unpack("<H", take(2))
        name = take(n).decode()
        (ndim,) = struct.unpack("<B", take(1))
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim))
        size = int(np.prod(shape, dtype=np.int64))
        state[name] = np.frombuffer(take(4 * size), dtype="<f4").reshape(shape).astype(np.float32)
    if pos != len(data):
        raise FormatError("trailing bytes after checkpoint")
    return config, state


def save_checkpoint(path, config: dict, state: dict) -> None:
    Path(path).write_bytes(encode_checkpoint(config, state))


def load_checkpoint(path) -> tuple[dict, dict]:
    return decode_checkpoint(Path(path).read_bytes())


# ---------------------------------------------------------------- CSV

def write_csv(path, schema: str, header: list[str], rows) -> None:
    """CSV with a leading ``# <schema>`` version row, then the column header."""
    with open(path, "w", newline="") as f:
        f.write(f"# {schema}\n")
        w = csv.writer(f)
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])


def read_csv(path) -> tuple[str, list[str], list[list[str]]]:
    with open(path, newline="") as f:
        first = f.readline()
        if not first.startswith("# "):
            raise FormatError("missing schema row")
        rows = list(csv.reader(f))
    return first[2:].strip(), rows[0], rows[1:]


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return "nan" if np.isnan(v) else repr(float(v))
    return v
