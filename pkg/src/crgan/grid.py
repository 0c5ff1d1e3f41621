"""Binary PGM (P5) export of image grids."""

from __future__ import annotations

import os

import numpy as np

SEPARATOR = 2
SEPARATOR_VALUE = 255
EMPTY_VALUE = 0


def quantize(images) -> np.ndarray:
    """Map [-1, 1] floats to bytes with ``round((x + 1) * 127.5)`` clamped to [0, 255]."""
    x = np.asarray(images, dtype=np.float64)
    return np.clip(np.round((x + 1.0) * 127.5), 0, 255).astype(np.uint8)


def grid_shape(rows: int, cols: int, tile_h: int, tile_w: int) -> tuple[int, int]:
    return rows * tile_h + (rows - 1) * SEPARATOR, cols * tile_w + (cols - 1) * SEPARATOR


def tile(images, rows: int, cols: int) -> np.ndarray:
    """Lay out ``B x 1 x H x W`` (or ``B x H x W``) images row-major as one uint8 canvas."""
    if hasattr(images, "detach"):
        images = images.detach().numpy()
    q = quantize(images)
    if q.ndim == 4:
        q = q[:, 0]
    b, th, tw = q.shape
    if rows < 1 or cols < 1:
        raise ValueError(f"grid must be at least 1x1, got {rows}x{cols}")
    if rows * cols < b:
        raise ValueError(f"{rows}x{cols} grid cannot hold {b} images")
    h, w = grid_shape(rows, cols, th, tw)
    canvas = np.full((h, w), SEPARATOR_VALUE, dtype=np.uint8)
    for k in range(rows * cols):
        r, c = divmod(k, cols)
        y, x = r * (th + SEPARATOR), c * (tw + SEPARATOR)
        canvas[y : y + th, x : x + tw] = q[k] if k < b else EMPTY_VALUE
    return canvas


def untile(canvas: np.ndarray, rows: int, cols: int, tile_h: int, tile_w: int, count: int | None = None) -> np.ndarray:
    tiles = []
    for k in range(rows * cols if count is None else count):
        r, c = divmod(k, cols)
        y, x = r * (tile_h + SEPARATOR), c * (tile_w + SEPARATOR)
        tiles.append(canvas[y : y + tile_h, x : x + tile_w])
    return np.stack(tiles)


def write_pgm(path, pixels: np.ndarray) -> None:
    pixels = np.asarray(pixels, dtype=np.uint8)
    h, w = pixels.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(pixels.tobytes())


def read_pgm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        data = fh.read()
    fields = []
    pos = 0
    while len(fields) < 4:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if data[pos : pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ValueError(f"{os.fspath(path)}: truncated PGM header")
        fields.append(data[start:pos])
    if fields[0] != b"P5":
        raise ValueError(f"{os.fspath(path)}: not a binary PGM (magic {fields[0]!r})")
    w, h, maxval = (int(f) for f in fields[1:])
    if maxval != 255:
        raise ValueError(f"{os.fspath(path)}: only maxval 255 is supported, got {maxval}")
    pos += 1  # single whitespace byte after maxval
    payload = data[pos : pos + w * h]
    if len(payload) != w * h:
        raise ValueError(f"{os.fspath(path)}: expected {w * h} pixel bytes, found {len(payload)}")
    return np.frombuffer(payload, dtype=np.uint8).reshape(h, w).copy()


def export_grid(images, rows: int, cols: int, path) -> None:
    write_pgm(path, tile(images, rows, cols))
