"""Plain PGM/PPM image grids (binary P5/P6), so no imaging library is needed."""

from pathlib import Path

import numpy as np

from .errors import ShapeError


def tile(images, cols=None, pad=1, fill=0):
    """Arrange ``(n, c, h, w)`` pixel arrays into one ``(c, H, W)`` grid."""
    images = np.asarray(images)
    if images.ndim != 4:
        raise ShapeError(f"expected (n, c, h, w) images, got shape {images.shape}")
    n, c, h, w = images.shape
    cols = cols or int(np.ceil(np.sqrt(n)))
    rows = int(np.ceil(n / cols))
    grid = np.full((c, rows * (h + pad) + pad, cols * (w + pad) + pad), fill, dtype=images.dtype)
    for i in range(n):
        r, q = divmod(i, cols)
        y, x = pad + r * (h + pad), pad + q * (w + pad)
        grid[:, y:y + h, x:x + w] = images[i]
    return grid


def write_pnm(path, image):
    """Write a ``(1, H, W)`` or ``(3, H, W)`` array of 0..255 values as P5 or P6."""
    image = np.asarray(image)
    if image.ndim == 2:
        image = image[None]
    c, h, w = image.shape
    if c not in (1, 3):
        raise ShapeError(f"PGM/PPM needs 1 or 3 channels, got {c}")
    pixels = np.clip(np.floor(image), 0, 255).astype(np.uint8)
    header = f"{'P5' if c == 1 else 'P6'}\n{w} {h}\n255\n".encode("ascii")
    body = pixels[0] if c == 1 else np.transpose(pixels, (1, 2, 0))
    Path(path).write_bytes(header + body.tobytes())
    return Path(path)


def read_pnm(path):
    """Read a binary P5/P6 file back to ``(c, H, W)`` uint8."""
    data = Path(path).read_bytes()
    fields, pos = [], 0
    while len(fields) < 4:
        while data[pos:pos + 1].isspace():
            pos += 1
        start = pos
        while not data[pos:pos + 1].isspace():
            pos += 1
        fields.append(data[start:pos].decode("ascii"))
    pos += 1
    magic, w, h, maxval = fields[0], int(fields[1]), int(fields[2]), int(fields[3])
    if magic not in ("P5", "P6") or maxval != 255:
        raise ValueError(f"{path}: unsupported PNM header {fields}")
    c = 1 if magic == "P5" else 3
    arr = np.frombuffer(data, dtype=np.uint8, count=c * h * w, offset=pos)
    return arr.reshape(h, w)[None] if c == 1 else arr.reshape(h, w, 3).transpose(2, 0, 1)


def write_grid(path, pixels, cols=None):
    """Tile pixel images and write them; the extension follows the channel count."""
    grid = tile(pixels, cols)
    path = Path(path).with_suffix(".pgm" if grid.shape[0] == 1 else ".ppm")
    return write_pnm(path, grid)
