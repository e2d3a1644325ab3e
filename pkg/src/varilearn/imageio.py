"""Grayscale image files and training-set manifests.

PGM is parsed and written directly (binary P5 and ASCII P2, 8- or 16-bit,
multi-byte samples big-endian per the format); PNG goes through Pillow and
must be grayscale. Intensities map linearly to [0, 1] on load. Writing
defaults to 16 bits so solver output survives the round trip to within one
quantization step.
"""

from __future__ import annotations

import json
import os

import numpy as np
from PIL import Image

from .fidelity import parse_noise_spec, synthesize_noise
from .grids import Boundary, ImageGrid, default_mesh_size
from .sampling import TrainingPair, TrainingSet

Array = np.ndarray


class ImageIOError(ValueError):
    """Unsupported format or corrupt/truncated image data."""


def _grid(values: Array, h, boundary) -> ImageGrid:
    if h is None:
        h = default_mesh_size(values.shape)
    return ImageGrid(values, h=float(h), boundary=boundary)


def _pgm_tokens(data: bytes, pos: int):
    while True:
        while pos < len(data):
            c = data[pos:pos + 1]
            if c == b"#":
                while pos < len(data) and data[pos:pos + 1] not in (b"\n", b"\r"):
                    pos += 1
            elif c.isspace():
                pos += 1
            else:
                break
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if pos == start:
            raise ImageIOError("corrupt header: unexpected end of file")
        yield data[start:pos], pos


def _read_pgm(data: bytes) -> Array:
    if data[:2] not in (b"P2", b"P5"):
        raise ImageIOError("unsupported format: not a P2/P5 PGM file")
    binary = data[:2] == b"P5"
    tokens = _pgm_tokens(data, 2)
    try:
        fields = [next(tokens) for _ in range(3)]
        width, height, maxval = (int(t) for t, _ in fields)
    except (StopIteration, ValueError) as exc:
        raise ImageIOError("corrupt header: bad dimension fields") from exc
    pos = fields[-1][1]
    if width <= 0 or height <= 0 or not 0 < maxval < 65536:
        raise ImageIOError("corrupt header: dimensions or maxval out of range")
    count = width * height
    if binary:
        pos += 1  # exactly one whitespace byte separates header and raster
        dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
        need = count * dtype.itemsize
        raw = data[pos:pos + need]
        if len(raw) < need:
            raise ImageIOError("corrupt header: truncated pixel data")
        values = np.frombuffer(raw, dtype=dtype).astype(float)
    else:
        body = b"\n".join(line.split(b"#", 1)[0]
                          for line in data[pos:].split(b"\n"))
        try:
            values = np.array(body.split(), dtype=float)
        except ValueError as exc:
            raise ImageIOError("corrupt header: non-numeric sample") from exc
        if values.size < count:
            raise ImageIOError("corrupt header: truncated pixel data")
        values = values[:count]
    if values.min() < 0 or values.max() > maxval:
        raise ImageIOError("corrupt header: sample exceeds maxval")
    return values.reshape(height, width) / maxval


def _read_png(path: str) -> Array:
    with Image.open(path) as img:
        if img.mode == "L":
            return np.asarray(img, dtype=float) / 255.0
        if img.mode in ("I", "I;16"):
            return np.asarray(img, dtype=float) / 65535.0
        raise ImageIOError(f"unsupported format: PNG mode {img.mode!r} is not grayscale")


def load_image(path, h: float | None = None,
               boundary: Boundary = Boundary.NEUMANN) -> ImageGrid:
    """Read a grayscale PGM/PNG into [0,1] intensities."""
    path = os.fspath(path)
    with open(path, "rb") as fh:
        head = fh.read(8)
    if head[:2] in (b"P2", b"P5"):
        with open(path, "rb") as fh:
            return _grid(_read_pgm(fh.read()), h, boundary)
    if head[:8] == b"\x89PNG\r\n\x1a\n":
        return _grid(_read_png(path), h, boundary)
    raise ImageIOError("unsupported format: expected PGM or PNG")


def save_image(grid: ImageGrid, path, bits: int = 16, ascii_pgm: bool = False) -> None:
    """Write intensities (clipped to [0,1]) as PGM or PNG by extension."""
    if bits not in (8, 16):
        raise ValueError("bits must be 8 or 16")
    path = os.fspath(path)
    maxval = (1 << bits) - 1
    quant = np.rint(np.clip(grid.values, 0.0, 1.0) * maxval).astype(np.uint32)
    ext = os.path.splitext(path)[1].lower()
    if ext == ".png":
        arr = quant.astype(np.uint8 if bits == 8 else np.uint16)
        Image.fromarray(arr).save(path)
        return
    if ext != ".pgm":
        raise ImageIOError(f"unsupported format: cannot write {ext!r}")
    height, width = grid.shape
    if ascii_pgm:
        lines = [f"P2\n{width} {height}\n{maxval}\n"]
        for row in quant:
            lines.append(" ".join(str(int(v)) for v in row) + "\n")
        data = "".join(lines).encode("ascii")
    else:
        dtype = np.dtype("u1") if bits == 8 else np.dtype(">u2")
        data = (f"P5\n{width} {height}\n{maxval}\n".encode("ascii")
                + quant.astype(dtype).tobytes())
    with open(path, "wb") as fh:
        fh.write(data)


def load_manifest(path) -> TrainingSet:
    """Training pairs from a JSON manifest.

    Each entry names a clean image plus either a noisy image or a noise
    descriptor (e.g. "gaussian(0.02)+impulse(0.05)") synthesized with the
    entry seed, defaulting to the manifest seed plus the entry index.
    Relative paths resolve against the manifest location.
    """
    path = os.fspath(path)
    with open(path, "r", encoding="utf-8") as fh:
        spec = json.load(fh)
    base = os.path.dirname(os.path.abspath(path))
    h = spec.get("h")
    boundary = Boundary(spec.get("boundary", "neumann"))
    base_seed = int(spec.get("seed", 0))
    entries = spec.get("entries")
    if not entries:
        raise ImageIOError("manifest has no entries")

    def resolve(p):
        return p if os.path.isabs(p) else os.path.join(base, p)

    pairs = []
    for i, entry in enumerate(entries):
        clean = load_image(resolve(entry["clean"]), h=h, boundary=boundary)
        pair_id = str(entry.get("id", f"pair{i}"))
        if "noisy" in entry:
            noisy = load_image(resolve(entry["noisy"]), h=h, boundary=boundary)
        elif "noise" in entry:
            seed = int(entry.get("seed", base_seed + i))
            noisy = synthesize_noise(clean, parse_noise_spec(entry["noise"]),
                                     seed=seed)
        else:
            raise ImageIOError(f"manifest entry {i} has neither 'noisy' nor 'noise'")
        pairs.append(TrainingPair(clean, noisy, id=pair_id))
    return TrainingSet(pairs)
