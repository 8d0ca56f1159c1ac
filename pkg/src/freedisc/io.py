"""Signal CSV and PGM image I/O."""
from __future__ import annotations

import csv
import math
import re
from pathlib import Path

import numpy as np

__all__ = ["InputError", "read_signal_csv", "write_columns_csv", "read_pgm", "write_pgm"]


class InputError(ValueError):
    """Malformed or unusable input file."""


def read_signal_csv(path) -> np.ndarray:
    """One value per line; a non-numeric first line is taken as a header."""
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise InputError(f"cannot read {path}: {exc.strerror}") from exc
    values = []
    for lineno, row in enumerate(csv.reader(text.splitlines()), start=1):
        cells = [c.strip() for c in row if c.strip()]
        if not cells:
            continue
        if len(cells) != 1:
            raise InputError(f"{path}:{lineno}: expected one value per line, got {len(cells)}")
        try:
            x = float(cells[0])
        except ValueError:
            if not values and lineno == 1:
                continue
            raise InputError(f"{path}:{lineno}: not a number: {cells[0]!r}") from None
        if not math.isfinite(x):
            raise InputError(f"{path}:{lineno}: non-finite sample {cells[0]!r}")
        values.append(x)
    if len(values) < 2:
        raise InputError(f"{path}: need at least 2 samples, got {len(values)}")
    return np.array(values)


def write_columns_csv(path, columns: dict) -> None:
    names = list(columns)
    cols = [np.asarray(columns[k]) for k in names]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(names)
        for row in zip(*cols):
            writer.writerow([_fmt(x) for x in row])


def _fmt(x):
    if isinstance(x, (bool, np.bool_)):
        return int(x)
    if isinstance(x, (int, np.integer)):
        return int(x)
    return repr(float(x))


_TOKEN = re.compile(rb"#[^\n]*\n?|\S+")


def _header_tokens(data: bytes, count: int):
    tokens = []
    pos = 0
    while len(tokens) < count:
        m = _TOKEN.search(data, pos)
        if m is None:
            raise InputError("truncated PGM header")
        pos = m.end()
        if not m.group().startswith(b"#"):
            tokens.append(m.group())
    return tokens, pos


def read_pgm(path) -> np.ndarray:
    """Read a P2 or P5 PGM (maxval <= 255) as floats in [0, 1]."""
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise InputError(f"cannot read {path}: {exc.strerror}") from exc
    (magic, w, h, maxval), pos = _header_tokens(data, 4)
    if magic not in (b"P2", b"P5"):
        raise InputError(f"{path}: unsupported PGM magic {magic!r}")
    try:
        w, h, maxval = int(w), int(h), int(maxval)
    except ValueError:
        raise InputError(f"{path}: malformed PGM header") from None
    if w < 1 or h < 1 or not 0 < maxval <= 255:
        raise InputError(f"{path}: invalid size or maxval (maxval must be <= 255)")
    if magic == b"P5":
        raw = data[pos + 1:pos + 1 + w * h]
        if len(raw) != w * h:
            raise InputError(f"{path}: truncated pixel data")
        pix = np.frombuffer(raw, dtype=np.uint8).astype(float)
    else:
        body = re.sub(rb"#[^\n]*", b"", data[pos:]).split()
        if len(body) != w * h:
            raise InputError(f"{path}: expected {w * h} pixels, got {len(body)}")
        try:
            pix = np.array([int(t) for t in body], dtype=float)
        except ValueError:
            raise InputError(f"{path}: non-integer pixel value") from None
    if pix.max() > maxval:
        raise InputError(f"{path}: pixel value exceeds maxval")
    return pix.reshape(h, w) / maxval


def write_pgm(path, image, binary: bool = True) -> None:
    """Write values in [0, 1] (clipped) as an 8-bit PGM."""
    img = np.asarray(image, dtype=float)
    if img.ndim != 2:
        raise ValueError("image must be 2D")
    pix = np.rint(np.clip(img, 0.0, 1.0) * 255).astype(np.uint8)
    h, w = pix.shape
    if binary:
        Path(path).write_bytes(b"P5\n%d %d\n255\n" % (w, h) + pix.tobytes())
    else:
        rows = "\n".join(" ".join(str(int(v)) for v in row) for row in pix)
        Path(path).write_text(f"P2\n{w} {h}\n255\n{rows}\n")
