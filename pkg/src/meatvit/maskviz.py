"""Offline renderings of token masks: 0/1 text grids and binary PGM images."""

from __future__ import annotations

import math

import numpy as np

from .errors import ContractError, FormatError
from .meat import TaskMaskSet


def token_grid(mask_set: TaskMaskSet, layer: int) -> np.ndarray:
    """Token mask of ``layer`` as a boolean ``grid x grid`` array (row-major patches)."""
    if not 0 <= layer < mask_set.config.layers:
        raise ContractError(f"layer {layer} out of range [0, {mask_set.config.layers})")
    bits = mask_set.token_bits[layer]
    side = math.isqrt(bits.size)
    return bits.reshape(side, side)


def grid_to_text(grid: np.ndarray) -> str:
    return "\n".join("".join("1" if b else "0" for b in row) for row in grid) + "\n"


def text_to_grid(text: str) -> np.ndarray:
    rows = [line.strip() for line in text.strip().splitlines()]
    if not rows or any(len(r) != len(rows[0]) or set(r) - {"0", "1"} for r in rows):
        raise FormatError("text grid must be equal-length rows of 0/1 characters")
    return np.array([[c == "1" for c in r] for r in rows], dtype=bool)


def grid_to_pgm(grid: np.ndarray) -> bytes:
    """Binary (P5) grayscale image: active = 255, isolated = 0."""
    h, w = grid.shape
    return f"P5\n{w} {h}\n255\n".encode() + (grid.astype(np.uint8) * 255).tobytes()


def pgm_to_grid(raw: bytes) -> np.ndarray:
    parts = raw.split(maxsplit=4)
    if len(parts) < 5 or parts[0] != b"P5":
        raise FormatError("not a binary PGM image", field="magic", offset=0)
    w, h, maxval = int(parts[1]), int(parts[2]), int(parts[3])
    pixels = parts[4]
    if maxval != 255 or len(pixels) != w * h:
        raise FormatError("unexpected PGM payload", field="pixels", offset=len(raw) - len(pixels))
    arr = np.frombuffer(pixels, dtype=np.uint8).reshape(h, w)
    if not np.all((arr == 0) | (arr == 255)):
        raise FormatError("PGM is not a binary mask image", field="pixels")
    return arr == 255


def activation_table(mask_set: TaskMaskSet) -> str:
    r = mask_set.activation_ratios()
    lines = ["layer  token   ffn1    ffn2"]
    for l, (t, a, b) in enumerate(zip(r["token"], r["ffn1"], r["ffn2"])):
        lines.append(f"{l:>5}  {t:.4f}  {a:.4f}  {b:.4f}")
    pooled = [np.concatenate([b.ravel() for b in bits]).mean()
              for bits in (mask_set.token_bits, mask_set.ffn1_bits, mask_set.ffn2_bits)]
    lines.append("  all  {:.4f}  {:.4f}  {:.4f}".format(*pooled))
    return "\n".join(lines) + "\n"
