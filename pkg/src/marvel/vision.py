"""
Visual plugin: patch-grid vision encoder and the linear projection into the LM input space.

The encoder returns last-layer per-patch states (after the final layer norm),
one row per patch of the fixed 7x7 grid.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from marvel.autodiff import DimensionError, Tensor, layer_norm, matmul
from marvel.layers import encoder_block
from marvel.params import ModelConfig

GRID = 7
IMAGE_MAGIC = b"IMGF"


class ImageFormatError(ValueError):
    pass


@dataclass
class GridImage:
    height: int
    width: int
    channels: int
    pixels: np.ndarray  # [height, width, channels], values in [0, 1]

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.float32)
        if self.pixels.shape != (self.height, self.width, self.channels):
            raise DimensionError(
                f"pixel array {self.pixels.shape} does not match "
                f"{self.height}x{self.width}x{self.channels}")

    @classmethod
    def from_array(cls, pixels) -> "GridImage":
        arr = np.asarray(pixels, dtype=np.float32)
        if arr.ndim == 2:
            arr = arr[:, :, None]
        h, w, c = arr.shape
        return cls(h, w, c, arr)


def check_geometry(height: int, width: int, patch_size: int) -> None:
    if patch_size <= 0 or height % patch_size or width % patch_size:
        raise DimensionError(f"{height}x{width} image is not divisible into {patch_size}px patches")
    if (height // patch_size, width // patch_size) != (GRID, GRID):
        raise DimensionError(
            f"{height}x{width} image with patch {patch_size} gives a "
            f"{height // patch_size}x{width // patch_size} grid, need {GRID}x{GRID}")


def patchify(img: GridImage | np.ndarray, patch_size: int) -> np.ndarray:
    """Split an image into 49 flattened patches.

    Patches are in row-major grid order; each patch is flattened row-major
    with the channel index varying fastest.
    """
    pixels = img.pixels if isinstance(img, GridImage) else np.asarray(img)
    if pixels.ndim == 2:
        pixels = pixels[:, :, None]
    h, w, c = pixels.shape
    check_geometry(h, w, patch_size)
    gh, gw = h // patch_size, w // patch_size
    blocks = pixels.reshape(gh, patch_size, gw, patch_size, c).transpose(0, 2, 1, 3, 4)
    return blocks.reshape(gh * gw, patch_size * patch_size * c)


def grid_features(pixels: np.ndarray, params, cfg: ModelConfig) -> Tensor:
    """Vision encoder over a batch of images [B, H, W, C] (or one image) -> [B, 49, d_vis]."""
    pixels = np.asarray(pixels)
    if pixels.ndim == 3:
        pixels = pixels[None]
    if pixels.shape[-1] != cfg.channels:
        raise DimensionError(f"expected {cfg.channels} channels, got {pixels.shape[-1]}")
    patches = np.stack([patchify(im, cfg.patch_size) for im in pixels])
    x = Tensor(patches, dtype=params["vision.patch_w"].data.dtype)
    h = matmul(x, params["vision.patch_w"]) + params["vision.patch_b"] + params["vision.pos_emb"]
    for i in range(cfg.vis_layers):
        h = encoder_block(h, params, f"vision.blocks.{i}", cfg.vis_heads)
    return layer_norm(h, params["vision.ln_post.g"], params["vision.ln_post.b"])


def project(h: Tensor, params) -> Tensor:
    """Affine map of each grid feature into the language model's embedding space."""
    w = params["proj.w"]
    if h.shape[-1] != w.shape[0]:
        raise DimensionError(f"grid features have width {h.shape[-1]}, projection expects {w.shape[0]}")
    return matmul(h, w) + params["proj.b"]


def write_image(path, img: GridImage) -> None:
    header = IMAGE_MAGIC + struct.pack("<III", img.height, img.width, img.channels)
    Path(path).write_bytes(header + np.ascontiguousarray(img.pixels, dtype="<f4").tobytes())


def read_image(path) -> GridImage:
    buf = Path(path).read_bytes()
    if buf[:4] != IMAGE_MAGIC:
        raise ImageFormatError(f"{path}: not an IMGF file")
    h, w, c = struct.unpack_from("<III", buf, 4)
    n = h * w * c
    if len(buf) != 16 + 4 * n:
        raise ImageFormatError(f"{path}: expected {n} pixels, file size is {len(buf)} bytes")
    pixels = np.frombuffer(buf, dtype="<f4", count=n, offset=16).reshape(h, w, c)
    return GridImage(h, w, c, pixels.astype(np.float32))
