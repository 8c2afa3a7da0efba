"""Toy patch encoder standing in for the frozen vision backbone.

Images are [3, H, W] arrays in [0, 1] with H and W multiples of the patch
size (14). Each 14x14 patch becomes one token: a linear patch embedding
plus a learned 2-D positional embedding, refined by a shallow transformer.
Videos are encoded frame by frame and concatenated, with a learned
frame-index embedding added to every token of a frame.

Fixture formats
---------------
``.rpf`` (raw planar float): magic ``b"RPF1"``, then u32 channels, height,
width (little-endian), then float32 LE values in channel-major C x H x W order.
``.ppm``: binary netpbm P6, 8-bit, scaled to [0, 1].
Video fixture: a directory holding frame files and ``manifest.txt`` whose
first line lists the frame filenames in order, separated by whitespace.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .nn import Block, LayerNorm, Linear, Module, Parameter, normal
from .errors import DataError

PATCH = 14


class ResolutionError(ValueError):
    pass


class EmptyInputError(ValueError):
    pass


@dataclass
class ImageTensor:
    data: np.ndarray  # [3, H, W]

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.ndim != 3 or self.data.shape[0] != 3:
            raise ValueError(f"image must be [3, H, W], got {self.data.shape}")

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]

    @property
    def grid(self) -> tuple[int, int]:
        return self.height // PATCH, self.width // PATCH

    def check_resolution(self) -> None:
        if self.height % PATCH or self.width % PATCH or self.height == 0 or self.width == 0:
            raise ResolutionError(
                f"image is {self.height}x{self.width}; height and width must be positive multiples of {PATCH}")


@dataclass
class VideoClip:
    frames: list[ImageTensor]

    def __post_init__(self):
        if self.frames:
            sizes = {(f.height, f.width) for f in self.frames}
            if len(sizes) != 1:
                raise ValueError(f"all frames must share a resolution, got {sorted(sizes)}")

    @property
    def frame_count(self) -> int:
        return len(self.frames)


@dataclass
class RawVisionTokens:
    tokens: Tensor  # [N, d_v]
    grid: tuple[int, int, int]  # rows, cols, frames

    @property
    def count(self) -> int:
        return self.tokens.shape[0]


def _interp_matrix(n_old: int, n_new: int) -> np.ndarray:
    """[n_new, n_old] linear interpolation weights with corners aligned."""
    w = np.zeros((n_new, n_old))
    if n_old == 1:
        w[:, 0] = 1.0
        return w
    if n_new == 1:
        pos = np.array([(n_old - 1) / 2.0])
    else:
        pos = np.arange(n_new) * (n_old - 1) / (n_new - 1)
    lo = np.clip(np.floor(pos).astype(int), 0, n_old - 1)
    hi = np.minimum(lo + 1, n_old - 1)
    frac = pos - lo
    rows = np.arange(n_new)
    np.add.at(w, (rows, lo), 1.0 - frac)
    np.add.at(w, (rows, hi), frac)
    return w


def interpolate_pos_embed(old, new_grid: tuple[int, int]):
    """Bilinear resize of a [rows, cols, d] field to ``new_grid``.

    Accepts a numpy array (returns one) or a Tensor (differentiable).
    Identity when the grid is unchanged.
    """
    r1, c1 = new_grid
    is_tensor = isinstance(old, Tensor)
    r0, c0, d = old.shape
    if min(r0, c0, r1, c1) < 1:
        raise ValueError("grid sizes must be at least 1")
    if (r0, c0) == (r1, c1):
        return old
    wr = _interp_matrix(r0, r1)
    wc = _interp_matrix(c0, c1)
    if not is_tensor:
        return np.einsum("ia,jb,abd->ijd", wr, wc, old).astype(old.dtype)
    dt = old.dtype
    x = ad.reshape(old, (r0, c0 * d))
    x = ad.matmul(Tensor(wr.astype(dt)), x)  # [r1, c0*d]
    x = ad.transpose(ad.reshape(x, (r1, c0, d)), (0, 2, 1))  # [r1, d, c0]
    x = ad.matmul(x, Tensor(wc.T.astype(dt)))  # [r1, d, c1]
    return ad.transpose(x, (0, 2, 1))


def resize_image(img: ImageTensor, height: int, width: int) -> ImageTensor:
    hwc = np.transpose(img.data, (1, 2, 0))
    out = interpolate_pos_embed(hwc, (height, width))
    return ImageTensor(np.transpose(out, (2, 0, 1)).copy())


def patchify(img: ImageTensor) -> np.ndarray:
    """[3, H, W] -> [rows * cols, 3 * 14 * 14], row-major over the patch grid."""
    img.check_resolution()
    rows, cols = img.grid
    x = img.data.reshape(3, rows, PATCH, cols, PATCH)
    return x.transpose(1, 3, 0, 2, 4).reshape(rows * cols, 3 * PATCH * PATCH)


class VisionTower(Module):
    def __init__(self, rng, d_vision: int = 128, depth: int = 1, n_heads: int = 4,
                 base_grid: tuple[int, int] = (16, 16), max_frames: int = 8, dtype=np.float32):
        self.patch_embed = Linear(rng, 3 * PATCH * PATCH, d_vision, dtype)
        self.pos_embed = Parameter(normal(rng, (*base_grid, d_vision), 0.02, dtype))
        self.frame_embed = Parameter(normal(rng, (max_frames, d_vision), 0.02, dtype))
        self.blocks = [Block(rng, d_vision, n_heads, dtype) for _ in range(depth)]
        self.ln_out = LayerNorm(d_vision, dtype)

    @property
    def grid(self) -> tuple[int, int]:
        return self.pos_embed.shape[0], self.pos_embed.shape[1]

    @property
    def max_frames(self) -> int:
        return self.frame_embed.shape[0]

    def _frame_tokens(self, img: ImageTensor) -> Tensor:
        patches = patchify(img).astype(self.pos_embed.dtype)
        rows, cols = img.grid
        x = self.patch_embed(Tensor(patches - 0.5))
        pos = self.pos_embed if (rows, cols) == self.grid else interpolate_pos_embed(self.pos_embed, (rows, cols))
        x = ad.add(x, ad.reshape(pos, (rows * cols, pos.shape[-1])))
        for blk in self.blocks:
            x = blk(x)
        return self.ln_out(x)

    def encode_image(self, img: ImageTensor) -> RawVisionTokens:
        img.check_resolution()
        rows, cols = img.grid
        return RawVisionTokens(self._frame_tokens(img), (rows, cols, 1))

    def encode_video(self, clip: VideoClip) -> RawVisionTokens:
        if clip.frame_count == 0:
            raise EmptyInputError("video clip has no frames")
        if clip.frame_count > self.max_frames:
            raise ValueError(f"clip has {clip.frame_count} frames; the tower supports {self.max_frames}")
        parts = []
        for i, frame in enumerate(clip.frames):
            fe = ad.reshape(ad.slice_axis(self.frame_embed, i, i + 1), (self.frame_embed.shape[1],))
            parts.append(ad.add(self._frame_tokens(frame), fe))
        rows, cols = clip.frames[0].grid
        tokens = parts[0] if len(parts) == 1 else ad.concat(parts, axis=0)
        return RawVisionTokens(tokens, (rows, cols, clip.frame_count))

    def encode(self, media) -> RawVisionTokens:
        if isinstance(media, VideoClip):
            return self.encode_video(media)
        return self.encode_image(media)


# ---------------------------------------------------------------- fixture IO

def save_rpf(img: ImageTensor, path) -> None:
    c, h, w = img.data.shape
    with open(path, "wb") as fh:
        fh.write(b"RPF1" + struct.pack("<III", c, h, w))
        fh.write(np.ascontiguousarray(img.data, dtype="<f4").tobytes())


def load_rpf(path) -> ImageTensor:
    raw = Path(path).read_bytes()
    if raw[:4] != b"RPF1" or len(raw) < 16:
        raise DataError(f"{path}: not a raw planar float file")
    c, h, w = struct.unpack("<III", raw[4:16])
    if len(raw) - 16 != 4 * c * h * w:
        raise DataError(f"{path}: expected {c}x{h}x{w} float32 values, file holds {(len(raw) - 16) // 4}")
    data = np.frombuffer(raw[16:], dtype="<f4").reshape(c, h, w)
    return ImageTensor(data.astype(np.float32))


def load_ppm(path) -> ImageTensor:
    raw = Path(path).read_bytes()
    fields, pos = [], 0
    while len(fields) < 4:
        while raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        start = pos
        while not raw[pos:pos + 1].isspace():
            pos += 1
        fields.append(raw[start:pos])
    if fields[0] != b"P6":
        raise DataError(f"{path}: only binary P6 ppm is supported")
    w, h, maxval = (int(f) for f in fields[1:])
    pixels = np.frombuffer(raw[pos + 1:pos + 1 + w * h * 3], dtype=np.uint8).reshape(h, w, 3)
    return ImageTensor((pixels.transpose(2, 0, 1) / float(maxval)).astype(np.float32))


def load_image(path) -> ImageTensor:
    path = Path(path)
    if path.suffix == ".ppm":
        return load_ppm(path)
    return load_rpf(path)


def load_video(directory) -> VideoClip:
    directory = Path(directory)
    names = (directory / "manifest.txt").read_text().splitlines()[0].split()
    return VideoClip([load_image(directory / n) for n in names])


def save_video(clip: VideoClip, directory) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    names = []
    for i, frame in enumerate(clip.frames):
        name = f"frame_{i:03d}.rpf"
        save_rpf(frame, directory / name)
        names.append(name)
    (directory / "manifest.txt").write_text(" ".join(names) + "\n")


def load_media(path):
    path = Path(path)
    return load_video(path) if path.is_dir() else load_image(path)
