"""Image tensors, PNG I/O, the VDNA binary array format and training-pair assembly.

Image tensors are plain ``numpy.float32`` arrays laid out as (channels, height, width).
"""

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

MAGIC = b"VDNA"
VERSION = 1


class ArrayFormatError(ValueError):
    pass


def as_image_tensor(a, check_range=True):
    """Validate and convert ``a`` to a float32 (C, H, W) array.

    2-D input is treated as a single channel.
    """
    a = np.asarray(a, dtype=np.float32)
    if a.ndim == 2:
        a = a[None]
    if a.ndim != 3 or min(a.shape) < 1:
        raise ValueError(f"expected a (C, H, W) tensor with all dims >= 1, got shape {a.shape}")
    if check_range and (a.min() < 0.0 or a.max() > 1.0):
        raise ValueError("image tensor values must lie in [0, 1]")
    return a


def load_image(path):
    """Read an 8- or 16-bit PNG into a (C, H, W) float32 tensor in [0, 1].

    Gray (optionally with alpha) maps to one channel, colour to three; alpha is dropped.
    """
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(path)
    try:
        with Image.open(path) as im:
            if im.format != "PNG":
                raise ArrayFormatError(f"{path}: not a PNG ({im.format})")
            im.load()
            mode = im.mode
            arr = np.array(im)
    except (OSError, SyntaxError) as exc:
        raise ArrayFormatError(f"{path}: corrupt image stream ({exc})") from exc

    if mode in ("L", "LA"):
        scale = 255.0
        arr = arr[..., 0] if arr.ndim == 3 else arr
    elif mode in ("RGB", "RGBA"):
        scale = 255.0
        arr = arr[..., :3]
    elif mode in ("I;16", "I;16B", "I;16L", "I"):
        # Pillow exposes 16-bit grayscale PNGs as I;16 or widened I.
        scale = 65535.0
    else:
        raise ArrayFormatError(f"{path}: unsupported PNG mode {mode!r}")
    if arr.dtype == np.uint8 and scale != 255.0:
        scale = 255.0
    if arr.dtype not in (np.uint8, np.uint16, np.int32, np.uint32):
        raise ArrayFormatError(f"{path}: unsupported bit depth ({arr.dtype})")

    out = arr.astype(np.float64) / scale
    if out.ndim == 2:
        out = out[None]
    else:
        out = np.transpose(out, (2, 0, 1))
    return np.ascontiguousarray(out, dtype=np.float32)


def save_image(t, path, bits=8):
    """Write a [0, 1] tensor as a PNG (values clipped and rounded)."""
    t = np.clip(np.asarray(t, dtype=np.float64), 0.0, 1.0)
    if t.ndim == 3:
        t = t[0] if t.shape[0] == 1 else np.transpose(t, (1, 2, 0))
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if bits == 8:
        Image.fromarray(np.round(t * 255.0).astype(np.uint8)).save(path)
    elif bits == 16:
        if t.ndim != 2:
            raise ValueError("16-bit output is only supported for single-channel images")
        Image.fromarray(np.round(t * 65535.0).astype(np.uint16)).save(path)
    else:
        raise ValueError(f"bits must be 8 or 16, got {bits}")


def save_array(t, path):
    """Write ``t`` in the VDNA layout.

    ``"VDNA"``, version byte, ndim byte, ndim little-endian uint32 dims, then the
    little-endian float32 payload in row-major order.
    """
    t = np.ascontiguousarray(t, dtype="<f4")
    if t.ndim > 255:
        raise ArrayFormatError("too many dimensions")
    header = MAGIC + struct.pack("<BB", VERSION, t.ndim) + struct.pack(f"<{t.ndim}I", *t.shape)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(header)
        f.write(t.tobytes(order="C"))


def load_array(path):
    with open(path, "rb") as f:
        buf = f.read()
    if len(buf) < 6 or buf[:4] != MAGIC:
        raise ArrayFormatError(f"{path}: bad magic")
    version, ndim = struct.unpack_from("<BB", buf, 4)
    if version != VERSION:
        raise ArrayFormatError(f"{path}: unsupported version {version}")
    offset = 6 + 4 * ndim
    if len(buf) < offset:
        raise ArrayFormatError(f"{path}: truncated header")
    dims = struct.unpack_from(f"<{ndim}I", buf, 6)
    n = int(np.prod(dims, dtype=np.int64))
    if len(buf) - offset != 4 * n:
        raise ArrayFormatError(
            f"{path}: payload holds {(len(buf) - offset) / 4:g} floats, header declares {n}"
        )
    return np.frombuffer(buf, dtype="<f4", offset=offset).reshape(dims).astype(np.float32)


@dataclass
class PairedDataset:
    """Aligned (noisy, clean) pairs, optionally with the ground-truth noise std map of each."""

    noisy: list
    clean: list
    sigma: list | None = None
    names: list | None = None
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.noisy:
            raise ValueError("dataset is empty")
        if len(self.noisy) != len(self.clean):
            raise ValueError("noisy and clean lists differ in length")
        for k, (y, x) in enumerate(zip(self.noisy, self.clean)):
            if y.shape != x.shape:
                raise ValueError(f"pair {k}: shape mismatch {y.shape} vs {x.shape}")
            if self.sigma is not None and self.sigma[k].shape != x.shape:
                raise ValueError(f"pair {k}: sigma map shape {self.sigma[k].shape} vs {x.shape}")
        if self.names is None:
            self.names = [f"{k:04d}" for k in range(len(self.noisy))]

    def __len__(self):
        return len(self.noisy)

    @property
    def pairs(self):
        return list(zip(self.noisy, self.clean))


def augment(a, mode):
    """One of the 8 dihedral transforms (mode in 0..7) applied to the spatial axes."""
    a = np.rot90(a, k=mode % 4, axes=(-2, -1))
    if mode >= 4:
        a = a[..., ::-1]
    return np.ascontiguousarray(a)


def random_window(shape, size, rng):
    h, w = shape[-2:]
    if h < size or w < size:
        raise ValueError(f"image {h}x{w} is smaller than patch size {size}")
    top = int(rng.integers(0, h - size + 1))
    left = int(rng.integers(0, w - size + 1))
    return top, left


def crop_patches(pair, size, count, seed, augment_flips=False):
    """Crop ``count`` aligned ``size`` x ``size`` windows from a (noisy, clean) pair.

    Extra arrays in ``pair`` (e.g. a sigma map) are cropped with the same windows.
    """
    arrays = [np.asarray(a) for a in pair]
    shape = arrays[0].shape
    if any(a.shape != shape for a in arrays):
        raise ValueError("pair members differ in shape")
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(count):
        top, left = random_window(shape, size, rng)
        crops = [a[..., top:top + size, left:left + size] for a in arrays]
        if augment_flips:
            mode = int(rng.integers(0, 8))
            crops = [augment(c, mode) for c in crops]
        out.append(tuple(np.ascontiguousarray(c) for c in crops))
    return out
