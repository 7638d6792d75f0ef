"""Spatially variant noise maps and synthetic non-i.i.d. Gaussian noisy/clean pairs."""

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .array_store import PairedDataset, as_image_tensor, load_array, load_image, save_array, save_image

KINDS = ("gaussian-bump", "constant", "multi-bump")


@dataclass(frozen=True)
class MapFamilySpec:
    """Parametric family of noise std maps M (intensity units, images in [0, 1]).

    ``gaussian-bump``: base + (peak - base) * exp(-|r - c|^2 / (2 w^2)), r in relative coords.
    ``multi-bump``: the pointwise max of ``n_bumps`` such bumps with seeded centres and widths.
    ``constant``: ``peak_sigma`` everywhere (AWGN).
    """

    kind: str = "gaussian-bump"
    peak_sigma: float = 75 / 255
    base_sigma: float = 5 / 255
    center: tuple = (0.5, 0.5)
    width: float = 0.25
    n_bumps: int = 3
    seed: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown map kind {self.kind!r}; expected one of {KINDS}")
        if self.peak_sigma < 0 or self.base_sigma < 0:
            raise ValueError("sigmas must be non-negative")
        if self.kind != "constant" and self.base_sigma > self.peak_sigma:
            raise ValueError("base_sigma must not exceed peak_sigma")
        if self.width <= 0:
            raise ValueError("width must be positive")
        object.__setattr__(self, "center", tuple(float(c) for c in self.center))

    @classmethod
    def constant(cls, sigma):
        return cls(kind="constant", peak_sigma=sigma, base_sigma=sigma)

    @classmethod
    def from_dict(cls, d):
        known = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        return cls(**known)

    def to_dict(self):
        d = asdict(self)
        d["center"] = list(self.center)
        return d


def _bump(h, w, center, width):
    # pixel centres in relative coordinates; the row axis is the first coordinate
    r = (np.arange(h) + 0.5) / h
    c = (np.arange(w) + 0.5) / w
    d2 = (r[:, None] - center[0]) ** 2 + (c[None, :] - center[1]) ** 2
    return np.exp(-d2 / (2.0 * width**2))


def generate_variance_map(spec, shape):
    """Noise std map M of the given (C, H, W) or (H, W) shape, shared across channels."""
    shape = tuple(int(s) for s in shape)
    if len(shape) not in (2, 3) or min(shape) < 1:
        raise ValueError(f"invalid map shape {shape}")
    h, w = shape[-2:]
    if spec.kind == "constant":
        field2d = np.full((h, w), spec.peak_sigma, dtype=np.float64)
    elif spec.kind == "gaussian-bump":
        g = _bump(h, w, spec.center, spec.width)
        field2d = spec.base_sigma + (spec.peak_sigma - spec.base_sigma) * g
    else:
        rng = np.random.default_rng(spec.seed)
        g = np.zeros((h, w))
        for _ in range(spec.n_bumps):
            center = rng.uniform(0.1, 0.9, size=2)
            width = spec.width * rng.uniform(0.7, 1.3)
            g = np.maximum(g, _bump(h, w, center, width))
        # renormalise so the family attains peak_sigma
        g = g / g.max()
        field2d = spec.base_sigma + (spec.peak_sigma - spec.base_sigma) * g
    field2d = np.clip(field2d, min(spec.base_sigma, spec.peak_sigma), spec.peak_sigma)
    out = np.broadcast_to(field2d, shape).astype(np.float32)
    return np.ascontiguousarray(out)


def sample_noise(M, seed):
    """n = n1 * M with n1 ~ N(0, 1) drawn independently per element."""
    M = np.asarray(M, dtype=np.float32)
    if np.any(M < 0):
        raise ValueError("noise std map has negative entries")
    rng = np.random.default_rng(seed)
    n1 = rng.standard_normal(M.shape, dtype=np.float32)
    return n1 * M


def add_noise(clean, M, seed):
    return np.clip(clean + sample_noise(M, seed), 0.0, 1.0).astype(np.float32)


def make_dataset(cleans, spec, seed, names=None):
    """Noisy copies of ``cleans`` under ``spec``; ground-truth M kept per image (pre-clamp)."""
    if not cleans:
        raise ValueError("no clean images given")
    seeds = np.random.SeedSequence(seed).spawn(len(cleans))
    noisy, sigma = [], []
    cleans = [as_image_tensor(c) for c in cleans]
    for clean, ss in zip(cleans, seeds):
        M = generate_variance_map(spec, clean.shape)
        noisy.append(add_noise(clean, M, np.random.default_rng(ss)))
        sigma.append(M)
    meta = {"spec": spec.to_dict(), "seed": int(seed)}
    return PairedDataset(noisy=noisy, clean=cleans, sigma=sigma, names=names, metadata=meta)


def write_dataset(ds, root):
    """Write ``clean/*.png``, ``noisy/*.png``, ``sigma/*.vdna`` and a ``manifest``.

    The manifest is line oriented: ``#``-prefixed JSON header lines carry the generation
    spec, then one ``name clean noisy sigma`` triple of relative paths per image.
    PNGs are 16-bit for single-channel images so the stored noisy values stay close to
    the float originals.
    """
    root = Path(root)
    lines = ["# " + json.dumps(ds.metadata, sort_keys=True)]
    for k, name in enumerate(ds.names):
        bits = 16 if ds.clean[k].shape[0] == 1 else 8
        save_image(ds.clean[k], root / "clean" / f"{name}.png", bits=bits)
        save_image(ds.noisy[k], root / "noisy" / f"{name}.png", bits=bits)
        entry = [name, f"clean/{name}.png", f"noisy/{name}.png"]
        if ds.sigma is not None:
            save_array(ds.sigma[k], root / "sigma" / f"{name}.vdna")
            entry.append(f"sigma/{name}.vdna")
        lines.append(" ".join(entry))
    (root / "manifest").write_text("\n".join(lines) + "\n")
    return root


def read_dataset(root):
    root = Path(root)
    manifest = root / "manifest"
    if not manifest.is_file():
        raise FileNotFoundError(f"no dataset manifest in {root}")
    meta, names, noisy, clean, sigma = {}, [], [], [], []
    for line in manifest.read_text().splitlines():
        if not line.strip():
            continue
        if line.startswith("#"):
            meta.update(json.loads(line[1:]))
            continue
        parts = line.split()
        names.append(parts[0])
        clean.append(load_image(root / parts[1]))
        noisy.append(load_image(root / parts[2]))
        if len(parts) > 3:
            sigma.append(load_array(root / parts[3]))
    return PairedDataset(
        noisy=noisy, clean=clean, sigma=sigma if len(sigma) == len(names) else None,
        names=names, metadata=meta,
    )


# Built-in clean images, drawn from scikit-image's bundled samples.
TOY_SOURCES = {
    "train": ["camera", "astronaut", "coffee", "rocket", "immunohistochemistry", "moon", "brick", "gravel"],
    "test": ["chelsea", "coins", "clock", "grass"],
}


def toy_images(split="train", tile=128, tiles_per_side=2, channels=1):
    """Clean tiles for desk-scale experiments.

    Each source image is resized so its short side spans ``tiles_per_side`` tiles,
    centre-cropped and cut into ``tiles_per_side**2`` tiles of ``tile`` pixels.
    Returns (tiles, names).
    """
    import skimage.data
    from skimage.color import gray2rgb, rgb2gray
    from skimage.transform import resize

    if split not in TOY_SOURCES:
        raise ValueError(f"unknown split {split!r}")
    side = tile * tiles_per_side
    tiles, names = [], []
    for src in TOY_SOURCES[split]:
        im = getattr(skimage.data, src)()
        im = im.astype(np.float64) / 255.0 if im.dtype == np.uint8 else im.astype(np.float64)
        if im.ndim == 3:
            im = im[..., :3]
        if channels == 1 and im.ndim == 3:
            im = rgb2gray(im)
        elif channels == 3 and im.ndim == 2:
            im = gray2rgb(im)
        h, w = im.shape[:2]
        s = side / min(h, w)
        nh, nw = max(side, round(h * s)), max(side, round(w * s))
        im = resize(im, (nh, nw), anti_aliasing=True)
        top, left = (nh - side) // 2, (nw - side) // 2
        im = im[top:top + side, left:left + side]
        im = im[None] if im.ndim == 2 else np.transpose(im, (2, 0, 1))
        for a in range(tiles_per_side):
            for b in range(tiles_per_side):
                t = im[:, a * tile:(a + 1) * tile, b * tile:(b + 1) * tile]
                tiles.append(np.clip(t, 0, 1).astype(np.float32))
                names.append(f"{src}_{a}{b}")
    return tiles, names


# Noise map protocol: one training map, three held-out test maps and AWGN levels.
TRAIN_MAP = MapFamilySpec(kind="gaussian-bump", center=(0.3, 0.3), width=0.3)
CASE_MAPS = {
    "case1": MapFamilySpec(kind="gaussian-bump", center=(0.7, 0.65), width=0.2),
    "case2": MapFamilySpec(kind="multi-bump", width=0.15, n_bumps=3, seed=1),
    "case3": MapFamilySpec(kind="multi-bump", width=0.12, n_bumps=4, seed=2, peak_sigma=60 / 255),
}
AWGN_LEVELS = {"awgn15": 15 / 255, "awgn25": 25 / 255, "awgn50": 50 / 255}


def protocol_maps():
    maps = dict(CASE_MAPS)
    maps.update({k: MapFamilySpec.constant(s) for k, s in AWGN_LEVELS.items()})
    return maps


def build_protocol_data(root, seed=0, tile=128, channels=1):
    """Write ``train/`` plus one held-out dataset per test map under ``root``."""
    root = Path(root)
    ss = np.random.SeedSequence(seed)
    seeds = [int(s.generate_state(1)[0]) for s in ss.spawn(1 + len(protocol_maps()))]
    tr, tr_names = toy_images("train", tile=tile, channels=channels)
    write_dataset(make_dataset(tr, TRAIN_MAP, seeds[0], names=tr_names), root / "train")
    te, te_names = toy_images("test", tile=tile, channels=channels)
    for s, (name, spec) in zip(seeds[1:], protocol_maps().items()):
        write_dataset(make_dataset(te, spec, s, names=te_names), root / name)
    return root
