"""D-Net (U-Net, predicts mu and m^2) and S-Net (DnCNN-style, predicts alpha and beta)."""

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .array_store import load_array, save_array
from .objective import ALPHA_FLOOR, BETA_FLOOR, M_SQ_FLOOR
from .prior import EPS0_SQ_SYNTHETIC, WINDOW


def softplus_inv(v):
    """Inverse of softplus for v > 0."""
    return v + math.log(-math.expm1(-v))


@dataclass(frozen=True)
class DNetConfig:
    depth: int = 4
    base_channels: int = 64
    in_channels: int = 3
    kernel_size: int = 3
    # initial m^2 produced by the bias-initialised head
    init_m_sq: float = EPS0_SQ_SYNTHETIC

    def __post_init__(self):
        if self.depth < 1:
            raise ValueError("depth must be >= 1")

    @property
    def divisor(self):
        return 2 ** (self.depth - 1)


@dataclass(frozen=True)
class SNetConfig:
    layers: int = 5
    channels: int = 64
    in_channels: int = 3
    kernel_size: int = 3
    # prior window, fixes the initial alpha = p^2/2 - 1
    p: int = WINDOW
    init_sigma: float = 25 / 255

    def __post_init__(self):
        if self.layers < 2:
            raise ValueError("layers must be >= 2")


def desk_configs(in_channels=1, epsilon0_sq=EPS0_SQ_SYNTHETIC, p=WINDOW):
    """Reduced networks for CPU-scale experiments."""
    return (
        DNetConfig(depth=3, base_channels=16, in_channels=in_channels, init_m_sq=epsilon0_sq),
        SNetConfig(layers=4, channels=24, in_channels=in_channels, p=p),
    )


def _conv(cin, cout, k):
    return nn.Conv2d(cin, cout, k, padding=k // 2)


def _double_conv(cin, cout, k):
    return nn.Sequential(_conv(cin, cout, k), nn.ReLU(inplace=True), _conv(cout, cout, k), nn.ReLU(inplace=True))


def pad_to_multiple(y, divisor):
    """Pad bottom/right so H and W are multiples of ``divisor``; returns (padded, (H, W))."""
    h, w = y.shape[-2:]
    ph, pw = (-h) % divisor, (-w) % divisor
    if ph == 0 and pw == 0:
        return y, (h, w)
    mode = "reflect" if ph < h and pw < w else "replicate"
    return F.pad(y, (0, pw, 0, ph), mode=mode), (h, w)


class DNet(nn.Module):
    """U-Net: ``depth`` encoder levels of [Conv+ReLU]x2 with average pooling between them,
    transpose-conv decoders with skip concatenation, and a two-group output head.

    mu = y + residual, m^2 = softplus(raw) + floor.
    """

    def __init__(self, cfg):
        super().__init__()
        self.cfg = cfg
        k, c = cfg.kernel_size, cfg.in_channels
        ch = [cfg.base_channels * 2**i for i in range(cfg.depth)]
        self.encoders = nn.ModuleList(
            [_double_conv(c if i == 0 else ch[i - 1], ch[i], k) for i in range(cfg.depth)]
        )
        self.ups = nn.ModuleList([nn.ConvTranspose2d(ch[i + 1], ch[i], 2, stride=2) for i in range(cfg.depth - 1)])
        self.decoders = nn.ModuleList([_double_conv(2 * ch[i], ch[i], k) for i in range(cfg.depth - 1)])
        self.head = _conv(ch[0], 2 * c, k)

    def reset_head(self):
        c = self.cfg.in_channels
        nn.init.zeros_(self.head.weight)
        with torch.no_grad():
            self.head.bias[:c] = 0.0
            self.head.bias[c:] = softplus_inv(max(self.cfg.init_m_sq - M_SQ_FLOOR, M_SQ_FLOOR))

    def forward(self, y):
        x, (h, w) = pad_to_multiple(y, self.cfg.divisor)
        skips = []
        for i, enc in enumerate(self.encoders):
            x = enc(x)
            if i < len(self.encoders) - 1:
                skips.append(x)
                x = F.avg_pool2d(x, 2)
        for i in reversed(range(len(self.ups))):
            x = self.ups[i](x)
            x = self.decoders[i](torch.cat([x, skips[i]], dim=1))
        out = self.head(x)[..., :h, :w]
        c = self.cfg.in_channels
        mu = y + out[:, :c]
        m_sq = F.softplus(out[:, c:]) + M_SQ_FLOOR
        return mu, m_sq


class SNet(nn.Module):
    """Plain conv stack (``layers`` convolutions, ReLU between) emitting alpha and beta."""

    def __init__(self, cfg):
        super().__init__()
        self.cfg = cfg
        k, c, f = cfg.kernel_size, cfg.in_channels, cfg.channels
        layers = [_conv(c, f, k), nn.ReLU(inplace=True)]
        for _ in range(cfg.layers - 2):
            layers += [_conv(f, f, k), nn.ReLU(inplace=True)]
        self.body = nn.Sequential(*layers)
        self.head = _conv(f, 2 * c, k)

    @property
    def alpha0(self):
        return self.cfg.p**2 / 2.0 - 1.0

    def reset_head(self):
        c = self.cfg.in_channels
        a0 = self.alpha0
        nn.init.zeros_(self.head.weight)
        with torch.no_grad():
            self.head.bias[:c] = softplus_inv(a0 - ALPHA_FLOOR)
            self.head.bias[c:] = softplus_inv(self.cfg.init_sigma**2 * (a0 + 1.0) - BETA_FLOOR)

    def forward(self, y):
        out = self.head(self.body(y))
        c = self.cfg.in_channels
        alpha = F.softplus(out[:, :c]) + ALPHA_FLOOR
        beta = F.softplus(out[:, c:]) + BETA_FLOOR
        return alpha, beta


class VDN(nn.Module):
    def __init__(self, dcfg, scfg):
        super().__init__()
        if dcfg.in_channels != scfg.in_channels:
            raise ValueError("D-Net and S-Net must agree on input channels")
        self.dnet = DNet(dcfg)
        self.snet = SNet(scfg)

    @property
    def in_channels(self):
        return self.dnet.cfg.in_channels

    def forward(self, y):
        mu, m_sq = self.dnet(y)
        alpha, beta = self.snet(y)
        return mu, m_sq, alpha, beta


def he_init_(module):
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d)):
            nn.init.kaiming_normal_(m.weight, mode="fan_in", nonlinearity="relu")
            nn.init.zeros_(m.bias)


def init_params(dcfg, scfg, seed, zero_heads=True):
    """Build a VDN with He-normal conv weights drawn from ``seed``.

    With ``zero_heads`` the output convolutions start at zero weight and biases chosen
    so that mu = y, m^2 = eps0^2 and alpha equals the prior's alpha0.
    """
    gen_state = torch.random.get_rng_state()
    try:
        torch.manual_seed(seed)
        model = VDN(dcfg, scfg)
        he_init_(model)
    finally:
        torch.random.set_rng_state(gen_state)
    if zero_heads:
        model.dnet.reset_head()
        model.snet.reset_head()
    return model


def count_params(module):
    return sum(p.numel() for p in module.parameters())


def count_convs(module):
    return sum(isinstance(m, nn.Conv2d) for m in module.modules())


def params_checksum(module):
    """Order-sensitive digest of all parameter bytes."""
    import hashlib

    h = hashlib.sha256()
    for name, t in module.state_dict().items():
        h.update(name.encode())
        h.update(t.detach().cpu().numpy().tobytes())
    return h.hexdigest()


# ---- checkpoint files ----------------------------------------------------------------

MANIFEST = "manifest.json"


def _safe(name):
    return name.replace("/", "_")


def save_tensors(tensors, root, subdir):
    entries = []
    for name, t in tensors.items():
        arr = t.detach().cpu().numpy() if torch.is_tensor(t) else np.asarray(t)
        if arr.dtype != np.float32:
            raise TypeError(f"{name}: only float32 tensors are stored, got {arr.dtype}")
        rel = f"{subdir}/{_safe(name)}.vdna"
        save_array(arr, Path(root) / rel)
        entries.append({"name": name, "shape": list(arr.shape), "file": rel})
    return entries


def load_tensors(root, entries):
    out = {}
    for e in entries:
        arr = load_array(Path(root) / e["file"])
        if list(arr.shape) != e["shape"]:
            raise ValueError(f"{e['name']}: stored shape {arr.shape} != manifest {e['shape']}")
        out[e["name"]] = torch.from_numpy(arr.copy())
    return out


def save_checkpoint(root, model, extra=None, optimizer_tensors=None):
    """Write one VDNA file per parameter plus ``manifest.json`` under ``root``."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    manifest = {
        "dnet": asdict(model.dnet.cfg),
        "snet": asdict(model.snet.cfg),
        "tensors": save_tensors(model.state_dict(), root, "params"),
    }
    if optimizer_tensors is not None:
        manifest["optimizer"] = save_tensors(optimizer_tensors, root, "optim")
    manifest.update(extra or {})
    tmp = root / (MANIFEST + ".tmp")
    tmp.write_text(json.dumps(manifest, indent=2, sort_keys=True))
    tmp.replace(root / MANIFEST)
    return root


def resolve_checkpoint(path):
    path = Path(path)
    if path.is_dir():
        path = path / MANIFEST
    if not path.is_file():
        raise FileNotFoundError(f"no checkpoint manifest at {path}")
    return path.parent


def load_checkpoint(path):
    """Returns (model, manifest dict); optimizer tensors, if any, are under manifest['optimizer_state']."""
    root = resolve_checkpoint(path)
    manifest = json.loads((root / MANIFEST).read_text())
    dcfg = DNetConfig(**manifest["dnet"])
    scfg = SNetConfig(**manifest["snet"])
    model = VDN(dcfg, scfg)
    state = load_tensors(root, manifest["tensors"])
    model.load_state_dict(state)
    if "optimizer" in manifest:
        manifest["optimizer_state"] = load_tensors(root, manifest["optimizer"])
    return model, manifest
