"""Prior hyperparameters: the local residual-variance field xi and the fixed scalars eps0^2, p."""

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

XI_FLOOR = 1e-8
EPS0_SQ_SYNTHETIC = 5e-5
EPS0_SQ_REAL = 1e-6
WINDOW = 7


@dataclass
class PriorSpec:
    """eps0^2 (prior variance of z around x), window p, and the xi field anchoring sigma^2."""

    epsilon0_sq: float = EPS0_SQ_SYNTHETIC
    p: int = WINDOW
    xi: object = None
    xi_floor: float = XI_FLOOR

    def __post_init__(self):
        if not self.epsilon0_sq > 0:
            raise ValueError("epsilon0_sq must be positive")
        check_window(self.p)
        if not self.xi_floor > 0:
            raise ValueError("xi_floor must be positive")


def check_window(p):
    if int(p) != p or p < 3 or p % 2 == 0:
        raise ValueError(f"window size must be an odd integer >= 3, got {p}")


def gaussian_kernel(p, dtype=np.float64):
    """Normalised p x p Gaussian weights with std p/6 (the window spans +-3 std)."""
    check_window(p)
    s = p / 6.0
    r = np.arange(p) - (p - 1) / 2
    g = np.exp(-(r**2) / (2 * s * s))
    k = np.outer(g, g)
    return (k / k.sum()).astype(dtype)


def gaussian_filter(field, p):
    """Reflect-padded p x p Gaussian filtering of a (..., H, W) torch tensor."""
    shape = field.shape
    h, w = shape[-2:]
    r = p // 2
    if h <= r or w <= r:
        raise ValueError(f"image {h}x{w} too small for a {p}x{p} reflect-padded window")
    x = field.reshape(-1, 1, h, w)
    k = torch.as_tensor(gaussian_kernel(p), dtype=field.dtype, device=field.device)
    x = F.pad(x, (r, r, r, r), mode="reflect")
    return F.conv2d(x, k[None, None]).reshape(shape)


def compute_xi(noisy, clean, p=WINDOW, xi_floor=XI_FLOOR):
    """xi = max(GaussianFilter((y - x)^2; p), xi_floor), channel by channel.

    Accepts numpy arrays (returns float64 numpy) or torch tensors (returns a tensor
    of dtype float64, no gradient).
    """
    check_window(p)
    is_numpy = not torch.is_tensor(noisy)
    y = torch.as_tensor(np.asarray(noisy) if is_numpy else noisy).detach().double()
    x = torch.as_tensor(np.asarray(clean) if is_numpy else clean).detach().double()
    if y.shape != x.shape:
        raise ValueError(f"shape mismatch: {tuple(y.shape)} vs {tuple(x.shape)}")
    xi = gaussian_filter((y - x) ** 2, p).clamp_min(xi_floor)
    return xi.numpy() if is_numpy else xi


def prior_sigma_params(spec):
    """Inverse-Gamma prior on sigma^2: alpha0 = p^2/2 - 1 and beta0 = p^2 xi / 2.

    Its mode beta0 / (alpha0 + 1) equals xi.
    """
    p2 = float(spec.p) ** 2
    alpha0 = p2 / 2.0 - 1.0
    beta0 = p2 * spec.xi / 2.0
    return alpha0, beta0


def inverse_gamma_mode(alpha, beta):
    return beta / (alpha + 1.0)
