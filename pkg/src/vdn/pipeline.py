"""Training loop, learning-rate schedule, checkpoint resume and test-time inference."""

import csv
import json
import logging
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np
import torch

from .array_store import augment, random_window, save_array
from .networks import (
    DNetConfig, SNetConfig, init_params, load_checkpoint, save_checkpoint,
)
from .objective import LossBreakdown, VariationalPosterior, negative_elbo
from .prior import PriorSpec, compute_xi, inverse_gamma_mode

log = logging.getLogger(__name__)

LOG_COLUMNS = ["epoch", "step", "lr", "neg_lik", "kl_z", "kl_sigma", "total"]

# independent random streams derived from the root seed
STREAM_INIT = 0
STREAM_DATA = 1


def derive_seed(root, stream):
    return int(np.random.SeedSequence([root, stream]).generate_state(1)[0])


class NonFiniteLossError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    """Defaults follow the full-scale recipe; ``TrainConfig.desk()`` is the CPU preset."""

    epochs: int = 80
    patches_per_epoch: int = 64 * 5000
    patch_size: int = 128
    batch_size: int = 64
    lr_init: float = 2e-4
    lr_halve_every: int = 10
    lr_floor: float = 1e-6
    epsilon0_sq: float = 5e-5
    p: int = 7
    seed: int = 0
    objective: str = "vdn"
    in_channels: int = 3
    dnet_depth: int = 4
    dnet_base_channels: int = 64
    snet_layers: int = 5
    snet_channels: int = 64
    clip_norm: float = 100.0
    resample_noise: bool = True
    augment: bool = False
    checkpoint_every: int = 1

    def __post_init__(self):
        for name in ("epochs", "patches_per_epoch", "patch_size", "batch_size", "lr_halve_every"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if not 0 < self.lr_floor <= self.lr_init:
            raise ValueError("need 0 < lr_floor <= lr_init")
        if self.objective not in ("vdn", "mse"):
            raise ValueError(f"objective must be 'vdn' or 'mse', got {self.objective!r}")
        PriorSpec(self.epsilon0_sq, self.p)

    @classmethod
    def desk(cls, **overrides):
        base = dict(
            epochs=30, patches_per_epoch=8 * 50, patch_size=64, batch_size=8,
            lr_halve_every=5, in_channels=1, dnet_depth=3, dnet_base_channels=16,
            snet_layers=4, snet_channels=24,
        )
        base.update(overrides)
        return cls(**base)

    @property
    def steps_per_epoch(self):
        return max(1, self.patches_per_epoch // self.batch_size)

    def network_configs(self):
        d = DNetConfig(
            depth=self.dnet_depth, base_channels=self.dnet_base_channels,
            in_channels=self.in_channels, init_m_sq=self.epsilon0_sq,
        )
        s = SNetConfig(
            layers=self.snet_layers, channels=self.snet_channels,
            in_channels=self.in_channels, p=self.p,
        )
        return d, s

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        names = {f.name: f for f in fields(cls)}
        unknown = set(d) - set(names)
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        kw = {}
        for k, v in d.items():
            default = names[k].default
            if isinstance(default, bool):
                if not isinstance(v, bool):
                    raise ValueError(f"{k} must be a boolean")
            elif isinstance(default, int):
                if isinstance(v, bool) or float(v) != int(v):
                    raise ValueError(f"{k} must be an integer")
                v = int(v)
            elif isinstance(default, float):
                v = float(v)
            kw[k] = v
        return cls(**kw)

    @classmethod
    def load(cls, path):
        return cls.from_dict(json.loads(Path(path).read_text()))


def lr_at(epoch, cfg):
    """Step schedule: halve every ``lr_halve_every`` epochs, never below ``lr_floor``."""
    if epoch < 0:
        raise ValueError("epoch must be non-negative")
    return max(cfg.lr_floor, cfg.lr_init * 0.5 ** (epoch // cfg.lr_halve_every))


# ---- data ------------------------------------------------------------------------------

def sample_batch(dataset, cfg, step):
    """Deterministic batch for a global step: random image, window, optional flip, fresh noise.

    With ``resample_noise`` and stored sigma maps, noise is redrawn from the cropped map
    (noisy = clamp(clean + n1 * M)); otherwise the stored noisy crop is used.
    """
    rng = np.random.default_rng([cfg.seed, STREAM_DATA, step])
    fresh = cfg.resample_noise and dataset.sigma is not None
    ys, xs = [], []
    for _ in range(cfg.batch_size):
        k = int(rng.integers(len(dataset)))
        clean = dataset.clean[k]
        top, left = random_window(clean.shape, cfg.patch_size, rng)
        win = (..., slice(top, top + cfg.patch_size), slice(left, left + cfg.patch_size))
        x = clean[win]
        if fresh:
            m = dataset.sigma[k][win]
            y = np.clip(x + rng.standard_normal(x.shape, dtype=np.float32) * m, 0.0, 1.0)
        else:
            y = dataset.noisy[k][win]
        if cfg.augment:
            mode = int(rng.integers(8))
            x, y = augment(x, mode), augment(y, mode)
        ys.append(y)
        xs.append(x)
    y = torch.from_numpy(np.stack(ys).astype(np.float32))
    x = torch.from_numpy(np.stack(xs).astype(np.float32))
    return y, x


# ---- loss --------------------------------------------------------------------------------

def batch_loss(model, y, x, cfg):
    """Forward pass and loss breakdown for one batch; returns (breakdown, posterior)."""
    if cfg.objective == "mse":
        mu, _ = model.dnet(y)
        se = ((mu.double() - x.double()) ** 2).sum() / y.shape[0]
        zero = torch.zeros((), dtype=torch.float64)
        return LossBreakdown(zero, se, zero, se), None
    mu, m_sq, alpha, beta = model(y)
    q = VariationalPosterior(mu, m_sq, alpha, beta)
    prior = PriorSpec(cfg.epsilon0_sq, cfg.p, xi=compute_xi(y, x, cfg.p))
    return negative_elbo(q, y, x, prior), q


# ---- optimizer state <-> flat tensors ----------------------------------------------------

def _optimizer_tensors(model, opt):
    names = {id(p): n for n, p in model.named_parameters()}
    out, steps = {}, {}
    for group in opt.param_groups:
        for p in group["params"]:
            st = opt.state.get(p)
            if not st:
                continue
            n = names[id(p)]
            out[f"{n}.exp_avg"] = st["exp_avg"]
            out[f"{n}.exp_avg_sq"] = st["exp_avg_sq"]
            steps[n] = float(st["step"])
    return out, steps


def _restore_optimizer(model, opt, tensors, steps):
    for n, p in model.named_parameters():
        if n not in steps:
            continue
        opt.state[p] = {
            "step": torch.tensor(steps[n], dtype=torch.float32),
            "exp_avg": tensors[f"{n}.exp_avg"].clone(),
            "exp_avg_sq": tensors[f"{n}.exp_avg_sq"].clone(),
        }


def _dump_batch(out_dir, step, y, x, q):
    d = Path(out_dir) / "diagnostics" / f"step_{step:07d}"
    save_array(y.numpy(), d / "noisy.vdna")
    save_array(x.numpy(), d / "clean.vdna")
    if q is not None:
        for name in ("mu", "m_sq", "alpha", "beta"):
            save_array(getattr(q, name).detach().float().numpy(), d / f"{name}.vdna")
    return d


# ---- training ----------------------------------------------------------------------------

@dataclass
class TrainResult:
    model: object
    history: list
    epoch_log: list
    checkpoint: Path | None


def train(dataset, cfg, out_dir=None, resume=None, max_steps=None):
    """Optimise D-Net and S-Net on ``dataset``.

    Writes ``train_log.csv`` (one row per epoch) and ``checkpoint/`` under ``out_dir``.
    ``resume`` is a checkpoint written by an earlier run with the same config.
    ``max_steps`` stops early (after that many global steps), checkpointing first.
    """
    torch.set_num_threads(1)
    dcfg, scfg = cfg.network_configs()
    start_step = 0
    if resume is not None:
        model, manifest = load_checkpoint(resume)
        if manifest.get("train_config") != cfg.to_dict():
            raise ValueError("resume checkpoint was written with a different training config")
        start_step = int(manifest["step"])
    else:
        model = init_params(dcfg, scfg, seed=derive_seed(cfg.seed, STREAM_INIT))
    model.train()
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr_init)
    if resume is not None and "optimizer_state" in manifest:
        _restore_optimizer(model, opt, manifest["optimizer_state"], manifest["optimizer_steps"])

    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
    spe = cfg.steps_per_epoch
    total_steps = cfg.epochs * spe
    end_step = total_steps if max_steps is None else min(total_steps, max_steps)
    history, epoch_log = [], []
    sums = None
    ckpt = None

    step = start_step
    while step < end_step:
        epoch = step // spe
        lr = lr_at(epoch, cfg)
        for g in opt.param_groups:
            g["lr"] = lr
        y, x = sample_batch(dataset, cfg, step)
        try:
            br, q = batch_loss(model, y, x, cfg)
            problem = None if torch.isfinite(br.total) else str(br.as_floats())
        except ValueError as exc:
            # posterior validation rejects NaN/inf network outputs before the loss exists
            if "non-finite" not in str(exc):
                raise
            br, q, problem = None, None, str(exc)
        if problem is not None:
            where = _dump_batch(out_dir, step, y, x, q) if out_dir is not None else None
            raise NonFiniteLossError(f"non-finite loss at step {step} ({problem}); batch dumped to {where}")
        opt.zero_grad(set_to_none=True)
        br.total.backward()
        if cfg.clip_norm:
            torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.clip_norm)
        opt.step()
        rec = br.as_floats()
        history.append(rec)
        sums = {k: (sums or {}).get(k, 0.0) + v for k, v in rec.items()}
        step += 1

        epoch_done = step % spe == 0
        if epoch_done or step == end_step:
            n = (step - 1) % spe + 1
            row = {"epoch": epoch, "step": step, "lr": lr}
            row.update({k: v / n for k, v in sums.items()})
            sums = None
            if epoch_done:
                epoch_log.append(row)
                log.info("epoch %d step %d lr %.3g total %.6g", epoch, step, lr, row["total"])
            if out_dir is not None:
                if epoch_done:
                    _append_log(out_dir / "train_log.csv", row)
                if step == end_step or (epoch + 1) % cfg.checkpoint_every == 0:
                    ckpt = _save(out_dir / "checkpoint", model, opt, cfg, step)
    return TrainResult(model.eval(), history, epoch_log, ckpt)


def _append_log(path, row):
    new = not path.exists()
    with open(path, "a", newline="") as f:
        w = csv.DictWriter(f, fieldnames=LOG_COLUMNS)
        if new:
            w.writeheader()
        w.writerow({k: row[k] for k in LOG_COLUMNS})


def _save(path, model, opt, cfg, step):
    tensors, steps = _optimizer_tensors(model, opt)
    extra = {
        "train_config": cfg.to_dict(),
        "step": step,
        "epoch": step // cfg.steps_per_epoch,
        "seed": cfg.seed,
        "optimizer_steps": steps,
    }
    return save_checkpoint(path, model, extra=extra, optimizer_tensors=tensors)


# ---- inference ---------------------------------------------------------------------------

def _as_model(model_or_ckpt):
    if isinstance(model_or_ckpt, torch.nn.Module):
        return model_or_ckpt
    model, _ = load_checkpoint(model_or_ckpt)
    return model


def _prepare(y, model):
    y = np.asarray(y, dtype=np.float32)
    if y.ndim == 2:
        y = y[None]
    if y.ndim != 3:
        raise ValueError(f"expected a (C, H, W) image, got shape {y.shape}")
    if y.shape[0] != model.in_channels:
        raise ValueError(f"model expects {model.in_channels} channels, image has {y.shape[0]}")
    return torch.from_numpy(y)[None]


@torch.no_grad()
def posterior(y, model_or_ckpt):
    """All four posterior fields for one image, as float64 numpy (C, H, W) arrays."""
    model = _as_model(model_or_ckpt).eval()
    out = model(_prepare(y, model))
    return [o[0].double().numpy() for o in out]


@torch.no_grad()
def denoise(y, model_or_ckpt):
    """Posterior mean of the clean image, clamped to [0, 1]."""
    model = _as_model(model_or_ckpt).eval()
    mu, _ = model.dnet(_prepare(y, model))
    return mu[0].clamp(0.0, 1.0).numpy()


@torch.no_grad()
def estimate_sigma_map(y, model_or_ckpt):
    """Per-pixel noise std from the inverse-Gamma mode: sqrt(beta / (alpha + 1))."""
    model = _as_model(model_or_ckpt).eval()
    alpha, beta = model.snet(_prepare(y, model))
    s2 = inverse_gamma_mode(alpha[0].double(), beta[0].double())
    return torch.sqrt(s2).float().numpy()

