"""Metrics (PSNR, SSIM), noise-map scoring and the desk-scale experiment protocols."""

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .array_store import save_image
from .networks import load_checkpoint
from .noise_sim import AWGN_LEVELS, CASE_MAPS, read_dataset
from .pipeline import TrainConfig, denoise, estimate_sigma_map, train
from .prior import compute_xi

log = logging.getLogger(__name__)

EPS_GRID = (1e-4, 1e-5, 1e-6, 1e-7, 1e-8)
P_GRID = (5, 7, 11, 15, 19)
PROTOCOLS = ("cases", "awgn", "eps-sweep", "p-sweep", "mse-baseline")

# Reference context from the full-scale (SIDD validation) study; never used as thresholds.
PUBLISHED_EPS_TABLE = {
    "PSNR": {"1e-04": 38.89, "1e-05": 39.20, "1e-06": 39.28, "1e-07": 39.05, "1e-08": 39.03, "MSE": 39.01},
    "SSIM": {"1e-04": 0.9046, "1e-05": 0.9079, "1e-06": 0.9086, "1e-07": 0.9064, "1e-08": 0.9063, "MSE": 0.9061},
}
PUBLISHED_P_TABLE = {
    "PSNR": {"5": 39.26, "7": 39.28, "11": 39.26, "15": 39.24, "19": 39.24},
    "SSIM": {"5": 0.9089, "7": 0.9086, "11": 0.9086, "15": 0.9079, "19": 0.9079},
}
# BSD68 row of the non-i.i.d. comparison, for the same role
PUBLISHED_CASES_BSD68 = {"case1": 29.02, "case2": 28.67, "case3": 28.46}

SSIM_WINDOW = 7
SSIM_SIGMA = 1.5
SSIM_K1, SSIM_K2 = 0.01, 0.03


# ---- metrics ---------------------------------------------------------------------------

def _pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a, b


def psnr(a, b):
    """10 log10(1 / MSE) on [0, 1] floats; ``inf`` for identical images."""
    a, b = _pair(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / mse)


def ssim_window(size=SSIM_WINDOW, sigma=SSIM_SIGMA):
    r = np.arange(size) - (size - 1) / 2
    g = np.exp(-(r**2) / (2 * sigma**2))
    w = np.outer(g, g)
    return w / w.sum()


def _filter_valid(img, w):
    # (C, H, W) -> (C, H-k+1, W-k+1), correlation with the window over valid positions
    t = torch.from_numpy(img)[:, None]
    k = torch.from_numpy(w)[None, None]
    return torch.nn.functional.conv2d(t, k)[:, 0].numpy()


def ssim(a, b, data_range=1.0):
    """Mean SSIM over valid window positions, averaged over channels.

    Gaussian-weighted 7x7 window (std 1.5), K1 = 0.01, K2 = 0.03, population statistics.
    """
    a, b = _pair(a, b)
    if a.ndim == 2:
        a, b = a[None], b[None]
    w = ssim_window()
    if min(a.shape[-2:]) < w.shape[0]:
        raise ValueError(f"image smaller than the {w.shape[0]}x{w.shape[0]} SSIM window")
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    mu_a, mu_b = _filter_valid(a, w), _filter_valid(b, w)
    var_a = _filter_valid(a * a, w) - mu_a**2
    var_b = _filter_valid(b * b, w) - mu_b**2
    cov = _filter_valid(a * b, w) - mu_a * mu_b
    s = ((2 * mu_a * mu_b + c1) * (2 * cov + c2)) / ((mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2))
    return float(s.reshape(s.shape[0], -1).mean(axis=1).mean())


def score_sigma_map(pred, truth):
    """Pearson r and RMSE between two noise std fields; r is NaN and flagged if undefined."""
    p, t = _pair(pred, truth)
    p, t = p.ravel(), t.ravel()
    rmse = float(np.sqrt(np.mean((p - t) ** 2)))
    if p.min() == p.max() or t.min() == t.max():
        return {"pearson_r": math.nan, "rmse": rmse, "flagged": True}
    pc, tc = p - p.mean(), t - t.mean()
    denom = math.sqrt(float(pc @ pc) * float(tc @ tc))
    if denom == 0.0:
        return {"pearson_r": math.nan, "rmse": rmse, "flagged": True}
    return {"pearson_r": float(pc @ tc) / denom, "rmse": rmse, "flagged": False}


def xi_sigma_estimate(noisy, estimate, p=7):
    """Noise std heuristic for models without a noise branch: sqrt(G((y - x_hat)^2; p))."""
    return np.sqrt(compute_xi(noisy, estimate, p))


# ---- reports -------------------------------------------------------------------------------

REPORT_COLUMNS = [
    "protocol", "setting", "dataset", "image", "psnr_noisy", "psnr", "ssim",
    "pearson_r", "rmse", "flags",
]


@dataclass
class EvalReport:
    protocol: str
    setting: str
    rows: list = field(default_factory=list)

    @property
    def mean_psnr(self):
        return float(np.mean([r["psnr"] for r in self.rows]))

    @property
    def mean_ssim(self):
        return float(np.mean([r["ssim"] for r in self.rows]))

    @property
    def mean_pearson_r(self):
        vals = [r["pearson_r"] for r in self.rows if not math.isnan(r["pearson_r"])]
        return float(np.mean(vals)) if vals else math.nan

    @property
    def mean_psnr_gain(self):
        return float(np.mean([r["psnr"] - r["psnr_noisy"] for r in self.rows]))


def evaluate_model(model, dataset, protocol, setting, dataset_name, sigma_fn=None, heatmap_dir=None):
    """Score one model on one dataset; ``sigma_fn(y, mu)`` overrides the S-Net estimate."""
    report = EvalReport(protocol, setting)
    for k, name in enumerate(dataset.names):
        y, x = dataset.noisy[k], dataset.clean[k]
        mu = denoise(y, model)
        flags = []
        p = psnr(mu, x)
        if math.isinf(p):
            flags.append("identical")
        row = {
            "protocol": protocol, "setting": setting, "dataset": dataset_name, "image": name,
            "psnr_noisy": psnr(y, x), "psnr": p, "ssim": ssim(mu, x),
            "pearson_r": math.nan, "rmse": math.nan,
        }
        if dataset.sigma is not None:
            pred = sigma_fn(y, mu) if sigma_fn is not None else estimate_sigma_map(y, model)
            sc = score_sigma_map(pred, dataset.sigma[k])
            row["pearson_r"], row["rmse"] = sc["pearson_r"], sc["rmse"]
            if sc["flagged"]:
                flags.append("sigma-constant")
            if heatmap_dir is not None:
                write_heatmap(Path(heatmap_dir) / f"{setting}_{dataset_name}_{name}.png", dataset.sigma[k], pred)
        row["flags"] = ";".join(flags)
        report.rows.append(row)
    return report


def write_heatmap(path, truth, pred):
    """Side-by-side colour maps (truth | predicted) on a shared scale."""
    from matplotlib import colormaps

    t = np.asarray(truth, dtype=np.float64).mean(axis=0)
    p = np.asarray(pred, dtype=np.float64).mean(axis=0)
    hi = max(t.max(), p.max(), 1e-12)
    gap = np.ones((t.shape[0], 4)) * np.nan
    both = np.concatenate([t / hi, gap, p / hi], axis=1)
    rgb = colormaps["viridis"](np.nan_to_num(both, nan=1.0))[..., :3]
    rgb[:, t.shape[1]:t.shape[1] + 4] = 1.0
    save_image(np.transpose(rgb, (2, 0, 1)), path)


def write_rows(path, reports):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=REPORT_COLUMNS)
        w.writeheader()
        for rep in reports:
            for r in rep.rows:
                w.writerow({k: r[k] for k in REPORT_COLUMNS})
    return path


def write_table(path, header, rows):
    """First column is the row label, one column per setting."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(header)
        for r in rows:
            w.writerow(r)
    return path


def read_table(path):
    with open(path, newline="") as f:
        return list(csv.reader(f))


# ---- protocols -------------------------------------------------------------------------------

def _fmt_eps(e):
    return f"{e:.0e}"


def _datasets(data_root, names):
    root = Path(data_root)
    out = {}
    for n in names:
        if not (root / n / "manifest").is_file():
            raise FileNotFoundError(f"missing dataset {root / n}")
        out[n] = read_dataset(root / n)
    return out


def _merge(reports, protocol, setting):
    merged = EvalReport(protocol, setting)
    for r in reports:
        merged.rows.extend(r.rows)
    return merged


def _train_and_eval(train_set, tests, cfg, protocol, setting, out_dir, sigma_fn=None):
    res = train(train_set, cfg, out_dir=Path(out_dir) / "runs" / setting)
    reps = [evaluate_model(res.model, ds, protocol, setting, name, sigma_fn=sigma_fn) for name, ds in tests.items()]
    return res, _merge(reps, protocol, setting)


def run_experiment(protocol, data_root, out_dir, cfg=None, checkpoint=None,
                   eps_grid=EPS_GRID, p_grid=P_GRID, report_name="report.csv"):
    """Run one protocol; writes ``report.csv`` plus a summary ``table.csv`` (settings as columns) under ``out_dir``.

    ``cases`` and ``awgn`` score ``checkpoint`` on the held-out sets; the sweeps and the
    MSE baseline train fresh models on ``data_root/train`` with ``cfg`` (default: desk preset).
    Returns the list of EvalReports.
    """
    if protocol not in PROTOCOLS:
        raise ValueError(f"unknown protocol {protocol!r}; choose from {PROTOCOLS}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    cfg = cfg or TrainConfig.desk()

    if protocol in ("cases", "awgn"):
        if checkpoint is None:
            raise ValueError(f"protocol {protocol!r} needs a checkpoint")
        names = list(CASE_MAPS) if protocol == "cases" else list(AWGN_LEVELS)
        tests = _datasets(data_root, names)
        model = checkpoint if isinstance(checkpoint, torch.nn.Module) else load_checkpoint(checkpoint)[0]
        reports = [
            evaluate_model(model, ds, protocol, name, name, heatmap_dir=out_dir / "heatmaps")
            for name, ds in tests.items()
        ]
        header = ["dataset", "PSNR noisy", "PSNR", "SSIM", "sigma r", "sigma RMSE", "published BSD68 PSNR (reference)"]
        rows = []
        for rep, name in zip(reports, names):
            rmse = [r["rmse"] for r in rep.rows if not math.isnan(r["rmse"])]
            rows.append([
                name, f"{np.mean([r['psnr_noisy'] for r in rep.rows]):.2f}", f"{rep.mean_psnr:.2f}",
                f"{rep.mean_ssim:.4f}", f"{rep.mean_pearson_r:.4f}",
                f"{np.mean(rmse):.5f}" if rmse else "nan", PUBLISHED_CASES_BSD68.get(name, ""),
            ])
        write_table(out_dir / "table.csv", header, rows)
        write_rows(out_dir / report_name, reports)
        return reports

    train_set = _datasets(data_root, ["train"])["train"]
    tests = _datasets(data_root, list(CASE_MAPS))
    reports = []
    if protocol == "eps-sweep":
        for e in eps_grid:
            _, rep = _train_and_eval(train_set, tests, _override(cfg, epsilon0_sq=e), protocol, _fmt_eps(e), out_dir)
            reports.append(rep)
        _, rep = _train_and_eval(train_set, tests, _override(cfg, objective="mse"), protocol, "MSE", out_dir)
        reports.append(rep)
        settings = [_fmt_eps(e) for e in eps_grid] + ["MSE"]
        _write_sweep_table(out_dir / "table.csv", "eps0^2", settings, reports, PUBLISHED_EPS_TABLE)
    elif protocol == "p-sweep":
        for p in p_grid:
            _, rep = _train_and_eval(train_set, tests, _override(cfg, p=p), protocol, str(p), out_dir)
            reports.append(rep)
        _write_sweep_table(out_dir / "table.csv", "p", [str(p) for p in p_grid], reports, PUBLISHED_P_TABLE)
    else:
        _, vdn_rep = _train_and_eval(train_set, tests, cfg, protocol, "VDN", out_dir)
        _, mse_rep = _train_and_eval(
            train_set, tests, _override(cfg, objective="mse"), protocol, "MSE", out_dir,
            sigma_fn=lambda y, mu: xi_sigma_estimate(y, mu, cfg.p),
        )
        reports = [vdn_rep, mse_rep]
        header = ["method", "PSNR", "SSIM", "sigma r"]
        rows = [[r.setting, f"{r.mean_psnr:.2f}", f"{r.mean_ssim:.4f}", f"{r.mean_pearson_r:.4f}"] for r in reports]
        write_table(out_dir / "table.csv", header, rows)
    write_rows(out_dir / report_name, reports)
    return reports


def _override(cfg, **kw):
    d = cfg.to_dict()
    d.update(kw)
    return TrainConfig.from_dict(d)


def _write_sweep_table(path, label, settings, reports, published):
    header = [label] + settings
    rows = [
        ["PSNR"] + [f"{r.mean_psnr:.2f}" for r in reports],
        ["SSIM"] + [f"{r.mean_ssim:.4f}" for r in reports],
        ["PSNR (published, reference)"] + [published["PSNR"].get(s, "") for s in settings],
        ["SSIM (published, reference)"] + [published["SSIM"].get(s, "") for s in settings],
    ]
    return write_table(path, header, rows)
