"""Garg crop and the seven standard depth metrics."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from .exceptions import ArgumentError, ConfigurationError

GARG_ROWS = (0.40810811, 0.99189189)
GARG_COLS = (0.03594771, 0.96405229)
METRIC_NAMES = ("abs_rel", "sq_rel", "rmse", "rmse_log", "a1", "a2", "a3")
COLUMN_TITLES = ("AbsRel", "SqRel", "RMSE", "RMSE log", "A1", "A2", "A3")


@dataclass(frozen=True)
class EvalConfig:
    cap: float = 80.0
    crop: str = "none"
    min_depth: float = 1e-3
    # "ratio": max(p/g, g/p) < 1.25**k; "abs_margin": |p - g| < g * 1.25**k
    accuracy: str = "ratio"
    # "standard": (p - g)**2 / g; "squared_denominator": (p - g)**2 / g**2
    sqrel: str = "standard"

    def validate(self):
        if not self.cap > self.min_depth > 0:
            raise ConfigurationError(f"need cap > min_depth > 0, got cap={self.cap}, min_depth={self.min_depth}")
        if self.crop not in ("garg", "none"):
            raise ConfigurationError(f"unknown crop {self.crop!r}")
        if self.accuracy not in ("ratio", "abs_margin"):
            raise ConfigurationError(f"unknown accuracy mode {self.accuracy!r}")
        if self.sqrel not in ("standard", "squared_denominator"):
            raise ConfigurationError(f"unknown sqrel mode {self.sqrel!r}")
        return self


@dataclass
class MetricsReport:
    abs_rel: float
    sq_rel: float
    rmse: float
    rmse_log: float
    a1: float
    a2: float
    a3: float
    valid_pixel_count: int

    def values(self):
        return [getattr(self, k) for k in METRIC_NAMES]

    def as_dict(self):
        return asdict(self)

    def row(self, digits=4):
        """Tab-separated AbsRel, SqRel, RMSE, RMSE log, A1, A2, A3."""
        return "\t".join(f"{v:.{digits}f}" for v in self.values())


def garg_bounds(height, width):
    return (
        int(math.floor(GARG_ROWS[0] * height)), int(math.floor(GARG_ROWS[1] * height)),
        int(math.floor(GARG_COLS[0] * width)), int(math.floor(GARG_COLS[1] * width)),
    )


def garg_crop(depth_map):
    m = np.asarray(depth_map)
    h, w = m.shape[-2:]
    if h < 10 or w < 10:
        raise ArgumentError(f"garg crop needs at least 10x10, got {h}x{w}")
    r0, r1, c0, c1 = garg_bounds(h, w)
    if r1 <= r0 or c1 <= c0:
        raise ArgumentError(f"garg crop of {h}x{w} is empty")
    return m[..., r0:r1, c0:c1]


def compute_metrics(pred, gt, cfg: EvalConfig = EvalConfig()) -> MetricsReport:
    """Metrics over pixels with ``gt > 0``; pred and gt are clipped to ``[min_depth, cap]``."""
    cfg.validate()
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.ndim == gt.ndim + 1 and pred.shape[-1] == 1:
        pred = pred[..., 0]
    if pred.shape != gt.shape:
        raise ArgumentError(f"shape mismatch: pred {pred.shape} vs gt {gt.shape}")
    if cfg.crop == "garg":
        pred, gt = garg_crop(pred), garg_crop(gt)
    valid = gt > 0
    n = int(valid.sum())
    if n == 0:
        raise ArgumentError("no valid ground-truth pixels")
    g = np.clip(gt[valid], cfg.min_depth, cfg.cap)
    p = np.clip(pred[valid], cfg.min_depth, cfg.cap)

    diff = p - g
    abs_rel = np.mean(np.abs(diff) / g)
    sq_rel = np.mean(diff ** 2 / (g ** 2 if cfg.sqrel == "squared_denominator" else g))
    rmse = np.sqrt(np.mean(diff ** 2))
    rmse_log = np.sqrt(np.mean((np.log(p) - np.log(g)) ** 2))
    if cfg.accuracy == "ratio":
        thresh = np.maximum(p / g, g / p)
        acc = [np.mean(thresh < 1.25 ** k) for k in (1, 2, 3)]
    else:
        acc = [np.mean(np.abs(diff) < g * 1.25 ** k) for k in (1, 2, 3)]
    return MetricsReport(
        float(abs_rel), float(sq_rel), float(rmse), float(rmse_log),
        float(acc[0]), float(acc[1]), float(acc[2]), n,
    )


def evaluate_batch(preds, gts, cfg: EvalConfig = EvalConfig()) -> MetricsReport:
    """Per-image metrics averaged over images (Eigen-split convention)."""
    preds = np.asarray(preds)
    gts = np.asarray(gts)
    if preds.ndim == 4 and preds.shape[-1] == 1:
        preds = preds[..., 0]
    reports = [compute_metrics(p, g, cfg) for p, g in zip(preds, gts)]
    if not reports:
        raise ArgumentError("empty evaluation set")
    mean = np.mean([r.values() for r in reports], axis=0)
    return MetricsReport(*map(float, mean), sum(r.valid_pixel_count for r in reports))
