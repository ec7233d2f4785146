"""Training objectives and concatenated-batch planning.

Every loss takes depth maps shaped ``(B, H, W)`` or ``(B, 1, H, W)`` as torch
tensors, treats label value 0 as missing, and reduces as a masked mean per
sample followed by a mean over the batch (``reduction="mean"``) or as a plain
sum over valid pixels and samples (``reduction="sum"``).
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from fractions import Fraction

import torch

from .augment import GeometricRecord, realign_prediction
from .exceptions import ArgumentError, ConfigurationError, NonFiniteLossError

log = logging.getLogger(__name__)

SOURCE_VARIANTS = ("pairwise_sum", "per_sample", "pairwise_separate", "none")
ALIGNMENTS = ("realign", "naive")
REDUCTIONS = ("mean", "sum")
STREAM_RANGE = (2, 3, 4)


@dataclass(frozen=True)
class LossConfig:
    source_variant: str = "pairwise_sum"
    streams: int = 3
    stop_gradient_on_reference: bool = True
    alignment: str = "realign"
    reduction: str = "mean"

    def validate(self):
        if self.source_variant not in SOURCE_VARIANTS:
            raise ConfigurationError(f"unknown source variant {self.source_variant!r}")
        if self.streams not in STREAM_RANGE:
            raise ConfigurationError(f"streams must be one of {STREAM_RANGE}, got {self.streams}")
        if self.alignment not in ALIGNMENTS:
            raise ConfigurationError(f"unknown alignment {self.alignment!r}")
        if self.reduction not in REDUCTIONS:
            raise ConfigurationError(f"unknown reduction {self.reduction!r}")
        return self


@dataclass(frozen=True)
class BatchPlan:
    N: int
    r: Fraction
    streams: int
    sup_pairs: int
    sup_images: int
    unsup_originals: int
    concat_total: int


def parse_ratio(r):
    """Accepts ``2``, ``2.0``, ``"9/2"`` or a ``Fraction``."""
    try:
        value = Fraction(str(r)) if not isinstance(r, Fraction) else r
    except (ValueError, ZeroDivisionError) as exc:
        raise ConfigurationError(f"invalid ratio {r!r}") from exc
    if value <= 0:
        raise ConfigurationError(f"ratio must be positive, got {r!r}")
    return value


def compose_batch(N, r, streams=3) -> BatchPlan:
    """Composition of one concatenated forward pass.

    ``N`` source pairs (``2N`` images) and ``N / r`` target originals, each
    fed with ``streams - 1`` perturbed copies.
    """
    r = parse_ratio(r)
    if N < 1:
        raise ConfigurationError(f"batch size must be >= 1, got {N}")
    if streams not in STREAM_RANGE:
        raise ConfigurationError(f"streams must be one of {STREAM_RANGE}, got {streams}")
    unsup = Fraction(N) / r
    if unsup.denominator != 1:
        raise ConfigurationError(f"N / r = {N}/{r} is not an integer")
    unsup = int(unsup)
    return BatchPlan(
        N=N, r=r, streams=streams,
        sup_pairs=N, sup_images=2 * N,
        unsup_originals=unsup,
        concat_total=streams * unsup + 2 * N,
    )


def _flat(x):
    x = torch.as_tensor(x)
    if x.ndim == 4:
        if x.shape[1] != 1:
            raise ArgumentError(f"expected single-channel maps, got {tuple(x.shape)}")
        x = x[:, 0]
    if x.ndim == 2:
        x = x[None]
    if x.ndim != 3:
        raise ArgumentError(f"expected (B, H, W) maps, got {tuple(x.shape)}")
    return x


def _reduce(residual, mask, reduction, empty_ok=False):
    """Masked per-sample mean then batch mean; returns ``(loss, n_nonempty)``."""
    mask = mask.to(residual.dtype)
    counts = mask.flatten(1).sum(1)
    sums = (residual * mask).flatten(1).sum(1)
    nonempty = counts > 0
    n = int(nonempty.sum())
    if n == 0:
        if empty_ok:
            return residual.sum() * 0.0, 0
        raise ArgumentError("no valid pixels in any sample")
    if reduction == "sum":
        return sums.sum(), n
    per_sample = sums[nonempty] / counts[nonempty]
    return per_sample.mean(), n


def masked_l1(pred, label, reduction="mean"):
    pred, label = _flat(pred), _flat(label)
    if pred.shape != label.shape:
        raise ArgumentError(f"shape mismatch {tuple(pred.shape)} vs {tuple(label.shape)}")
    loss, _ = _reduce((pred - label).abs(), label > 0, reduction)
    return loss


def pretrain_loss(preds, labels, reduction="mean"):
    """L1 against (CutMix-augmented) labels over valid pixels."""
    return masked_l1(preds, labels, reduction)


def pairwise_source_loss(pred1, pred2, label1, label2, reduction="mean"):
    """L1 between the sum of two predictions and the sum of their labels.

    Pixels count only where both labels are valid.
    """
    p1, p2, y1, y2 = (_flat(t) for t in (pred1, pred2, label1, label2))
    if not (p1.shape == p2.shape == y1.shape == y2.shape):
        raise ArgumentError("pairwise loss needs four maps of equal shape")
    mask = (y1 > 0) & (y2 > 0)
    loss, _ = _reduce(((y1 + y2) - (p1 + p2)).abs(), mask, reduction)
    return loss


def source_loss(cfg: LossConfig, pred1, pred2, label1, label2):
    variant = cfg.source_variant
    if variant == "pairwise_sum":
        return pairwise_source_loss(pred1, pred2, label1, label2, cfg.reduction)
    if variant == "pairwise_separate":
        return masked_l1(pred1, label1, cfg.reduction) + masked_l1(pred2, label2, cfg.reduction)
    if variant == "per_sample":
        return 0.5 * (masked_l1(pred1, label1, cfg.reduction) + masked_l1(pred2, label2, cfg.reduction))
    if variant == "none":
        return torch.zeros((), dtype=_flat(pred1).dtype)
    raise ConfigurationError(f"unknown source variant {variant!r}")


def _records_for(stream_records, batch, height, width):
    if stream_records is None:
        return [GeometricRecord.identity(height, width)] * batch
    if isinstance(stream_records, GeometricRecord):
        return [stream_records] * batch
    recs = list(stream_records)
    if len(recs) != batch:
        raise ArgumentError(f"expected {batch} records for the stream, got {len(recs)}")
    return recs


def consistency_loss(ref_pred, aug_preds, records, cfg: LossConfig):
    """Sum over streams of the masked L1 between the reference and each realigned view.

    ``records[k]`` is either one GeometricRecord shared by the batch or a
    list with one record per sample. A stream whose validity mask is empty
    contributes 0.
    """
    aug_preds = list(aug_preds)
    records = list(records) if records is not None else [None] * len(aug_preds)
    if len(aug_preds) != cfg.streams - 1 or len(records) != len(aug_preds):
        raise ArgumentError(
            f"expected {cfg.streams - 1} augmented predictions and records, "
            f"got {len(aug_preds)} and {len(records)}"
        )
    ref = _flat(ref_pred)
    if cfg.stop_gradient_on_reference:
        ref = ref.detach()
    b, h, w = ref.shape
    total = ref.sum() * 0.0
    for k, (pred, recs) in enumerate(zip(aug_preds, records)):
        pred = _flat(pred)
        if pred.shape != ref.shape:
            raise ArgumentError(f"stream {k}: shape {tuple(pred.shape)} != reference {tuple(ref.shape)}")
        if cfg.alignment == "naive":
            aligned, mask = pred, torch.ones_like(ref, dtype=torch.bool)
        else:
            pairs = [realign_prediction(pred[i], rec) for i, rec in enumerate(_records_for(recs, b, h, w))]
            aligned = torch.stack([p for p, _ in pairs])
            mask = torch.stack([m for _, m in pairs])
        term, n = _reduce((ref - aligned).abs(), mask, cfg.reduction, empty_ok=True)
        if n < b:
            log.warning("consistency stream %d: %d of %d samples have an empty validity mask", k, b - n, b)
        total = total + term
    return total


def _value(x):
    return float(x.detach()) if torch.is_tensor(x) else float(x)


def _finite(x):
    return math.isfinite(_value(x))


def total_loss(source_term, consistency_term, batch_ids=()):
    """``0.5 * (source + consistency)``; raises NonFiniteLossError on NaN/inf."""
    if not (_finite(source_term) and _finite(consistency_term)):
        raise NonFiniteLossError(
            f"non-finite loss: source={_value(source_term)} consistency={_value(consistency_term)}",
            batch_ids,
        )
    return 0.5 * (source_term + consistency_term)
