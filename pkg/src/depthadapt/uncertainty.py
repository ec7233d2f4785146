"""Label-free model scoring from flip-consistency gradients of the decoder."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from .exceptions import ArgumentError
from .model import DepthNet, _as_batch_tensor, decoder_gradient_magnitudes


@dataclass
class UncertaintyScore:
    value: float
    n_images: int
    per_block_means: list = field(default_factory=list)


def _image_magnitudes(net, x):
    pred = net(x)
    with torch.no_grad():
        reference = torch.flip(net(torch.flip(x, dims=[-1])), dims=[-1])
    loss = (pred - reference).abs().mean()
    return decoder_gradient_magnitudes(net, loss)


def uncertainty_score(net: DepthNet, images) -> UncertaintyScore:
    """Mean over images of the summed per-block mean |gradient| of the flip L1 loss.

    The flipped-and-unflipped prediction is the reference; no optimiser step
    is taken and parameter ``.grad`` buffers are not touched.
    """
    x = _as_batch_tensor(images, net.spec, next(net.parameters()).dtype)
    if x.shape[0] == 0:
        raise ArgumentError("uncertainty needs at least one image")
    was_training = net.training
    net.eval()
    try:
        per_image = np.array([_image_magnitudes(net, x[i:i + 1]) for i in range(x.shape[0])])
    finally:
        net.train(was_training)
    return UncertaintyScore(
        value=float(per_image.sum(axis=1).mean()),
        n_images=int(x.shape[0]),
        per_block_means=[float(v) for v in per_image.mean(axis=0)],
    )


def select_by_scores(configs, scores):
    """Config with the smallest score; ties go to the earliest."""
    configs, scores = list(configs), [float(s) for s in scores]
    if not configs or len(configs) != len(scores):
        raise ArgumentError("need one score per candidate and at least one candidate")
    best = min(range(len(scores)), key=lambda i: (scores[i], i))
    return configs[best]


def select_hyperparameters(candidates, images):
    """Pick the config whose trained net has the lowest uncertainty on ``images``.

    ``candidates`` is a sequence of ``(config, net)``.
    """
    candidates = list(candidates)
    if not candidates:
        raise ArgumentError("no candidates")
    scores = [uncertainty_score(net, images).value for _, net in candidates]
    return select_by_scores([c for c, _ in candidates], scores)
