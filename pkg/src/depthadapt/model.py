"""U-Net style depth regressor.

Layer list for a spec with ``depth = D`` and ``base_channels = b`` (``c_i = b * 2**i``)::

    stem     ConvBlock(3 -> c_0)
    down_i   MaxPool(2), ConvBlock(c_{i-1} -> c_i)             i = 1..D
    up_i     ConvTranspose(c_i -> c_{i-1}, k=2, s=2),
             ConvBlock(2 * c_{i-1} -> c_{i-1})                 i = D..1
    head     Conv1x1(c_0 -> 1), sigmoid, * max_depth

``ConvBlock(a -> c)`` is two bias-free 3x3 convolutions, each followed by an
affine instance norm and a LeakyReLU. Instance norm keeps every sample's
prediction independent of the rest of the concatenated batch.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .exceptions import ArgumentError, ConfigurationError

CHECKPOINT_FORMAT = "depthadapt-checkpoint-v1"


@dataclass(frozen=True)
class ModelSpec:
    height: int = 64
    width: int = 96
    depth: int = 4
    base_channels: int = 16
    max_depth: float = 80.0

    def validate(self):
        if self.depth < 1 or self.base_channels < 1:
            raise ConfigurationError("depth and base_channels must be >= 1")
        step = 2 ** self.depth
        if self.height % step or self.width % step:
            raise ConfigurationError(
                f"resolution {self.height}x{self.width} not divisible by 2**{self.depth}={step}"
            )
        if not self.max_depth > 0:
            raise ConfigurationError("max_depth must be > 0")
        return self

    def channels(self, level):
        return self.base_channels * 2 ** level


class ConvBlock(nn.Sequential):
    def __init__(self, in_ch, out_ch):
        super().__init__(
            nn.Conv2d(in_ch, out_ch, 3, padding=1, bias=False),
            nn.InstanceNorm2d(out_ch, affine=True),
            nn.LeakyReLU(0.1),
            nn.Conv2d(out_ch, out_ch, 3, padding=1, bias=False),
            nn.InstanceNorm2d(out_ch, affine=True),
            nn.LeakyReLU(0.1),
        )


class UpBlock(nn.Module):
    def __init__(self, in_ch, out_ch):
        super().__init__()
        self.up = nn.ConvTranspose2d(in_ch, out_ch, 2, stride=2)
        self.conv = ConvBlock(2 * out_ch, out_ch)

    def forward(self, x, skip):
        return self.conv(torch.cat([self.up(x), skip], dim=1))


class DepthNet(nn.Module):
    """Maps images ``(B, 3, H, W)`` in [0, 1] to depth ``(B, 1, H, W)`` in (0, max_depth)."""

    def __init__(self, spec: ModelSpec):
        super().__init__()
        self.spec = spec.validate()
        self.stem = ConvBlock(3, spec.channels(0))
        self.down = nn.ModuleList(
            ConvBlock(spec.channels(i - 1), spec.channels(i)) for i in range(1, spec.depth + 1)
        )
        # up[0] is the deepest expansion block
        self.up = nn.ModuleList(
            UpBlock(spec.channels(i), spec.channels(i - 1)) for i in range(spec.depth, 0, -1)
        )
        self.head = nn.Conv2d(spec.channels(0), 1, 1)
        self.pool = nn.MaxPool2d(2)

    def forward(self, x):
        skips = [self.stem(x)]
        for block in self.down:
            skips.append(block(self.pool(skips[-1])))
        y = skips.pop()
        for block in self.up:
            y = block(y, skips.pop())
        return torch.sigmoid(self.head(y)) * self.spec.max_depth

    def decoder_blocks(self):
        return list(self.up)


def count_parameters(net):
    return sum(p.numel() for p in net.parameters())


def parameter_checksum(net):
    """SHA-256 over all named parameters and buffers, bit-exact."""
    h = hashlib.sha256()
    for name, t in sorted(net.state_dict().items()):
        h.update(name.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def init_model(spec: ModelSpec, seed: int = 0) -> DepthNet:
    spec.validate()
    state = torch.random.get_rng_state()
    try:
        torch.manual_seed(seed)
        net = DepthNet(spec)
    finally:
        torch.random.set_rng_state(state)
    return net


def _as_batch_tensor(images, spec, dtype):
    x = torch.as_tensor(np.asarray(images) if not torch.is_tensor(images) else images)
    if x.ndim != 4 or x.shape[-1] != 3:
        raise ArgumentError(f"expected images of shape (B, H, W, 3), got {tuple(x.shape)}")
    if tuple(x.shape[1:3]) != (spec.height, spec.width):
        raise ArgumentError(
            f"image resolution {tuple(x.shape[1:3])} does not match model {(spec.height, spec.width)}"
        )
    return x.permute(0, 3, 1, 2).to(dtype)


def predict(net: DepthNet, images, batch_size=64):
    """Run inference on ``(B, H, W, 3)`` images; returns ``(B, H, W, 1)`` numpy depth."""
    dtype = next(net.parameters()).dtype
    x = _as_batch_tensor(images, net.spec, dtype)
    out = np.empty((x.shape[0], net.spec.height, net.spec.width, 1), dtype=np.float32)
    was_training = net.training
    net.eval()
    try:
        with torch.no_grad():
            for i in range(0, x.shape[0], batch_size):
                out[i:i + batch_size] = net(x[i:i + batch_size]).permute(0, 2, 3, 1).numpy()
    finally:
        net.train(was_training)
    return out


def decoder_gradient_magnitudes(net: DepthNet, scalar_loss, retain_graph=False):
    """Mean absolute gradient of the convolution weights of each expansion block.

    Gradients are computed with ``torch.autograd.grad`` so the ``.grad``
    buffers of the network are left untouched.
    """
    if not torch.is_tensor(scalar_loss) or scalar_loss.ndim != 0:
        raise ArgumentError("scalar_loss must be a 0-dim tensor")
    blocks = net.decoder_blocks()
    weights = [
        [m.weight for m in block.modules() if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d))]
        for block in blocks
    ]
    flat = [w for ws in weights for w in ws]
    if not scalar_loss.requires_grad:
        raise ArgumentError("loss is not connected to the network")
    grads = torch.autograd.grad(scalar_loss, flat, retain_graph=retain_graph, allow_unused=True)
    if all(g is None for g in grads):
        raise ArgumentError("loss is not connected to the network")
    out, k = [], 0
    for ws in weights:
        total, count = 0.0, 0
        for w in ws:
            g = grads[k]
            k += 1
            if g is not None:
                total += g.abs().sum().item()
            count += w.numel()
        out.append(total / count)
    return out


def save_checkpoint(path, net: DepthNet, extra=None):
    """Write ``{format, spec, parameters, extra}`` with ``torch.save``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(
        {
            "format": CHECKPOINT_FORMAT,
            "spec": asdict(net.spec),
            "parameters": {k: v.detach().clone() for k, v in net.state_dict().items()},
            "extra": extra or {},
        },
        path,
    )


def load_checkpoint(path, spec: ModelSpec | None = None):
    """Load a checkpoint; returns ``(net, extra)``.

    When ``spec`` is given it must equal the stored spec.
    """
    blob = torch.load(Path(path), map_location="cpu", weights_only=False)
    if blob.get("format") != CHECKPOINT_FORMAT:
        raise ArgumentError(f"{path}: not a depthadapt checkpoint")
    stored = ModelSpec(**blob["spec"])
    if spec is not None and spec != stored:
        raise ConfigurationError(
            f"checkpoint spec {json.dumps(asdict(stored))} != requested {json.dumps(asdict(spec))}"
        )
    net = DepthNet(stored)
    net.load_state_dict(blob["parameters"])
    return net, blob["extra"]
