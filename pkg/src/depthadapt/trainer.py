"""Supervised CutMix pretraining and joint source/target adaptation.

A run directory holds ``log.tsv`` (one row per optimiser step) and one
``ckpt-<epoch>/`` per checkpoint with ``model.pt`` (network, optimiser and
sampler state) and a human-readable ``meta.json``.
"""
from __future__ import annotations

import hashlib
import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import torch

from .augment import RandAugmentPolicy, cutmix, pretrain_augment, rand_augment
from .dataset import DatasetManifest, DepthSample
from .exceptions import ArgumentError, ConfigurationError, NonFiniteLossError
from .losses import LossConfig, compose_batch, consistency_loss, pretrain_loss, source_loss, total_loss
from .model import DepthNet, ModelSpec, init_model, load_checkpoint, parameter_checksum, save_checkpoint

log = logging.getLogger(__name__)

STAGES = ("pretrain", "adapt")
ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8
LOG_COLUMNS = ("step", "lr", "source_loss", "consistency_loss", "total", "forward_batch")


@dataclass
class TrainConfig:
    stage: str = "pretrain"
    lr: float = 4e-3
    epochs: int = 50
    decay_start_epoch: int | None = None  # None: constant lr
    batch_size: int = 8                  # pretrain: images per step; adapt: source pairs N
    ratio: str = "2"
    streams: int = 3
    cutmix_alpha: float = 0.5
    loss: LossConfig = field(default_factory=LossConfig)
    policy: RandAugmentPolicy = field(default_factory=RandAugmentPolicy)
    model: ModelSpec = field(default_factory=ModelSpec)
    clip_norm: float = 10.0
    seed_model: int = 0
    seed_data: int = 0
    seed_augment: int = 0
    checkpoint_every: int = 1
    workers: int = 0

    @classmethod
    def pretrain_defaults(cls, profile="desk", **kw):
        base = cls(stage="pretrain", lr=4e-3, epochs=50 if profile == "desk" else 250)
        if profile != "desk":
            base.clip_norm = 0.0
        return replace(base, **kw)

    @classmethod
    def adapt_defaults(cls, profile="desk", **kw):
        base = cls(stage="adapt", lr=3e-5 if profile == "desk" else 4e-8, epochs=10,
                   decay_start_epoch=4, batch_size=12)
        if profile != "desk":
            base.clip_norm = 0.0
        return replace(base, **kw)

    @classmethod
    def from_run_config(cls, cfg, stage):
        """Build the stage config from a resolved :class:`~depthadapt.config.RunConfig`."""
        if stage not in STAGES:
            raise ConfigurationError(f"unknown stage {stage!r}")
        alignment = "naive" if cfg["aug.naive_alignment"] else cfg["loss.alignment"]
        common = dict(
            stage=stage,
            ratio=cfg["batch.r"],
            streams=cfg["loss.streams"],
            cutmix_alpha=cfg["train.cutmix_alpha"],
            loss=LossConfig(
                source_variant=cfg["loss.source_variant"],
                streams=cfg["loss.streams"],
                stop_gradient_on_reference=cfg["loss.stop_grad_ref"],
                alignment=alignment,
                reduction=cfg["loss.reduction"],
            ),
            policy=RandAugmentPolicy(cfg["aug.set"], cfg["aug.n"], cfg["aug.m"], cfg["aug.static_cutout"]),
            model=ModelSpec(cfg["data.height"], cfg["data.width"], cfg["model.depth"],
                            cfg["model.base_channels"], cfg["model.max_depth"]),
            clip_norm=cfg["train.clip_norm"],
            seed_model=cfg["train.seed_model"],
            seed_data=cfg["train.seed_data"],
            seed_augment=cfg["train.seed_augment"],
            checkpoint_every=cfg["train.checkpoint_every"],
            workers=cfg["train.workers"],
        )
        if stage == "pretrain":
            return cls(lr=cfg["train.pretrain_lr"], epochs=cfg["train.pretrain_epochs"],
                       decay_start_epoch=None, batch_size=cfg["train.pretrain_batch"], **common)
        return cls(lr=cfg["train.adapt_lr"], epochs=cfg["train.adapt_epochs"],
                   decay_start_epoch=cfg["train.decay_start_epoch"], batch_size=cfg["batch.N"], **common)

    def validate(self):
        if self.stage not in STAGES:
            raise ConfigurationError(f"unknown stage {self.stage!r}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigurationError("epochs and batch size must be >= 1")
        if not self.lr >= 0:
            raise ConfigurationError(f"invalid learning rate {self.lr}")
        if self.decay_start_epoch is not None and self.decay_start_epoch < 0:
            raise ConfigurationError("decay_start_epoch must be >= 0")
        if self.streams != self.loss.streams:
            raise ConfigurationError("streams must match loss.streams")
        self.loss.validate()
        self.policy.validate()
        self.model.validate()
        if self.stage == "adapt":
            compose_batch(self.batch_size, self.ratio, self.streams)
        return self

    def digest(self):
        blob = json.dumps(asdict(self), sort_keys=True, default=str)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


@dataclass
class CheckpointMeta:
    stage: str
    epoch: int
    step: int
    config_hash: str
    rng_states: dict
    loss_stats: dict
    workers: int
    parameter_checksum: str


def _scalar(x):
    return float(x.detach()) if torch.is_tensor(x) else float(x)


def lr_at(cfg: TrainConfig, epoch):
    """Constant until ``decay_start_epoch``, then linear down to 0 at ``epochs``.

    A decay start at or beyond ``epochs`` means a constant rate.
    """
    if not 0 <= epoch <= cfg.epochs:
        raise ArgumentError(f"epoch {epoch} outside [0, {cfg.epochs}]")
    start = cfg.epochs if cfg.decay_start_epoch is None else cfg.decay_start_epoch
    if epoch < start or start >= cfg.epochs:
        return cfg.lr
    return cfg.lr * (cfg.epochs - epoch) / (cfg.epochs - start)


def _rng_state(rng):
    return rng.bit_generator.state


def _set_rng_state(rng, state):
    rng.bit_generator.state = state


class Trainer:
    """One training stage over in-memory arrays.

    ``source`` is ``(images (N, H, W, 3), depths (N, H, W))`` with ids;
    ``target`` is ``(images, ids)`` and only needed for adaptation.
    """

    def __init__(self, net: DepthNet, cfg: TrainConfig, source, target=None, run_dir=None):
        self.cfg = cfg.validate()
        self.net = net
        self.src_images, self.src_depths, self.src_ids = source
        if len(self.src_images) == 0:
            raise ConfigurationError("empty source set")
        if not all((d > 0).any() for d in self.src_depths):
            raise ConfigurationError("source set contains unlabelled samples")
        if cfg.stage == "adapt":
            if target is None:
                raise ConfigurationError("adaptation needs a target set")
            self.tgt_images, self.tgt_ids = target
            self.plan = compose_batch(cfg.batch_size, cfg.ratio, cfg.streams)
            if len(self.tgt_images) < self.plan.unsup_originals:
                raise ConfigurationError(
                    f"target set has {len(self.tgt_images)} images, a step needs {self.plan.unsup_originals}"
                )
        self.run_dir = Path(run_dir) if run_dir else None
        self.opt = torch.optim.Adam(net.parameters(), lr=cfg.lr, betas=ADAM_BETAS, eps=ADAM_EPS)
        self.rng_data = np.random.default_rng(cfg.seed_data)
        self.rng_aug = np.random.default_rng(cfg.seed_augment)
        self.epoch = 0
        self.step = 0
        self.order = []          # sample order of the current epoch
        self.position = 0        # next step within the epoch
        self.source_queue = []   # adapt: reshuffled source indices not yet drawn
        self.loss_stats = {"epoch_means": []}
        self._epoch_sums = [0.0, 0.0, 0.0, 0]
        self.last_forward_batch = 0

    # --- epoch bookkeeping ---

    def steps_per_epoch(self):
        if self.cfg.stage == "pretrain":
            return math.ceil(len(self.src_images) / self.cfg.batch_size)
        return len(self.tgt_images) // self.plan.unsup_originals

    def _begin_epoch(self):
        n = len(self.src_images) if self.cfg.stage == "pretrain" else len(self.tgt_images)
        self.order = self.rng_data.permutation(n).tolist()
        self.position = 0

    def _draw_source(self, k):
        while len(self.source_queue) < k:
            self.source_queue.extend(self.rng_data.permutation(len(self.src_images)).tolist())
        out, self.source_queue = self.source_queue[:k], self.source_queue[k:]
        return out

    def _child_rngs(self, k):
        seeds = self.rng_aug.integers(0, 2 ** 63, size=k)
        return [np.random.default_rng(int(s)) for s in seeds]

    def _map(self, fn, items):
        if self.cfg.workers > 0:
            with ThreadPoolExecutor(self.cfg.workers) as pool:
                return list(pool.map(fn, items))
        return [fn(it) for it in items]

    def _tensor(self, images):
        dtype = next(self.net.parameters()).dtype
        return torch.from_numpy(np.ascontiguousarray(np.stack(images))).permute(0, 3, 1, 2).to(dtype)

    # --- steps ---

    def _pretrain_batch(self, idx):
        samples = [
            DepthSample(self.src_images[i], self.src_depths[i], "source", str(self.src_ids[i])) for i in idx
        ]
        rngs = self._child_rngs(2 * len(samples))
        augmented = self._map(lambda p: pretrain_augment(p[0], p[1]), zip(samples, rngs[: len(samples)]))
        partners = np.roll(np.arange(len(augmented)), 1)
        mixed = []
        for k, j in enumerate(partners):
            a, b = augmented[k], augmented[j]
            if self.cfg.cutmix_alpha > 0 and a.labelled and b.labelled:
                mixed.append(cutmix(a, b, self.cfg.cutmix_alpha, rngs[len(samples) + k]))
            else:
                mixed.append(a)
        x = self._tensor([s.image for s in mixed])
        y = torch.from_numpy(np.stack([s.depth for s in mixed])).to(x.dtype)
        self.last_forward_batch = x.shape[0]
        pred = self.net(x)[:, 0]
        term = pretrain_loss(pred, y, self.cfg.loss.reduction)
        zero = torch.zeros((), dtype=x.dtype)
        return term, zero, [s.id for s in samples]

    def _adapt_batch(self, tgt_idx):
        plan, cfg = self.plan, self.cfg
        src_idx = self._draw_source(2 * plan.sup_pairs)
        i1, i2 = src_idx[: plan.sup_pairs], src_idx[plan.sup_pairs:]
        originals = [self.tgt_images[i] for i in tgt_idx]
        n_aug = cfg.streams - 1
        rngs = self._child_rngs(n_aug * len(originals))
        jobs = [(originals[u], rngs[s * len(originals) + u]) for s in range(n_aug) for u in range(len(originals))]
        views = self._map(lambda j: rand_augment(j[0], cfg.policy, j[1]), jobs)
        stream_images = [[views[s * len(originals) + u][0] for u in range(len(originals))] for s in range(n_aug)]
        stream_records = [[views[s * len(originals) + u][1] for u in range(len(originals))] for s in range(n_aug)]

        batch = [self.src_images[i] for i in i1] + [self.src_images[i] for i in i2] + originals
        for imgs in stream_images:
            batch.extend(imgs)
        x = self._tensor(batch)
        assert x.shape[0] == plan.concat_total
        self.last_forward_batch = x.shape[0]
        pred = self.net(x)[:, 0]
        n, u = plan.sup_pairs, plan.unsup_originals
        chunks = torch.split(pred, [n, n, u] + [u] * n_aug)
        y1 = torch.from_numpy(self.src_depths[i1]).to(pred.dtype)
        y2 = torch.from_numpy(self.src_depths[i2]).to(pred.dtype)
        s_term = source_loss(cfg.loss, chunks[0], chunks[1], y1, y2)
        c_term = consistency_loss(chunks[2], chunks[3:], stream_records, cfg.loss)
        ids = [str(self.src_ids[i]) for i in src_idx] + [str(self.tgt_ids[i]) for i in tgt_idx]
        return s_term, c_term, ids

    def train_step(self):
        """One optimiser step; returns the logged row as a dict."""
        if self.epoch >= self.cfg.epochs:
            raise ArgumentError("training already finished")
        if self.position == 0 and not self.order:
            self._begin_epoch()
        k = self.steps_per_epoch()
        if self.cfg.stage == "pretrain":
            bs = self.cfg.batch_size
            idx = self.order[self.position * bs:(self.position + 1) * bs]
            s_term, c_term, ids = self._pretrain_batch(idx)
        else:
            u = self.plan.unsup_originals
            idx = self.order[self.position * u:(self.position + 1) * u]
            s_term, c_term, ids = self._adapt_batch(idx)

        try:
            loss = total_loss(s_term, c_term, ids)
        except NonFiniteLossError as exc:
            self._dump_nonfinite(exc)
            raise
        lr = lr_at(self.cfg, self.epoch)
        for group in self.opt.param_groups:
            group["lr"] = lr
        self.opt.zero_grad(set_to_none=False)
        if loss.requires_grad:
            loss.backward()
        if self.cfg.clip_norm > 0:
            torch.nn.utils.clip_grad_norm_(self.net.parameters(), self.cfg.clip_norm)
        self.opt.step()

        row = {
            "step": self.step, "lr": lr,
            "source_loss": _scalar(s_term), "consistency_loss": _scalar(c_term), "total": _scalar(loss),
            "forward_batch": self.last_forward_batch,
        }
        self._log(row)
        self.step += 1
        self.position += 1
        sums = self._epoch_sums
        sums[0] += row["source_loss"]
        sums[1] += row["consistency_loss"]
        sums[2] += row["total"]
        sums[3] += 1
        if self.position >= k:
            self._end_epoch()
        return row

    def _end_epoch(self):
        s = self._epoch_sums
        self.loss_stats["epoch_means"].append({
            "epoch": self.epoch, "source_loss": s[0] / s[3], "consistency_loss": s[1] / s[3], "total": s[2] / s[3],
        })
        log.info("%s epoch %d: total %.5f", self.cfg.stage, self.epoch, s[2] / s[3])
        self._epoch_sums = [0.0, 0.0, 0.0, 0]
        self.epoch += 1
        self.order = []
        self.position = 0
        if self.run_dir and (self.epoch % self.cfg.checkpoint_every == 0 or self.epoch == self.cfg.epochs):
            self.save(self.run_dir / f"ckpt-{self.epoch:04d}")

    def run(self, max_steps=None):
        done = 0
        while self.epoch < self.cfg.epochs and (max_steps is None or done < max_steps):
            self.train_step()
            done += 1
        return self.net

    # --- persistence ---

    def _log(self, row):
        if not self.run_dir:
            return
        self.run_dir.mkdir(parents=True, exist_ok=True)
        path = self.run_dir / "log.tsv"
        new = not path.exists()
        with open(path, "a") as fh:
            if new:
                fh.write("\t".join(LOG_COLUMNS) + "\n")
            fh.write("\t".join(f"{row[c]:.8g}" if isinstance(row[c], float) else str(row[c]) for c in LOG_COLUMNS) + "\n")

    def _dump_nonfinite(self, exc):
        log.error("non-finite loss at step %d; batch ids: %s", self.step, exc.batch_ids)
        if self.run_dir:
            self.run_dir.mkdir(parents=True, exist_ok=True)
            (self.run_dir / f"nonfinite-step{self.step}.json").write_text(
                json.dumps({"step": self.step, "epoch": self.epoch, "batch_ids": exc.batch_ids, "error": str(exc)})
            )

    def state(self):
        return {
            "stage": self.cfg.stage,
            "config_hash": self.cfg.digest(),
            "epoch": self.epoch,
            "step": self.step,
            "order": list(self.order),
            "position": self.position,
            "source_queue": list(self.source_queue),
            "rng_states": {"data": _rng_state(self.rng_data), "augment": _rng_state(self.rng_aug)},
            "loss_stats": self.loss_stats,
            "epoch_sums": list(self._epoch_sums),
            "workers": self.cfg.workers,
            "optimizer": self.opt.state_dict(),
        }

    def load_state(self, state):
        if state["stage"] != self.cfg.stage:
            raise ConfigurationError(f"checkpoint is from stage {state['stage']!r}")
        if state["config_hash"] != self.cfg.digest():
            raise ConfigurationError("checkpoint was written under a different training config")
        self.epoch = state["epoch"]
        self.step = state["step"]
        self.order = list(state["order"])
        self.position = state["position"]
        self.source_queue = list(state["source_queue"])
        _set_rng_state(self.rng_data, state["rng_states"]["data"])
        _set_rng_state(self.rng_aug, state["rng_states"]["augment"])
        self.loss_stats = state["loss_stats"]
        self._epoch_sums = list(state["epoch_sums"])
        self.opt.load_state_dict(state["optimizer"])

    def save(self, ckpt_dir):
        ckpt_dir = Path(ckpt_dir)
        ckpt_dir.mkdir(parents=True, exist_ok=True)
        state = self.state()
        save_checkpoint(ckpt_dir / "model.pt", self.net, extra={"trainer": state, "train_config": asdict(self.cfg)})
        meta = CheckpointMeta(
            stage=state["stage"], epoch=state["epoch"], step=state["step"], config_hash=state["config_hash"],
            rng_states=state["rng_states"], loss_stats=state["loss_stats"], workers=state["workers"],
            parameter_checksum=parameter_checksum(self.net),
        )
        (ckpt_dir / "meta.json").write_text(json.dumps(asdict(meta), indent=2, default=str))
        return ckpt_dir

    @classmethod
    def resume(cls, ckpt_dir, cfg, source, target=None, run_dir=None):
        net, extra = load_checkpoint(checkpoint_file(ckpt_dir), cfg.model)
        trainer = cls(net, cfg, source, target, run_dir)
        trainer.load_state(extra["trainer"])
        return trainer


def checkpoint_file(path):
    """Accept a ``ckpt-*`` directory or a ``model.pt`` path."""
    path = Path(path)
    return path / "model.pt" if path.is_dir() else path


def latest_checkpoint(run_dir):
    ckpts = sorted(Path(run_dir).glob("ckpt-*"))
    if not ckpts:
        raise ArgumentError(f"no checkpoints under {run_dir}")
    return ckpts[-1]


def _source_arrays(manifest: DatasetManifest):
    images, depths = manifest.arrays()
    bad = [i for i, d in zip(manifest.ids, depths) if not (d > 0).any()]
    if bad:
        raise ConfigurationError(f"manifest {manifest.root} is not labelled (e.g. {bad[0]})")
    return images, depths, np.asarray(manifest.ids)


def pretrain(source: DatasetManifest, cfg: TrainConfig, run_dir=None, net=None) -> DepthNet:
    """CutMix-augmented supervised training on the labelled source manifest."""
    if cfg.stage != "pretrain":
        raise ConfigurationError("pretrain needs a stage='pretrain' config")
    net = net if net is not None else init_model(cfg.model, cfg.seed_model)
    return Trainer(net, cfg, _source_arrays(source), run_dir=run_dir).run()


def adapt(net: DepthNet, source: DatasetManifest, target: DatasetManifest, cfg: TrainConfig, run_dir=None) -> DepthNet:
    """Joint pairwise-source / multi-stream-consistency training. Target depth is never read."""
    if cfg.stage != "adapt":
        raise ConfigurationError("adapt needs a stage='adapt' config")
    images = target.images()
    return Trainer(net, cfg, _source_arrays(source), (images, np.asarray(target.ids)), run_dir).run()
