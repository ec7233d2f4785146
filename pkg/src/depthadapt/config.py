"""Run configuration: a flat ``key = value`` file with dotted keys.

Resolution order (last wins): built-in defaults, profile defaults
(``train.profile``), the config file, command-line overrides. Unknown keys are
rejected.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

from .exceptions import ConfigurationError


@dataclass(frozen=True)
class Key:
    name: str
    default: object
    kind: type
    owner: str
    help: str
    choices: tuple = ()


_KEYS = [
    Key("data.root", "data/toy", str, "dataset", "directory written by gen-data"),
    Key("data.seed", 7, int, "dataset", "toy generator seed"),
    Key("data.n_source", 64, int, "dataset", "toy source samples"),
    Key("data.n_target", 64, int, "dataset", "toy target samples (unlabelled for training)"),
    Key("data.n_test", 32, int, "dataset", "held-out labelled target samples"),
    Key("data.height", 64, int, "dataset", "image height"),
    Key("data.width", 96, int, "dataset", "image width"),
    Key("data.source", "", str, "dataset", "source manifest (default <data.root>/source)"),
    Key("data.target", "", str, "dataset", "target manifest (default <data.root>/target)"),
    Key("data.eval", "", str, "dataset", "labelled evaluation manifest (default <data.root>/target_test)"),
    Key("aug.set", "s_fm", str, "augment", "RandAugment op set", ("s_fm", "s_geo")),
    Key("aug.n", 1, int, "augment", "RandAugment chain depth"),
    Key("aug.m", 7.0, float, "augment", "RandAugment severity (0-10)"),
    Key("aug.static_cutout", True, bool, "augment", "erase a 10% rectangle before the chain"),
    Key("aug.naive_alignment", False, bool, "augment", "compare views without realignment (same as loss.alignment=naive)"),
    Key("model.depth", 4, int, "model", "number of down-sampling stages"),
    Key("model.base_channels", 16, int, "model", "channels at full resolution"),
    Key("model.max_depth", 80.0, float, "model", "output scale in meters"),
    Key("loss.source_variant", "pairwise_sum", str, "losses", "source loss during adaptation",
        ("pairwise_sum", "per_sample", "pairwise_separate", "none")),
    Key("loss.streams", 3, int, "losses", "target views per original, original included", (2, 3, 4)),
    Key("loss.stop_grad_ref", True, bool, "losses", "treat the unperturbed prediction as a constant pseudo-label"),
    Key("loss.alignment", "realign", str, "losses", "consistency alignment", ("realign", "naive")),
    Key("loss.reduction", "mean", str, "losses", "masked mean per sample, or plain sum", ("mean", "sum")),
    Key("batch.N", 12, int, "losses", "source pairs per adaptation step"),
    Key("batch.r", "2", str, "losses", "ratio of source pairs to target originals, e.g. 2 or 9/2"),
    Key("metrics.cap", 80.0, float, "metrics", "evaluation depth cap in meters"),
    Key("metrics.crop", "none", str, "metrics", "evaluation crop", ("garg", "none")),
    Key("metrics.min_depth", 1e-3, float, "metrics", "depth floor for ratio/log metrics"),
    Key("metrics.accuracy", "ratio", str, "metrics", "threshold accuracy form", ("ratio", "abs_margin")),
    Key("metrics.sqrel", "standard", str, "metrics", "SqRel denominator", ("standard", "squared_denominator")),
    Key("train.profile", "desk", str, "trainer", "default set", ("desk", "paper-scale")),
    Key("train.name", "run", str, "trainer", "run directory name under the runs root"),
    Key("train.init", "", str, "trainer", "checkpoint to start adaptation from"),
    Key("train.pretrain_lr", 4e-3, float, "trainer", "pretraining learning rate"),
    Key("train.pretrain_epochs", 50, int, "trainer", "pretraining epochs"),
    Key("train.pretrain_batch", 8, int, "trainer", "pretraining batch size"),
    Key("train.adapt_lr", 3e-5, float, "trainer", "adaptation learning rate"),
    Key("train.adapt_epochs", 10, int, "trainer", "adaptation epochs"),
    Key("train.decay_start_epoch", 4, int, "trainer", "adaptation epoch where linear lr decay starts"),
    Key("train.cutmix_alpha", 0.5, float, "trainer", "CutMix patch area fraction"),
    Key("train.clip_norm", 10.0, float, "trainer", "global gradient-norm clip, 0 disables"),
    Key("train.seed_model", 0, int, "trainer", "model initialisation seed"),
    Key("train.seed_data", 0, int, "trainer", "batch sampling seed"),
    Key("train.seed_augment", 0, int, "trainer", "augmentation seed"),
    Key("train.checkpoint_every", 1, int, "trainer", "epochs between checkpoints"),
    Key("train.workers", 0, int, "trainer", "augmentation workers (0 = in-process)"),
]
KEYS = {k.name: k for k in _KEYS}

PROFILES = {
    "desk": {},
    "paper-scale": {
        "train.pretrain_epochs": 250,
        "train.adapt_lr": 4e-8,
        "train.clip_norm": 0.0,
    },
}


def _coerce(key: Key, raw):
    if isinstance(raw, str):
        text = raw.strip()
        if key.kind is bool:
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                value = True
            elif low in ("0", "false", "no", "off"):
                value = False
            else:
                raise ConfigurationError(f"{key.name}: expected a boolean, got {raw!r}")
        else:
            try:
                value = key.kind(text)
            except ValueError as exc:
                raise ConfigurationError(f"{key.name}: expected {key.kind.__name__}, got {raw!r}") from exc
    else:
        value = key.kind(raw)
    if key.choices and value not in key.choices:
        raise ConfigurationError(f"{key.name}: {value!r} not in {list(key.choices)}")
    return value


def parse_assignments(lines, origin="<overrides>"):
    out = {}
    for n, line in enumerate(lines, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigurationError(f"{origin}:{n}: expected key = value, got {line!r}")
        k, v = (s.strip() for s in line.split("=", 1))
        if k not in KEYS:
            raise ConfigurationError(f"{origin}:{n}: unknown key {k!r}")
        out[k] = v
    return out


class RunConfig(dict):
    """Resolved key -> typed value mapping."""

    @classmethod
    def resolve(cls, path=None, overrides=None):
        layers = []
        if path:
            p = Path(path)
            if not p.exists():
                raise ConfigurationError(f"config file not found: {p}")
            layers.append(parse_assignments(p.read_text().splitlines(), str(p)))
        if overrides:
            if isinstance(overrides, dict):
                unknown = [k for k in overrides if k not in KEYS]
                if unknown:
                    raise ConfigurationError(f"unknown key(s): {', '.join(unknown)}")
                layers.append(dict(overrides))
            else:
                layers.append(parse_assignments(overrides))
        merged = {}
        for layer in layers:
            merged.update(layer)
        profile = _coerce(KEYS["train.profile"], merged.get("train.profile", KEYS["train.profile"].default))
        cfg = cls({k.name: k.default for k in _KEYS})
        cfg.update(PROFILES[profile])
        for k, v in merged.items():
            cfg[k] = _coerce(KEYS[k], v)
        return cfg

    def with_overrides(self, **dotted):
        out = RunConfig(self)
        for k, v in dotted.items():
            k = k.replace("__", ".")
            if k not in KEYS:
                raise ConfigurationError(f"unknown key {k!r}")
            out[k] = _coerce(KEYS[k], v)
        return out

    def digest(self):
        blob = json.dumps({k: self[k] for k in sorted(self)}, sort_keys=True, default=str)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def dump(self):
        return "\n".join(f"{k} = {_fmt(self[k])}" for k in sorted(self)) + "\n"

    def path(self, key, fallback):
        value = self[key]
        return Path(value) if value else Path(self["data.root"]) / fallback


def _fmt(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    return str(v)


def describe_keys():
    """Lines ``key  default  [owner]  help`` for every key."""
    width = max(len(k.name) for k in _KEYS)
    return [
        f"{k.name:<{width}}  default={_fmt(k.default)}  [{k.owner}]  {k.help}"
        + (f" {{{', '.join(map(str, k.choices))}}}" if k.choices else "")
        for k in _KEYS
    ]
