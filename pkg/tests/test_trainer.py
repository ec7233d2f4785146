import csv

import numpy as np
import pytest
import torch

from depthadapt.augment import RandAugmentPolicy
from depthadapt.dataset import generate_toy_domain_pair, load_manifest
from depthadapt.exceptions import ArgumentError, ConfigurationError, NonFiniteLossError
from depthadapt.losses import LossConfig
from depthadapt.model import ModelSpec, init_model, parameter_checksum
from depthadapt.trainer import (
    LOG_COLUMNS,
    Trainer,
    TrainConfig,
    adapt,
    checkpoint_file,
    latest_checkpoint,
    lr_at,
    pretrain,
)

SPEC = ModelSpec(32, 48, 2, 4, max_depth=80.0)


@pytest.fixture(scope="module")
def toy(tmp_path_factory):
    root = tmp_path_factory.mktemp("toy")
    src, tgt = generate_toy_domain_pair(3, 8, 8, (32, 48), root)
    return src, tgt


def pre_cfg(**kw):
    kw.setdefault("epochs", 1)
    return TrainConfig.pretrain_defaults(model=SPEC, batch_size=4, **kw)


def ad_cfg(**kw):
    kw.setdefault("epochs", 1)
    kw.setdefault("decay_start_epoch", 0)
    return TrainConfig.adapt_defaults(model=SPEC, batch_size=4, **kw)


def arrays(src, tgt):
    images, depths = src.arrays()
    return (images, depths, np.asarray(src.ids)), (tgt.images(), np.asarray(tgt.ids))


# --- schedule ---

@pytest.mark.parametrize("epoch,expected", [(0, 4e-8), (3, 4e-8), (4, 4e-8), (7, 2e-8), (10, 0.0)])
def test_lr_schedule_paper_scale_profile(epoch, expected):
    cfg = TrainConfig.adapt_defaults("paper-scale")
    assert lr_at(cfg, epoch) == pytest.approx(expected, rel=1e-12, abs=1e-20)


def test_lr_schedule_out_of_range():
    cfg = TrainConfig.adapt_defaults()
    for bad in (-1, 11):
        with pytest.raises(ArgumentError):
            lr_at(cfg, bad)


def test_profiles():
    assert (TrainConfig.pretrain_defaults().epochs, TrainConfig.pretrain_defaults("paper-scale").epochs) == (50, 250)
    assert TrainConfig.pretrain_defaults().lr == 4e-3
    assert TrainConfig.adapt_defaults().lr == 3e-5
    assert TrainConfig.adapt_defaults("paper-scale").clip_norm == 0


def test_invalid_configs():
    with pytest.raises(ConfigurationError):
        ad_cfg(ratio="5").validate()
    with pytest.raises(ConfigurationError):
        ad_cfg(streams=4).validate()
    with pytest.raises(ConfigurationError):
        TrainConfig(stage="finetune").validate()


# --- pretraining ---

def test_pretrain_deterministic(toy):
    src, _ = toy
    a = pretrain(src, pre_cfg())
    b = pretrain(src, pre_cfg())
    assert parameter_checksum(a) == parameter_checksum(b)
    c = pretrain(src, pre_cfg(seed_augment=1))
    assert parameter_checksum(a) != parameter_checksum(c)


def test_pretrain_needs_labels(toy):
    _, tgt = toy
    with pytest.raises(ConfigurationError):
        pretrain(tgt, pre_cfg())


def test_pretrain_loss_decreases(toy):
    src, _ = toy
    images, depths = src.arrays()
    tr = Trainer(init_model(SPEC, 0), pre_cfg(epochs=50), (images, depths, np.asarray(src.ids)))
    tr.run()
    means = [e["total"] for e in tr.loss_stats["epoch_means"]]
    assert len(means) == 50
    assert np.mean(means[-5:]) < means[0]


def test_cutmix_alpha_zero_matches_plain_augmentation(toy, monkeypatch):
    src, _ = toy
    images, depths = src.arrays()
    source = (images, depths, np.asarray(src.ids))
    import depthadapt.trainer as trainer_mod

    plain = Trainer(init_model(SPEC, 0), pre_cfg(cutmix_alpha=0.0), source)
    plain.run()

    calls = []
    monkeypatch.setattr(trainer_mod, "cutmix", lambda *a, **k: calls.append(1))
    again = Trainer(init_model(SPEC, 0), pre_cfg(cutmix_alpha=0.0), source)
    again.run()
    assert not calls
    assert parameter_checksum(plain.net) == parameter_checksum(again.net)


# --- adaptation ---

def test_adapt_forward_batch_size(toy):
    src, tgt = toy
    source, target = arrays(src, tgt)
    cfg = TrainConfig.adapt_defaults(model=SPEC)       # N=12, r=2, streams=3
    tr = Trainer(init_model(SPEC, 0), cfg, source, (np.concatenate([target[0]] * 2), np.arange(16)))
    row = tr.train_step()
    assert row["forward_batch"] == 42 == tr.last_forward_batch
    assert row["total"] == pytest.approx(0.5 * (row["source_loss"] + row["consistency_loss"]), rel=1e-12)


def test_adapt_deterministic(toy):
    src, tgt = toy
    net0 = init_model(SPEC, 0)
    a = adapt(init_model(SPEC, 0), src, tgt, ad_cfg())
    b = adapt(init_model(SPEC, 0), src, tgt, ad_cfg())
    assert parameter_checksum(a) == parameter_checksum(b) != parameter_checksum(net0)


def test_adapt_zero_loss_leaves_parameters(toy):
    src, tgt = toy
    source, target = arrays(src, tgt)
    net = init_model(SPEC, 0)
    before = parameter_checksum(net)
    cfg = ad_cfg(loss=LossConfig(source_variant="none"), policy=RandAugmentPolicy("s_fm", 0, 7, False))
    row = Trainer(net, cfg, source, target).train_step()
    assert row["total"] == 0
    assert parameter_checksum(net) == before


def test_adapt_needs_target(toy):
    src, _ = toy
    source, _ = arrays(src, src)
    with pytest.raises(ConfigurationError):
        Trainer(init_model(SPEC, 0), ad_cfg(), source)
    with pytest.raises(ConfigurationError):
        adapt(init_model(SPEC, 0), src, src, pre_cfg())


def test_adapt_epoch_is_one_pass_over_target(toy):
    src, tgt = toy
    source, target = arrays(src, tgt)
    tr = Trainer(init_model(SPEC, 0), ad_cfg(), source, target)
    assert tr.steps_per_epoch() == 4  # 8 target originals, 2 per step
    tr.run()
    assert tr.step == 4 and tr.epoch == 1


def test_log_and_checkpoints(toy, tmp_path):
    src, tgt = toy
    adapt(init_model(SPEC, 0), src, tgt, ad_cfg(epochs=2), run_dir=tmp_path)
    with open(tmp_path / "log.tsv") as fh:
        rows = list(csv.DictReader(fh, delimiter="\t"))
    assert tuple(rows[0]) == LOG_COLUMNS
    assert [int(r["step"]) for r in rows] == list(range(8))
    assert latest_checkpoint(tmp_path).name == "ckpt-0002"
    assert checkpoint_file(tmp_path / "ckpt-0001").exists()
    assert (tmp_path / "ckpt-0001" / "meta.json").exists()


@pytest.mark.parametrize("stage", ["pretrain", "adapt"])
def test_resume_matches_uninterrupted(toy, tmp_path, stage):
    src, tgt = toy
    source, target = arrays(src, tgt)
    cfg = pre_cfg(epochs=3) if stage == "pretrain" else ad_cfg(epochs=3)
    k = 3
    full = Trainer(init_model(SPEC, 0), cfg, source, target)
    full.run(max_steps=k + 1)

    part = Trainer(init_model(SPEC, 0), cfg, source, target)
    part.run(max_steps=k)
    part.save(tmp_path / "mid")
    part.run(max_steps=5)  # diverge the in-memory trainer; resume must not care
    resumed = Trainer.resume(tmp_path / "mid", cfg, source, target)
    assert resumed.step == k
    resumed.train_step()
    assert parameter_checksum(resumed.net) == parameter_checksum(full.net)


def test_resume_rejects_other_config(toy, tmp_path):
    src, tgt = toy
    source, target = arrays(src, tgt)
    tr = Trainer(init_model(SPEC, 0), ad_cfg(), source, target)
    tr.train_step()
    tr.save(tmp_path / "c")
    with pytest.raises(ConfigurationError):
        Trainer.resume(tmp_path / "c", ad_cfg(lr=1.0), source, target)


def test_nonfinite_loss_dumps_batch(toy, tmp_path):
    src, tgt = toy
    source, target = arrays(src, tgt)
    net = init_model(SPEC, 0)
    with torch.no_grad():
        net.head.bias.fill_(float("nan"))
    tr = Trainer(net, ad_cfg(), source, target, run_dir=tmp_path)
    with pytest.raises(NonFiniteLossError) as err:
        tr.train_step()
    assert err.value.batch_ids
    assert (tmp_path / "nonfinite-step0.json").exists()


def test_workers_do_not_change_results(toy):
    src, tgt = toy
    a = adapt(init_model(SPEC, 0), src, tgt, ad_cfg(workers=0))
    b = adapt(init_model(SPEC, 0), src, tgt, ad_cfg(workers=2))
    assert parameter_checksum(a) == parameter_checksum(b)
