import json
import math
from dataclasses import replace

import numpy as np
import pytest
import torch

from patientmae.engine import (
    CheckpointError,
    TrainConfig,
    Trainer,
    TrainingError,
    compute_losses,
    load_checkpoint,
    lr_at,
    model_from_checkpoint,
    channel_stats,
    prepare_pair,
    resolve_pixel_stats,
    run_pretraining,
    train_step,
)
from patientmae.ingest import enumerate_all_pairs
from patientmae.masking import MaskSchedule, masking_ratio
from patientmae.model import ModelConfig, build_model
from patientmae.objectives import LossWeights, NonFiniteLossError, PerceptualExtractor

from conftest import make_record


def small_config(**kw):
    base = dict(epochs=4, warmup_epochs=1, batch_size=8, base_lr=1e-3, schedule=MaskSchedule(T=4))
    base.update(kw)
    return TrainConfig(**base)


@pytest.fixture(scope="module")
def records(synth_patients):
    # two views per patient keeps runs short; the first patient keeps three
    out = []
    for i, (rec, _) in enumerate(synth_patients):
        keep = rec.images[:3] if i == 0 else rec.images[::3]
        out.append(replace(rec, images=tuple(keep)))
    return out


def first_batch(records, config, epoch=0):
    return next(Trainer(records, config).batches(epoch))


# ---------------------------------------------------------------- lr schedule
def test_lr_examples():
    cfg = TrainConfig()
    spe = 10
    assert lr_at(0, cfg, spe) == 0.0
    assert lr_at(cfg.warmup_epochs * spe, cfg, spe) == pytest.approx(5e-5, abs=1e-15)
    assert abs(lr_at(cfg.epochs * spe, cfg, spe)) <= 1e-12
    mid = (cfg.warmup_epochs * spe + cfg.epochs * spe) // 2
    assert lr_at(mid, cfg, spe) == pytest.approx(2.5e-5, rel=1e-9)
    with pytest.raises(ValueError):
        lr_at(-1, cfg, spe)


def test_lr_shape():
    cfg = TrainConfig()
    values = [lr_at(s, cfg, 7) for s in range(cfg.epochs * 7 + 1)]
    warm = cfg.warmup_epochs * 7
    assert all(a < b for a, b in zip(values[:warm], values[1 : warm + 1]))
    assert all(a >= b for a, b in zip(values[warm:], values[warm + 1 :]))


# ---------------------------------------------------------------- config
def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(epochs=3, warmup_epochs=3)
    with pytest.raises(ValueError):
        TrainConfig(batch_size=1)
    with pytest.raises(ValueError):
        TrainConfig(dtype="float16")
    with pytest.raises(ValueError):
        TrainConfig.from_dict({"epochs": 5, "bogus": 1})


def test_config_roundtrip_and_hash():
    cfg = small_config(weights=LossWeights(lambda_meta=0.0), model=ModelConfig(meta_token_count=0))
    back = TrainConfig.from_dict(json.loads(json.dumps(cfg.to_dict())))
    assert back == cfg
    assert back.hash() == cfg.hash()
    assert replace(cfg, workers=4).hash() == cfg.hash()
    assert replace(cfg, seed=1).hash() != cfg.hash()
    # schedule length defaults to the epoch count
    assert TrainConfig.from_dict({"epochs": 12, "warmup_epochs": 2}).schedule.T == 12


def test_channel_stats(records):
    px = np.stack([im.pixels for rec in records for im in rec.images]).reshape(-1, 3).astype(np.float64)
    mean, std = channel_stats(records)
    assert np.allclose(mean, px.mean(axis=0), atol=1e-9)
    assert np.allclose(std, px.std(axis=0), atol=1e-9)
    resolved = resolve_pixel_stats(small_config(), records)
    assert resolved.model.pixel_mean == mean and resolved.model.pixel_std == std
    fixed = small_config(pixel_stats="model")
    assert resolve_pixel_stats(fixed, records) is fixed


# ---------------------------------------------------------------- pairs and batches
def test_prepare_pair_deterministic_and_region_bound(records):
    cfg = small_config()
    tpl = enumerate_all_pairs(records)[0]
    a = prepare_pair(tpl, cfg, 1, 0, 0.9)
    b = prepare_pair(tpl, cfg, 1, 0, 0.9)
    for x, y in zip(a, b):
        assert np.array_equal(np.asarray(x), np.asarray(y))
    assert not a.masked_eligible[a.visible_indices].any()
    assert a.visible_mask.sum() == len(a.visible_indices)


def test_batches_independent_of_workers(records):
    cfg = small_config()
    a = list(Trainer(records, cfg).batches(0))
    b = list(Trainer(records, replace(cfg, workers=3)).batches(0))
    assert len(a) == len(b)
    for x, y in zip(a, b):
        assert torch.equal(x.masked, y.masked)
        assert torch.equal(x.visible_idx, y.visible_idx)
        assert x.patient_ids == y.patient_ids


def test_every_group_receives_gradient(records):
    cfg = small_config()
    trainer = Trainer(records, cfg)
    batch = next(trainer.batches(0))
    report = train_step(trainer.model, trainer.optimizer, trainer.extractor, batch, cfg, lr=1e-4)
    norms = report.extra["grad_norms"]
    assert set(norms) == set(trainer.model.parameter_groups())
    assert all(v > 0 for v in norms.values()), norms


def test_lambda_meta_zero_kills_meta_path(records):
    cfg = small_config(weights=LossWeights(lambda_meta=0.0))
    model = build_model(cfg.model, seed=0)
    batch = first_batch(records, cfg)
    total, terms, _ = compute_losses(model, PerceptualExtractor(0), batch, cfg.weights)
    total.backward()
    for name in ("age_head", "gender_head"):
        for p in model.parameter_groups()[name]:
            assert p.grad is None or torch.count_nonzero(p.grad) == 0
    # meta terms are still reported but add nothing to the total
    assert terms["meta_gender_ce"].item() > 0
    w = cfg.weights
    expected = w.lambda_recon * (terms["recon_pixel"] + w.perceptual * terms["recon_perceptual"])
    expected = expected + w.lambda_consis * terms["consistency"]
    assert total.item() == expected.item()


def test_no_meta_tokens_model(records):
    cfg = small_config(weights=LossWeights(lambda_meta=0.0), model=ModelConfig(meta_token_count=0))
    trainer = Trainer(records, cfg)
    reports = trainer.run_epoch()
    assert all(r.meta_gender_ce == 0.0 and r.meta_age_rmse == 0.0 for r in reports)
    assert "m_age" not in trainer.model.parameter_groups()


def test_nan_aborts_with_term(records):
    cfg = small_config()
    trainer = Trainer(records, cfg)
    with torch.no_grad():
        trainer.model.recon_head.weight.fill_(float("nan"))
    batch = next(trainer.batches(0))
    with pytest.raises(NonFiniteLossError) as info:
        train_step(trainer.model, trainer.optimizer, trainer.extractor, batch, cfg, lr=1e-4)
    assert info.value.term == "recon_pixel"
    assert math.isnan(info.value.terms["recon_pixel"])


def test_empty_pair_set():
    recs = [make_record(f"P{i}", [("L", "A")]) for i in range(3)]
    with pytest.raises(TrainingError):
        Trainer(recs, small_config())


# ---------------------------------------------------------------- full runs
@pytest.fixture(scope="module")
def reference_run(records, tmp_path_factory):
    out = tmp_path_factory.mktemp("ref")
    final = run_pretraining(None, small_config(), out, records=records)
    return out, final


def test_run_outputs(reference_run):
    out, final = reference_run
    assert final.is_file()
    for e in range(1, 5):
        assert (out / f"checkpoint_epoch{e:03d}.pt").is_file()
    lines = [json.loads(ln) for ln in (out / "losses.jsonl").read_text().splitlines()]
    keys = {
        "recon_pixel", "recon_perceptual", "consistency", "meta_age_rmse", "meta_gender_ce", "total",
        "masked_retinal_patches", "consistency_pairs", "epoch", "step", "lr", "mask_ratio", "grad_norms",
    }
    assert all(set(ln) == keys for ln in lines)
    assert [ln["step"] for ln in lines] == list(range(len(lines)))
    sched = MaskSchedule(T=4)
    for ln in lines:
        assert ln["mask_ratio"] == masking_ratio(ln["epoch"], sched)
    rows = (out / "schedule.tsv").read_text().splitlines()
    assert rows[0] == "epoch\tmask_ratio"
    assert [float(r.split("\t")[1]) for r in rows[1:]] == [masking_ratio(t, sched) for t in range(5)]


def test_identical_seeds_identical_logs(records, reference_run, tmp_path):
    out, _ = reference_run
    run_pretraining(None, replace(small_config(), workers=2), tmp_path, records=records)
    assert (tmp_path / "losses.jsonl").read_bytes() == (out / "losses.jsonl").read_bytes()


def test_resume_matches_uninterrupted(records, reference_run, tmp_path):
    out, final = reference_run
    cfg = small_config()
    run_pretraining(None, cfg, tmp_path, records=records, stop_after=2)
    assert not (tmp_path / "checkpoint_final.pt").exists()
    resumed = run_pretraining(None, cfg, tmp_path, records=records, resume_from=tmp_path / "checkpoint_epoch002.pt")
    assert (tmp_path / "losses.jsonl").read_bytes() == (out / "losses.jsonl").read_bytes()
    a, b = load_checkpoint(final), load_checkpoint(resumed)
    assert a["global_step"] == b["global_step"]
    for k in a["model"]:
        assert torch.equal(a["model"][k], b["model"][k]), k


def test_resume_refuses_other_config(records, reference_run, tmp_path):
    out, _ = reference_run
    with pytest.raises(CheckpointError, match="base_lr"):
        run_pretraining(None, small_config(base_lr=2e-3), tmp_path, records=records,
                        resume_from=out / "checkpoint_epoch002.pt")


def test_checkpoint_roundtrip(records, reference_run):
    _, final = reference_run
    payload = load_checkpoint(final)
    assert payload["config"] == resolve_pixel_stats(small_config(), records)
    assert payload["epoch"] == 4
    model = model_from_checkpoint(final)
    x = torch.rand(1, 3, 224, 224)
    assert torch.equal(model.encode(x).cls, model_from_checkpoint(payload).encode(x).cls)


def test_corrupt_checkpoint(tmp_path):
    bad = tmp_path / "bad.pt"
    bad.write_bytes(b"not a checkpoint")
    with pytest.raises(CheckpointError):
        load_checkpoint(bad)
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "missing.pt")
    torch.save({"weights": 1}, tmp_path / "other.pt")
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "other.pt")
