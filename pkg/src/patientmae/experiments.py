"""End-to-end synthetic experiments: generate, pretrain, probe and inspect."""

from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch

from .core_types import Eye
from .engine import TrainConfig, model_from_checkpoint, run_pretraining
from .ingest import load_manifest
from .masking import MaskSchedule
from .model import ModelConfig
from .objectives import LossWeights, cosine_distance, counterpart_index
from .probe import ProbeConfig, extract_features, mass_inside, predict_metadata, task_targets, train_probe
from .synth import SynthSpec, analytic_retina_mask, generate_dataset, read_labels
from .metrics import auroc

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class SyntheticExperiment:
    seed: int = 0
    n_patients: int = 200
    views: tuple = (("L", "A"), ("R", "B"))
    epochs: int = 30
    warmup_epochs: int = 3
    base_lr: float = 3e-4
    batch_size: int = 16
    use_lme: bool = True
    region_masking: bool = True
    adaptive_ratio: bool = True
    encoder: str = "TINY"
    attention_layer: int = -1

    def train_config(self) -> TrainConfig:
        weights = LossWeights() if self.use_lme else LossWeights(lambda_meta=0.0)
        return TrainConfig(
            epochs=self.epochs,
            warmup_epochs=self.warmup_epochs,
            base_lr=self.base_lr,
            batch_size=self.batch_size,
            seed=self.seed,
            schedule=MaskSchedule(T=self.epochs),
            weights=weights,
            model=ModelConfig(encoder=self.encoder, decoder="TINY", meta_token_count=2 if self.use_lme else 0),
            region_masking=self.region_masking,
            adaptive_ratio=self.adaptive_ratio,
        )


def _split_images(records, rows, split):
    imgs, lab = [], []
    for rec in records:
        if rows[rec.patient_id]["split"] == split:
            imgs.extend(rec.images)
            lab.extend([rows[rec.patient_id]] * len(rec.images))
    return imgs, lab


@torch.no_grad()
def pair_consistency(model, records, rng: np.random.Generator):
    """Mean cosine distance over corresponding patches for same-patient and shuffled cross-patient pairs."""
    model.eval()
    g = model.config.grid
    firsts = [rec.images[0] for rec in records if len(rec.images) > 1]
    seconds = [rec.images[1] for rec in records if len(rec.images) > 1]
    perm = rng.permutation(len(seconds))
    # derangement so no patient is paired with itself
    while len(perm) > 1 and np.any(perm == np.arange(len(perm))):
        perm = rng.permutation(len(seconds))
    shuffled = [seconds[j] for j in perm]

    def distances(a_list, b_list):
        xa = torch.from_numpy(np.stack([im.pixels for im in a_list])).permute(0, 3, 1, 2).float()
        xb = torch.from_numpy(np.stack([im.pixels for im in b_list])).permute(0, 3, 1, 2).float()
        za, zb = model.encode(xa).patches, model.encode(xb).patches
        mirror = torch.tensor([a.effective_eye != b.effective_eye for a, b in zip(a_list, b_list)])
        idx = counterpart_index(torch.arange(g * g).expand(len(a_list), -1), mirror, g)
        zb = torch.gather(zb, 1, idx[..., None].expand(-1, -1, zb.shape[-1]))
        return cosine_distance(za, zb).mean(dim=1).numpy()

    return float(distances(firsts, seconds).mean()), float(distances(firsts, shuffled).mean())


def run_synthetic_experiment(exp: SyntheticExperiment, workdir) -> dict:
    """Generate data, pretrain on the train split, and evaluate on held-out patients."""
    work = Path(workdir)
    t0 = time.time()
    spec = SynthSpec(n_patients=exp.n_patients, views=exp.views, seed=exp.seed)
    data_dir = work / "data"
    if (data_dir / "labels.csv").exists():
        manifest, labels = data_dir / "manifest.csv", data_dir / "labels.csv"
    else:
        ds = generate_dataset(spec, data_dir)
        manifest, labels = ds.manifest, ds.labels
    rows = read_labels(labels)
    records = load_manifest(manifest)
    train_ids = {pid for pid, r in rows.items() if r["split"] == "train"}
    config = exp.train_config()
    t1 = time.time()
    ckpt = run_pretraining(manifest, config, work / "run", records=records, patient_ids=train_ids, save_every=0)
    t2 = time.time()
    model = model_from_checkpoint(ckpt)

    split = {s: _split_images(records, rows, s) for s in ("train", "val", "test")}
    feats = {s: extract_features(model, split[s][0]) for s in split}
    gy = {s: task_targets("gender", split[s][1]) for s in split}
    probe = train_probe(feats["train"], gy["train"], feats["val"], gy["val"], ProbeConfig(seed=exp.seed))
    result = {
        "experiment": asdict(exp),
        "gender_probe_auroc": auroc(probe.predict(feats["test"]), gy["test"]),
        "probe_best_epoch": probe.best_epoch,
    }

    test_records = [r for r in records if rows[r.patient_id]["split"] == "test"]
    result["consistency_same"], result["consistency_cross"] = pair_consistency(
        model, test_records, np.random.default_rng(exp.seed)
    )

    if model.has_meta:
        ages = {s: task_targets("age", split[s][1]) for s in split}
        age_pred, p_female = predict_metadata(model, split["test"][0])
        result["meta_age_mae"] = float(np.mean(np.abs(age_pred - ages["test"])) * 100)
        result["mean_baseline_age_mae"] = float(np.mean(np.abs(ages["train"].mean() - ages["test"])) * 100)
        result["meta_gender_auroc"] = auroc(p_female, gy["test"])
        region = analytic_retina_mask(model.config.image_size, spec.radius_fraction)
        x = torch.from_numpy(np.stack([im.pixels for im in split["test"][0]])).permute(0, 3, 1, 2).float()
        for token in ("CLS", "AGE", "GENDER"):
            with torch.no_grad():
                heat, _ = model.attention_maps(x, token=token, layer=exp.attention_layer)
            masses = [mass_inside(h.double().numpy(), region) for h in heat]
            result[f"attention_inside_{token.lower()}"] = float(np.mean(masses))
    result["seconds_data"] = t1 - t0
    result["seconds_pretrain"] = t2 - t1
    result["seconds_eval"] = time.time() - t2
    (work / "result.json").write_text(json.dumps(result, indent=2, default=str))
    return result
