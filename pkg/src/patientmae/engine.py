"""Pretraining loop: batch preparation, optimisation, logging, checkpoints and exact resume."""

from __future__ import annotations

import hashlib
import json
import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import NamedTuple, Optional

import numpy as np
import torch

from .core_types import ValidationError
from .ingest import (
    STREAM_MASK,
    STREAM_ORDER,
    assign_roles,
    augment_views,
    enumerate_all_pairs,
    item_rng,
    load_manifest,
)
from .masking import MaskSchedule, masking_ratio, sample_mask, schedule_table
from .model import ModelConfig, SiameseMAE, build_model, pack_visible, patchify, unpatchify
from .objectives import (
    as_float,
    LossReport,
    LossWeights,
    PerceptualExtractor,
    compose_reconstruction,
    consistency_loss,
    match_counterparts,
    meta_loss,
    perceptual_loss,
    recon_pixel_loss,
    total_loss,
)
from .retina_mask import EligibilityGrid, estimate_retina_mask, patch_eligibility

logger = logging.getLogger(__name__)

CHECKPOINT_SCHEMA_VERSION = 1
DTYPES = {"float32": torch.float32, "float64": torch.float64}


class TrainingError(RuntimeError):
    pass


class CheckpointError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    warmup_epochs: int = 3
    base_lr: float = 5e-5
    batch_size: int = 16
    weight_decay: float = 0.05
    betas: tuple = (0.9, 0.95)
    grad_clip: float = 1.0
    seed: int = 0
    schedule: MaskSchedule = field(default_factory=lambda: MaskSchedule(T=30))
    weights: LossWeights = field(default_factory=LossWeights)
    model: ModelConfig = field(default_factory=ModelConfig)
    coverage_threshold: float = 0.5
    region_masking: bool = True
    adaptive_ratio: bool = True
    fixed_ratio: float = 0.75
    augment: bool = True
    perceptual_seed: int = 0
    dtype: str = "float32"
    pixel_stats: str = "data"  # "data": encoder input normalised by training-set channel stats; "model": keep ModelConfig's
    workers: int = 1

    def __post_init__(self):
        object.__setattr__(self, "betas", tuple(self.betas))
        if self.epochs < 1:
            raise ValidationError("epochs must be >= 1")
        if not (0 <= self.warmup_epochs < self.epochs):
            raise ValidationError("warmup_epochs must satisfy 0 <= warmup_epochs < epochs")
        if self.batch_size < 2:
            raise ValidationError("batch_size must be >= 2")
        if self.dtype not in DTYPES:
            raise ValidationError(f"dtype must be one of {sorted(DTYPES)}")
        if self.pixel_stats not in ("data", "model"):
            raise ValidationError("pixel_stats must be 'data' or 'model'")
        if self.adaptive_ratio and self.schedule.T < self.epochs - 1:
            raise ValidationError("masking schedule T shorter than the training run")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        data = dict(data)
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValidationError(f"unknown config keys: {sorted(unknown)}")
        epochs = int(data.get("epochs", cls.epochs))
        sched = dict(data.pop("schedule", {}) or {})
        sched.setdefault("T", epochs)
        data["schedule"] = MaskSchedule(**sched)
        data["weights"] = LossWeights(**(data.pop("weights", {}) or {}))
        data["model"] = ModelConfig(**(data.pop("model", {}) or {}))
        return cls(**data)

    @classmethod
    def from_json(cls, path) -> "TrainConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def result_dict(self) -> dict:
        """Config fields that influence results (excludes worker count)."""
        d = self.to_dict()
        d.pop("workers")
        return d

    def hash(self) -> str:
        blob = json.dumps(self.result_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    @property
    def torch_dtype(self):
        return DTYPES[self.dtype]


def lr_at(step: int, config: TrainConfig, steps_per_epoch: int) -> float:
    """Linear warmup to base_lr, then cosine decay to zero at the final step."""
    if step < 0:
        raise ValidationError("step must be non-negative")
    warm = config.warmup_epochs * steps_per_epoch
    total = config.epochs * steps_per_epoch
    if step < warm:
        return config.base_lr * step / warm
    progress = min((step - warm) / max(total - warm, 1), 1.0)
    return config.base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


def channel_stats(records) -> tuple:
    """Per-channel mean and std over every pixel of every image."""
    total = np.zeros(3)
    sq = np.zeros(3)
    n = 0
    for rec in records:
        for im in rec.images:
            px = im.pixels.reshape(-1, 3).astype(np.float64)
            total += px.sum(axis=0)
            sq += (px**2).sum(axis=0)
            n += px.shape[0]
    mean = total / n
    std = np.sqrt(np.maximum(sq / n - mean**2, 0.0))
    return tuple(float(v) for v in mean), tuple(float(max(v, 1e-3)) for v in std)


def resolve_pixel_stats(config: TrainConfig, records) -> TrainConfig:
    """Fill the model's input normalisation from the training records when requested."""
    if config.pixel_stats != "data":
        return config
    mean, std = channel_stats(records)
    return replace(config, model=replace(config.model, pixel_mean=mean, pixel_std=std))


def epoch_ratio(epoch: int, config: TrainConfig) -> float:
    if not config.adaptive_ratio:
        return config.fixed_ratio
    return masking_ratio(epoch, config.schedule)


# ---------------------------------------------------------------------- batches
class PreparedPair(NamedTuple):
    visible: np.ndarray  # (H, W, 3)
    masked: np.ndarray
    visible_indices: np.ndarray
    masked_eligible: np.ndarray  # (L,) bool
    visible_mask: np.ndarray  # (L,) bool
    mirror: bool
    age: float
    gender: int
    patient_id: str


class Batch(NamedTuple):
    visible: torch.Tensor  # (B, 3, H, W)
    masked: torch.Tensor
    visible_idx: torch.Tensor  # (B, K) padded
    visible_valid: torch.Tensor
    masked_eligible: torch.Tensor  # (B, L)
    visible_mask: torch.Tensor  # (B, L)
    mirror: torch.Tensor  # (B,)
    age: torch.Tensor
    gender: torch.Tensor
    patient_ids: tuple

    def __len__(self):
        return self.visible.shape[0]


def full_grid(grid: int) -> EligibilityGrid:
    return EligibilityGrid(np.ones((grid, grid), dtype=bool), 1.0)


def prepare_pair(template, config: TrainConfig, epoch: int, pair_index: int, ratio: float) -> PreparedPair:
    """Roles, augmentation, eligibility and mask plan for one pair; pure in its arguments."""
    pair = assign_roles(template, config.seed, epoch, pair_index)
    if config.augment:
        pair = augment_views(pair, config.seed, epoch, pair_index)
    mcfg = config.model
    if config.region_masking:
        mask = pair.view_masked.retina_mask
        if mask is None:
            mask = estimate_retina_mask(pair.view_masked)
        eligible = patch_eligibility(mask, mcfg.patch_size, config.coverage_threshold)
    else:
        eligible = full_grid(mcfg.grid)
    plan = sample_mask(eligible, ratio, item_rng(config.seed, STREAM_MASK, epoch, pair_index))
    return PreparedPair(
        visible=pair.view_visible.pixels,
        masked=pair.view_masked.pixels,
        visible_indices=plan.visible_indices,
        masked_eligible=plan.masked_eligible(),
        visible_mask=plan.visible_mask(),
        mirror=pair.mirrored,
        age=pair.labels.age_normalized,
        gender=pair.labels.gender.index,
        patient_id=pair.patient_id,
    )


def collate(items, dtype=torch.float32) -> Batch:
    def images(key):
        return torch.from_numpy(np.stack([getattr(p, key) for p in items])).permute(0, 3, 1, 2).to(dtype).contiguous()

    idx, valid = pack_visible([p.visible_indices for p in items])
    return Batch(
        visible=images("visible"),
        masked=images("masked"),
        visible_idx=idx,
        visible_valid=valid,
        masked_eligible=torch.from_numpy(np.stack([p.masked_eligible for p in items])),
        visible_mask=torch.from_numpy(np.stack([p.visible_mask for p in items])),
        mirror=torch.tensor([p.mirror for p in items]),
        age=torch.tensor([p.age for p in items], dtype=dtype),
        gender=torch.tensor([p.gender for p in items], dtype=torch.long),
        patient_ids=tuple(p.patient_id for p in items),
    )


def epoch_order(n_pairs: int, seed: int, epoch: int) -> np.ndarray:
    return item_rng(seed, STREAM_ORDER, epoch).permutation(n_pairs)


# ---------------------------------------------------------------------- losses
def compute_losses(model: SiameseMAE, extractor, batch: Batch, weights: LossWeights):
    """Forward both views and assemble every loss term.

    Returns (total tensor, dict of term tensors, counts dict).
    """
    cfg = model.config
    vis_out = model.encode(batch.visible)
    m_out = model.encode(batch.masked, batch.visible_idx, batch.visible_valid)
    pred = model.decode_cross(m_out, vis_out)

    target = patchify(batch.masked, cfg.patch_size)
    recon_pixel = recon_pixel_loss(pred, target, batch.masked_eligible)
    recon_image = unpatchify(compose_reconstruction(pred, target, batch.visible_mask), cfg.patch_size)
    recon_perc = perceptual_loss(recon_image, batch.masked, extractor)

    za, zb, valid = match_counterparts(
        m_out.patches, m_out.patch_index, m_out.patch_valid, vis_out.patches, vis_out.patch_index,
        batch.mirror, cfg.grid,
    )
    consis = consistency_loss(za, zb, valid)

    zero = recon_pixel.new_zeros(())
    if model.has_meta:
        rmses, ces = [], []
        for out in (vis_out, m_out):
            age_pred, gender_logits = model.predict_meta(out)
            r, c = meta_loss(age_pred, gender_logits, batch.age, batch.gender)
            rmses.append(r)
            ces.append(c)
        rmse, ce = (rmses[0] + rmses[1]) / 2, (ces[0] + ces[1]) / 2
    else:
        rmse = ce = zero
    terms = {
        "recon_pixel": recon_pixel,
        "recon_perceptual": recon_perc,
        "consistency": consis,
        "meta_age_rmse": rmse,
        "meta_gender_ce": ce,
    }
    total = total_loss(terms, weights)
    counts = {
        "masked_retinal_patches": int(batch.masked_eligible.sum()),
        "consistency_pairs": int(valid.sum()),
    }
    return total, terms, counts


def make_report(total, terms, counts, **extra) -> LossReport:
    return LossReport(
        recon_pixel=as_float(terms["recon_pixel"]),
        recon_perceptual=as_float(terms["recon_perceptual"]),
        consistency=as_float(terms["consistency"]),
        meta_age_rmse=as_float(terms["meta_age_rmse"]),
        meta_gender_ce=as_float(terms["meta_gender_ce"]),
        total=as_float(total),
        extra=extra,
        **counts,
    )


def make_optimizer(model: SiameseMAE, config: TrainConfig) -> torch.optim.Optimizer:
    decay, no_decay = [], []
    for name, p in model.named_parameters():
        if not p.requires_grad:
            continue
        (no_decay if p.ndim <= 1 or name.endswith(("token", "m_age", "m_gender", "slot_embed")) else decay).append(p)
    return torch.optim.AdamW(
        [{"params": decay, "weight_decay": config.weight_decay}, {"params": no_decay, "weight_decay": 0.0}],
        lr=config.base_lr,
        betas=config.betas,
    )


def group_grad_norms(model: SiameseMAE) -> dict:
    out = {}
    for name, params in model.parameter_groups().items():
        sq = sum(float(p.grad.detach().pow(2).sum()) for p in params if p.grad is not None)
        out[name] = math.sqrt(sq)
    return out


def train_step(model, optimizer, extractor, batch: Batch, config: TrainConfig, lr: float, **extra) -> LossReport:
    """One optimiser update on the weighted total loss."""
    model.train()
    for group in optimizer.param_groups:
        group["lr"] = lr
    total, terms, counts = compute_losses(model, extractor, batch, config.weights)
    optimizer.zero_grad(set_to_none=True)
    total.backward()
    norms = group_grad_norms(model)
    if config.grad_clip:
        torch.nn.utils.clip_grad_norm_(model.parameters(), config.grad_clip)
    optimizer.step()
    return make_report(total, terms, counts, lr=lr, grad_norms=norms, **extra)


# ---------------------------------------------------------------------- checkpoints
def save_checkpoint(path, model, optimizer, config: TrainConfig, epoch: int, global_step: int):
    """Write one archive with config echo, parameters, optimiser moments and RNG state."""
    path = Path(path)
    payload = {
        "schema_version": CHECKPOINT_SCHEMA_VERSION,
        "config": json.dumps(config.to_dict(), sort_keys=True),
        "config_hash": config.hash(),
        "epoch": int(epoch),
        "global_step": int(global_step),
        "model": model.state_dict(),
        "optimizer": optimizer.state_dict() if optimizer is not None else None,
        "torch_rng": torch.get_rng_state(),
    }
    tmp = path.with_suffix(path.suffix + ".tmp")
    torch.save(payload, tmp)
    os.replace(tmp, path)


def load_checkpoint(path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint not found: {path}")
    try:
        payload = torch.load(path, map_location="cpu", weights_only=True)
    except Exception as exc:  # torch raises a zoo of types on corrupt archives
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if not isinstance(payload, dict) or "schema_version" not in payload:
        raise CheckpointError(f"{path} is not a checkpoint archive")
    if payload["schema_version"] > CHECKPOINT_SCHEMA_VERSION:
        raise CheckpointError(f"checkpoint schema {payload['schema_version']} is newer than supported")
    for key in ("config", "model", "epoch", "global_step"):
        if key not in payload:
            raise CheckpointError(f"checkpoint {path} lacks field {key!r}")
    payload["config"] = TrainConfig.from_dict(json.loads(payload["config"]))
    return payload


def model_from_checkpoint(path_or_payload) -> SiameseMAE:
    payload = path_or_payload if isinstance(path_or_payload, dict) else load_checkpoint(path_or_payload)
    cfg = payload["config"]
    model = build_model(cfg.model, seed=cfg.seed, dtype=cfg.torch_dtype)
    model.load_state_dict(payload["model"])
    model.eval()
    return model


def config_diff(a: TrainConfig, b: TrainConfig) -> dict:
    da, db = a.result_dict(), b.result_dict()
    return {k: (da.get(k), db.get(k)) for k in sorted(set(da) | set(db)) if da.get(k) != db.get(k)}


# ---------------------------------------------------------------------- trainer
class Trainer:
    """Owns model and optimiser state across epochs.

    All per-item randomness derives from (seed, epoch, pair index), so results do
    not depend on ``workers``.
    """

    def __init__(self, records, config: TrainConfig):
        self.templates = enumerate_all_pairs(records)
        if not self.templates:
            raise TrainingError("no training pairs: every patient has fewer than two images")
        config = resolve_pixel_stats(config, records)
        self.config = config
        torch.use_deterministic_algorithms(True)
        self.model = build_model(config.model, seed=config.seed, dtype=config.torch_dtype)
        self.optimizer = make_optimizer(self.model, config)
        self.extractor = PerceptualExtractor(config.perceptual_seed).to(config.torch_dtype)
        self.epoch = 0
        self.global_step = 0

    @property
    def steps_per_epoch(self) -> int:
        return math.ceil(len(self.templates) / self.config.batch_size)

    def batches(self, epoch: int):
        cfg = self.config
        ratio = epoch_ratio(epoch, cfg)
        order = epoch_order(len(self.templates), cfg.seed, epoch)
        chunks = [order[i : i + cfg.batch_size] for i in range(0, len(order), cfg.batch_size)]

        def prep(i):
            return prepare_pair(self.templates[i], cfg, epoch, int(i), ratio)

        pool = ThreadPoolExecutor(cfg.workers) if cfg.workers > 1 else None
        try:
            for chunk in chunks:
                items = list(pool.map(prep, chunk)) if pool else [prep(i) for i in chunk]
                yield collate(items, cfg.torch_dtype)
        finally:
            if pool:
                pool.shutdown()

    def run_epoch(self, on_step=None) -> list:
        epoch = self.epoch
        ratio = epoch_ratio(epoch, self.config)
        reports = []
        for step_in_epoch, batch in enumerate(self.batches(epoch)):
            lr = lr_at(self.global_step, self.config, self.steps_per_epoch)
            report = train_step(
                self.model, self.optimizer, self.extractor, batch, self.config, lr,
                epoch=epoch, step=self.global_step, mask_ratio=ratio,
            )
            self.global_step += 1
            reports.append(report)
            if on_step:
                on_step(report)
        self.epoch += 1
        return reports

    def save(self, path):
        save_checkpoint(path, self.model, self.optimizer, self.config, self.epoch, self.global_step)

    def restore(self, payload: dict):
        if payload["config"].hash() != self.config.hash():
            diff = config_diff(payload["config"], self.config)
            raise CheckpointError(f"config mismatch on resume: {diff}")
        self.model.load_state_dict(payload["model"])
        if payload.get("optimizer") is not None:
            self.optimizer.load_state_dict(payload["optimizer"])
        if payload.get("torch_rng") is not None:
            torch.set_rng_state(payload["torch_rng"])
        self.epoch = int(payload["epoch"])
        self.global_step = int(payload["global_step"])


def write_schedule_tsv(path, config: TrainConfig):
    with Path(path).open("w", encoding="utf-8") as fh:
        fh.write("epoch\tmask_ratio\n")
        if config.adaptive_ratio:
            rows = schedule_table(config.schedule)
        else:
            rows = [(t, config.fixed_ratio) for t in range(config.epochs + 1)]
        for t, r in rows:
            fh.write(f"{t}\t{r!r}\n")


def run_pretraining(
    manifest,
    config: TrainConfig,
    out_dir,
    resume_from=None,
    records=None,
    patient_ids=None,
    save_every: int = 1,
    stop_after: Optional[int] = None,
) -> Path:
    """Train from a manifest (or preloaded records) and write checkpoints and logs to ``out_dir``.

    ``stop_after`` ends the run early after that many total epochs (for
    interrupted-run tests). Returns the path of the final checkpoint.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if records is None:
        records = load_manifest(manifest, patient_ids=patient_ids)
    elif patient_ids is not None:
        wanted = set(patient_ids)
        records = [r for r in records if r.patient_id in wanted]
    trainer = Trainer(records, config)
    losses_path = out / "losses.jsonl"
    if resume_from is not None:
        trainer.restore(load_checkpoint(resume_from))
        kept = []
        if losses_path.exists():
            kept = [ln for ln in losses_path.read_text().splitlines() if json.loads(ln)["epoch"] < trainer.epoch]
        losses_path.write_text("".join(ln + "\n" for ln in kept))
    else:
        losses_path.write_text("")
    write_schedule_tsv(out / "schedule.tsv", config)
    (out / "config.json").write_text(json.dumps(trainer.config.to_dict(), indent=2, sort_keys=True))

    with losses_path.open("a", encoding="utf-8") as log:

        def on_step(report):
            log.write(json.dumps(report.to_dict(), sort_keys=True) + "\n")

        last = config.epochs if stop_after is None else min(stop_after, config.epochs)
        while trainer.epoch < last:
            reports = trainer.run_epoch(on_step)
            log.flush()
            logger.info(
                "epoch %d/%d  ratio %.4f  loss %.4f",
                trainer.epoch, config.epochs, reports[-1].extra["mask_ratio"],
                float(np.mean([r.total for r in reports])),
            )
            if save_every and trainer.epoch % save_every == 0:
                trainer.save(out / f"checkpoint_epoch{trainer.epoch:03d}.pt")
    final = out / "checkpoint_final.pt"
    if trainer.epoch >= config.epochs:
        trainer.save(final)
    return final
