"""Downstream evaluation: frozen-feature probes, fine-tuning, metrics and attention export."""

from __future__ import annotations

import copy
import json
import logging
from dataclasses import asdict, dataclass
from enum import Enum
from pathlib import Path
from typing import Optional

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from PIL import Image

from .core_types import IMAGE_SIZE, FundusImage, Gender, ValidationError, normalize_age
from .metrics import auprc, auroc
from .model import SiameseMAE

logger = logging.getLogger(__name__)

TASKS = ("disease", "gender", "age")


class ProbeMode(str, Enum):
    LINEAR_PROBE = "probe"
    FINE_TUNE = "finetune"


@dataclass(frozen=True)
class ProbeConfig:
    mode: ProbeMode = ProbeMode.LINEAR_PROBE
    epochs: int = 50
    batch_size: int = 16
    lr: Optional[float] = None  # defaults: 1e-3 probe, 5e-5 fine-tune
    feature: str = "cls"  # or "mean" (mean-pooled patch tokens)
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "mode", ProbeMode(self.mode))
        if self.feature not in ("cls", "mean"):
            raise ValidationError("feature must be 'cls' or 'mean'")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValidationError("epochs and batch_size must be positive")

    @property
    def learning_rate(self) -> float:
        if self.lr is not None:
            return self.lr
        return 1e-3 if self.mode is ProbeMode.LINEAR_PROBE else 5e-5


def images_to_tensor(images, dtype=torch.float32) -> torch.Tensor:
    if isinstance(images, torch.Tensor):
        return images.to(dtype)
    if len(images) and isinstance(images[0], FundusImage):
        images = [im.pixels for im in images]
    arr = np.stack([np.asarray(im, dtype=np.float32) for im in images]) if len(images) else np.zeros((0, IMAGE_SIZE, IMAGE_SIZE, 3), np.float32)
    return torch.from_numpy(arr).permute(0, 3, 1, 2).to(dtype).contiguous()


def _pool(out, feature: str):
    return out.cls if feature == "cls" else out.patches.mean(dim=1)


@torch.no_grad()
def extract_features(model: SiameseMAE, images, feature: str = "cls", batch_size: int = 32) -> np.ndarray:
    """Full-visibility encoder features, one row per image."""
    if not isinstance(model, SiameseMAE):
        from .engine import model_from_checkpoint

        model = model_from_checkpoint(model)
    x = images_to_tensor(images, next(model.parameters()).dtype)
    if x.shape[-1] != model.config.image_size or x.shape[-2] != model.config.image_size:
        raise ValidationError(f"images are {tuple(x.shape[-2:])}, model expects {model.config.image_size}")
    model.eval()
    feats = [_pool(model.encode(x[i : i + batch_size]), feature) for i in range(0, len(x), batch_size)]
    if not feats:
        return np.zeros((0, model.config.embed_dim))
    return torch.cat(feats).double().numpy()


@torch.no_grad()
def predict_metadata(model: SiameseMAE, images, batch_size: int = 32):
    """Meta-head outputs: (normalized age predictions, P(female))."""
    x = images_to_tensor(images, next(model.parameters()).dtype)
    model.eval()
    ages, pf = [], []
    for i in range(0, len(x), batch_size):
        a, g = model.predict_meta(model.encode(x[i : i + batch_size]))
        ages.append(a)
        pf.append(g.softmax(-1)[:, Gender.F.index])
    return torch.cat(ages).double().numpy(), torch.cat(pf).double().numpy()


@dataclass
class ProbeResult:
    head: nn.Module
    mean: np.ndarray
    std: np.ndarray
    best_epoch: int
    best_val_score: float
    history: list
    regression: bool = False
    target_mean: float = 0.0  # regression targets are fitted standardized
    target_std: float = 1.0

    def predict(self, features) -> np.ndarray:
        x = torch.from_numpy((np.asarray(features, dtype=np.float64) - self.mean) / self.std)
        with torch.no_grad():
            return self.head(x).squeeze(-1).numpy() * self.target_std + self.target_mean


def _require_two_classes(y, split):
    if len(np.unique(y)) < 2:
        raise ValidationError(f"{split} split contains a single class")


def _score(pred, y, regression):
    if regression:
        return -float(np.sqrt(np.mean((pred - y) ** 2)))
    return auroc(pred, y)


def train_probe(train_x, train_y, val_x, val_y, config: ProbeConfig = ProbeConfig(), regression: bool = False) -> ProbeResult:
    """Linear head on frozen features; keeps the epoch with the best validation score.

    Plain full-batch gradient descent from a zero-initialised head, one step per epoch.

    Classification selects on validation AUROC, regression on validation RMSE.
    Ties keep the earlier epoch.
    """
    train_x = np.asarray(train_x, dtype=np.float64)
    val_x = np.asarray(val_x, dtype=np.float64)
    train_y = np.asarray(train_y, dtype=np.float64)
    val_y = np.asarray(val_y, dtype=np.float64)
    if not regression:
        _require_two_classes(train_y, "train")
        _require_two_classes(val_y, "val")
    mean = train_x.mean(axis=0)
    std = train_x.std(axis=0) + 1e-8
    xt = torch.from_numpy((train_x - mean) / std)
    y_mean, y_std = (train_y.mean(), train_y.std() + 1e-12) if regression else (0.0, 1.0)
    yt = torch.from_numpy((train_y - y_mean) / y_std)
    xv = (val_x - mean) / std

    head = nn.Linear(xt.shape[1], 1).double()
    nn.init.zeros_(head.weight)
    nn.init.zeros_(head.bias)
    opt = torch.optim.SGD(head.parameters(), lr=config.learning_rate)
    best_score, best_epoch, best_state, history = -np.inf, -1, None, []
    for epoch in range(config.epochs):
        out = head(xt).squeeze(-1)  # full batch
        loss = F.mse_loss(out, yt) if regression else F.binary_cross_entropy_with_logits(out, yt)
        opt.zero_grad()
        loss.backward()
        opt.step()
        with torch.no_grad():
            pred = head(torch.from_numpy(xv)).squeeze(-1).numpy() * y_std + y_mean
        score = _score(pred, val_y, regression)
        history.append(score)
        if score > best_score:
            best_score, best_epoch, best_state = score, epoch, copy.deepcopy(head.state_dict())
    head.load_state_dict(best_state)
    return ProbeResult(head, mean, std, best_epoch, float(best_score), history, regression, float(y_mean), float(y_std))


class FineTuneClassifier(nn.Module):
    def __init__(self, encoder: SiameseMAE, feature: str = "cls"):
        super().__init__()
        self.encoder = encoder
        self.feature = feature
        self.head = nn.Linear(encoder.config.embed_dim, 1)

    def forward(self, x):
        return self.head(_pool(self.encoder.encode(x), self.feature)).squeeze(-1)


def fine_tune(model: SiameseMAE, train_images, train_y, val_images, val_y, config: ProbeConfig, regression=False):
    """End-to-end training of encoder plus linear head; returns (classifier, best_epoch, best_val_score)."""
    if not regression:
        _require_two_classes(np.asarray(train_y), "train")
        _require_two_classes(np.asarray(val_y), "val")
    torch.manual_seed(config.seed)
    dtype = next(model.parameters()).dtype
    clf = FineTuneClassifier(copy.deepcopy(model), config.feature).to(dtype)
    xt, xv = images_to_tensor(train_images, dtype), images_to_tensor(val_images, dtype)
    yt = torch.as_tensor(np.asarray(train_y), dtype=dtype)
    val_y = np.asarray(val_y, dtype=np.float64)
    opt = torch.optim.AdamW(clf.parameters(), lr=config.learning_rate, weight_decay=0.05)
    gen = torch.Generator().manual_seed(config.seed)
    best_score, best_epoch, best_state = -np.inf, -1, None
    for epoch in range(config.epochs):
        clf.train()
        perm = torch.randperm(len(xt), generator=gen)
        for i in range(0, len(xt), config.batch_size):
            idx = perm[i : i + config.batch_size]
            out = clf(xt[idx])
            loss = F.mse_loss(out, yt[idx]) if regression else F.binary_cross_entropy_with_logits(out, yt[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
        clf.eval()
        with torch.no_grad():
            pred = torch.cat([clf(xv[i : i + 32]) for i in range(0, len(xv), 32)]).double().numpy()
        score = _score(pred, val_y, regression)
        if score > best_score:
            best_score, best_epoch, best_state = score, epoch, copy.deepcopy(clf.state_dict())
    clf.load_state_dict(best_state)
    return clf, best_epoch, float(best_score)


def task_targets(task: str, label_rows) -> np.ndarray:
    if task == "disease":
        return np.array([r["disease"] for r in label_rows], dtype=np.float64)
    if task == "gender":
        return np.array([1.0 if r["gender"] is Gender.F else 0.0 for r in label_rows])
    if task == "age":
        return np.array([normalize_age(r["age_years"]) for r in label_rows])
    raise ValidationError(f"unknown task {task!r}; expected one of {TASKS}")


def split_metrics(pred, y, regression: bool) -> dict:
    if regression:
        err = np.asarray(pred) - np.asarray(y)
        return {"mae": float(np.mean(np.abs(err))), "rmse": float(np.sqrt(np.mean(err**2))), "n": int(len(y))}
    return {"auroc": auroc(pred, y), "auprc": auprc(pred, y), "n": int(len(y))}


def run_probe(checkpoint, manifest, labels, task: str, config: ProbeConfig, out_dir) -> dict:
    """Evaluate a checkpoint on one task and write ``metrics.json`` into ``out_dir``."""
    from .engine import model_from_checkpoint
    from .ingest import load_manifest
    from .synth import read_labels

    if task not in TASKS:
        raise ValidationError(f"unknown task {task!r}; expected one of {TASKS}")
    regression = task == "age"
    model = model_from_checkpoint(checkpoint)
    rows = read_labels(labels)
    records = load_manifest(manifest, with_masks=False, patient_ids=set(rows))
    data = {}
    for split in ("train", "val", "test"):
        imgs, lab = [], []
        for rec in records:
            if rows[rec.patient_id]["split"] == split:
                imgs.extend(rec.images)
                lab.extend([rows[rec.patient_id]] * len(rec.images))
        data[split] = (imgs, task_targets(task, lab))

    if config.mode is ProbeMode.LINEAR_PROBE:
        feats = {s: extract_features(model, data[s][0], config.feature) for s in data}
        result = train_probe(feats["train"], data["train"][1], feats["val"], data["val"][1], config, regression)
        preds = {s: result.predict(feats[s]) for s in data}
        best_epoch = result.best_epoch
    else:
        clf, best_epoch, _ = fine_tune(
            model, data["train"][0], data["train"][1], data["val"][0], data["val"][1], config, regression
        )
        with torch.no_grad():
            preds = {s: clf(images_to_tensor(data[s][0], next(clf.parameters()).dtype)).double().numpy() for s in data}
    metrics = {
        "task": task,
        "mode": config.mode.value,
        "best_epoch": best_epoch,
        "splits": {s: split_metrics(preds[s], data[s][1], regression) for s in data if len(data[s][1])},
    }
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "metrics.json").write_text(json.dumps(metrics, indent=2))
    return metrics


# ---------------------------------------------------------------------- attention
def mass_inside(heatmap: np.ndarray, region_mask: np.ndarray) -> float:
    """Fraction of patch attention mass lying inside a pixel region, weighted by patch coverage."""
    g = heatmap.shape[0]
    p = region_mask.shape[0] // g
    coverage = region_mask.astype(np.float64).reshape(g, p, g, p).mean(axis=(1, 3))
    total = heatmap.sum()
    return float((heatmap * coverage).sum() / total) if total > 0 else 0.0


def _colormap(values: np.ndarray) -> np.ndarray:
    from matplotlib import colormaps

    return colormaps["jet"](values)[..., :3]


@torch.no_grad()
def export_attention(model, image, tokens=("CLS", "AGE", "GENDER"), layer: int = -1, out_dir=".", alpha: float = 0.5) -> dict:
    """Write raw G x G attention arrays and bilinear-upsampled overlays per token.

    Returns token -> {"array": path, "overlay": path, "mass": patch-restricted attention mass}.
    """
    if not isinstance(model, SiameseMAE):
        from .engine import model_from_checkpoint

        model = model_from_checkpoint(model)
    model.eval()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    x = images_to_tensor([image], next(model.parameters()).dtype)
    base = x[0].permute(1, 2, 0).double().numpy()
    size = model.config.image_size
    written = {}
    for token in tokens:
        heat, _ = model.attention_maps(x, token=token, layer=layer)
        raw = heat[0].double().numpy()
        arr_path = out / f"attn_{token.lower()}_layer{layer}.npy"
        np.save(arr_path, raw)
        up = F.interpolate(heat[:1, None].double(), size=(size, size), mode="bilinear", align_corners=False)[0, 0].numpy()
        span = up.max() - up.min()
        norm = (up - up.min()) / span if span > 0 else np.zeros_like(up)
        overlay = (1 - alpha) * base + alpha * _colormap(norm)
        png_path = out / f"attn_{token.lower()}_layer{layer}.png"
        Image.fromarray(np.round(np.clip(overlay, 0, 1) * 255).astype(np.uint8)).save(png_path)
        written[token] = {"array": arr_path, "overlay": png_path, "mass": float(raw.sum())}
    return written
