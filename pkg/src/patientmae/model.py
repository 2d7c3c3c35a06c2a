"""Siamese ViT encoder with learnable metadata tokens and a cross-attention decoder."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import NamedTuple, Optional, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .core_types import AGE_NORM_MAX, ValidationError

ENCODER_PRESETS = {
    # name: (dim, heads, depth)
    "TINY": (128, 4, 4),
    "VIT_S": (384, 6, 12),
    "VIT_B": (768, 12, 12),
}
DECODER_PRESETS = {
    "TINY": (128, 4, 2),
    "VIT_S": (384, 6, 8),
}
TOKEN_SLOTS = {"CLS": 0, "AGE": 1, "GENDER": 2}
# default encoder input normalisation (ImageNet); pretraining replaces it with data statistics
PIXEL_MEAN = (0.485, 0.456, 0.406)
PIXEL_STD = (0.229, 0.224, 0.225)


@dataclass(frozen=True)
class ModelConfig:
    image_size: int = 224
    patch_size: int = 16
    encoder: str = "TINY"
    decoder: str = "TINY"
    meta_token_count: int = 2
    mlp_ratio: float = 4.0
    pixel_mean: tuple = PIXEL_MEAN  # per-channel, applied before the patch embedding only
    pixel_std: tuple = PIXEL_STD

    def __post_init__(self):
        for name in ("pixel_mean", "pixel_std"):
            value = tuple(float(v) for v in getattr(self, name))
            if len(value) != 3:
                raise ValidationError(f"{name} needs one value per RGB channel")
            object.__setattr__(self, name, value)
        if min(self.pixel_std) <= 0:
            raise ValidationError("pixel_std must be positive")
        if self.encoder not in ENCODER_PRESETS:
            raise ValidationError(f"unknown encoder preset {self.encoder!r}")
        if self.decoder not in DECODER_PRESETS:
            raise ValidationError(f"unknown decoder preset {self.decoder!r}")
        if self.image_size % self.patch_size:
            raise ValidationError("image_size must be divisible by patch_size")
        if self.meta_token_count not in (0, 2):
            raise ValidationError("meta_token_count must be 2 (age, gender) or 0 (disabled)")
        for dim, heads, _ in (ENCODER_PRESETS[self.encoder], DECODER_PRESETS[self.decoder]):
            if dim % heads:
                raise ValidationError(f"dim {dim} not divisible by {heads} heads")

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def num_patches(self) -> int:
        return self.grid**2

    @property
    def patch_dim(self) -> int:
        return self.patch_size**2 * 3

    @property
    def num_special(self) -> int:
        return 1 + self.meta_token_count

    @property
    def embed_dim(self) -> int:
        return ENCODER_PRESETS[self.encoder][0]

    def to_dict(self) -> dict:
        return asdict(self)


def patchify(images: torch.Tensor, patch_size: int = 16) -> torch.Tensor:
    """(B, 3, H, W) -> (B, L, p*p*3); patches row-major, pixels ordered (row, col, channel)."""
    b, c, h, w = images.shape
    if h % patch_size or w % patch_size:
        raise ValidationError(f"image {h}x{w} not divisible by patch size {patch_size}")
    gh, gw = h // patch_size, w // patch_size
    x = images.reshape(b, c, gh, patch_size, gw, patch_size)
    x = torch.einsum("bchpwq->bhwpqc", x)
    return x.reshape(b, gh * gw, patch_size * patch_size * c)


def unpatchify(patches: torch.Tensor, patch_size: int = 16, channels: int = 3) -> torch.Tensor:
    b, n, d = patches.shape
    g = int(round(math.sqrt(n)))
    if g * g != n or d != patch_size * patch_size * channels:
        raise ValidationError(f"cannot unpatchify tensor of shape {tuple(patches.shape)}")
    x = patches.reshape(b, g, g, patch_size, patch_size, channels)
    x = torch.einsum("bhwpqc->bchpwq", x)
    return x.reshape(b, channels, g * patch_size, g * patch_size)


def sincos_pos_embed_2d(dim: int, grid: int) -> np.ndarray:
    """Fixed 2-D sine-cosine positional table of shape (grid*grid, dim)."""
    assert dim % 4 == 0
    gy, gx = np.meshgrid(np.arange(grid, dtype=np.float64), np.arange(grid, dtype=np.float64), indexing="ij")
    omega = 1.0 / 10000 ** (np.arange(dim // 4, dtype=np.float64) / (dim / 4.0))

    def emb(pos):
        out = np.einsum("m,d->md", pos.reshape(-1), omega)
        return np.concatenate([np.sin(out), np.cos(out)], axis=1)

    return np.concatenate([emb(gy), emb(gx)], axis=1)


class Attention(nn.Module):
    def __init__(self, dim: int, heads: int, cross: bool = False):
        super().__init__()
        self.heads = heads
        self.scale = (dim // heads) ** -0.5
        self.cross = cross
        if cross:
            self.q = nn.Linear(dim, dim)
            self.kv = nn.Linear(dim, 2 * dim)
        else:
            self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x, context=None, key_valid=None, return_attn=False):
        b, n, d = x.shape
        h = self.heads
        if self.cross:
            q = self.q(x)
            k, v = self.kv(context).chunk(2, dim=-1)
        else:
            q, k, v = self.qkv(x).chunk(3, dim=-1)
        q, k, v = (t.reshape(b, t.shape[1], h, d // h).transpose(1, 2) for t in (q, k, v))
        logits = (q @ k.transpose(-2, -1)) * self.scale
        if key_valid is not None:
            logits = logits.masked_fill(~key_valid[:, None, None, :], float("-inf"))
        attn = logits.softmax(dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(b, n, d)
        out = self.proj(out)
        return (out, attn) if return_attn else (out, None)


class Mlp(nn.Module):
    def __init__(self, dim: int, ratio: float):
        super().__init__()
        hidden = int(dim * ratio)
        self.fc1 = nn.Linear(dim, hidden)
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, x):
        return self.fc2(F.gelu(self.fc1(x)))


class Block(nn.Module):
    def __init__(self, dim, heads, mlp_ratio):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = Attention(dim, heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = Mlp(dim, mlp_ratio)

    def forward(self, x, key_valid=None, return_attn=False):
        y, attn = self.attn(self.norm1(x), key_valid=key_valid, return_attn=return_attn)
        x = x + y
        x = x + self.mlp(self.norm2(x))
        return x, attn


class CrossBlock(nn.Module):
    """Self-attention, then cross-attention into the other view, then MLP."""

    def __init__(self, dim, heads, mlp_ratio):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.self_attn = Attention(dim, heads)
        self.norm2 = nn.LayerNorm(dim)
        self.norm_ctx = nn.LayerNorm(dim)
        self.cross_attn = Attention(dim, heads, cross=True)
        self.norm3 = nn.LayerNorm(dim)
        self.mlp = Mlp(dim, mlp_ratio)

    def forward(self, x, context):
        x = x + self.self_attn(self.norm1(x))[0]
        x = x + self.cross_attn(self.norm2(x), context=self.norm_ctx(context))[0]
        x = x + self.mlp(self.norm3(x))
        return x


class EncoderOutput(NamedTuple):
    cls: torch.Tensor  # (B, D)
    meta: Optional[torch.Tensor]  # (B, M, D) or None
    patches: torch.Tensor  # (B, K, D)
    patch_index: torch.Tensor  # (B, K) grid slot of each patch token
    patch_valid: torch.Tensor  # (B, K) False for padding

    @property
    def age(self):
        return None if self.meta is None else self.meta[:, 0]

    @property
    def gender(self):
        return None if self.meta is None else self.meta[:, 1]


def pack_visible(index_lists: Sequence[np.ndarray]):
    """Pad per-image visible index arrays into (B, K) index and validity tensors."""
    k = max(len(ix) for ix in index_lists)
    idx = torch.zeros(len(index_lists), k, dtype=torch.long)
    valid = torch.zeros(len(index_lists), k, dtype=torch.bool)
    for i, ix in enumerate(index_lists):
        idx[i, : len(ix)] = torch.as_tensor(np.asarray(ix), dtype=torch.long)
        valid[i, : len(ix)] = True
    return idx, valid


class SiameseMAE(nn.Module):
    def __init__(self, config: ModelConfig = ModelConfig()):
        super().__init__()
        self.config = config
        dim, heads, depth = ENCODER_PRESETS[config.encoder]
        ddim, dheads, ddepth = DECODER_PRESETS[config.decoder]
        m = config.meta_token_count

        self.patch_embed = nn.Linear(config.patch_dim, dim)
        # patch vectors are (row, col, channel) flattened, so channel varies fastest
        reps = config.patch_size**2
        self.register_buffer("pixel_mean", torch.tensor(config.pixel_mean).repeat(reps), persistent=False)
        self.register_buffer("pixel_std", torch.tensor(config.pixel_std).repeat(reps), persistent=False)
        self.register_buffer(
            "pos_embed", torch.from_numpy(sincos_pos_embed_2d(dim, config.grid)).float()[None], persistent=False
        )
        self.cls_token = nn.Parameter(torch.zeros(1, 1, dim))
        if m:
            self.m_age = nn.Parameter(torch.zeros(1, 1, dim))
            self.m_gender = nn.Parameter(torch.zeros(1, 1, dim))
        else:
            self.m_age = self.m_gender = None
        self.slot_embed = nn.Parameter(torch.zeros(1, 1 + m, dim))
        self.blocks = nn.ModuleList([Block(dim, heads, config.mlp_ratio) for _ in range(depth)])
        self.norm = nn.LayerNorm(dim)

        self.decoder_embed = nn.Linear(dim, ddim)
        self.mask_token = nn.Parameter(torch.zeros(1, 1, ddim))
        self.register_buffer(
            "decoder_pos_embed",
            torch.from_numpy(sincos_pos_embed_2d(ddim, config.grid)).float()[None],
            persistent=False,
        )
        self.decoder_blocks = nn.ModuleList([CrossBlock(ddim, dheads, config.mlp_ratio) for _ in range(ddepth)])
        self.decoder_norm = nn.LayerNorm(ddim)
        self.recon_head = nn.Linear(ddim, config.patch_dim)

        if m:
            self.age_head = nn.Linear(dim, 1)
            self.gender_head = nn.Linear(dim, 2)
        else:
            self.age_head = self.gender_head = None
        self._init_weights()

    def _init_weights(self):
        for p in (self.cls_token, self.m_age, self.m_gender, self.mask_token, self.slot_embed):
            if p is not None:
                nn.init.trunc_normal_(p, std=0.02)
        for mod in self.modules():
            if isinstance(mod, nn.Linear):
                nn.init.xavier_uniform_(mod.weight)
                nn.init.zeros_(mod.bias)
            elif isinstance(mod, nn.LayerNorm):
                nn.init.ones_(mod.weight)
                nn.init.zeros_(mod.bias)

    @property
    def has_meta(self) -> bool:
        return self.m_age is not None

    # ---------------------------------------------------------------- encoder
    def _special_tokens(self, b):
        tokens = self.cls_token
        if self.has_meta:
            tokens = torch.cat([tokens, self.m_age, self.m_gender], dim=1)
        return (tokens + self.slot_embed).expand(b, -1, -1)

    def encode(self, images, visible_idx=None, visible_valid=None, attn_layer=None):
        """Encode views; ``visible_idx`` (B, K) restricts the input to those patches.

        Returns an EncoderOutput, plus the head-averaged attention of
        ``attn_layer`` when requested.
        """
        cfg = self.config
        b = images.shape[0]
        patches = patchify(images, cfg.patch_size)
        if visible_idx is None:
            visible_idx = torch.arange(cfg.num_patches).expand(b, -1)
            patches_in = patches
        else:
            if visible_idx.max() >= cfg.num_patches or visible_idx.min() < 0:
                raise ValidationError("visible patch index outside the patch grid")
            patches_in = torch.gather(patches, 1, visible_idx[..., None].expand(-1, -1, patches.shape[-1]))
        if visible_valid is None:
            visible_valid = torch.ones(visible_idx.shape, dtype=torch.bool)
        pos = self.pos_embed.to(patches_in.dtype).expand(b, -1, -1)
        pos = torch.gather(pos, 1, visible_idx[..., None].expand(-1, -1, pos.shape[-1]))
        patches_in = (patches_in - self.pixel_mean.to(patches_in.dtype)) / self.pixel_std.to(patches_in.dtype)
        x = self.patch_embed(patches_in) + pos

        s = cfg.num_special
        seq = torch.cat([self._special_tokens(b), x], dim=1)
        key_valid = None
        if not bool(visible_valid.all()):
            key_valid = torch.cat([torch.ones(b, s, dtype=torch.bool), visible_valid], dim=1)

        if attn_layer is not None and not (0 <= attn_layer < len(self.blocks)):
            raise ValidationError(f"layer {attn_layer} outside [0, {len(self.blocks) - 1}]")
        attn_out = None
        for i, blk in enumerate(self.blocks):
            seq, attn = blk(seq, key_valid=key_valid, return_attn=(i == attn_layer))
            if attn is not None:
                attn_out = attn.mean(dim=1)
        seq = self.norm(seq)
        out = EncoderOutput(
            cls=seq[:, 0],
            meta=seq[:, 1:s] if s > 1 else None,
            patches=seq[:, s:],
            patch_index=visible_idx,
            patch_valid=visible_valid,
        )
        return (out, attn_out) if attn_layer is not None else out

    # ---------------------------------------------------------------- decoder
    def decode_cross(self, masked_out: EncoderOutput, visible_out: EncoderOutput):
        """Predict pixels for every patch of the masked view, attending to the visible view."""
        cfg = self.config
        b, k = masked_out.patch_index.shape
        y = self.decoder_embed(masked_out.patches)
        y = torch.cat([y, self.mask_token.to(y.dtype).expand(b, 1, -1)], dim=1)
        restore = torch.full((b, cfg.num_patches), k, dtype=torch.long)
        rows = torch.arange(b)[:, None].expand(-1, k)
        restore[rows[masked_out.patch_valid], masked_out.patch_index[masked_out.patch_valid]] = (
            torch.arange(k).expand(b, -1)[masked_out.patch_valid]
        )
        x = torch.gather(y, 1, restore[..., None].expand(-1, -1, y.shape[-1]))
        pos = self.decoder_pos_embed.to(x.dtype)
        x = x + pos

        ctx = self.decoder_embed(visible_out.patches)
        ctx_pos = torch.gather(
            pos.expand(b, -1, -1), 1, visible_out.patch_index[..., None].expand(-1, -1, pos.shape[-1])
        )
        ctx = ctx + ctx_pos
        for blk in self.decoder_blocks:
            x = blk(x, ctx)
        return self.recon_head(self.decoder_norm(x))

    # ---------------------------------------------------------------- meta heads
    def predict_meta(self, out: EncoderOutput):
        """(normalized age prediction (B,), gender logits (B, 2))."""
        if not self.has_meta:
            raise ValidationError("model was built without metadata tokens")
        age = AGE_NORM_MAX * torch.sigmoid(self.age_head(out.age)).squeeze(-1)
        return age, self.gender_head(out.gender)

    # ---------------------------------------------------------------- inspection
    def attention_maps(self, images, token: str = "CLS", layer: int = -1):
        """(B, G, G) head-averaged attention of ``token`` over patch positions.

        Also returns the full pre-restriction attention rows (B, N).
        """
        token = token.upper()
        if token not in TOKEN_SLOTS or TOKEN_SLOTS[token] >= self.config.num_special:
            raise ValidationError(f"token {token!r} not present in this model")
        depth = len(self.blocks)
        if layer < 0:
            layer += depth
        _, attn = self.encode(images, attn_layer=layer)
        row = attn[:, TOKEN_SLOTS[token]]
        g = self.config.grid
        return row[:, self.config.num_special :].reshape(-1, g, g), row

    def parameter_groups(self) -> dict:
        """Named groups of trainable parameters for logging and gradient checks."""
        groups = {
            "patch_embed": list(self.patch_embed.parameters()),
            "cls_token": [self.cls_token],
            "slot_embed": [self.slot_embed],
            "encoder_blocks": list(self.blocks.parameters()) + list(self.norm.parameters()),
            "decoder_embed": list(self.decoder_embed.parameters()),
            "mask_token": [self.mask_token],
            "decoder_blocks": list(self.decoder_blocks.parameters()) + list(self.decoder_norm.parameters()),
            "recon_head": list(self.recon_head.parameters()),
        }
        if self.has_meta:
            groups["m_age"] = [self.m_age]
            groups["m_gender"] = [self.m_gender]
            groups["age_head"] = list(self.age_head.parameters())
            groups["gender_head"] = list(self.gender_head.parameters())
        return groups


def build_model(config: ModelConfig = ModelConfig(), seed: int = 0, dtype=torch.float32) -> SiameseMAE:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        model = SiameseMAE(config)
    return model.to(dtype)


def load_encoder_weights(model: SiameseMAE, state_dict: dict, strict: bool = False):
    """Initialise encoder parameters from an external checkpoint (e.g. ImageNet weights).

    Keys not belonging to the encoder are ignored; returns the list of loaded keys.
    """
    prefixes = ("patch_embed.", "blocks.", "norm.", "cls_token")
    own = model.state_dict()
    loaded = []
    for key, value in state_dict.items():
        if key.startswith(prefixes) and key in own and own[key].shape == value.shape:
            own[key] = value
            loaded.append(key)
        elif strict and key.startswith(prefixes):
            raise ValidationError(f"checkpoint tensor {key} does not fit the encoder")
    model.load_state_dict(own)
    return loaded
