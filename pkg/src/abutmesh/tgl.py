"""Fine-tuning stage: tooth-position prompts, pluggable text encoding,
text-mesh fusion and the three-parameter regression heads.

The text encoder is pluggable: a deterministic hash-seeded stub (unit vector
per prompt, no pretrained weights needed) or an offline embedding-table file
holding externally computed vectors (e.g. real CLIP text embeddings).
"""

from __future__ import annotations

import csv
import hashlib
import json
import os
from dataclasses import dataclass, field, asdict

import numpy as np
import torch
from torch import nn

from .datagen import VALID_FDI, jaw_of_fdi
from .mae import MaeConfig, MaeModel, rotate_sample_z
from .nn_core import (LrSchedule, adamw_step, init_weights, lr_at, make_adamw,
                      mlp, save_module, set_lr)

PROMPT_TEMPLATE = "This is a medical image of the missing {jaw} {fdi}-th tooth"


@dataclass
class ToothDescriptor:
    jaw: str  # "top" | "bottom"
    fdi_index: int

    def __post_init__(self):
        if self.fdi_index not in VALID_FDI:
            raise ValueError(f"invalid FDI code {self.fdi_index}")
        if self.jaw not in ("top", "bottom"):
            raise ValueError(f"jaw must be 'top' or 'bottom', got {self.jaw!r}")
        if jaw_of_fdi(self.fdi_index) != self.jaw:
            raise ValueError(
                f"FDI {self.fdi_index} is a {jaw_of_fdi(self.fdi_index)} tooth, "
                f"not {self.jaw}")


def build_prompt(desc: ToothDescriptor) -> str:
    return PROMPT_TEMPLATE.format(jaw=desc.jaw, fdi=desc.fdi_index)


@dataclass
class TextEmbedding:
    vector: np.ndarray
    source: str  # "stub" | "table"


class StubTextEncoder:
    """Deterministic pseudo-random unit vector seeded by a stable hash of the
    prompt string."""

    def __init__(self, width: int = 512):
        self.width = width

    def encode(self, prompt: str) -> TextEmbedding:
        seed = int.from_bytes(hashlib.sha256(prompt.encode()).digest()[:8],
                              "little")
        rng = np.random.default_rng(seed)
        v = rng.standard_normal(self.width)
        v /= np.linalg.norm(v)
        return TextEmbedding(vector=v.astype(np.float32), source="stub")


class TableTextEncoder:
    """Exact lookup in an offline embedding-table JSON file:
    {"W": int, "entries": {prompt: [floats]}}."""

    def __init__(self, path):
        with open(path) as fh:
            table = json.load(fh)
        self.width = int(table["W"])
        self.entries = {k: np.asarray(v, dtype=np.float32)
                        for k, v in table["entries"].items()}
        for k, v in self.entries.items():
            if v.shape != (self.width,):
                raise ValueError(f"entry {k!r} has width {v.shape}, expected {self.width}")

    def encode(self, prompt: str) -> TextEmbedding:
        if prompt not in self.entries:
            raise KeyError(f"prompt not in embedding table: {prompt!r}")
        return TextEmbedding(vector=self.entries[prompt], source="table")


def save_embedding_table(path, width: int, entries: dict) -> None:
    with open(path, "w") as fh:
        json.dump({"W": width,
                   "entries": {k: np.asarray(v).tolist() for k, v in entries.items()}},
                  fh)


def pool_mesh(encoder_tokens: torch.Tensor) -> torch.Tensor:
    """Element-wise max over the patch dimension; (..., m, D) -> (..., 1, D)."""
    return encoder_tokens.max(dim=-2, keepdim=True).values


class TglFusion(nn.Module):
    """concat(F_t, F_m) -> FFN1 -> (+ F_t residual) -> FFN2."""

    def __init__(self, text_width: int, mesh_width: int, fused_width: int,
                 hidden: int = 256):
        super().__init__()
        self.ffn1 = mlp(text_width + mesh_width, hidden, text_width)
        self.ffn2 = mlp(text_width, hidden, fused_width)

    def forward(self, f_t: torch.Tensor, f_m: torch.Tensor) -> torch.Tensor:
        f_f = self.ffn1(torch.cat([f_t, f_m], dim=-1))
        return self.ffn2(f_f + f_t)


class AbutmentRegressor(nn.Module):
    """Pretrained patch encoder + optional TGL fusion + two FC layers +
    three independent scalar heads (transgingival, diameter, height)."""

    PARAM_NAMES = ("transgingival", "diameter", "height")

    def __init__(self, mae_cfg: MaeConfig, text_width: int = 512,
                 fused_width: int = 256, fc_widths: tuple = (256, 128),
                 use_tgl: bool = True):
        super().__init__()
        self.backbone = MaeModel(mae_cfg)
        self.use_tgl = use_tgl
        self.text_width = text_width
        d = mae_cfg.d_model
        # standardizes the max-pooled summary; raw pooled activations are
        # poorly scaled for the FC stack
        self.pool_norm = nn.LayerNorm(d)
        self.tgl = TglFusion(text_width, d, fused_width) if use_tgl else None
        in_dim = fused_width if use_tgl else d
        self.fc1 = nn.Linear(in_dim, fc_widths[0])
        self.fc2 = nn.Linear(fc_widths[0], fc_widths[1])
        self.act = nn.GELU()
        self.heads = nn.ModuleList(nn.Linear(fc_widths[1], 1) for _ in range(3))
        if self.tgl is not None:
            init_weights(self.tgl)
        init_weights(self.fc1)
        init_weights(self.fc2)
        for h in self.heads:
            init_weights(h)

    def encode_mesh(self, features: torch.Tensor,
                    positions: torch.Tensor) -> torch.Tensor:
        """All patches visible (no fine-tune masking); (..., m, d) tokens."""
        emb = self.backbone.embed_patches(features, positions)
        return self.backbone.encode(emb, positions, plan=None)

    def forward(self, features: torch.Tensor, positions: torch.Tensor,
                text: torch.Tensor | None) -> torch.Tensor:
        """Returns (..., 3) raw predictions in mm (unclamped)."""
        tokens = self.encode_mesh(features, positions)
        f_m = self.pool_norm(pool_mesh(tokens))
        if self.use_tgl:
            if text is None:
                raise ValueError("TGL is enabled but no text embedding was given")
            fused = self.tgl(text, f_m)
        else:
            fused = f_m
        h = self.act(self.fc2(self.act(self.fc1(fused))))
        out = torch.cat([head(h) for head in self.heads], dim=-1)
        return out.squeeze(-2)

    def load_pretrained(self, mae_model: MaeModel) -> None:
        self.backbone.load_state_dict(mae_model.state_dict())


@dataclass
class AbutmentPrediction:
    transgingival: float
    diameter: float
    height: float

    def clamped(self) -> "AbutmentPrediction":
        return AbutmentPrediction(*(max(0.0, v) for v in
                                    (self.transgingival, self.diameter, self.height)))

    def as_array(self) -> np.ndarray:
        return np.array([self.transgingival, self.diameter, self.height])


def smooth_l1(z, h: float = 1.0):
    """0.5 z^2 for |z| <= h, h |z| - 0.5 h^2 beyond; works on torch or numpy."""
    if h <= 0:
        raise ValueError(f"smoothing threshold must be > 0, got {h}")
    if isinstance(z, torch.Tensor):
        az = z.abs()
        return torch.where(az <= h, 0.5 * z * z, h * az - 0.5 * h * h)
    az = np.abs(z)
    return np.where(az <= h, 0.5 * z * z, h * az - 0.5 * h * h)


def finetune_loss(pred: torch.Tensor, target: torch.Tensor,
                  huber_h: float = 1.0) -> torch.Tensor:
    """Mean MSE + mean smooth-L1 over parameters and batch."""
    z = pred - target
    return (z * z).mean() + smooth_l1(z, huber_h).mean()


@dataclass
class FinetuneConfig:
    epochs: int = 100
    batch_size: int = 64
    base_lr: float = 1e-4
    milestones: tuple = (30, 60)
    gamma: float = 0.1
    weight_decay: float = 0.0
    huber_h: float = 1.0
    augment_rotate: float = 0.0  # max |angle| (rad) of random z-rotation
    warmup_epochs: int = 0  # linear lr warmup before the step schedule
    grad_clip: float = 0.0  # max gradient norm; 0 disables clipping
    adam_beta2: float = 0.999
    freeze_encoder: bool = False
    seed: int = 0


def text_for_sample(sample, encoder) -> torch.Tensor:
    desc = ToothDescriptor(jaw=sample.jaw, fdi_index=sample.fdi)
    emb = encoder.encode(build_prompt(desc))
    return torch.from_numpy(np.asarray(emb.vector, dtype=np.float32))[None, :]


def finetune_step(model: AbutmentRegressor, batch: list, optimizer,
                  text_encoder, huber_h: float = 1.0,
                  grad_clip: float = 0.0) -> dict:
    """One AdamW step over a batch of labeled MeshSamples."""
    loss_acc = None
    for sample in batch:
        if sample.labels is None:
            raise ValueError(f"sample {sample.sample_id} has no labels")
        feats = torch.from_numpy(sample.features)
        pos = torch.from_numpy(sample.positions)
        text = text_for_sample(sample, text_encoder) if model.use_tgl else None
        pred = model(feats, pos, text)
        target = torch.tensor([sample.labels["transgingival"],
                               sample.labels["diameter"],
                               sample.labels["height"]], dtype=pred.dtype)
        loss = finetune_loss(pred, target, huber_h)
        loss_acc = loss if loss_acc is None else loss_acc + loss
    loss_acc = loss_acc / len(batch)
    if not torch.isfinite(loss_acc):
        raise FloatingPointError(f"non-finite fine-tune loss {float(loss_acc)}")
    loss_acc.backward()
    if grad_clip:
        nn.utils.clip_grad_norm_(model.parameters(), grad_clip)
    adamw_step(model, optimizer)
    return {"L_total": float(loss_acc.detach())}


def finetune(model: AbutmentRegressor, samples: list, cfg: FinetuneConfig,
             run_dir, text_encoder) -> list:
    """Fine-tuning loop with the step-decay schedule; writes config snapshot,
    CSV loss log and checkpoints into run_dir."""
    os.makedirs(run_dir, exist_ok=True)
    snapshot = {"stage": "finetune", **asdict(cfg),
                "use_tgl": model.use_tgl, "text_width": model.text_width}
    snapshot["milestones"] = list(cfg.milestones)
    with open(os.path.join(run_dir, "config.json"), "w") as fh:
        json.dump(snapshot, fh, indent=2)
    schedule = LrSchedule(kind="step", base_lr=cfg.base_lr,
                          total_epochs=cfg.epochs,
                          milestones=list(cfg.milestones), gamma=cfg.gamma)
    if cfg.freeze_encoder:
        for p in model.backbone.parameters():
            p.requires_grad_(False)
    # start each head at the training-set label mean so early gradients carry
    # per-parameter structure instead of one shared absolute offset
    with torch.no_grad():
        for head, name in zip(model.heads, model.PARAM_NAMES):
            head.bias.fill_(float(np.mean([s.labels[name] for s in samples])))
    optimizer = make_adamw(model, lr=cfg.base_lr, weight_decay=cfg.weight_decay,
                           beta2=cfg.adam_beta2)
    rng = np.random.default_rng(cfg.seed)
    records = []
    with open(os.path.join(run_dir, "loss_log.csv"), "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "L_total", "lr"])
        for epoch in range(cfg.epochs):
            if epoch < cfg.warmup_epochs:
                lr = cfg.base_lr * (epoch + 1) / cfg.warmup_epochs
            else:
                lr = lr_at(schedule, epoch)
            set_lr(optimizer, lr)
            order = rng.permutation(len(samples))
            total, n_batches = 0.0, 0
            for lo in range(0, len(samples), cfg.batch_size):
                batch = [samples[i] for i in order[lo:lo + cfg.batch_size]]
                if cfg.augment_rotate:
                    batch = [rotate_sample_z(
                        s, rng.uniform(-cfg.augment_rotate, cfg.augment_rotate))
                        for s in batch]
                rec = finetune_step(model, batch, optimizer, text_encoder,
                                    huber_h=cfg.huber_h,
                                    grad_clip=cfg.grad_clip)
                total += rec["L_total"]
                n_batches += 1
            rec = {"L_total": total / n_batches, "lr": lr}
            records.append(rec)
            writer.writerow([epoch, repr(rec["L_total"]), repr(lr)])
    save_module(os.path.join(run_dir, "checkpoint_final.ckpt"), model)
    return records


def predict(model: AbutmentRegressor, sample, text_encoder) -> AbutmentPrediction:
    with torch.no_grad():
        feats = torch.from_numpy(sample.features)
        pos = torch.from_numpy(sample.positions)
        text = text_for_sample(sample, text_encoder) if model.use_tgl else None
        out = model(feats, pos, text)
    return AbutmentPrediction(*(float(v) for v in out.reshape(-1)))
