"""Masked-autoencoder pretraining for patched oral-scan meshes.

Patch feature blocks are embedded with an MLP, summed with positional
embeddings of the patch centers, masked at ratio r, encoded by a transformer,
and decoded (with a single shared learnable mask token) into per-patch vertex
coordinates and face features. Loss = chamfer(vertices) + phi * MSE(features).
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
import os
from dataclasses import dataclass, field, asdict

import numpy as np
import torch
from torch import nn

from .features import BLOCK_DIM, FEATURE_DIM, face_features_13d
from .mesh_core import MeshError, TriMesh, save_mesh
from .nn_core import (LrSchedule, TransformerBlock, adamw_step, init_weights,
                      lr_at, make_adamw, mlp, save_module, set_lr)
from .remesh.subdivide import PATCH_FACES, PATCH_VERTICES


@dataclass
class MaeConfig:
    d_model: int = 128
    n_heads: int = 4
    encoder_blocks: int = 12
    decoder_blocks: int = 6
    mask_ratio: float = 0.5
    phi: float = 1.0  # face-feature loss weight
    epochs: int = 300
    batch_size: int = 128
    base_lr: float = 1e-4
    weight_decay: float = 0.0
    pos_every_block: bool = True  # re-add positional embeddings at each block
    chamfer_squared: bool = False
    warmup_epochs: int = 0  # linear lr warmup before the cosine schedule
    grad_clip: float = 0.0  # max gradient norm; 0 disables clipping
    adam_beta2: float = 0.999
    checkpoint_every: int = 50
    seed: int = 0

    def __post_init__(self):
        if not (0 <= self.mask_ratio < 1):
            raise ValueError(f"mask_ratio must be in [0, 1), got {self.mask_ratio}")
        if self.phi < 0:
            raise ValueError(f"phi must be >= 0, got {self.phi}")
        if self.warmup_epochs < 0 or self.grad_clip < 0:
            raise ValueError("warmup_epochs and grad_clip must be >= 0")


@dataclass
class MaskPlan:
    visible_ids: np.ndarray
    masked_ids: np.ndarray
    seed: int


def make_mask(m: int, r: float, seed: int) -> MaskPlan:
    """Uniform random masked subset of size round(r * m), deterministic per seed."""
    if not (0 <= r < 1):
        raise ValueError(f"mask ratio must be in [0, 1), got {r}")
    n_masked = int(round(r * m))
    rng = np.random.default_rng(seed)
    perm = rng.permutation(m)
    masked = np.sort(perm[:n_masked])
    visible = np.sort(perm[n_masked:])
    return MaskPlan(visible_ids=visible, masked_ids=masked, seed=seed)


@dataclass
class MeshSample:
    """Preprocessed training example: leaf geometry plus per-patch tensors."""

    leaf_vertices: np.ndarray  # (V, 3)
    leaf_faces: np.ndarray  # (64m, 3)
    patch_vertex_ids: np.ndarray  # (m, 45)
    features: np.ndarray  # (m, 832) float32
    positions: np.ndarray  # (m, 3) float32
    rel_vertices: np.ndarray  # (m, 45, 3) float32, relative to patch center
    face_feats: np.ndarray  # (m, 64, 13) float32
    sample_id: int = 0
    labels: dict | None = None
    jaw: str | None = None
    fdi: int | None = None

    @property
    def n_patches(self) -> int:
        return len(self.features)


def rotate_sample_z(sample: MeshSample, angle: float) -> MeshSample:
    """Rigidly rotate a preprocessed sample about the vertical axis.

    Acts analytically on the cached tensors: unit normals (cols 1:4) and
    patch-relative centers (cols 7:10) rotate, area/angles/normal-dot columns
    are invariant. Labels are unchanged by a rigid rotation.
    """
    c, s = np.cos(angle), np.sin(angle)
    rot = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]],
                   dtype=np.float32)
    ff = sample.face_feats.copy()
    ff[:, :, 1:4] = ff[:, :, 1:4] @ rot.T
    ff[:, :, 7:10] = ff[:, :, 7:10] @ rot.T
    return MeshSample(
        leaf_vertices=sample.leaf_vertices @ rot.T.astype(np.float64),
        leaf_faces=sample.leaf_faces,
        patch_vertex_ids=sample.patch_vertex_ids,
        features=ff.reshape(len(ff), BLOCK_DIM),
        positions=sample.positions @ rot.T,
        rel_vertices=sample.rel_vertices @ rot.T,
        face_feats=ff,
        sample_id=sample.sample_id,
        labels=sample.labels, jaw=sample.jaw, fdi=sample.fdi,
    )


def build_recon_tensors(leaf_mesh: TriMesh, patch_vertex_ids: np.ndarray):
    """(features, positions, rel_vertices, face_feats) for every patch."""
    feats, valid = face_features_13d(leaf_mesh)
    if not valid.all():
        bad = int(np.where(~valid)[0][0])
        raise MeshError(f"degenerate leaf face {bad} in reconstruction targets")
    m = len(patch_vertex_ids)
    per_patch = feats.reshape(m, PATCH_FACES, FEATURE_DIM).copy()
    positions = per_patch[:, :, 7:10].mean(axis=1)
    # patch-relative centers, mirroring assemble_patch_blocks: keeps the
    # feature-MSE targets at patch scale instead of absolute millimeters
    per_patch[:, :, 7:10] -= positions[:, None, :]
    rel = leaf_mesh.vertices[patch_vertex_ids] - positions[:, None, :]
    return (
        per_patch.reshape(m, BLOCK_DIM).astype(np.float32),
        positions.astype(np.float32),
        rel.astype(np.float32),
        per_patch.astype(np.float32),
    )


POS_FOURIER_BANDS = 10
POS_BASE_WAVELENGTH = 128.0  # mm; octaves reach sub-millimeter detail


class FourierFeatures(nn.Module):
    """sin/cos of the xyz coordinates at octave-spaced frequencies.

    A plain MLP of raw millimeter coordinates is too smooth to separate
    neighboring patch centers (spectral bias); lifting the coordinates to
    multi-frequency sin/cos features lets the positional pathway carry
    patch-scale detail.
    """

    def __init__(self, bands: int = POS_FOURIER_BANDS,
                 base_wavelength: float = POS_BASE_WAVELENGTH):
        super().__init__()
        freqs = (2.0 * math.pi / base_wavelength
                 * 2.0 ** torch.arange(bands, dtype=torch.float32))
        self.register_buffer("freqs", freqs)
        self.out_dim = 3 * 2 * bands

    def forward(self, p: torch.Tensor) -> torch.Tensor:
        ang = (p.unsqueeze(-1) * self.freqs).flatten(-2)
        return torch.cat([torch.sin(ang), torch.cos(ang)], dim=-1)


class MaeModel(nn.Module):
    def __init__(self, cfg: MaeConfig):
        super().__init__()
        self.cfg = cfg
        d = cfg.d_model
        self.patch_embed = mlp(BLOCK_DIM, d, d)
        fourier = FourierFeatures()
        # the positional pathway carries most of the mesh-specific detail the
        # decoder reconstructs from, so give it FFN-scale width
        self.pos_embed = nn.Sequential(fourier, mlp(fourier.out_dim, 4 * d, d))
        self.mask_token = nn.Parameter(torch.zeros(d))
        self.encoder = nn.ModuleList(
            TransformerBlock(d, cfg.n_heads) for _ in range(cfg.encoder_blocks))
        self.encoder_norm = nn.LayerNorm(d)
        self.decoder = nn.ModuleList(
            TransformerBlock(d, cfg.n_heads) for _ in range(cfg.decoder_blocks))
        self.decoder_norm = nn.LayerNorm(d)
        self.vertex_head = mlp(d, 4 * d, PATCH_VERTICES * 3)
        self.face_head = mlp(d, 4 * d, BLOCK_DIM)
        init_weights(self)
        nn.init.trunc_normal_(self.mask_token, std=0.02, a=-0.04, b=0.04)

    def embed_patches(self, features: torch.Tensor,
                      positions: torch.Tensor) -> torch.Tensor:
        """x_i = MLP_g(features_i) + MLP_p(position_i); shapes (..., m, *)."""
        return self.patch_embed(features) + self.pos_embed(positions)

    def _run_blocks(self, blocks, x, pos):
        if self.cfg.pos_every_block:
            for blk in blocks:
                x = blk(x + pos)
        else:
            for blk in blocks:
                x = blk(x)
        return x

    def encode(self, embeddings: torch.Tensor, positions: torch.Tensor,
               plan: MaskPlan | None = None) -> torch.Tensor:
        """Run the encoder over visible tokens only; (..., (1-r)m, d)."""
        if plan is None:
            visible = embeddings
            pos = self.pos_embed(positions)
        else:
            vis = torch.as_tensor(plan.visible_ids, dtype=torch.long)
            visible = embeddings[..., vis, :]
            pos = self.pos_embed(positions[..., vis, :])
        out = self._run_blocks(self.encoder, visible, pos)
        return self.encoder_norm(out)

    def decode_and_reconstruct(self, encoded: torch.Tensor, plan: MaskPlan,
                               positions: torch.Tensor):
        """Fill masked slots with the shared mask token, decode all tokens,
        and run both heads on the masked rows.

        Returns (pred_vertices (..., rm, 45, 3), pred_face_feats (..., rm, 64, 13)).
        """
        m = positions.shape[-2]
        vis = torch.as_tensor(plan.visible_ids, dtype=torch.long)
        msk = torch.as_tensor(plan.masked_ids, dtype=torch.long)
        lead = encoded.shape[:-2]
        tokens = self.mask_token.expand(*lead, m, self.cfg.d_model).clone()
        tokens[..., vis, :] = encoded
        pos = self.pos_embed(positions)
        out = self._run_blocks(self.decoder, tokens + pos, pos)
        out = self.decoder_norm(out)
        masked_rows = out[..., msk, :]
        pred_vertices = self.vertex_head(masked_rows).reshape(
            *lead, len(msk), PATCH_VERTICES, 3)
        pred_face_feats = self.face_head(masked_rows).reshape(
            *lead, len(msk), PATCH_FACES, FEATURE_DIM)
        return pred_vertices, pred_face_feats


def chamfer_l2(pred, target, squared: bool = False) -> float:
    """Symmetric chamfer distance between two point sets (N,3) and (M,3):
    mean nearest-neighbor distance in each direction, summed."""
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if len(pred) == 0 or len(target) == 0:
        raise ValueError("chamfer_l2 requires non-empty point sets")
    d2 = ((pred[:, None, :] - target[None, :, :]) ** 2).sum(axis=2)
    if squared:
        return float(d2.min(axis=1).mean() + d2.min(axis=0).mean())
    d = np.sqrt(d2)
    return float(d.min(axis=1).mean() + d.min(axis=0).mean())


def chamfer_l2_batched(pred: torch.Tensor, target: torch.Tensor,
                       squared: bool = False) -> torch.Tensor:
    """Per-patch chamfer for (K, N, 3) vs (K, M, 3); returns (K,)."""
    d = torch.cdist(pred, target)
    if squared:
        d = d * d
    return d.min(dim=2).values.mean(dim=1) + d.min(dim=1).values.mean(dim=1)


def mae_losses(model: MaeModel, sample_feats: torch.Tensor,
               sample_pos: torch.Tensor, target_rel: torch.Tensor,
               target_faces: torch.Tensor, plan: MaskPlan, cfg: MaeConfig):
    """(L_CD, L_MSE) for one sample under one mask plan."""
    emb = model.embed_patches(sample_feats, sample_pos)
    encoded = model.encode(emb, sample_pos, plan)
    pred_v, pred_f = model.decode_and_reconstruct(encoded, plan, sample_pos)
    msk = torch.as_tensor(plan.masked_ids, dtype=torch.long)
    l_cd = chamfer_l2_batched(pred_v, target_rel[msk],
                              squared=cfg.chamfer_squared).mean()
    l_mse = ((pred_f - target_faces[msk]) ** 2).mean()
    return l_cd, l_mse


def mask_seed_for(global_seed: int, sample_id: int, epoch: int) -> int:
    payload = f"{global_seed}/{sample_id}/{epoch}".encode()
    return int.from_bytes(hashlib.sha256(payload).digest()[:8], "little")


def pretrain_step(model: MaeModel, batch: list, cfg: MaeConfig, optimizer,
                  epoch: int = 0) -> dict:
    """One optimization step over a batch of MeshSamples.

    Returns {"L_CD": ..., "L_MSE": ..., "L": ...} averaged over the batch.
    """
    total_cd = 0.0
    total_mse = 0.0
    loss_acc = None
    for sample in batch:
        plan = make_mask(sample.n_patches, cfg.mask_ratio,
                         mask_seed_for(cfg.seed, sample.sample_id, epoch))
        feats = torch.from_numpy(sample.features)
        pos = torch.from_numpy(sample.positions)
        rel = torch.from_numpy(sample.rel_vertices)
        ff = torch.from_numpy(sample.face_feats)
        l_cd, l_mse = mae_losses(model, feats, pos, rel, ff, plan, cfg)
        loss = l_cd + cfg.phi * l_mse
        loss_acc = loss if loss_acc is None else loss_acc + loss
        total_cd += float(l_cd.detach())
        total_mse += float(l_mse.detach())
    loss_acc = loss_acc / len(batch)
    if not torch.isfinite(loss_acc):
        raise FloatingPointError(
            f"non-finite pretraining loss: L_CD={total_cd}, L_MSE={total_mse}")
    loss_acc.backward()
    if cfg.grad_clip:
        nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
    adamw_step(model, optimizer)
    n = len(batch)
    return {"L_CD": total_cd / n, "L_MSE": total_mse / n,
            "L": total_cd / n + cfg.phi * total_mse / n}


def pretrain(model: MaeModel, samples: list, cfg: MaeConfig, run_dir,
             augment_fn=None) -> list:
    """Full pretraining loop; writes config snapshot, CSV loss log and
    checkpoints into run_dir. Returns the per-epoch loss records.

    augment_fn, when given, maps (MeshSample, epoch) -> MeshSample and is
    applied to each sample once per epoch.
    """
    os.makedirs(run_dir, exist_ok=True)
    with open(os.path.join(run_dir, "config.json"), "w") as fh:
        json.dump({"stage": "pretrain", **asdict(cfg)}, fh, indent=2)
    schedule = LrSchedule(kind="cosine", base_lr=cfg.base_lr,
                          total_epochs=cfg.epochs)
    optimizer = make_adamw(model, lr=cfg.base_lr, weight_decay=cfg.weight_decay,
                           beta2=cfg.adam_beta2)
    rng = np.random.default_rng(cfg.seed)
    records = []
    log_path = os.path.join(run_dir, "loss_log.csv")
    with open(log_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "L_CD", "L_MSE", "L", "lr"])
        for epoch in range(cfg.epochs):
            if epoch < cfg.warmup_epochs:
                lr = cfg.base_lr * (epoch + 1) / cfg.warmup_epochs
            else:
                lr = lr_at(schedule, epoch)
            set_lr(optimizer, lr)
            order = rng.permutation(len(samples))
            epoch_samples = [samples[i] for i in order]
            if augment_fn is not None:
                epoch_samples = [augment_fn(s, epoch) for s in epoch_samples]
            sums = {"L_CD": 0.0, "L_MSE": 0.0, "L": 0.0}
            n_batches = 0
            for lo in range(0, len(epoch_samples), cfg.batch_size):
                rec = pretrain_step(model, epoch_samples[lo:lo + cfg.batch_size],
                                    cfg, optimizer, epoch=epoch)
                for k in sums:
                    sums[k] += rec[k]
                n_batches += 1
            rec = {k: v / n_batches for k, v in sums.items()}
            rec["lr"] = lr
            records.append(rec)
            writer.writerow([epoch, repr(rec["L_CD"]), repr(rec["L_MSE"]),
                             repr(rec["L"]), repr(lr)])
            if (epoch + 1) % cfg.checkpoint_every == 0 or epoch == cfg.epochs - 1:
                save_module(os.path.join(run_dir, f"checkpoint_{epoch:04d}.ckpt"),
                            model)
    save_module(os.path.join(run_dir, "checkpoint_final.ckpt"), model)
    return records


def export_reconstruction(model: MaeModel, sample: MeshSample, seed: int,
                          out_dir, cfg: MaeConfig) -> dict:
    """Write ground-truth mesh, masked-removed mesh and reconstructed point
    set (as OFF files) for visual inspection of a masked reconstruction."""
    os.makedirs(out_dir, exist_ok=True)
    plan = make_mask(sample.n_patches, cfg.mask_ratio, seed)
    feats = torch.from_numpy(sample.features)
    pos = torch.from_numpy(sample.positions)
    with torch.no_grad():
        emb = model.embed_patches(feats, pos)
        encoded = model.encode(emb, pos, plan)
        pred_v, _ = model.decode_and_reconstruct(encoded, plan, pos)
    centers = sample.positions[plan.masked_ids]
    points = (pred_v.numpy() + centers[:, None, :]).reshape(-1, 3)

    gt = TriMesh(sample.leaf_vertices, sample.leaf_faces, name="ground_truth")
    keep = np.concatenate([
        np.arange(b * PATCH_FACES, (b + 1) * PATCH_FACES)
        for b in plan.visible_ids
    ]) if len(plan.visible_ids) else np.empty(0, dtype=np.int64)
    visible = TriMesh(sample.leaf_vertices, sample.leaf_faces[keep],
                      name="visible_patches")
    recon = TriMesh(points, np.empty((0, 3), dtype=np.int64), name="reconstruction")
    paths = {
        "ground_truth": os.path.join(out_dir, "ground_truth.off"),
        "visible": os.path.join(out_dir, "masked_removed.off"),
        "reconstruction": os.path.join(out_dir, "reconstructed_points.off"),
    }
    save_mesh(gt, paths["ground_truth"])
    save_mesh(visible, paths["visible"])
    save_mesh(recon, paths["reconstruction"])
    return paths
