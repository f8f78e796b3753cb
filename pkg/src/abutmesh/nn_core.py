"""Neural-network kernel: transformer building blocks, AdamW stepping,
learning-rate schedules, a raw-tensor checkpoint container, and
finite-difference gradient checking.

Layers are torch modules (CPU); training runs in float32 and gradient
verification in float64. The checkpoint container is a single file holding a
JSON header (tensor table) followed by raw little-endian payloads.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn

CHECKPOINT_MAGIC = b"ABMTNSR1"
CHECKPOINT_FORMAT_VERSION = 1


def init_weights(module: nn.Module) -> None:
    """Truncated-normal(0.02) weights, zero biases, unit norm gains."""
    for m in module.modules():
        if isinstance(m, nn.Linear):
            nn.init.trunc_normal_(m.weight, std=0.02, a=-0.04, b=0.04)
            if m.bias is not None:
                nn.init.zeros_(m.bias)
        elif isinstance(m, nn.LayerNorm):
            nn.init.ones_(m.weight)
            nn.init.zeros_(m.bias)


def mlp(in_dim: int, hidden_dim: int, out_dim: int) -> nn.Sequential:
    """Two-layer GELU MLP."""
    return nn.Sequential(
        nn.Linear(in_dim, hidden_dim),
        nn.GELU(),
        nn.Linear(hidden_dim, out_dim),
    )


class MultiHeadSelfAttention(nn.Module):
    def __init__(self, d_model: int, n_heads: int):
        super().__init__()
        if d_model % n_heads != 0:
            raise ValueError(f"d_model {d_model} not divisible by n_heads {n_heads}")
        self.d_model = d_model
        self.n_heads = n_heads
        self.head_dim = d_model // n_heads
        self.qkv = nn.Linear(d_model, 3 * d_model)
        self.out = nn.Linear(d_model, d_model)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        # x: (..., seq, d_model)
        *lead, n, d = x.shape
        qkv = self.qkv(x).reshape(*lead, n, 3, self.n_heads, self.head_dim)
        q = qkv[..., 0, :, :].transpose(-3, -2)  # (..., heads, seq, hd)
        k = qkv[..., 1, :, :].transpose(-3, -2)
        v = qkv[..., 2, :, :].transpose(-3, -2)
        scores = q @ k.transpose(-2, -1) / math.sqrt(self.head_dim)
        attn = torch.softmax(scores, dim=-1)
        mixed = (attn @ v).transpose(-3, -2).reshape(*lead, n, d)
        return self.out(mixed)


class TransformerBlock(nn.Module):
    """Pre-norm block: LN -> MHSA -> residual, LN -> GELU FFN (4d) -> residual."""

    def __init__(self, d_model: int, n_heads: int):
        super().__init__()
        self.norm1 = nn.LayerNorm(d_model)
        self.attn = MultiHeadSelfAttention(d_model, n_heads)
        self.norm2 = nn.LayerNorm(d_model)
        self.ffn = mlp(d_model, 4 * d_model, d_model)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = x + self.attn(self.norm1(x))
        x = x + self.ffn(self.norm2(x))
        return x


@dataclass
class LrSchedule:
    kind: str  # "cosine" | "step"
    base_lr: float
    total_epochs: int
    milestones: list = field(default_factory=list)
    gamma: float = 0.1

    def __post_init__(self):
        if self.kind not in ("cosine", "step"):
            raise ValueError(f"unknown schedule kind {self.kind!r}")


def lr_at(schedule: LrSchedule, epoch: int) -> float:
    if not (0 <= epoch < schedule.total_epochs):
        raise ValueError(
            f"epoch {epoch} outside [0, {schedule.total_epochs})"
        )
    if schedule.kind == "cosine":
        return schedule.base_lr * 0.5 * (1 + math.cos(math.pi * epoch / schedule.total_epochs))
    drops = sum(1 for m in schedule.milestones if m <= epoch)
    return schedule.base_lr * schedule.gamma**drops


def make_adamw(module: nn.Module, lr: float, weight_decay: float = 0.0,
               beta2: float = 0.999) -> torch.optim.AdamW:
    return torch.optim.AdamW(module.parameters(), lr=lr, betas=(0.9, beta2),
                             eps=1e-8, weight_decay=weight_decay)


def adamw_step(module: nn.Module, optimizer: torch.optim.AdamW) -> None:
    """One optimizer step with a finite-gradient guard; clears gradients."""
    for name, p in module.named_parameters():
        if p.grad is not None and not torch.isfinite(p.grad).all():
            raise FloatingPointError(f"non-finite gradient in parameter {name!r}")
    optimizer.step()
    optimizer.zero_grad(set_to_none=True)


def set_lr(optimizer: torch.optim.Optimizer, lr: float) -> None:
    for group in optimizer.param_groups:
        group["lr"] = lr


# --- checkpoint container ---------------------------------------------------

_DTYPES = {"float32": "<f4", "float64": "<f8", "int64": "<i8"}


def save_tensors(path, tensors: dict) -> None:
    """Write named arrays: magic, header length, JSON tensor table, payloads."""
    arrays = {}
    table = {}
    offset = 0
    for name, arr in tensors.items():
        if isinstance(arr, torch.Tensor):
            arr = arr.detach().cpu().numpy()
        arr = np.ascontiguousarray(arr)
        dtype = str(arr.dtype)
        if dtype not in _DTYPES:
            arr = arr.astype(np.float32)
            dtype = "float32"
        arrays[name] = arr.astype(_DTYPES[dtype])
        table[name] = {"shape": list(arr.shape), "dtype": dtype, "offset": offset}
        offset += arrays[name].nbytes
    header = json.dumps({"format_version": CHECKPOINT_FORMAT_VERSION,
                         "tensors": table}).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for name in tensors:
            fh.write(arrays[name].tobytes())


def load_tensors(path) -> dict:
    with open(path, "rb") as fh:
        magic = fh.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"{path}: not a checkpoint container")
        (header_len,) = struct.unpack("<Q", fh.read(8))
        header = json.loads(fh.read(header_len).decode())
        if header["format_version"] != CHECKPOINT_FORMAT_VERSION:
            raise ValueError(f"unsupported checkpoint version {header['format_version']}")
        payload = fh.read()
    out = {}
    for name, meta in header["tensors"].items():
        wire = _DTYPES[meta["dtype"]]
        count = int(np.prod(meta["shape"])) if meta["shape"] else 1
        arr = np.frombuffer(payload, dtype=wire, count=count,
                            offset=meta["offset"]).reshape(meta["shape"])
        out[name] = arr.astype(meta["dtype"])
    return out


def save_module(path, module: nn.Module, extra: dict | None = None) -> None:
    tensors = {f"param/{k}": v for k, v in module.state_dict().items()}
    if extra:
        tensors.update({f"extra/{k}": v for k, v in extra.items()})
    save_tensors(path, tensors)


def load_module(path, module: nn.Module) -> dict:
    """Load parameters into module; returns any extra arrays."""
    tensors = load_tensors(path)
    state = {}
    extra = {}
    for name, arr in tensors.items():
        if name.startswith("param/"):
            state[name[len("param/"):]] = torch.from_numpy(arr.copy())
        elif name.startswith("extra/"):
            extra[name[len("extra/"):]] = arr
    module.load_state_dict(state)
    return extra


# --- gradient checking ------------------------------------------------------

def grad_check(module: nn.Module, loss_fn, probe_count: int = 20,
               eps: float = 1e-5, seed: int = 0, atol: float = 1e-4) -> float:
    """Max relative error between autograd and central finite differences.

    loss_fn() must evaluate a scalar from the module's current parameters.
    The module must be in float64 for the stated tolerances to hold. atol
    floors the denominator of the relative error: gradients below it are
    smaller than central differences can resolve (the finite-difference
    noise is ~|loss| * 1e-16 / eps), so they are compared absolutely.
    """
    params = [p for p in module.parameters() if p.requires_grad]
    module.zero_grad(set_to_none=True)
    loss = loss_fn()
    loss.backward()
    analytic = [p.grad.detach().clone() if p.grad is not None
                else torch.zeros_like(p) for p in params]

    sizes = [p.numel() for p in params]
    total = sum(sizes)
    rng = np.random.default_rng(seed)
    probes = rng.choice(total, size=min(probe_count, total), replace=False)
    bounds = np.cumsum([0] + sizes)

    worst = 0.0
    with torch.no_grad():
        for flat in probes:
            pi = int(np.searchsorted(bounds, flat, side="right") - 1)
            local = int(flat - bounds[pi])
            p = params[pi]
            orig = p.view(-1)[local].item()
            p.view(-1)[local] = orig + eps
            with torch.enable_grad():
                hi = float(loss_fn().detach())
            p.view(-1)[local] = orig - eps
            with torch.enable_grad():
                lo = float(loss_fn().detach())
            p.view(-1)[local] = orig
            fd = (hi - lo) / (2 * eps)
            ga = float(analytic[pi].view(-1)[local])
            rel = abs(ga - fd) / max(abs(ga), abs(fd), atol)
            worst = max(worst, rel)
    module.zero_grad(set_to_none=True)
    return worst
