"""Acceptance gate: ten desk-scale criteria exercising the full pipeline.

Each test prints one "criterion N (...): PASS|FAIL" line. The heavyweight
criteria (6-8, 10) share one session-scoped synthetic dataset and its
remeshing cache, and the end-to-end runs go through single CLI invocations.
Run with `pytest tests/test_acceptance.py -s` to watch the lines live; the
whole file takes roughly 45 minutes on one CPU core.
"""

import json
import math
import time

import numpy as np
import pytest
import torch
from torch import nn

from abutmesh.cli import main as cli_main
from abutmesh.datagen import Manifest
from abutmesh.evalkit import interval_iou
from abutmesh.mae import (MaeConfig, MaeModel, chamfer_l2, chamfer_l2_batched,
                          make_mask, pretrain)
from abutmesh.mesh_core import TriMesh, face_geometry, load_mesh
from abutmesh.nn_core import (LrSchedule, MultiHeadSelfAttention,
                              TransformerBlock, grad_check, lr_at)
from abutmesh.pipeline import preprocess_manifest
from abutmesh.remesh import patchify, remesh_pipeline
from abutmesh.tgl import AbutmentRegressor, StubTextEncoder, finetune_loss

SEED = 0
N_SAMPLES = 320  # 256 train / 64 test at the default 0.8 split


def report(num: int, desc: str, ok: bool, detail: str = "") -> None:
    suffix = f" ({detail})" if detail else ""
    print(f"criterion {num} ({desc}): {'PASS' if ok else 'FAIL'}{suffix}")
    assert ok, f"criterion {num} failed{suffix}"


# --- shared dataset and end-to-end runs -------------------------------------

@pytest.fixture(scope="session")
def ws(tmp_path_factory):
    root = tmp_path_factory.mktemp("acceptance")
    config = {
        "profile": "desk",
        "seed": SEED,
        "paths": {"cache_dir": str(root / "cache"),
                  "runs_dir": str(root / "runs")},
    }
    cfg_path = root / "config.json"
    cfg_path.write_text(json.dumps(config))
    assert cli_main(["gen-data", "--config", str(cfg_path),
                     "--out-dir", str(root / "data"),
                     "--n", str(N_SAMPLES)]) == 0
    return {"root": root, "config": str(cfg_path),
            "train": str(root / "data" / "manifest_train.jsonl"),
            "test": str(root / "data" / "manifest_test.jsonl"),
            "cache": str(root / "cache")}


@pytest.fixture(scope="session")
def eight_samples(ws):
    """The 8 fixed meshes for the overfit criterion, remeshed + featurized."""
    manifest = Manifest.load(ws["train"])
    manifest.samples = manifest.samples[:8]
    samples, failures = preprocess_manifest(manifest, target=500,
                                            cache_dir=ws["cache"])
    assert not failures
    return samples


OVERFIT_STEPS = 500


def run_overfit(samples, run_dir):
    """Criterion 6 training run: 8 meshes, one batch per epoch, 500 steps."""
    torch.manual_seed(SEED)
    cfg = MaeConfig(d_model=64, n_heads=4, encoder_blocks=2, decoder_blocks=1,
                    mask_ratio=0.5, phi=1.5, epochs=OVERFIT_STEPS, batch_size=8,
                    base_lr=3e-2, warmup_epochs=25, grad_clip=1.0,
                    adam_beta2=0.95, checkpoint_every=OVERFIT_STEPS, seed=SEED)
    model = MaeModel(cfg)
    records = pretrain(model, samples, cfg, run_dir)
    return model, cfg, records


@pytest.fixture(scope="session")
def overfit_run(ws, eight_samples):
    t0 = time.perf_counter()
    model, cfg, records = run_overfit(eight_samples, ws["root"] / "overfit")
    return {"model": model, "cfg": cfg, "records": records,
            "samples": eight_samples,
            "seconds": time.perf_counter() - t0,
            "run_dir": ws["root"] / "overfit"}


def _timed_cli(argv):
    t0 = time.perf_counter()
    assert cli_main(argv) == 0
    return time.perf_counter() - t0


@pytest.fixture(scope="session")
def pretrain_run(ws):
    run = ws["root"] / "runs" / "pretrain"
    secs = _timed_cli(["pretrain", "--config", ws["config"],
                       "--manifest", ws["train"], "--run-dir", str(run)])
    return {"dir": run, "seconds": secs}


def _finetune(ws, pretrain_run, name, extra=()):
    run = ws["root"] / "runs" / name
    secs = _timed_cli(["finetune", "--config", ws["config"],
                       "--manifest", ws["train"], "--run-dir", str(run),
                       "--pretrained",
                       str(pretrain_run["dir"] / "checkpoint_final.ckpt"),
                       *extra])
    return {"dir": run, "seconds": secs}


@pytest.fixture(scope="session")
def ft_tgl(ws, pretrain_run):
    return _finetune(ws, pretrain_run, "ft_tgl")


@pytest.fixture(scope="session")
def ft_no_tgl(ws, pretrain_run):
    return _finetune(ws, pretrain_run, "ft_no_tgl", extra=("--no-tgl",))


def _evaluate(ws, ft, name, extra=()):
    out = ws["root"] / "runs" / name
    secs = _timed_cli(["eval", "--config", ws["config"],
                       "--checkpoint", str(ft["dir"] / "checkpoint_final.ckpt"),
                       "--manifest", ws["test"],
                       "--train-manifest", ws["train"],
                       "--out-dir", str(out), *extra])
    with open(out / "results.json") as fh:
        return {"dir": out, "seconds": secs, "results": json.load(fh)}


@pytest.fixture(scope="session")
def eval_tgl(ws, ft_tgl):
    return _evaluate(ws, ft_tgl, "eval_tgl")


@pytest.fixture(scope="session")
def eval_no_tgl(ws, ft_no_tgl):
    return _evaluate(ws, ft_no_tgl, "eval_no_tgl", extra=("--no-tgl",))


# --- criteria ----------------------------------------------------------------

def _lattice_iou(pv: float, gt: float, step: float = 1e-8) -> float:
    """Brute-force grid-overlap oracle: IoU as a ratio of counted lattice
    points inside intersection and union of [pv, pv+1] and [gt, gt+1]."""

    def count(lo, hi):
        if hi < lo:
            return 0
        return math.floor(hi / step) - math.ceil(lo / step) + 1

    inter = count(max(pv, gt), min(pv, gt) + 1)
    union = count(min(pv, gt), max(pv, gt) + 1)
    return inter / union


def test_criterion_1_iou_fidelity():
    t0 = time.perf_counter()
    rng = np.random.default_rng(SEED)
    ok = True
    for x in rng.uniform(-50, 50, size=100):
        ok &= abs(interval_iou(x, x + 0.4) - 0.428571) <= 1e-6 + 5e-7
        ok &= abs(interval_iou(x, x + 0.4) - 0.6 / 1.4) <= 1e-9
    # materialized fine grid on a handful of pairs, lattice counting on 1,000
    for pv, gt in rng.uniform(-3, 3, size=(5, 2)):
        grid = np.arange(min(pv, gt) - 0.5, max(pv, gt) + 1.5, 1e-6)
        in_p = (grid >= pv) & (grid <= pv + 1)
        in_g = (grid >= gt) & (grid <= gt + 1)
        dense = (in_p & in_g).sum() / max((in_p | in_g).sum(), 1)
        ok &= abs(interval_iou(pv, gt) - dense) <= 5e-6
    pairs = np.concatenate([rng.uniform(-5, 5, size=(500, 2)),
                            rng.uniform(0, 0.9, size=(500, 2))])
    for pv, gt in pairs:
        ok &= abs(interval_iou(pv, gt) - _lattice_iou(pv, gt)) <= 1e-6
    elapsed = time.perf_counter() - t0
    ok &= elapsed < 1.0
    report(1, "interval-IoU fidelity vs grid-overlap oracle", ok,
           f"{elapsed:.2f} s")


def test_criterion_2_remesh_structure(ws):
    manifest = Manifest.load(ws["train"])
    ok = True
    worst = 0.0
    for sample in manifest.samples[:20]:
        t0 = time.perf_counter()
        remeshed = remesh_pipeline(load_mesh(sample.mesh_path), target=500)
        dt = time.perf_counter() - t0
        worst = max(worst, dt)
        m = remeshed.base_face_count
        ok &= 496 <= m <= 500
        ok &= remeshed.leaf_mesh.n_faces == 64 * m
        patches = patchify(remeshed)
        ok &= len(patches) == m
        all_leaf_ids = []
        for p in patches:
            ok &= len(p.leaf_face_ids) == 64
            ok &= len(np.unique(p.vertex_ids)) == 45
            all_leaf_ids.append(p.leaf_face_ids)
        ok &= np.array_equal(np.sort(np.concatenate(all_leaf_ids)),
                             np.arange(64 * m))
        ok &= dt < 10.0
    report(2, "remesh structure on 20 meshes", ok, f"max {worst:.2f} s/mesh")


def test_criterion_3_geometry_invariants():
    rng = np.random.default_rng(SEED)
    verts = rng.standard_normal((3000, 3)) * 10
    mesh = TriMesh(verts, np.arange(3000).reshape(1000, 3))
    geo = face_geometry(mesh)
    ok = bool(geo.valid.all())
    ok &= np.abs(geo.interior_angles.sum(axis=1) - np.pi).max() <= 1e-6

    small = TriMesh(verts[:300], np.arange(300).reshape(100, 3))
    base = face_geometry(small)
    for _ in range(50):
        q, _ = np.linalg.qr(rng.standard_normal((3, 3)))
        rot = q * np.linalg.det(q)  # proper rotation
        t = rng.standard_normal(3) * 5
        moved = face_geometry(TriMesh(small.vertices @ rot.T + t, small.faces))
        ok &= np.abs(moved.area - base.area).max() <= 1e-6
        ok &= np.abs(moved.interior_angles - base.interior_angles).max() <= 1e-6
        ok &= np.abs(moved.unit_normal - base.unit_normal @ rot.T).max() <= 1e-9
        ok &= np.abs(moved.center - (base.center @ rot.T + t)).max() <= 1e-9
    report(3, "face-geometry invariants under rigid motion", ok)


def test_criterion_4_chamfer_oracle():
    rng = np.random.default_rng(SEED)
    ok = True
    for _ in range(100):
        a = rng.standard_normal((int(rng.integers(1, 65)), 3))
        b = rng.standard_normal((int(rng.integers(1, 65)), 3))
        brute = (
            sum(min(math.dist(p, q) for q in b) for p in a) / len(a)
            + sum(min(math.dist(q, p) for p in a) for q in b) / len(b)
        )
        ok &= abs(chamfer_l2(a, b) - brute) <= 1e-9
        ok &= chamfer_l2(a, b) == chamfer_l2(b, a)
        ok &= chamfer_l2(a, a) == 0.0
    report(4, "chamfer equals O(n^2) brute force", ok)


class _PointCloud(nn.Module):
    def __init__(self, pts):
        super().__init__()
        self.pts = nn.Parameter(pts)


class _Vector(nn.Module):
    def __init__(self, v):
        super().__init__()
        self.v = nn.Parameter(v)


def test_criterion_5_gradients():
    t0 = time.perf_counter()
    torch.manual_seed(SEED)
    gen = torch.Generator().manual_seed(1)
    results = {}

    dense = nn.Linear(16, 8).double()
    x = torch.randn(4, 16, generator=gen, dtype=torch.float64)
    results["dense"] = grad_check(dense, lambda: dense(x).square().sum())

    ln = nn.LayerNorm(16).double()
    results["layer_norm"] = grad_check(ln, lambda: ln(x).square().sum())

    attn = MultiHeadSelfAttention(16, 4).double()
    xs = torch.randn(6, 16, generator=gen, dtype=torch.float64)
    results["attention"] = grad_check(attn, lambda: attn(xs).square().sum())

    block = TransformerBlock(16, 4).double()
    results["block"] = grad_check(block, lambda: block(xs).square().sum())

    mae_cfg = MaeConfig(d_model=8, n_heads=2, encoder_blocks=1,
                        decoder_blocks=1)
    reg = AbutmentRegressor(mae_cfg, text_width=16, fused_width=8,
                            fc_widths=(8, 8)).double()
    # the regression path never touches the MAE decoder; freeze it so probes
    # hit only parameters the loss actually depends on
    for sub in (reg.backbone.decoder, reg.backbone.decoder_norm,
                reg.backbone.vertex_head, reg.backbone.face_head):
        for p in sub.parameters():
            p.requires_grad_(False)
    reg.backbone.mask_token.requires_grad_(False)
    feats = torch.randn(5, 832, generator=gen, dtype=torch.float64)
    pos = torch.randn(5, 3, generator=gen, dtype=torch.float64)
    text = torch.randn(1, 16, generator=gen, dtype=torch.float64)
    target = torch.tensor([2.0, 4.5, 6.0], dtype=torch.float64)
    results["tgl_path"] = grad_check(
        reg, lambda: finetune_loss(reg(feats, pos, text), target),
        probe_count=40)

    cloud = _PointCloud(torch.randn(2, 12, 3, generator=gen,
                                    dtype=torch.float64))
    ref = torch.randn(2, 9, 3, generator=gen, dtype=torch.float64)
    results["chamfer"] = grad_check(
        cloud, lambda: chamfer_l2_batched(cloud.pts, ref).sum())

    vec = _Vector(torch.tensor([0.3, 1.7, -2.4], dtype=torch.float64))
    results["smooth_l1_mse"] = grad_check(
        vec, lambda: finetune_loss(vec.v, target))

    elapsed = time.perf_counter() - t0
    ok = all(v < 1e-4 for v in results.values()) and elapsed < 120
    worst = max(results, key=results.get)
    report(5, "gradient checks vs finite differences", ok,
           f"worst {worst} {results[worst]:.2e}, {elapsed:.0f} s")


def test_criterion_6_mae_overfit(overfit_run):
    records = overfit_run["records"]
    first, final = records[0]["L"], records[-1]["L"]
    model, cfg = overfit_run["model"], overfit_run["cfg"]

    # masked reconstruction vs the patch-centroid-constant baseline
    model_cd, base_cd = [], []
    with torch.no_grad():
        for k, sample in enumerate(overfit_run["samples"]):
            plan = make_mask(sample.n_patches, cfg.mask_ratio, seed=1000 + k)
            emb = model.embed_patches(torch.from_numpy(sample.features),
                                      torch.from_numpy(sample.positions))
            encoded = model.encode(emb, torch.from_numpy(sample.positions),
                                   plan)
            pred_v, _ = model.decode_and_reconstruct(
                encoded, plan, torch.from_numpy(sample.positions))
            for j, patch in enumerate(plan.masked_ids):
                target = sample.rel_vertices[patch]
                model_cd.append(chamfer_l2(pred_v[j].numpy(), target))
                base_cd.append(chamfer_l2(np.zeros((45, 3)), target))
    ratio = float(np.mean(base_cd)) / float(np.mean(model_cd))
    ok = final <= 0.1 * first
    ok &= ratio >= 5.0
    ok &= overfit_run["seconds"] < 600
    report(6, "MAE overfit on 8 fixed meshes", ok,
           f"L {first:.4f}->{final:.4f}, recon {ratio:.1f}x baseline, "
           f"{overfit_run['seconds'] / 60:.1f} min")


def test_criterion_7_finetune_beats_baseline(pretrain_run, ft_tgl, eval_tgl):
    res = eval_tgl["results"]
    model_iou = res["mean_iou_percent"]
    base_iou = res["baseline_mean_iou_percent"]
    margins = {k: model_iou[k] - base_iou[k] for k in model_iou}
    total = (pretrain_run["seconds"] + ft_tgl["seconds"]
             + eval_tgl["seconds"])
    ok = all(v >= 5.0 for v in margins.values()) and total < 1800
    detail = ", ".join(f"{k} +{v:.1f}" for k, v in margins.items())
    report(7, "fine-tuned model beats mean-predictor baseline", ok,
           f"{detail}; {total / 60:.1f} min")


def test_criterion_8_tgl_ablation(ws, eval_tgl, eval_no_tgl):
    with_tgl = np.mean(list(
        eval_tgl["results"]["mean_iou_percent"].values()))
    without = np.mean(list(
        eval_no_tgl["results"]["mean_iou_percent"].values()))
    # identical seeds and budget: run snapshots differ only in the TGL switch
    a = json.loads((ws["root"] / "runs" / "ft_tgl" /
                    "run_config.json").read_text())
    b = json.loads((ws["root"] / "runs" / "ft_no_tgl" /
                    "run_config.json").read_text())
    b["finetune"]["use_tgl"] = a["finetune"]["use_tgl"]
    b["config_hash"] = a["config_hash"]
    ok = with_tgl >= without and a == b
    report(8, "TGL >= no-TGL mean IoU", ok,
           f"with {with_tgl:.2f} vs without {without:.2f}")


def test_criterion_9_schedule_fidelity(ws):
    cosine = LrSchedule(kind="cosine", base_lr=1e-4, total_epochs=300)
    step = LrSchedule(kind="step", base_lr=1e-4, total_epochs=100,
                      milestones=[30, 60], gamma=0.1)
    ok = lr_at(cosine, 0) == 1e-4
    ok &= abs(lr_at(step, 30) - 1e-5) <= 1e-5 * 1e-12
    ok &= abs(lr_at(step, 60) - 1e-6) <= 1e-6 * 1e-12
    ok &= lr_at(step, 29) == 1e-4 and lr_at(step, 59) == lr_at(step, 30)

    # the same values must appear in actual run logs (tiny model, full-profile
    # schedule constants)
    root = ws["root"] / "sched"
    config = {
        "profile": "desk",
        "seed": SEED,
        "paths": {"cache_dir": ws["cache"], "runs_dir": str(root)},
        "mae": {"d_model": 16, "n_heads": 4, "encoder_blocks": 1,
                "decoder_blocks": 1, "epochs": 1, "batch_size": 2,
                "base_lr": 1e-4, "checkpoint_every": 1},
        "finetune": {"epochs": 61, "batch_size": 2, "base_lr": 1e-4,
                     "milestones": [30, 60], "fc_widths": [16, 16],
                     "fused_width": 16, "text_width": 16},
    }
    root.mkdir(exist_ok=True)
    cfg_path = root / "config.json"
    cfg_path.write_text(json.dumps(config))
    tiny_manifest = root / "manifest.jsonl"
    with open(ws["train"]) as fh:
        lines = fh.readlines()
    tiny_manifest.write_text("".join(lines[:2]))
    assert cli_main(["pretrain", "--config", str(cfg_path),
                     "--manifest", str(tiny_manifest),
                     "--run-dir", str(root / "pre")]) == 0
    assert cli_main(["finetune", "--config", str(cfg_path),
                     "--manifest", str(tiny_manifest),
                     "--run-dir", str(root / "ft")]) == 0

    def logged_lrs(path):
        rows = (path / "loss_log.csv").read_text().splitlines()[1:]
        return [float(r.split(",")[-1]) for r in rows]

    pre_lrs = logged_lrs(root / "pre")
    ft_lrs = logged_lrs(root / "ft")
    ok &= pre_lrs[0] == 1e-4
    ok &= abs(ft_lrs[30] - 1e-5) <= 1e-5 * 1e-12
    ok &= abs(ft_lrs[60] - 1e-6) <= 1e-6 * 1e-12
    ok &= ft_lrs[0] == 1e-4
    report(9, "lr schedule fidelity (cosine start, step drops)", ok,
           f"logged lr@30={ft_lrs[30]:.1e}, lr@60={ft_lrs[60]:.1e}")


def test_criterion_10_determinism(ws, overfit_run, pretrain_run, ft_tgl,
                                  ft_no_tgl, eval_tgl, eight_samples):
    # repeat the training runs of criteria 6-8 with identical seeds and
    # compare the CSV logs byte for byte
    run_overfit(eight_samples, ws["root"] / "overfit_repeat")
    ok = ((ws["root"] / "overfit" / "loss_log.csv").read_bytes()
          == (ws["root"] / "overfit_repeat" / "loss_log.csv").read_bytes())

    repeat_pre = ws["root"] / "runs" / "pretrain_repeat"
    assert cli_main(["pretrain", "--config", ws["config"],
                     "--manifest", ws["train"],
                     "--run-dir", str(repeat_pre)]) == 0
    ok &= ((pretrain_run["dir"] / "loss_log.csv").read_bytes()
           == (repeat_pre / "loss_log.csv").read_bytes())

    for name, ft, extra in [("ft_tgl_repeat", ft_tgl, ()),
                            ("ft_no_tgl_repeat", ft_no_tgl, ("--no-tgl",))]:
        repeat = ws["root"] / "runs" / name
        assert cli_main(["finetune", "--config", ws["config"],
                         "--manifest", ws["train"], "--run-dir", str(repeat),
                         "--pretrained",
                         str(repeat_pre / "checkpoint_final.ckpt"),
                         *extra]) == 0
        ok &= ((ft["dir"] / "loss_log.csv").read_bytes()
               == (repeat / "loss_log.csv").read_bytes())

    repeat_eval = _evaluate(ws, {"dir": ws["root"] / "runs" / "ft_tgl_repeat"},
                            "eval_tgl_repeat")
    ok &= ((eval_tgl["dir"] / "results.csv").read_bytes()
           == (repeat_eval["dir"] / "results.csv").read_bytes())
    report(10, "criteria 6-8 reruns are bit-identical", ok)
