"""Acceptance gate.

One test per criterion, named test_criterion_N_*, so `pytest -v` gives
one pass/fail line each. The training-based criteria (5-8) share
session fixtures; together they train real models and dominate the
suite's runtime.
"""

import dataclasses
import time
from pathlib import Path

import numpy as np
import pytest

from attrvit.attributes import AttributeConfig
from attrvit.cli import main
from attrvit.data import SceneSpec, make_dataset
from attrvit.encoder import EncoderConfig, init_encoder_params, normed_attention
from attrvit.evaluate import evaluate_model, random_mask_baseline
from attrvit.gradcheck import REGISTRY, TOLERANCE, run_checks
from attrvit.losses import (
    LossConfig,
    combine_losses,
    discriminability_loss,
    diversity_loss,
    global_loss,
)
from attrvit.model import init_model_params
from attrvit.tensor import Tape, Tensor
from attrvit.train import (
    TrainConfig,
    ema_update,
    evaluate_objective,
    init_train_state,
    load_checkpoint,
    train,
    train_step,
)

# Desk-scale configuration used by criteria 5-7 (256 scenes, 3 classes).
# 1500 steps sit inside the 2000-step budget with better localization
# (maps peak before classification fully saturates) and keep the three
# seeds comfortably under the 20-minute ceiling.
DESK_STEPS = 1500
DESK_SEEDS = (0, 1, 2)
NOISE_SEEDS = (0, 1, 2, 3, 4)


def _desk_config(seed: int, alpha: float, beta: float) -> TrainConfig:
    cfg = TrainConfig(seed=seed, steps=DESK_STEPS)
    return dataclasses.replace(
        cfg, loss=dataclasses.replace(cfg.loss, alpha=alpha, beta=beta)
    )


def _report(criterion: int, ok: bool, detail: str) -> None:
    print(f"criterion {criterion}: {'PASS' if ok else 'FAIL'} - {detail}", flush=True)
    assert ok, detail


@pytest.fixture(scope="session")
def desk_samples():
    return make_dataset(SceneSpec(), 256)


@pytest.fixture(scope="session")
def full_runs(desk_samples):
    """Three seeds of the full objective (alpha=0.5, beta=1.0)."""
    runs = []
    start = time.time()
    for seed in DESK_SEEDS:
        cfg = _desk_config(seed, alpha=0.5, beta=1.0)
        state, _ = train(desk_samples, cfg)
        report = evaluate_model(
            state.theta, cfg.encoder, cfg.attr, cfg.loss.fuse_layers, desk_samples
        )
        runs.append(report)
    return runs, time.time() - start


@pytest.fixture(scope="session")
def global_runs(desk_samples):
    """Three seeds of the global-only objective."""
    runs = []
    for seed in DESK_SEEDS:
        cfg = _desk_config(seed, alpha=0.0, beta=0.0)
        state, _ = train(desk_samples, cfg)
        report = evaluate_model(
            state.theta, cfg.encoder, cfg.attr, cfg.loss.fuse_layers, desk_samples
        )
        runs.append(report)
    return runs


def test_criterion_1_gradient_suite():
    start = time.time()
    results, ok = run_checks()
    elapsed = time.time() - start
    worst = max(err for _, err in results)
    end_to_end = [n for n in REGISTRY if n.startswith("total_loss.")]
    _report(
        1,
        ok and worst <= TOLERANCE and elapsed < 120 and len(end_to_end) >= 5,
        f"{len(results)} checks, max rel err {worst:.2e} (tol {TOLERANCE}), "
        f"{len(end_to_end)} end-to-end probes, {elapsed:.1f}s",
    )


def test_criterion_2_attention_row_norms():
    cfg = EncoderConfig(image_size=16, patch_size=4, depth=1, heads=2, dim=16)
    rng = np.random.default_rng(0)
    params = init_encoder_params(cfg, rng)
    worst_over = 0.0
    worst_dev = 0.0
    checked = 0
    for _ in range(10):
        tokens = Tensor(rng.normal(size=(100, cfg.tokens, cfg.dim)))
        _, rows = normed_attention(tokens, params, cfg)
        norms = np.linalg.norm(rows.data, axis=-1)
        worst_over = max(worst_over, float(norms.max() - 1.0))
        nondegenerate = norms > 1e-6
        worst_dev = max(worst_dev, float(np.abs(norms[nondegenerate] - 1.0).max()))
        checked += tokens.data.shape[0]
    _report(
        2,
        checked == 1000 and worst_over <= 1e-9 and worst_dev <= 1e-9,
        f"{checked} inputs, max excess {worst_over:.2e}, "
        f"max |norm-1| on non-degenerate rows {worst_dev:.2e} (tol 1e-9)",
    )


def test_criterion_3_loss_identities():
    enc = EncoderConfig(image_size=16, patch_size=4, depth=2, heads=2, dim=16)
    attr = AttributeConfig(hidden_dim=8, attributes=2)
    rng = np.random.default_rng(0)
    params = init_model_params(enc, attr, 3, rng)
    cfg = TrainConfig(
        seed=0, batch_size=2, encoder=enc, attr=attr,
        loss=LossConfig(fuse_layers=2, alpha=0.5, beta=1.0),
    )
    images = Tensor(rng.random((2, 16, 16, 3)))
    labels = np.array([[1.0, 0, 1], [0, 1, 0]])

    # Identical weights and identical views on both branches -> dis = 0.
    _, breakdown = evaluate_objective(params, params, images, images, labels, cfg)
    dis_zero = abs(float(breakdown.dis)) <= 1e-12

    g = Tensor(rng.normal(size=(2, 4, 4, 8)))
    div_same = float(diversity_loss(Tensor(np.stack([g.data[0], g.data[0]]))).data)
    orth = np.zeros((2, 4, 4, 8))
    orth[0, ..., 0] = 1.0
    orth[1, ..., 1] = 1.0
    div_orth = float(diversity_loss(Tensor(orth)).data)

    ln2 = float(global_loss(Tensor(np.zeros((4, 3))), np.eye(4, 3)).data)

    total, parts = combine_losses(
        Tensor(0.25), Tensor(0.5), Tensor(-0.125), LossConfig(alpha=0.5, beta=1.0)
    )
    exact = float(total.data) == 0.25 + 0.5 * 0.5 + 1.0 * -0.125
    _report(
        3,
        dis_zero
        and abs(div_same - 1.0) <= 1e-9
        and abs(div_orth) <= 1e-12
        and abs(ln2 - np.log(2.0)) <= 1e-12
        and exact,
        f"dis(identical)={float(breakdown.dis):.1e}, div(same)={div_same:.12f}, "
        f"div(orth)={div_orth:.1e}, global(0)-ln2={ln2 - np.log(2.0):.1e}, "
        f"total exact={exact}",
    )


def test_criterion_4_trainer_identities(tmp_path):
    enc = EncoderConfig(image_size=16, patch_size=4, depth=2, heads=2, dim=8)
    cfg = TrainConfig(
        seed=0, steps=6, batch_size=2, encoder=enc,
        attr=AttributeConfig(hidden_dim=4, attributes=2),
        loss=LossConfig(fuse_layers=2),
    )
    rng = np.random.default_rng(1)
    samples = make_dataset(SceneSpec(image_size=16, max_objects=2, seed=1), 8)

    # m = 1 freezes, m = 0 copies, both exactly.
    state = init_train_state(cfg)
    frozen = state.ema.copy()
    for p in state.theta.values():
        p.data += rng.normal(size=p.data.shape)
    ema_update(state.theta, state.ema, 1.0)
    freeze_ok = all(
        np.array_equal(state.ema[n].data, frozen[n].data) for n in state.ema
    )
    ema_update(state.theta, state.ema, 0.0)
    copy_ok = all(
        np.array_equal(state.ema[n].data, state.theta[n].data) for n in state.ema
    )

    # EMA branch receives no gradients from a real training step.
    state = init_train_state(cfg)
    train_step(samples[:2], state)
    no_grads = all(t.grad is None for t in state.ema.values())

    # Interrupt + resume is bit-exact against the uninterrupted run.
    straight = tmp_path / "straight.bin"
    state_a = init_train_state(cfg)
    train(samples, cfg, state=state_a, checkpoint_path=straight)
    partial = tmp_path / "partial.bin"
    state_b = init_train_state(cfg)
    train(samples, cfg, state=state_b, checkpoint_path=partial, until=3)
    resumed_state = load_checkpoint(partial)
    resumed = tmp_path / "resumed.bin"
    train(samples, cfg, state=resumed_state, checkpoint_path=resumed)
    bit_exact = straight.read_bytes() == resumed.read_bytes()

    _report(
        4,
        freeze_ok and copy_ok and no_grads and bit_exact,
        f"m=1 no-op {freeze_ok}, m=0 copy {copy_ok}, "
        f"ema grads absent {no_grads}, resume bit-exact {bit_exact}",
    )


def test_criterion_5_overfit(full_runs):
    runs, elapsed = full_runs
    f1s = [r.extras["f1"] for r in runs]
    ok = all(f1 >= 0.95 for f1 in f1s) and elapsed < 20 * 60
    _report(
        5,
        ok,
        f"f1 per seed = {[f'{v:.4f}' for v in f1s]} (need >= 0.95 each), "
        f"3 runs took {elapsed / 60:.1f} min (budget 20)",
    )


def test_criterion_6_localization(full_runs, desk_samples):
    runs, _ = full_runs
    floor = random_mask_baseline(
        desk_samples, 3, np.random.default_rng(0)
    ).miou
    mious = [r.miou for r in runs]
    ok = all(m >= 2 * floor for m in mious)
    _report(
        6,
        ok,
        f"miou per seed = {[f'{v:.4f}' for v in mious]}, "
        f"random baseline = {floor:.4f} (need >= {2 * floor:.4f} each)",
    )


def test_criterion_7_loss_ablation_trend(full_runs, global_runs):
    full_mean = float(np.mean([r.miou for r in full_runs[0]]))
    global_mean = float(np.mean([r.miou for r in global_runs]))
    _report(
        7,
        full_mean > global_mean,
        f"mean miou: full = {full_mean:.4f}, global-only = {global_mean:.4f} "
        f"(need full > global)",
    )


def test_criterion_8_noise_robustness():
    spec = SceneSpec(image_size=32, max_objects=2, seed=7)
    samples = make_dataset(spec, 96)
    fractions = {"emha": [], "softmax": []}
    for attention in ("emha", "softmax"):
        for seed in NOISE_SEEDS:
            enc = EncoderConfig(
                image_size=32, patch_size=8, depth=2, heads=2, dim=32,
                attention=attention,
            )
            cfg = TrainConfig(
                seed=seed, steps=500, batch_size=16, encoder=enc,
                attr=AttributeConfig(hidden_dim=16, attributes=4),
                loss=LossConfig(fuse_layers=2),
            )
            state, _ = train(samples, cfg)
            clean = evaluate_model(
                state.theta, enc, cfg.attr, cfg.loss.fuse_layers, samples
            ).miou
            noisy = evaluate_model(
                state.theta, enc, cfg.attr, cfg.loss.fuse_layers, samples,
                noise_sigma=0.1, noise_seed=123,
            ).miou
            fractions[attention].append((clean - noisy) / clean if clean > 0 else 1.0)
    emha = np.array(fractions["emha"])
    soft = np.array(fractions["softmax"])
    _report(
        8,
        float(emha.mean()) < float(soft.mean()),
        f"degradation fraction emha = {emha.mean():.4f}+/-{emha.std():.4f}, "
        f"softmax = {soft.mean():.4f}+/-{soft.std():.4f} (need emha mean smaller)",
    )


def test_criterion_9_fused_layer_sweep(tmp_path, capsys):
    data_dir = tmp_path / "data"
    assert main(["gen", str(data_dir), "--count=48", "--image_size=32", "--max_objects=2"]) == 0
    out_dir = tmp_path / "sweep"
    code = main(
        [
            "ablate", str(data_dir), str(out_dir),
            "--variants=full", "--ablate.fuse_layers=1,2,3,4", "--seeds=0",
            "--steps=200", "--batch_size=8", "--image_size=32", "--patch_size=8",
            "--depth=4", "--heads=2", "--dim=32", "--hidden_dim=16",
            "--attr.attributes=4",
        ]
    )
    capsys.readouterr()
    rows = (out_dir / "ablate.csv").read_text().strip().splitlines()
    table = [dict(zip(rows[0].split(","), r.split(","))) for r in rows[1:]]
    ks = sorted(int(r["fuse_layers"]) for r in table)
    in_range = all(
        0.0 <= float(r[col]) <= 1.0
        for r in table
        for col in ("miou", "fp_rate", "fn_rate")
    )
    best = max(table, key=lambda r: float(r["miou"]))
    _report(
        9,
        code == 0 and ks == [1, 2, 3, 4] and in_range,
        f"complete table over K={ks}, all mIoU/FP/FN in [0,1]; "
        f"best K = {best['fuse_layers']} (paper reports K=3; reported, not asserted)",
    )
