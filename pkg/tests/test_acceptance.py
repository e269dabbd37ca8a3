"""Acceptance suite: one test per release criterion, each printing a verdict.

Run with `pytest tests/test_acceptance.py -v -s`. The end-to-end criteria
train a real model on the synthetic fine-grained dataset; the whole module
stays within a commodity-CPU time budget.
"""

import json
import math
import time
from pathlib import Path

import numpy as np
import pytest
import torch

import gradattn.training as training_mod
from gradattn.attention import ia_forward
from gradattn.config import RunConfig
from gradattn.data import (
    SyntheticSpec,
    generate_synthetic,
    load_image,
    load_synthetic_meta,
    map_bbox_through_eval,
    standard_augment,
)
from gradattn.model import GuidedNet, load_checkpoint
from gradattn.patch_shuffle import ShuffleSpec, destination_grid, make_pair, verify_pair
from gradattn.training import (
    batch_to_tensor,
    cross_entropy,
    evaluate,
    kd_loss,
    progressive_step,
    train,
)
from gradattn.visualize import normalize_heatmap, upsample

CONFIGS_DIR = Path(__file__).resolve().parent.parent / "configs"


def _verdict(num, ok, text):
    print(f"\nACCEPTANCE {num}: {'PASS' if ok else 'FAIL'} — {text}")
    assert ok, text


@pytest.fixture(scope="module")
def acceptance_dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("acceptance_synth")
    spec = SyntheticSpec(
        num_classes=4, image_size=64, motif_size=8,
        train_per_class=100, test_per_class=50, noise=0.05, seed=7,
    )
    manifest = generate_synthetic(spec, root)
    return root, spec, manifest


@pytest.fixture(scope="module")
def trained_model(acceptance_dataset, tmp_path_factory):
    """The criterion-6 training run, shared by criteria 6 and 7."""
    root, spec, manifest = acceptance_dataset
    out = tmp_path_factory.mktemp("acceptance_run")
    cfg = RunConfig(num_classes=4, epochs=30, seed=0)
    start = time.monotonic()
    result = train(manifest, cfg, out)
    elapsed = time.monotonic() - start
    model, _meta = load_checkpoint(out / "best.pt")
    return result, model, elapsed


def test_criterion_1_permutation_properties():
    start = time.monotonic()
    violations = 0
    combos = [(2, 1), (4, 1), (4, 2), (4, 3), (8, 1), (8, 4), (8, 7)]
    for n, k in combos:
        rng = np.random.default_rng(1000 + n * 10 + k)
        i_idx, j_idx = np.meshgrid(np.arange(n), np.arange(n), indexing="ij")
        cell_ids = np.arange(n * n)
        for _ in range(10_000):
            pair = make_pair(ShuffleSpec(n, k), rng)
            if not verify_pair(pair, k):
                violations += 1
                continue
            dest_row, dest_col = destination_grid(pair)
            flat = np.sort((dest_row * n + dest_col).ravel())
            if not np.array_equal(flat, cell_ids):
                violations += 1
            elif (
                np.abs(dest_row - i_idx).max() > 2 * k
                or np.abs(dest_col - j_idx).max() > 2 * k
            ):
                violations += 1
    elapsed = time.monotonic() - start
    _verdict(
        1,
        violations == 0 and elapsed < 60,
        f"70,000 shuffles, {violations} bijectivity/bound violations, {elapsed:.1f}s (< 60s)",
    )


def test_criterion_2_gradient_oracle():
    torch.manual_seed(0)
    net = torch.nn.Sequential(
        torch.nn.Conv2d(4, 6, 3, padding=1),
        torch.nn.Tanh(),
        torch.nn.Conv2d(6, 4, 3, padding=1),
        torch.nn.Tanh(),
        torch.nn.Flatten(0),
        torch.nn.Linear(36, 3),
    ).double()
    score = lambda t: net(t)
    f = torch.randn(4, 3, 3, dtype=torch.float64)
    target = 2
    leaf = f.clone().requires_grad_(True)
    (grad,) = torch.autograd.grad(score(leaf)[target], leaf)
    _, _, alpha = ia_forward(f, score, target)

    h = 1e-3
    fd_grad = torch.zeros_like(f)
    for ch in range(4):
        for i in range(3):
            for j in range(3):
                fp, fm = f.clone(), f.clone()
                fp[ch, i, j] += h
                fm[ch, i, j] -= h
                fd_grad[ch, i, j] = (score(fp)[target] - score(fm)[target]) / (2 * h)
    fd_alpha = fd_grad.mean(dim=(-2, -1))
    alpha_ok = torch.allclose(alpha, fd_alpha, rtol=1e-2)

    rng = np.random.default_rng(16)
    probes_ok = True
    for _ in range(16):
        ch, i, j = rng.integers(4), rng.integers(3), rng.integers(3)
        a, b = grad[ch, i, j].item(), fd_grad[ch, i, j].item()
        if abs(a - b) > 1e-2 * max(abs(a), abs(b), 1e-8):
            probes_ok = False
    _verdict(
        2,
        alpha_ok and probes_ok,
        "channel importances match central finite differences (rtol 1e-2, 16 probes)",
    )


def test_criterion_3_attention_algebra():
    g = torch.Generator().manual_seed(3)
    ok = True
    for _ in range(100):
        c, u = int(torch.randint(1, 8, (1,), generator=g)), int(torch.randint(2, 6, (1,), generator=g))
        f = torch.randn(c, u, u, generator=g)
        alpha = torch.randn(c, generator=g)
        weights = torch.softmax(alpha, -1)
        ok &= abs(weights.sum().item() - 1.0) < 1e-5
        from gradattn.attention import attention_enhance, attention_map

        a = attention_map(alpha, f)
        ok &= bool(torch.all(a >= f.min(dim=0).values - 1e-5))
        ok &= bool(torch.all(a <= f.max(dim=0).values + 1e-5))
        ok &= bool(torch.allclose(a, attention_map(alpha + 5.0, f), atol=1e-5))
        f_leaf = f.clone().requires_grad_(True)
        attention_enhance(f_leaf, a, alpha).sum().backward()
        expected = a.unsqueeze(0) * alpha[:, None, None]
        ok &= bool(torch.allclose(f_leaf.grad, expected, atol=1e-5))
        ok &= attention_enhance(f, a, alpha).shape == f.shape
    _verdict(3, ok, "softmax sum, convex-hull bound, shift invariance, stop-gradient identity x100")


def test_criterion_4_loss_oracles():
    rng = np.random.default_rng(4)
    ok = True
    for _ in range(100):
        raw = rng.uniform(0.01, 1.0, size=5)
        pred = raw / raw.sum()
        label = int(rng.integers(5))
        literal = -sum(
            (1.0 if c == label else 0.0) * math.log(pred[c]) for c in range(5)
        )
        ok &= abs(cross_entropy(pred, label) - literal) < 1e-6
    for c in (2, 4, 10):
        ok &= abs(cross_entropy([1 / c] * c, 0) - math.log(c)) < 1e-6
    logits = torch.randn(6)
    ok &= kd_loss(logits, logits.clone(), 4.0).item() < 1e-7
    _verdict(4, ok, "cross-entropy matches literal formula; uniform = ln C; KD(x, x) < 1e-7")


def test_criterion_5_algorithm_mechanics(acceptance_dataset, monkeypatch):
    _, _, manifest = acceptance_dataset
    cfg = RunConfig(num_classes=4)
    torch.manual_seed(0)
    model = GuidedNet(cfg)
    model.train()
    opt = torch.optim.SGD(model.parameters(), lr=0.001)
    updates = []
    original_step = opt.step
    opt.step = lambda: (updates.append(1), original_step())[1]
    x = torch.randn(4, 3, 64, 64)
    y = torch.tensor([0, 1, 2, 3])
    rng = np.random.default_rng(0)
    scales = [
        progressive_step(x, y, step, model, opt, cfg, rng, step_index=si).scale
        for si, step in enumerate(cfg.schedule)
    ]
    count = {"n": 0}
    real = training_mod.shuffle_batch

    def counting(batch, spec, r):
        count["n"] += 1
        return real(batch, spec, r)

    monkeypatch.setattr(training_mod, "shuffle_batch", counting)
    evaluate(model, manifest, cfg)
    _verdict(
        5,
        len(updates) == 4 and scales == [1, 2, 4, 8] and count["n"] == 0,
        f"4 updates per batch, scales {scales}, eval shuffle calls = {count['n']}",
    )


def test_criterion_6_end_to_end_training(trained_model):
    result, _model, elapsed = trained_model
    best = max(result.history, key=lambda r: r["acc_combined"])
    combined, concat = best["acc_combined"], best["acc_concat"]
    # stochastic-training sanity: supervised losses trend down over the first
    # 10 epochs (the KD term legitimately grows as the teacher sharpens)
    epoch_losses = [
        sum(r[f"step{i}_ce"] for i in range(4)) for r in result.history[:10]
    ]
    median_later = float(np.median(epoch_losses[1:]))
    _verdict(
        6,
        combined >= 0.90 and combined >= concat - 0.02
        and elapsed < 1200 and median_later < epoch_losses[0],
        f"combined acc {combined:.3f} (>= 0.90), concat {concat:.3f}, "
        f"{elapsed:.0f}s (< 1200s), median loss {median_later:.3f} < epoch-0 {epoch_losses[0]:.3f}",
    )


def test_criterion_7_attention_localization(acceptance_dataset, trained_model):
    root, spec, manifest = acceptance_dataset
    _result, model, _elapsed = trained_model
    meta = load_synthetic_meta(root)
    size = spec.image_size
    ratios = []
    for sample in manifest.test:
        rel = str(Path(sample.path).relative_to(root))
        view = standard_augment(
            load_image(sample.path), training=False,
            resize_to=manifest.resize_to, crop_to=manifest.crop_to,
        )
        out = model(batch_to_tensor([view]), use_attention=True)
        heat = normalize_heatmap(
            upsample(out.attention_s3[0].detach().numpy(), manifest.crop_to)
        )
        y0, x0, y1, x1 = map_bbox_through_eval(
            tuple(meta["motifs"][rel]), size, manifest.resize_to, manifest.crop_to
        )
        total = heat.sum()
        if total <= 0:
            continue
        frac = heat[y0:y1, x0:x1].sum() / total
        baseline = ((y1 - y0) * (x1 - x0)) / (manifest.crop_to ** 2)
        ratios.append(frac / baseline)
    mean_ratio = float(np.mean(ratios))
    _verdict(
        7,
        mean_ratio >= 3.0,
        f"stage-3 attention mass in motif box is {mean_ratio:.2f}x the uniform baseline (>= 3x)",
    )


def test_criterion_8_full_scale_config_parse_and_start():
    cfg = RunConfig.from_json(CONFIGS_DIR / "full_scale.json")
    recipe_ok = (
        cfg.backbone == "resnet50"
        and cfg.input_size == 448
        and cfg.resize_size == 512
        and cfg.batch_size == 10
        and cfg.epochs == 150
        and cfg.momentum == 0.9
        and cfg.weight_decay == 0.0005
        and [s.scale for s in cfg.schedule] == [1, 2, 4, 8]
    )
    torch.manual_seed(0)
    model = GuidedNet(cfg)
    model.eval()
    out = model(
        torch.randn(1, 3, 448, 448),
        use_attention=True,
        target_classes=torch.tensor([0]),
    )
    shapes_ok = all(
        out.logits(h).shape == (1, cfg.num_classes) for h in ("s3", "s4", "s5", "concat")
    )
    # benchmark-scale accuracies are explicitly out of scope; this validates
    # that the published recipe parses and a forward pass starts cleanly
    _verdict(8, recipe_ok and shapes_ok, "full-scale recipe parses and one forward pass runs")


def test_criterion_9_determinism(acceptance_dataset):
    _, _, manifest = acceptance_dataset
    cfg = RunConfig(num_classes=4, epochs=1, seed=123)
    runs = [train(manifest, cfg, None) for _ in range(2)]
    losses = [[(r.ce, r.kd, r.total) for r in run.loss_records] for run in runs]
    reports = []
    for run in runs:
        torch.manual_seed(cfg.seed)
        model = GuidedNet(cfg)
        reports.append(json.dumps(evaluate(model, manifest, cfg, collect_logits=True)))
    _verdict(
        9,
        losses[0] == losses[1] and runs[0].history == runs[1].history
        and reports[0] == reports[1],
        "identical seeds give identical epoch-0 losses and identical eval reports",
    )
