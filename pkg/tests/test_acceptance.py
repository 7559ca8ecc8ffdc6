"""Acceptance criteria 1-11, each checked at its stated tolerance.

Every criterion appends one ``criterion N: PASS|FAIL|REPORT ...`` line to
``RESULTS``; conftest prints them in the terminal summary. The training
criteria (6-9) share one cache of runs on the reference dataset, so the
slow part of this module is roughly twelve 30-epoch runs plus two 20-epoch
runs.
"""
from __future__ import annotations

import math
import time

import numpy as np
import pytest

import gradcheck_suite
from dualteacher import checkpoint
from dualteacher.augment import AugKind, classmix, cutmix, mixup, one_hot, sample_epoch_aug
from dualteacher.config import TrainConfig
from dualteacher.data import ShapeGenConfig, generate
from dualteacher.engine import Trainer, TrainData, evaluate
from dualteacher.model import DecayRule, ModelConfig, forward, init_model, sample_depth_mask
from dualteacher.teachers import TeacherBank, active_teacher, alpha_at, ema_update
from dualteacher.tensor import ParamSet, Tensor

RESULTS: list[str] = []

SEEDS = (0, 1, 2)
EPOCHS = 30
DISTANCE_EPOCHS = 20
RUN_BUDGET_S = 15 * 60


def report(n: int, status: str, detail: str) -> None:
    line = f"criterion {n:>2}: {status:<6} {detail}"
    RESULTS.append(line)
    print(line)


def verdict(n: int, ok: bool, detail: str) -> None:
    report(n, "PASS" if ok else "FAIL", detail)
    assert ok, detail


def directional(n: int, name: str, better: float, worse: float) -> None:
    """Report-only below a 0.5-point gap; fail only if the order reverses by more than 1 point."""
    gap = 100 * (better - worse)
    detail = f"{name}: {100 * better:.2f} vs {100 * worse:.2f} (gap {gap:+.2f} points)"
    if gap <= -1.0:
        verdict(n, False, detail)
    elif abs(gap) < 0.5 or gap < 0:
        report(n, "REPORT", detail)
    else:
        verdict(n, True, detail)


# ---------------------------------------------------------------- 1-5: properties

def test_criterion_01_gradient_suite():
    start = time.perf_counter()
    worst = {name: gradcheck_suite.worst_error(name) for name in sorted(gradcheck_suite.INSTANCES)}
    elapsed = time.perf_counter() - start
    name, err = max(worst.items(), key=lambda kv: kv[1])
    verdict(1, err < 1e-3 and elapsed < 60,
            f"{len(worst)} ops x {gradcheck_suite.N_INSTANCES} instances, worst rel. error {err:.2e} ({name}), "
            f"{elapsed:.1f}s")


def test_criterion_02_ema_closed_form():
    rng = np.random.default_rng(0)
    teacher, student = ParamSet(), ParamSet()
    theta0 = rng.standard_normal((3, 4))
    c = rng.standard_normal((3, 4))
    teacher["w"], student["w"] = Tensor(theta0.copy()), Tensor(c)
    for _ in range(50):
        ema_update(teacher, student, 0.9)
    expected = 0.9 ** 50 * theta0 + (1 - 0.9 ** 50) * c
    err = float(np.max(np.abs(teacher["w"].data - expected)))

    init = init_model(ModelConfig(num_classes=4), 0)
    bank = TeacherBank(init, 2, alpha_max=0.99)
    moved = init_model(ModelConfig(num_classes=4), 1)
    first_alpha = bank.update(0, moved)
    copied = checkpoint.dumps(bank.teachers[0]) == checkpoint.dumps(moved)
    verdict(2, err < 1e-10 and alpha_at(0) == 0.0 and first_alpha == 0.0 and copied,
            f"max |EMA - closed form| = {err:.1e} after 50 updates; first update copies bit-exactly: {copied}")


def test_criterion_03_schedule_invariants():
    rng = np.random.default_rng(0)
    ok_active = all(TeacherBank(init_model(ModelConfig(2, hidden_channels=1, num_blocks=1), 0), t).active(e)
                    == active_teacher(e, t) == e % t for t in (1, 2, 3) for e in range(1000))
    ok_aug = True
    for pool in ((AugKind.CUTMIX, AugKind.CLASSMIX), tuple(AugKind)):
        prev = None
        for _ in range(1000):
            kind = sample_epoch_aug(pool, prev, rng)
            ok_aug &= kind != prev
            prev = kind
    ok_frozen = True
    for t_n in (2, 3):
        student = init_model(ModelConfig(2, hidden_channels=2, num_blocks=1), 0)
        bank = TeacherBank(student, t_n, alpha_max=0.9)
        before = [checkpoint.dumps(t) for t in bank.teachers]
        for e in range(1000):
            for _ in range(2):
                for p in student.values():
                    p.data = p.data + rng.standard_normal(p.shape).astype(p.dtype) * 0.01
                bank.update(bank.active(e), student)
            after = [checkpoint.dumps(t) for t in bank.teachers]
            for k in range(t_n):
                ok_frozen &= (after[k] == before[k]) == (k != e % t_n)
            before = after
    verdict(3, ok_active and ok_aug and ok_frozen,
            f"1000 epochs: active = e mod t_n {ok_active}; no augmentation repeat {ok_aug}; "
            f"inactive teachers byte-identical {ok_frozen}")


def is_single_rectangle(mask: np.ndarray) -> bool:
    rows, cols = np.flatnonzero(mask.any(1)), np.flatnonzero(mask.any(0))
    if rows.size == 0:
        return True
    block = mask[rows[0]:rows[-1] + 1, cols[0]:cols[-1] + 1]
    return bool(block.all()) and block.sum() == mask.sum()


def test_criterion_04_mixing_geometry():
    rng = np.random.default_rng(4)
    draws = bad_rect = bad_area = 0
    while draws < 10_000:
        h, w = (int(v) for v in rng.integers(4, 65, size=2))
        imgs = rng.random((2, 3, h, w)).astype(np.float32)
        lbls = rng.integers(0, 4, size=(2, h, w))
        out = cutmix(imgs, lbls, rng)
        for m, lam in zip(out.masks.astype(bool), out.lam):
            r = math.sqrt(1 - lam)
            bad_rect += not is_single_rectangle(m)
            bad_area += int(m.sum()) != math.floor(r * h) * math.floor(r * w)
            draws += 1

    bad_pixels = 0
    for seed in range(20):
        r = np.random.default_rng(seed)
        imgs, lbls = r.random((4, 3, 8, 8)).astype(np.float32), r.integers(0, 4, size=(4, 8, 8))
        out = classmix(imgs, lbls, r)
        for i in range(4):
            for y in range(8):
                for x in range(8):
                    src = out.donors[i] if out.masks[i, y, x] else i
                    bad_pixels += out.labels[i, y, x] != lbls[src, y, x]
                    bad_pixels += not np.array_equal(out.images[i, :, y, x], imgs[src, :, y, x])

    mass_err = 0.0
    for seed in range(200):
        r = np.random.default_rng(seed)
        imgs, lbls = r.random((4, 3, 8, 8)).astype(np.float32), r.integers(0, 4, size=(4, 8, 8))
        out = mixup(imgs, one_hot(lbls, 4), r)
        mass_err = max(mass_err, float(np.max(np.abs(out.soft_labels.sum(axis=1) - 1))))
    verdict(4, bad_rect == 0 and bad_area == 0 and bad_pixels == 0 and mass_err < 1e-6,
            f"CutMix {draws} draws: {bad_rect} non-rectangles, {bad_area} area mismatches; "
            f"ClassMix 8x8 oracle mismatches {bad_pixels}; MixUp max |mass - 1| {mass_err:.1e}")


def test_criterion_05_stochastic_depth():
    cfg = ModelConfig(num_classes=4)
    params = init_model(cfg, 0)
    x = np.random.default_rng(0).random((2, 3, 16, 16)).astype(np.float32)
    rng = np.random.default_rng(5)
    mask = sample_depth_mask(DecayRule(0.0), cfg.num_blocks, rng)
    exact = np.array_equal(forward(params, x, mask).data, forward(params, x).data)
    n = 10_000
    within = {}
    for rule in (DecayRule(0.1, "uniform"), DecayRule(0.4, "linear")):
        drops = np.array([[not k for k in sample_depth_mask(rule, cfg.num_blocks, rng)] for _ in range(n)])
        p = rule.drop_probs(cfg.num_blocks)
        z = np.abs(drops.mean(axis=0) - p) / np.sqrt(p * (1 - p) / n)
        within[f"{rule.kind}({rule.rate})"] = float(z.max())
    verdict(5, exact and all(z < 3 for z in within.values()),
            f"tau=0 bit-exact {exact}; worst per-block |z| "
            + ", ".join(f"{k} {v:.2f}" for k, v in within.items()))


# ---------------------------------------------------------------- 6-11: training runs

@pytest.fixture(scope="module")
def reference_data(tmp_path_factory):
    root = tmp_path_factory.mktemp("reference")
    generate(ShapeGenConfig(n_samples=256, n_val=64, seed=0), root, fraction=1 / 8)
    data = TrainData.from_disk(root)
    assert (len(data.labeled_images), len(data.unlabeled_images), len(data.val_images)) == (32, 224, 64)
    return root, data


def reference_config(root, **kw) -> TrainConfig:
    settings = dict(data_dir=str(root), epochs=EPOCHS, hidden_channels=16, num_blocks=4, save_checkpoints=False)
    return TrainConfig(**{**settings, **kw})


class RunCache:
    def __init__(self, root, data):
        self.root, self.data = root, data
        self.logs: dict = {}
        self.seconds: dict = {}

    def run(self, mode: str, seed: int, epochs: int = EPOCHS):
        key = (mode, seed, epochs)
        if key not in self.logs:
            start = time.perf_counter()
            self.logs[key] = Trainer(reference_config(self.root, mode=mode, seed=seed, epochs=epochs),
                                     self.data).run()
            self.seconds[key] = time.perf_counter() - start
        return self.logs[key]

    def mean_final(self, mode: str) -> float:
        return float(np.mean([self.run(mode, s).final_miou for s in SEEDS]))

    def slowest(self, modes) -> float:
        return max(self.seconds[(m, s, EPOCHS)] for m in modes for s in SEEDS)


@pytest.fixture(scope="module")
def runs(reference_data):
    return RunCache(*reference_data)


def test_criterion_06_dual_beats_supervised(runs):
    dual, sup = runs.mean_final("dual"), runs.mean_final("supervised_only")
    slowest = runs.slowest(("dual", "supervised_only"))
    gap = 100 * (dual - sup)
    verdict(6, gap >= 3.0 and slowest < RUN_BUDGET_S,
            f"dual {100 * dual:.2f} vs supervised_only {100 * sup:.2f} mIoU over seeds {SEEDS} "
            f"(gap {gap:+.2f}, need >= +3.00); slowest run {slowest:.0f}s")


def test_criterion_07_dual_vs_single_teacher(runs):
    directional(7, "dual(Aug×2) vs single(Aug×2)", runs.mean_final("dual"), runs.mean_final("single"))


def test_criterion_08_prediction_distance_windows(runs):
    windows = {m: runs.run(m, 0, DISTANCE_EPOCHS).distance_windows(5) for m in ("dual", "single")}
    rows = [(a, b, d, s) for (a, b, d, _), (_, _, s, _) in zip(windows["dual"], windows["single"])]
    ok = len(rows) == 4 and all(d > s for *_, d, s in rows)
    verdict(8, ok, "dual vs single mean distance per window: "
            + "; ".join(f"{a}-{b} {d:.5f} vs {s:.5f}" for a, b, d, s in rows))


def test_criterion_09_switching_vs_ensembling(runs):
    directional(9, "switching vs ensembling", runs.mean_final("dual"), runs.mean_final("ensemble"))


def test_criterion_10_mode_equivalence(reference_data):
    root, data = reference_data
    trajectories = []
    for cfg in (reference_config(root, mode="supervised_only", seed=0),
                reference_config(root, mode="dual", seed=0, lambda_u=0.0, lambda_c=0.0)):
        tr = Trainer(cfg, data)
        states = []
        for e in range(2):
            tr.run_epoch(e)
            states.append(checkpoint.dumps(tr.student))
        trajectories.append(states)
    same = trajectories[0] == trajectories[1]
    verdict(10, same, f"student parameters after epochs 1 and 2 bit-identical: {same}")


def test_criterion_11_determinism(reference_data, tmp_path):
    root, data = reference_data
    for name in ("a", "b"):
        cfg = reference_config(root, mode="dual", seed=3, epochs=2).with_overrides(
            save_checkpoints=True, run_dir=str(tmp_path / name))
        Trainer(cfg, data, tmp_path / name).run()
    # config.txt records run_dir, which necessarily differs
    files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*")
                   if p.is_file() and p.name != "config.txt")
    identical = all((tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes() for f in files)
    n_ckpt = sum(1 for f in files if f.suffix == ".dtck")
    verdict(11, identical and n_ckpt > 0 and any(f.name == "runlog.csv" for f in files),
            f"{len(files)} files ({n_ckpt} checkpoints) byte-identical across two runs: {identical}")


def test_teacher_tracks_a_converged_supervised_student(reference_data):
    """Coupling sanity: with unlabeled losses off, the EMA teacher ends within 2 points of its student."""
    root, data = reference_data
    tr = Trainer(reference_config(root, mode="single", seed=0, lambda_u=0.0, lambda_c=0.0), data)
    tr.run()
    student = evaluate(tr.student, data.val_images, data.val_masks, data.num_classes)[0]
    teacher = evaluate(tr.bank.teachers[0], data.val_images, data.val_masks, data.num_classes)[0]
    print(f"coupling: student {100 * student:.2f} vs teacher {100 * teacher:.2f} mIoU")
    assert abs(student - teacher) < 0.02
