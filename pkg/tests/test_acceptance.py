"""Acceptance criteria 1-10, each reported as one PASS/FAIL line.

Criteria 3-8 read the artifacts of ``fusionbench reproduce fig2..fig5`` run
with the default configuration (see the ``pipeline_runs`` fixture).
"""

import time

import numpy as np
import pytest
from threadpoolctl import threadpool_limits

from fusionbench import tensor as T
from fusionbench.analysis import RobustnessCurve
from fusionbench.attacks import blur_region, fgsm, gaussian_kernel
from fusionbench.data import (
    dump_cfds,
    generate_synthetic_dataset,
    load_cfds,
    make_meta,
    parse_cifar10_batch,
    split,
)
from fusionbench.models import build_classifier, deserialize_params, serialize_params
from fusionbench.pipeline import read_kv
from fusionbench.training import TrainConfig, adversarial_retrain, train, train_regularized_joint
from oracles import GRAD_CASES, dense_blur, gradient_error, linear_softmax_input_grad

CHANCE = 1 / 8


@pytest.fixture
def verdict(announce):
    def report(n, title, ok, detail):
        announce(f"criterion {n:>2} {'PASS' if ok else 'FAIL'}  {title}: {detail}")
        assert ok, f"criterion {n} ({title}) failed: {detail}"

    return report


def _curve(root, mode, stem):
    return RobustnessCurve.from_csv((root / mode / f"{stem}.csv").read_text())


def _at(curve, name, g):
    return curve.rows[name][curve.grid.index(g)]


# -- 1 ---------------------------------------------------------------------------------


def test_criterion_01_gradient_suite(verdict):
    t0 = time.perf_counter()
    worst = {name: max(gradient_error(case, seed) for seed in range(20)) for name, case in GRAD_CASES.items()}
    elapsed = time.perf_counter() - t0
    name = max(worst, key=worst.get)
    ok = worst[name] <= 1e-4 and elapsed < 120 and len(worst) >= 9
    verdict(1, "gradient suite", ok,
            f"{len(worst)} primitives x 20 seeds, worst {worst[name]:.1e} ({name}), {elapsed:.1f}s")


# -- 2 ---------------------------------------------------------------------------------


class _LinearSoftmax:
    def __init__(self, W, b):
        self.W, self.b = W, b

    def __call__(self, x):
        return T.linear(T.flatten(x), T.Tensor(self.W, dtype=np.float64), T.Tensor(self.b, dtype=np.float64))


def test_criterion_02_attack_exactness(verdict):
    rng = np.random.default_rng(2)
    ksum = max(abs(gaussian_kernel(s).sum() - 1) for s in (0.5, 1, 5, 45))
    blur_err, outside_ok = 0.0, True
    for _ in range(10):
        img = rng.uniform(0, 1, (3, 14, 14)).astype(np.float32)
        h, w = rng.integers(1, 12, 2)
        r0, c0 = rng.integers(0, 14 - h + 1), rng.integers(0, 14 - w + 1)
        sigma = float(rng.choice([0.6, 1.0, 2.0, 4.5]))
        bbox = (r0, c0, h, w)
        out, ref = blur_region(img, bbox, sigma), dense_blur(img, bbox, sigma)
        mask = np.zeros(img.shape, bool)
        mask[:, r0 : r0 + h, c0 : c0 + w] = True
        blur_err = max(blur_err, float(np.abs(out[mask] - ref[mask]).max()))
        outside_ok &= out[~mask].tobytes() == img[~mask].tobytes()
    eta_excess, oracle_err = 0.0, 0.0
    for seed in range(20):
        r = np.random.default_rng(seed)
        x = np.clip(r.normal(size=(6, 3, 2, 2)), -1, 1)
        W, b = r.normal(size=(12, 5)), r.normal(size=5)
        t = np.eye(5)[r.integers(0, 5, 6)]
        eps = float(r.uniform(0, 1.5))
        with T.precision(np.float64):
            clamped = fgsm(_LinearSoftmax(W, b), x, t, eps, bounds=(-1.0, 1.0))
            free = fgsm(_LinearSoftmax(W, b), x, t, eps)
        eta_excess = max(eta_excess, float(np.abs(clamped.x_adv - x).max()) - eps, float(np.abs(free.eta).max()) - eps)
        g = linear_softmax_input_grad(x.reshape(6, -1), W, b, t).reshape(x.shape)
        oracle_err = max(oracle_err, float(np.abs(free.eta - eps * np.sign(g)).max()))
    ok = ksum <= 1e-6 and outside_ok and blur_err <= 1e-5 and eta_excess <= 1e-12 and oracle_err <= 1e-6
    verdict(2, "attack exactness", ok,
            f"kernel sum err {ksum:.1e}, blur err {blur_err:.1e}, outside identical {outside_ok}, "
            f"max|eta|-eps {eta_excess:.1e}, FGSM oracle err {oracle_err:.1e}")


# -- 3-8: trained pipeline ---------------------------------------------------------------


def test_criterion_03_feature_shift(pipeline_runs, verdict):
    kv = read_kv(pipeline_runs / "dissimilar" / "shift.txt")
    fg, bg = float(kv["fg.score"]), float(kv["bg.score"])
    verdict(3, "blur shifts foreground features", fg >= 2 * bg,
            f"sigma=5 shift fg {fg:.3f} vs bg {bg:.3f}, ratio {fg / bg:.2f} (need >= 2)")


def test_criterion_04_blur_fusion_benefit(pipeline_runs, verdict):
    gaps = {}
    for mode in ("dissimilar", "similar"):
        c = _curve(pipeline_runs, mode, "curve_blur")
        gaps[mode] = np.subtract(c.rows["joint"], c.rows["foreground"])
    d, s = gaps["dissimilar"], gaps["similar"]
    grid = _curve(pipeline_runs, "dissimilar", "curve_blur").grid
    ok = d.max() >= 0.05 and d.max() > s.max()
    verdict(4, "blur fusion benefit", ok,
            f"peak joint-fg gap {d.max():.3f} at sigma={grid[int(d.argmax())]:g} (dissimilar) vs {s.max():.3f} (similar)")


def test_criterion_05_clean_performance(pipeline_runs, verdict):
    worst, parts = 1.0, []
    for mode in ("dissimilar", "similar", "uniform"):
        for stem in ("curve_blur", "curve_fgsm"):
            p = pipeline_runs / mode / f"{stem}.csv"
            if not p.exists():
                continue
            c = RobustnessCurve.from_csv(p.read_text())
            margin = c.rows["joint"][0] - (c.rows["foreground"][0] - 0.01)
            worst = min(worst, margin)
            parts.append(f"{mode}/{c.kind}: joint {c.rows['joint'][0]:.3f} fg {c.rows['foreground'][0]:.3f}")
    ok = worst >= 0 and len(parts) >= 3
    verdict(5, "clean performance preserved", ok, "; ".join(parts[:3]))


def test_criterion_06_transfer(pipeline_runs, verdict):
    c = _curve(pipeline_runs, "dissimilar", "curve_fgsm")
    mid = c.grid[len(c.grid) // 2]
    fg_mid, bg_mid = _at(c, "foreground", mid), _at(c, "background", mid)
    fg_last = c.rows["foreground"][-1]
    ok = bg_mid >= fg_mid + 0.10 and fg_last <= CHANCE + 0.10 and c.source == "foreground"
    verdict(6, "transfer from foreground", ok,
            f"eps={mid:g}: bg {bg_mid:.3f} vs fg {fg_mid:.3f}; eps={c.grid[-1]:g}: fg {fg_last:.3f} (chance {CHANCE:.3f})")


def test_criterion_07_weight_balance(pipeline_runs, verdict):
    d = read_kv(pipeline_runs / "dissimilar" / "weights.txt")
    u = read_kv(pipeline_runs / "uniform" / "weights.txt")
    dfg, dbg = float(d["joint.avg_abs_fg"]), float(d["joint.avg_abs_bg"])
    ufg, ubg = float(u["joint.avg_abs_fg"]), float(u["joint.avg_abs_bg"])
    ok = max(dfg, dbg) <= 2 * min(dfg, dbg) and ufg > ubg
    verdict(7, "joint weight balance", ok,
            f"dissimilar fg {dfg:.4f} / bg {dbg:.4f} (ratio {dfg / dbg:.2f}); uniform fg {ufg:.4f} > bg {ubg:.4f}")


def test_criterion_08_regularization(pipeline_runs, verdict):
    w = read_kv(pipeline_runs / "dissimilar" / "weights.txt")
    alphas = (0.1, 1, 10)
    fg = [float(w[f"joint_alpha{a:g}.avg_abs_fg"]) for a in alphas]
    c = _curve(pipeline_runs, "dissimilar", "curve_fgsm")
    wb = _curve(pipeline_runs, "dissimilar", "curve_fgsm_whitebox")
    a10_last, bg_last = c.rows["joint_alpha10"][-1], c.rows["background"][-1]
    a10_clean, a01_clean = c.rows["joint_alpha10"][0], c.rows["joint_alpha0.1"][0]
    adv_last = wb.rows["foreground_adv"][-1]
    ok = (fg[0] > fg[1] > fg[2] and abs(a10_last - bg_last) <= 0.05
          and abs(a10_clean - a01_clean) <= 0.05 and a10_last >= adv_last)
    verdict(8, "foreground penalty", ok,
            f"avg|theta_fg| {fg[0]:.2e} > {fg[1]:.2e} > {fg[2]:.2e}; eps={c.grid[-1]:g}: alpha10 {a10_last:.3f}, "
            f"bg {bg_last:.3f}, retrained fg {adv_last:.3f}; clean alpha10 {a10_clean:.3f} vs alpha0.1 {a01_clean:.3f}")


# -- 9 ---------------------------------------------------------------------------------


def test_criterion_09_data_paths(tiny_arch, verdict):
    rng = np.random.default_rng(9)
    px = rng.integers(0, 256, (2, 3072), dtype=np.uint8)
    recs = parse_cifar10_batch(bytes([6]) + px[0].tobytes() + bytes([2]) + px[1].tobytes())
    cifar_ok = [r[0] for r in recs] == [6, 2] and all(
        np.array_equal(img.ravel(), p.astype(np.float32) / np.float32(255)) for (_, img), p in zip(recs, px))
    meta = make_meta(24, "dissimilar", size=16)
    ds = generate_synthetic_dataset(meta, 1, seed=0)
    big = ds.subset(np.resize(np.arange(24), 7500))
    tr, te = split(big, 0.75, seed=0)
    sizes = (len(tr), len(te))
    small = generate_synthetic_dataset(make_meta(4, size=16), 5, seed=1)
    blob = dump_cfds(small)
    cfds_ok = dump_cfds(load_cfds(blob)) == blob
    ck = serialize_params(build_classifier("joint", tiny_arch, 4, seed=3))
    ck_ok = serialize_params(deserialize_params(ck)) == ck
    ok = cifar_ok and sizes == (5625, 1875) and cfds_ok and ck_ok
    verdict(9, "data paths", ok, f"CIFAR fixture exact {cifar_ok}, split {sizes[0]}/{sizes[1]}, "
            f"CFDS roundtrip {cfds_ok}, checkpoint roundtrip {ck_ok}")


# -- 10 --------------------------------------------------------------------------------


def test_criterion_10_reductions(tiny_arch, tiny_data, verdict):
    tr, _ = tiny_data

    def params(c):
        return b"".join(a.tobytes() for _, a in c.named_arrays())

    head = TrainConfig(epochs=3, batch_size=8)
    full = TrainConfig(epochs=2, batch_size=8, mode="full", lr=0.01)
    with threadpool_limits(1):
        plain_joint = params(train(build_classifier("joint", tiny_arch, 4, seed=5), tr, head)[0])
        reg = params(train_regularized_joint(build_classifier("joint", tiny_arch, 4, seed=5), tr, head, 0.0)[0])
        adv_head = params(adversarial_retrain(build_classifier("joint", tiny_arch, 4, seed=5), tr, 0.0, head)[0])
        plain_fg = params(train(build_classifier("foreground", tiny_arch, 4, seed=5), tr, full)[0])
        adv_full = params(adversarial_retrain(build_classifier("foreground", tiny_arch, 4, seed=5), tr, 0.0, full)[0])
    checks = {"alpha=0": reg == plain_joint, "eps=0 head-only": adv_head == plain_joint, "eps=0 full": adv_full == plain_fg}
    verdict(10, "reductions bit-for-bit", all(checks.values()), ", ".join(f"{k} {v}" for k, v in checks.items()))
