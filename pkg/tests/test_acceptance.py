"""End-to-end acceptance checks. Each test prints one pass/fail line."""

import csv
import json
import time
import warnings

import numpy as np
import pytest

from nted import autodiff as ad
from nted import bench, synth
from nted import tensor_core as tc
from nted.appearance import fuse_textures, optimize_masks
from nted.cli import main
from nted.kernel import (
    FeatureMap,
    Projection,
    distribute,
    distribution_correlation,
    extract,
    extraction_correlation,
    materialize_deformation,
    nted_warp,
)
from nted.losses import (
    LossWeights,
    attn_reconstruction,
    masked_rec_losses,
    pixel_pyramid_rec,
    regu_loss,
)
from nted.renderer import RendererConfig, forward, init_params
from nted.training import compute_losses, load_checkpoint

SEEDS = range(10)


def random_instance(rng, max_hw=256, max_k=16, max_c=32):
    h, w = int(rng.integers(1, 17)), int(rng.integers(1, 17))
    while h * w > max_hw or h * w < 2:
        h, w = int(rng.integers(1, 17)), int(rng.integers(1, 17))
    k, c = int(rng.integers(1, max_k + 1)), int(rng.integers(1, max_c + 1))
    n = h * w
    scale = rng.uniform(0.1, 3.0)
    return (
        FeatureMap(h, w, rng.normal(size=(n, c)) * scale),
        FeatureMap(h, w, rng.normal(size=(n, c)) * scale),
        rng.normal(size=(k, c)),
        rng.normal(size=(k, c)),
        Projection(rng.normal(size=(c, c)) / np.sqrt(c), rng.normal(size=c)),
    )


# ---------------------------------------------------------------------------
# 1. oracle equivalence


def test_criterion_1_factored_warp_matches_materialized(record_criterion):
    rng = np.random.default_rng(1)
    start = time.perf_counter()
    worst = 0.0
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")  # k > hw is allowed here
        for _ in range(50):
            tgt, ref, w_e, w_d, proj = random_instance(rng)
            textures, c_e = extract(ref, w_e, proj)
            out, c_d = distribute(tgt, w_d, textures)
            dense = materialize_deformation(c_e, c_d) @ proj(ref.values.copy())
            warped = nted_warp(FeatureMap(ref.h, ref.w, proj(ref.values.copy())), c_e, c_d).values
            worst = max(worst, np.abs(out.values - dense).max(), np.abs(warped - dense).max())
    elapsed = time.perf_counter() - start
    ok = worst <= 1e-10 and elapsed < 10
    assert record_criterion(1, "factored vs materialized warp", ok, f"max err {worst:.2e}, {elapsed:.2f}s")


# ---------------------------------------------------------------------------
# 2. stochasticity


def test_criterion_2_stochasticity(record_criterion):
    rng = np.random.default_rng(2)
    row_err = col_err = def_err = 0.0
    rank_ok = True
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        for _ in range(100):
            tgt, ref, w_e, w_d, _ = random_instance(rng)
            c_e = extraction_correlation(ref, w_e)
            c_d = distribution_correlation(tgt, w_d)
            d = materialize_deformation(c_e, c_d)
            row_err = max(row_err, np.abs(c_e.sum(axis=1) - 1).max())
            col_err = max(col_err, np.abs(c_d.sum(axis=0) - 1).max())
            def_err = max(def_err, np.abs(d.sum(axis=1) - 1).max())
            rank_ok &= np.linalg.matrix_rank(d) <= w_e.shape[0]
    ok = row_err <= 1e-12 and col_err <= 1e-12 and def_err <= 1e-10 and rank_ok
    detail = f"C_e rows {row_err:.1e}, C_d cols {col_err:.1e}, deformation rows {def_err:.1e}, rank<=k {rank_ok}"
    assert record_criterion(2, "stochasticity suite", ok, detail)


# ---------------------------------------------------------------------------
# 3. gradients


def _weights(rng, shape):
    return rng.normal(size=shape)


def grad_cases():
    """(name, builder) pairs; each builder maps a seed to ``(f, inputs, step)``."""

    def extract_case(seed):
        rng = np.random.default_rng(seed)
        fr, we, wf, bf = rng.normal(size=(6, 3)), rng.normal(size=(2, 3)), rng.normal(size=(3, 3)), rng.normal(size=3)
        w = _weights(rng, (2, 3))

        def f(fr, we, wf, bf):
            tex, _ = extract(FeatureMap(2, 3, fr), we, Projection(wf, bf))
            return ad.total(ad.mul(tex, w))

        return f, [fr, we, wf, bf], 1e-6

    def distribute_case(seed):
        rng = np.random.default_rng(seed)
        ft, wd, tex = rng.normal(size=(5, 3)), rng.normal(size=(4, 3)), rng.normal(size=(4, 3))
        w = _weights(rng, (5, 3))

        def f(ft, wd, tex):
            out, _ = distribute(FeatureMap(1, 5, ft), wd, tex)
            return ad.total(ad.mul(out.values, w))

        return f, [ft, wd, tex], 1e-6

    def warp_case(seed):
        rng = np.random.default_rng(seed)
        v, le, ld = rng.normal(size=(6, 2)), rng.normal(size=(3, 6)), rng.normal(size=(3, 4))
        w = _weights(rng, (4, 2))

        def f(v, le, ld):
            out = nted_warp(FeatureMap(2, 3, v), ad.softmax(le, -1), ad.softmax(ld, -2))
            return ad.total(ad.mul(out.values, w))

        return f, [v, le, ld], 1e-6

    def attn_case(seed):
        rng = np.random.default_rng(seed)
        ft, fr = rng.normal(size=(1, 4, 3)), rng.normal(size=(1, 4, 3))
        we, wd = rng.normal(size=(2, 3)), rng.normal(size=(2, 3))
        tgt, ref = rng.random((1, 2, 2, 3)), rng.random((1, 2, 2, 3))

        def f(we, wd, fr, ft):
            c_e = extraction_correlation(FeatureMap(2, 2, fr), we)
            c_d = distribution_correlation(FeatureMap(2, 2, ft), wd)
            return attn_reconstruction([tgt], [ref], [(c_e, c_d)])

        return f, [we, wd, fr, ft], 1e-6

    def pyramid_case(seed):
        rng = np.random.default_rng(seed)
        truth = rng.random((1, 8, 8, 3))
        return (lambda x: pixel_pyramid_rec(x, truth, 3)), [rng.random((1, 8, 8, 3))], 1e-6

    def regu_case(seed):
        rng = np.random.default_rng(seed)
        sels = [(rng.random(4) > 0.5).astype(float) for _ in range(2)]
        comps = [(rng.random(4) > 0.5).astype(float) for _ in range(2)]

        def f(z1, z2):
            return regu_loss(sels, comps, [ad.sigmoid(z1), ad.sigmoid(z2)])

        return f, [rng.normal(size=4), rng.normal(size=4)], 1e-6

    def masked_case(seed):
        rng = np.random.default_rng(seed)
        r1, r2 = rng.random((1, 8, 8, 3)), rng.random((1, 8, 8, 3))
        masks = tuple((rng.random((8, 8)) > 0.5).astype(float) for _ in range(3))
        a, b = rng.normal(size=2)

        def f(x):
            l1, l2 = masked_rec_losses(x, r1, r2, masks, levels=3)
            return ad.add(ad.mul(l1, a), ad.mul(l2, b))

        return f, [rng.random((1, 8, 8, 3))], 1e-6

    micro = RendererConfig(resolution=8, scales=(2, 4), semantics=(2, 3), channels=(3, 2), keypoints=2)

    def renderer_case(seed):
        rng = np.random.default_rng(seed)
        p = init_params(micro, rng)
        names = sorted(p)
        ref_image, heatmaps = rng.random((1, 8, 8, 3)), rng.random((1, 8, 8, 2))
        # a target strictly below the initial render keeps pixel residuals away from the L1 kink
        pred = forward(p, ref_image, heatmaps, micro).image.value
        batch = {
            "ref_image": ref_image,
            "tgt_image": pred - 0.1 - 0.2 * rng.random(pred.shape),
            "tgt_heatmaps": heatmaps,
        }

        def f(*vals):
            return compute_losses(dict(zip(names, vals)), batch, micro, LossWeights())[0]

        # some parameter gradients are ~1e-6 against an O(1) loss; a 1e-6 step is roundoff-bound
        return f, [p[n] for n in names], 1e-4

    return [
        ("extract", extract_case),
        ("distribute", distribute_case),
        ("nted_warp", warp_case),
        ("L_attn", attn_case),
        ("pixel_pyramid_rec", pyramid_case),
        ("regu_loss", regu_case),
        ("masked losses", masked_case),
        ("renderer micro-config", renderer_case),
    ]


def test_criterion_3_gradient_suite(record_criterion):
    start = time.perf_counter()
    failures = []
    worst = 0.0
    for name, build in grad_cases():
        for seed in SEEDS:
            f, inputs, step = build(seed)
            report = ad.grad_check(f, inputs, step=step, tolerance=1e-5)
            worst = max(worst, max(report.max_rel_errors))
            if not report.passed:
                failures.append(f"{name}[{seed}]={max(report.max_rel_errors):.1e}")
    elapsed = time.perf_counter() - start
    ok = not failures and elapsed < 120
    detail = f"8 targets x {len(SEEDS)} seeds, worst rel err {worst:.1e}, {elapsed:.1f}s"
    if failures:
        detail += ", failing " + ", ".join(failures)
    assert record_criterion(3, "gradient suite", ok, detail)


# ---------------------------------------------------------------------------
# 4. complexity


def test_criterion_4_complexity(record_criterion):
    start = time.perf_counter()
    with tc.limit_threads(1):
        rows = bench.run_grid((256, 1024, 4096), c=64, k=32, seed=0, dtype=tc.F32, reps=5, warmup=2)
    elapsed = time.perf_counter() - start
    counts_ok = all(r.counts_match for r in rows)
    nted_growth = [b.nted_time / a.nted_time for a, b in zip(rows, rows[1:])]
    van_growth = [b.vanilla_time / a.vanilla_time for a, b in zip(rows, rows[1:])]
    ok = (
        counts_ok
        and all(3 <= g <= 6 for g in nted_growth)
        and all(10 <= g <= 24 for g in van_growth)
        and elapsed < 60
    )
    detail = (
        f"counts exact {counts_ok}, NTED growth {[round(g, 2) for g in nted_growth]}, "
        f"vanilla growth {[round(g, 2) for g in van_growth]}, {elapsed:.1f}s"
    )
    assert record_criterion(4, "complexity", ok, detail)


# ---------------------------------------------------------------------------
# 5. desk training (shared with 6)


@pytest.fixture(scope="session")
def desk_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("desk")
    assert main(["synth", "--seed", "0", "--out", str(root / "data")]) == 0
    (root / "train.json").write_text(json.dumps({"manifest": "data/manifest.json"}))
    start = time.perf_counter()
    code = main(["train", "--config", str(root / "train.json"), "--seed", "0",
                 "--out", str(root / "run"), "--threads", "1"])
    elapsed = time.perf_counter() - start
    assert code == 0
    summary = json.loads((root / "run" / "train_summary.json").read_text())
    return {"root": root, "summary": summary, "train_seconds": elapsed}


@pytest.mark.slow
def test_criterion_5_desk_training(desk_run, record_criterion):
    s = desk_run["summary"]
    init, final = s["test_init"], s["test_final"]
    ratio = final["pixel_l1"] / final["identity_l1"]
    attn_ratio = final["l_attn"] / init["l_attn"]
    minutes = desk_run["train_seconds"] / 60
    ok = ratio <= 0.5 and attn_ratio <= 0.5 and minutes <= 10
    detail = (
        f"pixel L1 {final['pixel_l1']:.4f} vs identity {final['identity_l1']:.4f} (ratio {ratio:.2f}), "
        f"L_attn {init['l_attn']:.4f} -> {final['l_attn']:.4f} (ratio {attn_ratio:.2f}), {minutes:.1f} min"
    )
    assert record_criterion(5, "desk training", ok, detail)


# ---------------------------------------------------------------------------
# 6. appearance control


def _edit_inputs(desk_run):
    manifest = synth.load_manifest(desk_run["root"] / "data" / "manifest.json")
    s1, s2, s3 = manifest["test_seeds"][:3]
    ref1 = synth.generate_pair(s1).reference
    ref2 = synth.generate_pair(s2).reference
    target = synth.generate_pair(s3).target
    return (s1, s2, s3), ref1, ref2, target


@pytest.mark.slow
def test_criterion_6_appearance_control(desk_run, record_criterion, tmp_path):
    ckpt = load_checkpoint(desk_run["root"] / "run" / "checkpoint.npz")
    cfg = ckpt["config"]
    params = {k: v.astype(np.float64) for k, v in ckpt["ema"].items()}
    seeds, ref1, ref2, target = _edit_inputs(desk_run)
    region = target.masks["torso"].astype(bool)

    # regulariser alone converges to the selection indicator
    res = optimize_masks(params, cfg, ref1.image, ref2.image, target.heatmaps, region,
                         weights=LossWeights(r1=0.0, r2=0.0), max_iters=200)
    gaps, determined = [], 0
    for m, sel, comp in zip(res.masks.values, res.selections, res.complements):
        only_sel = (sel == 1) & (comp == 0)
        only_comp = (comp == 1) & (sel == 0)
        gaps.extend(np.abs(m[only_sel] - 1.0))
        gaps.extend(np.abs(m[only_comp]))
        determined += int(only_sel.sum() + only_comp.sum())
    regu_ok = determined > 0 and max(gaps) <= 0.05 and len(res.trace) - 1 <= 200

    # endpoints are bit-exact
    at0 = optimize_masks(params, cfg, ref1.image, ref2.image, target.heatmaps, region, force_m=0.0)
    at1 = optimize_masks(params, cfg, ref1.image, ref2.image, target.heatmaps, region, force_m=1.0)
    fe = np.random.default_rng(0).normal(size=(2, 4, 3))
    endpoints_ok = (
        at0.image.tobytes() == at0.transfer_r1.tobytes()
        and at1.image.tobytes() == at1.transfer_r2.tobytes()
        and fuse_textures(fe[0], fe[1], np.zeros(4)).value.tobytes() == fe[0].tobytes()
        and fuse_textures(fe[0], fe[1], np.ones(4)).value.tobytes() == fe[1].tobytes()
    )

    # torso swap through the CLI with the full objective
    (tmp_path / "edit.json").write_text(json.dumps({
        "checkpoint": str(desk_run["root"] / "run" / "checkpoint.npz"),
        "reference1_seed": seeds[0], "reference2_seed": seeds[1], "target_seed": seeds[2],
        "region": "torso",
    }))
    assert main(["edit", "--config", str(tmp_path / "edit.json"), "--seed", "0", "--out", str(tmp_path / "e")]) == 0
    summary = json.loads((tmp_path / "e" / "edit_summary.json").read_text())
    edited = np.array(summary["edited_region_mean"])
    ref2_mean = np.array(summary["reference2_region_mean"])
    plain = at0.transfer_r1[region].mean(axis=0)
    before = float(np.abs(plain - ref2_mean).sum())
    after = summary["l1_to_reference2"]
    swap_ok = after < before and summary["l1_to_reference2"] < summary["l1_to_reference1"]

    ok = regu_ok and endpoints_ok and swap_ok
    detail = (
        f"{determined} determined entries, max gap {max(gaps) if gaps else float('nan'):.3f}; "
        f"endpoints bit-exact {endpoints_ok}; torso L1 to ref2 {before:.3f} -> {after:.3f}, "
        f"to ref1 {summary['l1_to_reference1']:.3f}"
    )
    assert record_criterion(6, "appearance control", ok, detail)


# ---------------------------------------------------------------------------
# 7. determinism


def _artifacts(directory):
    # wall-clock timings are the one output that cannot repeat
    return sorted(
        p for p in directory.rglob("*")
        if p.suffix in (".csv", ".json", ".ppm", ".npz") and p.name != "bench_timing.csv"
    )


def test_criterion_7_determinism(record_criterion, tmp_path, monkeypatch):
    monkeypatch.setenv("NTED_VERIFY", "1")
    small = {"resolution": 32, "scales": [4, 8, 16], "semantics": [4, 8, 8], "channels": [8, 8, 8]}
    (tmp_path / "synth.json").write_text(json.dumps({"n_train": 8, "n_test": 4, "canvas": 32}))
    (tmp_path / "train.json").write_text(json.dumps({
        "manifest": "run/synth/manifest.json", "renderer": small, "steps": 5, "batch_size": 2, "log_every": 0,
    }))
    (tmp_path / "eval.json").write_text(json.dumps({
        "manifest": "run/synth/manifest.json", "checkpoint": "run/train/checkpoint.npz", "batch_size": 3,
    }))
    (tmp_path / "bench.json").write_text(json.dumps({"grid": [64, 256], "reps": 5, "warmup": 1}))
    (tmp_path / "edit.json").write_text(json.dumps({
        "checkpoint": "run/train/checkpoint.npz", "canvas": 32, "iters": 5,
        "reference1_seed": 8, "reference2_seed": 9, "target_seed": 10,
    }))

    def run(name):
        out = tmp_path / name
        for cmd, cfg, seed in (("synth", "synth.json", "3"), ("train", "train.json", "4"),
                               ("eval", "eval.json", None), ("bench", "bench.json", "5"),
                               ("edit", "edit.json", "6")):
            args = [cmd, "--config", str(tmp_path / cfg), "--out", str(out / cmd)]
            if seed is not None:
                args += ["--seed", seed]
            # configs refer to run/..., so point that at this run's directory
            link = tmp_path / "run"
            if link.is_symlink():
                link.unlink()
            link.symlink_to(out)
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                assert main(args) == 0
        return out

    a, b = run("a"), run("b")
    files_a = [p.relative_to(a) for p in _artifacts(a)]
    files_b = [p.relative_to(b) for p in _artifacts(b)]
    differing = [str(f) for f in files_a if (a / f).read_bytes() != (b / f).read_bytes()]
    commands = {f.parts[0] for f in files_a}
    ok = files_a == files_b and not differing and commands == {"synth", "train", "eval", "bench", "edit"}
    detail = f"{len(files_a)} artifacts from {len(commands)} subcommands compared"
    if differing:
        detail += ", differing " + ", ".join(differing)
    assert record_criterion(7, "determinism", ok, detail)
