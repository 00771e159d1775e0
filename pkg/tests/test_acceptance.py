"""Acceptance suite: one test per criterion, each printing a PASS line with
the measured values. The end-to-end toy pipeline (criterion 9) trains a real
model and dominates the runtime; everything else is seconds.

Run with `pytest tests/test_acceptance.py -v -s` to watch the progress lines.
"""

import csv
import json
import math
import os
import time

import numpy as np
import pytest

import semdiff.sample as SM
import semdiff.train as T
from conftest import tiny_concat_config
from semdiff import autodiff as ad
from semdiff import data as D
from semdiff import evaluation as E
from semdiff import loss as L
from semdiff.autodiff import Tensor
from semdiff.cli import main as cli_main
from semdiff.schedule import (forward_step, interpolate_variance, linear_schedule,
                              q_sample, reverse_step_mean)
from semdiff.unet import (ConditioningBundle, DenoiserConfig, DenoiserOutput, Variant,
                          build_denoiser, toy_config)

SEED = 0


def report(criterion, detail):
    print(f"\nACCEPTANCE C{criterion}: PASS  [{detail}]")


# ---------------------------------------------------------------------------
def test_c01_full_recipe_documented_not_desk_reproducible():
    """Paper-scale training is out of desk reach; the opt-in recipe and its
    configuration must exist and be documented instead."""
    root = os.path.join(os.path.dirname(__file__), "..")
    cfg = os.path.join(root, "configs", "paper_256.toml")
    script = os.path.join(root, "scripts", "reproduce_full_scale.sh")
    readme = os.path.join(root, "README.md")
    assert os.path.exists(cfg), "full-scale config missing"
    assert os.path.exists(script), "full-scale recipe script missing"
    text = open(readme).read()
    assert "paper_256" in text and "reproduce_full_scale" in text
    content = open(cfg).read()
    assert "150000" in content.replace("_", "") and "256" in content
    report(1, "full-scale recipe present and documented; acceptance rests on the suites below")


def test_c02_schedule_algebra():
    t0 = time.time()
    sch = linear_schedule(1000, 1e-4, 0.02)
    assert np.all(np.diff(sch.alpha_bars) < 0)
    assert sch.alpha_bars[-1] < 1e-4
    assert np.all(sch.posterior_variances <= sch.betas + 1e-18)
    hand = linear_schedule(4, 0.1, 0.4)
    assert np.abs(hand.alpha_bars - [0.9, 0.72, 0.504, 0.3024]).max() < 1e-12
    elapsed = time.time() - t0
    assert elapsed < 1.0
    report(2, f"alpha-bar monotone, terminal {sch.alpha_bars[-1]:.2e} < 1e-4, "
              f"hand case exact, {elapsed:.3f}s")


def test_c03_forward_process_equivalence():
    t0 = time.time()
    sch = linear_schedule(1000, 1e-4, 0.02)
    n = 10_000
    worst = 0.0
    for t_target in (10, 100, 500):
        rng = np.random.default_rng(200 + t_target)
        x0 = rng.uniform(-1, 1, (1, 4, 4)).repeat(n, axis=0)
        x = x0.copy()
        for s in range(1, t_target + 1):
            x = forward_step(sch, x, s, rng.standard_normal(x.shape))
        abar = sch.alpha_bars[t_target - 1]
        se_mean = math.sqrt((1 - abar) / n)
        se_var = (1 - abar) * math.sqrt(2.0 / (n - 1))
        z_mean = np.abs(x.mean(axis=0) - math.sqrt(abar) * x0[0]) / se_mean
        z_var = np.abs(x.var(axis=0) - (1 - abar)) / se_var
        worst = max(worst, z_mean.max(), z_var.max())
        assert z_mean.max() < 3.0 and z_var.max() < 3.0
    elapsed = time.time() - t0
    assert elapsed < 30.0
    report(3, f"chained kernel matches closed form, worst |z| {worst:.2f} < 3, {elapsed:.1f}s")


def test_c04_oracle_reverse_recovery():
    t0 = time.time()
    sch = linear_schedule(1000, 1e-4, 0.02)
    rng = np.random.default_rng(4)
    x0 = rng.uniform(-1, 1, (8, 1, 16, 16))
    eps = rng.standard_normal(x0.shape)
    x1 = q_sample(sch, x0, 1, eps)
    err = np.abs(reverse_step_mean(sch, x1, 1, eps) - x0).max()
    elapsed = time.time() - t0
    assert err < 1e-6
    assert elapsed < 1.0
    report(4, f"x0 recovered to {err:.2e} (< 1e-6), {elapsed:.3f}s")


def test_c05_gradient_check_20_directions():
    t0 = time.time()
    cfg = tiny_concat_config()
    net = build_denoiser(cfg, seed=1, dtype=np.float64)
    params = dict(net.named_parameters())
    n_params = sum(p.data.size for p in params.values())
    assert n_params <= 1000, n_params

    rng = np.random.default_rng(SEED)
    x0 = rng.uniform(-0.9, 0.9, (2, 1, 8, 8))
    labels = rng.integers(0, 2, (2, 8, 8))
    onehot = np.zeros((2, 2, 8, 8))
    for c in range(2):
        onehot[:, c][labels == c] = 1.0
    cond = ConditioningBundle(mask_onehot=onehot, variant=Variant.CONCAT)
    sch = linear_schedule(10, 1e-2, 0.1)
    eps = rng.standard_normal(x0.shape)
    t = np.array([1, 7])
    lam = 0.01
    x_t = q_sample(sch, x0, t, eps)

    out = net(x_t, t, cond)
    terms = L.hybrid_loss(sch, x0, t, eps, out, lam)
    terms.total.backward()
    grads = {k: p.grad.copy() for k, p in params.items()}
    eps_hat0 = out.eps_hat.data.copy()

    def f():
        # the vlb freezes eps_hat in its mean, so the differenced functional
        # pins it at the base point; v and the L2 pathway stay live
        oo = net(x_t, t, cond)
        pinned = DenoiserOutput(eps_hat=Tensor(eps_hat0), v=oo.v)
        return (L.l2_eps_loss(eps, oo.eps_hat).item()
                + lam * L.vlb_term(sch, x0, x_t, t, pinned).item())

    h = 1e-6
    rs = np.random.default_rng(123)
    worst = 0.0
    for _ in range(20):
        ds = {k: rs.normal(size=p.data.shape) for k, p in params.items()}
        orig = {k: p.data.copy() for k, p in params.items()}
        for k, p in params.items():
            p.data = orig[k] + h * ds[k]
        lp = f()
        for k, p in params.items():
            p.data = orig[k] - h * ds[k]
        lm = f()
        for k, p in params.items():
            p.data = orig[k]
        fd = (lp - lm) / (2 * h)
        an = sum(float(np.sum(grads[k] * ds[k])) for k in params)
        worst = max(worst, abs(fd - an) / max(abs(fd), abs(an)))
    elapsed = time.time() - t0
    assert worst <= 1e-3
    assert elapsed < 60.0
    report(5, f"{n_params} params, 20 directions, worst rel err {worst:.2e} <= 1e-3, "
              f"{elapsed:.1f}s")


def test_c06_variance_interpolation_endpoints():
    sch = linear_schedule(1000, 1e-4, 0.02)
    v = np.ones((2, 2))
    worst_geo = 0.0
    for t in (2, 17, 500, 1000):
        assert (interpolate_variance(sch, t, v) == sch.betas[t - 1]).all()
        assert (interpolate_variance(sch, t, -v) == sch.posterior_variances[t - 1]).all()
        geo = np.sqrt(sch.betas[t - 1] * sch.posterior_variances[t - 1])
        worst_geo = max(worst_geo, np.abs(interpolate_variance(sch, t, 0 * v) - geo).max())
    assert worst_geo < 1e-12
    report(6, f"endpoints exact, geometric mean within {worst_geo:.1e} (< 1e-12)")


def test_c07_conditioning_architectures():
    t0 = time.time()
    rng = np.random.default_rng(7)
    for variant in Variant:
        # toy scale with gradients
        cfg = toy_config(variant, num_mask_classes=17)
        net = build_denoiser(cfg, seed=3)
        x = rng.standard_normal((2, 1, 32, 32)).astype(np.float32)
        labels = rng.integers(0, 17, (2, 32, 32))
        onehot = np.zeros((2, 17, 32, 32), dtype=np.float32)
        for c in range(17):
            onehot[:, c][labels == c] = 1.0
        edge = (rng.random((2, 1, 32, 32)) < 0.1).astype(np.float32) \
            if variant == Variant.EDGE_GUIDED else None
        cond = ConditioningBundle(mask_onehot=onehot, variant=variant, edge_map=edge)
        out = net(x, np.array([5, 800]), cond)
        assert out.eps_hat.shape == (2, 1, 32, 32) and out.v.shape == (2, 1, 32, 32)

        # mask-perturbation liveness
        swapped = labels.copy()
        sel = swapped[:, 8:24, 8:24]
        a_px, b_px = sel == 1, sel == 2
        sel[a_px], sel[b_px] = 2, 1
        onehot2 = np.zeros_like(onehot)
        for c in range(17):
            onehot2[:, c][swapped == c] = 1.0
        cond2 = ConditioningBundle(mask_onehot=onehot2, variant=variant, edge_map=edge)
        assert np.abs(net(x, np.array([5, 800]), cond).eps_hat.data
                      - net(x, np.array([5, 800]), cond2).eps_hat.data).max() > 0

        # full gradient coverage including the auxiliary encoder
        out = net(x, np.array([5, 800]), cond)
        (ad.mean(ad.square(out.eps_hat)) + ad.mean(ad.square(out.v))).backward()
        dead = [n for n, p in net.named_parameters() if p.grad is None or not np.any(p.grad)]
        assert dead == [], dead

        # full-resolution shape contract
        cfg256 = DenoiserConfig(image_size=256, base_width=8, channel_multipliers=(1, 1, 2),
                                num_res_blocks_per_level=1, attention_resolutions=(64,),
                                num_mask_classes=17, variant=variant)
        net256 = build_denoiser(cfg256, seed=3)
        x256 = rng.standard_normal((1, 1, 256, 256)).astype(np.float32)
        lab256 = rng.integers(0, 17, (1, 256, 256))
        oh256 = np.zeros((1, 17, 256, 256), dtype=np.float32)
        for c in range(17):
            oh256[:, c][lab256 == c] = 1.0
        e256 = (rng.random((1, 1, 256, 256)) < 0.1).astype(np.float32) \
            if variant == Variant.EDGE_GUIDED else None
        with ad.no_grad():
            out256 = net256(x256, 500, ConditioningBundle(
                mask_onehot=oh256, variant=variant, edge_map=e256))
        assert out256.eps_hat.shape == (1, 1, 256, 256)
        assert out256.v.shape == (1, 1, 256, 256)
    elapsed = time.time() - t0
    assert elapsed < 60.0
    report(7, f"3 variants at 32^2 and 256^2: shapes, liveness, gradient coverage, "
              f"{elapsed:.1f}s")


def test_c08_metric_axioms():
    rng = np.random.default_rng(8)
    feats = rng.normal(size=(40, 6))
    assert E.fid(feats, feats.copy()) <= 1e-6
    base = rng.normal(size=64)
    base = (base - base.mean()) / base.std(ddof=1)
    assert E.fid(base[:, None], base[:, None] + 1.0) == pytest.approx(1.0, abs=1e-9)
    img = rng.random((16, 16))
    assert E.ssim(img, img) == pytest.approx(1.0, abs=1e-9)
    assert E.psnr(np.zeros((4, 4)), np.full((4, 4), 0.1)) == pytest.approx(20.0, abs=1e-9)
    g = np.zeros((8, 8), dtype=np.uint8)
    g[:4] = 1
    p = np.zeros_like(g)
    p[:2] = 1
    assert E.dice(p, g, 1) == 2.0 / 3.0
    report(8, "FID(A,A)=0, 1-D FID=1.0, SSIM(id)=1, PSNR(0.01)=20dB, dice half-overlap=2/3")


# ---------------------------------------------------------------------------
@pytest.fixture(scope="module")
def toy_pipeline(tmp_path_factory):
    """Criterion 9/10 artifacts: the full CLI pipeline at toy scale."""
    root = tmp_path_factory.mktemp("accept")
    data_dir = str(root / "data")
    rc = cli_main(["toy-gen", "--out", data_dir, "--subjects", "8", "--slices", "6",
                   "--size", "32", "--seed", str(SEED)])
    assert rc == 0
    cfg_path = root / "toy.toml"
    cfg_path.write_text("\n".join([
        "[schedule]", "T = 1000", "beta_start = 1e-4", "beta_end = 0.02", "",
        "[model]", "image_size = 32", "base_width = 32",
        "channel_multipliers = [1, 2, 2]", "num_res_blocks_per_level = 1",
        "attention_resolutions = [8]", "num_mask_classes = 17", "",
        "[train]", "iterations = 3000", "batch_size = 8", "learning_rate = 1e-4",
        "lambda_vlb = 0.001", "checkpoint_every = 1000", 'variant = "mask_guided"',
        f"seed = {SEED}", "log_every = 100", "",
        "[data]", f'manifest = "{data_dir}/manifest.jsonl"',
    ]))
    run_dir = str(root / "run_mask_guided")
    t0 = time.time()
    rc = cli_main(["train", "--config", str(cfg_path), "--out", run_dir])
    train_minutes = (time.time() - t0) / 60
    assert rc == 0

    synth_dir = str(root / "synth")
    rc = cli_main(["sample", "--ckpt", os.path.join(run_dir, "ckpt_3000.bin"),
                   "--manifest", f"{data_dir}/manifest.jsonl", "--out", synth_dir,
                   "--n", "32", "--seed", "123"])
    assert rc == 0

    report_path = str(root / "report.json")
    rc = cli_main(["eval", "--real", data_dir, "--synth", synth_dir, "--masks", data_dir,
                   "--oracle", "toy", "--out", report_path])
    assert rc == 0
    return {"root": root, "data": data_dir, "cfg": cfg_path, "run": run_dir,
            "synth": synth_dir, "report": report_path, "train_minutes": train_minutes}


def _metrics_rows(path):
    with open(path) as fh:
        rows = list(csv.reader(fh))
    return rows[1:]


@pytest.mark.slow
def test_c09_end_to_end_toy_run(toy_pipeline):
    rows = _metrics_rows(os.path.join(toy_pipeline["run"], "metrics.csv"))
    assert len(rows) == 3000
    first100 = np.mean([float(r[1]) for r in rows[:100]])
    last1000 = np.mean([float(r[1]) for r in rows[-1000:]])
    assert last1000 < first100

    with open(toy_pipeline["report"]) as fh:
        rep = json.load(fh)
    assert rep["n_images"] == 32

    # mean DSC over {body, largest organ} per sample against its own mask
    oracle = E.ToyBandOracle()
    ds = D.load_manifest(os.path.join(toy_pipeline["data"], "manifest.jsonl"))
    recs = {f"{r.subject_id}_{r.slice_index:04d}": r for r in ds.records}
    with open(os.path.join(toy_pipeline["synth"], "index.json")) as fh:
        idx = json.load(fh)
    scores = []
    band_hits, band_total = 0, 0
    for entry in idx["outputs"]:
        rec = recs[f"{entry['subject_id']}_{entry['slice_index']:04d}"]
        synth = D.load_image_png(os.path.join(toy_pipeline["synth"], entry["file"]))
        pred = oracle.segment(synth)
        organs = [c for c in np.unique(rec.mask) if c >= 2]
        largest = int(max(organs, key=lambda c: (rec.mask == c).sum()))
        scores.append(0.5 * (E.dice(pred, rec.mask, 1) + E.dice(pred, rec.mask, largest)))
        for cid in organs:  # sampled organ regions land in their class band
            band_total += 1
            region_mean = float(synth[rec.mask == cid].mean())
            if abs(region_mean - D.class_band(int(cid))) <= 0.15:
                band_hits += 1
    mean_dsc = float(np.mean(scores))
    band_frac = band_hits / band_total
    assert mean_dsc >= 0.6
    assert band_frac >= 0.8

    # non-blocking trend check: mask guidance vs plain concatenation at step 1000
    concat_run = str(toy_pipeline["root"] / "run_concat")
    rc = cli_main(["train", "--config", str(toy_pipeline["cfg"]), "--out", concat_run,
                   "--set", "train.variant=concat", "--set", "train.iterations=1000"])
    assert rc == 0
    concat_rows = _metrics_rows(os.path.join(concat_run, "metrics.csv"))
    mask_1k = np.mean([float(r[1]) for r in rows[900:1000]])
    concat_1k = np.mean([float(r[1]) for r in concat_rows[900:1000]])
    trend = "holds" if mask_1k <= concat_1k else "does NOT hold on this seed"
    report(9, f"train {toy_pipeline['train_minutes']:.1f} min, loss {first100:.3f} -> "
              f"{last1000:.4f}, mean DSC(body, largest organ) {mean_dsc:.3f} >= 0.6, "
              f"organ regions in band {100 * band_frac:.0f}% >= 80%; "
              f"trend l_simple@1k mask-guided {mask_1k:.4f} vs concat {concat_1k:.4f} "
              f"({trend}, non-blocking)")


@pytest.mark.slow
def test_c10_determinism(toy_pipeline):
    # twin short trainings: identical metrics columns (wallclock excluded)
    cfg = T.TrainConfig(iterations=60, batch_size=8, checkpoint_every=60, seed=17,
                        variant=Variant.MASK_GUIDED, log_every=20)
    ds = D.load_manifest(os.path.join(toy_pipeline["data"], "manifest.jsonl"))
    sch = linear_schedule(1000, 1e-4, 0.02)
    runs = []
    for tag in ("a", "b"):
        net = build_denoiser(toy_config(Variant.MASK_GUIDED), seed=17)
        out = str(toy_pipeline["root"] / f"twin_{tag}")
        T.train(cfg, ds, net, sch, out)
        runs.append([r[:4] for r in _metrics_rows(os.path.join(out, "metrics.csv"))])
    assert runs[0] == runs[1]

    # sampling determinism is bitwise on the emitted files
    net, sch2, _ = SM.denoiser_from_checkpoint(
        os.path.join(toy_pipeline["run"], "ckpt_3000.bin"))
    masks = np.stack([ds.records[i].mask for i in (0, 1)])
    cond = SM.make_bundle_for_masks(masks, net.config.variant)
    short = linear_schedule(50, 1e-4, 0.02)
    a = SM.sample(net, short, cond, n=2, seed=99)
    b = SM.sample(net, short, cond, n=2, seed=99)
    assert np.array_equal(a, b)
    report(10, "twin 60-step runs byte-identical on loss columns; sampling bitwise stable")


def test_c11_data_pipeline_exact_cases():
    assert D.window_ct(np.array([-160.0]))[0] == 0.0
    assert D.window_ct(np.array([40.0]))[0] == 0.5
    assert D.window_ct(np.array([240.0]))[0] == 1.0

    mask = np.zeros((4, 4), dtype=np.uint8)
    mask[:, :2] = 1
    mask[:, 2:] = 2
    edges = D.mask_to_edges(mask)
    expected = np.zeros((4, 4), dtype=np.uint8)
    expected[:, 1:3] = 1
    assert np.array_equal(edges, expected)

    labels = np.random.default_rng(0).integers(0, 17, (16, 16))
    onehot = D.mask_to_onehot(labels, 17)
    assert np.array_equal(onehot.argmax(axis=0), labels)
    assert (onehot.sum(axis=0) == 1.0).all()

    yy, xx = np.mgrid[0:64, 0:64]
    disk = (yy - 32) ** 2 + (xx - 32) ** 2 <= 18 ** 2
    img = np.where(disk, 0.6, 0.0).astype(np.float32)
    img[(yy - 32) ** 2 + (xx - 32) ** 2 <= 4 ** 2] = 0.0
    body = D.derive_body_class(img, np.zeros((64, 64), dtype=np.uint8))
    assert body[32, 32] == 1  # hole filled
    assert body[0, 0] == 0
    organs = np.zeros((64, 64), dtype=np.uint8)
    liver = (yy - 28) ** 2 + (xx - 38) ** 2 <= 5 ** 2
    organs[liver] = 7
    both = D.derive_body_class(np.where(disk, 0.6, 0.0).astype(np.float32), organs)
    assert (both[liver] == 7).all()
    assert ((both == 1) & liver).sum() == 0
    report(11, "windowing endpoints, 4x4 edge map, one-hot round-trip, body disk cases exact")
