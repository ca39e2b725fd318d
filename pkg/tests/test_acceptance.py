"""Acceptance suite: one test per criterion, each with its stated tolerance and runtime budget.

Every test records a one-line ``detail`` (the measured numbers) before it
asserts, and the conftest hook prints a PASS/FAIL line per criterion at the
end of the run. Run just this file with ``pytest tests/test_acceptance.py -s``
to also see the lines as they happen.
"""
import itertools
import math
import time

import numpy as np
import pytest

from pdunet import autodiff as ad
from pdunet.autodiff import Tensor, parameter
from pdunet.fourier import image_to_radial_kspace, spokes_to_sinogram
from pdunet.geometry import (
    FanGeometry,
    ParallelGeometry,
    detector_positions,
    make_parallel_default,
    make_radial_geometry,
    parallel_detector_count,
    sparse_geometry,
    sparsify_indices,
)
from pdunet.metrics import mann_whitney_u, roi_metrics, ssim
from pdunet.models import ModelSpec, PDConfig, UNetConfig, build_model, matched_pdnet_iterations
from pdunet.phantoms import PhantomSpec, generate_phantom, shepp_logan
from pdunet.pipeline import (
    CorpusSpec,
    TrainConfig,
    inference_benchmark,
    insert_needle,
    make_corpus,
    make_examples,
    random_needle,
    running_mean,
    train,
    train_step,
)
from pdunet.projectors import Sinogram, back_project, fbp, forward_project
from pdunet.sinogram_ops import NormStats, denorm, image_denorm, image_norm, znorm

import fuzzing
from test_autodiff import fd_check
from test_metrics import brute_force_p
from test_projectors import single_pixel_oracle

MODEL_ORDER = ("recon-unet", "sino-unet", "pdnet", "pdunet")


def report(record_property, number, ok, detail):
    record_property("detail", detail)
    print(f"\ncriterion {number:2d} {'PASS' if ok else 'FAIL'}  {detail}")


class Timer:
    def __enter__(self):
        self.t0 = time.perf_counter()
        return self

    def __exit__(self, *exc):
        self.elapsed = time.perf_counter() - self.t0


# ------------------------------------------------------------------ 1. adjoint


def test_criterion_1_adjointness(record_property):
    worst = {"float64": 0.0, "float32": 0.0}
    rng = np.random.default_rng(1)
    with Timer() as t:
        for size in (16, 64):
            n_det = parallel_detector_count(size)
            geoms = [
                ParallelGeometry(n_angles=30, angle_step=math.pi / 30, n_detectors=n_det),
                FanGeometry(n_angles=36, angle_step=2 * math.pi / 36, n_detectors=2 * size, detector_spacing=1.0,
                            source_iso_dist=2.5 * size, detector_iso_dist=1.0 * size),
            ]
            for geom in geoms:
                for dtype in ("float64", "float32"):
                    x = rng.standard_normal((size, size)).astype(dtype)
                    y = rng.standard_normal((geom.n_angles, geom.n_detectors)).astype(dtype)
                    ax = forward_project(x, geom)
                    aty = back_project(y, geom, size)
                    lhs = np.sum(ax.astype(np.float64) * y)
                    rhs = np.sum(x.astype(np.float64) * aty)
                    err = abs(lhs - rhs) / (np.linalg.norm(ax) * np.linalg.norm(y))
                    worst[dtype] = max(worst[dtype], err)
    ok = worst["float64"] < 1e-10 and worst["float32"] < 1e-3 and t.elapsed < 5
    report(record_property, 1, ok,
           f"max rel err f64 {worst['float64']:.1e} f32 {worst['float32']:.1e}, {t.elapsed:.1f}s")
    assert worst["float64"] < 1e-10
    assert worst["float32"] < 1e-3
    assert t.elapsed < 5


# ------------------------------------------------------------------ 2. single-pixel oracle


def test_criterion_2_single_pixel_oracle(record_property):
    geoms = [
        ParallelGeometry(n_angles=24, angle_step=math.pi / 24, n_detectors=13, angle_start=0.1),
        FanGeometry(n_angles=24, angle_step=2 * math.pi / 24, n_detectors=20, detector_spacing=1.0,
                    source_iso_dist=20.0, detector_iso_dist=10.0),
    ]
    worst = 0.0
    with Timer() as t:
        for geom in geoms:
            for i, j in itertools.product(range(8), range(8)):
                img = np.zeros((8, 8))
                img[i, j] = 1.0
                got = forward_project(img, geom, mode="exact")
                worst = max(worst, float(np.max(np.abs(got - single_pixel_oracle(geom, 8, i, j)))))
    ok = worst <= 1e-6 and t.elapsed < 5
    report(record_property, 2, ok, f"max per-bin deviation {worst:.1e} over 128 pixel images, {t.elapsed:.1f}s")
    assert worst <= 1e-6
    assert t.elapsed < 5


# ------------------------------------------------------------------ 3. FBP fidelity


FBP_SSIM_FLOOR = 0.85


def test_criterion_3_fbp_fidelity(record_property):
    with Timer() as t:
        img = shepp_logan(256)
        geom = make_parallel_default(256, n_angles=360, angle_step=math.pi / 360)
        sino = forward_project(img, geom)
        scores = {}
        for views in (45, 90, 180, 360):
            pattern = sparsify_indices(360, 360 // views)
            rec = fbp(sino[list(pattern.kept_indices)], sparse_geometry(geom, pattern), 256)
            scores[views] = ssim(rec, img)
    monotone = all(scores[a] <= scores[b] for a, b in zip((45, 90, 180), (90, 180, 360)))
    ok = scores[360] >= FBP_SSIM_FLOOR and monotone and t.elapsed < 60
    report(record_property, 3, ok,
           "SSIM " + ", ".join(f"{v}v {s:.3f}" for v, s in scores.items()) + f", {t.elapsed:.1f}s")
    assert scores[360] >= FBP_SSIM_FLOOR
    assert monotone
    assert t.elapsed < 60


# ------------------------------------------------------------------ 4. Fourier slice


def blob_image(rng, n=32, count=6):
    c = (n - 1) / 2
    yy, xx = np.mgrid[0:n, 0:n] - c
    img = np.zeros((n, n))
    for _ in range(count):
        r, a, s = rng.uniform(0, n / 4), rng.uniform(0, 2 * math.pi), rng.uniform(2, 4)
        img += rng.uniform(0.2, 1) * np.exp(-((xx - r * math.cos(a)) ** 2 + (yy - r * math.sin(a)) ** 2) / (2 * s * s))
    return img


def test_criterion_4_fourier_slice(record_property):
    n = 32
    geom = ParallelGeometry(n_angles=180, angle_step=math.pi / 180, n_detectors=47)
    t_pos = detector_positions(geom.n_detectors)
    kappa = np.fft.fftshift(np.fft.fftfreq(2 * n))
    c = np.arange(n) - (n - 1) / 2
    s = geom.angles
    # direct 2-D Fourier transform of the pixel grid sampled on each central slice
    ex = np.exp(-2j * np.pi * (np.cos(s)[:, None] * kappa)[..., None] * c)
    ey = np.exp(-2j * np.pi * (np.sin(s)[:, None] * kappa)[..., None] * c)
    rng = np.random.default_rng(4)
    errors = []
    with Timer() as t:
        for _ in range(10):
            img = blob_image(rng, n)
            proj_ft = forward_project(img, geom) @ np.exp(-2j * np.pi * np.outer(t_pos, kappa))
            slices = np.einsum("akj,ij,aki->ak", ex, img, ey)
            errors.append(np.linalg.norm(proj_ft - slices) / np.linalg.norm(slices))
    worst = max(errors)
    ok = worst < 0.02 and t.elapsed < 30
    report(record_property, 4, ok, f"max relative L2 {worst:.4f} over 10 images x 180 angles, {t.elapsed:.1f}s")
    assert worst < 0.02
    assert t.elapsed < 30


# ------------------------------------------------------------------ 5. MRI path


def test_criterion_5_mri_path(record_property):
    n = 64
    n_det = parallel_detector_count(n)
    geom = make_radial_geometry(2 * n, n_det)
    corpus = make_corpus(CorpusSpec(size=n, n_train=8, n_val=0, n_test=0, seed=5))
    errors = []
    with Timer() as t:
        for img in corpus.images:
            via_k = spokes_to_sinogram(image_to_radial_kspace(img, 2 * n, 2 * n), n_det).data
            direct = forward_project(img, geom)
            errors.append(np.linalg.norm(via_k - direct) / np.linalg.norm(direct))
    worst = max(errors)
    ok = worst < 0.02 and t.elapsed < 60
    report(record_property, 5, ok, f"max relative L2 {worst:.4f} over {len(errors)} phantoms, {t.elapsed:.1f}s")
    assert worst < 0.02
    assert t.elapsed < 60


# ------------------------------------------------------------------ 6. gradients


def test_criterion_6_gradients(record_property):
    rng = np.random.default_rng(6)
    geom_p = ParallelGeometry(n_angles=10, angle_step=math.pi / 10, n_detectors=13)
    geom_f = FanGeometry(n_angles=10, angle_step=2 * math.pi / 10, n_detectors=16, detector_spacing=1.0,
                         source_iso_dist=16.0, detector_iso_dist=8.0)
    checks = 0
    with Timer() as t:
        for shape in [(1, 2, 4, 4), (2, 3, 6, 4), (1, 1, 8, 6)]:
            c = shape[1]
            a, b = rng.standard_normal(shape), rng.standard_normal(shape)
            away = np.where(np.abs(a) < 1e-2, 0.5, a)
            cases = [
                (lambda x, w, bias: ad.conv2d(x, w, bias), [a, rng.standard_normal((2, c, 3, 3)), rng.standard_normal(2)]),
                (lambda x, w: ad.conv2d_stride2(x, w), [a, rng.standard_normal((2, c, 2, 2))]),
                (lambda x, w: ad.conv_transpose2d_stride2(x, w), [a, rng.standard_normal((c, 2, 2, 2))]),
                (lambda x, al: ad.prelu(x, al), [away, rng.uniform(0.1, 0.5, c)]),
                (lambda x: ad.relu(x), [away]),
                (lambda x, y: x * y + x - y, [a, b]),
                (lambda x: ad.affine(x, 1.5, -0.2), [a]),
                (lambda x, bias: ad.bias_add(x, bias), [a, rng.standard_normal(c)]),
                (lambda x, y: ad.concat([x, y]), [a, b]),
                (lambda x: ad.pad2d(x, 1, 2), [a]),
                (lambda x: x[:, 0:1], [a]),
                (lambda x: ad.max_pool2(x), [a]),
                (lambda x: ad.bilinear_upsample2(x), [a]),
                (lambda x: ad.l1_loss(x, b), [a]),
                (lambda x: x.sum(), [a]),
                (lambda x: x.mean(), [a]),
            ]
            for fn, inputs in cases:
                fd_check(fn, inputs, rng)
                checks += 1
        for geom in (geom_p, geom_f):
            fd_check(lambda x: ad.project(x, geom), [rng.standard_normal((1, 1, 8, 8))], rng)
            y = rng.standard_normal((1, 1, geom.n_angles, geom.n_detectors))
            fd_check(lambda y: ad.backproject(y, geom, 8), [y], rng)
            checks += 2
    ok = t.elapsed < 120
    report(record_property, 6, ok, f"{checks} finite-difference checks below 1e-3, {t.elapsed:.1f}s")
    assert t.elapsed < 120


# ------------------------------------------------------------------ 7. normalisation


def test_criterion_7_normalisation(record_property, fan64):
    rng = np.random.default_rng(7)
    sino = Sinogram(rng.standard_normal((360, fan64.n_detectors)) * 3 + 7, fan64)
    n, stats = znorm(sino)
    sino_err = float(np.max(np.abs(denorm(n, stats).data - sino.data)))
    zero_err = float(np.max(np.abs(denorm(Sinogram(np.zeros_like(sino.data), fan64), NormStats(3.0, 2.0)).data - 3.0)))
    img = rng.uniform(0, 1.3, (64, 64))
    img_err = float(np.max(np.abs(image_denorm(image_norm(img, 1.1), 1.1) - img)))

    images = np.stack([generate_phantom(PhantomSpec(seed=s, size=64)) for s in range(2)])
    data = make_examples(images, "ct-fan", 16)
    counts_ok = True
    seen = {}
    for iters in (1, 2, 3):
        pd = PDConfig(n_iterations=iters, dual_width=4, primal_width=4, unet_base=4, unet_depth=2)
        for kind in ("pdnet", "pdunet"):
            model = build_model(ModelSpec(kind, 64, 0.9, UNetConfig(4, depth=2), pd))
            model.reconstruct(data.batch([0, 1]))
            expected = {"sino_stats": 1, "fbp": 1, "output_denorm": 1}
            for key in ("dual_in_znorm", "dual_blocks", "dual_out_denorm",
                        "primal_in_imgnorm", "primal_blocks", "primal_out_imgdenorm"):
                expected[key] = iters
            seen[(kind, iters)] = dict(model.counter.counts)
            counts_ok &= model.counter.counts == expected
    worst = max(sino_err, zero_err, img_err)
    ok = worst < 1e-6 and counts_ok
    report(record_property, 7, ok, f"max round-trip error {worst:.1e}; PD counters match for 1-3 iterations: {counts_ok}")
    assert worst < 1e-6
    assert counts_ok, seen


# ------------------------------------------------------------------ 8. accumulation


def test_criterion_8_accumulation(record_property):
    images = np.stack([generate_phantom(PhantomSpec(seed=s, size=32)) for s in range(8)])
    data = make_examples(images, "ct-fan", 16)
    spec = ModelSpec("pdunet", 32, 0.9, UNetConfig(4, depth=2), PDConfig(dual_width=4, unet_base=4, unet_depth=2))

    def trajectory(actual):
        model = build_model(spec, dtype=np.float64)
        cfg = TrainConfig(effective_batch=4, actual_batch=actual)
        rng = np.random.default_rng(8)
        out = []
        for _ in range(10):
            train_step(model, data, rng.choice(len(data), 4, replace=False), cfg)
            out.append(np.concatenate([p.data.ravel() for _, p in model.store]))
        return np.array(out)

    ref = trajectory(4)
    worst = 0.0
    for actual in (1, 2):
        acc = trajectory(actual)
        worst = max(worst, float(np.max(np.linalg.norm(acc - ref, axis=1) / np.linalg.norm(ref, axis=1))))
    ok = worst < 1e-5
    report(record_property, 8, ok, f"max relative parameter deviation over 10 steps {worst:.1e}")
    assert worst < 1e-5


# ------------------------------------------------------------------ 9. training smoke

SMOKE_STEPS = 200
SMOKE_BATCH = 1


def smoke_spec(kind, p99):
    return ModelSpec(kind, 64, p99, UNetConfig(base_channels=16), PDConfig(unet_base=16))


def test_criterion_9_training_smoke(record_property):
    corpus = make_corpus(CorpusSpec(size=64, n_train=32, n_val=0, n_test=0, seed=9))
    with Timer() as t:
        data = make_examples(corpus.split("train"), "ct-fan", 16)
        ratios = {}
        for kind in MODEL_ORDER:
            model = build_model(smoke_spec(kind, corpus.p99))
            cfg = TrainConfig(epochs=SMOKE_STEPS, effective_batch=SMOKE_BATCH, actual_batch=SMOKE_BATCH,
                              max_steps=SMOKE_STEPS, restore_best=False)
            hist = train(model, data, None, cfg)
            rm = running_mean(hist.step_losses, 10)
            ratios[kind] = rm[-1] / rm[4]  # step 200 against step 5
    reduced = all(r <= 0.5 for r in ratios.values())
    ok = reduced and t.elapsed < 15 * 60
    report(record_property, 9, ok,
           "final/initial running-mean L1 " + ", ".join(f"{k} {r:.3f}" for k, r in ratios.items()) + f", {t.elapsed:.0f}s")
    assert reduced
    assert t.elapsed < 15 * 60


# ------------------------------------------------------------------ 10 and 13: trained models

C10_CORPUS = CorpusSpec(size=64, n_train=64, n_val=16, n_test=50, seed=7)
C10_STEPS = {"recon-unet": 400, "sino-unet": 400, "pdnet": 600, "pdunet": 500}
C10_BATCH = 4


def c10_spec(kind, p99):
    return ModelSpec(kind, 64, p99, UNetConfig(base_channels=16), PDConfig(dual_width=16, unet_base=16))


@pytest.fixture(scope="module")
def trained():
    """Corpus, example sets and the four models trained at reduced width (shared by 10 and 13)."""
    t0 = time.perf_counter()
    corpus = make_corpus(C10_CORPUS)
    train_data = make_examples(corpus.split("train"), "ct-fan", 16)
    val_data = make_examples(corpus.split("val"), "ct-fan", 16)
    test_data = make_examples(corpus.split("test"), "ct-fan", 16)
    models, histories = {}, {}
    steps_per_epoch = math.ceil(len(train_data) / C10_BATCH)
    for kind in MODEL_ORDER:
        model = build_model(c10_spec(kind, corpus.p99))
        epochs = math.ceil(C10_STEPS[kind] / steps_per_epoch)
        cfg = TrainConfig(epochs=epochs, effective_batch=C10_BATCH, actual_batch=C10_BATCH, seed=0)
        histories[kind] = train(model, train_data, val_data, cfg)
        models[kind] = model
    return {
        "corpus": corpus,
        "test": test_data,
        "models": models,
        "histories": histories,
        "train_time": time.perf_counter() - t0,
    }


def predict_all(model, data, batch=10):
    return np.concatenate([model.reconstruct(data.batch(np.arange(i, min(i + batch, len(data)))))
                           for i in range(0, len(data), batch)])


def test_criterion_10_method_ordering(record_property, trained):
    t0 = time.perf_counter()
    data = trained["test"]
    p99 = trained["corpus"].p99

    def scores(recs):
        return np.array([ssim(r / p99, g / p99) for r, g in zip(recs, data.images)])

    s = {"fbp": scores(data.sparse_fbp), "bilinear-fbp": scores(data.bilinear_fbp())}
    for kind, model in trained["models"].items():
        s[kind] = scores(predict_all(model, data))
    mean = {k: float(v.mean()) for k, v in s.items()}
    test = mann_whitney_u(s["pdunet"], s["pdnet"], alternative="greater")
    elapsed = trained["train_time"] + time.perf_counter() - t0

    strict = (mean["fbp"] < mean["bilinear-fbp"] < mean["sino-unet"]
              < min(mean["recon-unet"], mean["pdnet"]) and max(mean["recon-unet"], mean["pdnet"]) <= mean["pdunet"])
    learned_beat_bilinear = all(mean[k] > mean["bilinear-fbp"] for k in MODEL_ORDER)
    subset = learned_beat_bilinear and mean["bilinear-fbp"] > mean["fbp"] and mean["pdunet"] >= mean["pdnet"]
    significant = test.p < 0.05
    ok = subset and significant and elapsed < 3600
    report(record_property, 10, ok,
           "mean SSIM " + ", ".join(f"{k} {v:.3f}" for k, v in mean.items())
           + f"; strict order {'holds' if strict else 'fails'}; MW p(pdunet>pdnet) {test.p:.2g}; {elapsed:.0f}s")
    assert subset, mean
    assert significant
    assert elapsed < 3600


def test_criterion_13_needle_probe(record_property, trained):
    t0 = time.perf_counter()
    corpus = trained["corpus"]
    p99 = corpus.p99
    rng = np.random.default_rng(13)
    clean = corpus.split("test")[:20]
    needles = [random_needle(rng, 64) for _ in clean]
    images = np.stack([insert_needle(img, nd) for img, nd in zip(clean, needles)])
    data = make_examples(images, "ct-fan", 16)
    centres = [((nd.tip[0] + nd.tail[0]) / 2, (nd.tip[1] + nd.tail[1]) / 2) for nd in needles]

    def roi_scores(recs):
        return np.array([roi_metrics(r / p99, g / p99, center=c)["ssim"] for r, g, c in zip(recs, images, centres)])

    s = {"fbp": roi_scores(data.sparse_fbp)}
    for kind, model in trained["models"].items():
        s[kind] = roi_scores(predict_all(model, data))
    mean = {k: float(v.mean()) for k, v in s.items()}
    elapsed = time.perf_counter() - t0
    beat_fbp = all(mean[k] > mean["fbp"] for k in MODEL_ORDER)
    best = max(MODEL_ORDER, key=lambda k: mean[k])
    ok = beat_fbp and best == "pdunet" and elapsed < 15 * 60
    report(record_property, 13, ok,
           "needle ROI SSIM " + ", ".join(f"{k} {v:.3f}" for k, v in mean.items()) + f"; best {best}; {elapsed:.0f}s")
    assert beat_fbp, mean
    assert best == "pdunet", mean
    assert elapsed < 15 * 60


# ------------------------------------------------------------------ 11. Mann-Whitney


def test_criterion_11_mann_whitney(record_property):
    rng = np.random.default_rng(11)
    worst = 0.0
    cases = 0
    with Timer() as t:
        for n1, n2 in itertools.product(range(1, 7), repeat=2):
            for alt in ("two-sided", "greater", "less"):
                x = rng.integers(0, 5, n1).astype(float)
                y = rng.integers(0, 5, n2).astype(float)
                res = mann_whitney_u(x, y, alt)
                u_ref, p_ref = brute_force_p(x, y, alt)
                worst = max(worst, abs(res.p - p_ref), abs(res.u - u_ref))
                cases += 1
        u, p = mann_whitney_u([1, 2, 3], [4, 5, 6])
    textbook = u == 0 and abs(p - 0.1) < 1e-12
    ok = worst < 1e-12 and textbook and t.elapsed < 5
    report(record_property, 11, ok,
           f"{cases} size/alternative cases, max deviation {worst:.1e}; textbook U={u:g} p={p:.3f}; {t.elapsed:.1f}s")
    assert worst < 1e-12
    assert textbook
    assert t.elapsed < 5


# ------------------------------------------------------------------ 12. speed


def test_criterion_12_speed(record_property):
    with Timer() as t:
        pdunet_spec = ModelSpec("pdunet", 64, 1.0, UNetConfig(), PDConfig(primal_block="unet"))
        iters = matched_pdnet_iterations(pdunet_spec)
        pdnet_spec = ModelSpec("pdnet", 64, 1.0, UNetConfig(), PDConfig(n_iterations=iters))
        models = {"pdunet": build_model(pdunet_spec), "pdnet": build_model(pdnet_spec)}
        # PD-Net needs ~80 s per batch at 360 views, so it gets 2 repeats and no warm-up;
        # PD-UNet is cheap enough for the full 20 repeats after 2 warm-up passes
        rows = inference_benchmark({"pdunet": models["pdunet"]}, 64, (45, 90, 180, 360), repeats=20, warmup=2)
        rows += inference_benchmark({"pdnet": models["pdnet"]}, 64, (45, 90, 180, 360), repeats=2, warmup=0)
    med = {(r["model"], r["projections"]): r["median_s"] for r in rows}
    params = {k: m.n_params() for k, m in models.items()}
    faster = med[("pdunet", 360)] < med[("pdnet", 360)]
    monotone = all(med[(m, a)] <= med[(m, b)] for m in models for a, b in ((45, 90), (90, 180), (180, 360)))
    matched = abs(params["pdnet"] - params["pdunet"]) <= 0.1 * params["pdunet"]
    ok = faster and monotone and matched and t.elapsed < 600
    report(record_property, 12, ok,
           f"PD-Net {iters} iterations ({params['pdnet']} vs {params['pdunet']} params); median s/batch "
           + ", ".join(f"{m}@{p} {v:.3f}" for (m, p), v in sorted(med.items())) + f"; {t.elapsed:.0f}s")
    assert matched
    assert faster
    assert monotone
    assert t.elapsed < 600


# ------------------------------------------------------------------ 14. I/O


def test_criterion_14_io(record_property, tmp_path):
    from pdunet import io

    rng = np.random.default_rng(14)
    with Timer() as t:
        bitwise = True
        for dtype in ("float32", "float64", "complex64", "complex128", "int64"):
            arr = (rng.standard_normal((4, 7)) * 100).astype(dtype)
            io.save_array(tmp_path / f"{dtype}.bin", arr)
            bitwise &= io.load_array(tmp_path / f"{dtype}.bin")[0].tobytes() == arr.tobytes()
        geom = FanGeometry(n_angles=6, angle_step=2 * math.pi / 6, n_detectors=20, detector_spacing=1.0,
                           source_iso_dist=30.0, detector_iso_dist=10.0)
        sino = Sinogram(rng.standard_normal((6, 20)), geom)
        io.save_sinogram(tmp_path / "s.bin", sino)
        back = io.load_sinogram(tmp_path / "s.bin")
        bitwise &= back.data.tobytes() == sino.data.tobytes() and back.geometry == geom
        k = image_to_radial_kspace(rng.standard_normal((8, 8)), 4, 16)
        io.save_kspace(tmp_path / "k.bin", k)
        bitwise &= io.load_kspace(tmp_path / "k.bin").data.tobytes() == k.data.tobytes()
        model = build_model(ModelSpec("pdunet", 32, 0.8, UNetConfig(4, depth=2), PDConfig(dual_width=4, unet_base=4, unet_depth=2)))
        io.save_model(tmp_path / "m.bin", model)
        loaded, _ = io.load_model(tmp_path / "m.bin")
        bitwise &= all(a.data.tobytes() == b.data.tobytes() for (_, a), (_, b) in zip(model.store, loaded.store))
        fuzz_dir = tmp_path / "fuzz"
        fuzz_dir.mkdir()
        typed, accepted, crashes = fuzzing.run_fuzz(fuzz_dir, 1000, seed=14)
    ok = bitwise and not crashes and t.elapsed < 60
    report(record_property, 14, ok,
           f"round trips bitwise: {bitwise}; fuzz 1000 cases: {typed} typed errors, {accepted} loaded, "
           f"{len(crashes)} crashes; {t.elapsed:.1f}s")
    assert bitwise
    assert not crashes, crashes[:5]
    assert t.elapsed < 60
