"""Command line entry point: simulate, sparsify, reconstruct, train, evaluate, bench, report.

Exit codes: 0 success, 2 usage or input-format error, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import sys
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import io
from .fourier import RadialKSpace, adjoint_nufft_recon, image_to_radial_kspace
from .geometry import sparse_geometry, sparsify_indices
from .metrics import MetricsReport, median_ssim_slice, ssim_map
from .models import MODEL_KINDS, ConfigError, ModelSpec, PDConfig, UNetConfig, build_model, matched_pdnet_iterations
from .pipeline import (
    TASKS,
    CorpusSpec,
    ExampleSet,
    NonFiniteLossError,
    TrainConfig,
    inference_benchmark,
    make_corpus,
    make_examples,
    task_geometry,
    train,
)
from .projectors import Sinogram, fbp
from .sinogram_ops import sparsify, upsample_bilinear

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_NUMERICAL = 3
METHODS = ("fbp", "bilinear-fbp", "nufft-adjoint") + MODEL_KINDS

log = logging.getLogger("pdunet")


class UsageError(Exception):
    pass


def code_version() -> str:
    """SHA-256 over the package sources, so manifests pin the exact code."""
    h = hashlib.sha256()
    for p in sorted(Path(__file__).parent.rglob("*.py")):
        h.update(p.relative_to(Path(__file__).parent).as_posix().encode())
        h.update(p.read_bytes())
    return h.hexdigest()[:16]


@dataclass
class RunManifest:
    command: str
    config: dict
    seed: int
    inputs: dict = field(default_factory=dict)
    outputs: dict = field(default_factory=dict)
    code_version: str = field(default_factory=code_version)
    timings: dict = field(default_factory=dict)

    def write(self, out_dir: Path):
        out_dir.mkdir(parents=True, exist_ok=True)
        with open(out_dir / "manifest.json", "w") as fh:
            json.dump(asdict(self), fh, indent=2, sort_keys=True)


def _load_config(path) -> dict:
    if path is None:
        return {}
    try:
        with open(path) as fh:
            cfg = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(cfg, dict):
        raise UsageError("config file must hold a JSON object")
    return cfg


def _opt(args, cfg: dict, name: str, default):
    """Flag value if given, else config-file value, else default."""
    value = getattr(args, name, None)
    if value is not None:
        return value
    return cfg.get(name, default)


# ------------------------------------------------------------------ dataset directory


def _dataset_paths(root: Path) -> dict:
    return {
        "images": root / "images.bin",
        "full": root / "full_sino.bin",
        "sparse": root / "sparse_sino.bin",
        "kspace": root / "kspace.bin",
        "corpus": root / "corpus.json",
    }


def load_dataset(root, split: str | None = None) -> tuple[ExampleSet, dict]:
    """Rebuild the example set stored by ``simulate`` (optionally one split)."""
    paths = _dataset_paths(Path(root))
    try:
        info = json.loads(paths["corpus"].read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise UsageError(f"{root} is not a simulate output directory: {exc}") from exc
    images = io.load_image(paths["images"])
    full = io.load_sinogram(paths["full"])
    sparse = io.load_sinogram(paths["sparse"])
    task, factor = info["task"], int(info["sparsity"])
    n = images.shape[-1]
    geom = full.geometry
    pattern = sparsify_indices(geom.n_angles, factor)
    sgeom = sparse_geometry(geom, pattern)
    idx = np.arange(images.shape[0]) if split is None else np.asarray(info["corpus"]["splits"][split])
    sparse_data = np.asarray(sparse.data[idx], dtype=np.float64)
    sparse_fbp = fbp(sparse_data, sgeom, n)
    if task == "mri-radial":
        arr, header = io.load_array(paths["kspace"], "kspace")
        angles = np.asarray(header["spoke_angles"])
        keep = list(pattern.kept_indices)
        recon_input = np.stack([adjoint_nufft_recon(RadialKSpace(arr[i][keep], angles[keep]), n) for i in idx])
    else:
        recon_input = sparse_fbp
    upsampled = upsample_bilinear(Sinogram(sparse_data, sgeom), geom.n_angles, factor).data
    data = ExampleSet(task, factor, np.asarray(images[idx], np.float64), np.asarray(full.data[idx], np.float64),
                      sparse_data, sparse_fbp, recon_input, upsampled, geom, sgeom, pattern)
    return data, info


# ------------------------------------------------------------------ commands


def cmd_simulate(args, cfg) -> dict:
    task = _opt(args, cfg, "task", "ct-fan")
    spec = CorpusSpec(
        size=_opt(args, cfg, "size", 64),
        n_train=_opt(args, cfg, "n_train", 200),
        n_val=_opt(args, cfg, "n_val", 30),
        n_test=_opt(args, cfg, "n_test", 50),
        seed=args.seed,
    )
    factor = _opt(args, cfg, "sparsity", 16)
    corpus = make_corpus(spec)
    data = make_examples(corpus.images, task, factor)
    out = Path(args.out)
    paths = _dataset_paths(out)
    io.save_image(paths["images"], corpus.images)
    io.save_sinogram(paths["full"], Sinogram(data.full_sino, data.full_geom))
    io.save_sinogram(paths["sparse"], Sinogram(data.sparse, data.sparse_geom))
    outputs = {k: str(v) for k, v in paths.items() if k != "kspace"}
    if task == "mri-radial":
        geom = task_geometry(task, spec.size)
        ks = [image_to_radial_kspace(img, geom.n_angles, 2 * spec.size) for img in corpus.images]
        io.save_array(paths["kspace"], np.stack([k.data for k in ks]), "kspace", unit="a.u.",
                      spoke_angles=[float(a) for a in ks[0].spoke_angles])
        outputs["kspace"] = str(paths["kspace"])
    info = {"task": task, "sparsity": factor, "p99": corpus.p99, "corpus": corpus.manifest()}
    paths["corpus"].write_text(json.dumps(info, indent=2))
    return {"config": {"task": task, "sparsity": factor, **asdict(spec)}, "outputs": outputs}


def cmd_sparsify(args, cfg) -> dict:
    sino = io.load_sinogram(args.input)
    factor = _opt(args, cfg, "sparsity", 16)
    try:
        pattern = sparsify_indices(sino.n_angles, factor)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    out = Path(args.out)
    target = out / "sparse_sino.bin" if not out.suffix else out
    io.save_sinogram(target, sparsify(sino, pattern))
    return {"config": {"sparsity": factor}, "inputs": {"sinogram": args.input}, "outputs": {"sinogram": str(target)}}


def reconstruct_method(method: str, data: ExampleSet, model=None, batch_size: int = 4) -> np.ndarray:
    if method == "fbp":
        return data.sparse_fbp
    if method == "bilinear-fbp":
        return data.bilinear_fbp()
    if method == "nufft-adjoint":
        if data.task != "mri-radial":
            raise UsageError("nufft-adjoint needs an mri-radial dataset")
        return data.recon_input
    if model is None:
        raise UsageError(f"method {method} needs --checkpoint")
    if model.kind != method:
        raise UsageError(f"checkpoint holds a {model.kind} model, not {method}")
    out = [model.reconstruct(data.batch(np.arange(i, min(i + batch_size, len(data))))) for i in range(0, len(data), batch_size)]
    return np.concatenate(out)


def cmd_reconstruct(args, cfg) -> dict:
    method = args.method
    data, _ = load_dataset(args.data, args.split)
    model = None
    if method in MODEL_KINDS:
        if not args.checkpoint:
            raise UsageError(f"method {method} needs --checkpoint")
        model, _ = io.load_model(args.checkpoint)
    recon = reconstruct_method(method, data, model)
    out = Path(args.out)
    target = out / f"{method}.bin"
    io.save_image(target, recon, meta={"method": method, "split": args.split})
    return {
        "config": {"method": method, "split": args.split},
        "inputs": {"data": args.data, "checkpoint": args.checkpoint},
        "outputs": {"images": str(target)},
    }


def _model_spec(args, cfg, kind: str, size: int, p99: float) -> ModelSpec:
    unet = UNetConfig(base_channels=_opt(args, cfg, "base_channels", 32), depth=_opt(args, cfg, "depth", 3))
    pd = PDConfig(
        n_iterations=_opt(args, cfg, "iterations", 2),
        primal_block="unet" if kind == "pdunet" else "conv-stack",
        dual_width=_opt(args, cfg, "dual_width", 32),
        unet_base=_opt(args, cfg, "base_channels", 32),
        unet_depth=_opt(args, cfg, "depth", 3),
        zero_init=bool(_opt(args, cfg, "zero_init", False)),
    )
    return ModelSpec(kind, size, p99, unet, pd, seed=args.seed)


def cmd_train(args, cfg) -> dict:
    kind = _opt(args, cfg, "model", None)
    if kind not in MODEL_KINDS:
        raise UsageError(f"--model must be one of {MODEL_KINDS}")
    train_data, info = load_dataset(args.data, "train")
    val_data, _ = load_dataset(args.data, "val")
    task = info["task"]
    tcfg = TrainConfig(
        epochs=_opt(args, cfg, "epochs", 30),
        effective_batch=_opt(args, cfg, "effective_batch", 32),
        actual_batch=_opt(args, cfg, "batch", 4),
        lr=_opt(args, cfg, "lr", 1e-3),
        seed=args.seed,
        factor=int(info["sparsity"]),
        task=task,
        max_steps=_opt(args, cfg, "max_steps", None),
    )
    spec = _model_spec(args, cfg, kind, train_data.images.shape[-1], float(info["p99"]))
    model = build_model(spec)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    hist = train(model, train_data, val_data if len(val_data) else None, tcfg, log_path=out / "train_log.csv")
    ckpt = io.save_model(out / "checkpoint.bin", model, {"best_epoch": hist.best_epoch, "task": task})
    return {
        "config": {"train": asdict(tcfg), "model": spec.to_dict()},
        "inputs": {"data": args.data},
        "outputs": {"checkpoint": str(ckpt), "log": str(out / "train_log.csv")},
    }


def _write_pgm(path: Path, img: np.ndarray, lo: float, hi: float):
    scaled = np.clip((img - lo) / (hi - lo), 0, 1)
    data = np.rint(scaled * 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{data.shape[1]} {data.shape[0]}\n255\n".encode())
        fh.write(data.tobytes())


def cmd_evaluate(args, cfg) -> dict:
    gt = io.load_image(args.gt)
    preds = {}
    for item in args.pred:
        name, sep, path = item.partition("=")
        if not sep:
            name, path = Path(item).stem, item
        preds[name] = io.load_image(path)
        if preds[name].shape != gt.shape:
            raise UsageError(f"prediction {name} has shape {preds[name].shape}, ground truth {gt.shape}")
    scale = float(_opt(args, cfg, "p99", 1.0))
    rep = MetricsReport()
    for name, pred in preds.items():
        for i in range(gt.shape[0]):
            rep.add(name, i, pred[i], gt[i], scale=scale)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rep.write(out / "metrics.csv", out / "metrics.json")
    outputs = {"csv": str(out / "metrics.csv"), "json": str(out / "metrics.json")}
    names = rep.methods
    if len(names) >= 2 and gt.shape[0] > 0:
        a, b = names[0], names[1]
        sl = median_ssim_slice(rep.ssim[a], rep.ssim[b])
        for name in (a, b):
            diff = (preds[name][sl] - gt[sl]) / scale
            _write_pgm(out / f"median_{name}_diff.pgm", diff, -0.2, 0.2)
            _write_pgm(out / f"median_{name}_ssim.pgm", ssim_map(preds[name][sl] / scale, gt[sl] / scale), 0.0, 1.0)
        (out / "median_slice.json").write_text(json.dumps({
            "slice": int(sl), "methods": [a, b],
            "diff_window": {"low": -0.2, "high": 0.2, "unit": "normalised intensity"},
            "ssim_window": {"low": 0.0, "high": 1.0},
        }, indent=2))
    return {"config": {"p99": scale}, "inputs": {"gt": args.gt, "pred": args.pred}, "outputs": outputs}


def cmd_bench(args, cfg) -> dict:
    names = [m.strip() for m in _opt(args, cfg, "models", "pdnet,pdunet").split(",") if m.strip()]
    for n in names:
        if n not in MODEL_KINDS:
            raise UsageError(f"unknown model {n!r}; expected one of {MODEL_KINDS}")
    try:
        projections = [int(p) for p in str(_opt(args, cfg, "projections", "45,90,180,360")).split(",")]
    except ValueError as exc:
        raise UsageError(f"bad --projections: {exc}") from exc
    size = _opt(args, cfg, "size", 64)
    base = _model_spec(args, cfg, "pdunet", size, 1.0)
    models = {}
    for n in names:
        spec = ModelSpec(n, size, 1.0, base.unet, base.pd, seed=args.seed)
        if n == "pdnet" and "pdunet" in names:
            iters = matched_pdnet_iterations(ModelSpec("pdunet", size, 1.0, base.unet, base.pd))
            spec = ModelSpec(n, size, 1.0, base.unet, PDConfig(**{**asdict(base.pd), "n_iterations": iters}), seed=args.seed)
        models[n] = build_model(spec)
    rows = inference_benchmark(models, size, projections, batch_size=_opt(args, cfg, "batch", 4),
                               repeats=_opt(args, cfg, "repeats", 20), warmup=_opt(args, cfg, "warmup", 2), seed=args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "bench.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)
    for r in rows:
        print(f"{r['model']:>10s} {r['projections']:4d} proj  median {r['median_s']:.4f}s  IQR {r['iqr_s']:.4f}s")
    return {"config": {"models": names, "projections": projections, "size": size}, "outputs": {"csv": str(out / "bench.csv")}}


def cmd_report(args, cfg) -> dict:
    src = Path(args.input)
    try:
        rep = MetricsReport.from_csv(src / "metrics.csv")
    except OSError as exc:
        raise UsageError(f"no metrics.csv in {src}") from exc
    lines = ["| method | n | SSIM | RMSE (HU) |", "|---|---|---|---|"]
    for m, s in rep.summary().items():
        lines.append(f"| {m} | {s['n']} | {s['ssim_mean']:.3f} ± {s['ssim_std']:.3f} | {s['rmse_hu_mean']:.1f} ± {s['rmse_hu_std']:.1f} |")
    pv = rep.pairwise_pvalues()
    if pv:
        lines += ["", "| comparison | U | p |", "|---|---|---|"]
        lines += [f"| {k} | {v['u']:.1f} | {v['p']:.3g}{' *' if v['significant'] else ''} |" for k, v in pv.items()]
    text = "\n".join(lines) + "\n"
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.md").write_text(text)
    print(text, end="")
    return {"inputs": {"report": str(src)}, "outputs": {"markdown": str(out / "report.md")}}


COMMANDS = {
    "simulate": cmd_simulate,
    "sparsify": cmd_sparsify,
    "reconstruct": cmd_reconstruct,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "bench": cmd_bench,
    "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--threads", type=int, default=None, help="cap BLAS threads; 1 gives bitwise reproducibility")
    common.add_argument("--config", default=None, help="JSON file with option defaults (flags win)")
    common.add_argument("--out", required=True)
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="pdunet", description="Sparse-view CT / radial MRI reconstruction toolkit")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", parents=[common], help="generate a phantom corpus and its measurements")
    s.add_argument("--task", choices=TASKS)
    s.add_argument("--size", type=int)
    s.add_argument("--sparsity", type=int)
    s.add_argument("--n-train", dest="n_train", type=int)
    s.add_argument("--n-val", dest="n_val", type=int)
    s.add_argument("--n-test", dest="n_test", type=int)

    s = sub.add_parser("sparsify", parents=[common], help="keep every n-th projection of a sinogram file")
    s.add_argument("--input", required=True)
    s.add_argument("--sparsity", type=int)

    s = sub.add_parser("reconstruct", parents=[common], help="reconstruct a dataset split")
    s.add_argument("--method", required=True, choices=METHODS)
    s.add_argument("--data", required=True)
    s.add_argument("--split", default="test", choices=("train", "val", "test"))
    s.add_argument("--checkpoint")

    s = sub.add_parser("train", parents=[common], help="train a model on a simulated dataset")
    s.add_argument("--model", choices=MODEL_KINDS)
    s.add_argument("--data", required=True)
    s.add_argument("--task", choices=TASKS, help="must match the dataset")
    s.add_argument("--sparsity", type=int, help="must match the dataset")
    s.add_argument("--epochs", type=int)
    s.add_argument("--batch", type=int)
    s.add_argument("--effective-batch", dest="effective_batch", type=int)
    s.add_argument("--lr", type=float)
    s.add_argument("--max-steps", dest="max_steps", type=int)
    s.add_argument("--base-channels", dest="base_channels", type=int)
    s.add_argument("--depth", type=int)
    s.add_argument("--iterations", type=int)
    s.add_argument("--dual-width", dest="dual_width", type=int)
    s.add_argument("--zero-init", dest="zero_init", action="store_true", default=None)

    s = sub.add_parser("evaluate", parents=[common], help="SSIM / RMSE report with rank-sum tests")
    s.add_argument("--gt", required=True)
    s.add_argument("--pred", required=True, action="append", help="NAME=PATH (repeatable)")
    s.add_argument("--p99", type=float, help="intensity scale for SSIM")

    s = sub.add_parser("bench", parents=[common], help="inference timing over projection counts")
    s.add_argument("--models")
    s.add_argument("--projections")
    s.add_argument("--size", type=int)
    s.add_argument("--batch", type=int)
    s.add_argument("--repeats", type=int)
    s.add_argument("--warmup", type=int)
    s.add_argument("--base-channels", dest="base_channels", type=int)
    s.add_argument("--depth", type=int)
    s.add_argument("--iterations", type=int)
    s.add_argument("--dual-width", dest="dual_width", type=int)

    s = sub.add_parser("report", parents=[common], help="render an evaluate output as markdown")
    s.add_argument("--input", required=True)
    return p


def _check_dataset_flags(args):
    if args.command != "train" or not (args.task or args.sparsity):
        return
    info = json.loads((Path(args.data) / "corpus.json").read_text())
    if args.task and args.task != info["task"]:
        raise UsageError(f"--task {args.task} does not match dataset task {info['task']}")
    if args.sparsity and args.sparsity != info["sparsity"]:
        raise UsageError(f"--sparsity {args.sparsity} does not match dataset sparsity {info['sparsity']}")


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = _load_config(args.config)
        _check_dataset_flags(args)
        with threadpool_limits(limits=args.threads):
            t0 = time.perf_counter()
            result = COMMANDS[args.command](args, cfg)
            elapsed = time.perf_counter() - t0
    except UsageError as exc:
        print(f"pdunet: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (io.FormatError, ConfigError) as exc:
        print(f"pdunet: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NonFiniteLossError as exc:
        print(f"pdunet: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    RunManifest(
        command=args.command,
        config=result.get("config", {}),
        seed=args.seed,
        inputs=result.get("inputs", {}),
        outputs=result.get("outputs", {}),
        timings={"total_s": round(elapsed, 3)},
    ).write(Path(args.out) if not Path(args.out).suffix else Path(args.out).parent)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
