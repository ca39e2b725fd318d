"""The four reconstruction networks: Reconstruction UNet, Sinogram UNet,
Primal-Dual Network and Primal-Dual UNet."""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import ParamStore, Tensor
from .geometry import Geometry, SparsityPattern
from .projectors import fbp, projector_opnorm_sq
from .sinogram_ops import DegenerateInputError, NormCounter, znorm_stats

MODEL_KINDS = ("recon-unet", "sino-unet", "pdnet", "pdunet")


class ConfigError(ValueError):
    """Model configuration is inconsistent with the data."""


@dataclass(frozen=True)
class UNetConfig:
    in_channels: int = 1
    out_channels: int = 1
    base_channels: int = 32
    depth: int = 3

    def __post_init__(self):
        if self.depth < 1:
            raise ConfigError("UNet depth must be >= 1")


@dataclass(frozen=True)
class PDConfig:
    n_iterations: int = 2
    primal_memory: int = 5
    dual_memory: int = 5
    primal_block: str = "conv-stack"  # or "unet"
    dual_width: int = 32
    dual_layers: int = 3
    primal_width: int = 32
    primal_layers: int = 3
    unet_base: int = 32
    unet_depth: int = 3
    zero_init: bool = False

    def __post_init__(self):
        if self.n_iterations < 1:
            raise ConfigError("n_iterations must be >= 1")
        if self.primal_memory < 1 or self.dual_memory < 1:
            raise ConfigError("memory channels must be >= 1")
        if self.primal_block not in ("conv-stack", "unet"):
            raise ConfigError(f"unknown primal block {self.primal_block!r}")


# ------------------------------------------------------------------ blocks


class ConvStack:
    """3x3 convolutions with PReLU between them (none after the last)."""

    def __init__(self, store: ParamStore, prefix: str, channels: list[int]):
        self.layers = []
        for i, (cin, cout) in enumerate(zip(channels[:-1], channels[1:])):
            w = store.kaiming_uniform(f"{prefix}.conv{i}.w", (cout, cin, 3, 3), fan_in=cin * 9)
            b = store.zeros(f"{prefix}.conv{i}.b", (cout,))
            a = store.full(f"{prefix}.conv{i}.prelu", (cout,), 0.25) if i < len(channels) - 2 else None
            self.layers.append((w, b, a))

    @property
    def head(self):
        return self.layers[-1]

    def __call__(self, x: Tensor) -> Tensor:
        for w, b, a in self.layers:
            x = ad.conv2d(x, w, b)
            if a is not None:
                x = ad.prelu(x, a)
        return x


class UNet:
    """Encoder/decoder with concatenated skips, stride-2 conv down, transposed conv up."""

    def __init__(self, store: ParamStore, prefix: str, cfg: UNetConfig):
        self.cfg = cfg
        ch = [cfg.base_channels * 2**level for level in range(cfg.depth + 1)]
        self.enc = []
        self.down = []
        cin = cfg.in_channels
        for level in range(cfg.depth):
            self.enc.append(ConvStack(store, f"{prefix}.enc{level}", [cin, ch[level], ch[level]]))
            self._act_last(store, f"{prefix}.enc{level}", ch[level], self.enc[-1])
            w = store.kaiming_uniform(f"{prefix}.down{level}.w", (ch[level], ch[level], 2, 2), fan_in=ch[level] * 4)
            b = store.zeros(f"{prefix}.down{level}.b", (ch[level],))
            self.down.append((w, b))
            cin = ch[level]
        self.bottom = ConvStack(store, f"{prefix}.bottom", [ch[cfg.depth - 1], ch[cfg.depth], ch[cfg.depth]])
        self._act_last(store, f"{prefix}.bottom", ch[cfg.depth], self.bottom)
        self.up = []
        self.dec = []
        for level in reversed(range(cfg.depth)):
            w = store.kaiming_uniform(f"{prefix}.up{level}.w", (ch[level + 1], ch[level], 2, 2), fan_in=ch[level + 1] * 4)
            b = store.zeros(f"{prefix}.up{level}.b", (ch[level],))
            self.up.append((w, b))
            self.dec.append(ConvStack(store, f"{prefix}.dec{level}", [2 * ch[level], ch[level], ch[level]]))
            self._act_last(store, f"{prefix}.dec{level}", ch[level], self.dec[-1])
        self.head_w = store.kaiming_uniform(f"{prefix}.head.w", (cfg.out_channels, ch[0], 1, 1), fan_in=ch[0])
        self.head_b = store.zeros(f"{prefix}.head.b", (cfg.out_channels,))

    @staticmethod
    def _act_last(store, prefix, channels, stack):
        # UNet stages keep an activation after their last conv as well
        w, b, _ = stack.layers[-1]
        stack.layers[-1] = (w, b, store.full(f"{prefix}.conv{len(stack.layers) - 1}.prelu", (channels,), 0.25))

    @property
    def head(self):
        return self.head_w, self.head_b

    def __call__(self, x: Tensor) -> Tensor:
        f = 2**self.cfg.depth
        if x.shape[-2] % f or x.shape[-1] % f:
            raise ConfigError(f"spatial size {x.shape[-2:]} not divisible by {f}")
        skips = []
        for enc, (w, b) in zip(self.enc, self.down):
            x = enc(x)
            skips.append(x)
            x = ad.conv2d_stride2(x, w, b)
        x = self.bottom(x)
        for (w, b), dec, skip in zip(self.up, self.dec, reversed(skips)):
            x = ad.conv_transpose2d_stride2(x, w, b)
            x = dec(ad.concat([x, skip], axis=1))
        return ad.conv2d(x, self.head_w, self.head_b)


def zero_head(model):
    """Zero the final layer of every learned block (used for sanity checks)."""
    for block in model.blocks():
        for t in block.head:
            if t is not None:
                t.data[...] = 0


# ------------------------------------------------------------------ models


@dataclass
class Batch:
    """Precomputed network inputs for a batch of examples (leading axis = batch)."""

    sparse: np.ndarray  # [B, A_s, D] sparse sinogram rows
    full_sino: np.ndarray  # [B, A, D]
    target: np.ndarray  # [B, N, N] ground truth
    recon_input: np.ndarray  # [B, N, N] FBP (CT) or adjoint NUFFT (MRI) of the sparse data
    sparse_fbp: np.ndarray  # [B, N, N]
    upsampled: np.ndarray  # [B, A, D] bilinear upsampled sinogram
    full_geom: Geometry = None
    sparse_geom: Geometry = None
    pattern: SparsityPattern = None

    def __len__(self):
        return self.target.shape[0]


def _as_nchw(arr, dtype):
    return np.ascontiguousarray(np.asarray(arr, dtype=dtype)[:, None])


def _batch_stats(sparse) -> np.ndarray:
    """Per-sample ``(mu, sigma)`` of the measured rows.

    A constant sinogram (e.g. an empty scan) has no z-score; inside a model it
    is only shifted by its mean (sigma taken as 1) so a blank input still
    produces an output instead of aborting a whole batch.
    """
    out = []
    for s in sparse:
        try:
            out.append(znorm_stats(s))
        except DegenerateInputError:
            out.append((float(np.mean(s)), 1.0))
    return np.array(out)


def _pad_to(n: int, f: int) -> int:
    return (-n) % f


@dataclass
class ModelSpec:
    kind: str
    size: int
    p99: float = 1.0
    unet: UNetConfig = field(default_factory=UNetConfig)
    pd: PDConfig = field(default_factory=PDConfig)
    seed: int = 0

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "size": self.size,
            "p99": self.p99,
            "unet": asdict(self.unet),
            "pd": asdict(self.pd),
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        return cls(
            kind=d["kind"],
            size=int(d["size"]),
            p99=float(d["p99"]),
            unet=UNetConfig(**d["unet"]),
            pd=PDConfig(**d["pd"]),
            seed=int(d.get("seed", 0)),
        )

    def config_hash(self) -> str:
        d = self.to_dict()
        d.pop("p99")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]


class Model:
    """Common surface: ``predict`` (graph in normalised space), ``loss_target`` and ``reconstruct``."""

    kind = ""

    def __init__(self, spec: ModelSpec, dtype=np.float32):
        self.spec = spec
        self.dtype = np.dtype(dtype)
        self.store = ParamStore(dtype=dtype, seed=spec.seed)
        self.counter = NormCounter()

    @property
    def p99(self) -> float:
        return self.spec.p99

    def n_params(self) -> int:
        return self.store.count()

    def blocks(self):
        return []

    def predict(self, batch: Batch) -> Tensor:
        raise NotImplementedError

    def loss_target(self, batch: Batch) -> np.ndarray:
        return _as_nchw(batch.target / self.p99, self.dtype)

    def loss(self, batch: Batch) -> Tensor:
        return ad.l1_loss(self.predict(batch), self.loss_target(batch))

    def reconstruct(self, batch: Batch) -> np.ndarray:
        """Physical-unit images ``[B, N, N]``."""
        with ad.no_grad():
            out = self.predict(batch)
        self.counter.hit("output_denorm")
        return out.data[:, 0].astype(np.float64) * self.p99


class ReconstructionUNet(Model):
    """UNet mapping the normalised artefact-laden reconstruction to the normalised ground truth."""

    kind = "recon-unet"

    def __init__(self, spec: ModelSpec, dtype=np.float32):
        super().__init__(spec, dtype)
        cfg = UNetConfig(1, 1, spec.unet.base_channels, spec.unet.depth)
        if spec.size % 2**cfg.depth:
            raise ConfigError(f"image size {spec.size} not divisible by {2 ** cfg.depth}")
        self.unet = UNet(self.store, "unet", cfg)

    def blocks(self):
        return [self.unet]

    def predict(self, batch: Batch) -> Tensor:
        self.counter.reset()
        x = Tensor(_as_nchw(batch.recon_input / self.p99, self.dtype))
        self.counter.hit("image_norm")
        return self.unet(x)


class SinogramUNet(Model):
    """Residual UNet refining a bilinearly upsampled, z-normalised sinogram."""

    kind = "sino-unet"

    def __init__(self, spec: ModelSpec, dtype=np.float32):
        super().__init__(spec, dtype)
        cfg = UNetConfig(1, 1, spec.unet.base_channels, spec.unet.depth)
        self.unet = UNet(self.store, "unet", cfg)

    def blocks(self):
        return [self.unet]

    def _stats(self, batch: Batch):
        stats = _batch_stats(batch.sparse)
        return stats[:, 0].reshape(-1, 1, 1, 1), stats[:, 1].reshape(-1, 1, 1, 1)

    def predict(self, batch: Batch) -> Tensor:
        self.counter.reset()
        mu, sigma = self._stats(batch)
        self.counter.hit("sino_stats")
        x = Tensor(_as_nchw(batch.upsampled, np.float64))
        x = Tensor(((x.data - mu) / sigma).astype(self.dtype))
        self.counter.hit("sino_norm")
        a, d = x.shape[-2:]
        f = 2**self.unet.cfg.depth
        ph, pw = _pad_to(a, f), _pad_to(d, f)
        xp = ad.pad2d(x, ph, pw) if ph or pw else x
        y = self.unet(xp)
        if ph or pw:
            y = y[:, :, :a, :d]
        return x + y

    def loss_target(self, batch: Batch) -> np.ndarray:
        mu, sigma = self._stats(batch)
        return ((_as_nchw(batch.full_sino, np.float64) - mu) / sigma).astype(self.dtype)

    def refine(self, batch: Batch) -> np.ndarray:
        """De-normalised refined sinograms ``[B, A, D]``."""
        with ad.no_grad():
            out = self.predict(batch)
        mu, sigma = self._stats(batch)
        self.counter.hit("sino_denorm")
        return out.data[:, 0].astype(np.float64) * sigma[:, 0] + mu[:, 0]

    def reconstruct(self, batch: Batch) -> np.ndarray:
        return fbp(self.refine(batch), batch.full_geom, self.spec.size)


class PrimalDual(Model):
    """Unrolled learned primal-dual scheme with memory channels.

    The dual state lives on the full angle grid; the measured sparse rows are
    scattered into it and flagged by a mask channel. All sinogram-space block
    inputs are z-normalised with the statistics of the measured sparse
    sinogram, all image-space block inputs are divided by the corpus p99, and
    every block output is mapped back to physical units before the next
    projection.
    """

    def __init__(self, spec: ModelSpec, dtype=np.float32):
        super().__init__(spec, dtype)
        cfg = spec.pd
        self.cfg = cfg
        dual_in = cfg.dual_memory + 3
        primal_in = cfg.primal_memory + 1
        self.dual = []
        self.primal = []
        for i in range(cfg.n_iterations):
            widths = [dual_in] + [cfg.dual_width] * (cfg.dual_layers - 1) + [cfg.dual_memory]
            self.dual.append(ConvStack(self.store, f"dual{i}", widths))
            if cfg.primal_block == "unet":
                ucfg = UNetConfig(primal_in, cfg.primal_memory, cfg.unet_base, cfg.unet_depth)
                if spec.size % 2**ucfg.depth:
                    raise ConfigError(f"image size {spec.size} not divisible by {2 ** ucfg.depth}")
                self.primal.append(UNet(self.store, f"primal{i}", ucfg))
            else:
                widths = [primal_in] + [cfg.primal_width] * (cfg.primal_layers - 1) + [cfg.primal_memory]
                self.primal.append(ConvStack(self.store, f"primal{i}", widths))

    def blocks(self):
        return self.dual + self.primal

    def predict(self, batch: Batch) -> Tensor:
        self.counter.reset()
        c = self.counter
        cfg = self.cfg
        geom = batch.full_geom
        n = self.spec.size
        b = len(batch)
        dt = self.dtype
        stats = _batch_stats(batch.sparse)
        c.hit("sino_stats")
        mu = stats[:, 0].reshape(-1, 1, 1, 1)
        sigma = stats[:, 1].reshape(-1, 1, 1, 1)
        inv_sigma = (1 / sigma).astype(dt)
        shift = (-mu / sigma).astype(dt)
        p99 = self.p99
        bp_scale = 1.0 / projector_opnorm_sq(geom, n)

        mask = np.zeros((b, 1, geom.n_angles, geom.n_detectors), dt)
        mask[:, :, list(batch.pattern.kept_indices), :] = 1
        g = np.zeros((b, 1, geom.n_angles, geom.n_detectors))
        g[:, 0, list(batch.pattern.kept_indices), :] = batch.sparse
        g_n = Tensor((((g - mu) / sigma) * mask).astype(dt))
        mask_t = Tensor(mask)

        if cfg.zero_init:
            f0 = np.zeros((b, n, n))
        else:
            f0 = batch.sparse_fbp
            c.hit("fbp")
        f = Tensor(np.repeat(np.asarray(f0, dt)[:, None], cfg.primal_memory, axis=1))
        h = Tensor(np.zeros((b, cfg.dual_memory, geom.n_angles, geom.n_detectors), dt))

        for i in range(cfg.n_iterations):
            af = ad.project(f[:, 0:1], geom)
            h_n = ad.affine(h, inv_sigma, shift)
            af_n = ad.affine(af, inv_sigma, shift)
            c.hit("dual_in_znorm")
            dh = self.dual[i](ad.concat([h_n, af_n, g_n, mask_t], axis=1))
            c.hit("dual_blocks")
            h = h + ad.affine(dh, sigma.astype(dt), 0.0)
            c.hit("dual_out_denorm")

            bp = ad.backproject(h[:, 0:1], geom, n)
            primal_in = ad.concat([ad.affine(f, 1 / p99, 0.0), ad.affine(bp, bp_scale / p99, 0.0)], axis=1)
            c.hit("primal_in_imgnorm")
            df = self.primal[i](primal_in)
            c.hit("primal_blocks")
            f = f + ad.affine(df, p99, 0.0)
            c.hit("primal_out_imgdenorm")
        # normalised output for the loss; reconstruct() de-normalises once
        return ad.affine(f[:, 0:1], 1 / p99, 0.0)


class PrimalDualNet(PrimalDual):
    kind = "pdnet"


class PrimalDualUNet(PrimalDual):
    kind = "pdunet"


_KINDS = {
    "recon-unet": ReconstructionUNet,
    "sino-unet": SinogramUNet,
    "pdnet": PrimalDualNet,
    "pdunet": PrimalDualUNet,
}


def build_model(spec: ModelSpec, dtype=np.float32) -> Model:
    if spec.kind not in _KINDS:
        raise ConfigError(f"unknown model kind {spec.kind!r}; expected one of {MODEL_KINDS}")
    if spec.kind == "pdunet" and spec.pd.primal_block != "unet":
        spec = ModelSpec(spec.kind, spec.size, spec.p99, spec.unet, _replace_pd(spec.pd, primal_block="unet"), spec.seed)
    if spec.kind == "pdnet" and spec.pd.primal_block != "conv-stack":
        spec = ModelSpec(spec.kind, spec.size, spec.p99, spec.unet, _replace_pd(spec.pd, primal_block="conv-stack"), spec.seed)
    return _KINDS[spec.kind](spec, dtype)


def _replace_pd(cfg: PDConfig, **kw) -> PDConfig:
    d = asdict(cfg)
    d.update(kw)
    return PDConfig(**d)


def matched_pdnet_iterations(pdunet_spec: ModelSpec, tolerance: float = 0.10) -> int:
    """PD-Net iteration count whose parameter count is closest to the PD-UNet's."""
    target = build_model(pdunet_spec).n_params()
    one = build_model(
        ModelSpec("pdnet", pdunet_spec.size, pdunet_spec.p99, pdunet_spec.unet, _replace_pd(pdunet_spec.pd, n_iterations=1))
    ).n_params()
    iters = max(1, int(round(target / one)))
    if abs(iters * one - target) > tolerance * target:
        raise ConfigError(f"cannot match {target} parameters within {tolerance:.0%} using blocks of {one}")
    return iters
