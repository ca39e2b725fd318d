"""Raw little-endian array files with a JSON sidecar, plus checkpoints.

An array ``x`` saved at ``foo.bin`` is written as ``foo.bin`` (payload) and
``foo.json`` (header). The header records kind, dtype, shape, byte order,
unit, optional geometry and a SHA-256 of the payload, and is validated
against ``ARRAY_SCHEMA`` on load. Every failure on load raises a subclass of
``FormatError``.
"""
from __future__ import annotations

import hashlib
import json
import os
import tempfile
from pathlib import Path

import jsonschema
import numpy as np

from .fourier import RadialKSpace
from .geometry import GeometryError, geometry_from_dict
from .projectors import Sinogram

FORMAT = "pdunet-array"
CHECKPOINT_FORMAT = "pdunet-checkpoint"
VERSION = 1
KINDS = ("image", "sinogram", "kspace", "array")
DTYPES = {"float32": "<f4", "float64": "<f8", "complex64": "<c8", "complex128": "<c16", "int64": "<i8"}
MAX_ELEMENTS = 1 << 31

ARRAY_SCHEMA = {
    "type": "object",
    "required": ["format", "version", "kind", "dtype", "shape", "endianness", "payload_bytes", "sha256"],
    "properties": {
        "format": {"const": FORMAT},
        "version": {"const": VERSION},
        "kind": {"enum": list(KINDS)},
        "dtype": {"enum": list(DTYPES)},
        "shape": {"type": "array", "items": {"type": "integer", "minimum": 0}, "maxItems": 8},
        "endianness": {"type": "string"},
        "unit": {"type": ["string", "null"]},
        "payload_bytes": {"type": "integer", "minimum": 0},
        "sha256": {"type": "string", "pattern": "^[0-9a-f]{64}$"},
        "geometry": {"type": ["object", "null"]},
        "spoke_angles": {"type": "array", "items": {"type": "number"}},
        "meta": {"type": "object"},
    },
}

_TENSOR_ENTRY = {
    "type": "object",
    "required": ["name", "dtype", "shape", "offset", "nbytes"],
    "properties": {
        "name": {"type": "string"},
        "dtype": {"enum": list(DTYPES)},
        "shape": {"type": "array", "items": {"type": "integer", "minimum": 0}, "maxItems": 8},
        "offset": {"type": "integer", "minimum": 0},
        "nbytes": {"type": "integer", "minimum": 0},
    },
}

CHECKPOINT_SCHEMA = {
    "type": "object",
    "required": ["format", "version", "endianness", "tensors", "payload_bytes", "sha256", "meta"],
    "properties": {
        "format": {"const": CHECKPOINT_FORMAT},
        "version": {"const": VERSION},
        "endianness": {"type": "string"},
        "tensors": {"type": "array", "items": _TENSOR_ENTRY},
        "payload_bytes": {"type": "integer", "minimum": 0},
        "sha256": {"type": "string", "pattern": "^[0-9a-f]{64}$"},
        "meta": {"type": "object"},
    },
}


class FormatError(ValueError):
    """Base class of every load failure."""


class SchemaError(FormatError):
    """Sidecar is not valid JSON or does not match the schema."""


class KindMismatchError(SchemaError):
    """File holds a different kind of array than requested."""


class EndiannessError(FormatError):
    """Sidecar declares a byte order other than little-endian."""


class TruncatedPayloadError(FormatError):
    """Payload length differs from what the header implies."""


class ChecksumError(FormatError):
    """Payload bytes do not match the recorded SHA-256."""


def sidecar_path(path) -> Path:
    return Path(path).with_suffix(".json")


def _atomic_write(path: Path, data: bytes):
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _dtype_name(arr: np.ndarray) -> str:
    native = arr.dtype.newbyteorder("=")
    for name in DTYPES:
        if native == np.dtype(name):
            return name
    raise TypeError(f"unsupported dtype {arr.dtype}; expected one of {sorted(DTYPES)}")


def _payload(arr: np.ndarray, name: str) -> bytes:
    return np.ascontiguousarray(arr).astype(DTYPES[name], copy=False).tobytes()


def save_array(path, arr, kind: str = "array", unit: str | None = None, geometry=None, meta=None, **extra) -> Path:
    """Write ``arr`` bit-exactly; returns the payload path."""
    if kind not in KINDS:
        raise ValueError(f"unknown kind {kind!r}")
    arr = np.asarray(arr)
    name = _dtype_name(arr)
    payload = _payload(arr, name)
    header = {
        "format": FORMAT,
        "version": VERSION,
        "kind": kind,
        "dtype": name,
        "shape": [int(s) for s in arr.shape],
        "endianness": "little",
        "unit": unit,
        "payload_bytes": len(payload),
        "sha256": hashlib.sha256(payload).hexdigest(),
        "geometry": geometry.to_dict() if geometry is not None else None,
        "meta": meta or {},
    }
    header.update(extra)
    path = Path(path)
    _atomic_write(path, payload)
    _atomic_write(sidecar_path(path), json.dumps(header, indent=2).encode())
    return path


def _read_header(path: Path, schema: dict) -> dict:
    side = sidecar_path(path)
    try:
        text = side.read_bytes().decode("utf-8")
        header = json.loads(text)
    except FileNotFoundError as exc:
        raise SchemaError(f"missing sidecar {side}") from exc
    except (UnicodeDecodeError, json.JSONDecodeError, RecursionError) as exc:
        raise SchemaError(f"sidecar {side} is not valid JSON: {exc}") from exc
    try:
        jsonschema.validate(header, schema)
    except jsonschema.ValidationError as exc:
        raise SchemaError(f"sidecar {side} fails schema at {list(exc.absolute_path)}: {exc.message}") from exc
    except RecursionError as exc:
        raise SchemaError(f"sidecar {side} is too deeply nested") from exc
    if header["endianness"] != "little":
        raise EndiannessError(f"payload declared {header['endianness']!r}-endian; only little-endian is supported")
    return header


def _expected_bytes(dtype: str, shape) -> int:
    n = 1
    for s in shape:
        n *= s
        if n > MAX_ELEMENTS:
            raise SchemaError(f"shape {shape} exceeds {MAX_ELEMENTS} elements")
    return n * np.dtype(DTYPES[dtype]).itemsize


def _read_payload(path: Path, expected: int, declared: int, digest: str) -> bytes:
    if declared != expected:
        raise SchemaError(f"payload_bytes {declared} disagrees with dtype/shape ({expected} bytes)")
    try:
        data = path.read_bytes()
    except FileNotFoundError as exc:
        raise TruncatedPayloadError(f"missing payload {path}: expected {expected} bytes, found 0") from exc
    if len(data) != expected:
        raise TruncatedPayloadError(f"{path}: expected {expected} bytes, found {len(data)}")
    if hashlib.sha256(data).hexdigest() != digest:
        raise ChecksumError(f"{path}: payload checksum mismatch")
    return data


def load_array(path, kind: str | None = None) -> tuple[np.ndarray, dict]:
    """Inverse of ``save_array``; returns ``(array, header)``."""
    path = Path(path)
    header = _read_header(path, ARRAY_SCHEMA)
    if kind is not None and header["kind"] != kind:
        raise KindMismatchError(f"{path} holds a {header['kind']!r}, not a {kind!r}")
    expected = _expected_bytes(header["dtype"], header["shape"])
    data = _read_payload(path, expected, header["payload_bytes"], header["sha256"])
    arr = np.frombuffer(data, dtype=DTYPES[header["dtype"]]).reshape(header["shape"])
    return arr.astype(np.dtype(header["dtype"])), header


def _geometry(header: dict, path):
    if header.get("geometry") is None:
        raise SchemaError(f"{path} has no geometry")
    try:
        return geometry_from_dict(header["geometry"])
    except (GeometryError, TypeError, ValueError, OverflowError) as exc:
        raise SchemaError(f"{path}: invalid geometry: {exc}") from exc


def save_image(path, img, unit: str = "attenuation", meta=None) -> Path:
    img = np.asarray(img)
    if img.ndim < 2:
        raise ValueError("images need at least two dimensions")
    return save_array(path, img, "image", unit=unit, meta=meta)


def load_image(path) -> np.ndarray:
    arr, header = load_array(path, "image")
    if arr.ndim < 2:
        raise SchemaError(f"{path}: image must have at least two dimensions, got shape {header['shape']}")
    return arr


def save_sinogram(path, sino: Sinogram, unit: str = "line-integral", meta=None) -> Path:
    return save_array(path, sino.data, "sinogram", unit=unit, geometry=sino.geometry, meta=meta)


def load_sinogram(path) -> Sinogram:
    arr, header = load_array(path, "sinogram")
    geom = _geometry(header, path)
    try:
        return Sinogram(arr, geom)
    except ValueError as exc:
        raise SchemaError(f"{path}: payload does not match geometry: {exc}") from exc


def save_kspace(path, k: RadialKSpace, meta=None) -> Path:
    return save_array(path, k.data, "kspace", unit="a.u.", spoke_angles=[float(a) for a in k.spoke_angles], meta=meta)


def load_kspace(path) -> RadialKSpace:
    arr, header = load_array(path, "kspace")
    if "spoke_angles" not in header:
        raise SchemaError(f"{path}: k-space header lacks spoke_angles")
    if not np.iscomplexobj(arr):
        raise SchemaError(f"{path}: k-space payload must be complex")
    try:
        return RadialKSpace(arr, np.asarray(header["spoke_angles"], dtype=np.float64))
    except ValueError as exc:
        raise SchemaError(f"{path}: {exc}") from exc


# ------------------------------------------------------------------ checkpoints


def save_checkpoint(path, state: dict, meta: dict | None = None) -> Path:
    """Named tensors in one payload file; ``meta`` (model spec, norm stats, ...) goes in the sidecar."""
    entries, chunks, offset = [], [], 0
    for name, arr in state.items():
        arr = np.asarray(arr)
        dname = _dtype_name(arr)
        raw = _payload(arr, dname)
        entries.append({"name": name, "dtype": dname, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    payload = b"".join(chunks)
    header = {
        "format": CHECKPOINT_FORMAT,
        "version": VERSION,
        "endianness": "little",
        "tensors": entries,
        "payload_bytes": len(payload),
        "sha256": hashlib.sha256(payload).hexdigest(),
        "meta": meta or {},
    }
    path = Path(path)
    _atomic_write(path, payload)
    _atomic_write(sidecar_path(path), json.dumps(header, indent=2).encode())
    return path


def load_checkpoint(path) -> tuple[dict, dict]:
    path = Path(path)
    header = _read_header(path, CHECKPOINT_SCHEMA)
    total = 0
    for e in header["tensors"]:
        n = _expected_bytes(e["dtype"], e["shape"])
        if n != e["nbytes"] or e["offset"] != total:
            raise SchemaError(f"{path}: tensor {e['name']!r} layout is inconsistent")
        total += n
    data = _read_payload(path, total, header["payload_bytes"], header["sha256"])
    state = {}
    for e in header["tensors"]:
        if e["name"] in state:
            raise SchemaError(f"{path}: duplicate tensor {e['name']!r}")
        raw = data[e["offset"] : e["offset"] + e["nbytes"]]
        state[e["name"]] = np.frombuffer(raw, dtype=DTYPES[e["dtype"]]).reshape(e["shape"]).astype(np.dtype(e["dtype"]))
    return state, header["meta"]


ADAM_M = "adam.m/"
ADAM_V = "adam.v/"


def save_model(path, model, extra_meta: dict | None = None, optimizer: bool = True) -> Path:
    """Parameters, plus the Adam moments (``adam.m/<name>``, ``adam.v/<name>``) when ``optimizer``."""
    state = model.store.state_dict()
    meta = {
        "model": model.spec.to_dict(),
        "config_hash": model.spec.config_hash(),
        "dtype": str(model.dtype),
        "norm": {"p99": model.spec.p99},
        "adam_step": model.store.step_count if optimizer else 0,
    }
    meta.update(extra_meta or {})
    if optimizer:
        m, v, _ = model.store.optimizer_state()
        state.update({ADAM_M + k: a for k, a in m.items()})
        state.update({ADAM_V + k: a for k, a in v.items()})
    return save_checkpoint(path, state, meta)


def load_model(path):
    from .models import ModelSpec, build_model

    state, meta = load_checkpoint(path)
    try:
        spec = ModelSpec.from_dict(meta["model"])
        model = build_model(spec, dtype=np.dtype(meta.get("dtype", "float32")))
        if meta.get("config_hash", spec.config_hash()) != spec.config_hash():
            raise ValueError("config hash does not match the stored model description")
        params = {k: a for k, a in state.items() if not k.startswith((ADAM_M, ADAM_V))}
        extra = set(params) - {name for name, _ in model.store}
        if extra:
            raise ValueError(f"unexpected tensors {sorted(extra)[:3]}")
        model.store.load_state_dict(params)
        m = {k[len(ADAM_M):]: a for k, a in state.items() if k.startswith(ADAM_M)}
        v = {k[len(ADAM_V):]: a for k, a in state.items() if k.startswith(ADAM_V)}
        model.store.load_optimizer_state(m, v, int(meta.get("adam_step", 0)))
    except (KeyError, TypeError, ValueError) as exc:
        raise SchemaError(f"{path}: checkpoint does not describe a loadable model: {exc}") from exc
    return model, meta

