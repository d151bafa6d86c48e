"""ModelBundle container: ``MBD1`` magic, u32 header length, JSON header, raw arrays.

The JSON header holds the model kind, a metadata dict (config snapshot,
deviations, feature layout, standardization constants, seeds) and a table of
arrays with dtype, shape and byte offset into the payload that follows.
Bundles can nest: a DRN bundle carries its frozen encoders as ``uint8``
arrays holding complete encoder bundles.
"""

from __future__ import annotations

import json
import os
import struct
import warnings
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from .errors import BundleError, DataIOError, FormatError

MAGIC = b"MBD1"
FORMAT_VERSION = 1
_LEN = struct.Struct("<I")
KINDS = ("convae", "pca", "emos", "drn")


@dataclass
class Bundle:
    kind: str
    meta: dict
    arrays: dict = field(default_factory=dict)
    created: str = ""


def _timestamp():
    # SOURCE_DATE_EPOCH pins the timestamp for byte-reproducible bundles
    epoch = os.environ.get("SOURCE_DATE_EPOCH")
    now = datetime.fromtimestamp(int(epoch), timezone.utc) if epoch else datetime.now(timezone.utc)
    return now.isoformat(timespec="seconds")


def to_bytes(bundle: Bundle) -> bytes:
    if bundle.kind not in KINDS:
        raise BundleError(f"unknown bundle kind {bundle.kind!r}")
    table, blobs, offset = [], [], 0
    for name in sorted(bundle.arrays):
        arr = np.asarray(bundle.arrays[name])
        if arr.dtype.kind not in "fiub":
            raise BundleError(f"array {name!r}: unsupported dtype {arr.dtype}")
        dt = arr.dtype.newbyteorder("<")
        raw = np.ascontiguousarray(arr, dtype=dt).tobytes()
        table.append({"name": name, "dtype": dt.str, "shape": list(arr.shape),
                      "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    created = bundle.created or _timestamp()
    header = {
        "format_version": FORMAT_VERSION,
        "kind": bundle.kind,
        "created": created,
        "meta": bundle.meta,
        "arrays": table,
    }
    hb = json.dumps(header, sort_keys=True).encode("utf-8")
    return MAGIC + _LEN.pack(len(hb)) + hb + b"".join(blobs)


def from_bytes(buf: bytes, kind: str | None = None, source="<bytes>") -> Bundle:
    if len(buf) < 8:
        raise FormatError(f"{source}: truncated bundle header", offset=len(buf))
    if buf[:4] != MAGIC:
        raise FormatError(f"{source}: bad magic {buf[:4]!r}", offset=0)
    (hlen,) = _LEN.unpack_from(buf, 4)
    if 8 + hlen > len(buf):
        raise FormatError(f"{source}: header length {hlen} exceeds file size", offset=4)
    try:
        header = json.loads(buf[8:8 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{source}: unreadable bundle header ({exc})", offset=8) from exc
    if header.get("format_version") != FORMAT_VERSION:
        raise BundleError(f"{source}: unsupported bundle version {header.get('format_version')}")
    if kind is not None and header.get("kind") != kind:
        raise BundleError(f"{source}: expected a {kind!r} bundle, found {header.get('kind')!r}")
    base = 8 + hlen
    arrays = {}
    end = base
    for entry in header.get("arrays", []):
        start = base + entry["offset"]
        stop = start + entry["nbytes"]
        if stop > len(buf):
            raise FormatError(f"{source}: array {entry['name']!r} truncated", offset=start)
        dt = np.dtype(entry["dtype"])
        arr = np.frombuffer(buf, dtype=dt, count=entry["nbytes"] // max(dt.itemsize, 1), offset=start)
        arrays[entry["name"]] = arr.reshape(entry["shape"]).copy()
        end = max(end, stop)
    if end != len(buf):
        raise FormatError(f"{source}: {len(buf) - end} trailing bytes", offset=end)
    return Bundle(header["kind"], header.get("meta", {}), arrays, header.get("created", ""))


def save_bundle(path, bundle: Bundle) -> None:
    Path(path).write_bytes(to_bytes(bundle))


def load_bundle(path, kind: str | None = None) -> Bundle:
    p = Path(path)
    if not p.is_file():
        raise DataIOError(f"bundle not found: {p}")
    return from_bytes(p.read_bytes(), kind, source=str(p))


# ------------------------------------------------------------- model adapters


def convae_to_bundle(model, variable: str, extra=None) -> Bundle:
    meta = dict(model.metadata(), variable=variable, latent_dim=model.latent_dim,
                param_names=model.param_names())
    meta.update(extra or {})
    arrays = {f"p{i:03d}": w for i, w in enumerate(model.parameters())}
    return Bundle("convae", meta, arrays)


def convae_from_bundle(b: Bundle):
    from .convae import ConvAeConfig, build

    cfg = ConvAeConfig(**b.meta["config"])
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        model = build(cfg)
    params = model.parameters()
    if len(b.arrays) != len(params):
        raise BundleError(f"convae bundle has {len(b.arrays)} arrays, model needs {len(params)}")
    model.set_weights([b.arrays[f"p{i:03d}"] for i in range(len(params))])
    model.history = [tuple(r) for r in b.meta.get("history", [])]
    model.best_epoch = b.meta.get("best_epoch")
    return model


def pca_to_bundle(model, variable: str, extra=None) -> Bundle:
    meta = {"variable": variable, "latent_dim": model.h, "tail_variance": model.tail_variance,
            "field_shape": list(model.field_shape)}
    meta.update(extra or {})
    return Bundle("pca", meta, {"mean": model.mean, "components": model.components,
                                "eigenvalues": model.eigenvalues})


def pca_from_bundle(b: Bundle):
    from .pca import PcaModel

    a = b.arrays
    return PcaModel(a["mean"], a["components"], a["eigenvalues"], float(b.meta["tail_variance"]),
                    tuple(b.meta.get("field_shape", ())))


def encoder_to_bundle(model, variable, extra=None) -> Bundle:
    from .convae import ConvAeModel

    if isinstance(model, ConvAeModel):
        return convae_to_bundle(model, variable, extra)
    return pca_to_bundle(model, variable, extra)


def encoder_from_bundle(b: Bundle):
    if b.kind == "convae":
        return convae_from_bundle(b)
    if b.kind == "pca":
        return pca_from_bundle(b)
    raise BundleError(f"bundle kind {b.kind!r} is not an encoder")


def emos_to_bundle(params, target: str, extra=None) -> Bundle:
    meta = {"target": target, "station_ids": [str(s) for s in params.station_ids],
            "link": "sigma = softplus(c + d * sd)"}
    meta.update(extra or {})
    return Bundle("emos", meta, {"a": params.a, "b": params.b, "c": params.c, "d": params.d})


def emos_from_bundle(b: Bundle):
    from .postproc.emos import EmosParams

    a = b.arrays
    return EmosParams(a["a"], a["b"], a["c"], a["d"], list(b.meta["station_ids"]))


def drn_to_bundle(models, target: str, encoders=None, extra=None) -> Bundle:
    """Bundle for a list of DRN repetitions plus their frozen encoders ``{var: Bundle}``."""
    first = models[0]
    meta = {
        "target": target,
        "config": first.config.to_dict(),
        "architecture": first.config.architecture(),
        "deviations": first.config.deviations(),
        "layout": first.layout.to_dict(),
        "y_mean": first.y_mean,
        "y_sd": first.y_sd,
        "repetitions": [
            {"repetition": m.repetition, "best_epoch": m.best_epoch,
             "history": [list(r) for r in m.history]} for m in models
        ],
        "param_names": first.param_names(),
        "encoders": sorted(encoders or {}),
    }
    meta.update(extra or {})
    arrays = {}
    for m in models:
        for i, w in enumerate(m.parameters()):
            arrays[f"rep{m.repetition:03d}.p{i:03d}"] = w
    for var, eb in (encoders or {}).items():
        arrays[f"encoder.{var}"] = np.frombuffer(to_bytes(eb), dtype=np.uint8)
    return Bundle("drn", meta, arrays)


def drn_from_bundle(b: Bundle):
    """``(models, encoders)`` where encoders maps variable -> encoder Bundle."""
    from .postproc.drn import DrnConfig, DrnModel
    from .postproc.features import FeatureLayout

    meta = b.meta
    cfg = DrnConfig(**meta["config"])
    layout = FeatureLayout.from_dict(meta["layout"])
    models = []
    for rep in meta["repetitions"]:
        k = rep["repetition"]
        m = DrnModel(cfg, layout, meta["y_mean"], meta["y_sd"], k)
        names = sorted(n for n in b.arrays if n.startswith(f"rep{k:03d}."))
        if len(names) != len(m.parameters()):
            raise BundleError(f"repetition {k}: {len(names)} arrays, model needs {len(m.parameters())}")
        m.set_weights([b.arrays[n] for n in names])
        m.history = [tuple(r) for r in rep["history"]]
        m.best_epoch = rep["best_epoch"]
        models.append(m)
    encoders = {
        var: from_bytes(b.arrays[f"encoder.{var}"].tobytes(), source=f"embedded encoder {var}")
        for var in meta.get("encoders", [])
    }
    return models, encoders
