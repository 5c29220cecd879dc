"""Checkpoint persistence for both networks.

Binary layout: magic ``SDFL1``, a version byte, a length-prefixed JSON
header, then a blob of little-endian float32 arrays.  The header names every
array (parameters, normalization running statistics, optimizer moments) with
its shape and offset; loss weights and training metadata travel in the
header itself.  Floats in the payload round-trip bit-for-bit on every
platform; the loader byte-swaps on big-endian hosts.

Version or kind mismatches and unrecognized header fields are refused
rather than guessed at.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass

import numpy as np

from . import denoiser as dn
from . import featnet as fn
from . import ndgrad as ng

MAGIC = b"SDFL1"
VERSION = 1
KINDS = ("denoiser", "featnet")
_HEADER_KEYS = {"kind", "config", "tasks", "meta", "lambda", "adam", "entries"}


class CheckpointError(ValueError):
    """Unreadable or incompatible checkpoint."""


@dataclass
class AdamSnapshot:
    names: list[str]
    steps: list[int]
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]

    @classmethod
    def of(cls, opt: ng.Adam) -> "AdamSnapshot":
        return cls(names=list(opt.names),
                   steps=[st.step for st in opt.state],
                   m={n: st.m for n, st in zip(opt.names, opt.state)},
                   v={n: st.v for n, st in zip(opt.names, opt.state)})

    def restore_into(self, opt: ng.Adam):
        if list(opt.names) != self.names:
            raise CheckpointError("optimizer parameter names do not match "
                                  "the checkpointed optimizer state")
        for name, st, step in zip(opt.names, opt.state, self.steps):
            st.m = self.m[name].astype(st.m.dtype).reshape(st.m.shape)
            st.v = self.v[name].astype(st.v.dtype).reshape(st.v.shape)
            st.step = int(step)


@dataclass
class Loaded:
    kind: str
    params: object                   # DenoiserParams or FeatureNetParams
    meta: dict
    weights: fn.LossWeights | None
    adam: AdamSnapshot | None


def _gather(kind: str, params, adam: AdamSnapshot | None):
    """Ordered (name, array) list covering parameters, BN stats, moments."""
    arrays: list[tuple[str, np.ndarray]] = []
    for name, tensor in params.named_parameters():
        arrays.append((name, tensor.data))
    for k, st in enumerate(params.bn):
        if st.initialized:
            arrays.append((f"layer{k + 1}.bn.running_mean", st.running_mean))
            arrays.append((f"layer{k + 1}.bn.running_var", st.running_var))
    if adam is not None:
        for name in adam.names:
            arrays.append((f"adam.m.{name}", adam.m[name]))
            arrays.append((f"adam.v.{name}", adam.v[name]))
    return arrays


def save_checkpoint(path, kind: str, params, meta: dict | None = None,
                    weights: fn.LossWeights | None = None,
                    opt: ng.Adam | None = None):
    """Serialize parameters (plus optional loss weights and optimizer state,
    which is what makes interrupted trainings resumable bit-for-bit)."""
    if kind not in KINDS:
        raise CheckpointError(f"unknown checkpoint kind {kind!r}")
    adam = AdamSnapshot.of(opt) if opt is not None else None
    arrays = _gather(kind, params, adam)

    entries = []
    offset = 0
    blobs = []
    for name, arr in arrays:
        a = np.ascontiguousarray(arr, dtype="<f4")
        entries.append([name, list(a.shape), offset])
        blobs.append(a.tobytes())
        offset += a.size

    header: dict = {
        "kind": kind,
        "meta": dict(meta or {}),
        "entries": entries,
        "lambda": None,
        "adam": None,
    }
    if kind == "denoiser":
        header["config"] = {"width": params.config.width,
                            "n_layers": params.config.n_layers}
        header["tasks"] = None
    else:
        header["config"] = {"n_layers": params.config.n_layers,
                            "base_width": params.config.base_width,
                            "widen_every": params.config.widen_every}
        header["tasks"] = [{"name": t.name, "n_classes": t.n_classes,
                            "mode": t.mode} for t in params.tasks]
    if weights is not None:
        header["lambda"] = {"values": [float(v) for v in weights.lambdas],
                            "calibrated": bool(weights.calibrated)}
    if adam is not None:
        header["adam"] = {"names": adam.names, "steps": adam.steps}

    head = json.dumps(header).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<B", VERSION))
        fh.write(struct.pack("<I", len(head)))
        fh.write(head)
        for blob in blobs:
            fh.write(blob)


def _rebuild_denoiser(config: dict, get) -> dn.DenoiserParams:
    cfg = dn.DenoiserConfig(**config)
    kernels, alphas, betas, bn = [], [], [], []
    for k in range(cfg.n_layers):
        kernels.append(ng.parameter(get(f"layer{k + 1}.kernel")))
        alphas.append(ng.parameter(get(f"layer{k + 1}.alpha")))
        betas.append(ng.parameter(get(f"layer{k + 1}.beta")))
        st = ng.BatchNormState(cfg.width)
        mean = get(f"layer{k + 1}.bn.running_mean", optional=True)
        if mean is not None:
            st.set_running(mean, get(f"layer{k + 1}.bn.running_var"))
        bn.append(st)
    return dn.DenoiserParams(cfg, kernels, alphas, betas, bn,
                             ng.parameter(get("out.weight")),
                             ng.parameter(get("out.bias")))


def _rebuild_featnet(config: dict, tasks: list[dict], get) -> fn.FeatureNetParams:
    cfg = fn.FeatureNetConfig(**config)
    specs = [fn.TaskSpec(t["name"], int(t["n_classes"]), t["mode"])
             for t in tasks]
    widths = cfg.widths()
    kernels, bn = [], []
    for m, w in enumerate(widths):
        kernels.append(ng.parameter(get(f"layer{m + 1}.kernel")))
        st = ng.BatchNormState(w)
        st.gamma = ng.parameter(get(f"layer{m + 1}.bn.gamma"))
        st.beta = ng.parameter(get(f"layer{m + 1}.bn.beta"))
        mean = get(f"layer{m + 1}.bn.running_mean", optional=True)
        if mean is not None:
            st.set_running(mean, get(f"layer{m + 1}.bn.running_var"))
        bn.append(st)
    heads = [(ng.parameter(get(f"head.{t.name}.weight")),
              ng.parameter(get(f"head.{t.name}.bias"))) for t in specs]
    return fn.FeatureNetParams(cfg, specs, kernels, bn, heads)


def load_checkpoint(path, expect_kind: str | None = None) -> Loaded:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < len(MAGIC) + 5 or raw[:len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    version = raw[len(MAGIC)]
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version} "
                              f"(this build reads version {VERSION})")
    head_off = len(MAGIC) + 1
    (head_len,) = struct.unpack_from("<I", raw, head_off)
    try:
        header = json.loads(raw[head_off + 4:head_off + 4 + head_len])
    except ValueError as exc:
        raise CheckpointError(f"{path}: corrupt header ({exc})") from exc
    unknown = set(header) - _HEADER_KEYS
    if unknown:
        raise CheckpointError(f"{path}: unrecognized header fields {sorted(unknown)}")
    kind = header.get("kind")
    if kind not in KINDS:
        raise CheckpointError(f"{path}: unknown checkpoint kind {kind!r}")
    if expect_kind is not None and kind != expect_kind:
        raise CheckpointError(f"{path}: is a {kind} checkpoint, "
                              f"expected {expect_kind}")

    payload = np.frombuffer(raw[head_off + 4 + head_len:], dtype="<f4")
    index = {name: (shape, off) for name, shape, off in header["entries"]}

    def get(name: str, optional: bool = False):
        if name not in index:
            if optional:
                return None
            raise CheckpointError(f"{path}: missing entry {name!r}")
        shape, off = index[name]
        size = int(np.prod(shape)) if shape else 1
        arr = payload[off:off + size].astype(np.float32).reshape(shape)
        return arr.copy()

    if kind == "denoiser":
        params = _rebuild_denoiser(header["config"], get)
    else:
        params = _rebuild_featnet(header["config"], header["tasks"], get)

    weights = None
    if header.get("lambda") is not None:
        weights = fn.LossWeights(
            lambdas=np.asarray(header["lambda"]["values"], dtype=np.float64),
            calibrated=bool(header["lambda"]["calibrated"]))

    adam = None
    if header.get("adam") is not None:
        names = list(header["adam"]["names"])
        adam = AdamSnapshot(
            names=names,
            steps=[int(s) for s in header["adam"]["steps"]],
            m={n: get(f"adam.m.{n}") for n in names},
            v={n: get(f"adam.v.{n}") for n in names})

    return Loaded(kind, params, dict(header.get("meta") or {}), weights, adam)
