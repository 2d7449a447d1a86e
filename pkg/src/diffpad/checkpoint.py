"""Single-file checkpoint container.

A checkpoint is a zip archive (fixed timestamps, stored uncompressed) holding
``meta.json`` plus one ``.npy`` member per array. Parameters and optimizer
state are stored as little-endian float32 with explicit shapes. Writing the
same content twice produces identical bytes.
"""
from __future__ import annotations

import hashlib
import io
import json
import os
import zipfile
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from .data import atomic_write_bytes
from .diffusion import NoiseSchedule
from .errors import BadCheckpoint

FORMAT_VERSION = 1
_EPOCH = (1980, 1, 1, 0, 0, 0)
_KINDS = ("diffusion", "cae", "vae", "feature_extractor")


@dataclass
class Checkpoint:
    kind: str
    meta: dict
    params: dict[str, np.ndarray]
    optim: dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def epoch(self) -> int:
        return int(self.meta.get("epoch", 0))

    def digest(self) -> str:
        """Content hash, independent of the container bytes."""
        h = hashlib.sha256(json.dumps(self.meta, sort_keys=True).encode())
        for group in (self.params, self.optim):
            for name in sorted(group):
                h.update(name.encode())
                h.update(np.ascontiguousarray(group[name], dtype="<f4").tobytes())
        return h.hexdigest()[:16]


def _npy_bytes(arr: np.ndarray) -> bytes:
    buf = io.BytesIO()
    np.lib.format.write_array(buf, np.ascontiguousarray(arr, dtype="<f4"), allow_pickle=False)
    return buf.getvalue()


def checkpoint_bytes(ckpt: Checkpoint) -> bytes:
    meta = dict(ckpt.meta, kind=ckpt.kind, format_version=FORMAT_VERSION)
    buf = io.BytesIO()
    with zipfile.ZipFile(buf, "w", compression=zipfile.ZIP_STORED) as zf:
        def put(name, data):
            info = zipfile.ZipInfo(name, date_time=_EPOCH)
            info.external_attr = 0o644 << 16
            zf.writestr(info, data)

        put("meta.json", json.dumps(meta, sort_keys=True, indent=1))
        for name in sorted(ckpt.params):
            put(f"params/{name}.npy", _npy_bytes(ckpt.params[name]))
        for name in sorted(ckpt.optim):
            put(f"optim/{name}.npy", _npy_bytes(ckpt.optim[name]))
    return buf.getvalue()


def save_checkpoint(ckpt: Checkpoint, path: str | os.PathLike) -> Path:
    if ckpt.kind not in _KINDS:
        raise BadCheckpoint(f"unknown checkpoint kind {ckpt.kind!r}")
    atomic_write_bytes(path, checkpoint_bytes(ckpt))
    return Path(path)


def load_checkpoint(path: str | os.PathLike, kind: str | None = None) -> Checkpoint:
    try:
        with zipfile.ZipFile(path) as zf:
            meta = json.loads(zf.read("meta.json"))
            params, optim = {}, {}
            for name in zf.namelist():
                if not name.endswith(".npy"):
                    continue
                group, _, key = name[:-4].partition("/")
                with zf.open(name) as fh:
                    arr = np.lib.format.read_array(io.BytesIO(fh.read()), allow_pickle=False)
                if arr.dtype != np.dtype("<f4"):
                    raise BadCheckpoint(f"{name}: expected <f4, found {arr.dtype}")
                (params if group == "params" else optim)[key] = arr
    except (OSError, KeyError, zipfile.BadZipFile, ValueError) as exc:
        raise BadCheckpoint(f"cannot read checkpoint {path}: {exc}") from exc
    if meta.get("format_version") != FORMAT_VERSION:
        raise BadCheckpoint(f"unsupported checkpoint format {meta.get('format_version')}")
    found = meta.pop("kind", None)
    meta.pop("format_version")
    if kind is not None and found != kind:
        raise BadCheckpoint(f"expected a {kind!r} checkpoint, found {found!r}")
    return Checkpoint(found, meta, params, optim)


def module_arrays(module: torch.nn.Module) -> dict[str, np.ndarray]:
    return {k: v.detach().cpu().numpy().astype("<f4") for k, v in module.state_dict().items()}


def load_module_arrays(module: torch.nn.Module, arrays: dict[str, np.ndarray]) -> None:
    expected = module.state_dict()
    if set(expected) != set(arrays):
        missing = sorted(set(expected) ^ set(arrays))
        raise BadCheckpoint(f"parameter names do not match the network: {missing[:5]}")
    state = {}
    for k, ref in expected.items():
        arr = arrays[k]
        if tuple(arr.shape) != tuple(ref.shape):
            raise BadCheckpoint(f"{k}: shape {arr.shape} != {tuple(ref.shape)}")
        state[k] = torch.from_numpy(np.array(arr, dtype=np.float32))
    module.load_state_dict(state)


def optimizer_arrays(module: torch.nn.Module, optimizer: torch.optim.Optimizer) -> dict[str, np.ndarray]:
    """Adam moments and step counts keyed by parameter name."""
    names = {id(p): n for n, p in module.named_parameters()}
    out = {}
    for p, state in optimizer.state.items():
        for key, value in state.items():
            out[f"{names[id(p)]}/{key}"] = torch.as_tensor(value).detach().cpu().numpy().astype("<f4")
    return out


def restore_optimizer(module: torch.nn.Module, optimizer: torch.optim.Optimizer,
                      arrays: dict[str, np.ndarray]) -> None:
    params = dict(module.named_parameters())
    for key, arr in arrays.items():
        name, _, field_name = key.rpartition("/")
        p = params[name]
        value = torch.from_numpy(np.array(arr, dtype=np.float32))
        optimizer.state[p][field_name] = value.reshape(()) if field_name == "step" else value


def save_denoiser(path, net, schedule: NoiseSchedule, optimizer=None, epoch: int = 0,
                  extra: dict | None = None) -> Path:
    meta = {"net_config": asdict(net.config), "schedule": schedule.descriptor(),
            "epoch": int(epoch), **(extra or {})}
    optim = optimizer_arrays(net, optimizer) if optimizer is not None else {}
    return save_checkpoint(Checkpoint("diffusion", meta, module_arrays(net), optim), path)


def load_denoiser(path):
    """Return ``(net, schedule, checkpoint)`` for a diffusion checkpoint."""
    from .unet import NetConfig, UNet

    ckpt = load_checkpoint(path, "diffusion")
    try:
        config = NetConfig(**ckpt.meta["net_config"])
        schedule = NoiseSchedule.from_descriptor(ckpt.meta["schedule"])
    except (KeyError, TypeError) as exc:
        raise BadCheckpoint(f"incomplete diffusion checkpoint: {exc}") from exc
    net = UNet(config)
    load_module_arrays(net, ckpt.params)
    net.eval()
    return net, schedule, ckpt


def save_feature_extractor(path, extractor, extra: dict | None = None) -> Path:
    meta = {"extractor": extractor.descriptor(), **(extra or {})}
    return save_checkpoint(Checkpoint("feature_extractor", meta, extractor.arrays()), path)


def load_feature_extractor(path):
    """Load a saved extractor, or derive one from a diffusion checkpoint's encoder."""
    from .similarity import extractor_from_arrays, extractor_from_unet

    ckpt = load_checkpoint(path)
    if ckpt.kind == "feature_extractor":
        return extractor_from_arrays(ckpt.params, ckpt.meta["extractor"])
    if ckpt.kind == "diffusion":
        net, _, _ = load_denoiser(path)
        return extractor_from_unet(net)
    raise BadCheckpoint(f"checkpoint kind {ckpt.kind!r} has no feature extractor")
