"""Named-tensor checkpoint archives.

An archive is a zip holding ``manifest.json`` plus one ``.npy`` member per
tensor. Members carry a fixed timestamp so identical tensors give identical
bytes. LoRA tensors are stored as ``lora.<layer>.A`` / ``lora.<layer>.B``.
"""
from __future__ import annotations

import io
import json
import os
import re
import zipfile

import numpy as np
import torch

from .diffusion import DiffusionSchedule

_EPOCH = (1980, 1, 1, 0, 0, 0)
_LORA = re.compile(r"^denoiser\.(.+)\.lora\.(A|B)$")
_LORA_BACK = re.compile(r"^lora\.(.+)\.(A|B)$")


class CheckpointError(Exception):
    pass


def archive_name(param_name: str) -> str:
    m = _LORA.match(param_name)
    return f"lora.{m.group(1)}.{m.group(2)}" if m else param_name


def param_name(archive_key: str) -> str:
    m = _LORA_BACK.match(archive_key)
    return f"denoiser.{m.group(1)}.lora.{m.group(2)}" if m else archive_key


def model_tensors(models: dict[str, torch.nn.Module]) -> dict[str, tuple[torch.Tensor, bool]]:
    out = {}
    for prefix, module in models.items():
        for name, p in module.named_parameters():
            out[archive_name(f"{prefix}.{name}")] = (p.detach(), p.requires_grad)
    return out


def save_checkpoint(path: str | os.PathLike, tensors: dict[str, tuple[torch.Tensor, bool]],
                    schedule: DiffusionSchedule, meta: dict | None = None) -> None:
    entries = []
    members = {}
    all_tensors = dict(tensors)
    all_tensors["schedule.alpha_bar"] = (torch.from_numpy(np.array(schedule.alpha_bar)), False)
    for i, (name, (t, trainable)) in enumerate(sorted(all_tensors.items())):
        arr = t.detach().cpu().numpy() if isinstance(t, torch.Tensor) else np.asarray(t)
        buf = io.BytesIO()
        np.save(buf, np.ascontiguousarray(arr), allow_pickle=False)
        member = f"tensors/{i:05d}.npy"
        members[member] = buf.getvalue()
        entries.append({"name": name, "shape": list(arr.shape), "dtype": str(arr.dtype),
                        "trainable": bool(trainable), "file": member})
    manifest = {"schedule_fingerprint": schedule.fingerprint(), "schedule_T": schedule.T,
                "tensors": entries, "meta": meta or {}}
    tmp = f"{path}.tmp"
    with zipfile.ZipFile(tmp, "w", zipfile.ZIP_DEFLATED) as zf:
        zf.writestr(zipfile.ZipInfo("manifest.json", _EPOCH),
                    json.dumps(manifest, indent=1, sort_keys=True))
        for member, data in members.items():
            info = zipfile.ZipInfo(member, _EPOCH)
            info.compress_type = zipfile.ZIP_DEFLATED
            zf.writestr(info, data)
    os.replace(tmp, path)


class Checkpoint:
    def __init__(self, path: str | os.PathLike):
        self.path = str(path)
        if not os.path.exists(self.path):
            raise CheckpointError(f"checkpoint not found: {self.path}")
        with zipfile.ZipFile(self.path) as zf:
            self.manifest = json.loads(zf.read("manifest.json"))
            self.tensors = {e["name"]: torch.from_numpy(np.load(io.BytesIO(zf.read(e["file"])), allow_pickle=False))
                            for e in self.manifest["tensors"]}
        self.trainable = {e["name"]: e["trainable"] for e in self.manifest["tensors"]}

    @property
    def fingerprint(self) -> str:
        return self.manifest["schedule_fingerprint"]

    @property
    def meta(self) -> dict:
        return self.manifest.get("meta", {})

    def check_schedule(self, schedule: DiffusionSchedule) -> None:
        if schedule.fingerprint() != self.fingerprint:
            raise CheckpointError(
                f"schedule fingerprint mismatch: checkpoint {self.fingerprint[:12]} vs config {schedule.fingerprint()[:12]}")

    def load_into(self, models: dict[str, torch.nn.Module]) -> None:
        for prefix, module in models.items():
            for name, p in module.named_parameters():
                key = archive_name(f"{prefix}.{name}")
                if key not in self.tensors:
                    raise CheckpointError(f"checkpoint lacks tensor {key}")
                src = self.tensors[key]
                if tuple(src.shape) != tuple(p.shape):
                    raise CheckpointError(f"shape mismatch for {key}: {tuple(src.shape)} vs {tuple(p.shape)}")
                with torch.no_grad():
                    p.copy_(src)

    def subset(self, prefix: str) -> dict[str, torch.Tensor]:
        return {k[len(prefix):]: v for k, v in self.tensors.items() if k.startswith(prefix)}


def diff_names(a: Checkpoint, b: Checkpoint, exclude_prefix: tuple[str, ...] = ("optim.",)) -> list[str]:
    """Names of tensors whose bytes differ between two archives."""
    changed = []
    for name in sorted(set(a.tensors) | set(b.tensors)):
        if name.startswith(exclude_prefix):
            continue
        ta, tb = a.tensors.get(name), b.tensors.get(name)
        if ta is None or tb is None or ta.shape != tb.shape or not torch.equal(ta, tb):
            changed.append(name)
    return changed
