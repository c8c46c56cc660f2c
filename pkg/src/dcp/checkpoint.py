"""Single-file checkpoints.

A checkpoint is a zip archive with

* ``manifest.yaml``: the full run configuration
* ``params.npz``: trainable parameters by name, plus optimiser buffers under ``optim/``
* ``state.json``: step counter, seed record and format version

Backbone weights are never stored; they are rebuilt from the config
(``backbone_seed`` or ``backbone_weights``).
"""

import io
import json
import os
import tempfile
import zipfile
from pathlib import Path

import numpy as np
import torch
import yaml

from dcp.config import config_from_dict
from dcp.errors import CheckpointError, ConfigError

FORMAT_VERSION = 1


def atomic_write_bytes(path, data):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", suffix=".tmp", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_checkpoint(path, run_config, model, optimizer=None, step=0, seeds=None):
    arrays = {name: p.detach().cpu().numpy() for name, p in model.trainable_parameters()}
    if optimizer is not None:
        names = {id(p): n for n, p in model.trainable_parameters()}
        for group in optimizer.param_groups:
            for p in group["params"]:
                buf = optimizer.state.get(p, {}).get("momentum_buffer")
                if buf is not None:
                    arrays[f"optim/{names[id(p)]}"] = buf.detach().cpu().numpy()
    params = io.BytesIO()
    np.savez(params, **arrays)
    state = {"format_version": FORMAT_VERSION, "step": int(step), "seeds": dict(seeds or {})}
    buf = io.BytesIO()
    with zipfile.ZipFile(buf, "w", zipfile.ZIP_DEFLATED) as zf:
        zf.writestr("manifest.yaml", run_config.dump())
        zf.writestr("params.npz", params.getvalue())
        zf.writestr("state.json", json.dumps(state, sort_keys=True))
    atomic_write_bytes(path, buf.getvalue())
    return Path(path)


class Checkpoint:
    def __init__(self, config, arrays, state):
        self.config = config
        self.arrays = arrays
        self.state = state

    @property
    def step(self):
        return self.state["step"]

    @property
    def seeds(self):
        return self.state.get("seeds", {})

    def parameters(self):
        return {k: v for k, v in self.arrays.items() if not k.startswith("optim/")}

    def momentum_buffers(self):
        return {k[len("optim/"):]: v for k, v in self.arrays.items() if k.startswith("optim/")}


def read_checkpoint(path):
    try:
        with zipfile.ZipFile(path) as zf:
            manifest = yaml.safe_load(zf.read("manifest.yaml"))
            state = json.loads(zf.read("state.json"))
            with np.load(io.BytesIO(zf.read("params.npz"))) as data:
                arrays = {k: data[k] for k in data.files}
    except (OSError, KeyError, zipfile.BadZipFile, ValueError) as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if state.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint format {state.get('format_version')}")
    try:
        config = config_from_dict(manifest)
    except ConfigError as exc:
        raise CheckpointError(f"{path}: invalid manifest: {exc}") from exc
    return Checkpoint(config, arrays, state)


def load_into(model, checkpoint, optimizer=None):
    """Copy checkpoint parameters (and momentum buffers) into ``model``/``optimizer``."""
    params = checkpoint.parameters()
    expected = dict(model.trainable_parameters())
    missing = sorted(set(expected) - set(params))
    unexpected = sorted(set(params) - set(expected))
    if missing or unexpected:
        raise CheckpointError(f"checkpoint does not match model: missing={missing[:5]} unexpected={unexpected[:5]}")
    with torch.no_grad():
        for name, p in expected.items():
            value = torch.from_numpy(params[name])
            if tuple(value.shape) != tuple(p.shape):
                raise CheckpointError(f"shape mismatch for {name}: {tuple(value.shape)} vs {tuple(p.shape)}")
            p.copy_(value.to(p.dtype))
    if optimizer is not None:
        buffers = checkpoint.momentum_buffers()
        for name, p in expected.items():
            if name in buffers:
                optimizer.state[p]["momentum_buffer"] = torch.from_numpy(buffers[name]).to(p.dtype).clone()
    return model


def load_model(path):
    from dcp.network import build_model

    ckpt = read_checkpoint(path)
    model = build_model(ckpt.config.model, seed=ckpt.seeds.get("model_init", 0))
    load_into(model, ckpt)
    model.eval()
    return model, ckpt
