"""Single-file checkpoints: a zip holding a JSON manifest and raw float32 blobs."""
import json
import zipfile
from pathlib import Path

import numpy as np
import torch

from .. import __version__
from .model import EvTexture, NetworkConfig

MANIFEST = "manifest.json"
FORMAT = "evtexture-checkpoint"


def save_checkpoint(model: EvTexture, path, extra: dict | None = None) -> Path:
    """Write ``model`` to ``path``.

    Every state_dict entry is stored as ``params/<name>`` in little-endian
    float32; the manifest records config, version and shapes.
    """
    path = Path(path)
    state = model.state_dict()
    manifest = {
        "format": FORMAT,
        "version": __version__,
        "config": model.cfg.to_dict(),
        "params": {k: list(v.shape) for k, v in state.items()},
        "extra": extra or {},
    }
    path.parent.mkdir(parents=True, exist_ok=True)
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        zf.writestr(MANIFEST, json.dumps(manifest, indent=2, sort_keys=True))
        for name, tensor in state.items():
            blob = tensor.detach().cpu().numpy().astype("<f4", copy=False)
            zf.writestr(f"params/{name}", blob.tobytes())
    return path


def read_manifest(path) -> dict:
    try:
        with zipfile.ZipFile(path) as zf:
            manifest = json.loads(zf.read(MANIFEST))
    except (OSError, KeyError, zipfile.BadZipFile) as exc:
        raise OSError(f"cannot read checkpoint {path}: {exc}") from exc
    if manifest.get("format") != FORMAT:
        raise ValueError(f"{path} is not an evtexture checkpoint")
    return manifest


def load_checkpoint(path, dtype=torch.float32):
    """Rebuild the model stored at ``path``. Returns (model, manifest)."""
    manifest = read_manifest(path)
    model = EvTexture(NetworkConfig.from_dict(manifest["config"]))
    state = {}
    with zipfile.ZipFile(path) as zf:
        for name, shape in manifest["params"].items():
            arr = np.frombuffer(zf.read(f"params/{name}"), dtype="<f4").reshape(shape)
            state[name] = torch.from_numpy(arr.copy())
    model.load_state_dict(state)
    return model.to(dtype), manifest
