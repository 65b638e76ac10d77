"""On-disk checkpoints: a JSON manifest plus one raw little-endian float64 file per tensor.

Layout of a checkpoint directory::

    manifest.json
    tensors/<name>.f64        model parameters
    optim/<slot>.<name>.f64   AMSGrad moments (m, v, vhat), if saved

The manifest records the architecture, input shape, preprocessing, every
tensor's file and shape, optimizer scalars and free-form ``extra`` data
(seeds, RNG state, run config). Its ``format`` tag is checked on load.
"""

import json
from pathlib import Path

import numpy as np

from .errors import CheckpointShapeError, CheckpointVersionError, MissingTensorError
from .flow import PreprocessConfig, from_architecture

FORMAT = "mintnet-checkpoint/1"


def _write_tensor(root, rel, arr):
    path = root / rel
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return {"file": rel, "shape": list(np.shape(arr))}


def _read_tensor(root, name, entry):
    path = root / entry["file"]
    if not path.exists():
        raise MissingTensorError(f"tensor {name!r}: file {path} is missing")
    shape = tuple(entry["shape"])
    raw = path.read_bytes()
    expected = int(np.prod(shape)) * 8
    if len(raw) != expected:
        raise CheckpointShapeError(
            f"tensor {name!r}: manifest shape {list(shape)} needs {expected} bytes, file has {len(raw)}"
        )
    return np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(shape)


def save_checkpoint(model, optim, path, extra=None):
    """Write ``model`` (and optionally an ``OptimState``) to directory ``path``."""
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    tensors = {name: _write_tensor(root, f"tensors/{name}.f64", np.asarray(arr))
               for name, arr in model.parameters().items()}
    manifest = {
        "format": FORMAT,
        "input_shape": list(model.input_shape),
        "architecture": model.architecture(),
        "preprocess": {"lam": model.preprocess.lam, "levels": model.preprocess.levels,
                       "seed": model.preprocess.seed},
        "tensors": tensors,
        "optimizer": None,
        "extra": extra or {},
    }
    if optim is not None:
        slots = {}
        for slot in ("m", "v", "vhat"):
            slots[slot] = {name: _write_tensor(root, f"optim/{slot}.{name}.f64", arr)
                           for name, arr in getattr(optim, slot).items()}
        manifest["optimizer"] = {
            "step": optim.step, "lr0": optim.lr0, "beta1": optim.beta1,
            "beta2": optim.beta2, "eps": optim.eps, "slots": slots,
        }
    tmp = root / "manifest.json.tmp"
    tmp.write_text(json.dumps(manifest, indent=2))
    tmp.replace(root / "manifest.json")
    return root


def load_checkpoint(path):
    """Read a checkpoint directory; returns ``(model, optim_state_or_None, extra)``."""
    from .train import OptimState

    root = Path(path)
    manifest_path = root / "manifest.json"
    if not manifest_path.exists():
        raise MissingTensorError(f"{manifest_path} is missing")
    manifest = json.loads(manifest_path.read_text())
    if manifest.get("format") != FORMAT:
        raise CheckpointVersionError(
            f"{manifest_path}: format {manifest.get('format')!r} is not {FORMAT!r}"
        )
    pre = PreprocessConfig(**manifest["preprocess"])
    skeleton = from_architecture(manifest["architecture"], tuple(manifest["input_shape"]), pre)
    expected = skeleton.parameters()
    loaded = {}
    for name, ref in expected.items():
        if name not in manifest["tensors"]:
            raise MissingTensorError(f"tensor {name!r} is not listed in {manifest_path}")
        arr = _read_tensor(root, name, manifest["tensors"][name])
        if arr.shape != ref.shape:
            raise CheckpointShapeError(
                f"tensor {name!r}: shape {list(arr.shape)} does not match architecture {list(ref.shape)}"
            )
        loaded[name] = arr
    model = skeleton.with_parameters(loaded)
    optim = None
    if manifest.get("optimizer"):
        o = manifest["optimizer"]
        slots = {slot: {name: _read_tensor(root, f"{slot}.{name}", entry)
                        for name, entry in o["slots"][slot].items()}
                 for slot in ("m", "v", "vhat")}
        optim = OptimState(step=o["step"], lr0=o["lr0"], beta1=o["beta1"], beta2=o["beta2"],
                           eps=o["eps"], **slots)
    return model, optim, manifest.get("extra", {})
