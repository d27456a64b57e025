"""Checkpoint container: named arrays plus a JSON metadata document.

On disk a checkpoint is an uncompressed NumPy ``.npz`` archive. Every entry
is a named parameter array (``fg.base.l0.weight``, ``psi.head3.bias`` ...);
the reserved entry ``__metadata__`` holds UTF-8 JSON as a ``uint8`` array.
The metadata always includes ``content_sha256``, a digest over the sorted
array names, dtypes, shapes and raw bytes, verified on load. Writes are
atomic (temporary file in the same directory, then rename).
"""

import hashlib
import json
import os
import tempfile
from pathlib import Path

import numpy as np
import torch

from .errors import CheckpointMismatchError, CorruptCheckpointError, DataError

FORMAT_VERSION = 1
_META_KEY = "__metadata__"


def stable_hash(obj):
    """SHA-256 of the canonical JSON encoding of ``obj``."""
    payload = json.dumps(obj, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()


def content_hash(arrays):
    h = hashlib.sha256()
    for name in sorted(arrays):
        a = np.ascontiguousarray(arrays[name])
        h.update(name.encode("utf-8"))
        h.update(str(a.dtype).encode("ascii"))
        h.update(str(a.shape).encode("ascii"))
        h.update(a.tobytes())
    return h.hexdigest()


def _to_numpy(value):
    if isinstance(value, torch.Tensor):
        return value.detach().cpu().numpy()
    return np.asarray(value)


def save_checkpoint(path, arrays, metadata=None):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arrays = {k: _to_numpy(v) for k, v in arrays.items()}
    if _META_KEY in arrays:
        raise ValueError(f"{_META_KEY!r} is a reserved checkpoint entry")
    meta = dict(metadata or {})
    meta["format_version"] = FORMAT_VERSION
    meta["content_sha256"] = content_hash(arrays)
    blob = np.frombuffer(json.dumps(meta, sort_keys=True).encode("utf-8"), dtype=np.uint8)
    fd, tmp = tempfile.mkstemp(prefix=path.name + ".", suffix=".tmp", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as fh:
            np.savez(fh, **arrays, **{_META_KEY: blob})
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def load_checkpoint(path, verify=True):
    """Return ``(arrays, metadata)``; raises on a corrupt or tampered file."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"checkpoint {path} does not exist")
    try:
        with np.load(path, allow_pickle=False) as npz:
            arrays = {k: npz[k] for k in npz.files}
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot read checkpoint {path}: {exc}") from exc
    if _META_KEY not in arrays:
        raise DataError(f"{path} has no metadata entry")
    meta = json.loads(arrays.pop(_META_KEY).tobytes().decode("utf-8"))
    if verify and meta.get("content_sha256") != content_hash(arrays):
        raise CorruptCheckpointError(f"checkpoint {path} failed its content hash check")
    return arrays, meta


def module_arrays(module, prefix=""):
    return {prefix + k: v.detach().cpu().clone() for k, v in module.state_dict().items()}


def load_module_arrays(module, arrays, prefix=""):
    state = {}
    for k in module.state_dict():
        key = prefix + k
        if key not in arrays:
            raise CheckpointMismatchError(f"checkpoint lacks parameter {key}")
        state[k] = torch.as_tensor(arrays[key])
    module.load_state_dict(state)


def optimizer_arrays(optimizer, prefix="optim."):
    """Flatten an Adam-style optimizer state into named arrays."""
    out = {}
    state = optimizer.state_dict()["state"]
    for idx, slot in state.items():
        for name, value in slot.items():
            out[f"{prefix}{idx}.{name}"] = _to_numpy(torch.as_tensor(value)).copy()
    return out


def load_optimizer_arrays(optimizer, arrays, prefix="optim."):
    sd = optimizer.state_dict()
    state = {}
    for key, value in arrays.items():
        if not key.startswith(prefix):
            continue
        idx, name = key[len(prefix) :].split(".", 1)
        state.setdefault(int(idx), {})[name] = torch.as_tensor(value).clone()
    sd["state"] = state
    optimizer.load_state_dict(sd)
