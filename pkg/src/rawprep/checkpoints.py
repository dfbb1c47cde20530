"""Checkpoint I/O: one little-endian float32 blob plus a JSON manifest.

The manifest maps each array name to its shape, byte offset and byte length
within ``weights.bin``. Loading re-verifies every entry against the blob size
so truncated or mismatched files fail loudly. Arrays are laid out in the
order the model yields them, which is fixed by module construction order, so
re-saving an identical model is byte-identical.
"""

import json
import os

import numpy as np

BLOB_NAME = "weights.bin"
MANIFEST_NAME = "manifest.json"

_F32 = np.dtype("<f4")


def save_arrays(out_dir, named_arrays):
    """Write ``{name: array}`` to ``out_dir`` as blob + manifest."""
    os.makedirs(out_dir, exist_ok=True)
    manifest = {}
    offset = 0
    chunks = []
    for name, arr in named_arrays.items():
        data = np.asarray(arr, dtype=_F32)
        nbytes = data.nbytes
        manifest[name] = {"shape": list(data.shape), "offset": offset, "length": nbytes}
        chunks.append(data.tobytes())
        offset += nbytes
    with open(os.path.join(out_dir, BLOB_NAME), "wb") as f:
        f.write(b"".join(chunks))
    with open(os.path.join(out_dir, MANIFEST_NAME), "w") as f:
        json.dump(manifest, f, indent=1, sort_keys=True)
        f.write("\n")


def load_arrays(ckpt_dir):
    """Read a checkpoint directory back into ``{name: float32 array}``."""
    with open(os.path.join(ckpt_dir, MANIFEST_NAME)) as f:
        manifest = json.load(f)
    with open(os.path.join(ckpt_dir, BLOB_NAME), "rb") as f:
        blob = f.read()
    total = sum(entry["length"] for entry in manifest.values())
    if total != len(blob):
        raise ValueError(f"checkpoint blob is {len(blob)} bytes but manifest claims {total}")
    out = {}
    for name, entry in manifest.items():
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        if entry["length"] != count * _F32.itemsize:
            raise ValueError(f"checkpoint entry {name}: shape {shape} inconsistent with byte length {entry['length']}")
        arr = np.frombuffer(blob, dtype=_F32, count=count, offset=entry["offset"])
        out[name] = arr.reshape(shape).copy()
    return out


def module_arrays(module, extra=None):
    """Parameters, then persistent state, then any extra named arrays."""
    named = {}
    for name, p in module.named_parameters():
        named["param." + name] = p.data
    for name, s in module.named_state():
        named["state." + name] = s
    for name, arr in (extra or {}).items():
        named["extra." + name] = np.asarray(arr)
    return named


def save_module(out_dir, module, extra=None):
    save_arrays(out_dir, module_arrays(module, extra))


def load_into_module(ckpt_dir, module):
    """Restore parameters and state in place; returns the extra arrays."""
    stored = load_arrays(ckpt_dir)
    extras = {}
    expected = set()
    for name, p in module.named_parameters():
        key = "param." + name
        expected.add(key)
        if key not in stored:
            raise KeyError(f"checkpoint missing parameter {name}")
        if stored[key].shape != p.data.shape:
            raise ValueError(f"parameter {name}: checkpoint shape {stored[key].shape} != model {p.data.shape}")
        p.data[...] = stored[key].astype(p.data.dtype)
    for name, s in module.named_state():
        key = "state." + name
        expected.add(key)
        if key not in stored:
            raise KeyError(f"checkpoint missing state {name}")
        if stored[key].shape != s.shape:
            raise ValueError(f"state {name}: checkpoint shape {stored[key].shape} != model {s.shape}")
        s[...] = stored[key].astype(s.dtype)
    for key, arr in stored.items():
        if key.startswith("extra."):
            extras[key[len("extra."):]] = arr
        elif key not in expected:
            raise KeyError(f"checkpoint has unexpected entry {key}")
    return extras
