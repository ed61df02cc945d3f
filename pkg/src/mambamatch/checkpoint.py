"""Parameter checkpoints: a directory of binary tensor files plus a manifest.

Each entry is one "JMT1" tensor file named ``<name>.jmt``; ``manifest.txt``
lists ``name dim0 dim1 ...`` per line, sorted by name, so checkpoints are
byte-reproducible and diffable.
"""

from __future__ import annotations

import os

import numpy as np

from .tensor import Tensor, load_tensor, save_tensor

__all__ = ["save_checkpoint", "load_checkpoint"]

MANIFEST = "manifest.txt"


def save_checkpoint(dir_path, named: dict) -> None:
    os.makedirs(dir_path, exist_ok=True)
    lines = []
    for name in sorted(named):
        value = named[name]
        arr = value.data if isinstance(value, Tensor) else np.asarray(value)
        save_tensor(os.path.join(dir_path, name + ".jmt"), arr)
        dims = " ".join(str(d) for d in arr.shape)
        lines.append(f"{name} {dims}".rstrip())
    with open(os.path.join(dir_path, MANIFEST), "w") as f:
        f.write("\n".join(lines) + "\n")


def load_checkpoint(dir_path) -> dict[str, np.ndarray]:
    manifest = os.path.join(dir_path, MANIFEST)
    if not os.path.isfile(manifest):
        raise FileNotFoundError(f"no checkpoint manifest at {manifest}")
    out: dict[str, np.ndarray] = {}
    with open(manifest) as f:
        for line in f:
            line = line.strip()
            if not line:
                continue
            name, *dims = line.split()
            arr = load_tensor(os.path.join(dir_path, name + ".jmt"))
            expect = tuple(int(d) for d in dims)
            if arr.shape != expect:
                raise ValueError(f"{name}: manifest says {expect}, file has {arr.shape}")
            out[name] = arr
    return out
