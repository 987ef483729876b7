"""Named, tagged parameter registry with Adam state and checkpoint IO.

Checkpoint layout (magic ``SRAT1``): magic bytes, u64-LE header length,
JSON header listing (name, tag, shape, trainable) in registration order,
then the little-endian float32 arrays concatenated in header order.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor, default_dtype

TAGS = ("base", "adapter", "sr_lora", "sr_cn", "sr_bg")

_MAGIC = b"SRAT1"


class ParamStoreError(RuntimeError):
    pass


@dataclass
class AdamHyper:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0  # untested knob at this scale, kept at 0

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ValueError("betas must lie in (0, 1)")
        if not self.eps > 0:
            raise ValueError("eps must be positive")


@dataclass
class _Entry:
    tensor: Tensor
    tag: str
    trainable: bool
    m: np.ndarray | None = None
    v: np.ndarray | None = None
    step: int = 0


@dataclass
class ParamStore:
    entries: dict[str, _Entry] = field(default_factory=dict)
    access_log: list[str] | None = None

    def register(self, name: str, tensor: Tensor, tag: str, trainable: bool = True) -> Tensor:
        if tag not in TAGS:
            raise ParamStoreError(f"unknown tag {tag!r}")
        if name in self.entries:
            raise ParamStoreError(f"duplicate parameter name {name!r}")
        tensor.requires_grad = trainable
        self.entries[name] = _Entry(tensor=tensor, tag=tag, trainable=trainable)
        return tensor

    def get(self, name: str) -> Tensor:
        if self.access_log is not None:
            self.access_log.append(name)
        return self.entries[name].tensor

    def tag_of(self, name: str) -> str:
        return self.entries[name].tag

    def names(self, tag: str | None = None) -> list[str]:
        if tag is None:
            return list(self.entries)
        return [n for n, e in self.entries.items() if e.tag == tag]

    def remove_tag(self, tag: str) -> int:
        doomed = self.names(tag)
        if not doomed:
            raise ParamStoreError(f"no parameters with tag {tag!r}")
        for name in doomed:
            del self.entries[name]
        return len(doomed)

    def set_trainable(self, tags, trainable: bool) -> None:
        tags = set(tags)
        for entry in self.entries.values():
            if entry.tag in tags:
                entry.trainable = trainable
                entry.tensor.requires_grad = trainable

    def freeze_all_except(self, trainable_tags) -> None:
        trainable_tags = set(trainable_tags)
        for entry in self.entries.values():
            entry.trainable = entry.tag in trainable_tags
            entry.tensor.requires_grad = entry.trainable

    def zero_grad(self) -> None:
        for entry in self.entries.values():
            entry.tensor.grad = None

    def start_access_log(self) -> None:
        self.access_log = []

    def stop_access_log(self) -> list[str]:
        log, self.access_log = self.access_log or [], None
        return log

    def snapshot(self, tags=None) -> dict[str, np.ndarray]:
        tags = None if tags is None else set(tags)
        return {
            n: e.tensor.data.copy()
            for n, e in self.entries.items()
            if tags is None or e.tag in tags
        }


def adam_step(store: ParamStore, hyper: AdamHyper) -> None:
    """One Adam update with bias correction over the trainable entries."""
    for name, entry in store.entries.items():
        if not entry.trainable:
            continue
        grad = entry.tensor.grad
        if grad is None:
            raise ParamStoreError(f"missing gradient for trainable entry {name!r}")
        if entry.m is None:
            entry.m = np.zeros_like(entry.tensor.data)
            entry.v = np.zeros_like(entry.tensor.data)
        entry.step += 1
        g = grad.astype(entry.tensor.data.dtype, copy=False)
        entry.m = hyper.beta1 * entry.m + (1.0 - hyper.beta1) * g
        entry.v = hyper.beta2 * entry.v + (1.0 - hyper.beta2) * (g * g)
        mhat = entry.m / (1.0 - hyper.beta1 ** entry.step)
        vhat = entry.v / (1.0 - hyper.beta2 ** entry.step)
        if hyper.weight_decay > 0.0:
            entry.tensor.data -= hyper.lr * hyper.weight_decay * entry.tensor.data
        entry.tensor.data -= hyper.lr * mhat / (np.sqrt(vhat) + hyper.eps)


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(store: ParamStore, path) -> None:
    header = [
        {"name": n, "tag": e.tag, "shape": list(e.tensor.shape), "trainable": e.trainable}
        for n, e in store.entries.items()
    ]
    blob = json.dumps({"entries": header}).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for entry in store.entries.values():
            fh.write(entry.tensor.data.astype("<f4").tobytes())


def load_checkpoint(path, store: ParamStore | None = None, tags=None) -> ParamStore:
    """Load a checkpoint, optionally restricted to a set of tags.

    When ``store`` is given, arrays are copied into already-registered
    entries (shapes must match); otherwise a fresh store is built.
    """
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[: len(_MAGIC)] != _MAGIC:
        raise ParamStoreError(f"{path}: bad magic")
    (hlen,) = struct.unpack_from("<Q", raw, len(_MAGIC))
    offset = len(_MAGIC) + 8
    header = json.loads(raw[offset : offset + hlen].decode("utf-8"))["entries"]
    offset += hlen

    total = sum(int(np.prod(e["shape"])) for e in header) * 4
    if len(raw) - offset != total:
        raise ParamStoreError(f"{path}: payload length {len(raw) - offset} != {total}")

    keep = None if tags is None else set(tags)
    out = store if store is not None else ParamStore()
    for meta in header:
        count = int(np.prod(meta["shape"]))
        arr = np.frombuffer(raw, dtype="<f4", count=count, offset=offset).reshape(meta["shape"])
        offset += count * 4
        if keep is not None and meta["tag"] not in keep:
            continue
        arr = arr.astype(default_dtype())
        if store is not None and meta["name"] in out.entries:
            entry = out.entries[meta["name"]]
            if tuple(entry.tensor.shape) != tuple(meta["shape"]):
                raise ParamStoreError(f"shape mismatch for {meta['name']}")
            entry.tensor.data = arr
        else:
            out.register(meta["name"], Tensor(arr), meta["tag"], trainable=meta["trainable"])
    return out
