"""Checkpoint files.

Layout: a ``DONET1`` line, ``key=value`` lines for the flat training
configuration and the loop counters, an ``END`` line, then for every named
tensor (parameters first, then batchnorm running statistics) its name on one
line followed by the binary tensor dump.
"""

import io
import os
from dataclasses import dataclass, field

from .config import TrainConfig, config_items, set_value
from .errors import DataError
from .tensor import dump_tensor, load_tensor

MAGIC = b"DONET1\n"
END = b"END\n"
STATE_KEYS = ("epoch", "batch_index", "step", "best_dsc", "best_epoch",
              "sum_l1", "sum_l2", "sum_lf", "sum_total")


@dataclass
class TrainState:
    """Loop counters; together with the seed they fix every random draw."""

    epoch: int = 0
    batch_index: int = 0
    step: int = 0
    best_dsc: float = -1.0
    best_epoch: int = -1
    # Running loss sums over the current epoch, for its summary record.
    sum_l1: float = 0.0
    sum_l2: float = 0.0
    sum_lf: float = 0.0
    sum_total: float = 0.0

    def add_losses(self, values):
        self.sum_l1 += values["l1"]
        self.sum_l2 += values["l2"]
        self.sum_lf += values["lf"]
        self.sum_total += values["total"]

    def take_losses(self):
        sums = {"l1": self.sum_l1, "l2": self.sum_l2, "lf": self.sum_lf, "total": self.sum_total}
        self.sum_l1 = self.sum_l2 = self.sum_lf = self.sum_total = 0.0
        return sums


@dataclass
class Checkpoint:
    config: TrainConfig
    state: TrainState
    tensors: dict = field(default_factory=dict)


def save_checkpoint(path, cfg, state, model):
    buf = io.BytesIO()
    buf.write(MAGIC)
    for key, value in config_items(cfg):
        buf.write(f"{key}={value}\n".encode("utf-8"))
    for key in STATE_KEYS:
        buf.write(f"state.{key}={getattr(state, key)!r}\n".encode("utf-8"))
    buf.write(END)
    for name, t in model.named_parameters() + model.named_buffers():
        buf.write(name.encode("utf-8") + b"\n")
        dump_tensor(t, buf)
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fp:
        fp.write(buf.getvalue())
    os.replace(tmp, path)


def read_checkpoint(path):
    try:
        with open(path, "rb") as fp:
            blob = fp.read()
    except OSError as err:
        raise DataError(f"cannot read checkpoint {path}: {err}") from None
    fp = io.BytesIO(blob)
    if fp.readline() != MAGIC:
        raise DataError(f"{path} is not a checkpoint (bad header)")
    cfg = TrainConfig()
    state = TrainState()
    while True:
        line = fp.readline()
        if not line:
            raise DataError(f"{path}: checkpoint header has no END line")
        if line == END:
            break
        key, sep, value = line.decode("utf-8").rstrip("\n").partition("=")
        if not sep:
            raise DataError(f"{path}: malformed header line {line!r}")
        if key.startswith("state."):
            name = key[len("state."):]
            if name not in STATE_KEYS:
                raise DataError(f"{path}: unknown state key {name}")
            kind = type(getattr(state, name))
            setattr(state, name, kind(value))
        else:
            set_value(cfg, key, value)
    tensors = {}
    while True:
        line = fp.readline()
        if not line:
            break
        tensors[line.decode("utf-8").rstrip("\n")] = load_tensor(fp)
    return Checkpoint(cfg, state, tensors)


def restore_tensors(model, tensors):
    """Copy saved values into the model in place; names and shapes must match."""
    own = dict(model.named_tensors())
    missing = sorted(set(own) - set(tensors))
    extra = sorted(set(tensors) - set(own))
    if missing or extra:
        raise DataError(f"checkpoint does not fit the model: missing {missing[:3]}, "
                        f"unexpected {extra[:3]}")
    for name, t in own.items():
        src = tensors[name]
        if src.shape != t.shape:
            raise DataError(f"{name}: checkpoint shape {src.shape} != model {t.shape}")
        t.data[...] = src.data.astype(t.dtype)
