"""SGD training, evaluation, prediction and the component ablation."""

import csv
import json
import logging
import math
import os
import time
from dataclasses import dataclass

import numpy as np

from . import plotting
from .checkpoint import TrainState, read_checkpoint, restore_tensors, save_checkpoint
from .config import replace
from .data import (AugmentConfig, SyntheticSpec, augment, load_split, save_image,
                   save_mask, stack, synthetic_sample)
from .errors import ContractError, DataError, NumericError
from .losses import combined_objective
from .metrics import METRIC_NAMES, aggregate, binarize, compute_metrics, metrics_csv
from .model import build, forward
from .tensor import backward, dump_tensor, make_rng, no_grad

log = logging.getLogger("donet")

# Independent random streams derived from the run seed.
STREAM_SPLIT = 1
STREAM_SHUFFLE = 2
STREAM_AUGMENT = 3

CURVE_HEADER = ("step", "epoch", "lr", "l1", "l2", "lf", "total")


def sgd_step(named_params, lr, group_lr=None):
    """theta <- theta - lr * grad for every parameter, then clear the grads.

    ``group_lr`` maps a parameter-name prefix (say ``"decoder2."``) to its
    own rate; the longest matching prefix wins.
    """
    named_params = list(named_params)
    for name, p in named_params:
        if p.requires_grad and p.grad is None:
            raise ContractError(f"parameter {name} has no gradient; is it detached from the loss?")
    prefixes = sorted(group_lr or {}, key=len, reverse=True)
    for name, p in named_params:
        rate = lr
        for prefix in prefixes:
            if name.startswith(prefix):
                rate = group_lr[prefix]
                break
        p.data -= np.asarray(rate * p.grad, dtype=p.dtype)
        p.grad = None


# --- data ------------------------------------------------------------------

@dataclass
class DataSplits:
    train: list
    val: list
    test: list


def synthetic_spec(cfg, count):
    m = cfg.model
    return SyntheticSpec(count=count, size=tuple(m.input_size), seed=cfg.synth_seed,
                         channels=m.input_channels)


def prepare_data(cfg):
    """Train/val/test samples from ``data_dir`` or the synthetic generator.

    Synthetic test samples use indices after the training pool, so they
    never overlap it.
    """
    if cfg.data_dir:
        pool = load_split(cfg.data_dir, "train")
        val = load_split(cfg.data_dir, "val") if os.path.isdir(
            os.path.join(cfg.data_dir, "val")) else None
        test = load_split(cfg.data_dir, "test") if os.path.isdir(
            os.path.join(cfg.data_dir, "test")) else []
    else:
        spec = synthetic_spec(cfg, cfg.synth_count).validate()
        pool = [synthetic_sample(spec, i) for i in range(cfg.synth_count)]
        test = [synthetic_sample(spec, cfg.synth_count + i) for i in range(cfg.synth_test_count)]
        val = None
    expect = tuple(cfg.model.input_size)
    for s in pool + (val or []) + test:
        if tuple(s.size) != expect or s.image.shape[1] != cfg.model.input_channels:
            raise DataError(f"sample {s.id} has shape {s.image.shape}, model expects "
                            f"{cfg.model.input_channels} channels at {expect}")
    if cfg.overfit:
        return DataSplits(pool, pool, test)
    if val is None:
        n_val = int(round(cfg.val_fraction * len(pool)))
        order = make_rng(cfg.seed, STREAM_SPLIT).permutation(len(pool))
        val = [pool[i] for i in sorted(order[:n_val])]
        pool = [pool[i] for i in sorted(order[n_val:])]
    if len(pool) < 2:
        raise DataError("need at least two training samples")
    return DataSplits(pool, val, test)


# --- training --------------------------------------------------------------

def predict_batches(model, samples, batch_size=8):
    """Eval-mode forward over ``samples``; yields (samples, PredictionTriple)."""
    with no_grad():
        for i in range(0, len(samples), batch_size):
            chunk = samples[i:i + batch_size]
            image, _ = stack(chunk, model.dtype)
            yield chunk, forward(model, image, train=False)


def evaluate(model, samples, batch_size=8, heads=("joint",)):
    """Per-image metrics of the binarized maps, keyed by head name."""
    out = {h: [] for h in heads}
    for chunk, triple in predict_batches(model, samples, batch_size):
        maps = {"joint": triple.y_joint, "y1": triple.y1, "y2": triple.y2}
        for head in heads:
            if maps[head] is None:
                continue
            sr = binarize(maps[head])
            for j, s in enumerate(chunk):
                _, m = compute_metrics(sr[j, 0], s.mask.data[0, 0].astype(np.uint8))
                out[head].append((s.id, m))
    return out


def mean_dsc(model, samples, batch_size=8):
    rows = evaluate(model, samples, batch_size)["joint"]
    return float(np.mean([m.dsc for _, m in rows]))


class Trainer:
    """Deterministic SGD loop; every random draw derives from (seed, epoch, index)."""

    def __init__(self, cfg, data, out_dir=None, state=None, model=None):
        self.cfg = cfg.validate()
        self.data = data
        self.out_dir = out_dir
        self.model = model if model is not None else build(cfg.model, seed=cfg.seed)
        self.state = state or TrainState()
        self.augment_cfg = AugmentConfig(seed=cfg.seed)
        self.history = []
        self.best_tensors = None
        if out_dir:
            os.makedirs(out_dir, exist_ok=True)

    @classmethod
    def resume(cls, path, data, out_dir=None):
        ckpt = read_checkpoint(path)
        trainer = cls(ckpt.config, data, out_dir, state=ckpt.state)
        restore_tensors(trainer.model, ckpt.tensors)
        return trainer

    def path(self, name):
        return os.path.join(self.out_dir, name) if self.out_dir else None

    def batches(self, epoch):
        n = len(self.data.train)
        order = make_rng(self.cfg.seed, STREAM_SHUFFLE, epoch).permutation(n)
        size = min(self.cfg.batch_size, n)
        chunks = [order[i:i + size] for i in range(0, n, size)]
        if len(chunks) > 1 and len(chunks[-1]) < 2:
            # A single-image batch has no batch statistics; fold it into its neighbour.
            lone = chunks.pop()
            chunks[-1] = np.concatenate([chunks[-1], lone])
        return chunks

    def batch(self, epoch, index):
        cfg = self.cfg
        picks = self.batches(epoch)[index]
        samples = [self.data.train[i] for i in picks]
        if cfg.augment and not cfg.overfit:
            samples = [augment(s, self.augment_cfg,
                               make_rng(cfg.seed, STREAM_AUGMENT, epoch, int(i)))
                       for s, i in zip(samples, picks)]
        return stack(samples, self.model.dtype)

    def step(self):
        """One SGD step on the next batch; returns the loss terms as floats."""
        st = self.state
        image, mask = self.batch(st.epoch, st.batch_index)
        triple = forward(self.model, image, train=True)
        terms = combined_objective(self.cfg.objective, triple, mask)
        values = terms.values()
        if not all(math.isfinite(v) for v in values.values()):
            raise NumericError(f"non-finite loss at step {st.step}: {values}")
        backward(terms.total)
        lr = self.cfg.learning_rate(st.epoch)
        sgd_step(self.model.named_parameters(), lr)
        values["lr"] = lr
        st.add_losses(values)
        st.step += 1
        st.batch_index += 1
        self._write_curve(values)
        return values

    def _write_curve(self, values):
        path = self.path("loss_curve.csv")
        if not path:
            return
        fresh = not os.path.exists(path) or self.state.step == 1
        with open(path, "w" if fresh else "a", newline="") as fp:
            w = csv.writer(fp, lineterminator="\n")
            if fresh:
                w.writerow(CURVE_HEADER)
            w.writerow([self.state.step, self.state.epoch, repr(values["lr"])] +
                       [repr(values[k]) for k in ("l1", "l2", "lf", "total")])

    def _finish_epoch(self, started):
        cfg, st = self.cfg, self.state
        steps = max(st.batch_index, 1)
        record = {"epoch": st.epoch, "step": st.step, "lr": cfg.learning_rate(st.epoch)}
        for key, total in st.take_losses().items():
            record[key] = total / steps
        last = st.epoch + 1 == cfg.epochs or (cfg.max_steps and st.step >= cfg.max_steps)
        if (st.epoch + 1) % cfg.eval_every == 0 or last:
            record["val_dsc"] = mean_dsc(self.model, self.data.val, cfg.batch_size)
        record["seconds"] = round(time.perf_counter() - started, 3)
        st.epoch += 1
        st.batch_index = 0
        if "val_dsc" in record and record["val_dsc"] > st.best_dsc:
            st.best_dsc = record["val_dsc"]
            st.best_epoch = record["epoch"]
            self.best_tensors = {k: t.data.copy() for k, t in self.model.named_tensors()}
            if self.out_dir:
                save_checkpoint(self.path("best.ckpt"), cfg, st, self.model)
        self.history.append(record)
        if self.out_dir:
            with open(self.path("report.jsonl"), "a") as fp:
                fp.write(json.dumps(record) + "\n")
            if "val_dsc" in record:
                save_checkpoint(self.path("last.ckpt"), cfg, st, self.model)
        log.info("epoch %d step %d total %.4f val_dsc %s", record["epoch"], st.step,
                 record["total"], record.get("val_dsc", "-"))
        return record

    def done(self):
        cfg, st = self.cfg, self.state
        return st.epoch >= cfg.epochs or bool(cfg.max_steps and st.step >= cfg.max_steps)

    def fit(self, stop_after=None):
        """Train to completion, or for ``stop_after`` more steps (for resume tests)."""
        taken = 0
        while not self.done():
            started = time.perf_counter()
            n_batches = len(self.batches(self.state.epoch))
            while self.state.batch_index < n_batches:
                self.step()
                taken += 1
                if self.cfg.max_steps and self.state.step >= self.cfg.max_steps:
                    break
                if stop_after is not None and taken >= stop_after:
                    return self.history
            self._finish_epoch(started)
        if self.out_dir:
            plotting.loss_curves(self.path("loss_curve.csv"), self.path("loss_curve.png"))
        return self.history


def train(cfg, out_dir=None, data=None):
    data = data or prepare_data(cfg.validate())
    trainer = Trainer(cfg, data, out_dir)
    trainer.fit()
    return trainer


# --- reporting -------------------------------------------------------------

def write_metrics(model, samples, out_path, heads=("joint",), batch_size=8):
    """Write the metrics CSV for ``joint`` to ``out_path`` and other heads beside it."""
    results = evaluate(model, samples, batch_size, heads)
    written = {}
    root, ext = os.path.splitext(out_path)
    for head, rows in results.items():
        if not rows:
            continue
        path = out_path if head == "joint" else f"{root}_{head}{ext or '.csv'}"
        with open(path, "w", newline="") as fp:
            fp.write(metrics_csv(rows))
        written[head] = path
    return results, written


def load_model(path):
    ckpt = read_checkpoint(path)
    model = build(ckpt.config.model, seed=ckpt.config.seed)
    restore_tensors(model, ckpt.tensors)
    return model, ckpt


def predict(model, image, out_dir):
    """Write pred1/pred2/joint masks, probability dumps and a side-by-side figure."""
    os.makedirs(out_dir, exist_ok=True)
    with no_grad():
        triple = forward(model, image, train=False)
    written = {}
    for name, t in (("pred1", triple.y1), ("pred2", triple.y2), ("joint", triple.y_joint)):
        if t is None:
            continue
        mask_path = os.path.join(out_dir, f"{name}.pgm")
        save_mask(binarize(t)[0, 0], mask_path)
        prob_path = os.path.join(out_dir, f"{name}_prob.dot")
        with open(prob_path, "wb") as fp:
            dump_tensor(t, fp)
        written[name] = mask_path
        written[f"{name}_prob"] = prob_path
    save_image(image.data[0], os.path.join(out_dir, "input.ppm")
               if image.shape[1] == 3 else os.path.join(out_dir, "input.pgm"))
    fig = os.path.join(out_dir, "prediction.png")
    plotting.prediction_panel(image.data[0], triple, fig)
    written["figure"] = fig
    return triple, written


# --- ablation --------------------------------------------------------------

VARIANTS = (
    ("Baseline", dict(use_rcem=False, use_dual=False)),
    ("+RCEM", dict(use_rcem=True, use_dual=False)),
    ("+DOA", dict(use_rcem=False, use_dual=True)),
    ("+RCEM+DOA", dict(use_rcem=True, use_dual=True)),
)


@dataclass
class AblationRow:
    variant: str
    parameters: int
    mean: object
    std: object
    per_seed: list


def ablate(cfg, seeds, data=None, out_dir=None):
    """Train and test every variant once per seed; returns rows in table order."""
    if not seeds:
        raise ContractError("ablation needs at least one seed")
    data = data or prepare_data(cfg.validate())
    if not data.test:
        raise DataError("ablation needs a test split")
    rows = []
    for name, flags in VARIANTS:
        per_seed = []
        n_params = 0
        for seed in seeds:
            run_cfg = replace(cfg, seed=seed, **flags)
            run_dir = os.path.join(out_dir, f"{name.strip('+').replace('+', '_')}_s{seed}") \
                if out_dir else None
            trainer = train(run_cfg, run_dir, data)
            model = best_model(trainer)
            n_params = model.parameter_count()
            rows_ = evaluate(model, data.test, run_cfg.batch_size)["joint"]
            mean, _ = aggregate([m for _, m in rows_])
            per_seed.append(mean)
            log.info("ablation %s seed %d dsc %.4f", name, seed, mean.dsc)
        mean, std = aggregate(per_seed)
        rows.append(AblationRow(name, n_params, mean, std, per_seed))
    return rows


def best_model(trainer):
    """A model holding the best-validation weights (the final ones if never validated)."""
    if trainer.best_tensors is None:
        return trainer.model
    model = build(trainer.cfg.model, seed=trainer.cfg.seed)
    for name, t in model.named_tensors():
        t.data[...] = trainer.best_tensors[name]
    return model


def ordering_holds(rows):
    by_name = {r.variant: r for r in rows}
    return by_name["+RCEM+DOA"].mean.dsc >= by_name["Baseline"].mean.dsc


def ablation_tsv(rows):
    lines = ["\t".join(("variant", "parameters") + METRIC_NAMES)]
    for r in rows:
        cells = [f"{getattr(r.mean, k):.4f}±{getattr(r.std, k):.4f}" for k in METRIC_NAMES]
        lines.append("\t".join([r.variant, str(r.parameters)] + cells))
    flag = "ok" if ordering_holds(rows) else "VIOLATED"
    lines.append(f"# ordering full>=baseline on mean dsc: {flag}")
    return "\n".join(lines) + "\n"
