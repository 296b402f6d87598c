"""Supervised training: SGD with momentum/weight decay, a two-rate group
split (extractor vs encoder+head), plateau-triggered learning-rate decay,
extractor pretraining with a throwaway pooled classifier, and epoch-level
resumable state.

Determinism contract: with a fixed seed in single-threaded mode, two runs
produce byte-identical checkpoints. Every epoch draws its shuffle and
augmentation randomness from a child generator keyed by (seed, epoch), so
resuming at an epoch boundary replays the exact same stream.
"""

from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import functional as F
from .model import (AfinetModel, DESCRIPTOR_DIM, VARIANT_VLAD, build_model,
                    extractor_forward, forward)
from .tensor import Tensor, add, no_grad, tmean


class DivergenceError(RuntimeError):
    """Training hit a non-finite loss or gradient; carries a state dump."""

    def __init__(self, message, dump=None):
        super().__init__(message)
        self.dump = dump or {}


@dataclass
class TrainConfig:
    lr_extractor: float = 1e-4
    lr_vlad_head: float = 1e-2
    momentum: float = 0.9
    weight_decay: float = 1e-4
    lr_decay_factor: float = 10.0
    plateau_patience: int = 2
    improve_eps: float = 1e-3       # "no improvement" = gain <= 0.1% absolute
    max_decays_without_improvement: int = 2
    batch_size: int = 32
    max_epochs: int = 20
    pretrain_epochs: int = 4
    seed: int = 0
    augment_rotation_deg: tuple = (0.0, 0.0)

    def validate(self):
        if self.lr_extractor < 0 or self.lr_vlad_head < 0:
            raise ValueError("learning rates must be >= 0")
        if self.plateau_patience < 1:
            raise ValueError("plateau_patience must be >= 1")
        if self.batch_size < 1 or self.max_epochs < 0:
            raise ValueError("batch_size/max_epochs out of range")
        lo, hi = self.augment_rotation_deg
        if hi < lo:
            raise ValueError(f"augment_rotation_deg empty: {lo}..{hi}")


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    train_acc: float
    val_error: float
    lr_extractor: float
    lr_head: float
    wall_time: float

    def core(self):
        """Everything but wall time (the deterministic part)."""
        d = asdict(self)
        d.pop("wall_time")
        return d


@dataclass
class TrainLog:
    records: list = field(default_factory=list)

    def append(self, rec: EpochRecord):
        if self.records and rec.epoch <= self.records[-1].epoch:
            raise ValueError(
                f"epoch {rec.epoch} not increasing after "
                f"{self.records[-1].epoch}")
        self.records.append(rec)

    def to_jsonl(self) -> str:
        return "".join(json.dumps(asdict(r)) + "\n" for r in self.records)

    @classmethod
    def from_jsonl(cls, text: str) -> "TrainLog":
        log = cls()
        for line in text.splitlines():
            if line.strip():
                log.append(EpochRecord(**json.loads(line)))
        return log


def best_epoch(records) -> int:
    """Epoch with the lowest validation error (earliest on ties)."""
    if not records:
        raise ValueError("empty training log")
    best = min(range(len(records)), key=lambda i: (records[i].val_error, i))
    return records[best].epoch


# -- SGD ----------------------------------------------------------------------


def sgd_step(params, grads, state, lr, momentum=0.9, weight_decay=1e-4):
    """v <- momentum*v + grad + weight_decay*param; param <- param - lr*v.

    params/grads/state are parallel lists; state holds the velocity buffers
    and is created on first use.
    """
    if len(state) == 0:
        state.extend(np.zeros_like(p.data) for p in params)
    for p, g, v in zip(params, grads, state):
        if g is None:
            g = np.zeros_like(p.data)
        if not np.all(np.isfinite(g)):
            raise DivergenceError("non-finite gradient in sgd_step")
        v *= momentum
        v += g + weight_decay * p.data
        p.data = p.data - lr * v


# -- minibatch plumbing --------------------------------------------------------


def _epoch_rng(seed: int, epoch: int, salt: int = 0):
    return np.random.default_rng(
        np.random.SeedSequence([0x7E4, int(seed), int(epoch), int(salt)]))


def _augment_rotation(batch: np.ndarray, angles_deg: np.ndarray):
    """Circular column shift per sample by round(angle/360 * width)."""
    w = batch.shape[3]
    cols = np.round(angles_deg / 360.0 * w).astype(int)
    out = np.empty_like(batch)
    for i, c in enumerate(cols):
        out[i] = np.roll(batch[i], c, axis=2)
    return out


def _classification_error(forward_fn, images, labels, batch_size):
    wrong = 0
    with no_grad():
        for i in range(0, len(images), batch_size):
            logits = forward_fn(Tensor(images[i:i + batch_size]))
            pred = logits.data.argmax(axis=1)
            wrong += int((pred != labels[i:i + batch_size]).sum())
    return wrong / len(images)


def _run_train_epoch(forward_fn, group_params, group_lrs, group_states,
                     images, labels, config, epoch):
    rng = _epoch_rng(config.seed, epoch)
    order = rng.permutation(len(images))
    lo, hi = config.augment_rotation_deg
    losses, correct = [], 0
    for start in range(0, len(order), config.batch_size):
        idx = order[start:start + config.batch_size]
        xb = images[idx]
        if hi > lo or hi != 0.0:
            angles = rng.uniform(lo, hi, size=len(idx))
            xb = _augment_rotation(xb, angles)
        yb = labels[idx]
        logits = forward_fn(Tensor(xb))
        loss = F.cross_entropy(logits, yb)
        if not np.isfinite(loss.item()):
            raise DivergenceError(
                f"non-finite loss at epoch {epoch}",
                dump={"epoch": epoch, "batch_start": int(start),
                      "loss": loss.item()})
        loss.backward()
        for params, lr, state in zip(group_params, group_lrs, group_states):
            grads = [p.grad for p in params]
            sgd_step(grads=grads, params=params, state=state, lr=lr,
                     momentum=config.momentum,
                     weight_decay=config.weight_decay)
        for params in group_params:
            for p in params:
                p.zero_grad()
        losses.append(loss.item() * len(idx))
        correct += int((logits.data.argmax(axis=1) == yb).sum())
    return sum(losses) / len(images), correct / len(images)


# -- extractor pretraining ------------------------------------------------------


def pretrain_extractor(model: AfinetModel, images, labels, val_images,
                       val_labels, config: TrainConfig,
                       num_classes: int | None = None) -> TrainLog:
    """Train the extractor through a temporary pooled classifier.

    The head (global average pool + one FC) is discarded afterwards; the
    extractor parameters are updated in place. Runs until the validation
    error plateaus or pretrain_epochs is hit.
    """
    config.validate()
    if len(images) == 0 or len(val_images) == 0:
        raise ValueError("pretraining needs non-empty train and val sets")
    if num_classes is None:
        num_classes = int(labels.max()) + 1
    rng = np.random.default_rng(np.random.SeedSequence([0x9E7,
                                                        int(config.seed)]))
    tmp_w = Tensor(rng.standard_normal((DESCRIPTOR_DIM, num_classes))
                   / np.sqrt(DESCRIPTOR_DIM), requires_grad=True,
                   dtype=np.float32)
    tmp_b = Tensor(np.zeros(num_classes), requires_grad=True,
                   dtype=np.float32)

    def fwd(x):
        fmap = extractor_forward(x, model.extractor)
        pooled = tmean(fmap, axis=(2, 3))
        return F.linear(pooled, tmp_w, tmp_b)

    ext_params = [t for n, t in model.named_parameters()
                  if n.startswith("block")]
    groups = [ext_params, [tmp_w, tmp_b]]
    lrs = [config.lr_extractor, config.lr_vlad_head]
    states = [[], []]
    log = TrainLog()
    best_val, stagnant = np.inf, 0
    for epoch in range(1, config.pretrain_epochs + 1):
        t0 = time.perf_counter()
        loss, acc = _run_train_epoch(fwd, groups, lrs, states, images,
                                     labels, config, epoch)
        val_err = _classification_error(fwd, val_images, val_labels,
                                        config.batch_size)
        log.append(EpochRecord(epoch, loss, acc, val_err, lrs[0], lrs[1],
                               time.perf_counter() - t0))
        if val_err < best_val - config.improve_eps:
            best_val, stagnant = val_err, 0
        else:
            stagnant += 1
            if stagnant >= config.plateau_patience:
                break
    return log


# -- full training ---------------------------------------------------------------


def _snapshot(model: AfinetModel):
    return {name: t.data.copy() for name, t in model.named_parameters()}


def _restore(model: AfinetModel, snap):
    for name, t in model.named_parameters():
        t.data = snap[name].copy()


def train_full(model: AfinetModel, images, labels, val_images, val_labels,
               config: TrainConfig, resume_state: dict | None = None,
               on_epoch=None):
    """Epochs of shuffled, rotation-augmented minibatches over the whole
    network; on a validation plateau both group rates are divided by the
    decay factor; stops after max_epochs or once two decays pass without
    any improvement. The best-validation parameters are restored into the
    model before returning.

    Returns (model, TrainLog, final_state).
    """
    config.validate()
    if len(images) == 0 or len(val_images) == 0:
        raise ValueError("training needs non-empty train and val sets")
    if model.variant == VARIANT_VLAD and model.vlad is None:
        raise ValueError("attach the VLAD encoder (kmeans_init) before "
                         "train_full")

    ext_params, head_params = model.parameter_groups()
    groups = [ext_params, head_params]

    if resume_state is None:
        state = {
            "epoch_next": 1,
            "lr_scale": 1.0,
            "stagnant": 0,
            "unproductive_decays": 0,
            "best_val": np.inf,
            "best_epoch": -1,
            "best_params": None,
            "velocities": [[], []],
            "log": TrainLog(),
        }
    else:
        state = resume_state

    def fwd(x):
        return forward(model, x)[1]

    log = state["log"]
    for epoch in range(state["epoch_next"], config.max_epochs + 1):
        lrs = [config.lr_extractor * state["lr_scale"],
               config.lr_vlad_head * state["lr_scale"]]
        t0 = time.perf_counter()
        loss, acc = _run_train_epoch(fwd, groups, lrs, state["velocities"],
                                     images, labels, config, epoch)
        val_err = _classification_error(fwd, val_images, val_labels,
                                        config.batch_size)
        log.append(EpochRecord(epoch, loss, acc, val_err, lrs[0], lrs[1],
                               time.perf_counter() - t0))

        if val_err < state["best_val"] - config.improve_eps:
            state["best_val"] = val_err
            state["best_epoch"] = epoch
            state["best_params"] = _snapshot(model)
            state["stagnant"] = 0
            state["unproductive_decays"] = 0
        else:
            state["stagnant"] += 1
            if state["stagnant"] >= config.plateau_patience:
                if state["unproductive_decays"] >= \
                        config.max_decays_without_improvement:
                    state["epoch_next"] = epoch + 1
                    if on_epoch is not None:
                        on_epoch(epoch, model, state, log)
                    break
                state["lr_scale"] /= config.lr_decay_factor
                state["unproductive_decays"] += 1
                state["stagnant"] = 0
        state["epoch_next"] = epoch + 1
        if on_epoch is not None:
            on_epoch(epoch, model, state, log)

    if state["best_params"] is not None:
        _restore(model, state["best_params"])
    return model, log, state


# -- resumable state files --------------------------------------------------------


def save_train_state(state, model: AfinetModel, path):
    """Epoch-granular optimizer/schedule state (numpy archive)."""
    arrays = {}
    for gi, group in enumerate(state["velocities"]):
        for pi, v in enumerate(group):
            arrays[f"vel_{gi}_{pi}"] = v
    if state["best_params"] is not None:
        for name, arr in state["best_params"].items():
            arrays[f"best__{name}"] = arr
    meta = {
        "epoch_next": state["epoch_next"],
        "lr_scale": state["lr_scale"],
        "stagnant": state["stagnant"],
        "unproductive_decays": state["unproductive_decays"],
        "best_val": None if np.isinf(state["best_val"])
        else state["best_val"],
        "best_epoch": state["best_epoch"],
        "log": state["log"].to_jsonl(),
        "group_sizes": [len(g) for g in state["velocities"]],
    }
    arrays["meta_json"] = np.frombuffer(
        json.dumps(meta).encode("utf-8"), dtype=np.uint8).copy()
    np.savez(path, **arrays)


def load_train_state(path, model: AfinetModel) -> dict:
    with np.load(path) as z:
        meta = json.loads(bytes(z["meta_json"]).decode("utf-8"))
        velocities = [
            [z[f"vel_{gi}_{pi}"] for pi in range(n)]
            for gi, n in enumerate(meta["group_sizes"])
        ]
        best_params = None
        best_keys = [k for k in z.files if k.startswith("best__")]
        if best_keys:
            best_params = {k[len("best__"):]: z[k] for k in best_keys}
    return {
        "epoch_next": int(meta["epoch_next"]),
        "lr_scale": float(meta["lr_scale"]),
        "stagnant": int(meta["stagnant"]),
        "unproductive_decays": int(meta["unproductive_decays"]),
        "best_val": np.inf if meta["best_val"] is None
        else float(meta["best_val"]),
        "best_epoch": int(meta["best_epoch"]),
        "best_params": best_params,
        "velocities": velocities,
        "log": TrainLog.from_jsonl(meta["log"]),
    }
