"""AMSGrad optimization and the training regimes: supervised baselines,
mutual-information pretraining (optionally semi-supervised), and probe
classifiers on frozen encoder features.

All regimes are deterministic for a fixed (seed, config): batch order,
augmentation, dropout and initialization all derive from explicit seeded
generators. In canonical mode the metrics log is bitwise reproducible
(wall_ms is recorded as 0 so timing noise never enters the file).
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import nn
from .autodiff import DimensionError, NonFiniteError, Tape, Tensor, backward, take_rows
from .data import AugmentationConfig, batch_iter, load_batch
from .encoders import ArchitectureSpec, ClassifierHead, EncoderParams, forward_with_taps
from .evaluation import balanced_accuracy
from .objectives import StatisticsNetworks, dim_loss_from_taps, l1_penalty, mi_estimate_value

__all__ = [
    "AMSGradState",
    "amsgrad_step",
    "TrainConfig",
    "Checkpoint",
    "TrainResult",
    "PretrainResult",
    "NumericalError",
    "train_supervised",
    "pretrain_dim",
    "train_probe",
    "select_checkpoint",
    "head_balanced_accuracy",
    "extract_features",
]


class NumericalError(FloatingPointError):
    """Loss became non-finite; carries the epoch it happened in."""

    def __init__(self, epoch: int, message: str):
        super().__init__(message)
        self.epoch = epoch


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class AMSGradState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    v_max: list[np.ndarray]
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    @classmethod
    def for_params(cls, params) -> "AMSGradState":
        return cls(
            m=[np.zeros_like(p.data) for p in params],
            v=[np.zeros_like(p.data) for p in params],
            v_max=[np.zeros_like(p.data) for p in params],
        )


def amsgrad_step(params, grads, state: AMSGradState, lr: float) -> None:
    """One update: m and v are the usual exponential moments, v_max is the
    elementwise running max of v, and the step uses bias-corrected m and
    v_max (the widely deployed variant)."""
    if len(params) != len(state.m):
        raise DimensionError(f"optimizer state holds {len(state.m)} params, got {len(params)}")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1**state.t
    bc2 = 1.0 - b2**state.t
    for i, (p, g) in enumerate(zip(params, grads)):
        if g.shape != p.data.shape:
            raise DimensionError(f"gradient shape {g.shape} != parameter shape {p.data.shape}")
        state.m[i] = b1 * state.m[i] + (1.0 - b1) * g
        state.v[i] = b2 * state.v[i] + (1.0 - b2) * g * g
        np.maximum(state.v_max[i], state.v[i], out=state.v_max[i])
        m_hat = state.m[i] / bc1
        v_hat = state.v_max[i] / bc2
        p.data = p.data - lr * m_hat / (np.sqrt(v_hat) + state.epsilon)


# ---------------------------------------------------------------------------
# config, checkpoints, metrics log


@dataclass
class TrainConfig:
    learning_rate: float = 0.001  # 0.001 for supervised CNNs, 0.0001 for DIM
    batch_size: int = 8
    drop_last: bool = True
    epochs: int = 500
    lambda_l1: float = 0.0
    ss_weight: float = 1.0
    burn_in_epochs: int = 50
    seed: int = 0
    canonical: bool = True


@dataclass
class Checkpoint:
    epoch: int
    train_metric: float
    val_metric: float
    params: dict[str, np.ndarray] | None = None
    is_fallback: bool = False


def select_checkpoint(history: list[Checkpoint], burn_in: int) -> Checkpoint:
    """Among epochs beyond the burn-in whose validation metric does not
    exceed the train metric, pick the best validation score (first on
    ties); fall back to the global best validation epoch when none
    qualifies, flagged via ``is_fallback``."""
    if not history:
        raise ValueError("empty checkpoint history")
    best = None
    for ck in history:
        if ck.epoch > burn_in and ck.val_metric <= ck.train_metric:
            if best is None or ck.val_metric > best.val_metric:
                best = ck
    if best is not None:
        return best
    fallback = history[0]
    for ck in history[1:]:
        if ck.val_metric > fallback.val_metric:
            fallback = ck
    return replace(fallback, is_fallback=True)


class MetricsLogger:
    """JSON-lines metrics writer, one object per (epoch, split)."""

    def __init__(self, path=None, canonical: bool = True):
        self.path = Path(path) if path is not None else None
        self.canonical = canonical
        self.rows: list[dict] = []
        if self.path is not None:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self.path.write_text("", encoding="utf-8")

    def log(self, epoch, split, loss=None, balanced_accuracy=None, objective=None,
            l1=None, wall_ms=0.0):
        row = {
            "epoch": epoch,
            "split": split,
            "loss": loss,
            "balanced_accuracy": balanced_accuracy,
            "objective": objective,
            "l1": l1,
            "wall_ms": 0.0 if self.canonical else wall_ms,
        }
        self.rows.append(row)
        if self.path is not None:
            with open(self.path, "a", encoding="utf-8") as fh:
                fh.write(json.dumps(row) + "\n")


@dataclass
class TrainResult:
    history: list[Checkpoint]
    selected: Checkpoint
    final_params: dict[str, np.ndarray]
    logger: MetricsLogger


@dataclass
class PretrainResult:
    history: list[dict]
    final_params: dict[str, np.ndarray]
    best_params: dict[str, np.ndarray]
    best_objective: float
    step_objectives: list[float]
    logger: MetricsLogger


class _SnapshotKeeper:
    """Retains only the snapshots select_checkpoint can end up choosing:
    the best qualifying epoch, the best-validation epoch and the final one."""

    def __init__(self, burn_in: int):
        self.burn_in = burn_in
        self.best_qual: tuple[int, float] | None = None
        self.best_val: tuple[int, float] | None = None
        self.store: dict[int, dict[str, np.ndarray]] = {}

    def offer(self, epoch: int, train_metric: float, val_metric: float, snapshot_fn):
        keep = False
        if epoch > self.burn_in and val_metric <= train_metric:
            if self.best_qual is None or val_metric > self.best_qual[1]:
                if self.best_qual is not None and self.best_qual[0] != (self.best_val or (None,))[0]:
                    self.store.pop(self.best_qual[0], None)
                self.best_qual = (epoch, val_metric)
                keep = True
        if self.best_val is None or val_metric > self.best_val[1]:
            if self.best_val is not None and self.best_val[0] != (self.best_qual or (None,))[0]:
                self.store.pop(self.best_val[0], None)
            self.best_val = (epoch, val_metric)
            keep = True
        if keep:
            self.store[epoch] = snapshot_fn()

    def get(self, epoch: int) -> dict[str, np.ndarray] | None:
        return self.store.get(epoch)


def _epoch_rng(seed: int, epoch: int, stream: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence((seed, epoch, stream)))


def _loss_value(t: Tensor, epoch: int) -> float:
    v = t.item()
    if not math.isfinite(v):
        raise NumericalError(epoch, f"non-finite loss at epoch {epoch}")
    return v


# ---------------------------------------------------------------------------
# evaluation passes


def _predict_logits(spec, params, volumes, labels, idx, batch_size, aug_off):
    rng = np.random.default_rng(0)  # unused: eval path has no randomness
    preds = []
    losses = []
    for lo in range(0, len(idx), batch_size):
        chunk = idx[lo : lo + batch_size]
        batch, lab = load_batch(volumes, labels, chunk, aug_off, rng)
        out = forward_with_taps(spec, params, batch, mode="eval")
        loss = nn.cross_entropy(out.logits_or_z, lab)
        losses.append(loss.item() * len(chunk))
        preds.extend(np.argmax(out.logits_or_z.data, axis=1).tolist())
    labs = [labels[i] for i in idx]
    return np.asarray(preds), np.asarray(labs), sum(losses) / len(idx)


def evaluate_split(spec, params, volumes, labels, idx, batch_size, num_classes):
    """(mean cross-entropy, balanced accuracy) on eval-mode predictions."""
    aug_off = AugmentationConfig(target_side=spec.input_side, enabled=False)
    preds, labs, loss = _predict_logits(spec, params, volumes, labels, idx, batch_size, aug_off)
    return loss, balanced_accuracy(labs, preds, num_classes)


# ---------------------------------------------------------------------------
# supervised baseline


def train_supervised(
    spec: ArchitectureSpec,
    params: EncoderParams,
    volumes,
    labels,
    train_idx,
    val_idx,
    config: TrainConfig,
    augment_config: AugmentationConfig | None = None,
    metrics_path=None,
) -> TrainResult:
    """Cross-entropy training of a classification preset, logging train/val
    balanced accuracy every epoch and applying the selection rule at the end.
    An L1 penalty over all trainable parameters is added when lambda_l1 > 0.
    """
    if len(train_idx) == 0 or len(val_idx) == 0:
        raise ValueError("empty train or validation split")
    aug = augment_config or AugmentationConfig(target_side=spec.input_side, enabled=False)
    logger = MetricsLogger(metrics_path, config.canonical)
    trainable = params.parameters()
    opt = AMSGradState.for_params(trainable)
    keeper = _SnapshotKeeper(config.burn_in_epochs)
    history: list[Checkpoint] = []
    k = spec.num_classes

    for epoch in range(1, config.epochs + 1):
        t0 = time.perf_counter()
        aug_rng = _epoch_rng(config.seed, epoch, 1)
        epoch_loss = 0.0
        epoch_l1 = 0.0
        batches = batch_iter(train_idx, config.batch_size, config.drop_last, config.seed, epoch)
        try:
            for chunk in batches:
                batch, lab = load_batch(volumes, labels, chunk, aug, aug_rng)
                with Tape() as tape:
                    tape.watch(*trainable)
                    out = forward_with_taps(spec, params, batch, mode="train")
                    loss = nn.cross_entropy(out.logits_or_z, lab)
                    if config.lambda_l1 > 0:
                        pen = l1_penalty(trainable, config.lambda_l1)
                        epoch_l1 += pen.item()
                        loss = loss + pen
                grads = backward(tape, loss)
                epoch_loss += _loss_value(loss, epoch)
                amsgrad_step(trainable, grads, opt, config.learning_rate)
        except NonFiniteError as err:
            raise NumericalError(epoch, f"{err} at epoch {epoch}") from err

        n_batches = max(len(batches), 1)
        _, train_ba = evaluate_split(spec, params, volumes, labels, train_idx, config.batch_size, k)
        val_loss, val_ba = evaluate_split(spec, params, volumes, labels, val_idx, config.batch_size, k)
        wall = (time.perf_counter() - t0) * 1000
        logger.log(epoch, "train", loss=epoch_loss / n_batches, balanced_accuracy=train_ba,
                   l1=epoch_l1 / n_batches if config.lambda_l1 > 0 else None, wall_ms=wall)
        logger.log(epoch, "val", loss=val_loss, balanced_accuracy=val_ba, wall_ms=wall)
        ck = Checkpoint(epoch, train_metric=train_ba, val_metric=val_ba)
        history.append(ck)
        keeper.offer(epoch, train_ba, val_ba, params.snapshot)

    final = params.snapshot()
    if history:
        selected = select_checkpoint(history, config.burn_in_epochs)
        snap = keeper.get(selected.epoch)
        selected = replace(selected, params=snap if snap is not None else final)
    else:
        selected = Checkpoint(0, float("nan"), float("nan"), params=final)
    return TrainResult(history, selected, final, logger)


# ---------------------------------------------------------------------------
# mutual-information pretraining


def pretrain_dim(
    spec: ArchitectureSpec,
    params: EncoderParams,
    nets: StatisticsNetworks,
    volumes,
    train_idx,
    config: TrainConfig,
    estimator: str = "jsd",
    ss_labels=None,
    metrics_path=None,
    decouple_pairs: bool = False,
) -> PretrainResult:
    """Maximize the chosen estimator over encoder + statistics networks.

    ``ss_labels`` switches on the semi-supervised variant: a jointly trained
    classifier head on the representation adds its cross-entropy (weight
    ``ss_weight``). ``decouple_pairs`` rolls the global representations by
    one inside each batch, destroying the patch/representation pairing; a
    negative control under which no estimator should find information.
    L1 (when lambda_l1 > 0) spans every trainable parameter in the run.
    """
    if config.batch_size < 2:
        raise ValueError("DIM regimes need batch_size >= 2 so negatives exist")
    aug = AugmentationConfig(target_side=spec.input_side, enabled=False)
    logger = MetricsLogger(metrics_path, config.canonical)
    labels = ss_labels if ss_labels is not None else np.zeros(len(volumes), dtype=np.int64)
    ss_head = None
    if ss_labels is not None:
        n_classes = int(np.max(ss_labels)) + 1
        ss_head = ClassifierHead(spec.out_dim, n_classes, seed=config.seed + 101)
    trainable = params.parameters() + nets.parameters()
    if ss_head is not None:
        trainable = trainable + ss_head.parameters()
    opt = AMSGradState.for_params(trainable)

    def snapshot():
        snap = params.snapshot()
        snap.update(nets.snapshot())
        if ss_head is not None:
            snap.update(ss_head.snapshot())
        return snap

    history: list[dict] = []
    step_objectives: list[float] = []
    best_obj = -math.inf
    best_snap = snapshot()

    for epoch in range(1, config.epochs + 1):
        t0 = time.perf_counter()
        rng = _epoch_rng(config.seed, epoch, 2)
        batches = batch_iter(train_idx, config.batch_size, config.drop_last, config.seed, epoch)
        epoch_obj = 0.0
        epoch_loss = 0.0
        epoch_l1 = 0.0
        epoch_ss = 0.0
        try:
            for chunk in batches:
                batch, lab = load_batch(volumes, labels, chunk, aug, rng)
                with Tape() as tape:
                    tape.watch(*trainable)
                    out = forward_with_taps(spec, params, batch, mode="train")
                    z = out.logits_or_z
                    if decouple_pairs:
                        roll = np.roll(np.arange(z.shape[0]), 1)
                        z_for_scores = take_rows(z, roll)
                    else:
                        z_for_scores = z
                    loss = dim_loss_from_taps(out.local_map, z_for_scores, nets, estimator)
                    obj = mi_estimate_value(loss.item(), estimator, len(chunk))
                    if ss_head is not None:
                        ss_rng = rng
                        ss_loss = nn.cross_entropy(ss_head.forward(z, "train", ss_rng), lab)
                        epoch_ss += ss_loss.item()
                        loss = loss + ss_loss * config.ss_weight
                    if config.lambda_l1 > 0:
                        pen = l1_penalty(trainable, config.lambda_l1)
                        epoch_l1 += pen.item()
                        loss = loss + pen
                grads = backward(tape, loss)
                epoch_loss += _loss_value(loss, epoch)
                amsgrad_step(trainable, grads, opt, config.learning_rate)
                step_objectives.append(obj)
                epoch_obj += obj
        except NonFiniteError as err:
            raise NumericalError(epoch, f"{err} at epoch {epoch}") from err

        n_batches = max(len(batches), 1)
        mean_obj = epoch_obj / n_batches
        wall = (time.perf_counter() - t0) * 1000
        logger.log(epoch, "train", loss=epoch_loss / n_batches, objective=mean_obj,
                   l1=epoch_l1 / n_batches if config.lambda_l1 > 0 else None, wall_ms=wall)
        row = {"epoch": epoch, "objective": mean_obj, "ss_loss": epoch_ss / n_batches if ss_head else None}
        history.append(row)
        if mean_obj > best_obj:
            best_obj = mean_obj
            best_snap = snapshot()

    return PretrainResult(history, snapshot(), best_snap, best_obj, step_objectives, logger)


# ---------------------------------------------------------------------------
# probes on frozen features


def extract_features(spec, params, volumes, idx, tap: str, batch_size: int = 16) -> np.ndarray:
    """Eval-mode tap features for the given samples, flattened to (N, F).
    The encoder is a pure function here, so features are computed once."""
    aug_off = AugmentationConfig(target_side=spec.input_side, enabled=False)
    rng = np.random.default_rng(0)
    feats = []
    for lo in range(0, len(idx), batch_size):
        chunk = idx[lo : lo + batch_size]
        batch, _ = load_batch(volumes, np.zeros(len(volumes), dtype=np.int64), chunk, aug_off, rng)
        out = forward_with_taps(spec, params, batch, mode="eval")
        t = out.tap(tap)
        feats.append(t.data.reshape(t.shape[0], -1).copy())
    return np.concatenate(feats, axis=0)


def head_balanced_accuracy(head, feats, labs, num_classes, batch_size=256):
    preds = []
    for lo in range(0, len(labs), batch_size):
        logits = head.forward(Tensor(feats[lo : lo + batch_size]), "eval", np.random.default_rng(0))
        preds.extend(np.argmax(logits.data, axis=1).tolist())
    return balanced_accuracy(labs, preds, num_classes)


def train_probe(
    spec: ArchitectureSpec,
    params: EncoderParams,
    tap: str,
    volumes,
    labels,
    train_idx,
    val_idx,
    config: TrainConfig,
    num_classes: int = 4,
    metrics_path=None,
) -> tuple[TrainResult, ClassifierHead]:
    """Train a classifier head on frozen encoder features.

    Only head parameters are updated; the encoder is evaluated once up front
    (eval mode is a pure function of params and input, so this is exact).
    """
    labels = np.asarray(labels)
    encoder_before = params.snapshot()
    feats_train = extract_features(spec, params, volumes, train_idx, tap)
    feats_val = extract_features(spec, params, volumes, val_idx, tap)
    labs_train = labels[list(train_idx)]
    labs_val = labels[list(val_idx)]

    head = ClassifierHead(feats_train.shape[1], num_classes, seed=config.seed + 17)
    trainable = head.parameters()
    opt = AMSGradState.for_params(trainable)
    logger = MetricsLogger(metrics_path, config.canonical)
    keeper = _SnapshotKeeper(config.burn_in_epochs)
    history: list[Checkpoint] = []

    for epoch in range(1, config.epochs + 1):
        t0 = time.perf_counter()
        drop_rng = _epoch_rng(config.seed, epoch, 3)
        batches = batch_iter(range(len(train_idx)), config.batch_size, config.drop_last,
                             config.seed, epoch)
        epoch_loss = 0.0
        epoch_l1 = 0.0
        try:
            for chunk in batches:
                fb = Tensor(feats_train[chunk])
                lb = labs_train[chunk]
                with Tape() as tape:
                    tape.watch(*trainable)
                    logits = head.forward(fb, "train", drop_rng)
                    loss = nn.cross_entropy(logits, lb)
                    if config.lambda_l1 > 0:
                        pen = l1_penalty(trainable, config.lambda_l1)
                        epoch_l1 += pen.item()
                        loss = loss + pen
                grads = backward(tape, loss)
                epoch_loss += _loss_value(loss, epoch)
                amsgrad_step(trainable, grads, opt, config.learning_rate)
        except NonFiniteError as err:
            raise NumericalError(epoch, f"{err} at epoch {epoch}") from err

        n_batches = max(len(batches), 1)
        train_ba = head_balanced_accuracy(head, feats_train, labs_train, num_classes)
        val_ba = head_balanced_accuracy(head, feats_val, labs_val, num_classes)
        wall = (time.perf_counter() - t0) * 1000
        logger.log(epoch, "train", loss=epoch_loss / n_batches, balanced_accuracy=train_ba,
                   l1=epoch_l1 / n_batches if config.lambda_l1 > 0 else None, wall_ms=wall)
        logger.log(epoch, "val", balanced_accuracy=val_ba, wall_ms=wall)
        ck = Checkpoint(epoch, train_metric=train_ba, val_metric=val_ba)
        history.append(ck)
        keeper.offer(epoch, train_ba, val_ba, head.snapshot)

    encoder_after = params.snapshot()
    for name, arr in encoder_before.items():
        if not np.array_equal(arr, encoder_after[name]):
            raise AssertionError(f"frozen encoder parameter {name!r} changed during probe training")

    final = head.snapshot()
    selected = select_checkpoint(history, config.burn_in_epochs)
    snap = keeper.get(selected.epoch)
    selected = replace(selected, params=snap if snap is not None else final)
    return TrainResult(history, selected, final, logger), head
