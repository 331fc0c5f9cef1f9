# Copyright kinedecode contributors
# Licensed under the Revised BSD License, see LICENSE for details.
# SPDX-License-Identifier: BSD-3-Clause

"""Losses, the Adam optimizer, trial splits and the training loop."""

import logging
import math
from dataclasses import asdict, dataclass, field, fields
from typing import Any, Dict, List, Mapping, Optional, Sequence, Union

import numpy as np

from kinedecode import tensor as T
from kinedecode.dataset import PreparedTrial
from kinedecode.model import ConfigError
from kinedecode.model.decoder import HybridDecoder
from kinedecode.signals import NormalizationParams, SignalKind, WindowSpec, slice_windows, \
    window_end_indices
from kinedecode.tables import write_table
from kinedecode.tensor import Tensor

log = logging.getLogger("kinedecode.train")

#: Held-out size per set at full scale.
FULL_HOLDOUT = 30

#: Below this many trials each held-out set gets :data:`SMALL_HOLDOUT_FRACTION` of them.
FULL_SCALE_MIN_TRIALS = 90
SMALL_HOLDOUT_FRACTION = 0.15


# Losses

def mse_loss(pred: Tensor, target) -> Tensor:
    """Mean squared error over batch and dimensions."""
    target = T.as_tensor(target)
    if pred.shape != target.shape:
        raise ValueError("Prediction shape %s does not match target %s"
                         % (pred.shape, target.shape))
    return T.mean_over_axis(T.square(T.sub(pred, target)))


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Softmax cross-entropy averaged over the batch."""
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ValueError("Need logits [B, K] and B labels, got %s and %s"
                         % (logits.shape, labels.shape))
    n_classes = logits.shape[1]
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        raise ValueError("Labels must be in [0, %d), got range [%d, %d]"
                         % (n_classes, labels.min(), labels.max()))
    return T.scale(T.mean_over_axis(T.pick(T.log_softmax(logits), labels)), -1.0)


OBJECTIVES = {"mse": mse_loss, "ce": cross_entropy}


# Optimizer

@dataclass
class TrainConfig:
    """Optimization settings; ``patience = None`` disables early stopping."""
    epochs: int = 200
    batch_size: int = 64
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    patience: Optional[int] = 20
    min_delta: float = 0.0
    seed: int = 0

    def validate(self) -> "TrainConfig":
        for name in ("epochs", "batch_size"):
            if getattr(self, name) < 1:
                raise ConfigError("must be >= 1, got %r" % getattr(self, name), "train." + name)
        if not self.learning_rate > 0:
            raise ConfigError("must be positive, got %r" % self.learning_rate,
                              "train.learning_rate")
        for name in ("beta1", "beta2"):
            if not 0.0 <= getattr(self, name) < 1.0:
                raise ConfigError("must be in [0, 1), got %r" % getattr(self, name),
                                  "train." + name)
        if not self.eps > 0:
            raise ConfigError("must be positive, got %r" % self.eps, "train.eps")
        if self.patience is not None and self.patience < 0:
            raise ConfigError("must be >= 0 or null, got %r" % self.patience, "train.patience")
        if self.min_delta < 0:
            raise ConfigError("must be >= 0, got %r" % self.min_delta, "train.min_delta")
        return self

    @classmethod
    def from_dict(cls, values: Mapping[str, Any]) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        for key in values:
            if key not in known:
                raise ConfigError("unknown option", "train.%s" % key)
        return cls(**values)

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


@dataclass
class AdamState:
    """First and second moment estimates per parameter name."""
    step: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params, grads: Mapping[str, Optional[np.ndarray]], state: AdamState,
              config: TrainConfig) -> AdamState:
    """One bias-corrected Adam update, applied to the parameter arrays in place.

    *params* maps names to :class:`Tensor`; names missing from *grads* (or
    mapped to ``None``) are left alone.
    """
    state.step += 1
    b1, b2 = config.beta1, config.beta2
    correction1 = 1.0 - b1 ** state.step
    correction2 = 1.0 - b2 ** state.step
    for name, t in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if name not in state.m:
            state.m[name] = np.zeros_like(t.values)
            state.v[name] = np.zeros_like(t.values)
        m, v = state.m[name], state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        t.values -= config.learning_rate * (m / correction1) / (np.sqrt(v / correction2)
                                                                + config.eps)
    return state


# Splits

@dataclass(frozen=True)
class SplitPlan:
    """Disjoint train, validation and test trial ids."""
    train: tuple
    val: tuple
    test: tuple

    def __post_init__(self):
        for name in ("train", "val", "test"):
            object.__setattr__(self, name, tuple(sorted(int(i) for i in getattr(self, name))))
        sets = [set(self.train), set(self.val), set(self.test)]
        if any(len(s) != len(getattr(self, n)) for s, n in zip(sets, ("train", "val", "test"))):
            raise ValueError("Split contains duplicate trial ids")
        if sets[0] & sets[1] or sets[0] & sets[2] or sets[1] & sets[2]:
            raise ValueError("Train, validation and test trials must be disjoint")

    @classmethod
    def from_ids(cls, train: Sequence[int], val: Sequence[int], test: Sequence[int]) -> "SplitPlan":
        return cls(tuple(train), tuple(val), tuple(test))

    @property
    def sizes(self):
        return len(self.train), len(self.val), len(self.test)

    def part_of(self, trial_id: int) -> str:
        for name in ("train", "val", "test"):
            if trial_id in getattr(self, name):
                return name
        raise KeyError("Trial %d is not in the split" % trial_id)

    def check_windows(self, trial_ids: np.ndarray, part: str) -> None:
        """Raise if any window comes from a trial outside *part*."""
        allowed = set(getattr(self, part))
        leaked = sorted(set(np.unique(trial_ids).tolist()) - allowed)
        if leaked:
            raise ValueError("Windows from trials %s leaked into the %s set" % (leaked, part))


def holdout_size(n_trials: int, full: int = FULL_HOLDOUT) -> int:
    """Size of each held-out set for *n_trials* trials."""
    if n_trials >= FULL_SCALE_MIN_TRIALS:
        return full
    return max(1, int(math.floor(n_trials * SMALL_HOLDOUT_FRACTION + 0.5)))


def make_split(trials: Union[int, Sequence[int]], seed: int, n_val: int = FULL_HOLDOUT,
               n_test: int = FULL_HOLDOUT,
               test_ids: Optional[Sequence[int]] = None) -> SplitPlan:
    """Randomly assign trials to validation, test and training sets.

    With *test_ids* the test set is fixed (e.g. every trial of a held-out
    subject) and the validation set is drawn from the rest.
    """
    ids = np.arange(trials) if isinstance(trials, (int, np.integer)) else np.asarray(trials)
    ids = np.sort(ids.astype(np.int64))
    rng = np.random.default_rng(seed)

    if test_ids is not None:
        test = np.asarray(sorted(set(int(i) for i in test_ids)), dtype=np.int64)
        unknown = np.setdiff1d(test, ids)
        if unknown.size:
            raise ValueError("Test trials %s are not in the dataset" % unknown.tolist())
        rest = np.setdiff1d(ids, test)
        nv = holdout_size(rest.size, n_val)
        if rest.size < nv + 1:
            raise ValueError("%d trials left after the test set; need at least %d"
                             % (rest.size, nv + 1))
        perm = rng.permutation(rest)
        return SplitPlan(tuple(perm[nv:]), tuple(perm[:nv]), tuple(test))

    n = ids.size
    nv, nt = holdout_size(n, n_val), holdout_size(n, n_test)
    if n < nv + nt + 1:
        raise ValueError("Need at least %d trials for a split, got %d" % (nv + nt + 1, n))
    perm = rng.permutation(ids)
    plan = SplitPlan(tuple(perm[nv + nt:]), tuple(perm[:nv]), tuple(perm[nv:nv + nt]))
    log.debug("Split %d trials into %d/%d/%d (seed %d)", n, *plan.sizes, seed)
    return plan


# Windows

@dataclass
class WindowSet:
    """Stacked model inputs and targets.

    Attributes:
        eeg: ``[N, C, W]`` EEG windows.
        emg: ``[N, C', W]`` EMG windows, or ``None``.
        targets: ``[N, 6]`` kinematics at ``t + delay`` (normalized when a
            :class:`NormalizationParams` was given).
        labels: ``[N]`` motion state at ``t + delay``, or ``None``.
        trial_ids: ``[N]`` source trial of every window.
        target_index: ``[N]`` sample index of every target within its trial.
    """
    eeg: np.ndarray
    emg: Optional[np.ndarray]
    targets: np.ndarray
    labels: Optional[np.ndarray]
    trial_ids: np.ndarray
    target_index: np.ndarray

    def __len__(self):
        return self.eeg.shape[0]

    def subset(self, index) -> "WindowSet":
        index = np.asarray(index)
        return WindowSet(self.eeg[index], None if self.emg is None else self.emg[index],
                         self.targets[index], None if self.labels is None else self.labels[index],
                         self.trial_ids[index], self.target_index[index])


def make_windows(trials: Sequence[PreparedTrial], spec: WindowSpec,
                 norm: Optional[NormalizationParams] = None, use_emg: bool = False) -> WindowSet:
    """Slice every trial into aligned (window, delayed target) pairs."""
    eeg, emg, targets, labels, ids, index = [], [], [], [], [], []
    have_labels = all(t.labels is not None for t in trials)
    w, d = spec.window_samples, spec.delay_samples
    for trial in trials:
        kin = trial.block(SignalKind.KIN)
        if norm is not None:
            kin = kin.replace(data=norm.normalize(kin.data, axis=0))
        pairs = slice_windows(trial.block(SignalKind.EEG), kin, spec)
        if not pairs:
            continue
        ends = window_end_indices(trial.eeg.shape[1], trial.n_samples, spec)
        eeg.append(np.stack([p[0] for p in pairs]))
        targets.append(np.stack([p[1] for p in pairs]))
        if use_emg:
            emg.append(np.stack([trial.emg[:, t - w + 1:t + 1] for t in ends]))
        if have_labels:
            labels.append(trial.labels[ends + d])
        ids.append(np.full(len(pairs), trial.trial_id, dtype=np.int64))
        index.append(ends + d)
    if not eeg:
        c = trials[0].eeg.shape[0] if trials else 0
        ce = trials[0].emg.shape[0] if trials else 0
        return WindowSet(np.zeros((0, c, w)), np.zeros((0, ce, w)) if use_emg else None,
                         np.zeros((0, 6)), np.zeros(0, dtype=np.int64) if have_labels else None,
                         np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64))
    return WindowSet(np.concatenate(eeg), np.concatenate(emg) if use_emg else None,
                     np.concatenate(targets),
                     np.concatenate(labels).astype(np.int64) if have_labels else None,
                     np.concatenate(ids), np.concatenate(index))


# Training loop

@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float


@dataclass
class TrainResult:
    history: List[EpochRecord]
    best_epoch: int
    best_loss: float
    stopped_early: bool

    def monotone_after(self, epoch: int = 5) -> bool:
        """Whether the training loss never rose after *epoch*."""
        losses = [r.train_loss for r in self.history if r.epoch >= epoch]
        return all(b <= a for a, b in zip(losses, losses[1:]))


def write_history(path, history: Sequence[EpochRecord]) -> None:
    write_table(path, ["epoch", "train_loss", "val_loss"],
                ([r.epoch, r.train_loss, r.val_loss] for r in history))


def _targets(data: WindowSet, objective: str) -> np.ndarray:
    if objective == "ce":
        if data.labels is None:
            raise ValueError("Classifier training needs state labels")
        return data.labels
    return data.targets


def evaluate_loss(decoder: HybridDecoder, data: WindowSet, objective: str = "mse",
                  batch_size: int = 256) -> float:
    """Mean loss over *data* without dropout or gradient tracking."""
    if len(data) == 0:
        return float("nan")
    values, _ = decoder.predict(data.eeg, data.emg, batch_size)
    return OBJECTIVES[objective](Tensor(values), _targets(data, objective)).item()


def train_loop(decoder: HybridDecoder, train_set: WindowSet, val_set: Optional[WindowSet],
               config: TrainConfig, objective: str = "mse", history_path=None) -> TrainResult:
    """Mini-batch Adam with early stopping on the validation loss.

    The best parameters seen are copied back into ``decoder.params`` at the
    end. Without a validation set the training loss is monitored instead.
    """
    config.validate()
    if objective not in OBJECTIVES:
        raise ValueError("Unknown objective %s" % objective)
    if len(train_set) == 0:
        raise ValueError("No training windows")
    loss_fn = OBJECTIVES[objective]
    targets = _targets(train_set, objective)
    rng = np.random.default_rng(config.seed)
    params = decoder.params
    state = AdamState()

    history: List[EpochRecord] = []
    best_loss, best_epoch, wait, stopped_early = np.inf, 0, 0, False
    best_values = {n: t.values.copy() for n, t in params.items()}
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(len(train_set))
        total = 0.0
        for start in range(0, len(order), config.batch_size):
            idx = order[start:start + config.batch_size]
            params.zero_grad()
            out = decoder.forward(train_set.eeg[idx],
                                  None if train_set.emg is None else train_set.emg[idx],
                                  training=True, rng=rng)
            loss = loss_fn(out.values, targets[idx])
            loss.backward()
            adam_step(params, {n: t.grad for n, t in params.items()}, state, config)
            total += loss.item() * len(idx)
        train_loss = total / len(order)
        val_loss = (evaluate_loss(decoder, val_set, objective)
                    if val_set is not None and len(val_set) else float("nan"))
        history.append(EpochRecord(epoch, train_loss, val_loss))
        monitored = train_loss if math.isnan(val_loss) else val_loss
        log.debug("epoch %d: train %.6g, val %.6g", epoch, train_loss, val_loss)

        if monitored < best_loss - config.min_delta:
            best_loss, best_epoch, wait = monitored, epoch, 0
            best_values = {n: t.values.copy() for n, t in params.items()}
        else:
            wait += 1
            if config.patience is not None and wait > config.patience:
                stopped_early = True
                log.info("Stopping at epoch %d, no improvement for %d epochs", epoch, wait)
                break

    for name, t in params.items():
        t.values[...] = best_values[name]
    result = TrainResult(history, best_epoch, float(best_loss), stopped_early)
    if config.patience is None and not result.monotone_after(5):
        log.warning("Training loss rose after epoch 5; check the learning rate")
    log.info("Trained %d epochs, best %s loss %.6g at epoch %d", len(history), objective,
             best_loss, best_epoch)
    if history_path is not None:
        write_history(history_path, history)
    return result
