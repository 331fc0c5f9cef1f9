# Copyright kinedecode contributors
# Licensed under the Revised BSD License, see LICENSE for details.
# SPDX-License-Identifier: BSD-3-Clause

"""Confidence network that scores each decoded point."""

import logging
from collections import OrderedDict
from dataclasses import asdict, dataclass, fields
from typing import Any, Dict, Mapping, Optional

import numpy as np
from scipy.stats import spearmanr

from kinedecode import tensor as T
from kinedecode.model import ConfigError
from kinedecode.store import load_arrays, save_arrays
from kinedecode.tensor import Tensor
from kinedecode.train import AdamState, TrainConfig, adam_step, mse_loss

log = logging.getLogger("kinedecode.copilot.critic")


def local_jerk(decoded: np.ndarray) -> np.ndarray:
    """Norm of the third difference of a ``[N, 6]`` sequence at every point.

    The first three points reuse the first available difference.
    """
    decoded = np.asarray(decoded, dtype=np.float64)
    if decoded.ndim != 2:
        raise ValueError("Need a [N, D] sequence, got shape %s" % (decoded.shape,))
    if decoded.shape[0] < 4:
        return np.zeros(decoded.shape[0])
    jerk = np.linalg.norm(np.diff(decoded, n=3, axis=0), axis=1)
    return np.concatenate([np.full(3, jerk[0]), jerk])


def point_errors(pred: np.ndarray, truth: np.ndarray) -> np.ndarray:
    """Euclidean distance between decoded and true 6-vectors, per point."""
    pred, truth = np.asarray(pred, dtype=np.float64), np.asarray(truth, dtype=np.float64)
    if pred.shape != truth.shape:
        raise ValueError("Shapes differ: %s vs %s" % (pred.shape, truth.shape))
    return np.linalg.norm(pred - truth, axis=1)


def confidence_target(errors: np.ndarray, alpha: Optional[float] = None):
    """``exp(-alpha * e)``; by default alpha maps the median error to 0.5.

    Returns ``(targets, alpha)``.
    """
    errors = np.asarray(errors, dtype=np.float64)
    if alpha is None:
        median = float(np.median(errors)) if errors.size else 0.0
        alpha = np.log(2.0) / median if median > 0 else 1.0
    return np.exp(-alpha * errors), float(alpha)


def calibration(confidence: np.ndarray, errors: np.ndarray) -> float:
    """Spearman correlation between confidence and negated point error.

    1.0 means the critic ranks points exactly by accuracy; NaN when either
    side is constant or there are fewer than two points.
    """
    confidence = np.asarray(confidence, dtype=np.float64).ravel()
    errors = np.asarray(errors, dtype=np.float64).ravel()
    if confidence.size != errors.size:
        raise ValueError("%d scores for %d errors" % (confidence.size, errors.size))
    if confidence.size < 2 or np.ptp(confidence) == 0 or np.ptp(errors) == 0:
        return float("nan")
    rho, _ = spearmanr(confidence, -errors)
    return float(rho)


@dataclass
class CriticConfig:
    hidden: int = 16
    epochs: int = 100
    batch_size: int = 64
    learning_rate: float = 1e-2
    alpha: Optional[float] = None
    seed: int = 0

    def validate(self) -> "CriticConfig":
        for name in ("hidden", "epochs", "batch_size"):
            if getattr(self, name) < 1:
                raise ConfigError("must be >= 1, got %r" % getattr(self, name),
                                  "copilot.critic.%s" % name)
        if not self.learning_rate > 0:
            raise ConfigError("must be positive", "copilot.critic.learning_rate")
        if self.alpha is not None and not self.alpha > 0:
            raise ConfigError("must be positive or null", "copilot.critic.alpha")
        return self

    @classmethod
    def from_dict(cls, values: Mapping[str, Any]) -> "CriticConfig":
        known = {f.name for f in fields(cls)}
        for key in values:
            if key not in known:
                raise ConfigError("unknown option", "copilot.critic.%s" % key)
        return cls(**values)

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


class Critic:
    """Small feed-forward network: features to a confidence in [0, 1].

    The input is the decoder latent, the state posterior and the local jerk,
    concatenated and standardized with statistics from the training points.
    One ELU hidden layer feeds a sigmoid output.
    """

    def __init__(self, n_inputs: int, hidden: int = 16, seed: int = 0):
        self.log = logging.getLogger("kinedecode.copilot.%s" % type(self).__qualname__)
        rng = np.random.default_rng(seed)
        limit1 = np.sqrt(6.0 / (n_inputs + hidden))
        limit2 = np.sqrt(6.0 / (hidden + 1))
        self.params = OrderedDict([
            ("w1", Tensor(rng.uniform(-limit1, limit1, (n_inputs, hidden)), True, "w1")),
            ("b1", Tensor(np.zeros(hidden), True, "b1")),
            ("w2", Tensor(rng.uniform(-limit2, limit2, (hidden, 1)), True, "w2")),
            ("b2", Tensor(np.zeros(1), True, "b2")),
        ])
        self.mean = np.zeros(n_inputs)
        self.std = np.ones(n_inputs)
        self.alpha = 1.0

    @property
    def n_inputs(self) -> int:
        return self.params["w1"].shape[0]

    @staticmethod
    def features(latent, posterior, jerk) -> np.ndarray:
        latent = np.atleast_2d(np.asarray(latent, dtype=np.float64))
        posterior = np.atleast_2d(np.asarray(posterior, dtype=np.float64))
        jerk = np.asarray(jerk, dtype=np.float64).reshape(-1, 1)
        if not latent.shape[0] == posterior.shape[0] == jerk.shape[0]:
            raise ValueError("Latent, posterior and jerk disagree on the number of points")
        return np.concatenate([latent, posterior, jerk], axis=1)

    def forward(self, x) -> Tensor:
        x = T.as_tensor((np.asarray(x, dtype=np.float64) - self.mean) / self.std)
        p = self.params
        hidden = T.elu(T.dense(x, p["w1"], p["b1"]))
        return T.reshape(T.sigmoid(T.dense(hidden, p["w2"], p["b2"])), (x.shape[0],))

    def score(self, latent, posterior, jerk) -> np.ndarray:
        x = self.features(latent, posterior, jerk)
        if x.shape[1] != self.n_inputs:
            raise ValueError("Critic expects %d inputs, got %d" % (self.n_inputs, x.shape[1]))
        return self.forward(x).values

    def fit(self, x: np.ndarray, errors: np.ndarray, config: CriticConfig) -> list:
        """Regress ``exp(-alpha * e)``; returns the per-epoch losses."""
        config.validate()
        x = np.asarray(x, dtype=np.float64)
        if x.shape[0] == 0:
            raise ValueError("No points to train the critic on")
        targets, self.alpha = confidence_target(errors, config.alpha)
        self.mean = x.mean(axis=0)
        std = x.std(axis=0)
        self.std = np.where(std > 0, std, 1.0)
        rng = np.random.default_rng(config.seed)
        opt = TrainConfig(learning_rate=config.learning_rate, patience=None)
        state = AdamState()
        losses = []
        for epoch in range(config.epochs):
            order = rng.permutation(x.shape[0])
            total = 0.0
            for start in range(0, order.size, config.batch_size):
                idx = order[start:start + config.batch_size]
                for t in self.params.values():
                    t.zero_grad()
                loss = mse_loss(self.forward(x[idx]), targets[idx])
                loss.backward()
                adam_step(self.params, {n: t.grad for n, t in self.params.items()}, state, opt)
                total += loss.item() * idx.size
            losses.append(total / order.size)
        self.log.info("Critic trained on %d points, alpha %.4g, final loss %.4g",
                      x.shape[0], self.alpha, losses[-1])
        return losses

    def to_arrays(self) -> Dict[str, np.ndarray]:
        arrays = OrderedDict(("critic.%s" % n, t.values.copy()) for n, t in self.params.items())
        arrays["critic.mean"] = self.mean
        arrays["critic.std"] = self.std
        arrays["critic.alpha"] = np.array([self.alpha])
        return arrays

    @classmethod
    def from_arrays(cls, arrays: Mapping[str, np.ndarray]) -> "Critic":
        w1 = arrays["critic.w1"]
        critic = cls(w1.shape[0], w1.shape[1])
        for name, t in critic.params.items():
            t.values = np.array(arrays["critic.%s" % name], dtype=np.float64)
        critic.mean = arrays["critic.mean"]
        critic.std = arrays["critic.std"]
        critic.alpha = float(arrays["critic.alpha"][0])
        return critic

    def save(self, path) -> None:
        save_arrays(path, self.to_arrays())

    @classmethod
    def load(cls, path) -> "Critic":
        return cls.from_arrays(load_arrays(path))


def critic_score(critic: Critic, latent, posterior, local_jerk_value: float) -> float:
    """Confidence of a single point."""
    return float(critic.score(np.atleast_2d(latent), np.atleast_2d(posterior),
                              [local_jerk_value])[0])
