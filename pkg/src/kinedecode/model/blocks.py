# Copyright kinedecode contributors
# Licensed under the Revised BSD License, see LICENSE for details.
# SPDX-License-Identifier: BSD-3-Clause

"""The five stages of the hybrid decoder."""

from typing import Optional, Tuple

import numpy as np

from kinedecode import tensor as T
from kinedecode.model import Block, ModelConfig, ModelParams, ParamSpec
from kinedecode.tensor import Tensor


class MultiConvBlock(Block):
    """Per-electrode temporal convolutions at several scales.

    Every electrode is convolved with the same kernels, so the electrode axis
    survives: ``[B, C, T]`` becomes ``[B, F, C, T']``. A large kernel runs
    first, then the parallel branches (when enabled) whose outputs are
    concatenated along the feature axis, then average pooling.
    """

    def __init__(self, config: ModelConfig, prefix: str = "conv"):
        super().__init__(config, prefix)

    def param_specs(self):
        cfg = self.config
        specs = {
            "large.w": ParamSpec((cfg.large_features, 1, cfg.large_kernel)),
            "large.b": ParamSpec((cfg.large_features,), "zeros"),
        }
        if cfg.use_branches:
            for i, k in enumerate(cfg.branch_kernels):
                specs["branch%d.w" % i] = ParamSpec((cfg.branch_features, cfg.large_features, k))
                specs["branch%d.b" % i] = ParamSpec((cfg.branch_features,), "zeros")
        return specs

    def forward(self, params: ModelParams, x: Tensor, training: bool = False,
                rng: Optional[np.random.Generator] = None) -> Tensor:
        cfg = self.config
        if x.ndim != 3:
            raise ValueError("Multi-convolution input must be [B, C, T], got %s" % (x.shape,))
        b, c, t = x.shape
        if t < cfg.large_kernel:
            raise ValueError("Window of %d samples is shorter than the large kernel (%d)"
                             % (t, cfg.large_kernel))
        h = T.reshape(x, (b * c, 1, t))
        h = T.elu(T.conv1d(h, self.p(params, "large.w"), padding=cfg.large_kernel // 2,
                           bias=self.p(params, "large.b")))
        if cfg.use_branches:
            branches = [T.conv1d(h, self.p(params, "branch%d.w" % i), padding=k // 2,
                                 bias=self.p(params, "branch%d.b" % i))
                        for i, k in enumerate(cfg.branch_kernels)]
            h = T.elu(T.concat(branches, axis=1))
        h = T.dropout(h, cfg.dropout, rng, training)
        h = T.avg_pool1d(h, cfg.pool_k, cfg.pool_s)
        f, t_out = h.shape[1], h.shape[2]
        return T.transpose(T.reshape(h, (b, c, f, t_out)), (0, 2, 1, 3))


class SEBlock(Block):
    """Squeeze-and-excitation over the electrode axis of ``[B, C, F, T]``.

    The squeeze is the mean over ``F x T`` for each electrode, the excitation
    a two-layer gate ``sigmoid(W2 relu(W1 z))`` with a ``C / r`` bottleneck,
    and the output rescales every electrode's maps by its gate value.
    """

    def __init__(self, config: ModelConfig, channels: int, prefix: str = "se",
                 reduction: Optional[int] = None):
        super().__init__(config, prefix)
        self.channels = channels
        self.hidden = max(1, channels // (reduction or config.se_reduction))

    def param_specs(self):
        return {
            "w1": ParamSpec((self.channels, self.hidden)),
            "b1": ParamSpec((self.hidden,), "zeros"),
            "w2": ParamSpec((self.hidden, self.channels)),
            "b2": ParamSpec((self.channels,), "zeros"),
        }

    def squeeze(self, x: Tensor) -> Tensor:
        return T.mean_over_axis(x, axis=(2, 3))

    def scale(self, params: ModelParams, x: Tensor) -> Tensor:
        """Gate values ``s`` of shape ``[B, C]``, each strictly inside (0, 1)."""
        z = self.squeeze(x)
        hidden = T.relu(T.dense(z, self.p(params, "w1"), self.p(params, "b1")))
        return T.sigmoid(T.dense(hidden, self.p(params, "w2"), self.p(params, "b2")))

    def forward(self, params: ModelParams, x: Tensor) -> Tensor:
        if x.ndim != 4 or x.shape[1] != self.channels:
            raise ValueError("SE input must be [B, %d, F, T], got %s" % (self.channels, x.shape))
        s = self.scale(params, x)
        return T.mul(x, T.reshape(s, s.shape + (1, 1)))


class Embedding(Block):
    """Turns each time step's electrode-by-feature slice into one token.

    For the fusion model the EMG slice is concatenated to the EEG slice
    before the shared projection. A learned positional term is added to the
    ``T'`` tokens.
    """

    def __init__(self, config: ModelConfig, prefix: str = "embed"):
        super().__init__(config, prefix)

    def param_specs(self):
        cfg = self.config
        return {
            "w": ParamSpec((cfg.embed_input_width, cfg.embed_dim)),
            "b": ParamSpec((cfg.embed_dim,), "zeros"),
            "pos": ParamSpec((cfg.pooled_length, cfg.embed_dim), "normal", {"std": 0.02}),
        }

    @staticmethod
    def _tokens(x: Tensor) -> Tensor:
        b, c, f, t = x.shape
        return T.reshape(T.transpose(x, (0, 3, 1, 2)), (b, t, c * f))

    def forward(self, params: ModelParams, x_eeg: Tensor,
                x_emg: Optional[Tensor] = None) -> Tensor:
        if self.config.is_fusion and x_emg is None:
            raise ValueError("Fusion model needs an EMG input")
        if not self.config.is_fusion and x_emg is not None:
            raise ValueError("EEG-only model was given an EMG input")
        tokens = self._tokens(x_eeg)
        if x_emg is not None:
            if x_emg.shape[-1] != x_eeg.shape[-1]:
                raise ValueError("EEG has %d time steps after pooling but EMG has %d"
                                 % (x_eeg.shape[-1], x_emg.shape[-1]))
            tokens = T.concat([tokens, self._tokens(x_emg)], axis=-1)
        z = T.dense(tokens, self.p(params, "w"), self.p(params, "b"))
        pos = self.p(params, "pos")
        if pos.shape[0] != z.shape[1]:
            raise ValueError("Positional table covers %d steps, input has %d"
                             % (pos.shape[0], z.shape[1]))
        return T.add(z, pos)


class SelfAttentionBlock(Block):
    """One multi-head scaled dot-product self-attention layer.

    ``head_i = softmax(Q_i K_i^T / sqrt(d_k)) V_i``; the heads are
    concatenated and projected by ``W_O``. The projection is added back to
    the input and layer-normalized.
    """

    def __init__(self, config: ModelConfig, prefix: str = "attn"):
        super().__init__(config, prefix)

    def param_specs(self):
        d = self.config.embed_dim
        return {
            "wq": ParamSpec((d, d)),
            "wk": ParamSpec((d, d)),
            "wv": ParamSpec((d, d)),
            "wo": ParamSpec((d, d)),
            "ln.g": ParamSpec((d,), "ones"),
            "ln.b": ParamSpec((d,), "zeros"),
        }

    def _heads(self, x: Tensor) -> Tensor:
        b, t, _ = x.shape
        cfg = self.config
        return T.transpose(T.reshape(x, (b, t, cfg.heads, cfg.head_dim)), (0, 2, 1, 3))

    def attend(self, params: ModelParams, z: Tensor) -> Tuple[Tensor, np.ndarray]:
        """Multi-head attention output before the residual, plus ``[B, h, T, T]`` weights."""
        b, t, d = z.shape
        q = self._heads(T.matmul(z, self.p(params, "wq")))
        k = self._heads(T.matmul(z, self.p(params, "wk")))
        v = self._heads(T.matmul(z, self.p(params, "wv")))
        scores = T.scale(T.matmul(q, T.transpose(k)), 1.0 / np.sqrt(self.config.head_dim))
        weights = T.softmax(scores, axis=-1)
        context = T.reshape(T.transpose(T.matmul(weights, v), (0, 2, 1, 3)), (b, t, d))
        return T.matmul(context, self.p(params, "wo")), weights.values

    def forward(self, params: ModelParams, z: Tensor) -> Tuple[Tensor, np.ndarray]:
        if z.ndim != 3 or z.shape[-1] != self.config.embed_dim:
            raise ValueError("Attention input must be [B, T, %d], got %s"
                             % (self.config.embed_dim, z.shape))
        out, weights = self.attend(params, z)
        return T.layer_norm(T.add(z, out), self.p(params, "ln.g"), self.p(params, "ln.b")), weights


class FCHead(Block):
    """Global average over time, layer norm, then two affine layers."""

    def __init__(self, config: ModelConfig, prefix: str = "head"):
        super().__init__(config, prefix)

    def param_specs(self):
        cfg = self.config
        return {
            "ln.g": ParamSpec((cfg.embed_dim,), "ones"),
            "ln.b": ParamSpec((cfg.embed_dim,), "zeros"),
            "w1": ParamSpec((cfg.embed_dim, cfg.hidden_width)),
            "b1": ParamSpec((cfg.hidden_width,), "zeros"),
            "w2": ParamSpec((cfg.hidden_width, cfg.out_dim)),
            "b2": ParamSpec((cfg.out_dim,), "zeros"),
        }

    def forward(self, params: ModelParams, z: Tensor, training: bool = False,
                rng: Optional[np.random.Generator] = None) -> Tuple[Tensor, Tensor]:
        """Returns ``(output [B, out_dim], pooled latent [B, D])``."""
        pooled = T.mean_over_axis(z, axis=1)
        h = T.layer_norm(pooled, self.p(params, "ln.g"), self.p(params, "ln.b"))
        h = T.elu(T.dense(h, self.p(params, "w1"), self.p(params, "b1")))
        h = T.dropout(h, self.config.dropout, rng, training)
        return T.dense(h, self.p(params, "w2"), self.p(params, "b2")), pooled
