# Copyright kinedecode contributors
# Licensed under the Revised BSD License, see LICENSE for details.
# SPDX-License-Identifier: BSD-3-Clause

"""The assembled CNN-attention decoder and its checkpoint format."""

import json
import logging
from dataclasses import dataclass
from typing import Dict, Mapping, Optional, Tuple

import numpy as np

from kinedecode import tensor as T
from kinedecode.model import ConfigError, ModelConfig, ModelParams
from kinedecode.model.blocks import Embedding, FCHead, MultiConvBlock, SEBlock, SelfAttentionBlock
from kinedecode.store import CheckpointError, array_text, load_arrays, save_arrays, text_array
from kinedecode.tensor import Tensor

_CONFIG_KEY = "meta.config"
_PARAM_PREFIX = "param"


@dataclass
class DecoderOutput:
    """Result of one forward pass.

    Attributes:
        values: ``[B, out_dim]``; normalized index and thumb xyz for the
            regressor, state logits for the classifier.
        latent: ``[B, D]`` time-pooled token features, consumed by the critic.
        attention: ``[B, h, T', T']`` attention weights, or ``None`` when the
            attention block is disabled.
    """

    values: Tensor
    latent: Tensor
    attention: Optional[np.ndarray] = None


class HybridDecoder:
    """Multi-convolution, SE, embedding, self-attention and FC head in sequence.

    Args:
        config: Architecture; validated on construction.
        params: Existing weights. When omitted they are drawn from *seed*.
        seed: Initialization seed.
    """

    def __init__(self, config: ModelConfig, params: Optional[ModelParams] = None,
                 seed: int = 0):
        self.log = logging.getLogger("kinedecode.model.%s" % type(self).__qualname__)
        self.config = config.validate()
        self.conv = MultiConvBlock(config)
        self.se = SEBlock(config, config.in_channels_eeg) if config.use_se else None
        self.emg_se = None
        if config.is_fusion and config.use_se and config.emg_se:
            self.emg_se = SEBlock(config, config.in_channels_emg, prefix="se_emg",
                                  reduction=config.emg_se_reduction)
        self.embed = Embedding(config)
        self.attention = SelfAttentionBlock(config) if config.use_attention else None
        self.head = FCHead(config)

        if params is None:
            params = self.init_params(seed)
        else:
            params.check_shapes(self.param_shapes())
        self.params = params
        self.log.debug("%s decoder with %d weights (%s)",
                       "Fusion" if config.is_fusion else "EEG-only", self.params.count(),
                       "classifier" if config.is_classifier else "regressor")

    @property
    def blocks(self):
        return [b for b in (self.conv, self.se, self.emg_se, self.embed, self.attention, self.head)
                if b is not None]

    def init_params(self, seed: int) -> ModelParams:
        rng = np.random.default_rng(seed)
        params = ModelParams()
        for block in self.blocks:
            block.init_params(params, rng)
        return params

    def param_shapes(self) -> Dict[str, Tuple[int, ...]]:
        shapes = {}
        for block in self.blocks:
            shapes.update(block.param_shapes())
        return shapes

    def _check_input(self, x: Tensor, channels: int, what: str) -> None:
        expected = (channels, self.config.window_samples)
        if x.ndim != 3 or x.shape[1:] != expected:
            raise ValueError("%s input must be [B, %d, %d], got %s"
                             % (what, expected[0], expected[1], x.shape))

    def forward(self, x_eeg, x_emg=None, params: Optional[ModelParams] = None,
                training: bool = False, rng: Optional[np.random.Generator] = None) -> DecoderOutput:
        """Run a batch of windows through the network.

        Args:
            x_eeg: ``[B, C, T]`` EEG windows.
            x_emg: ``[B, C', T]`` EMG windows, fusion configs only.
            params: Weights to use instead of :attr:`params`.
            training: Enables dropout, which then draws from *rng*.
        """
        cfg = self.config
        params = self.params if params is None else params
        x = T.as_tensor(x_eeg)
        self._check_input(x, cfg.in_channels_eeg, "EEG")
        h = T.transpose(self.conv(params, x, training, rng), (0, 2, 1, 3))
        if self.se is not None:
            h = self.se(params, h)

        e = None
        if cfg.is_fusion:
            if x_emg is None:
                raise ValueError("Fusion decoder needs EMG windows")
            xe = T.as_tensor(x_emg)
            self._check_input(xe, cfg.in_channels_emg, "EMG")
            e = T.transpose(self.conv(params, xe, training, rng), (0, 2, 1, 3))
            if self.emg_se is not None:
                e = self.emg_se(params, e)

        z = self.embed(params, h, e)
        weights = None
        if self.attention is not None:
            z, weights = self.attention(params, z)
        out, latent = self.head(params, z, training, rng)
        return DecoderOutput(out, latent, weights)

    __call__ = forward

    def predict(self, x_eeg: np.ndarray, x_emg: Optional[np.ndarray] = None,
                batch_size: int = 256) -> Tuple[np.ndarray, np.ndarray]:
        """Inference without gradient tracking; returns ``(values, latent)`` arrays."""
        frozen = self.params.detached()
        values, latents = [], []
        for start in range(0, len(x_eeg), batch_size):
            stop = start + batch_size
            emg = None if x_emg is None else x_emg[start:stop]
            out = self.forward(x_eeg[start:stop], emg, params=frozen)
            values.append(out.values.values)
            latents.append(out.latent.values)
        if not values:
            return (np.zeros((0, self.config.out_dim)), np.zeros((0, self.config.embed_dim)))
        return np.concatenate(values), np.concatenate(latents)

    def predict_proba(self, x_eeg: np.ndarray, x_emg: Optional[np.ndarray] = None,
                      batch_size: int = 256) -> np.ndarray:
        """State posteriors of a classifier config, rows summing to one."""
        if not self.config.is_classifier:
            raise ConfigError("predict_proba needs a classifier config (out_dim=5)")
        logits, _ = self.predict(x_eeg, x_emg, batch_size)
        return T.softmax(Tensor(logits), axis=-1).values

    def to_arrays(self, extra: Optional[Mapping[str, np.ndarray]] = None) -> Dict[str, np.ndarray]:
        arrays = {_CONFIG_KEY: text_array(json.dumps(self.config.to_dict(), sort_keys=True))}
        arrays.update(self.params.as_arrays(_PARAM_PREFIX))
        for key, value in (extra or {}).items():
            if key == _CONFIG_KEY or key.startswith(_PARAM_PREFIX + "."):
                raise KeyError("Extra checkpoint entry %s collides with model entries" % key)
            arrays[key] = value
        return arrays

    def save(self, path, extra: Optional[Mapping[str, np.ndarray]] = None) -> None:
        """Write config, weights and any *extra* arrays (e.g. normalization) to *path*."""
        save_arrays(path, self.to_arrays(extra))
        self.log.info("Saved checkpoint %s", path)

    @classmethod
    def from_arrays(cls, arrays: Mapping[str, np.ndarray], path=None):
        if _CONFIG_KEY not in arrays:
            raise CheckpointError("no model configuration entry", path)
        try:
            config = ModelConfig.from_dict(json.loads(array_text(arrays[_CONFIG_KEY])))
        except (ValueError, TypeError) as e:
            raise CheckpointError("unreadable model configuration (%s)" % e, path) from None
        params = ModelParams.from_arrays(arrays, _PARAM_PREFIX)
        extra = {k: v for k, v in arrays.items()
                 if k != _CONFIG_KEY and not k.startswith(_PARAM_PREFIX + ".")}
        return cls(config, params=params), extra

    @classmethod
    def load(cls, path) -> Tuple["HybridDecoder", Dict[str, np.ndarray]]:
        """Inverse of :meth:`save`; returns the decoder and the extra arrays."""
        return cls.from_arrays(load_arrays(path), path)
