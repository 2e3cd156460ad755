"""Named-parameter plumbing shared by the attention head and the model.

Learnable arrays and batch-norm running statistics live in flat
``name -> ndarray`` dictionaries.  A forward pass reads them through
:class:`Layers`, which holds the per-pass tensor views (tape leaves while
training, constants otherwise) and the train/eval switch.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from . import ops
from .tensor import Tape, Tensor


@dataclass
class ParamSet:
    weights: dict[str, np.ndarray] = field(default_factory=dict)
    buffers: dict[str, np.ndarray] = field(default_factory=dict)

    def conv(self, rng, name, c_out, c_in, k, bias=False):
        fan_in = c_in * k * k
        self.weights[f"{name}.weight"] = rng.normal(0.0, math.sqrt(2.0 / fan_in), (c_out, c_in, k, k))
        if bias:
            self.weights[f"{name}.bias"] = np.zeros(c_out)

    def bn(self, name, features):
        self.weights[f"{name}.gamma"] = np.ones(features)
        self.weights[f"{name}.beta"] = np.zeros(features)
        self.buffers[f"{name}.running_mean"] = np.zeros(features)
        self.buffers[f"{name}.running_var"] = np.ones(features)

    def linear(self, rng, name, out_features, in_features, std=None):
        std = math.sqrt(2.0 / in_features) if std is None else std
        self.weights[f"{name}.weight"] = rng.normal(0.0, std, (out_features, in_features))
        self.weights[f"{name}.bias"] = np.zeros(out_features)

    def copy(self) -> "ParamSet":
        return ParamSet(
            {k: v.copy() for k, v in self.weights.items()},
            {k: v.copy() for k, v in self.buffers.items()},
        )

    def all_arrays(self) -> dict[str, np.ndarray]:
        merged = dict(self.weights)
        merged.update(self.buffers)
        return merged


class Layers:
    """Tensor views of a :class:`ParamSet` for one forward pass."""

    def __init__(self, params: ParamSet, train: bool = False, tape: Tape | None = None,
                 tensors: Mapping[str, Tensor] | None = None):
        self.params = params
        self.train = train
        self.tape = tape
        if tensors is not None:
            self.w = dict(tensors)
        elif tape is not None:
            self.w = {k: tape.leaf(v, name=k) for k, v in params.weights.items()}
        else:
            self.w = {k: Tensor(v, name=k) for k, v in params.weights.items()}

    def has(self, name: str) -> bool:
        return any(k.startswith(name + ".") for k in self.w)

    def conv(self, x, name, stride=1, pad=0):
        return ops.conv2d(x, self.w[f"{name}.weight"], self.w.get(f"{name}.bias"), stride=stride, pad=pad)

    def bn(self, x, name):
        return ops.batch_norm(
            x,
            self.w[f"{name}.gamma"],
            self.w[f"{name}.beta"],
            self.params.buffers[f"{name}.running_mean"],
            self.params.buffers[f"{name}.running_var"],
            train=self.train,
        )

    def linear(self, x, name):
        return ops.linear(x, self.w[f"{name}.weight"], self.w.get(f"{name}.bias"))

    def conv_bn_relu(self, x, name, stride=1, pad=0):
        return ops.relu(self.bn(self.conv(x, f"{name}.conv", stride, pad), f"{name}.bn"))
