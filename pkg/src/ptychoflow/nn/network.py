"""Fully convolutional encoder/decoder mapping diffraction amplitudes to phase."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass

import numpy as np

from .layers import Conv1x1, Conv3x3, Layer, MaxPool2, ReLU, ScaledTanh, StateError, Upsample2


class ShapeError(ValueError):
    pass


@dataclass(frozen=True)
class NetworkSpec:
    input_dim: int = 64
    encoder: tuple[int, ...] = (32, 64, 128)
    decoder: tuple[int, ...] = (64, 32, 16)

    def __post_init__(self):
        if self.input_dim % 8:
            raise ValueError("input_dim must be divisible by 8")
        if len(self.encoder) != 3 or len(self.decoder) != 3:
            raise ValueError("encoder and decoder each have exactly three blocks")

    def to_dict(self) -> dict:
        return {"input_dim": self.input_dim, "encoder": list(self.encoder), "decoder": list(self.decoder)}

    @classmethod
    def from_dict(cls, d: dict) -> NetworkSpec:
        return cls(int(d["input_dim"]), tuple(d["encoder"]), tuple(d["decoder"]))

    def hash(self) -> bytes:
        canon = json.dumps({"arch": "ptychoflow-fcn-v1", **self.to_dict()}, sort_keys=True)
        return hashlib.sha256(canon.encode()).digest()


MICRO_SPEC = NetworkSpec(8, (2, 3, 4), (3, 2, 2))


class Network:
    """Encoder: 3 x [conv3-relu-conv3-relu-pool]; decoder: 3 x [up2-conv3-relu];
    head: conv1 -> pi*tanh.

    ``forward`` takes and returns NCHW arrays of shape (B, 1, D, D).
    """

    def __init__(self, spec: NetworkSpec = NetworkSpec(), seed: int = 0, dtype=np.float32):
        self.spec = spec
        self.dtype = np.dtype(dtype)
        rng = np.random.default_rng(seed)
        self.layers: list[tuple[str, Layer]] = []
        cin = 1
        for k, c in enumerate(spec.encoder, 1):
            self.layers += [
                (f"enc{k}.conv1", Conv3x3(cin, c, rng, dtype)),
                (f"enc{k}.relu1", ReLU()),
                (f"enc{k}.conv2", Conv3x3(c, c, rng, dtype)),
                (f"enc{k}.relu2", ReLU()),
                (f"enc{k}.pool", MaxPool2()),
            ]
            cin = c
        for k, c in enumerate(spec.decoder, 1):
            self.layers += [
                (f"dec{k}.up", Upsample2()),
                (f"dec{k}.conv", Conv3x3(cin, c, rng, dtype)),
                (f"dec{k}.relu", ReLU()),
            ]
            cin = c
        self.layers += [("head.conv", Conv1x1(cin, 1, rng, dtype)), ("head.act", ScaledTanh())]
        self._forwarded = False

    # parameters

    def named_params(self) -> dict[str, np.ndarray]:
        return {f"{name}.{k}": v for name, layer in self.layers for k, v in layer.params.items()}

    def named_grads(self) -> dict[str, np.ndarray]:
        return {f"{name}.{k}": v for name, layer in self.layers for k, v in layer.grads.items()}

    def layer(self, name: str) -> Layer:
        return dict(self.layers)[name]

    def set_params(self, values: dict[str, np.ndarray]):
        own = self.named_params()
        if set(values) != set(own):
            raise ShapeError(f"parameter names differ: {sorted(set(values) ^ set(own))}")
        for key, v in values.items():
            if v.shape != own[key].shape:
                raise ShapeError(f"{key}: shape {v.shape} != {own[key].shape}")
            lname, _, pname = key.rpartition(".")
            self.layer(lname).params[pname] = np.array(v, dtype=self.dtype)

    def zero_grad(self):
        for _, layer in self.layers:
            layer.zero_grad()

    def num_params(self) -> int:
        return sum(v.size for v in self.named_params().values())

    # passes

    def forward(self, batch: np.ndarray, train: bool = False) -> np.ndarray:
        """Phase prediction in (-pi, pi) for a (B, 1, D, D) batch of normalised amplitudes."""
        d = self.spec.input_dim
        if batch.ndim != 4 or batch.shape[1:] != (1, d, d):
            raise ShapeError(f"expected (B, 1, {d}, {d}), got {batch.shape}")
        x = np.ascontiguousarray(batch.transpose(0, 2, 3, 1), dtype=self.dtype)
        for _, layer in self.layers:
            x = layer.forward(x, keep=train)
        self._forwarded = train
        return x.transpose(0, 3, 1, 2)

    def backward(self, grad_out: np.ndarray) -> dict[str, np.ndarray]:
        """Accumulate parameter gradients for the last ``forward(train=True)``."""
        if not self._forwarded:
            raise StateError("backward called without a preceding training forward pass")
        g = np.ascontiguousarray(grad_out.transpose(0, 2, 3, 1), dtype=self.dtype)
        for _, layer in reversed(self.layers):
            g = layer.backward(g)
        self._forwarded = False
        return self.named_grads()

    def predict(self, batch: np.ndarray) -> np.ndarray:
        return self.forward(batch, train=False)

    def clone(self) -> Network:
        twin = Network.__new__(Network)
        twin.spec, twin.dtype = self.spec, self.dtype
        twin.layers = []
        for name, layer in self.layers:
            copy = type(layer).__new__(type(layer))
            Layer.__init__(copy)
            copy.params = {k: v.copy() for k, v in layer.params.items()}
            copy.zero_grad()
            twin.layers.append((name, copy))
        twin._forwarded = False
        return twin

