"""Desk-scale U-Net-like segmentation network.

Encoder of `depth` levels with two 3x3 conv+relu per level and 2x
max-pooling between, a two-conv bottleneck, a mirrored decoder with 2x
nearest-neighbour upsampling and skip concatenations, and a final 1x1
conv + channel softmax.  Both Siamese branches call the same instance, so
weight sharing is simply reusing the same parameter tensors.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T


@dataclass
class NetworkConfig:
    input_size: int = 64
    n_classes: int = 4
    depth: int = 3
    base_channels: int = 8

    def validate(self) -> None:
        if self.n_classes < 2:
            raise ValueError(f"n_classes must be >= 2, got {self.n_classes}")
        if self.input_size % (1 << self.depth) != 0:
            raise ValueError(
                f"input_size {self.input_size} not divisible by 2^depth = {1 << self.depth}"
            )


def _conv_shapes(cfg: NetworkConfig) -> list[tuple[int, int, int]]:
    """(in_c, out_c, k) for every conv layer, in forward order."""
    shapes = []
    c_in = 1
    for lvl in range(cfg.depth):
        c = cfg.base_channels << lvl
        shapes += [(c_in, c, 3), (c, c, 3)]
        c_in = c
    c = cfg.base_channels << cfg.depth
    shapes += [(c_in, c, 3), (c, c, 3)]
    c_in = c
    for lvl in reversed(range(cfg.depth)):
        c = cfg.base_channels << lvl
        shapes += [(c_in + c, c, 3), (c, c, 3)]
        c_in = c
    shapes.append((c_in, cfg.n_classes, 1))
    return shapes


def parameter_count(cfg: NetworkConfig) -> int:
    """Closed-form parameter count: sum over convs of out*(in*k*k + 1)."""
    return sum(o * (i * k * k + 1) for i, o, k in _conv_shapes(cfg))


class UNet:
    """f(.; theta): (b, 1, n, n) image batch -> (b, n_classes, n, n) probabilities."""

    def __init__(self, cfg: NetworkConfig, rng: np.random.Generator):
        cfg.validate()
        self.cfg = cfg
        self.params: list[T.Tensor] = []
        self._layers: list[tuple[T.Tensor, T.Tensor]] = []
        for c_in, c_out, k in _conv_shapes(cfg):
            std = np.sqrt(2.0 / (c_in * k * k))
            w = T.Tensor(rng.normal(0.0, std, size=(c_out, c_in, k, k)), requires_grad=True)
            b = T.Tensor(np.zeros((1, c_out, 1, 1)), requires_grad=True)
            self._layers.append((w, b))
            self.params += [w, b]

    def __call__(self, image) -> T.Tensor:
        x = image if isinstance(image, T.Tensor) else T.Tensor(image)
        n = self.cfg.input_size
        if x.shape[1] != 1 or x.shape[2] != n or x.shape[3] != n:
            raise T.ShapeError(
                f"expected input (b, 1, {n}, {n}), got {x.shape}"
            )
        li = iter(self._layers)

        def block(h):
            w1, b1 = next(li)
            w2, b2 = next(li)
            h = T.relu(T.conv2d(h, w1, b1))
            return T.relu(T.conv2d(h, w2, b2))

        skips = []
        h = x
        for _ in range(self.cfg.depth):
            h = block(h)
            skips.append(h)
            h = T.maxpool2(h)
        h = block(h)
        for skip in reversed(skips):
            h = T.concat_channels([T.upsample2(h), skip])
            h = block(h)
        w_out, b_out = next(li)
        return T.softmax_channels(T.conv2d(h, w_out, b_out))

    # -- parameter plumbing ------------------------------------------------

    def get_state(self) -> list[np.ndarray]:
        return [p.data.copy() for p in self.params]

    def set_state(self, arrays) -> None:
        if len(arrays) != len(self.params):
            raise ValueError(f"state has {len(arrays)} tensors, expected {len(self.params)}")
        for p, arr in zip(self.params, arrays):
            if arr.shape != p.shape:
                raise ValueError(f"state shape {arr.shape} != parameter shape {p.shape}")
            p.data = arr.copy()

    def save(self, path) -> None:
        T.save_params(path, self.params)

    def load(self, path) -> None:
        T.load_into(path, self.params)
