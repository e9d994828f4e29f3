"""3D UNet denoiser with an FTN after every encoder and decoder block.

Parameter namespaces:

* ``denoiser.*``  convolutions, biases and normalization affine (shared weights)
* ``norm_stats.*`` running feature statistics, never differentiated
* ``ftn.*``       one :class:`~fedftn.ftn.FtnParams` per block (kept local under FedFTN)

Encoder block ``enc{l}`` works at ``base * 2**l`` channels; the deepest one is
the bottleneck.  Decoder block ``dec{l}`` consumes the upsampled deeper output
concatenated with the ``enc{l}`` output.  A zero-initialized 1x1x1 head adds a
correction to the input when ``residual_output`` is on, so a fresh model is
the identity map.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, resolve_dtype
from .errors import ConfigError, ShapeError
from .ftn import FtnParams, ftn_forward
from .params import ParamTree
from .strategy import StrategyId, is_shared

STATS_MOMENTUM = 0.1


@dataclass(frozen=True)
class UNetConfig:
    levels: int = 3
    base_channels: int = 16
    kernel: int = 3
    conv_per_block: int = 2
    use_norm: bool = True
    residual_output: bool = True

    def __post_init__(self):
        if self.levels < 2:
            raise ConfigError(f"unet.levels must be >= 2, got {self.levels}")
        if self.base_channels < 2 or self.base_channels % 2:
            raise ConfigError(f"unet.base_channels must be a positive even int, got {self.base_channels}")
        if self.kernel < 1 or self.kernel % 2 == 0:
            raise ConfigError(f"unet.kernel must be odd, got {self.kernel}")
        if self.conv_per_block < 1:
            raise ConfigError(f"unet.conv_per_block must be >= 1, got {self.conv_per_block}")

    def channels(self, level: int) -> int:
        return self.base_channels * 2 ** level

    @property
    def divisor(self) -> int:
        return 2 ** (self.levels - 1)

    def block_names(self) -> list:
        enc = [f"enc{l}" for l in range(self.levels)]
        dec = [f"dec{l}" for l in range(self.levels - 2, -1, -1)]
        return enc + dec

    def to_dict(self) -> dict:
        return asdict(self)


class DenoiserModel:
    def __init__(self, config: UNetConfig, params: ParamTree):
        self.config = config
        self.params = params

    @classmethod
    def init(cls, config: UNetConfig, seed: int = 0, precision="f32",
             zero_head: bool = True) -> "DenoiserModel":
        dtype = resolve_dtype(precision)
        rng = np.random.default_rng(seed)
        tree = ParamTree()
        k = config.kernel

        def conv(prefix, cin, cout, ksize):
            fan_in = cin * ksize ** 3
            bound = np.sqrt(6.0 / fan_in)
            w = rng.uniform(-bound, bound, size=(cout, cin, ksize, ksize, ksize))
            tree[f"denoiser.{prefix}.w"] = Tensor(w.astype(dtype), requires_grad=True)
            tree[f"denoiser.{prefix}.b"] = Tensor(np.zeros(cout, dtype), requires_grad=True)

        def block(name, cin, cout):
            for i in range(1, config.conv_per_block + 1):
                conv(f"{name}.conv{i}", cin if i == 1 else cout, cout, k)
                if config.use_norm:
                    tree[f"denoiser.{name}.conv{i}.norm.gamma"] = Tensor(np.ones(cout, dtype), True)
                    tree[f"denoiser.{name}.conv{i}.norm.beta"] = Tensor(np.zeros(cout, dtype), True)
                    tree[f"norm_stats.{name}.conv{i}.mean"] = Tensor(np.zeros(cout, dtype))
                    tree[f"norm_stats.{name}.conv{i}.var"] = Tensor(np.ones(cout, dtype))
            for fname, t in FtnParams.init(cout, rng, dtype).to_tree(f"ftn.{name}").items():
                tree[fname] = t

        for l in range(config.levels):
            block(f"enc{l}", 1 if l == 0 else config.channels(l - 1), config.channels(l))
        for l in range(config.levels - 2, -1, -1):
            block(f"dec{l}", config.channels(l + 1) + config.channels(l), config.channels(l))
        conv("head", config.channels(0), 1, 1)
        if zero_head:
            tree["denoiser.head.w"].data[...] = 0
        return cls(config, tree)

    @property
    def dtype(self):
        return self.params["denoiser.head.w"].dtype

    def trainable(self) -> ParamTree:
        return self.params.with_prefix("denoiser.", "ftn.")

    def ftn(self, block: str) -> FtnParams:
        return FtnParams.from_tree(self.params, f"ftn.{block}")

    def snapshot(self) -> "DenoiserModel":
        tree = self.params.snapshot()
        for name, t in tree.items():
            t.requires_grad = self.params[name].requires_grad
        return DenoiserModel(self.config, tree)

    def _block(self, name: str, h: Tensor, d, track_stats: bool) -> Tensor:
        cfg, p = self.config, self.params
        pad = cfg.kernel // 2
        for i in range(1, cfg.conv_per_block + 1):
            key = f"{name}.conv{i}"
            h = ad.conv3d(h, p[f"denoiser.{key}.w"], 1, pad, bias=p[f"denoiser.{key}.b"])
            if cfg.use_norm:
                if track_stats:
                    self._update_stats(key, h.data)
                h = ad.instance_norm(h, p[f"denoiser.{key}.norm.gamma"], p[f"denoiser.{key}.norm.beta"])
            h = ad.relu(h)
        return ftn_forward(h, d, self.ftn(name))

    def _update_stats(self, key: str, h: np.ndarray) -> None:
        mean = self.params[f"norm_stats.{key}.mean"].data
        var = self.params[f"norm_stats.{key}.var"].data
        m = mean.dtype.type(STATS_MOMENTUM)
        mean *= 1 - m
        mean += m * h.mean(axis=(0, 2, 3, 4))
        var *= 1 - m
        var += m * h.var(axis=(2, 3, 4)).mean(axis=0)

    def forward(self, x, d, track_stats: bool = False) -> Tensor:
        x = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=self.dtype))
        if x.ndim != 5 or x.shape[1] != 1:
            raise ShapeError(f"denoiser input must be [B, 1, H, W, D], got {x.shape}")
        div = self.config.divisor
        if any(s % div for s in x.shape[2:]):
            raise ShapeError(f"spatial dims {x.shape[2:]} must be divisible by {div}")
        cfg = self.config
        skips = []
        h = x
        for l in range(cfg.levels):
            if l > 0:
                h = ad.downsample_avg2x(h)
            h = self._block(f"enc{l}", h, d, track_stats)
            skips.append(h)
        for l in range(cfg.levels - 2, -1, -1):
            h = ad.channel_concat(ad.upsample_nearest2x(h), skips[l])
            h = self._block(f"dec{l}", h, d, track_stats)
        out = ad.conv3d(h, self.params["denoiser.head.w"], bias=self.params["denoiser.head.b"])
        return ad.add(x, out) if cfg.residual_output else out

    __call__ = forward


def forward(model: DenoiserModel, x, d) -> Tensor:
    return model.forward(x, d)


def partition(model_or_tree, strategy) -> tuple:
    """Split parameters into the (shared, local) trees for ``strategy``."""
    strategy = StrategyId.parse(strategy)
    tree = model_or_tree.params if isinstance(model_or_tree, DenoiserModel) else model_or_tree
    shared = tree.select(lambda n: is_shared(n, strategy))
    local = tree.select(lambda n: not is_shared(n, strategy))
    return shared, local
