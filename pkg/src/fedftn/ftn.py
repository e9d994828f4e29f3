"""Dose-conditioned channel re-excitation of a feature map.

Given features ``F`` with ``C`` channels and the count level ``d``::

    v      = mean over space of F                  (squeeze)
    v_R    = w_R v
    v_d    = w_3 relu(w_2 relu(w_1 d))             (dose path, F-independent)
    v_fuse = sigmoid(v_d) * v_R + v_d
    v_hat  = w_fuse v_fuse
    F_out  = F scaled channel-wise by v_hat

All matrices are bias-free and nothing is applied after ``w_fuse``, so the
excitation may be negative.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import DomainError, ShapeError
from .params import ParamTree

FTN_FIELDS = ("w_R", "w_1", "w_2", "w_3", "w_fuse")


@dataclass
class FtnParams:
    w_R: Tensor
    w_1: Tensor
    w_2: Tensor
    w_3: Tensor
    w_fuse: Tensor

    def __post_init__(self):
        C = self.w_R.shape[0]
        if C % 2:
            raise ShapeError(f"FTN channel count must be even, got {C}")
        expected = {"w_R": (C, C), "w_1": (C // 2, 1), "w_2": (C, C // 2),
                    "w_3": (C, C), "w_fuse": (C, C)}
        for name, shape in expected.items():
            if getattr(self, name).shape != shape:
                raise ShapeError(f"FTN {name} has shape {getattr(self, name).shape}, expected {shape}")

    @property
    def channels(self) -> int:
        return self.w_R.shape[0]

    @classmethod
    def init(cls, channels: int, rng: np.random.Generator, dtype=np.float32,
             requires_grad: bool = True) -> "FtnParams":
        if channels <= 0 or channels % 2:
            raise ShapeError(f"FTN channel count must be a positive even int, got {channels}")
        C, h = channels, channels // 2

        def uniform(shape, fan_in):
            bound = 1.0 / np.sqrt(fan_in)
            return Tensor(rng.uniform(-bound, bound, size=shape).astype(dtype), requires_grad)

        # Draw order is part of the determinism contract.
        return cls(w_R=uniform((C, C), C), w_1=uniform((h, 1), 1), w_2=uniform((C, h), h),
                   w_3=uniform((C, C), C), w_fuse=uniform((C, C), C))

    @classmethod
    def from_tree(cls, tree: ParamTree, prefix: str) -> "FtnParams":
        return cls(**{f: tree[f"{prefix}.{f}"] for f in FTN_FIELDS})

    def to_tree(self, prefix: str) -> ParamTree:
        return ParamTree((f"{prefix}.{f}", getattr(self, f)) for f in FTN_FIELDS)


class FtnComponents(NamedTuple):
    v: Tensor
    v_r: Tensor
    v_d: Tensor
    v_fuse: Tensor
    v_hat: Tensor


def count_level_column(d, batch: int, dtype) -> Tensor:
    """Validate count level(s) and shape them as a ``[batch, 1]`` tensor."""
    arr = np.asarray(d.data if isinstance(d, Tensor) else d, dtype=np.float64).reshape(-1)
    if arr.size == 1:
        arr = np.repeat(arr, batch)
    if arr.size != batch:
        raise ShapeError(f"got {arr.size} count levels for a batch of {batch}")
    if not np.all((arr > 0) & (arr <= 1)):
        raise DomainError(f"count level must lie in (0, 1], got {arr.tolist()}")
    return Tensor(arr.reshape(batch, 1).astype(dtype))


def ftn_components(F: Tensor, d, params: FtnParams) -> FtnComponents:
    if F.ndim < 3:
        raise ShapeError(f"FTN input must be [B, C, *spatial], got {F.shape}")
    if F.shape[1] != params.channels:
        raise ShapeError(f"FTN expects {params.channels} channels, feature map has {F.shape[1]}")
    dcol = count_level_column(d, F.shape[0], F.dtype)
    v = ad.global_avg_pool(F)
    v_r = ad.fully_connected(v, params.w_R)
    hidden = ad.relu(ad.fully_connected(dcol, params.w_1))
    hidden = ad.relu(ad.fully_connected(hidden, params.w_2))
    v_d = ad.fully_connected(hidden, params.w_3)
    v_fuse = ad.add(ad.mul(ad.sigmoid(v_d), v_r), v_d)
    v_hat = ad.fully_connected(v_fuse, params.w_fuse)
    return FtnComponents(v, v_r, v_d, v_fuse, v_hat)


def ftn_excitation(F: Tensor, d, params: FtnParams) -> Tensor:
    """The per-sample channel excitation vector ``v_hat`` of shape ``[B, C]``."""
    return ftn_components(F, d, params).v_hat


def ftn_forward(F: Tensor, d, params: FtnParams) -> Tensor:
    v_hat = ftn_excitation(F, d, params)
    B, C = v_hat.shape
    return ad.mul(F, ad.reshape(v_hat, (B, C) + (1,) * (F.ndim - 2)))
