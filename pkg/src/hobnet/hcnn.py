"""Euclidean branch: 1-D convolutions over the vectorized FC matrix.

The upper triangle of the functional-connectivity matrix is flattened in
row order, passed through two strided 1-D convolution layers and an MLP to
a fixed-width first-order feature vector, then enriched with an
outer-product high-order term re-embedded by a second MLP.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .connectivity import ConnectivityMatrix
from .layers import mlp_forward


class HcnnError(ValueError):
    pass


@dataclass
class HcnnConfig:
    """Convolution stack and MLP widths for the FC branch."""

    kernel_sizes: tuple[int, int] = (7, 5)
    channels: tuple[int, int] = (8, 16)
    strides: tuple[int, int] = (2, 2)
    mlp_hidden: tuple[int, ...] = (128,)
    hop_mlp_hidden: tuple[int, ...] | None = None
    out_dim: int = 64
    dropout: float = 0.0

    def __post_init__(self):
        if len(self.kernel_sizes) != 2 or len(self.channels) != 2 or len(self.strides) != 2:
            raise HcnnError("exactly two convolution layers are configured")
        if any(k < 1 for k in self.kernel_sizes) or any(s < 1 for s in self.strides):
            raise HcnnError("kernel sizes and strides must be >= 1")
        if not 0.0 <= self.dropout < 1.0:
            raise HcnnError(f"dropout must be in [0, 1), got {self.dropout}")

    @property
    def hop_hidden(self) -> tuple[int, ...]:
        return (self.out_dim,) if self.hop_mlp_hidden is None else tuple(self.hop_mlp_hidden)

    def conv_output_length(self, input_length: int) -> int:
        """Flattened width after both conv layers; validates kernel spans."""
        length = input_length
        for k, s in zip(self.kernel_sizes, self.strides):
            if k > length:
                raise HcnnError(f"kernel size {k} exceeds input length {length}")
            length = (length - k) // s + 1
        return self.channels[1] * length


def dr_flatten(fc) -> np.ndarray:
    """Strict upper triangle of a symmetric matrix, row-major order."""
    values = fc.values if isinstance(fc, ConnectivityMatrix) else np.asarray(fc, dtype=np.float64)
    if values.ndim != 2 or values.shape[0] != values.shape[1]:
        raise HcnnError(f"FC matrix must be square, got shape {values.shape}")
    n = values.shape[0]
    if n < 2:
        raise HcnnError("FC matrix needs at least 2 regions to flatten")
    rows, cols = np.triu_indices(n, k=1)
    return values[rows, cols].copy()


def dr_unflatten(flat: np.ndarray, n: int) -> np.ndarray:
    """Inverse of :func:`dr_flatten` up to the zero diagonal (test helper)."""
    out = np.zeros((n, n))
    rows, cols = np.triu_indices(n, k=1)
    out[rows, cols] = flat
    return out + out.T


def _flatten_channels(x: Tensor) -> Tensor:
    """Row-major [channels, length] -> [channels*length] using selector rows."""
    c = x.shape[0]
    eye = np.eye(c)
    rows = [ad.matmul(Tensor(eye[i]), x) for i in range(c)]
    return ad.concat(*rows)


def hcnn_first_order(
    params,
    prefix: str,
    x: Tensor,
    cfg: HcnnConfig,
    train: bool,
    rng: np.random.Generator,
) -> Tensor:
    """conv -> ReLU -> conv -> ReLU -> flatten -> MLP, to the branch width."""
    h = ad.conv1d(
        x,
        params[f"{prefix}.conv0.w"].value,
        params[f"{prefix}.conv0.b"].value,
        stride=cfg.strides[0],
    )
    h = ad.dropout(ad.relu(h), cfg.dropout, rng, train)
    h = ad.conv1d(
        h,
        params[f"{prefix}.conv1.w"].value,
        params[f"{prefix}.conv1.b"].value,
        stride=cfg.strides[1],
    )
    h = ad.dropout(ad.relu(h), cfg.dropout, rng, train)
    return mlp_forward(_flatten_channels(h), params, f"{prefix}.mlp")


def hop(z: Tensor) -> Tensor:
    """Outer product of the first-order feature vector with itself."""
    if z.ndim != 1:
        raise HcnnError(f"hop expects a 1-D feature vector, got shape {z.shape}")
    return ad.outer(z, z)


def hop_concat(z: Tensor, params, prefix: str) -> Tensor:
    """First-order features joined with the re-embedded outer-product terms."""
    flat = ad.upper_triangle_flatten(hop(z), include_diagonal=True)
    return ad.concat(z, mlp_forward(flat, params, prefix))
