"""Image and mask helpers, image-space regularizers and gradient visualization.

Tensors are channel-first: an image is ``(3, H, W)`` or a batch ``(N, 3, H, W)``.
Unit-range images hold values in ``[0, 1]``; pre-images are free reals living in
the classifier's normalized space and are mapped back with :class:`Normalizer`.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from PIL import Image as PILImage

from .errors import ConfigError, InvalidInputError, ShapeError

MIN_SIDE = 8


def check_finite(x: torch.Tensor, name: str = "input") -> None:
    if not bool(torch.isfinite(x).all()):
        raise InvalidInputError(f"{name} contains non-finite values")


def check_image(x: torch.Tensor, name: str = "image") -> None:
    """Validate a ``(3, H, W)`` or ``(N, 3, H, W)`` image tensor."""
    if x.dim() not in (3, 4) or x.shape[-3] != 3:
        raise ShapeError(f"{name} must have shape (3, H, W) or (N, 3, H, W), got {tuple(x.shape)}")
    if x.shape[-1] < MIN_SIDE or x.shape[-2] < MIN_SIDE:
        raise ShapeError(f"{name} must be at least {MIN_SIDE}x{MIN_SIDE}, got {tuple(x.shape[-2:])}")
    check_finite(x, name)


def check_mask(y: torch.Tensor, like: torch.Tensor | None = None, name: str = "mask") -> None:
    """Masks are ``(H, W)``, ``(1, H, W)`` or ``(N, 1, H, W)`` with values in {0, 1} exactly."""
    if not bool(((y == 0) | (y == 1)).all()):
        raise InvalidInputError(f"{name} must be binary with values in {{0, 1}}")
    if like is not None and tuple(y.shape[-2:]) != tuple(like.shape[-2:]):
        raise ShapeError(f"{name} shape {tuple(y.shape[-2:])} does not match image {tuple(like.shape[-2:])}")


@dataclass(frozen=True)
class Normalizer:
    """Per-channel affine map between unit-range pixels and the normalized space."""

    mean: tuple[float, float, float] = (0.5, 0.5, 0.5)
    std: tuple[float, float, float] = (0.25, 0.25, 0.25)

    def _stats(self, like: torch.Tensor):
        mean = torch.tensor(self.mean, dtype=like.dtype, device=like.device).view(3, 1, 1)
        std = torch.tensor(self.std, dtype=like.dtype, device=like.device).view(3, 1, 1)
        return mean, std

    def normalize(self, x: torch.Tensor) -> torch.Tensor:
        mean, std = self._stats(x)
        return (x - mean) / std

    def denormalize(self, z: torch.Tensor) -> torch.Tensor:
        mean, std = self._stats(z)
        return z * std + mean


# --- regularizers -------------------------------------------------------------------


def tv_loss(x: torch.Tensor, exponent: float = 1.0) -> torch.Tensor:
    """Anisotropic total variation with forward differences.

    Sums ``|dx|**exponent + |dy|**exponent`` over every pixel and channel; the last
    row/column has no forward neighbour and is skipped. Works on any tensor whose
    two trailing dimensions are spatial.
    """
    if x.shape[-1] < 2 or x.shape[-2] < 2:
        raise ShapeError("tv_loss needs at least a 2x2 spatial grid")
    check_finite(x, "pre-image")
    dh = x[..., 1:, :] - x[..., :-1, :]
    dw = x[..., :, 1:] - x[..., :, :-1]
    if exponent == 1.0:
        return dh.abs().sum() + dw.abs().sum()
    return dh.abs().pow(exponent).sum() + dw.abs().pow(exponent).sum()


def norm_reg(x: torch.Tensor) -> torch.Tensor:
    """Squared Euclidean norm of the whole tensor."""
    check_finite(x, "pre-image")
    return x.pow(2).sum()


def basic_reg(x: torch.Tensor, alpha: float = 1e-4, beta: float = 1e-5, tv_exponent: float = 1.0) -> torch.Tensor:
    if alpha < 0 or beta < 0:
        raise ConfigError(f"regularizer weights must be non-negative (alpha={alpha}, beta={beta})")
    return alpha * tv_loss(x, tv_exponent) + beta * norm_reg(x)


@dataclass(frozen=True)
class FeatureStats:
    """Per-layer channel means and standard deviations over spatial positions.

    ``means[j]`` and ``stds[j]`` have shape ``(C_j,)`` for one image or ``(N, C_j)``
    for a batch.
    """

    layer_ids: tuple[str, ...]
    means: tuple[torch.Tensor, ...]
    stds: tuple[torch.Tensor, ...]

    @classmethod
    def from_activations(cls, activations: dict[str, torch.Tensor]) -> "FeatureStats":
        ids = tuple(activations)
        means = tuple(activations[j].mean(dim=(-2, -1)) for j in ids)
        stds = tuple(activations[j].std(dim=(-2, -1), unbiased=False) for j in ids)
        return cls(ids, means, stds)

    def detach(self) -> "FeatureStats":
        return FeatureStats(
            self.layer_ids,
            tuple(m.detach() for m in self.means),
            tuple(s.detach() for s in self.stds),
        )


def feature_stat_loss(a: FeatureStats, b: FeatureStats) -> torch.Tensor:
    """Sum over layers of the L2 distances (not squared) between means and between stds."""
    if a.layer_ids != b.layer_ids:
        raise ShapeError(f"layer mismatch: {a.layer_ids} vs {b.layer_ids}")
    total = None
    for j, ma, mb, sa, sb in zip(a.layer_ids, a.means, b.means, a.stds, b.stds):
        if ma.shape[-1] != mb.shape[-1]:
            raise ShapeError(f"channel mismatch at layer {j!r}: {ma.shape[-1]} vs {mb.shape[-1]}")
        term = torch.linalg.vector_norm(ma - mb, dim=-1).sum() + torch.linalg.vector_norm(sa - sb, dim=-1).sum()
        total = term if total is None else total + term
    if total is None:
        return torch.zeros(())
    return total


# --- gradient visualization and edges ------------------------------------------------


def visualize_gradient(g, n_std: float = 3.0) -> np.ndarray:
    """Clip to ``mean ± n_std * std`` over the whole grid, then rescale the clipped range to [0, 1].

    A constant grid maps to 0.5 everywhere.
    """
    arr = np.asarray(g.detach().cpu() if isinstance(g, torch.Tensor) else g, dtype=np.float64)
    mean, std = arr.mean(), arr.std()
    if not np.isfinite(std) or std == 0:
        return np.full(arr.shape, 0.5)
    clipped = np.clip(arr, mean - n_std * std, mean + n_std * std)
    lo, hi = clipped.min(), clipped.max()
    if not hi > lo:  # std of pure rounding noise on a constant grid
        return np.full(arr.shape, 0.5)
    return (clipped - lo) / (hi - lo)


def edge_map(x: torch.Tensor) -> torch.Tensor:
    """Sobel gradient magnitude of the channel-averaged image, shape ``(H, W)`` (or ``(N, H, W)``)."""
    gray = x.mean(dim=-3, keepdim=True)
    batched = gray.dim() == 4
    if not batched:
        gray = gray.unsqueeze(0)
    kx = torch.tensor([[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]], dtype=x.dtype, device=x.device)
    weight = torch.stack([kx, kx.t()]).unsqueeze(1)
    padded = torch.nn.functional.pad(gray, (1, 1, 1, 1), mode="replicate")
    gxy = torch.nn.functional.conv2d(padded, weight)
    mag = gxy.pow(2).sum(dim=1).sqrt()
    return mag if batched else mag[0]


def pearson(a: torch.Tensor, b: torch.Tensor) -> float:
    a = a.flatten().double()
    b = b.flatten().double()
    a = a - a.mean()
    b = b - b.mean()
    denom = a.norm() * b.norm()
    if denom == 0:
        return 0.0
    return float((a @ b) / denom)


# --- file I/O ---------------------------------------------------------------------------


def load_image(path) -> torch.Tensor:
    """Read an 8-bit RGB PNG as a unit-range ``(3, H, W)`` float32 tensor."""
    with PILImage.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    return torch.from_numpy(arr).permute(2, 0, 1).contiguous()


def to_uint8(x: torch.Tensor) -> np.ndarray:
    """Clamp a unit-range ``(3, H, W)`` tensor and quantize to an ``(H, W, 3)`` uint8 array."""
    arr = x.detach().cpu().double().clamp(0, 1).permute(1, 2, 0).numpy()
    return np.round(arr * 255.0).astype(np.uint8)


def save_image(path, x: torch.Tensor) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    PILImage.fromarray(to_uint8(x), mode="RGB").save(path)
    return path


def save_unit_grid(path, arr: np.ndarray) -> Path:
    """Save a [0, 1] grid of shape ``(H, W)``, ``(H, W, 3)`` or ``(3, H, W)`` as an 8-bit PNG."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arr = np.asarray(arr, dtype=np.float64)
    if arr.ndim == 3 and arr.shape[0] == 3 and arr.shape[-1] != 3:
        arr = arr.transpose(1, 2, 0)
    q = np.round(np.clip(arr, 0, 1) * 255.0).astype(np.uint8)
    PILImage.fromarray(q).save(path)
    return path


def load_mask(path) -> torch.Tensor:
    """Read a single-channel PNG mask; 255 maps to 1 and 0 to 0."""
    with PILImage.open(path) as im:
        arr = np.asarray(im.convert("L"))
    if not np.isin(arr, (0, 255)).all():
        raise InvalidInputError(f"mask {path} must only contain the values 0 and 255")
    return torch.from_numpy((arr == 255).astype(np.float32))


def save_mask(path, y: torch.Tensor) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arr = y.detach().cpu().reshape(y.shape[-2:]).numpy()
    PILImage.fromarray((arr > 0.5).astype(np.uint8) * 255, mode="L").save(path)
    return path
