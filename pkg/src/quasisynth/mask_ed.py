"""Shape-preserving encoder-decoder mapping an image to a binary object mask.

Trained on a single (image, mask) pair, then frozen and inverted against a guide
mask to steer where the synthesized object appears.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ContractError, ShapeError
from .imaging import check_image, check_mask
from .quasi_robust import state_checksum


class EncoderDecoder(nn.Module):
    def __init__(self, filters: int = 64, depth: int = 3, slope: float = 0.2, in_channels: int = 3):
        super().__init__()
        layers = []
        cin = in_channels
        for _ in range(depth):
            layers += [nn.Conv2d(cin, filters, 3, stride=1, padding=1), nn.BatchNorm2d(filters), nn.LeakyReLU(slope)]
            cin = filters
        for _ in range(depth):
            layers += [nn.ConvTranspose2d(filters, filters, 3, stride=1, padding=1), nn.BatchNorm2d(filters),
                       nn.LeakyReLU(slope)]
        self.body = nn.Sequential(*layers)
        self.head = nn.Conv2d(filters, 1, 1)

    def logits(self, x):
        return self.head(self.body(x))

    def forward(self, x):
        return torch.sigmoid(self.logits(x))


@dataclass
class EDHandle:
    model: EncoderDecoder
    arch: dict = field(default_factory=dict)
    frozen: bool = False
    final_bce: float | None = None
    train_log: list = field(default_factory=list)
    source_hash: str | None = None

    def __call__(self, x):
        return self.model(x if x.dim() == 4 else x.unsqueeze(0))

    def freeze(self) -> "EDHandle":
        self.model.eval()
        for p in self.model.parameters():
            p.requires_grad_(False)
            p.grad = None
        self.frozen = True
        return self

    def checksum(self) -> str:
        return state_checksum(self.model)


def build_ed(filters: int = 64, depth: int = 3, slope: float = 0.2, seed: int = 0) -> EDHandle:
    arch = {"filters": filters, "depth": depth, "slope": slope}
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        return EDHandle(EncoderDecoder(filters, depth, slope), arch)


def _prep(x: torch.Tensor, y: torch.Tensor):
    check_image(x)
    xb = x if x.dim() == 4 else x.unsqueeze(0)
    yb = y.reshape(xb.shape[0], 1, *y.shape[-2:]).to(xb.dtype)
    if tuple(yb.shape[-2:]) != tuple(xb.shape[-2:]):
        raise ShapeError(f"mask {tuple(yb.shape[-2:])} and image {tuple(xb.shape[-2:])} are not aligned")
    return xb, yb


def pair_hash(x: torch.Tensor, y: torch.Tensor) -> str:
    h = hashlib.sha256()
    for t in (x, y):
        h.update(t.detach().cpu().float().contiguous().numpy().tobytes())
    return h.hexdigest()


def train_ed(e: EDHandle, x_src: torch.Tensor, y_src: torch.Tensor, iters: int = 2000, lr: float = 5e-4,
             log_every: int = 100) -> EDHandle:
    """Fit per-pixel BCE on the bare pair (no augmentation); returns the frozen handle."""
    if e.frozen:
        raise ContractError("cannot train a frozen encoder-decoder")
    check_mask(y_src, like=x_src, name="y_src")
    xb, yb = _prep(x_src, y_src)
    opt = torch.optim.Adam(e.model.parameters(), lr=lr)
    e.model.train()
    log = []
    for it in range(iters):
        loss = F.binary_cross_entropy_with_logits(e.model.logits(xb), yb)
        opt.zero_grad()
        loss.backward()
        opt.step()
        if (it + 1) % log_every == 0 or it == iters - 1:
            log.append({"iter": it + 1, "bce": float(loss.detach())})
    e.freeze()
    with torch.no_grad():
        e.final_bce = float(F.binary_cross_entropy_with_logits(e.model.logits(xb), yb))
    e.train_log = log
    e.source_hash = pair_hash(x_src, y_src)
    return e


def ed_inversion_loss(e: EDHandle, x: torch.Tensor, y_dst: torch.Tensor) -> torch.Tensor:
    """Pixel-averaged BCE between ``E(x)`` and the guide mask; differentiable in ``x`` only."""
    if not e.frozen:
        raise ContractError("ed_inversion_loss requires a frozen encoder-decoder")
    xb, yb = _prep(x, y_dst)
    return F.binary_cross_entropy_with_logits(e.model.logits(xb), yb)


def predict_mask(e: EDHandle, x: torch.Tensor, threshold: float = 0.5) -> torch.Tensor:
    """Thresholded mask ``(H, W)`` (or ``(N, H, W)``) in {0, 1}."""
    with torch.no_grad():
        p = e(x)[:, 0]
    out = (p > threshold).to(torch.float32)
    return out if x.dim() == 4 else out[0]


def iou(a: torch.Tensor, b: torch.Tensor) -> float:
    a, b = a.bool(), b.bool()
    union = (a | b).sum()
    if union == 0:
        return 1.0
    return float((a & b).sum()) / float(union)


def save_ed(e: EDHandle, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save({"state_dict": e.model.state_dict(), "arch": e.arch, "final_bce": e.final_bce,
                "train_log": e.train_log, "source_hash": e.source_hash}, path)
    manifest = {
        "kind": "encoder_decoder",
        "checkpoint": path.name,
        "checksum": e.checksum(),
        "arch": e.arch,
        "final_bce": e.final_bce,
        "iterations": e.train_log[-1]["iter"] if e.train_log else 0,
        "source_pair_sha256": e.source_hash,
    }
    path.with_suffix(path.suffix + ".json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return path


def load_ed(path) -> EDHandle:
    payload = torch.load(Path(path), map_location="cpu", weights_only=False)
    arch = payload["arch"]
    handle = EDHandle(EncoderDecoder(arch["filters"], arch["depth"], arch["slope"]), arch)
    handle.model.load_state_dict(payload["state_dict"])
    handle.final_bce = payload["final_bce"]
    handle.train_log = payload["train_log"]
    handle.source_hash = payload["source_hash"]
    return handle.freeze()
