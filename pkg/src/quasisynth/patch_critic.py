"""Fully-convolutional patch critic trained with the Wasserstein loss and gradient penalty."""
from __future__ import annotations

from dataclasses import dataclass, field

import torch
import torch.nn as nn
from torch.func import functional_call

from .errors import ConfigError, ShapeError

# Receptive field quoted for the default preset at 224x224; the layer recursion gives 29.
REFERENCE_RF = 21
# Receptive field of the 3x3/stride-1 critic used by the prior single-image method.
BASELINE_RF = 9


@dataclass(frozen=True)
class CriticConfig:
    """Ordered ``(kernel, stride, filters)`` layers, each followed by BN and leaky ReLU."""

    layers: tuple[tuple[int, int, int], ...] = ((4, 1, 64), (4, 2, 128), (4, 2, 128), (3, 1, 128), (3, 1, 128))
    leaky_slope: float = 0.2
    gp_weight: float = 10.0
    updates_per_gen_step: int = 1
    batch_norm: bool = True
    in_channels: int = 3
    lr: float = 5e-4
    betas: tuple[float, float] = (0.5, 0.999)

    def __post_init__(self):
        if not self.layers:
            raise ConfigError("critic needs at least one layer")
        for spec in self.layers:
            if len(spec) != 3:
                raise ConfigError(f"layer spec must be (kernel, stride, filters), got {spec}")
            k, s, c = spec
            if k < 1 or s < 1 or c < 1:
                raise ConfigError(f"invalid layer spec {spec}: kernel, stride and filters must be >= 1")
        if self.gp_weight < 0:
            raise ConfigError("gp_weight must be >= 0")
        if self.updates_per_gen_step < 1:
            raise ConfigError("updates_per_gen_step must be >= 1")


DEFAULT_CRITIC = CriticConfig()
BASELINE_CRITIC = CriticConfig(layers=((3, 1, 32),) * 4)


def receptive_field(cfg: CriticConfig) -> int:
    """Receptive field of the conv stack: ``r += (k - 1) * jump; jump *= s`` per layer."""
    r, jump = 1, 1
    for k, s, _ in cfg.layers:
        r += (k - 1) * jump
        jump *= s
    return r


def total_stride(cfg: CriticConfig) -> int:
    jump = 1
    for _, s, _ in cfg.layers:
        jump *= s
    return jump


def receptive_field_report(cfg: CriticConfig = DEFAULT_CRITIC) -> dict:
    """Receptive field plus a flag when it differs from the figure quoted for the preset."""
    computed = receptive_field(cfg)
    report = {"layers": [list(spec) for spec in cfg.layers], "receptive_field": computed,
              "total_stride": total_stride(cfg)}
    if cfg.layers == DEFAULT_CRITIC.layers:
        report["quoted_receptive_field"] = REFERENCE_RF
        report["discrepancy"] = computed != REFERENCE_RF
        if computed != REFERENCE_RF:
            report["note"] = (
                f"layer recursion gives {computed}x{computed}; the quoted {REFERENCE_RF}x{REFERENCE_RF} "
                "does not follow from the stated kernels/strides. The architecture is built as listed."
            )
    return report


def output_shape(cfg: CriticConfig, height: int, width: int) -> tuple[int, int]:
    for k, s, _ in cfg.layers:
        height = (height - k) // s + 1
        width = (width - k) // s + 1
    return height, width


class PatchCritic(nn.Module):
    def __init__(self, cfg: CriticConfig):
        super().__init__()
        blocks = []
        cin = cfg.in_channels
        for k, s, c in cfg.layers:
            blocks.append(nn.Conv2d(cin, c, k, stride=s))
            if cfg.batch_norm:
                blocks.append(nn.BatchNorm2d(c))
            blocks.append(nn.LeakyReLU(cfg.leaky_slope))
            cin = c
        self.body = nn.Sequential(*blocks)
        self.head = nn.Conv2d(cin, 1, 1)

    def forward(self, x):
        return self.head(self.body(x))


@dataclass
class CriticHandle:
    model: nn.Module
    config: CriticConfig = field(default_factory=CriticConfig)
    optimizer: torch.optim.Optimizer | None = None
    updates: int = 0
    last_loss: float = float("nan")

    def __post_init__(self):
        if self.optimizer is None:
            self.optimizer = torch.optim.Adam(self.model.parameters(), lr=self.config.lr, betas=self.config.betas)

    def __call__(self, x):
        return self.model(x)

    def output_shape(self, height: int, width: int) -> tuple[int, int]:
        return output_shape(self.config, height, width)

    def state_dict(self) -> dict:
        return {"model": self.model.state_dict(), "optimizer": self.optimizer.state_dict(), "updates": self.updates}

    def load_state_dict(self, state: dict) -> None:
        self.model.load_state_dict(state["model"])
        self.optimizer.load_state_dict(state["optimizer"])
        self.updates = state["updates"]


def build_critic(cfg: CriticConfig = DEFAULT_CRITIC, seed: int = 0) -> CriticHandle:
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        return CriticHandle(PatchCritic(cfg), cfg)


def _batched(x: torch.Tensor) -> torch.Tensor:
    return x if x.dim() == 4 else x.unsqueeze(0)


def gradient_penalty(d: CriticHandle, real: torch.Tensor, fake: torch.Tensor, generator=None) -> torch.Tensor:
    """``mean((||grad_x mean D(x)|| - 1)^2)`` at random interpolates between real and fake."""
    u = torch.rand((real.shape[0], 1, 1, 1), generator=generator, dtype=real.dtype)
    mixed = (u * real + (1 - u) * fake).detach().requires_grad_(True)
    scores = d(mixed).flatten(1).mean(dim=1)
    (grad,) = torch.autograd.grad(scores.sum(), mixed, create_graph=True)
    return (grad.flatten(1).norm(dim=1) - 1).pow(2).mean()


def critic_losses(d: CriticHandle, real: torch.Tensor, fake: torch.Tensor, generator=None):
    """Return ``(critic_loss, gen_loss, gp)``.

    ``critic_loss`` sees a detached fake, so it only reaches critic parameters;
    ``gen_loss`` is evaluated with detached critic weights, so it only reaches the
    fake. Means run over the patch score map.
    """
    real, fake = _batched(real), _batched(fake)
    if real.shape != fake.shape:
        raise ShapeError(f"real {tuple(real.shape)} and fake {tuple(fake.shape)} differ")
    real = real.detach()
    d_real = d(real).mean()
    d_fake = d(fake.detach()).mean()
    gp = gradient_penalty(d, real, fake.detach(), generator) if d.config.gp_weight > 0 else real.new_zeros(())
    critic_loss = d_fake - d_real + d.config.gp_weight * gp
    gen_loss = -generator_score(d, fake)
    return critic_loss, gen_loss, gp


def generator_score(d: CriticHandle, fake: torch.Tensor) -> torch.Tensor:
    """Mean critic score of ``fake`` with the critic weights treated as constants."""
    frozen = {k: v.detach() for k, v in d.model.named_parameters()}
    frozen.update(dict(d.model.named_buffers()))
    return functional_call(d.model, frozen, (_batched(fake),)).mean()


def critic_update(d: CriticHandle, real: torch.Tensor, fake: torch.Tensor, lr: float | None = None, generator=None):
    """One optimizer step on the critic loss; the fake is detached and never modified."""
    if lr is not None:
        for group in d.optimizer.param_groups:
            group["lr"] = lr
    d.model.train()
    real, fake = _batched(real).detach(), _batched(fake).detach()
    d_real = d(real).mean()
    d_fake = d(fake).mean()
    gp = gradient_penalty(d, real, fake, generator) if d.config.gp_weight > 0 else real.new_zeros(())
    loss = d_fake - d_real + d.config.gp_weight * gp
    d.optimizer.zero_grad()
    loss.backward()
    d.optimizer.step()
    d.updates += 1
    d.last_loss = float(loss.detach())
    return d
