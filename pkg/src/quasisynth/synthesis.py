"""Pre-image optimization combining classifier inversion, the patch critic and mask guidance.

The optimized variable lives in the classifier's normalized space and starts as
standard normal noise. Networks see its unit-range image ``denormalize(x_hat)``;
the image-space regularizer acts on ``x_hat`` directly.
"""
from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import torch
import torch.nn.functional as F

from .errors import ConfigError, ContractError, MissingCheckpointError, ShapeError, SynthesisDiverged
from .imaging import FeatureStats, basic_reg, check_image, check_mask, feature_stat_loss, save_image, to_uint8
from .mask_ed import EDHandle, ed_inversion_loss
from .patch_critic import (
    DEFAULT_CRITIC,
    CriticConfig,
    CriticHandle,
    build_critic,
    critic_update,
    generator_score,
    receptive_field_report,
)
from .quasi_robust import ClassifierHandle, extract_stats, predict

logger = logging.getLogger(__name__)

TERMS = ("semantic", "critic", "ed", "reg", "feat")
CSV_COLUMNS = ("t", "total") + TERMS + ("eta_t", "critic_loss")


@dataclass(frozen=True)
class HyperParams:
    """Objective weights and schedule.

    ``eta`` is the critic weight once active; before ``eta_activation_iter`` the
    critic term is off and the critic is not trained.
    """

    eta: float = 0.05
    gamma: float = 30.0
    kappa: float = 1.0
    nu: float = 5.0
    lr: float = 5e-4
    alpha: float = 1e-4
    beta: float = 1e-5
    eta_activation_iter: int = 5000
    total_iters: int = 10000
    snapshot_every: int = 500
    objective: str = "ce"
    tv_exponent: float = 1.0

    def __post_init__(self):
        for name in ("eta", "gamma", "kappa", "nu", "lr", "alpha", "beta"):
            value = getattr(self, name)
            if not math.isfinite(value) or value < 0:
                raise ConfigError(f"{name} must be a finite non-negative number, got {value}")
        if self.total_iters < 0 or self.eta_activation_iter < 0:
            raise ConfigError("iteration counts must be non-negative")
        if self.eta_activation_iter > self.total_iters:
            raise ConfigError(
                f"eta_activation_iter ({self.eta_activation_iter}) exceeds total_iters ({self.total_iters})"
            )
        if self.snapshot_every < 0:
            raise ConfigError("snapshot_every must be non-negative")
        if self.objective not in ("ce", "kl"):
            raise ConfigError(f"objective must be 'ce' or 'kl', got {self.objective!r}")

    def eta_at(self, t: int) -> float:
        return self.eta if t >= self.eta_activation_iter else 0.0

    @classmethod
    def from_dict(cls, data: dict) -> "HyperParams":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"unknown hyperparameter(s): {', '.join(unknown)}")
        return cls(**data)


# Settings that are not fixed by the method description and were picked for this code.
ARTIFACT_CHOSEN = ("total_iters", "snapshot_every", "objective", "tv_exponent", "critic.gp_weight",
                   "critic.updates_per_gen_step", "critic.lr", "critic.betas", "adam_betas")

# Desk-scale schedule for 64x64 fixtures on one CPU core: the same objective with a
# compressed iteration budget. The critic still starts halfway through the run.
DESK_HYPERPARAMS = HyperParams(lr=0.01, eta_activation_iter=500, total_iters=1000, snapshot_every=100)


@dataclass
class SynthesisProblem:
    """Frozen networks plus the fixed inputs of one synthesis job."""

    classifier: ClassifierHandle
    ed: EDHandle
    x_src: torch.Tensor
    y_dst: torch.Tensor
    target: int
    target_probs: torch.Tensor
    src_stats: FeatureStats
    critic_config: CriticConfig = DEFAULT_CRITIC

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(self.x_src.shape)


def build_problem(classifier: ClassifierHandle, ed: EDHandle, x_src: torch.Tensor, y_dst: torch.Tensor,
                  critic_config: CriticConfig = DEFAULT_CRITIC) -> SynthesisProblem:
    if not classifier.frozen or not ed.frozen:
        raise ContractError("classifier and encoder-decoder must be frozen before synthesis")
    check_image(x_src, "x_src")
    if x_src.dim() != 3:
        raise ShapeError("x_src must be a single (3, H, W) image")
    check_mask(y_dst, like=x_src, name="y_dst")
    y_dst = y_dst.reshape(1, *x_src.shape[-2:]).to(x_src.dtype)
    logits, target = predict(classifier, x_src)
    with torch.no_grad():
        src_stats = extract_stats(classifier, x_src).detach()
    return SynthesisProblem(classifier, ed, x_src, y_dst, target, torch.softmax(logits, -1), src_stats,
                            critic_config)


@dataclass
class SynthesisState:
    t: int
    pre_image: torch.Tensor
    optimizer: torch.optim.Optimizer
    critic: CriticHandle
    seed: int
    generator: torch.Generator
    loss_history: list = field(default_factory=list)

    def state_dict(self) -> dict:
        return {
            "t": self.t,
            "pre_image": self.pre_image.detach().clone(),
            "optimizer": self.optimizer.state_dict(),
            "critic": self.critic.state_dict(),
            "seed": self.seed,
            "generator": self.generator.get_state(),
            "loss_history": list(self.loss_history),
        }


def init_preimage(shape, seed: int) -> torch.Tensor:
    """Standard normal pre-image, reproducible from ``seed``."""
    gen = torch.Generator().manual_seed(seed)
    return torch.randn(tuple(shape), generator=gen)


def init_state(problem: SynthesisProblem, h: HyperParams, seed: int) -> SynthesisState:
    pre = init_preimage(problem.shape, seed).requires_grad_(True)
    opt = torch.optim.Adam([pre], lr=h.lr)
    critic = build_critic(problem.critic_config, seed=seed + 1)
    gen = torch.Generator().manual_seed(seed + 2)
    return SynthesisState(0, pre, opt, critic, seed, gen)


def restore_state(data: dict, problem: SynthesisProblem, h: HyperParams) -> SynthesisState:
    state = init_state(problem, h, data["seed"])
    with torch.no_grad():
        state.pre_image.copy_(data["pre_image"])
    state.optimizer.load_state_dict(data["optimizer"])
    state.critic.load_state_dict(data["critic"])
    state.generator.set_state(data["generator"])
    state.t = data["t"]
    state.loss_history = list(data["loss_history"])
    return state


def unit_image(state: SynthesisState, problem: SynthesisProblem) -> torch.Tensor:
    return problem.classifier.normalizer.denormalize(state.pre_image)


def total_loss(state: SynthesisState, problem: SynthesisProblem, h: HyperParams):
    """Weighted objective at the current pre-image; returns ``(total, weighted_terms, raw_terms)``.

    The weighted terms sum to ``total``. A term whose weight is zero is not
    evaluated and contributes an exact zero.
    """
    f = problem.classifier
    if problem.target >= f.num_classes:
        raise ConfigError(f"target class {problem.target} outside classifier range {f.num_classes}")
    x_hat = state.pre_image
    x = f.normalizer.denormalize(x_hat)
    logits = f(x.unsqueeze(0))
    if h.objective == "ce":
        semantic = F.cross_entropy(logits, torch.tensor([problem.target]))
    else:
        semantic = F.kl_div(F.log_softmax(logits, -1), problem.target_probs.unsqueeze(0), reduction="batchmean")
    zero = x_hat.new_zeros(())
    raw = {"semantic": semantic}
    weighted = {"semantic": semantic}

    eta_t = h.eta_at(state.t)
    if eta_t > 0:
        raw["critic"] = -generator_score(state.critic, x)
        weighted["critic"] = eta_t * raw["critic"]
    else:
        weighted["critic"] = zero

    if h.gamma > 0:
        raw["ed"] = ed_inversion_loss(problem.ed, x, problem.y_dst)
        weighted["ed"] = h.gamma * raw["ed"]
    else:
        weighted["ed"] = zero

    if h.kappa > 0:
        raw["reg"] = basic_reg(x_hat, h.alpha, h.beta, h.tv_exponent)
        weighted["reg"] = h.kappa * raw["reg"]
    else:
        weighted["reg"] = zero

    if h.nu > 0:
        raw["feat"] = feature_stat_loss(extract_stats(f, x), problem.src_stats)
        weighted["feat"] = h.nu * raw["feat"]
    else:
        weighted["feat"] = zero

    # accumulate in double so the reported float32 terms add up to the total exactly
    total = weighted["semantic"].double()
    for name in TERMS[1:]:
        total = total + weighted[name].double()
    return total, weighted, raw


def step(state: SynthesisState, problem: SynthesisProblem, h: HyperParams) -> SynthesisState:
    """Critic updates (once the critic term is active) followed by one Adam step on the pre-image."""
    eta_t = h.eta_at(state.t)
    if not bool(torch.isfinite(state.pre_image).all()):
        last = state.loss_history[-1] if state.loss_history else {}
        raise SynthesisDiverged(f"pre-image became non-finite before t={state.t}; last terms: {last}", last)
    critic_loss = float("nan")
    if eta_t > 0:
        fake = unit_image(state, problem).detach()
        for _ in range(problem.critic_config.updates_per_gen_step):
            critic_update(state.critic, problem.x_src, fake, generator=state.generator)
        critic_loss = state.critic.last_loss

    total, weighted, _ = total_loss(state, problem, h)
    values = {name: float(v.detach()) for name, v in weighted.items()}
    if not math.isfinite(float(total.detach())):
        raise SynthesisDiverged(f"non-finite objective at t={state.t}: {values}", values)
    (grad,) = torch.autograd.grad(total, state.pre_image)
    state.pre_image.grad = grad
    state.optimizer.step()
    state.optimizer.zero_grad(set_to_none=True)

    record = {"t": state.t, "total": float(total.detach()), **values, "eta_t": eta_t, "critic_loss": critic_loss}
    state.loss_history.append(record)
    state.t += 1
    return state


def export_image(state: SynthesisState, problem: SynthesisProblem) -> torch.Tensor:
    """Unit-range pre-image clamped to [0, 1]."""
    return unit_image(state, problem).detach().clamp(0.0, 1.0)


def loss_csv(history: list[dict]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_COLUMNS)
    for rec in history:
        writer.writerow([rec["t"]] + [repr(float(rec[c])) for c in CSV_COLUMNS[1:]])
    return buf.getvalue()


def _sha(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def tensor_sha(t: torch.Tensor) -> str:
    return _sha(t.detach().cpu().float().contiguous().numpy().tobytes())


def run_synthesis(
    x_src: torch.Tensor,
    y_src: torch.Tensor,
    y_dst: torch.Tensor,
    classifier: ClassifierHandle | None,
    ed: EDHandle | None,
    h: HyperParams = HyperParams(),
    seed: int = 0,
    critic_config: CriticConfig = DEFAULT_CRITIC,
    out_dir=None,
    resume: dict | None = None,
    state_path=None,
):
    """Synthesize ``x_dst`` from noise guided by ``y_dst``; returns ``(x_dst, manifest)``.

    ``x_dst`` is a unit-range ``(3, H, W)`` tensor already quantized to 8 bits. When
    ``out_dir`` is given the image, loss CSV, snapshots and manifest are written
    there. Network checksums are verified unchanged at the end.
    """
    if classifier is None:
        raise MissingCheckpointError("classifier checkpoint missing; create one with `quasisynth train-classifier`")
    if ed is None:
        raise MissingCheckpointError("encoder-decoder checkpoint missing; create one with `quasisynth train-ed`")
    check_mask(y_src, like=x_src, name="y_src")
    problem = build_problem(classifier, ed, x_src, y_dst, critic_config)
    sums_before = (classifier.checksum(), ed.checksum())

    state = restore_state(resume, problem, h) if resume is not None else init_state(problem, h, seed)
    out = Path(out_dir) if out_dir is not None else None
    snapshots = []
    while state.t < h.total_iters:
        step(state, problem, h)
        if h.snapshot_every and state.t % h.snapshot_every == 0:
            name = f"snapshot_{state.t:06d}.png"
            snapshots.append(name)
            if out is not None:
                save_image(out / "snapshots" / name, export_image(state, problem))
            if state_path is not None:
                torch.save(state.state_dict(), state_path)
            logger.info("t=%d %s", state.t, state.loss_history[-1])

    if (classifier.checksum(), ed.checksum()) != sums_before:
        raise ContractError("a frozen network changed during synthesis")

    pixels = to_uint8(export_image(state, problem))
    x_dst = torch.from_numpy(pixels).permute(2, 0, 1).float() / 255.0
    csv_text = loss_csv(state.loss_history)
    manifest = {
        "hyperparams": asdict(h),
        "critic": asdict(critic_config),
        "critic_receptive_field": receptive_field_report(critic_config),
        "artifact_chosen": list(ARTIFACT_CHOSEN),
        "seed": seed,
        "iterations": state.t,
        "target_class": problem.target,
        "classifier_checksum": sums_before[0],
        "ed_checksum": sums_before[1],
        "x_src_sha256": tensor_sha(x_src),
        "y_src_sha256": tensor_sha(y_src),
        "y_dst_sha256": tensor_sha(y_dst),
        "final_terms": state.loss_history[-1] if state.loss_history else None,
        "loss_csv_sha256": _sha(csv_text.encode()),
        "output_sha256": _sha(pixels.tobytes()),
        "snapshots": snapshots,
    }
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        save_image(out / "x_dst.png", x_dst)
        (out / "losses.csv").write_text(csv_text)
        (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
        torch.save(state.state_dict(), out / "state.pt")
        torch.save(state.critic.state_dict(), out / "critic.pt")
    manifest["loss_history"] = state.loss_history
    return x_dst, manifest
