"""Adversarial training with a small perturbation budget and the frozen classifier interface.

The classifier consumes unit-range images; normalization is applied inside the
handle so attacks, gradients and synthesis all speak the same pixel domain.
"""
from __future__ import annotations

import copy
import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError, ContractError, ShapeError
from .imaging import FeatureStats, Normalizer, check_image, edge_map, pearson

logger = logging.getLogger(__name__)

# Input-size ratio used to scale an L2 budget from 224x224 down to 32x32 inputs.
DESK_NORM_RATIO = 32 / 224
REFERENCE_EPSILON = 0.05


@dataclass(frozen=True)
class PerturbationBudget:
    """Threat model for PGD: ``||delta||_norm <= epsilon`` in unit-range pixel units."""

    norm: str = "l2"
    epsilon: float = REFERENCE_EPSILON * DESK_NORM_RATIO
    steps: int = 7
    step_size: float | None = None
    random_start: bool = True

    def __post_init__(self):
        if self.norm not in ("l2", "linf"):
            raise ConfigError(f"norm must be 'l2' or 'linf', got {self.norm!r}")
        if self.epsilon < 0:
            raise ConfigError(f"epsilon must be >= 0, got {self.epsilon}")
        if self.steps < 1:
            raise ConfigError(f"steps must be >= 1, got {self.steps}")
        if self.step_size is not None and self.step_size <= 0:
            raise ConfigError(f"step_size must be > 0, got {self.step_size}")

    @property
    def alpha(self) -> float:
        return self.step_size if self.step_size is not None else 2.5 * self.epsilon / self.steps


# Reference setting: L2, epsilon=0.05 on a 224x224 ResNet-50.
REFERENCE_BUDGET = PerturbationBudget(norm="l2", epsilon=REFERENCE_EPSILON, steps=7)


# --- network --------------------------------------------------------------------------


def _conv3x3(cin, cout, stride=1):
    # replicate padding keeps spatially constant inputs constant through the network
    return nn.Conv2d(cin, cout, 3, stride=stride, padding=1, bias=False, padding_mode="replicate")


class BasicBlock(nn.Module):
    def __init__(self, cin, cout, stride):
        super().__init__()
        self.conv1 = _conv3x3(cin, cout, stride)
        self.bn1 = nn.BatchNorm2d(cout)
        self.conv2 = _conv3x3(cout, cout)
        self.bn2 = nn.BatchNorm2d(cout)
        self.shortcut = nn.Sequential()
        if stride != 1 or cin != cout:
            self.shortcut = nn.Sequential(nn.Conv2d(cin, cout, 1, stride=stride, bias=False), nn.BatchNorm2d(cout))

    def forward(self, x):
        out = F.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return F.relu(out + self.shortcut(x))


class SmallResNet(nn.Module):
    """Three-stage residual network ending in global average pooling, so any H, W >= 8 works."""

    layer_names = ("stem", "stage1", "stage2", "stage3")

    def __init__(self, num_classes: int = 10, widths=(16, 32, 64)):
        super().__init__()
        self.widths = tuple(widths)
        self.num_classes = num_classes
        self.stem = nn.Sequential(_conv3x3(3, widths[0]), nn.BatchNorm2d(widths[0]), nn.ReLU())
        self.stage1 = BasicBlock(widths[0], widths[0], 1)
        self.stage2 = BasicBlock(widths[0], widths[1], 2)
        self.stage3 = BasicBlock(widths[1], widths[2], 2)
        self.fc = nn.Linear(widths[2], num_classes)

    def features(self, x, layers=()):
        acts = {}
        out = x
        for name in self.layer_names:
            out = getattr(self, name)(out)
            if name in layers:
                acts[name] = out
        return out, acts

    def forward(self, x):
        out, _ = self.features(x)
        return self.fc(out.mean(dim=(-2, -1)))


# --- handle ---------------------------------------------------------------------------


@dataclass
class ClassifierHandle:
    """A classifier plus the metadata needed to use it as an inversion prior."""

    model: nn.Module
    normalizer: Normalizer = field(default_factory=Normalizer)
    num_classes: int = 10
    input_shape: tuple[int, int, int] = (32, 32, 3)
    stat_layers: tuple[str, ...] = ("stage1", "stage2", "stage3")
    frozen: bool = False
    budget: PerturbationBudget | None = None
    log: list = field(default_factory=list)
    seed: int | None = None

    def __call__(self, x: torch.Tensor) -> torch.Tensor:
        """Logits for unit-range images."""
        return self.model(self.normalizer.normalize(x))

    def freeze(self) -> "ClassifierHandle":
        self.model.eval()
        for p in self.model.parameters():
            p.requires_grad_(False)
            p.grad = None
        self.frozen = True
        return self

    def checksum(self) -> str:
        return state_checksum(self.model)

    def descriptor(self) -> dict:
        widths = getattr(self.model, "widths", None)
        return {"arch": type(self.model).__name__, "widths": list(widths) if widths else None,
                "num_classes": self.num_classes}


def state_checksum(module: nn.Module) -> str:
    """SHA-256 over every parameter and buffer, in state-dict order."""
    h = hashlib.sha256()
    for name, t in module.state_dict().items():
        h.update(name.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def build_classifier(
    num_classes: int = 10,
    widths=(16, 32, 64),
    seed: int = 0,
    normalizer: Normalizer | None = None,
    input_size: int = 32,
    stat_layers=("stage1", "stage2", "stage3"),
) -> ClassifierHandle:
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        model = SmallResNet(num_classes, widths)
    unknown = set(stat_layers) - set(SmallResNet.layer_names)
    if unknown:
        raise ConfigError(f"unknown stat layers {sorted(unknown)}; choose from {SmallResNet.layer_names}")
    return ClassifierHandle(
        model=model,
        normalizer=normalizer or Normalizer(),
        num_classes=num_classes,
        input_shape=(input_size, input_size, 3),
        stat_layers=tuple(stat_layers),
        seed=seed,
    )


def dataset_normalizer(images: torch.Tensor) -> Normalizer:
    mean = images.mean(dim=(0, 2, 3))
    std = images.std(dim=(0, 2, 3))
    return Normalizer(tuple(float(m) for m in mean), tuple(float(s) for s in std))


# --- attacks ------------------------------------------------------------------------


def _flat_norm(t: torch.Tensor) -> torch.Tensor:
    return t.flatten(1).norm(dim=1).view(-1, *([1] * (t.dim() - 1)))


def project(delta: torch.Tensor, budget: PerturbationBudget) -> torch.Tensor:
    """Project each sample of ``delta`` onto the budget ball."""
    eps = budget.epsilon
    if budget.norm == "linf":
        return delta.clamp(-eps, eps)
    norms = _flat_norm(delta)
    scale = torch.clamp(eps / norms.clamp_min(1e-12), max=1.0)
    out = delta * scale
    # guard against the rescaled norm landing a rounding error above eps
    over = _flat_norm(out) > eps
    if bool(over.any()):
        out = torch.where(over, out * (1 - 1e-6), out)
    return out


def pgd_attack(
    f,
    x: torch.Tensor,
    y: torch.Tensor,
    budget: PerturbationBudget,
    generator: torch.Generator | None = None,
    clip: tuple[float, float] | None = (0.0, 1.0),
) -> torch.Tensor:
    """Projected gradient ascent on the cross-entropy; returns the perturbation ``delta``.

    ``f`` maps unit-range images to logits. The returned ``delta`` lies inside the
    budget ball and ``x + delta`` inside ``clip``. Model parameters receive no
    gradient.
    """
    if budget.epsilon < 0:
        raise ConfigError("epsilon must be >= 0")
    batched = x.dim() == 4
    xb = x if batched else x.unsqueeze(0)
    yb = torch.as_tensor(y).reshape(-1).to(xb.device)
    if budget.epsilon == 0:
        delta = torch.zeros_like(xb)
        return delta if batched else delta[0]

    xb = xb.detach()
    if budget.random_start:
        if budget.norm == "linf":
            delta = (torch.rand(xb.shape, generator=generator, dtype=xb.dtype) * 2 - 1) * budget.epsilon
        else:
            direction = torch.randn(xb.shape, generator=generator, dtype=xb.dtype)
            direction = direction / _flat_norm(direction).clamp_min(1e-12)
            radius = torch.rand((xb.shape[0],) + (1,) * (xb.dim() - 1), generator=generator, dtype=xb.dtype)
            delta = direction * radius * budget.epsilon
    else:
        delta = torch.zeros_like(xb)
    if clip is not None:
        delta = (xb + delta).clamp(*clip) - xb

    for _ in range(budget.steps):
        delta.requires_grad_(True)
        loss = F.cross_entropy(f(xb + delta), yb, reduction="sum")
        (grad,) = torch.autograd.grad(loss, delta)
        with torch.no_grad():
            if budget.norm == "linf":
                delta = delta + budget.alpha * grad.sign()
            else:
                delta = delta + budget.alpha * grad / _flat_norm(grad).clamp_min(1e-12)
            delta = project(delta, budget)
            if clip is not None:
                # clipping only shrinks coordinates toward zero, so the bound still holds
                delta = (xb + delta).clamp(*clip) - xb
        delta = delta.detach()
    return delta if batched else delta[0]


# --- training -----------------------------------------------------------------------


def accuracy(f, images: torch.Tensor, labels: torch.Tensor, batch_size: int = 500) -> float:
    correct = 0
    with torch.no_grad():
        for i in range(0, len(images), batch_size):
            logits = f(images[i : i + batch_size])
            correct += int((logits.argmax(1) == labels[i : i + batch_size]).sum())
    return correct / len(images)


def adversarial_accuracy(f, images, labels, budget, seed: int = 0, batch_size: int = 500) -> float:
    gen = torch.Generator().manual_seed(seed)
    correct = 0
    for i in range(0, len(images), batch_size):
        xb, yb = images[i : i + batch_size], labels[i : i + batch_size]
        delta = pgd_attack(f, xb, yb, budget, generator=gen)
        with torch.no_grad():
            correct += int((f(xb + delta).argmax(1) == yb).sum())
    return correct / len(images)


def adversarial_train(
    f: ClassifierHandle,
    dataset: tuple[torch.Tensor, torch.Tensor],
    budget: PerturbationBudget,
    epochs: int = 6,
    batch_size: int = 64,
    lr: float = 2e-3,
    seed: int = 0,
    eval_set: tuple[torch.Tensor, torch.Tensor] | None = None,
    eval_adversarial: bool = True,
) -> tuple[ClassifierHandle, list[dict]]:
    """Train ``f`` on PGD-perturbed batches; ``epsilon = 0`` reduces to standard training.

    After each epoch the clean and adversarial accuracy on ``eval_set`` (the training
    set when absent) are appended to the log.
    """
    if f.frozen:
        raise ContractError("cannot train a frozen classifier")
    images, labels = dataset
    if len(images) == 0:
        raise ConfigError("training dataset is empty")
    eval_images, eval_labels = eval_set if eval_set is not None else dataset

    model = f.model
    opt = torch.optim.Adam(model.parameters(), lr=lr)
    steps_per_epoch = -(-len(images) // batch_size)
    sched = torch.optim.lr_scheduler.OneCycleLR(opt, max_lr=lr, total_steps=epochs * steps_per_epoch)
    shuffle_gen = torch.Generator().manual_seed(seed)
    attack_gen = torch.Generator().manual_seed(seed + 1)
    log = []
    for epoch in range(epochs):
        order = torch.randperm(len(images), generator=shuffle_gen)
        running = 0.0
        for i in range(0, len(images), batch_size):
            idx = order[i : i + batch_size]
            xb, yb = images[idx], labels[idx]
            if budget.epsilon > 0:
                model.eval()
                xb = xb + pgd_attack(f, xb, yb, budget, generator=attack_gen)
            model.train()
            loss = F.cross_entropy(f(xb), yb)
            opt.zero_grad()
            loss.backward()
            opt.step()
            sched.step()
            running += float(loss.detach()) * len(idx)
        model.eval()
        entry = {
            "epoch": epoch + 1,
            "train_loss": running / len(images),
            "clean_acc": accuracy(f, eval_images, eval_labels),
        }
        if eval_adversarial:
            entry["adv_acc"] = adversarial_accuracy(f, eval_images, eval_labels, budget, seed=seed)
        logger.info("epoch %d: %s", epoch + 1, entry)
        log.append(entry)
    f.budget = budget
    f.log = log
    return f, log


# --- frozen-model queries -----------------------------------------------------------


def _check_input(f: ClassifierHandle, x: torch.Tensor) -> torch.Tensor:
    check_image(x)
    return x if x.dim() == 4 else x.unsqueeze(0)


def predict(f: ClassifierHandle, x: torch.Tensor):
    """Return ``(logits, class)``; batched input gives ``((N, C), (N,))``."""
    xb = _check_input(f, x)
    with torch.no_grad():
        logits = f(xb)
    if logits.shape[-1] != f.num_classes:
        raise ShapeError(f"classifier produced {logits.shape[-1]} logits, expected {f.num_classes}")
    cls = logits.argmax(dim=-1)
    if x.dim() == 3:
        return logits[0], int(cls[0])
    return logits, cls


def extract_stats(f: ClassifierHandle, x: torch.Tensor, layers=None) -> FeatureStats:
    """Per-layer channel mean/std of forward activations; differentiable in ``x``."""
    layers = tuple(layers) if layers is not None else f.stat_layers
    if not layers:
        raise ConfigError("no stat layers configured")
    known = getattr(f.model, "layer_names", ())
    unknown = [j for j in layers if j not in known]
    if unknown:
        raise ConfigError(f"unknown stat layers {unknown}; available: {list(known)}")
    xb = _check_input(f, x)
    _, acts = f.model.features(f.normalizer.normalize(xb), layers)
    stats = FeatureStats.from_activations({j: acts[j] for j in layers})
    if x.dim() == 3:
        return FeatureStats(stats.layer_ids, tuple(m[0] for m in stats.means), tuple(s[0] for s in stats.stds))
    return stats


def input_gradient(f: ClassifierHandle, x: torch.Tensor, c) -> torch.Tensor:
    """Gradient of the cross-entropy at class ``c`` with respect to the unit-range input."""
    if not f.frozen:
        raise ContractError("input_gradient requires a frozen classifier")
    xb = _check_input(f, x).detach().clone().requires_grad_(True)
    target = torch.as_tensor(c).reshape(-1).expand(xb.shape[0])
    loss = F.cross_entropy(f(xb), target, reduction="sum")
    (grad,) = torch.autograd.grad(loss, xb)
    return grad if x.dim() == 4 else grad[0]


def edge_alignment(f: ClassifierHandle, x: torch.Tensor, c=None) -> float:
    """Pearson correlation between per-pixel input-gradient magnitude and the Sobel edge map."""
    if c is None:
        _, c = predict(f, x)
    g = input_gradient(f, x, c)
    mag = g.pow(2).sum(dim=-3).sqrt()
    return pearson(mag, edge_map(x))


def mean_edge_alignment(f: ClassifierHandle, images: torch.Tensor, labels=None) -> float:
    scores = [edge_alignment(f, images[i], None if labels is None else int(labels[i])) for i in range(len(images))]
    return sum(scores) / len(scores)


# --- persistence --------------------------------------------------------------------


def save_classifier(f: ClassifierHandle, path) -> Path:
    """Write the checkpoint and a JSON manifest next to it (``<path>.json``)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "state_dict": f.model.state_dict(),
        "descriptor": f.descriptor(),
        "normalizer": asdict(f.normalizer),
        "input_shape": list(f.input_shape),
        "stat_layers": list(f.stat_layers),
        "budget": asdict(f.budget) if f.budget else None,
        "log": f.log,
        "seed": f.seed,
    }
    torch.save(payload, path)
    manifest = {
        "kind": "classifier",
        "checkpoint": path.name,
        "checksum": f.checksum(),
        "descriptor": payload["descriptor"],
        "budget": payload["budget"],
        "seed": f.seed,
        "normalizer": payload["normalizer"],
        "log": f.log,
    }
    path.with_suffix(path.suffix + ".json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return path


def load_classifier(path, freeze: bool = True) -> ClassifierHandle:
    payload = torch.load(Path(path), map_location="cpu", weights_only=False)
    desc = payload["descriptor"]
    model = SmallResNet(desc["num_classes"], tuple(desc["widths"]))
    model.load_state_dict(payload["state_dict"])
    norm = payload["normalizer"]
    handle = ClassifierHandle(
        model=model,
        normalizer=Normalizer(tuple(norm["mean"]), tuple(norm["std"])),
        num_classes=desc["num_classes"],
        input_shape=tuple(payload["input_shape"]),
        stat_layers=tuple(payload["stat_layers"]),
        budget=PerturbationBudget(**payload["budget"]) if payload["budget"] else None,
        log=payload["log"],
        seed=payload["seed"],
    )
    return handle.freeze() if freeze else handle


def frozen_copy(f: ClassifierHandle) -> ClassifierHandle:
    return copy.deepcopy(f).freeze()
