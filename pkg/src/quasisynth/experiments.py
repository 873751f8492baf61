"""Desk-scale experiment drivers shared by the CLI and the acceptance suite."""
from __future__ import annotations

from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch

from .data import make_shape_dataset
from .imaging import save_unit_grid, visualize_gradient
from .quasi_robust import (
    ClassifierHandle,
    PerturbationBudget,
    accuracy,
    adversarial_train,
    build_classifier,
    dataset_normalizer,
    edge_alignment,
    input_gradient,
)


@dataclass(frozen=True)
class DeskSetup:
    """10-class 32x32 shape dataset and the training schedule used for every budget."""

    n_train: int = 3000
    n_test: int = 500
    size: int = 32
    noise: float = 0.1
    min_contrast: float = 0.15
    radius_range: tuple[float, float] = (0.16, 0.36)
    data_seed: int = 0
    epochs: int = 12
    batch_size: int = 64
    lr: float = 2e-3
    widths: tuple[int, int, int] = (16, 32, 64)

    def datasets(self):
        kw = dict(size=self.size, noise=self.noise, min_contrast=self.min_contrast, radius_range=self.radius_range)
        train = make_shape_dataset(self.n_train, seed=self.data_seed, **kw)
        test = make_shape_dataset(self.n_test, seed=self.data_seed + 1, **kw)
        return train, test

    def to_dict(self) -> dict:
        return asdict(self)


# Budgets for the desk-scale sweep: the reference L2 budget rescaled to 32x32, and a
# budget large enough to trade accuracy for robustness.
EPS_SMALL = 0.05 * 32 / 224
EPS_LARGE = 0.2


def train_desk_classifier(budget: PerturbationBudget, setup: DeskSetup = DeskSetup(), seed: int = 0,
                          data=None) -> ClassifierHandle:
    (x_train, y_train), test = data if data is not None else setup.datasets()
    f = build_classifier(num_classes=10, widths=setup.widths, seed=seed, normalizer=dataset_normalizer(x_train),
                         input_size=setup.size)
    adversarial_train(f, (x_train, y_train), budget, epochs=setup.epochs, batch_size=setup.batch_size,
                      lr=setup.lr, seed=seed, eval_set=test)
    return f.freeze()


def gradient_study(classifiers: dict[str, ClassifierHandle], images: torch.Tensor, labels: torch.Tensor,
                   out_dir=None) -> dict:
    """Visualized input gradients and edge-alignment scores for each model.

    Writes one PNG per (image, model) pair when ``out_dir`` is given.
    """
    out = Path(out_dir) if out_dir is not None else None
    result = {"grads": {}, "alignment": {}, "accuracy": {}, "files": []}
    for name, f in classifiers.items():
        vis, scores = [], []
        for i in range(len(images)):
            c = int(labels[i])
            g = input_gradient(f, images[i], c)
            v = visualize_gradient(g.permute(1, 2, 0))
            vis.append(v)
            scores.append(edge_alignment(f, images[i], c))
            if out is not None:
                path = save_unit_grid(out / f"grad_img{i:03d}_{name}.png", v)
                result["files"].append(path.name)
        result["grads"][name] = vis
        result["alignment"][name] = float(np.mean(scores))
        result["accuracy"][name] = accuracy(f, images, labels)
    return result
