"""Shared fixtures for the expensive desk-scale runs and the acceptance summary table.

Trained classifiers are cached under pytest's cache directory, keyed by the training
configuration and the source of the modules that produce them. Run with
``--cache-clear`` (or set ``QUASISYNTH_NO_CACHE=1``) to retrain from scratch.
"""
from __future__ import annotations

import hashlib
import json
import os
from dataclasses import asdict
from pathlib import Path

import pytest

import quasisynth

ACCEPTANCE: dict[int, tuple[bool, str]] = {}

SOURCE_FILES = ("data.py", "imaging.py", "quasi_robust.py", "experiments.py")


def record(number: int, passed: bool, detail: str) -> None:
    ACCEPTANCE[number] = (bool(passed), detail)
    print(f"criterion {number}: {'PASS' if passed else 'FAIL'} ({detail})")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        passed, detail = ACCEPTANCE[number]
        terminalreporter.write_line(f"criterion {number:2d}: {'PASS' if passed else 'FAIL'}  {detail}")


def _source_hash() -> str:
    root = Path(quasisynth.__file__).parent
    h = hashlib.sha256()
    for name in SOURCE_FILES:
        h.update((root / name).read_bytes())
    return h.hexdigest()[:16]


@pytest.fixture(scope="session")
def desk_setup():
    from quasisynth.experiments import DeskSetup

    setup = DeskSetup()
    return setup, setup.datasets()


@pytest.fixture(scope="session")
def desk_classifiers(request, desk_setup):
    """Classifiers trained with identical seeds at epsilon 0, small and large (L2)."""
    from quasisynth.experiments import EPS_LARGE, EPS_SMALL, train_desk_classifier
    from quasisynth.quasi_robust import PerturbationBudget, load_classifier, save_classifier

    setup, data = desk_setup
    use_cache = os.environ.get("QUASISYNTH_NO_CACHE") != "1"
    cache_dir = Path(request.config.cache.mkdir("quasisynth-models"))
    models = {}
    for name, eps in (("zero", 0.0), ("small", EPS_SMALL), ("large", EPS_LARGE)):
        budget = PerturbationBudget(norm="l2", epsilon=eps)
        key = json.dumps({"setup": setup.to_dict(), "budget": asdict(budget), "seed": 0, "src": _source_hash()},
                         sort_keys=True)
        path = cache_dir / f"classifier_{hashlib.sha256(key.encode()).hexdigest()[:20]}.pt"
        if use_cache and path.exists():
            models[name] = load_classifier(path)
        else:
            models[name] = train_desk_classifier(budget, setup, seed=0, data=data)
            save_classifier(models[name], path)
    return models


@pytest.fixture(scope="session")
def synthesis_fixture():
    """64x64 source image, its mask and the guide mask shifted right by a quarter of the width."""
    from quasisynth.data import make_fixture, shift_mask

    x, y = make_fixture(size=64, kind="disk", seed=0)
    return x, y, shift_mask(y, 0.25)


@pytest.fixture(scope="session")
def trained_ed(synthesis_fixture):
    from quasisynth.mask_ed import build_ed, train_ed

    x, y, _ = synthesis_fixture
    return train_ed(build_ed(seed=0), x, y)


@pytest.fixture(scope="session")
def synthesis_runs(desk_classifiers, trained_ed, synthesis_fixture, tmp_path_factory):
    """Memoized desk-scale runs: ``get(seed, tag)`` returns ``(x_dst, manifest, out_dir)``."""
    from quasisynth.synthesis import DESK_HYPERPARAMS, run_synthesis

    x, y, y_dst = synthesis_fixture
    cache = {}

    def get(seed: int, tag: str = "a"):
        if (seed, tag) not in cache:
            out = tmp_path_factory.mktemp(f"synth_seed{seed}_{tag}")
            x_dst, manifest = run_synthesis(x, y, y_dst, desk_classifiers["small"], trained_ed, DESK_HYPERPARAMS,
                                            seed=seed, out_dir=out)
            cache[(seed, tag)] = (x_dst, manifest, out)
        return cache[(seed, tag)]

    return get
