import json
import math

import pytest
import torch
import torch.nn.functional as F

from quasisynth.data import make_fixture, shift_mask
from quasisynth.errors import ConfigError, ContractError, MissingCheckpointError, SynthesisDiverged
from quasisynth.mask_ed import build_ed, train_ed
from quasisynth.patch_critic import CriticConfig
from quasisynth.quasi_robust import build_classifier
from quasisynth.synthesis import (
    CSV_COLUMNS,
    DESK_HYPERPARAMS,
    HyperParams,
    build_problem,
    init_preimage,
    init_state,
    run_synthesis,
    step,
    total_loss,
)

SMALL_CRITIC = CriticConfig(layers=((3, 1, 8), (3, 2, 8), (3, 1, 8)))


@pytest.fixture(scope="module")
def nets():
    x, y = make_fixture(size=32, seed=0)
    f = build_classifier(widths=(4, 8, 8), seed=0).freeze()
    e = train_ed(build_ed(filters=8, seed=0), x, y, iters=60, lr=5e-3)
    return f, e, x, y


def hp(**kw):
    base = dict(lr=0.05, eta_activation_iter=3, total_iters=6, snapshot_every=2)
    base.update(kw)
    return HyperParams(**base)


def test_hyperparam_defaults_and_schedule():
    h = HyperParams()
    assert (h.eta, h.gamma, h.kappa, h.nu, h.lr, h.alpha, h.beta) == (0.05, 30.0, 1.0, 5.0, 5e-4, 1e-4, 1e-5)
    assert h.eta_activation_iter == 5000 and h.total_iters == 10000 and h.snapshot_every == 500
    assert h.eta_at(4999) == 0.0 and h.eta_at(5000) == 0.05 and h.eta_at(9999) == 0.05
    assert DESK_HYPERPARAMS.eta_activation_iter < DESK_HYPERPARAMS.total_iters


def test_hyperparam_validation():
    for kw in ({"eta": -1.0}, {"lr": float("nan")}, {"eta_activation_iter": 11, "total_iters": 10},
               {"objective": "mse"}, {"total_iters": -1}):
        with pytest.raises(ConfigError):
            HyperParams(**kw)
    with pytest.raises(ConfigError, match="bogus"):
        HyperParams.from_dict({"bogus": 1})
    assert HyperParams.from_dict({"eta": 0.1}).eta == 0.1


def test_init_preimage():
    a, b = init_preimage((3, 64, 64), 5), init_preimage((3, 64, 64), 5)
    assert torch.equal(a, b)
    assert not torch.equal(a, init_preimage((3, 64, 64), 6))
    n = a.numel()
    assert abs(float(a.mean())) < 4 / math.sqrt(n)
    assert abs(float(a.std()) - 1) < 0.03


def test_all_zero_weights_is_pure_cross_entropy(nets):
    f, e, x, y = nets
    problem = build_problem(f, e, x, y)
    h = HyperParams(eta=0, gamma=0, kappa=0, nu=0, eta_activation_iter=0, total_iters=1)
    state = init_state(problem, h, seed=0)
    total, weighted, _ = total_loss(state, problem, h)
    ce = F.cross_entropy(f(f.normalizer.denormalize(state.pre_image).unsqueeze(0)), torch.tensor([problem.target]))
    assert float(total.detach()) == pytest.approx(float(ce.detach()), abs=1e-7)
    assert all(float(weighted[k]) == 0.0 for k in ("critic", "ed", "reg", "feat"))


def test_breakdown_sums_to_total(nets):
    f, e, x, y = nets
    problem = build_problem(f, e, x, y, critic_config=SMALL_CRITIC)
    for objective in ("ce", "kl"):
        h = hp(eta_activation_iter=0, objective=objective)
        state = init_state(problem, h, seed=1)
        total, weighted, raw = total_loss(state, problem, h)
        assert float(total.detach()) == pytest.approx(sum(float(v.detach()) for v in weighted.values()), abs=1e-6)
        assert float(weighted["ed"]) == pytest.approx(h.gamma * float(raw["ed"]), rel=1e-6)


def test_target_class_out_of_range(nets):
    f, e, x, y = nets
    problem = build_problem(f, e, x, y)
    problem.target = f.num_classes
    with pytest.raises(ConfigError):
        total_loss(init_state(problem, hp(), 0), problem, hp())


def test_critic_term_has_no_gradient_before_activation(nets):
    f, e, x, y = nets
    problem = build_problem(f, e, x, y, critic_config=SMALL_CRITIC)
    h = hp(gamma=0, kappa=0, nu=0)
    state = init_state(problem, h, seed=0)
    for t in (0, 2):
        state.t = t
        _, weighted, _ = total_loss(state, problem, h)
        assert not weighted["critic"].requires_grad or float(
            torch.autograd.grad(weighted["critic"], state.pre_image, allow_unused=True)[0].abs().sum()) == 0
    state.t = 3
    _, weighted, _ = total_loss(state, problem, h)
    (g,) = torch.autograd.grad(weighted["critic"], state.pre_image)
    assert float(g.abs().sum()) > 0


def test_critic_untouched_before_activation_and_updated_after(nets):
    f, e, x, y = nets
    cfg = CriticConfig(layers=SMALL_CRITIC.layers, updates_per_gen_step=2)
    problem = build_problem(f, e, x, y, critic_config=cfg)
    h = hp()
    state = init_state(problem, h, seed=0)
    for _ in range(3):
        step(state, problem, h)
    assert state.critic.updates == 0
    assert all(math.isnan(r["critic_loss"]) for r in state.loss_history)
    step(state, problem, h)
    assert state.critic.updates == 2 and state.t == 4 and len(state.loss_history) == 4


def test_zero_learning_rate_leaves_preimage(nets):
    f, e, x, y = nets
    problem = build_problem(f, e, x, y, critic_config=SMALL_CRITIC)
    h = hp(lr=0.0)
    state = init_state(problem, h, seed=0)
    before = state.pre_image.detach().clone()
    for _ in range(4):
        step(state, problem, h)
    assert torch.equal(state.pre_image.detach(), before)


def test_non_finite_loss_aborts_with_terms(nets):
    f, e, x, y = nets
    problem = build_problem(f, e, x, y)
    h = hp()
    state = init_state(problem, h, seed=0)
    with torch.no_grad():
        state.pre_image.mul_(1e35)  # finite, but overflows inside the networks
    with pytest.raises(SynthesisDiverged) as info:
        step(state, problem, h)
    assert set(info.value.terms) == {"semantic", "critic", "ed", "reg", "feat"}
    assert "t=0" in str(info.value)
    with torch.no_grad():
        state.pre_image.fill_(float("nan"))
    with pytest.raises(SynthesisDiverged, match="non-finite"):
        step(state, problem, h)


def test_unfrozen_networks_rejected(nets):
    f, e, x, y = nets
    with pytest.raises(ContractError):
        build_problem(build_classifier(widths=(4, 8, 8)), e, x, y)


def test_missing_checkpoints_name_the_command(nets):
    f, e, x, y = nets
    with pytest.raises(MissingCheckpointError, match="train-ed"):
        run_synthesis(x, y, y, f, None, hp())
    with pytest.raises(MissingCheckpointError, match="train-classifier"):
        run_synthesis(x, y, y, None, e, hp())


def test_run_outputs_manifest_and_resume(nets, tmp_path):
    f, e, x, y = nets
    y_dst = shift_mask(y, 0.25)
    h = hp()
    x_dst, manifest = run_synthesis(x, y, y_dst, f, e, h, seed=3, critic_config=SMALL_CRITIC, out_dir=tmp_path / "a")
    out = tmp_path / "a"
    for name in ("x_dst.png", "losses.csv", "manifest.json", "state.pt", "critic.pt"):
        assert (out / name).exists()
    assert sorted(p.name for p in (out / "snapshots").iterdir()) == manifest["snapshots"] == [
        "snapshot_000002.png", "snapshot_000004.png", "snapshot_000006.png"]
    lines = (out / "losses.csv").read_text().splitlines()
    assert lines[0].split(",") == list(CSV_COLUMNS) and len(lines) == 1 + h.total_iters
    written = json.loads((out / "manifest.json").read_text())
    assert written["seed"] == 3 and written["classifier_checksum"] == f.checksum()
    assert written["critic_receptive_field"]["receptive_field"] == 9
    assert x_dst.shape == x.shape and float(x_dst.min()) >= 0 and float(x_dst.max()) <= 1
    assert torch.equal(torch.round(x_dst * 255), x_dst * 255)

    # run half way, then resume from the saved state: same result as the uninterrupted run
    half = hp(total_iters=4, eta_activation_iter=3)
    run_synthesis(x, y, y_dst, f, e, half, seed=3, critic_config=SMALL_CRITIC, out_dir=tmp_path / "b")
    state = torch.load(tmp_path / "b" / "state.pt", weights_only=False)
    x_res, m_res = run_synthesis(x, y, y_dst, f, e, h, seed=3, critic_config=SMALL_CRITIC, resume=state)
    assert m_res["output_sha256"] == manifest["output_sha256"]
    assert m_res["loss_csv_sha256"] == manifest["loss_csv_sha256"]
