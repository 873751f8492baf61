import json
import math

import pytest
import torch
import torch.nn as nn

from quasisynth.data import make_fixture
from quasisynth.errors import ContractError, InvalidInputError
from quasisynth.mask_ed import (
    build_ed,
    ed_inversion_loss,
    iou,
    load_ed,
    predict_mask,
    save_ed,
    train_ed,
)


@pytest.fixture(scope="module")
def small_pair():
    x, y = make_fixture(size=24, seed=0, center_frac=(0.5, 0.4), radius_frac=0.25)
    return x, y


@pytest.fixture(scope="module")
def small_ed(small_pair):
    x, y = small_pair
    return train_ed(build_ed(filters=16, seed=0), x, y, iters=300, lr=5e-3)


def test_architecture():
    e = build_ed()
    convs = [m for m in e.model.body if isinstance(m, nn.Conv2d)]
    deconvs = [m for m in e.model.body if isinstance(m, nn.ConvTranspose2d)]
    assert len(convs) == 3 and len(deconvs) == 3
    for m in convs + deconvs:
        assert m.out_channels == 64 and m.kernel_size == (3, 3) and m.stride == (1, 1)
    assert sum(isinstance(m, nn.BatchNorm2d) for m in e.model.body) == 6
    assert {m.negative_slope for m in e.model.body if isinstance(m, nn.LeakyReLU)} == {0.2}
    e.model.eval()
    with torch.no_grad():
        out = e(torch.rand(3, 224, 224))
    assert out.shape == (1, 1, 224, 224)
    assert float(out.min()) > 0 and float(out.max()) < 1


@pytest.mark.parametrize("hw", [(8, 8), (13, 21), (40, 9)])
def test_fully_convolutional(hw):
    e = build_ed(filters=8).freeze()
    assert e(torch.rand(3, *hw)).shape == (1, 1, *hw)


def test_overfit_single_pair(small_pair, small_ed):
    x, y = small_pair
    assert small_ed.frozen and small_ed.final_bce < 0.05
    acc = float((predict_mask(small_ed, x) == y[0]).float().mean())
    assert acc > 0.95
    assert small_ed.train_log[-1]["iter"] == 300


def test_complement_target_is_expensive(small_pair, small_ed):
    x, y = small_pair
    assert float(ed_inversion_loss(small_ed, x, 1 - y)) > 1.0


def test_self_consistent_target_is_cheap(small_pair, small_ed):
    x, _ = small_pair
    y_hat = predict_mask(small_ed, x)
    assert float(ed_inversion_loss(small_ed, x, y_hat)) < 0.05


def test_bce_identity(small_pair, small_ed):
    x, y = small_pair
    for t in (x, torch.rand_like(x)):
        with torch.no_grad():
            z = small_ed.model.logits(t.unsqueeze(0))[0, 0].double()
        total = float(ed_inversion_loss(small_ed, t, y) + ed_inversion_loss(small_ed, t, 1 - y))
        # -log p - log(1 - p) written in logits to stay exact when p saturates
        oracle = float((nn.functional.softplus(-z) + nn.functional.softplus(z)).mean())
        assert total == pytest.approx(oracle, rel=1e-5)
        assert total >= 2 * math.log(2) - 1e-6


def test_bce_identity_equality_at_half():
    e = build_ed(filters=4)
    for p in e.model.parameters():
        nn.init.zeros_(p)
    e.freeze()
    y = (torch.rand(1, 8, 8) > 0.5).float()
    x = torch.rand(3, 8, 8)
    total = float(ed_inversion_loss(e, x, y) + ed_inversion_loss(e, x, 1 - y))
    assert total == pytest.approx(2 * math.log(2), abs=1e-6)


def test_all_zero_mask():
    x, _ = make_fixture(size=16, seed=1)
    e = train_ed(build_ed(filters=8, seed=0), x, torch.zeros(1, 16, 16), iters=100, lr=5e-3)
    assert float(e(x).max()) < 0.5


def test_inversion_contract_and_purity(small_pair, small_ed):
    x, y = small_pair
    before = small_ed.checksum()
    xv = x.clone().requires_grad_(True)
    for _ in range(3):
        loss = ed_inversion_loss(small_ed, xv, y)
        loss.backward()
    assert xv.grad is not None
    assert all(p.grad is None for p in small_ed.model.parameters())
    assert small_ed.checksum() == before
    with pytest.raises(ContractError):
        ed_inversion_loss(build_ed(filters=4), x, y)
    with pytest.raises(ContractError):
        train_ed(small_ed, x, y, iters=1)


def test_non_binary_mask_rejected(small_pair):
    x, y = small_pair
    with pytest.raises(InvalidInputError):
        train_ed(build_ed(filters=4), x, y * 0.5, iters=1)


def test_inversion_finite_differences(small_pair, small_ed):
    x, y = small_pair
    e64 = small_ed
    e64.model.double()
    try:
        xd = x.double().clone().requires_grad_(True)
        (g,) = torch.autograd.grad(ed_inversion_loss(e64, xd, y), xd)
        gen = torch.Generator().manual_seed(0)
        for _ in range(5):
            k, i, j = (int(torch.randint(0, n, (1,), generator=gen)) for n in (3, 24, 24))
            h = 1e-6
            xp, xm = x.double().clone(), x.double().clone()
            xp[k, i, j] += h
            xm[k, i, j] -= h
            with torch.no_grad():
                fd = float(ed_inversion_loss(e64, xp, y) - ed_inversion_loss(e64, xm, y)) / (2 * h)
            assert abs(fd - float(g[k, i, j])) <= 1e-3 * max(abs(fd), 1e-8)
    finally:
        e64.model.float()


def test_iou():
    a = torch.zeros(4, 4)
    a[:2] = 1
    b = torch.zeros(4, 4)
    b[1:3] = 1
    assert iou(a, b) == pytest.approx(4 / 12)
    assert iou(torch.zeros(4, 4), torch.zeros(4, 4)) == 1.0


def test_checkpoint_round_trip(tmp_path, small_pair, small_ed):
    x, _ = small_pair
    path = save_ed(small_ed, tmp_path / "ed.pt")
    e = load_ed(path)
    assert e.frozen and e.checksum() == small_ed.checksum() and e.final_bce == small_ed.final_bce
    assert torch.equal(e(x), small_ed(x))
    manifest = json.loads((tmp_path / "ed.pt.json").read_text())
    assert manifest["iterations"] == 300 and manifest["source_pair_sha256"] == small_ed.source_hash
