import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from estargan import adversary as A
from estargan.conversion_model import AutoVC, Generator
from estargan.profiles import tiny_profile


@pytest.fixture
def cfg():
    return tiny_profile(4)


def nets(cfg, seed=0):
    torch.manual_seed(seed)
    return A.Discriminator(cfg), A.SpeakerClassifier(cfg)


def eye(idx, k=4):
    return torch.eye(k)[idx]


class RiggedGenerator:
    """Identity conversion; the AutoVC back-conversion adds ``offset``."""

    def __init__(self, offset=0.0):
        self.offset = offset

    def __call__(self, x, src, tgt):
        return x

    def autovc(self, lms, src, tgt):
        return lms, lms + self.offset


def test_min_frames_constants(cfg):
    D, C = nets(cfg)
    assert D.min_frames == 8
    assert C.min_frames == 1
    with pytest.raises(A.FrameCountError):
        D(torch.randn(1, 7, 80), eye([0]))
    D(torch.randn(1, 8, 80), eye([0]))


def test_discriminator_scalar_and_zero_final_layer(cfg):
    D, _ = nets(cfg)
    x = torch.randn(3, 32, 80)
    assert D(x, eye([0, 1, 2])).shape == (3,)
    with torch.no_grad():
        D.stack.last.weight.zero_()
        D.stack.last.bias.zero_()
    assert torch.equal(D(x, eye([0, 1, 2])), torch.full((3,), 0.5))


def test_discriminator_conditioning_live(cfg):
    D, _ = nets(cfg)
    x = torch.randn(1, 32, 80)
    assert not torch.equal(D(x, eye([0])), D(x, eye([1])))
    assert A.discriminate(x[0], eye(0), D).shape == ()


def test_classifier_zero_final_layer_uniform(cfg):
    _, C = nets(cfg)
    with torch.no_grad():
        C.stack.last.weight.zero_()
        C.stack.last.bias.zero_()
    p = C(torch.randn(2, 32, 80))
    assert torch.allclose(p, torch.full((2, 4), 0.25), atol=0, rtol=0)


def test_classifier_probabilities(cfg):
    _, C = nets(cfg)
    with torch.no_grad():
        p = C(torch.randn(1000, 16, 80) * 3)
    assert torch.all((p > 0) & (p < 1))
    assert torch.max(torch.abs(p.sum(-1) - 1)) < 1e-6
    assert A.classify(torch.randn(16, 80), C).shape == (4,)


def test_classifier_rejects_mismatched_output_layer(cfg):
    from dataclasses import replace

    with pytest.raises(ValueError):
        A.SpeakerClassifier(replace(cfg, n_speakers=5))


def test_adversarial_loss_values():
    half = torch.full((6,), 0.5, dtype=torch.float64)
    d, g = A.adversarial_losses(half, half)
    assert abs(float(d) - 2 * math.log(2)) < 1e-6
    assert abs(float(g) - math.log(2)) < 1e-6
    for eps in (1e-3, 1e-6, 1e-9):
        d, _ = A.adversarial_losses(torch.full((2,), 1 - eps, dtype=torch.float64), torch.full((2,), eps, dtype=torch.float64))
        assert float(d) < 3 * eps
    with pytest.raises(ValueError):
        A.adversarial_losses(torch.zeros(0), half)


def test_adversarial_losses_recompose(cfg):
    D, _ = nets(cfg)
    real, fake = torch.randn(3, 16, 80), torch.randn(3, 16, 80)
    attr = eye([0, 2, 3])
    with torch.no_grad():
        pr = [float(A.discriminate(real[i], attr[i], D)) for i in range(3)]
        pf = [float(A.discriminate(fake[i], attr[i], D)) for i in range(3)]
        d, g = A.adversarial_losses(D(real, attr).double(), D(fake, attr).double())
    assert abs(float(d) - (-np.mean(np.log(pr)) - np.mean(np.log(1 - np.array(pf))))) < 1e-6
    assert abs(float(g) + np.mean(np.log(pf))) < 1e-6


def test_classification_loss_values():
    uniform = torch.full((5, 8), 1 / 8, dtype=torch.float64)
    labels = torch.tensor([0, 3, 7, 1, 1])
    c, f = A.classification_losses(uniform, labels, uniform, labels)
    assert abs(float(c) - math.log(8)) < 1e-6 and abs(float(f) - math.log(8)) < 1e-6
    assert float(A.classification_loss(torch.eye(8, dtype=torch.float64)[labels], labels)) == 0.0
    with pytest.raises(IndexError):
        A.classification_loss(uniform, torch.tensor([8]))
    probs = torch.softmax(torch.randn(4, 8, dtype=torch.float64), -1)
    lab = torch.tensor([2, 0, 5, 5])
    oracle = -np.mean([math.log(float(probs[i, lab[i]])) for i in range(4)])
    assert abs(float(A.classification_loss(probs, lab)) - oracle) < 1e-9


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(0.0, 1.0), min_size=1, max_size=8), st.lists(st.floats(0.0, 1.0), min_size=1, max_size=8))
def test_losses_nonnegative_and_finite_at_boundaries(real, fake):
    d, g = A.adversarial_losses(torch.tensor(real, dtype=torch.float64), torch.tensor(fake, dtype=torch.float64))
    assert float(d) >= 0 and float(g) >= 0 and math.isfinite(float(d)) and math.isfinite(float(g))
    probs = torch.tensor([real[:1] + [1.0 - real[0]]], dtype=torch.float64)
    c = A.classification_loss(probs, torch.tensor([0]))
    assert float(c) >= 0 and math.isfinite(float(c))


def test_l1_cycle_and_identity_values(rng):
    y = torch.as_tensor(rng.standard_normal((2, 16, 80)))
    s, t = eye([0, 1]).double(), eye([2, 3]).double()
    assert float(A.cycle_loss(y, y, s, t, RiggedGenerator())) == 0.0
    assert abs(float(A.cycle_loss(y, y, s, t, RiggedGenerator(0.3))) - 0.3) < 1e-12
    assert float(A.identity_loss(y, y, s, RiggedGenerator())) == 0.0
    assert abs(float(A.identity_loss(y + 1, y, s, RiggedGenerator())) - 1.0) < 1e-12
    with pytest.raises(ValueError):
        A.l1(y, y[:, :8])


def test_cycle_and_identity_recompose(cfg, rng):
    torch.manual_seed(0)
    G = Generator(AutoVC(cfg)).double()
    x = torch.as_tensor(rng.standard_normal((2, 16, 80)))
    y = torch.as_tensor(rng.standard_normal((2, 16, 80)))
    s, t = eye([0, 1]).double(), eye([2, 3]).double()
    with torch.no_grad():
        back = G.autovc(G.autovc(x, s, t)[1], t, s)[1]
        assert abs(float(A.cycle_loss(x, y, s, t, G)) - float(torch.abs(back - y).mean())) < 1e-9
        same = G.autovc(x, s, s)[1]
        assert abs(float(A.identity_loss(x, y, s, G)) - float(torch.abs(same - y).mean())) < 1e-9


def test_gradient_penalty_constant_and_unit_linear(rng):
    real = torch.as_tensor(rng.standard_normal((4, 16, 80)))
    fake = torch.as_tensor(rng.standard_normal((4, 16, 80)))
    attr = torch.zeros(4, 4, dtype=torch.float64)
    const = lambda u, a: torch.zeros(u.shape[0], dtype=u.dtype)
    assert abs(float(A.gradient_penalty(const, real, fake, attr)) - 1.0) < 1e-6
    w = torch.as_tensor(rng.standard_normal((16, 80)))
    w = w / w.norm()
    linear = lambda u, a: (u * w).sum(dim=(1, 2))
    assert abs(float(A.gradient_penalty(linear, real, fake, attr))) < 1e-6
    with pytest.raises(ValueError):
        A.gradient_penalty(linear, real, fake[:, :8], attr)


def test_gradient_penalty_matches_finite_difference_norm(cfg):
    D, _ = nets(cfg, 3)
    D = D.double()
    real = torch.randn(2, 16, 80, dtype=torch.float64)
    fake = torch.randn(2, 16, 80, dtype=torch.float64)
    attr = eye([1, 2]).double()
    eps = torch.tensor([0.3, 0.8], dtype=torch.float64)
    gp = A.gradient_penalty(D.logits, real, fake, attr, eps=eps).item()
    u = eps[:, None, None] * real + (1 - eps[:, None, None]) * fake
    h = 1e-6
    norms = []
    with torch.no_grad():
        for b in range(2):
            g = np.zeros(16 * 80)
            flat = u[b].reshape(-1).clone()
            for i in range(flat.numel()):
                up, dn = flat.clone(), flat.clone()
                up[i] += h
                dn[i] -= h
                g[i] = float(D.logits(up.reshape(1, 16, 80), attr[b : b + 1]) - D.logits(dn.reshape(1, 16, 80), attr[b : b + 1])) / (2 * h)
            norms.append(np.linalg.norm(g))
    oracle = np.mean((np.array(norms) - 1) ** 2)
    assert abs(gp - oracle) <= 1e-3 * max(1.0, oracle)


def test_objectives_recompose(cfg, rng):
    torch.manual_seed(0)
    G = Generator(AutoVC(cfg)).double()
    D, C = nets(cfg, 1)
    D, C = D.double(), C.double()
    x = torch.as_tensor(rng.standard_normal((2, 16, 80)))
    y = torch.as_tensor(rng.standard_normal((2, 16, 80)))
    s, t = eye([0, 1]).double(), eye([2, 0]).double()
    w = A.LossWeights(cls=0.5, cyc=3.0, idm=2.0, gp=7.0)
    G.eval()
    total, terms = A.generator_objective(G, D, C, x, y, s, t, w)
    with torch.no_grad():
        fake = G(x, s, t)
        adv = -torch.log(D(fake, t)).mean()
        cls = A.classification_loss(C(fake), torch.tensor([2, 0]))
        cyc = A.cycle_loss(x, y, s, t, G)
        idm = A.identity_loss(x, y, s, G)
    for k, v in zip(("adv_F", "cls_F", "cyc_F", "idm_F"), (adv, cls, cyc, idm)):
        assert abs(terms[k].item() - float(v)) < 1e-9
    assert abs(total.item() - float(adv + 0.5 * cls + 3 * cyc + 2 * idm)) < 1e-9

    c_total, c_terms = A.classifier_objective(C, y, torch.tensor([0, 1]))
    assert c_total.item() == c_terms["cls_C"].item()

    eps = torch.tensor([0.25, 0.75], dtype=torch.float64)
    d_total, d_terms = A.discriminator_objective(D, y, s, fake.detach(), t, w, eps=eps)
    adv_d, _ = A.adversarial_losses(D(y, s), D(fake.detach(), t))
    gp = A.gradient_penalty(D.logits, y, fake.detach(), t, eps=eps)
    assert abs(d_terms["adv_D"].item() - adv_d.item()) < 1e-9
    assert abs(d_terms["gp_D"].item() - gp.item()) < 1e-9
    assert abs(d_total.item() - (adv_d + 7 * gp).item()) < 1e-9


def test_loss_weights_validation():
    with pytest.raises(ValueError):
        A.LossWeights(cyc=-1.0)


def test_discriminator_learns_fixed_batch(cfg):
    D, _ = nets(cfg, 0)
    torch.manual_seed(0)
    real = torch.randn(4, 16, 80) + 1.0
    fake = torch.randn(4, 16, 80) - 1.0
    attr = eye([0, 1, 2, 3])
    opt = torch.optim.Adam(D.parameters(), lr=1e-3)
    for _ in range(200):
        opt.zero_grad()
        loss, _ = A.adversarial_losses(D(real, attr), D(fake, attr))
        loss.backward()
        opt.step()
    with torch.no_grad():
        assert D(real, attr).min() > 0.9
        assert D(fake, attr).max() < 0.1
