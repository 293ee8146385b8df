import numpy as np
import pytest
import torch

from hal.core import ExperimentConfig
from hal.net import (HalModel, NumericalError, aux_action_recon, classify, elbo, forward,
                     gaussian_kl, load_checkpoint, save_checkpoint)


def tiny(causal=False, pyramid=False, dtype=torch.float64, seed=0, **kw):
    torch.manual_seed(seed)
    m = HalModel(d=5, n_v=4, n_c=2, num_classes=3, hidden_width=8, num_layers=1, num_heads=2,
                 causal=causal, pyramid=pyramid, **kw)
    return m.to(dtype)


def test_output_shapes():
    m = tiny().eval()
    x = torch.randn(7, 5, dtype=torch.float64)
    out = forward(m, x)
    assert out.b.shape == out.b_rec.shape == (7, 8)
    assert out.v_hat.shape == out.v_rec.shape == (7, 4)
    assert out.c_hat.shape == (7, 2)
    assert out.logits.shape == (7, 3)
    batched = forward(m, x.expand(2, 7, 5))
    assert batched.logits.shape == (2, 7, 3)
    with pytest.raises(ValueError):
        forward(m, torch.randn(7, 4))


def test_pyramid_preserves_length():
    m = tiny(pyramid=True).eval()
    for T in (6, 7):
        out = forward(m, torch.randn(T, 5, dtype=torch.float64))
        assert out.c_hat.shape == (T, 2) and out.logits.shape == (T, 3)


def test_eval_deterministic_and_train_sampling():
    m = tiny()
    x = torch.randn(6, 5, dtype=torch.float64)
    m.eval()
    a, b = forward(m, x), forward(m, x)
    assert all(torch.equal(p, q) for p, q in zip(a.as_tuple(), b.as_tuple()))
    assert torch.equal(a.v_hat, a.mu_v) and torch.equal(a.c_hat, a.mu_c)
    m.train()
    s1, s1b, s2 = forward(m, x, 1), forward(m, x, 1), forward(m, x, 2)
    assert torch.equal(s1.v_hat, s1b.v_hat)
    assert not torch.equal(s1.v_hat, s2.v_hat)


def test_nonfinite_activation_names_map():
    m = tiny().eval()
    with torch.no_grad():
        m.visual_head.mu.weight.fill_(float("nan"))
    with pytest.raises(NumericalError, match="visual_encoder"):
        forward(m, torch.randn(4, 5, dtype=torch.float64))


def test_log_sigma_clamped():
    m = tiny().eval()
    with torch.no_grad():
        m.visual_head.log_sigma.bias.fill_(100.0)
        m.action_head.log_sigma.bias.fill_(-100.0)
    out = forward(m, torch.randn(4, 5, dtype=torch.float64))
    assert out.log_sigma_v.max() <= 8.0 and out.log_sigma_c.min() >= -8.0


def test_gaussian_kl_cases():
    z = torch.zeros(1, dtype=torch.float64)
    assert float(gaussian_kl(z + 1, z, z, z)) == pytest.approx(0.5, abs=1e-15)
    mu, ls = torch.randn(10, 3), torch.randn(10, 3)
    assert torch.all(gaussian_kl(mu, ls, mu, ls).abs() < 1e-6)
    g = torch.Generator().manual_seed(0)
    for _ in range(1000):
        args = [torch.randn(5, generator=g) * 3 for _ in range(4)]
        assert float(gaussian_kl(*args).sum()) >= -1e-6
        assert torch.all(gaussian_kl(*args) >= -1e-6)


def test_elbo_terms_nonnegative_random_models():
    x = torch.randn(2, 6, 5, dtype=torch.float64)
    for seed in range(25):
        m = tiny(seed=seed).train()
        for p in m.parameters():
            with torch.no_grad():
                p.mul_(1 + 2 * torch.rand(()).item())
        terms = elbo(m, forward(m, x, seed))
        assert min(float(terms.kl_v.detach()), float(terms.kl_c.detach()), float(terms.recon.detach())) >= 0


def test_recon_zero_when_exact():
    m = tiny().eval()
    out = forward(m, torch.randn(6, 5, dtype=torch.float64))
    out.b_rec = out.b.clone()
    assert float(elbo(m, out).recon.detach()) == 0.0


def test_kl_zero_when_posterior_equals_prior():
    m = tiny().eval()
    out = forward(m, torch.randn(6, 5, dtype=torch.float64))
    mu_p, ls_p = m.prior_v(out.v_hat)
    mu_c, lc_p = m.prior_c(out.c_hat)
    out.mu_v, out.log_sigma_v, out.mu_c, out.log_sigma_c = mu_p, ls_p, mu_c, lc_p
    terms = elbo(m, out)
    assert float(terms.kl_v.detach()) == pytest.approx(0.0, abs=1e-12)
    assert float(terms.kl_c.detach()) == pytest.approx(0.0, abs=1e-12)


def test_aux_action_recon():
    v = torch.randn(5, 4, requires_grad=True)
    assert float(aux_action_recon(v, v.detach().clone())) == 0.0
    assert float(aux_action_recon(v, v.detach() + 1.0)) == pytest.approx(1.0)
    v_rec = torch.randn(5, 4, requires_grad=True)
    aux_action_recon(v, v_rec).backward()
    assert v.grad is None or torch.all(v.grad == 0)
    assert v_rec.grad is not None


def test_classify_rows():
    m = tiny()
    with torch.no_grad():
        m.classifier.weight.zero_()
        m.classifier.bias.zero_()
    p = classify(m, torch.randn(4, 2, dtype=torch.float64))
    assert np.allclose(p.probs, 1 / 3)
    with torch.no_grad():
        m.classifier.bias.copy_(torch.tensor([0.0, 50.0, 0.0]))
    p = classify(m, torch.zeros(4, 2, dtype=torch.float64))
    assert np.all(p.probs[:, 1] > 0.999)
    with torch.no_grad():
        m.classifier.weight.normal_()
    p = classify(m, torch.randn(20, 2, dtype=torch.float64) * 5)
    assert np.all(np.abs(p.probs.sum(1) - 1) < 1e-6)


def test_elbo_gradient_matches_finite_differences():
    torch.manual_seed(0)
    m = tiny().train()
    x = torch.randn(2, 6, 5, dtype=torch.float64)

    with torch.no_grad():
        target = forward(m, x, sample_seed=5).b.clone()

    def loss():
        # the reconstruction target is a stop-gradient, so hold it at its
        # unperturbed value while differencing
        out = forward(m, x, sample_seed=5)
        out.b = target
        t = elbo(m, out)
        return t.recon + t.kl_v + t.kl_c

    m.zero_grad()
    loss().backward()
    # the classifier and action decoder do not enter the ELBO
    params = [p for p in m.parameters() if p.grad is not None]
    ana = torch.cat([p.grad.reshape(-1) for p in params])
    num = torch.zeros_like(ana)
    h = 1e-6
    k = 0
    with torch.no_grad():
        for p in params:
            flat = p.view(-1)
            for i in range(flat.numel()):
                old = float(flat[i])
                flat[i] = old + h
                up = float(loss())
                flat[i] = old - h
                down = float(loss())
                flat[i] = old
                num[k] = (up - down) / (2 * h)
                k += 1
    rel = float((ana - num).norm() / num.norm())
    assert rel <= 1e-3, rel


@pytest.mark.parametrize("positional", [False, True])
def test_length_equivariance_with_causal_attention(positional):
    m = tiny(causal=True, positions=positional).eval()
    x = torch.randn(16, 5, dtype=torch.float64)
    full = forward(m, x)
    for Tp in (1, 5, 11):
        part = forward(m, x[:Tp])
        for a, b in zip(part.as_tuple(), full.as_tuple()):
            assert torch.allclose(a, b[:Tp], atol=1e-10)


def test_global_attention_is_not_length_equivariant():
    # documents why the equivariance property is checked with causal attention
    m = tiny(causal=False).eval()
    x = torch.randn(16, 5, dtype=torch.float64)
    assert not torch.allclose(forward(m, x[:8]).logits, forward(m, x).logits[:8])


def test_checkpoint_round_trip(tmp_path):
    cfg = ExperimentConfig(d=5, hidden_width=8, num_heads=2, num_layers=1)
    torch.manual_seed(0)
    m = HalModel.from_config(cfg, 3).eval()
    save_checkpoint(tmp_path / "c.pt", m, cfg)
    m2, cfg2, payload = load_checkpoint(tmp_path / "c.pt")
    assert cfg2 == cfg and payload["format"] == "hal-checkpoint-v1"
    assert set(payload["state_dict"]) == set(m.state_dict())
    x = torch.randn(6, 5)
    assert torch.equal(forward(m, x).logits, forward(m2, x).logits)
    torch.save({"format": "other"}, tmp_path / "bad.pt")
    with pytest.raises(ValueError):
        load_checkpoint(tmp_path / "bad.pt")
