import numpy as np
import pytest

from fedsim import hyperhead, losses, nnet
from fedsim.errors import DomainError
from fedsim.params import ParamVector

NET = nnet.NetworkSpec(input_dim=5, hidden_dims=(6,), feature_dim=4, num_classes=3)
BIG = nnet.NetworkSpec(input_dim=8, hidden_dims=(8,), feature_dim=64, num_classes=10)


def uniform(c):
    return np.full(c, 1.0 / c)


class TestLayoutAndInit:
    def test_default_hidden_dim_thresholds(self):
        assert hyperhead.default_hidden_dim(NET) == 16   # 3*4 <= 1000
        wide = nnet.NetworkSpec(input_dim=8, hidden_dims=(8,), feature_dim=128,
                                num_classes=10)
        assert hyperhead.default_hidden_dim(wide) == 32  # 10*128 > 1000

    def test_output_length(self):
        nu = ParamVector.zeros(hyperhead.hyper_layout(BIG))
        assert nu.view("hyp1_b").shape == ((64 + 1) * 10,)

    def test_init_output_layer_zero(self):
        nu = hyperhead.init_hyper(NET, np.random.default_rng(0))
        assert not nu.view("hyp1_W").any()
        assert not nu.view("hyp1_b").any()
        assert nu.view("hyp0_W").any()


class TestGenerateHead:
    def test_zero_nu_gives_zero_head(self):
        nu = ParamVector.zeros(hyperhead.hyper_layout(NET))
        phi = hyperhead.generate_head(NET, nu, uniform(3))
        assert not phi.values.any()

    def test_deterministic(self):
        rng = np.random.default_rng(1)
        nu = hyperhead.init_hyper(NET, rng)
        nu.values[:] = rng.standard_normal(nu.values.size)
        a = hyperhead.generate_head(NET, nu, uniform(3))
        b = hyperhead.generate_head(NET, nu, uniform(3))
        assert np.array_equal(a.values, b.values)

    def test_head_layout_matches_network(self):
        nu = hyperhead.init_hyper(NET, np.random.default_rng(2))
        phi = hyperhead.generate_head(NET, nu, np.array([0.7, 0.3, 0.0]))
        assert phi.layout == nnet.head_layout(NET)

    def test_manual_forward_oracle(self):
        rng = np.random.default_rng(3)
        nu = ParamVector(rng.standard_normal(
            sum(int(np.prod(s)) for _, s in hyperhead.hyper_layout(NET))),
            hyperhead.hyper_layout(NET))
        a = np.array([0.2, 0.5, 0.3])
        hidden = np.maximum(nu.view("hyp0_W") @ a + nu.view("hyp0_b"), 0.0)
        out = nu.view("hyp1_W") @ hidden + nu.view("hyp1_b")
        phi = hyperhead.generate_head(NET, nu, a)
        assert np.allclose(phi.view("W").ravel(), out[:12], atol=1e-12)
        assert np.allclose(phi.view("b"), out[12:], atol=1e-12)

    @pytest.mark.parametrize("bad", [
        np.array([0.5, 0.5]),            # wrong length
        np.array([0.7, 0.7, -0.4]),      # negative entry
        np.array([0.5, 0.2, 0.2]),       # does not sum to 1
    ])
    def test_malformed_distribution(self, bad):
        nu = hyperhead.init_hyper(NET, np.random.default_rng(0))
        with pytest.raises(DomainError):
            hyperhead.generate_head(NET, nu, bad)


class TestHyperBackward:
    def _random_nu(self, seed):
        rng = np.random.default_rng(seed)
        layout = hyperhead.hyper_layout(NET)
        nu = ParamVector(0.4 * rng.standard_normal(
            sum(int(np.prod(s)) for _, s in layout)), layout)
        return nu, rng

    def test_zero_upstream(self):
        nu, _ = self._random_nu(0)
        g = hyperhead.hyper_backward(NET, nu, uniform(3),
                                     ParamVector.zeros(nnet.head_layout(NET)))
        assert not g.values.any()

    def test_linearity(self):
        nu, rng = self._random_nu(1)
        d = ParamVector(rng.standard_normal(15), nnet.head_layout(NET))
        d2 = ParamVector(2 * d.values, d.layout)
        g1 = hyperhead.hyper_backward(NET, nu, uniform(3), d)
        g2 = hyperhead.hyper_backward(NET, nu, uniform(3), d2)
        assert np.allclose(g2.values, 2 * g1.values, atol=1e-12)

    def test_finite_difference_over_nu(self):
        nu, rng = self._random_nu(2)
        a = np.array([0.6, 0.1, 0.3])
        d = ParamVector(rng.standard_normal(15), nnet.head_layout(NET))

        def scalar(nu_pv):
            phi = hyperhead.generate_head(NET, nu_pv, a)
            return float(np.dot(d.values, phi.values))

        analytic = hyperhead.hyper_backward(NET, nu, a, d)
        numeric = nnet.finite_difference_grad(scalar, nu, eps=1e-5)
        assert nnet.grad_error(analytic, numeric) < 1e-4

    def test_full_path_through_loss(self):
        # end-to-end: CE on personalized logits -> phi grad -> nu grad
        rng = np.random.default_rng(4)
        theta = nnet.init_extractor(NET, rng, std=0.3)
        psi = nnet.init_head(NET, rng, std=0.3)
        nu, _ = self._random_nu(5)
        a = np.array([0.2, 0.3, 0.5])
        x = rng.standard_normal(5)
        counts = np.array([4, 6, 10])
        ce = losses.LossSpec("ce")

        def scalar(nu_pv):
            phi = hyperhead.generate_head(NET, nu_pv, a)
            cache = nnet.forward(NET, theta, psi, x, phi)
            return losses.instance_loss_and_grad(cache.personal_logits[0], 1,
                                                 ce, counts)[0]

        phi = hyperhead.generate_head(NET, nu, a)
        cache = nnet.forward(NET, theta, psi, x, phi)
        _, dg = losses.instance_loss_and_grad(cache.personal_logits[0], 1, ce, counts)
        dphi = nnet.backward(NET, theta, psi, cache, dg[None, :], {"phi"},
                             phi=phi, branch="personal")["phi"]
        analytic = hyperhead.hyper_backward(NET, nu, a, dphi)
        numeric = nnet.finite_difference_grad(scalar, nu, eps=1e-5)
        assert nnet.grad_error(analytic, numeric) < 1e-4


def test_zero_shot_personalize_returns_generated_head():
    rng = np.random.default_rng(6)
    theta = nnet.init_extractor(NET, rng)
    psi = nnet.init_head(NET, rng)
    nu = hyperhead.init_hyper(NET, rng)
    nu.values[:] = 0.3 * rng.standard_normal(nu.values.size)
    a = np.array([0.1, 0.1, 0.8])
    t2, p2, phi = hyperhead.zero_shot_personalize(NET, theta, psi, nu, a)
    assert t2 is theta and p2 is psi
    want = hyperhead.generate_head(NET, nu, a)
    assert np.array_equal(phi.values, want.values)
