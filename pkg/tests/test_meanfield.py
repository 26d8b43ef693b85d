"""Mean-field kernels: drift, noise field, covariance, and their identities."""

import math

import numpy as np
import pytest

from chaoslab.meanfield import (
    EmpiricalMeasure,
    covariance_sigma,
    g_envelope,
    mean_field_h,
    noise_xi,
    per_sample_grad,
    predict,
    risk_gradient,
    sqrt_psd,
    sqrt_psd_batch,
    structural_risk,
    tilde_h,
)
from chaoslab.model import (
    DataAtom,
    DataDistribution,
    ModelSpec,
    SquareLoss,
    TanhDotFeature,
    ZeroPenalty,
    make_model,
    two_point_distribution,
)

TANH = make_model("tanh-dot", "square")
SINGLE_ATOM = DataDistribution([DataAtom([1.0], 1.0, 1.0)])
SYMMETRIC = two_point_distribution([1.0], 1.0, [-1.0], 1.0)


def random_problem(rng, p=2, n_atoms=4, penalty=0.5, loss="square"):
    model = make_model("tanh-dot", loss, penalty, p=p)
    atoms = [
        DataAtom(rng.uniform(-1, 1, p),
                 float(rng.choice([-1.0, 1.0])) if loss == "logistic" else float(rng.uniform(-1, 1)),
                 float(rng.uniform(0.2, 1.0)))
        for _ in range(n_atoms)
    ]
    return model, DataDistribution(atoms)


class TestPredict:
    def test_dirac_at_zero(self):
        assert predict(EmpiricalMeasure(np.zeros((1, 1))), TANH, [1.0]) == 0.0

    def test_odd_symmetry_cancels(self):
        mu = EmpiricalMeasure(np.array([[-0.7], [0.7]]))
        for x in (0.3, -1.5, 2.0):
            assert predict(mu, TANH, [x]) == pytest.approx(0.0, abs=1e-16)

    def test_two_point_average(self):
        mu = EmpiricalMeasure(np.array([[0.5], [1.5]]))
        expected = (math.tanh(0.5) + math.tanh(1.5)) / 2  # = 0.6836327054524381
        assert predict(mu, TANH, [1.0]) == pytest.approx(expected, abs=1e-15)
        assert predict(mu, TANH, [1.0]) == pytest.approx(0.6836327054524381, abs=1e-12)


class TestStructuralRisk:
    def test_single_particle_at_zero(self):
        assert structural_risk(np.array([[0.0]]), TANH, SINGLE_ATOM) == pytest.approx(0.5)

    def test_zero_feature_risk_is_constant(self):
        model = make_model("zero", "square")
        for n in (1, 4, 9):
            W = np.random.default_rng(n).standard_normal((n, 1))
            assert structural_risk(W, model, SINGLE_ATOM) == pytest.approx(0.5)

    def test_gradient_matches_central_differences(self):
        rng = np.random.default_rng(1)
        model, pi = random_problem(rng)
        h = 1e-6
        worst = 0.0
        for _ in range(20):
            W = rng.standard_normal((5, 2))
            g = risk_gradient(W, model, pi)
            fd = np.zeros_like(g)
            for k in range(5):
                for j in range(2):
                    Wp, Wm = W.copy(), W.copy()
                    Wp[k, j] += h
                    Wm[k, j] -= h
                    fd[k, j] = (structural_risk(Wp, model, pi) - structural_risk(Wm, model, pi)) / (2 * h)
            scale = max(1.0, np.abs(g).max())
            worst = max(worst, np.abs(g - fd).max() / scale)
        assert worst < 1e-6

    def test_per_sample_grad_averages_to_full_gradient(self):
        rng = np.random.default_rng(2)
        model, pi = random_problem(rng)
        W = rng.standard_normal((6, 2))
        total = sum(w * per_sample_grad(W, model, pi, j) for j, w in enumerate(pi.weights))
        np.testing.assert_allclose(total, risk_gradient(W, model, pi), atol=1e-14)


class TestMeanFieldH:
    def test_zero_residual_gives_zero_drift(self):
        pi = DataDistribution([DataAtom([1.0], 0.0, 1.0)])
        mu = EmpiricalMeasure(np.zeros((1, 1)))
        np.testing.assert_allclose(mean_field_h(np.array([0.0]), mu, TANH, pi), 0.0, atol=1e-16)

    def test_unit_residual_hand_value(self):
        mu = EmpiricalMeasure(np.zeros((1, 1)))
        np.testing.assert_allclose(
            mean_field_h(np.array([0.0]), mu, TANH, SINGLE_ATOM), [1.0], atol=1e-15
        )

    def test_hand_value_with_penalty(self):
        model = make_model("tanh-dot", "square", 1.0)
        mu = EmpiricalMeasure(np.array([[2.0]]))
        expected = -(math.tanh(2.0) - 1.0) / math.cosh(2.0) ** 2 - 2.0  # -1.9974585...
        got = mean_field_h(np.array([2.0]), mu, model, SINGLE_ATOM)
        np.testing.assert_allclose(got, [expected], atol=1e-14)
        assert got[0] == pytest.approx(-1.9974585188603922, abs=1e-12)

    def test_gradient_identity_h_equals_minus_n_grad(self):
        rng = np.random.default_rng(3)
        model, pi = random_problem(rng)
        for n in (1, 3, 8):
            W = rng.standard_normal((n, 2))
            nu = EmpiricalMeasure(W)
            g = risk_gradient(W, model, pi)
            for k in range(n):
                np.testing.assert_allclose(
                    mean_field_h(W[k], nu, model, pi), -n * g[k], atol=1e-10
                )


class TestNoiseField:
    def test_single_atom_noise_vanishes(self):
        mu = EmpiricalMeasure(np.array([[0.4]]))
        xi = noise_xi(np.array([0.7]), mu, TANH, SINGLE_ATOM, 0)
        np.testing.assert_allclose(xi, 0.0, atol=1e-16)
        sig = covariance_sigma(np.array([0.7]), mu, TANH, SINGLE_ATOM)
        np.testing.assert_allclose(sig, 0.0, atol=1e-16)

    def test_symmetric_two_atom_hand_values(self):
        mu = EmpiricalMeasure(np.zeros((1, 1)))
        w = np.array([0.0])
        np.testing.assert_allclose(noise_xi(w, mu, TANH, SYMMETRIC, 0), [1.0], atol=1e-15)
        np.testing.assert_allclose(noise_xi(w, mu, TANH, SYMMETRIC, 1), [-1.0], atol=1e-15)
        sig = covariance_sigma(w, mu, TANH, SYMMETRIC)
        np.testing.assert_allclose(sig, [[1.0]], atol=1e-15)
        np.testing.assert_allclose(sqrt_psd(sig), [[1.0]], atol=1e-15)

    def test_noise_has_zero_mean_everywhere(self):
        rng = np.random.default_rng(4)
        model, pi = random_problem(rng, loss="logistic")
        for _ in range(50):
            w = rng.standard_normal(2)
            mu = EmpiricalMeasure(rng.standard_normal((rng.integers(1, 9), 2)))
            xis = np.stack([noise_xi(w, mu, model, pi, j) for j in range(len(pi))])
            assert np.linalg.norm(pi.weights @ xis) <= 1e-10

    def test_xi_uses_penalty_free_drift(self):
        # adding a penalty shifts h but not xi
        rng = np.random.default_rng(5)
        m0, pi = random_problem(rng, penalty=0.0)
        m1 = ModelSpec(feature=m0.feature, loss=m0.loss,
                       penalty=make_model("tanh-dot", "square", 2.0).penalty, p=2)
        w = rng.standard_normal(2)
        mu = EmpiricalMeasure(rng.standard_normal((4, 2)))
        np.testing.assert_allclose(
            noise_xi(w, mu, m0, pi, 1), noise_xi(w, mu, m1, pi, 1), atol=1e-14
        )
        np.testing.assert_allclose(
            tilde_h(w, mu, m0, pi), tilde_h(w, mu, m1, pi), atol=1e-14
        )


class TestSqrtPsd:
    def test_diagonal(self):
        np.testing.assert_allclose(sqrt_psd(np.diag([4.0, 9.0])), np.diag([2.0, 3.0]), atol=1e-12)

    def test_random_psd_roots(self):
        rng = np.random.default_rng(6)
        for _ in range(50):
            A = rng.standard_normal((3, 3))
            sig = A @ A.T
            S = sqrt_psd(sig)
            np.testing.assert_allclose(S, S.T, atol=1e-12)
            assert np.linalg.eigvalsh(S).min() >= -1e-12
            assert np.linalg.norm(S @ S - sig) <= 1e-8 * max(1.0, np.linalg.norm(sig))

    def test_near_singular_clamped(self):
        sig = np.array([[1.0, 1.0], [1.0, 1.0]])  # rank one
        S = sqrt_psd(sig)
        np.testing.assert_allclose(S @ S, sig, atol=1e-12)

    def test_asymmetric_rejected(self):
        with pytest.raises(ValueError):
            sqrt_psd(np.array([[1.0, 0.5], [0.0, 1.0]]))

    def test_indefinite_rejected(self):
        with pytest.raises(ValueError):
            sqrt_psd(np.diag([1.0, -1e-6]))

    def test_batch_matches_single(self):
        rng = np.random.default_rng(7)
        sigs = np.stack([a @ a.T for a in rng.standard_normal((5, 2, 2))])
        batch = sqrt_psd_batch(sigs)
        for i in range(5):
            np.testing.assert_allclose(batch[i], sqrt_psd(sigs[i]), atol=1e-12)


class TestBoundedness:
    """Explicit envelope bounds on the drift, covariance trace, and noise."""

    def sample(self, rng, model, pi):
        w = rng.standard_normal(model.p) * rng.uniform(0.2, 3)
        mu = EmpiricalMeasure(rng.standard_normal((rng.integers(1, 8), model.p)))
        return w, mu

    def test_tilde_h_bound(self):
        rng = np.random.default_rng(8)
        model, pi = random_problem(rng)
        bound = 2 * sum(w * model.psi(a.y) * model.phi(a.x) ** 2
                        for w, a in zip(pi.weights, pi.atoms))
        for _ in range(100):
            w, mu = self.sample(rng, model, pi)
            assert np.linalg.norm(tilde_h(w, mu, model, pi)) <= bound * (1 + 1e-12)

    def test_trace_bound_and_noise_second_moment(self):
        rng = np.random.default_rng(9)
        model, pi = random_problem(rng)
        l2 = 2 * sum(w * model.psi(a.y) * model.phi(a.x) ** 2
                     for w, a in zip(pi.weights, pi.atoms))
        tr_bound = 2 * sum(w * (l2**2 + 2 * model.psi(a.y) ** 2 * model.phi(a.x) ** 4)
                           for w, a in zip(pi.weights, pi.atoms))
        L = max(l2, math.sqrt(tr_bound))
        p = model.p
        for _ in range(100):
            w, mu = self.sample(rng, model, pi)
            sig = covariance_sigma(w, mu, model, pi)
            assert np.trace(sig) <= tr_bound * (1 + 1e-12)
            xi_sq = sum(wt * np.sum(noise_xi(w, mu, model, pi, j) ** 2)
                        for j, wt in enumerate(pi.weights))
            assert xi_sq <= p**2 * L**2 * (1 + 1e-12)

    def test_lipschitz_ratio_calibrated(self):
        # ratio of drift differences to the coupled distance never strays
        # beyond 3x the max observed on an independent calibration sample;
        # both samples mix near pairs (local quotients dominate the sup)
        # and far pairs, on one shared problem
        model, pi = random_problem(np.random.default_rng(10))

        def mu_g(mu):
            return np.array([
                sum(m * g_envelope(loc, model, a) for loc, m in zip(mu.locations, mu.weights))
                for a in pi.atoms
            ])

        def max_ratio(rng, n):
            out = 0.0
            for _ in range(n):
                w1 = rng.standard_normal(2) * rng.uniform(0.2, 3)
                mu1 = EmpiricalMeasure(rng.standard_normal((int(rng.integers(1, 8)), 2)))
                if rng.random() < 0.5:
                    w2 = w1 + rng.standard_normal(2) * 0.02
                    mu2 = EmpiricalMeasure(
                        mu1.locations + rng.standard_normal(mu1.locations.shape) * 0.02
                    )
                else:
                    w2 = rng.standard_normal(2) * rng.uniform(0.2, 3)
                    mu2 = EmpiricalMeasure(rng.standard_normal((int(rng.integers(1, 8)), 2)))
                num = np.linalg.norm(
                    mean_field_h(w1, mu1, model, pi) - mean_field_h(w2, mu2, model, pi)
                )
                den = np.linalg.norm(w1 - w2) + math.sqrt(
                    float(pi.weights @ (mu_g(mu1) - mu_g(mu2)) ** 2)
                )
                if den > 1e-9:
                    out = max(out, num / den)
            return out

        calibration = max_ratio(np.random.default_rng(71), 300)
        assert max_ratio(np.random.default_rng(72), 150) <= 3.0 * calibration


class TestGEnvelope:
    def test_zero_feature(self):
        model = make_model("zero", "square")
        atom = DataAtom([2.0], 1.5, 1.0)
        assert g_envelope(np.array([3.0]), model, atom) == 0.0

    def test_zero_weight_point(self):
        atom = DataAtom([1.0], 1.0, 1.0)
        assert g_envelope(np.array([0.0]), TANH, atom) == 0.0

    def test_unit_envelope_hand_value(self):
        model = ModelSpec(feature=TanhDotFeature(), loss=SquareLoss(),
                          penalty=ZeroPenalty(), p=1, phi=lambda x: 1.0, psi=lambda y: 1.0)
        atom = DataAtom([1.0], 1.0, 1.0)
        assert g_envelope(np.array([1.0]), model, atom) == pytest.approx(
            2 * math.tanh(1.0), abs=1e-14
        )
