"""Prior, posterior and helper heads, the training objective and effect estimation."""
import math

import numpy as np
import pytest

from causalsum import tensor as tn
from causalsum.dataset import Batch
from causalsum.errors import ConfigError, DomainError, ModelError
from causalsum.model import CausalModel, ModelConfig, causal_loss, causal_objective, gate
from causalsum.training import estimate_effect, predict_scores

from helpers import REL_TOL, model_gradient_errors, perturb_params, tiny_batch, tiny_model_config


def _plain_model(seed=0, **kw):
    cfg = dict(d_v=4, n_classes=3, d_z=2, hidden=8)
    cfg.update(kw)
    return CausalModel(ModelConfig(**cfg), seed)


def _batch(rng, n=6, d_v=4, k=3, t=None):
    t = rng.integers(0, 2, size=n) if t is None else np.asarray(t)
    n = len(t)
    return Batch(rng.normal(size=(n, d_v)), t, rng.integers(0, k, size=n))


def _zero_last_layer(mlp, bias):
    mlp.layers[-1].weight.data[...] = 0.0
    mlp.layers[-1].bias.data[...] = bias


def _jitter(module, rng):
    for _, p in module.named_parameters():
        p.data[...] += rng.normal(size=p.shape)


class TestConfig:
    def test_rejects_bad_values(self):
        with pytest.raises(ConfigError):
            ModelConfig(d_v=4, n_classes=1)
        with pytest.raises(ConfigError):
            ModelConfig(d_v=4, n_classes=3, variance_link="softplus")
        with pytest.raises(ConfigError):
            ModelConfig(d_v=4, n_classes=3, kl_mode="exact")

    def test_head_shapes(self):
        m = _plain_model()
        assert m.prior_y_treated.sizes == m.prior_y_control.sizes == (2, 8, 8, 3)
        assert m.prior_t.sizes[-1] == 1 and m.decoder.sizes[-1] == 4
        assert m.helper_t.sizes == (4, 8, 8, 1)
        assert m.enc_mean_treated.sizes[-1] == m.enc_logvar_control.sizes[-1] == 2

    def test_treated_and_control_heads_do_not_share_parameters(self):
        m = _plain_model()
        assert m.prior_y_treated.layers[0].weight is not m.prior_y_control.layers[0].weight
        assert not np.array_equal(m.prior_y_treated.layers[0].weight.data, m.prior_y_control.layers[0].weight.data)


class TestPriorHeads:
    def test_zero_intervention_head_gives_half(self):
        m = _plain_model()
        for layer in m.prior_t.layers:
            layer.weight.data[...] = 0.0
            layer.bias.data[...] = 0.0
        z = np.random.default_rng(0).normal(size=(5, 2))
        np.testing.assert_array_equal(m.prior_intervention(z).p.data, 0.5)

    def test_logit_ln3_gives_three_quarters(self):
        m = _plain_model()
        _zero_last_layer(m.prior_t, math.log(3.0))
        assert m.prior_intervention(np.zeros((1, 2))).p.data[0] == pytest.approx(0.75, abs=1e-15)

    def test_monotone_in_linear_score(self):
        m = _plain_model(hidden_layers=0)
        m.prior_t.layers[0].weight.data[...] = [[1.0], [-2.0]]
        z = np.random.default_rng(1).normal(size=(50, 2))
        p = m.prior_intervention(z).p.data
        order = np.argsort(z @ np.array([1.0, -2.0]))
        assert np.all(np.diff(p[order]) >= 0)

    def test_outcome_gating(self):
        rng = np.random.default_rng(2)
        m = _plain_model()
        z = rng.normal(size=(4, 2))
        treated = m.prior_outcome(z, np.ones(4)).logits.data.copy()
        control = m.prior_outcome(z, np.zeros(4)).logits.data.copy()
        _jitter(m.prior_y_control, rng)
        np.testing.assert_array_equal(m.prior_outcome(z, np.ones(4)).logits.data, treated)
        m2 = _plain_model()
        _jitter(m2.prior_y_treated, rng)
        np.testing.assert_array_equal(m2.prior_outcome(z, np.zeros(4)).logits.data, control)

    def test_outcome_probabilities_normalised(self):
        m = _plain_model()
        p = m.prior_outcome(np.random.default_rng(3).normal(size=(6, 2)), np.array([0, 1] * 3)).probs().data
        np.testing.assert_allclose(p.sum(axis=-1), 1.0, atol=1e-12)

    def test_reconstruction_log_density(self):
        m = _plain_model(d_v=2)
        z = np.zeros((1, 2))
        mean = m.reconstruct(z).mean.data
        from causalsum.distributions import gaussian_log_prob

        at_mean = gaussian_log_prob(mean, m.reconstruct(z)).item()
        assert at_mean == pytest.approx(-math.log(2 * math.pi), abs=1e-12)
        shifted = gaussian_log_prob(mean + [[1.0, 0.0]], m.reconstruct(z)).item()
        assert at_mean - shifted == pytest.approx(0.5, abs=1e-12)
        both = gaussian_log_prob(mean + 1.0, m.reconstruct(z)).item()
        assert both == pytest.approx(-math.log(2 * math.pi) - 1.0, abs=1e-12)


class TestPosterior:
    def test_gating(self):
        rng = np.random.default_rng(4)
        m = _plain_model()
        x, y = rng.normal(size=(3, 4)), rng.integers(0, 3, size=3)
        ones, zeros = np.ones(3), np.zeros(3)
        before1 = m.posterior(x, y, ones)
        before0 = m.posterior(x, y, zeros)
        _jitter(m.enc_mean_control, rng)
        _jitter(m.enc_logvar_control, rng)
        after1 = m.posterior(x, y, ones)
        np.testing.assert_array_equal(after1.mean.data, before1.mean.data)
        np.testing.assert_array_equal(after1.var.data, before1.var.data)
        m2 = _plain_model()
        _jitter(m2.enc_mean_treated, rng)
        _jitter(m2.enc_logvar_treated, rng)
        after0 = m2.posterior(x, y, zeros)
        np.testing.assert_array_equal(after0.mean.data, before0.mean.data)
        np.testing.assert_array_equal(after0.var.data, before0.var.data)

    def test_variance_positive_for_extreme_raw_outputs(self):
        rng = np.random.default_rng(5)
        for link in ("exp", "sigmoid"):
            m = _plain_model(variance_link=link)
            for head in (m.enc_logvar_control, m.enc_logvar_treated):
                _zero_last_layer(head, rng.choice([-1e3, 1e3], size=2))
            var = m.posterior(rng.normal(size=(4, 4)), np.zeros(4, dtype=int), np.array([0, 1, 0, 1])).var.data
            assert np.all(var > 0) and np.all(np.isfinite(var))

    def test_sigmoid_link_bounds_variance(self):
        m = _plain_model(variance_link="sigmoid")
        var = m.posterior(np.random.default_rng(6).normal(size=(8, 4)), np.zeros(8, dtype=int), np.ones(8)).var.data
        assert np.all((var > 0) & (var < 1))

    def test_invalid_class(self):
        with pytest.raises(IndexError):
            _plain_model().posterior(np.zeros((1, 4)), np.array([3]), np.ones(1))

    def test_soft_outcome_input(self):
        m = _plain_model()
        x = np.random.default_rng(7).normal(size=(2, 4))
        hard = m.posterior(x, np.array([1, 2]), np.ones(2)).mean.data
        soft = m.posterior(x, np.eye(3)[[1, 2]], np.ones(2)).mean.data
        np.testing.assert_array_equal(hard, soft)


class TestHelperHeads:
    def test_zero_intervention_helper(self):
        m = _plain_model()
        _zero_last_layer(m.helper_t, 0.0)
        np.testing.assert_array_equal(m.helper_intervention(np.ones((3, 4))).p.data, 0.5)

    def test_outcome_gating(self):
        rng = np.random.default_rng(8)
        m = _plain_model()
        x = rng.normal(size=(3, 4))
        ref = m.helper_outcome(x, np.ones(3)).logits.data.copy()
        _jitter(m.helper_y_control, rng)
        np.testing.assert_array_equal(m.helper_outcome(x, np.ones(3)).logits.data, ref)

    def test_uniform_logits(self):
        from causalsum.distributions import categorical_log_prob

        m = _plain_model(n_classes=4)
        _zero_last_layer(m.helper_y_treated, 0.0)
        for y in range(4):
            lp = categorical_log_prob(np.array([y]), m.helper_outcome(np.ones((1, 4)), np.ones(1))).item()
            assert lp == pytest.approx(-math.log(4))


class TestObjective:
    def test_breakdown_identity(self):
        rng = np.random.default_rng(9)
        m = _plain_model()
        b = _batch(rng)
        parts = causal_loss(b, m, rng.standard_normal((6, 2)))
        expected = -(parts.helper_t + parts.helper_y + parts.recon_x + parts.likelihood_t + parts.likelihood_y - parts.kl_z)
        assert parts.total == pytest.approx(expected, rel=1e-12)
        assert parts.kl_z >= 0 and parts.batch_size == 6

    def test_saturated_helpers_contribute_nothing(self):
        rng = np.random.default_rng(10)
        m = _plain_model()
        b = _batch(rng, t=[1, 1, 1, 1, 1, 1])
        b.y[:] = 2
        _zero_last_layer(m.helper_t, 100.0)
        _zero_last_layer(m.helper_y_treated, [0.0, 0.0, 100.0])
        parts = causal_loss(b, m, rng.standard_normal((6, 2)))
        assert abs(parts.helper_t + parts.helper_y) < 1e-6

    def test_prior_posterior_has_zero_kl(self):
        m = _plain_model()
        for head in (m.enc_mean_control, m.enc_mean_treated, m.enc_logvar_control, m.enc_logvar_treated):
            _zero_last_layer(head, 0.0)
        parts = causal_loss(_batch(np.random.default_rng(11)), m, np.zeros((6, 2)))
        assert parts.kl_z == 0.0

    def test_permutation_invariance(self):
        rng = np.random.default_rng(12)
        for multimodal in (False, True):
            cfg = tiny_model_config(multimodal=multimodal)
            m = CausalModel(cfg, 3)
            b = tiny_batch(rng, n=7)
            eps = rng.standard_normal((7, 2))
            perm = rng.permutation(7)
            pb = Batch(b.x[perm], b.t[perm], b.y[perm], b.tokens[perm], b.lengths[perm])
            a = causal_loss(b, m, eps)
            c = causal_loss(pb, m, eps[perm])
            for name in ("total", "helper_t", "helper_y", "recon_x", "likelihood_t", "likelihood_y", "kl_z"):
                assert getattr(a, name) == pytest.approx(getattr(c, name), rel=1e-12, abs=1e-12)

    def test_empty_batch(self):
        with pytest.raises(DomainError):
            causal_loss(Batch(np.zeros((0, 4)), np.zeros(0, int), np.zeros(0, int)), _plain_model(), np.zeros((0, 2)))

    def test_noise_shape(self):
        with pytest.raises(DomainError):
            causal_loss(_batch(np.random.default_rng(13)), _plain_model(), np.zeros((6, 3)))

    def test_gating_exactness_of_gradients(self):
        rng = np.random.default_rng(14)
        m = _plain_model()
        for t_val, silent in ((1, "control"), (0, "treated")):
            b = _batch(rng, t=[t_val] * 5)
            m.zero_grad()
            causal_objective(m, b, rng.standard_normal((5, 2)))[0].backward()
            heads = [f"prior_y_{silent}", f"enc_mean_{silent}", f"enc_logvar_{silent}", f"helper_y_{silent}"]
            for name, p in m.named_parameters():
                if name.split(".")[0] in heads:
                    assert p.grad is None or np.all(p.grad == 0.0), name

    def test_analytic_kl_matches_single_sample_mc_in_expectation(self):
        rng = np.random.default_rng(15)
        m = _plain_model()
        perturb_params(m, rng)
        b = _batch(rng, n=4)
        n = 10_000
        diff = np.empty(n)
        for i in range(n):
            eps = rng.standard_normal((4, 2))
            diff[i] = causal_loss(b, m, eps, kl_mode="mc").total - causal_loss(b, m, eps, kl_mode="analytic").total
        # paired draws: only the KL estimator differs between the two totals
        se = diff.std(ddof=1) / math.sqrt(n)
        assert abs(diff.mean()) < 3 * se


class TestModelGradients:
    def test_default_config_matches_finite_differences(self):
        result = model_gradient_errors(tiny_model_config(), draws=20, per_element_draws=1)
        worst = max(result["errors"].values())
        assert worst < REL_TOL, sorted(result["errors"].items(), key=lambda kv: -kv[1])[:3]

    def test_joint_helper_gradients_match_finite_differences(self):
        result = model_gradient_errors(tiny_model_config(helper_stop_gradient=False), draws=20, seed=1)
        assert max(result["errors"].values()) < REL_TOL

    def test_stop_gradient_keeps_helper_loss_out_of_extractor(self):
        rng = np.random.default_rng(16)
        m = CausalModel(tiny_model_config(), 0)
        b = tiny_batch(rng)
        from causalsum.distributions import bernoulli_log_prob

        m.zero_grad()
        helper = bernoulli_log_prob(b.t, m.helper_intervention(m.features(b).detach()))
        tn.sum_(helper).backward()
        assert all(p.grad is None for n, p in m.named_parameters() if n.startswith("extractor."))

    def test_plain_model_gradients(self):
        result = model_gradient_errors(tiny_model_config(multimodal=False), draws=20, seed=2)
        assert max(result["errors"].values()) < REL_TOL


class TestEffectEstimate:
    def test_identical_outcome_heads_give_zero(self):
        rng = np.random.default_rng(17)
        m = _plain_model()
        m.prior_y_control.load_state_dict(m.prior_y_treated.state_dict())
        assert estimate_effect(m, _batch(rng, n=20), n_samples=5) == 0.0

    def test_constant_heads_give_known_effect(self):
        m = _plain_model(n_classes=2)
        _zero_last_layer(m.prior_y_treated, [0.0, math.log(9.0)])
        _zero_last_layer(m.prior_y_control, [0.0, math.log(0.4 / 0.6)])
        effect = estimate_effect(m, _batch(np.random.default_rng(18), n=10, k=2), n_samples=3)
        assert effect == pytest.approx(0.5, abs=1e-12)

    def test_non_finite_parameters(self):
        m = _plain_model()
        m.decoder.layers[0].bias.data[0] = np.nan
        b = _batch(np.random.default_rng(19))
        with pytest.raises(ModelError):
            estimate_effect(m, b)
        with pytest.raises(ModelError):
            predict_scores(m, b)

    def test_needs_a_sample(self):
        with pytest.raises(ConfigError):
            estimate_effect(_plain_model(), _batch(np.random.default_rng(20)), n_samples=0)

    def test_scores_are_expected_class_indices(self):
        m = _plain_model()
        s = predict_scores(m, _batch(np.random.default_rng(21), n=9))
        assert s.shape == (9,) and np.all((s >= 0) & (s <= 2))

    def test_multimodal_needs_query(self):
        m = CausalModel(tiny_model_config(), 0)
        with pytest.raises(DomainError):
            predict_scores(m, Batch(np.zeros((2, 4)), np.zeros(2, int), np.zeros(2, int)))


def test_gate_broadcasts_over_last_axis():
    out = gate(np.array([1, 0]), tn.tensor(np.ones((2, 3))), tn.tensor(np.zeros((2, 3))))
    np.testing.assert_array_equal(out.data, [[1, 1, 1], [0, 0, 0]])
