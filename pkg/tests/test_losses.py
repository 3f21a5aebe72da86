import math

import numpy as np
import pytest

from fedmdcg import autograd as ag
from fedmdcg.autograd import Tensor
from fedmdcg.data import LabelCounter
from fedmdcg.losses import (HyperParams, ce_loss, client_share_weights,
                            diversity_loss, distill_from_global_losses,
                            distill_to_generator_losses, generated_sample_ce,
                            generator_update_objective, kl_loss,
                            model_update_objective, mse_latent,
                            server_distillation_losses, soft_ce_loss)
from conftest import make_client, make_generator, random_batch


def logits_for_probs(probs):
    return Tensor(np.log(np.asarray(probs)))


class TestCrossEntropy:
    def test_uniform_logits(self):
        loss = ce_loss(Tensor(np.zeros((1, 10))), np.array([7]))
        assert abs(loss.item() - math.log(10)) < 1e-12

    def test_saturated_true_class(self):
        logits = np.zeros((1, 5))
        logits[0, 2] = 30.0
        loss = ce_loss(Tensor(logits), np.array([2]))
        assert loss.item() < 1e-12

    def test_hand_oracle(self):
        # independent log-sum-exp oracle
        z = [1.0, 2.0, 3.0]
        expected = math.log(sum(math.exp(v) for v in z)) - z[2]
        loss = ce_loss(Tensor(np.array([z])), np.array([2]))
        assert abs(loss.item() - expected) < 1e-12
        assert abs(loss.item() - 0.407606) < 1e-6

    def test_label_out_of_range(self):
        with pytest.raises(ValueError):
            ce_loss(Tensor(np.zeros((1, 3))), np.array([3]))

    def test_soft_ce_matches_hard_on_onehot(self):
        rng = np.random.default_rng(0)
        logits = Tensor(rng.normal(size=(6, 4)))
        labels = rng.integers(0, 4, 6)
        hard = ce_loss(logits, labels)
        soft = soft_ce_loss(logits, ag.one_hot(labels, 4))
        assert abs(hard.item() - soft.item()) < 1e-12


class TestKl:
    def test_identical_logits_zero(self):
        logits = Tensor(np.random.default_rng(1).normal(size=(4, 6)))
        assert kl_loss(logits, logits).item() == 0.0

    def test_nonnegative_gibbs(self):
        rng = np.random.default_rng(2)
        for _ in range(1000):
            p = Tensor(rng.normal(scale=3, size=(1, 5)))
            q = Tensor(rng.normal(scale=3, size=(1, 5)))
            assert kl_loss(p, q).item() >= 0.0

    def test_closed_form_oracle(self):
        p = logits_for_probs([[0.75, 0.25]])
        q = logits_for_probs([[0.5, 0.5]])
        expected = 0.75 * math.log(0.75 / 0.5) + 0.25 * math.log(0.25 / 0.5)
        got = kl_loss(p, q).item()
        assert abs(got - expected) < 1e-12
        assert abs(got - 0.130812) < 1e-6


class TestMseLatent:
    def test_equal_inputs_zero(self):
        a = Tensor(np.random.default_rng(3).normal(size=(4, 7)))
        assert mse_latent(a, a).item() == 0.0

    def test_against_zero_is_mean_row_norm(self):
        rng = np.random.default_rng(4)
        a = rng.normal(size=(5, 6))
        loss = mse_latent(Tensor(a), Tensor(np.zeros_like(a)))
        assert abs(loss.item() - (a ** 2).sum(axis=1).mean()) < 1e-12

    def test_hand_example(self):
        loss = mse_latent(Tensor([[1.0, 2.0]]), Tensor([[0.0, 0.0]]))
        assert loss.item() == 5.0


class TestDiversity:
    def setup_method(self):
        self.z = Tensor(np.array([[0.0], [1.0]]))
        self.f = Tensor(np.array([[0.0], [2.0]]))
        self.same = Tensor(np.array([[1.0, 0.0], [1.0, 0.0]]))
        self.diff = Tensor(np.array([[1.0, 0.0], [0.0, 1.0]]))

    def test_batch_one_is_one(self):
        for variant in (0, 1, 2):
            loss = diversity_loss(variant, self.z[0:1], self.same[0:1, :],
                                  self.f[0:1])
            assert loss.item() == 1.0

    def test_variant0_hand_example(self):
        assert abs(diversity_loss(0, self.z, self.same, self.f).item()
                   - math.exp(-1.0)) < 1e-9

    def test_variant2_equals_variant0_on_same_labels(self):
        a = diversity_loss(0, self.z, self.same, self.f).item()
        b = diversity_loss(2, self.z, self.same, self.f).item()
        assert abs(a - b) < 1e-12

    def test_variant2_hand_example_different_labels(self):
        got = diversity_loss(2, self.z, self.diff, self.f).item()
        assert abs(got - math.exp(-math.exp(2.0))) < 1e-9

    def test_variant1_uses_label_concat(self):
        # [z; y] distance for different labels: sqrt(1 + 2)
        got = diversity_loss(1, self.z, self.diff, self.f).item()
        expected = math.exp(-2.0 * 2.0 * math.sqrt(3.0) / 4.0)
        assert abs(got - expected) < 1e-9

    def test_values_in_unit_interval(self):
        rng = np.random.default_rng(5)
        for variant in (0, 1, 2):
            for seed in range(10):
                r = np.random.default_rng(seed)
                z = Tensor(r.normal(size=(5, 3)))
                f = Tensor(r.normal(size=(5, 4)))
                y = ag.one_hot(r.integers(0, 3, 5), 3)
                v = diversity_loss(variant, z, y, f).item()
                assert 0.0 < v <= 1.0

    def test_variant2_label_monotonicity(self):
        # distinct rows, same z/f: switching to different labels lowers it
        same = diversity_loss(2, self.z, self.same, self.f).item()
        diff = diversity_loss(2, self.z, self.diff, self.f).item()
        assert diff < same

    def test_empty_batch_rejected(self):
        with pytest.raises(ValueError):
            diversity_loss(0, Tensor(np.zeros((0, 2))),
                           Tensor(np.zeros((0, 2))), Tensor(np.zeros((0, 2))))

    def test_unknown_variant_rejected(self):
        with pytest.raises(ValueError):
            diversity_loss(3, self.z, self.same, self.f)


def constant_output_client(spec, value):
    """Client whose extractor emits a constant latent row regardless of x."""
    model = make_client(spec)
    for comp in (model.extractor,):
        for k in comp.keys():
            comp[k].data[...] = 0.0
    model.extractor["fc2.bias"].data[...] = value
    return model


def constant_output_generator(spec, value):
    gen = make_generator(spec)
    gen["fc3.weight"].data[...] = 0.0
    gen["fc3.bias"].data[...] = value
    return gen


class TestModelUpdateLosses:
    def test_matching_generator_gives_zero_distill(self, tiny_spec):
        model = constant_output_client(tiny_spec, 0.7)
        gen = constant_output_generator(tiny_spec, 0.7)
        x, y, z = random_batch(tiny_spec, 5)
        l_ce, l_mse, l_kl = distill_from_global_losses(tiny_spec, model, gen, x, y, z)
        assert l_mse.item() == 0.0
        assert l_kl.item() == 0.0
        assert np.isfinite(l_ce.item())

    def test_global_generator_stays_frozen(self, tiny_spec):
        model = make_client(tiny_spec)
        gen = make_generator(tiny_spec)
        x, y, z = random_batch(tiny_spec, 5)
        l_ce, l_mse, l_kl = distill_from_global_losses(tiny_spec, model, gen, x, y, z)
        total = model_update_objective(l_ce, None, l_mse, l_kl, 0.0, 1.0, 1.0)
        total.backward()
        assert all(gen[k].grad is None for k in gen.keys())
        assert all(model.extractor[k].grad is not None
                   for k in model.extractor.keys())

    def test_detach_teacher_branch_blocks_second_path(self, tiny_spec):
        model = make_client(tiny_spec)
        gen = make_generator(tiny_spec)
        x, y, z = random_batch(tiny_spec, 5)
        _, _, l_kl = distill_from_global_losses(tiny_spec, model, gen, x, y, z,
                                                detach_teacher=True)
        l_kl.backward()
        ga = {k: model.classifier[k].grad.data.copy()
              for k in model.classifier.keys()}
        model.classifier.zero_grad()
        model.extractor.zero_grad()
        _, _, l_kl2 = distill_from_global_losses(tiny_spec, model, gen, x, y, z,
                                                 detach_teacher=False)
        l_kl2.backward()
        gb = {k: model.classifier[k].grad.data for k in model.classifier.keys()}
        assert any(not np.allclose(ga[k], gb[k]) for k in ga)

    def test_objective_reduces_to_plain_ce(self, tiny_spec):
        model = make_client(tiny_spec)
        x, y, _ = random_batch(tiny_spec, 5)
        l_ce, l_mse, l_kl = distill_from_global_losses(
            tiny_spec, model, None, x, y, None, need_mse=False, need_kl=False)
        assert l_mse is None and l_kl is None
        total = model_update_objective(l_ce, None, None, None, 0.0, 0.0, 0.0)
        assert total.item() == l_ce.item()

    def test_objective_matches_hand_sum(self, tiny_spec):
        model = make_client(tiny_spec)
        gen = make_generator(tiny_spec)
        x, y, z = random_batch(tiny_spec, 5)
        l_ce, l_mse, l_kl = distill_from_global_losses(tiny_spec, model, gen, x, y, z)
        z2 = Tensor(np.random.default_rng(8).standard_normal((5, tiny_spec.noise_dim)))
        yhat = np.array([0, 1, 2, 0, 1])
        l_gce = generated_sample_ce(tiny_spec, model, gen, z2, yhat)
        total = model_update_objective(l_ce, l_gce, l_mse, l_kl, 0.3, 0.7, 1.1)
        hand = (l_ce.item() + 0.3 * l_gce.item() + 0.7 * l_mse.item()
                + 1.1 * l_kl.item())
        assert abs(total.item() - hand) < 1e-12

    def test_missing_term_with_nonzero_coeff_rejected(self, tiny_spec):
        model = make_client(tiny_spec)
        x, y, _ = random_batch(tiny_spec, 5)
        l_ce, _, _ = distill_from_global_losses(
            tiny_spec, model, None, x, y, None, need_mse=False, need_kl=False)
        with pytest.raises(ValueError):
            model_update_objective(l_ce, None, None, None, 0.5, 0.0, 0.0)


class TestGeneratedSampleCe:
    def test_zero_classifier_gives_log_c(self, tiny_spec):
        model = make_client(tiny_spec)
        for k in model.classifier.keys():
            model.classifier[k].data[...] = 0.0
        gen = make_generator(tiny_spec)
        _, _, z2 = random_batch(tiny_spec, 6)
        loss = generated_sample_ce(tiny_spec, model, gen, z2,
                                   np.array([0, 1, 2, 0, 1, 2]))
        assert abs(loss.item() - math.log(tiny_spec.class_count)) < 1e-12

    def test_extractor_gets_no_gradient(self, tiny_spec):
        model = make_client(tiny_spec)
        gen = make_generator(tiny_spec)
        _, _, z2 = random_batch(tiny_spec, 6)
        loss = generated_sample_ce(tiny_spec, model, gen, z2,
                                   np.array([0, 1, 2, 0, 1, 2]))
        loss.backward()
        assert all(model.extractor[k].grad is None for k in model.extractor.keys())
        assert all(model.classifier[k].grad is not None
                   for k in model.classifier.keys())


class TestGeneratorUpdateLosses:
    def test_matching_output_zero_losses(self, tiny_spec):
        model = constant_output_client(tiny_spec, 0.5)
        gen = constant_output_generator(tiny_spec, 0.5)
        x, y, z = random_batch(tiny_spec, 5)
        l_mse, l_kl, l_ce, _ = distill_to_generator_losses(tiny_spec, model, gen,
                                                           x, y, z)
        assert l_mse.item() == 0.0
        assert l_kl.item() == 0.0
        assert np.isfinite(l_ce.item())

    def test_model_stays_frozen(self, tiny_spec):
        model = make_client(tiny_spec)
        gen = make_generator(tiny_spec)
        x, y, z = random_batch(tiny_spec, 5)
        l_mse, l_kl, l_ce, g_out = distill_to_generator_losses(tiny_spec, model,
                                                               gen, x, y, z)
        l_div = diversity_loss(2, z, ag.one_hot(y, tiny_spec.class_count), g_out)
        total = generator_update_objective(l_kl, l_mse, l_ce, l_div, 1.0, 1.0, 1.0)
        total.backward()
        assert all(model.extractor[k].grad is None for k in model.extractor.keys())
        assert all(model.classifier[k].grad is None for k in model.classifier.keys())
        assert all(gen[k].grad is not None for k in gen.keys())

    def test_objective_reduces_to_kl(self, tiny_spec):
        model = make_client(tiny_spec)
        gen = make_generator(tiny_spec)
        x, y, z = random_batch(tiny_spec, 5)
        l_mse, l_kl, l_ce, _ = distill_to_generator_losses(
            tiny_spec, model, gen, x, y, z, need_mse=False, need_ce=False)
        assert l_mse is None and l_ce is None
        total = generator_update_objective(l_kl, None, None, None, 0.0, 0.0, 0.0)
        assert total.item() == l_kl.item()

    def test_objective_nonnegative_terms(self, tiny_spec):
        model = make_client(tiny_spec)
        gen = make_generator(tiny_spec)
        x, y, z = random_batch(tiny_spec, 5)
        l_mse, l_kl, l_ce, g_out = distill_to_generator_losses(tiny_spec, model,
                                                               gen, x, y, z)
        l_div = diversity_loss(2, z, ag.one_hot(y, tiny_spec.class_count), g_out)
        total = generator_update_objective(l_kl, l_mse, l_ce, l_div, 1.0, 1.0, 1.0)
        assert total.item() >= 0.0
        hand = l_kl.item() + l_mse.item() + l_ce.item() + l_div.item()
        assert abs(total.item() - hand) < 1e-12


class TestServerDistillation:
    def test_share_weights_definition(self):
        counters = [LabelCounter(np.array([3, 5])), LabelCounter(np.array([1, 5]))]
        tau = client_share_weights(counters, np.array([0, 0, 1]))
        assert np.allclose(tau[:, 0], [0.75, 0.25])
        assert np.allclose(tau[:, 2], [0.5, 0.5])
        assert np.allclose(tau.sum(axis=0), 1.0)

    def test_zero_count_class_rejected(self):
        counters = [LabelCounter(np.array([3, 0]))]
        with pytest.raises(ValueError):
            client_share_weights(counters, np.array([1]))

    def _two_clients(self, spec):
        gens = [make_generator(spec, seed=s) for s in (1, 2)]
        clfs = [make_client(spec, seed=s).classifier for s in (3, 4)]
        counters = [LabelCounter(np.array([4, 2, 2])),
                    LabelCounter(np.array([2, 4, 4]))]
        return gens, clfs, counters

    def test_self_distillation_fixed_point(self, tiny_spec):
        gen = make_generator(tiny_spec, seed=5)
        clf = make_client(tiny_spec, seed=6).classifier
        counters = [LabelCounter(np.array([3, 3, 3]))]
        rng = np.random.default_rng(7)
        z = Tensor(rng.standard_normal((6, tiny_spec.noise_dim)))
        yhat = rng.integers(0, 3, 6)
        g_copy, c_copy = gen.copy(), clf.copy()
        l1, l2, l3 = server_distillation_losses(tiny_spec, g_copy, c_copy,
                                                [gen], [clf], counters, z, yhat)
        assert l1.item() == 0.0 and l2.item() == 0.0 and l3.item() == 0.0
        total = l1 + l2 + l3
        total.backward()
        for ps in (g_copy, c_copy):
            for k in ps.keys():
                g = ps[k].grad
                if g is not None:
                    assert np.abs(g.data).max() < 1e-12

    def test_gradients_only_into_global(self, tiny_spec):
        gens, clfs, counters = self._two_clients(tiny_spec)
        global_gen = make_generator(tiny_spec, seed=8)
        global_clf = make_client(tiny_spec, seed=9).classifier
        rng = np.random.default_rng(10)
        z = Tensor(rng.standard_normal((5, tiny_spec.noise_dim)))
        yhat = rng.integers(0, 3, 5)
        l1, l2, l3 = server_distillation_losses(tiny_spec, global_gen, global_clf,
                                                gens, clfs, counters, z, yhat)
        (l1 + l2 + l3).backward()
        assert all(global_gen[k].grad is not None for k in global_gen.keys())
        assert all(global_clf[k].grad is not None for k in global_clf.keys())
        for ps in gens + clfs:
            assert all(ps[k].grad is None for k in ps.keys())

    def test_client_order_invariance(self, tiny_spec):
        gens, clfs, counters = self._two_clients(tiny_spec)
        global_gen = make_generator(tiny_spec, seed=11)
        global_clf = make_client(tiny_spec, seed=12).classifier
        rng = np.random.default_rng(13)
        z = Tensor(rng.standard_normal((5, tiny_spec.noise_dim)))
        yhat = rng.integers(0, 3, 5)
        fwd = server_distillation_losses(tiny_spec, global_gen, global_clf,
                                         gens, clfs, counters, z, yhat)
        rev = server_distillation_losses(tiny_spec, global_gen, global_clf,
                                         gens[::-1], clfs[::-1], counters[::-1],
                                         z, yhat)
        for a, b in zip(fwd, rev):
            assert abs(a.item() - b.item()) < 1e-12

    def test_misaligned_lists_rejected(self, tiny_spec):
        gens, clfs, counters = self._two_clients(tiny_spec)
        with pytest.raises(ValueError):
            server_distillation_losses(tiny_spec, make_generator(tiny_spec),
                                       clfs[0], gens, clfs[:1], counters,
                                       Tensor(np.zeros((2, tiny_spec.noise_dim))),
                                       np.array([0, 1]))


class TestHyperParams:
    def test_defaults(self):
        hp = HyperParams()
        assert hp.lambda1 == hp.lambda6 == 1.0
        assert hp.ramp_exponent == 1.0

    def test_negative_rejected(self):
        with pytest.raises(ValueError):
            HyperParams(lambda2=-0.1)
