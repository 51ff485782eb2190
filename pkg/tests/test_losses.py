"""Objectives: perceptual distances, cross entropy, combination, baseline."""

import numpy as np
import pytest

from conftest import check_gradients
from nvl import losses as L
from nvl import tensor as T
from nvl.dsp import Spectrogram
from nvl.models import TapSet
from nvl.tensor import Tensor


def random_taps(rng, requires_grad=False):
    shapes = [(9, 8), (7, 8), (5, 8), (5, 8), (5, 8), (1, 6)]
    return TapSet([Tensor(rng.standard_normal(s), requires_grad=requires_grad)
                   for s in shapes])


class TestPerceptualModified:
    def test_identical_taps_give_zero(self):
        rng = np.random.default_rng(0)
        taps = random_taps(rng)
        same = TapSet([Tensor(t.data.copy()) for t in taps])
        assert L.perceptual_modified(taps, same).item() == 0.0

    def test_single_layer_difference_is_its_norm(self):
        rng = np.random.default_rng(1)
        a = random_taps(rng)
        b = TapSet([Tensor(t.data.copy()) for t in a])
        delta = rng.standard_normal(b.activations[3].shape)
        delta *= 2.5 / np.linalg.norm(delta)
        b.activations[3] = Tensor(a.activations[3].data + delta)
        assert abs(L.perceptual_modified(a, b).item() - 2.5) < 1e-12

    def test_matches_direct_recomputation(self):
        rng = np.random.default_rng(2)
        a, b = random_taps(rng), random_taps(rng)
        value = L.perceptual_modified(a, b).item()
        oracle = sum(np.sqrt(np.sum((x.data - y.data) ** 2)) for x, y in zip(a, b))
        assert abs(value - oracle) < 1e-12

    def test_symmetry(self):
        rng = np.random.default_rng(3)
        a, b = random_taps(rng), random_taps(rng)
        assert L.perceptual_modified(a, b).item() == L.perceptual_modified(b, a).item()

    def test_nonnegative_and_zero_iff_equal(self):
        rng = np.random.default_rng(4)
        a, b = random_taps(rng), random_taps(rng)
        assert L.perceptual_modified(a, b).item() > 0.0

    def test_shape_mismatch_names_layer(self):
        rng = np.random.default_rng(5)
        a, b = random_taps(rng), random_taps(rng)
        b.activations[2] = Tensor(rng.standard_normal((4, 8)))
        with pytest.raises(ValueError, match="layer 2"):
            L.perceptual_modified(a, b)

    def test_gradients_flow_into_both_branches(self):
        rng = np.random.default_rng(6)
        a = random_taps(rng, requires_grad=True)
        b = random_taps(rng, requires_grad=True)
        L.perceptual_modified(a, b).backward()
        for t in list(a) + list(b):
            assert t.grad is not None and np.any(t.grad != 0.0)

    def test_layer_scaling_divides_by_sqrt_size(self):
        rng = np.random.default_rng(7)
        a, b = random_taps(rng), random_taps(rng)
        scaled = L.perceptual_modified(a, b, layer_scaling=True).item()
        oracle = sum(np.sqrt(np.sum((x.data - y.data) ** 2)) / np.sqrt(x.data.size)
                     for x, y in zip(a, b))
        assert abs(scaled - oracle) < 1e-12


class TestPerceptualOriginal:
    def test_clean_branch_carries_no_gradient(self):
        rng = np.random.default_rng(8)
        noisy = random_taps(rng, requires_grad=True)
        clean = random_taps(rng, requires_grad=True)
        L.perceptual_original(noisy, clean).backward()
        for t in noisy:
            assert t.grad is not None
        for t in clean:
            assert t.grad is None

    def test_matches_modified_on_identical_pairs(self):
        rng = np.random.default_rng(9)
        a, b = random_taps(rng), random_taps(rng)
        assert (L.perceptual_original(a, b).item()
                == L.perceptual_modified(a, b).item())

    def test_identical_inputs_zero(self):
        rng = np.random.default_rng(10)
        a = random_taps(rng)
        same = TapSet([Tensor(t.data.copy()) for t in a])
        assert L.perceptual_original(a, same).item() == 0.0


class TestCrossEntropy:
    def test_uniform_logits_give_log_n(self):
        logits = Tensor(np.zeros((1, 10)))
        assert abs(L.cross_entropy(logits, 3).item() - np.log(10.0)) < 1e-12

    def test_huge_logit_is_stable(self):
        loss = L.cross_entropy(Tensor([[1000.0, 0.0]]), 0).item()
        assert 0.0 <= loss < 1e-10

    def test_gradient_is_softmax_minus_onehot(self):
        rng = np.random.default_rng(11)
        raw = rng.standard_normal((1, 7))
        logits = Tensor(raw, requires_grad=True)
        L.cross_entropy(logits, 4).backward()
        ex = np.exp(raw[0] - raw[0].max())
        softmax = ex / ex.sum()
        onehot = np.eye(7)[4]
        np.testing.assert_allclose(logits.grad[0], softmax - onehot, atol=1e-12)

    def test_out_of_range_label_rejected(self):
        with pytest.raises(ValueError):
            L.cross_entropy(Tensor(np.zeros((1, 5))), 5)

    def test_gradcheck(self):
        rng = np.random.default_rng(12)
        logits = Tensor(rng.standard_normal((1, 6)), requires_grad=True)
        check_gradients(lambda: L.cross_entropy(logits, 2), [logits], tol=1e-6)


class TestCombined:
    def test_half_lambda_hand_arithmetic(self):
        assert L.combined(2.0, 4.0, 0.5) == 3.0

    def test_endpoints(self):
        assert L.combined(2.0, 4.0, 0.0) == 4.0
        assert L.combined(2.0, 4.0, 1.0) == 2.0

    def test_lambda_out_of_range_rejected(self):
        with pytest.raises(ValueError):
            L.combined(1.0, 1.0, 1.5)
        with pytest.raises(ValueError):
            L.combined(1.0, 1.0, -0.1)

    def test_tensor_operands_stay_differentiable(self):
        p = Tensor(2.0, requires_grad=True)
        c = Tensor(4.0, requires_grad=True)
        out = L.combined(p, c, 0.25)
        assert abs(out.item() - (0.25 * 2.0 + 0.75 * 4.0)) < 1e-12
        out.backward()
        assert abs(float(p.grad) - 0.25) < 1e-12
        assert abs(float(c.grad) - 0.75) < 1e-12

    def test_affine_monotone_between_endpoints(self):
        pcptl, ce = 5.0, 1.0
        values = [L.combined(pcptl, ce, lam) for lam in np.linspace(0, 1, 11)]
        assert all(b >= a for a, b in zip(values, values[1:]))  # pcptl > ce here

    def test_loss_value_components_recombine(self):
        lam = 0.5
        comps = {"pcptl": 2.0, "ce_noisy": 1.0, "ce_clean": 3.0}
        ce = 0.5 * (comps["ce_noisy"] + comps["ce_clean"])
        total = L.combined(comps["pcptl"], ce, lam)
        lv = L.LossValue(total, comps)
        recombined = lam * lv.components["pcptl"] + (1 - lam) * 0.5 * (
            lv.components["ce_noisy"] + lv.components["ce_clean"])
        assert abs(lv.total - recombined) < 1e-12


class TestEuclideanBaseline:
    def test_identical_inputs_zero(self):
        rng = np.random.default_rng(13)
        s = Spectrogram(rng.standard_normal((6, 30)))
        assert L.euclidean_baseline(s, s).item() == 0.0

    def test_all_ones_difference_on_2x2(self):
        a = Tensor(np.zeros((2, 2)))
        b = Tensor(np.ones((2, 2)))
        assert L.euclidean_baseline(a, b).item() == 2.0

    def test_matches_elementwise_recomputation(self):
        rng = np.random.default_rng(14)
        a = rng.standard_normal((5, 30))
        b = rng.standard_normal((5, 30))
        value = L.euclidean_baseline(Spectrogram(a), Spectrogram(b)).item()
        assert abs(value - np.sqrt(np.sum((a - b) ** 2))) < 1e-12

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ValueError):
            L.euclidean_baseline(Tensor(np.zeros((2, 3))), Tensor(np.zeros((3, 2))))
