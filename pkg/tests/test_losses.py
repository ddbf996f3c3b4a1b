import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from gazeprompt import autodiff as ad
from gazeprompt.autodiff import DimensionError, Tensor
from gazeprompt.losses import l1_gaze_loss, personalization_loss, symmetry_loss

from conftest import micro_net, param_fn

preds = arrays(np.float64, st.tuples(st.integers(1, 6), st.just(2)), elements=st.floats(-2, 2))


def t(a):
    return Tensor(np.asarray(a, dtype=np.float64), dtype=np.float64)


class TestL1:
    def test_equal_is_zero(self):
        assert l1_gaze_loss(t([[0.3, -0.1]]), t([[0.3, -0.1]])).item() == 0.0

    def test_hand_example(self):
        assert l1_gaze_loss(t([[0.2, 0.1]]), t([[0.0, 0.0]])).item() == pytest.approx(0.15, abs=1e-15)

    @given(preds)
    @settings(max_examples=40, deadline=None)
    def test_homogeneous(self, p):
        zero = t(np.zeros_like(p))
        assert l1_gaze_loss(t(2 * p), zero).item() == pytest.approx(2 * l1_gaze_loss(t(p), zero).item())

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            l1_gaze_loss(t(np.zeros((2, 2))), t(np.zeros((3, 2))))


class TestSymmetry:
    def test_equivariant_pair_is_zero(self):
        assert symmetry_loss(t([[0.3, 0.2]]), t([[0.3, -0.2]])).item() == 0.0

    def test_hand_example(self):
        # 0.5 * (|0.1 - 0.1| + |0.2 - (-0.1)|)
        assert symmetry_loss(t([[0.1, 0.2]]), t([[0.1, 0.1]])).item() == pytest.approx(0.15, abs=1e-15)

    def test_batch_mean(self):
        a, b = t([[0.1, 0.2], [0.0, 0.0]]), t([[0.1, 0.1], [0.0, 0.0]])
        assert symmetry_loss(a, b).item() == pytest.approx(0.075)

    @given(preds, st.data())
    @settings(max_examples=60, deadline=None)
    def test_swap_invariant_and_nonnegative(self, p, data):
        q = data.draw(arrays(np.float64, p.shape, elements=st.floats(-2, 2)))
        ab, ba = symmetry_loss(t(p), t(q)).item(), symmetry_loss(t(q), t(p)).item()
        assert ab >= 0
        assert ab == pytest.approx(ba, abs=1e-12)

    @given(preds)
    @settings(max_examples=40, deadline=None)
    def test_zero_iff_equivariant(self, p):
        mirrored = p * np.array([1.0, -1.0])
        assert symmetry_loss(t(p), t(mirrored)).item() == 0.0
        shifted = mirrored + np.array([0.0, 0.5])
        assert symmetry_loss(t(p), t(shifted)).item() > 0


class TestPersonalizationLoss:
    def test_constant_zero_output(self):
        fwd = lambda x: t(np.zeros((x.shape[0], 2)))  # noqa: E731
        assert personalization_loss(fwd, t(np.ones((3, 1, 4, 4)))).item() == 0.0

    @pytest.mark.parametrize("c", [0.7, -0.25, 1e-3])
    def test_constant_yaw_gives_abs_c(self, c):
        fwd = lambda x: t(np.tile([0.0, c], (x.shape[0], 1)))  # noqa: E731
        assert personalization_loss(fwd, t(np.ones((4, 1, 4, 4)))).item() == pytest.approx(abs(c), abs=1e-15)

    def test_flip_input_invariance(self, f64):
        model = micro_net(2)
        x = t(np.random.default_rng(2).random((3, 1, 6, 6)))
        a = personalization_loss(model.forward, x).item()
        b = personalization_loss(model.forward, ad.flip_horizontal(x)).item()
        assert a == pytest.approx(b, abs=1e-12)

    @pytest.mark.parametrize("seed", range(4))
    def test_prompt_gradient_matches_fd(self, f64, seed):
        model = micro_net(seed)
        x = t(np.random.default_rng(seed).random((3, 1, 6, 6)))
        for name in model.prompt_names():
            fn = param_fn(model, name, lambda fwd: personalization_loss(fwd, x))
            assert ad.grad_check(fn, model.named_tensors()[name].data) < 1e-5
