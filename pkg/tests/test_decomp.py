import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from tscondense.decomp import DEFAULT_KERNEL, effective_kernel, frequency_matching_loss, series_decompose
from tscondense.model import init_params, tsfe_forward
from tscondense.numerics import ContractError, finite_difference_errors


class TestDecompose:
    def test_constant_has_zero_seasonality(self):
        h = torch.full((2, 9, 4), 3.7)
        pair = series_decompose(h, 5)
        assert torch.all(pair.seasonality == 0)

    def test_reconstruction_is_bit_exact(self):
        h = torch.randn(3, 2, 12, 8)
        r = series_decompose(h, 25).reconstruct()
        assert torch.equal(r.to(h.dtype), h)
        assert torch.equal(r, h.double())

    def test_linear_ramp_interior(self):
        h = (torch.arange(11.0) * 0.5 + 2)[:, None]  # [P=11, d=1]
        pair = series_decompose(h, 5)
        np.testing.assert_allclose(pair.trend[2:-2, 0].numpy(), h[2:-2, 0].numpy(), rtol=0, atol=1e-6)

    def test_even_kernel(self):
        with pytest.raises(ContractError):
            series_decompose(torch.randn(4, 2), 4)

    def test_effective_kernel(self):
        assert effective_kernel(DEFAULT_KERNEL, 12) == 23
        assert effective_kernel(25, 100) == 25
        assert effective_kernel(25, 1) == 1
        assert effective_kernel(4, 10) == 3

    @settings(max_examples=50, deadline=None)
    @given(seed=st.integers(0, 10_000), a=st.floats(-3, 3), b=st.floats(-3, 3), k=st.sampled_from([1, 3, 5, 25]))
    def test_linear(self, seed, a, b, k):
        g = torch.Generator().manual_seed(seed)
        x, y = torch.randn(2, 7, 3, generator=g).double(), torch.randn(2, 7, 3, generator=g).double()
        whole = series_decompose(a * x + b * y, k)
        px, py = series_decompose(x, k), series_decompose(y, k)
        assert torch.allclose(whole.trend, a * px.trend + b * py.trend, atol=1e-6)
        assert torch.allclose(whole.seasonality, a * px.seasonality + b * py.seasonality, atol=1e-6)


class TestFrequencyLoss:
    def test_identical_is_minus_two(self):
        f = [torch.randn(4, 2, 6, 8) for _ in range(3)]
        assert abs(frequency_matching_loss(f, [x.clone() for x in f], 5).item() + 2) < 1e-6

    def test_orthogonal_seasonality(self):
        # P=3 kernel 3: build features whose trend is shared and seasonality orthogonal
        trend = torch.ones(1, 1, 3, 2)
        sea_a = torch.tensor([1.0, -2.0, 1.0])[None, None, :, None] * torch.tensor([1.0, 0.0])
        sea_b = torch.tensor([1.0, -2.0, 1.0])[None, None, :, None] * torch.tensor([0.0, 1.0])
        # moving average with replicate padding of [1, -2, 1] is [0, 0, 0], so the seasonal part is kept whole
        pa, pb = series_decompose(trend + sea_a, 3), series_decompose(trend + sea_b, 3)
        assert torch.allclose(pa.trend, pb.trend)
        loss = frequency_matching_loss([trend + sea_a], [trend + sea_b], 3)
        assert abs(loss.item() + 1) < 1e-6

    def test_scale_invariance(self):
        fT = [torch.randn(5, 2, 6, 4) for _ in range(2)]
        fS = [torch.randn(3, 2, 6, 4) for _ in range(2)]
        a = frequency_matching_loss(fT, fS, 5)
        b = frequency_matching_loss(fT, [3 * x for x in fS], 5)
        assert abs(a.item() - b.item()) < 1e-5

    def test_layer_mismatch(self):
        with pytest.raises(ContractError):
            frequency_matching_loss([torch.randn(1, 1, 3, 2)], [], 3)

    @settings(max_examples=50, deadline=None)
    @given(seed=st.integers(0, 10_000), layers=st.integers(1, 3))
    def test_range(self, seed, layers):
        g = torch.Generator().manual_seed(seed)
        fT = [torch.randn(3, 1, 5, 4, generator=g) for _ in range(layers)]
        fS = [torch.randn(2, 1, 5, 4, generator=g) for _ in range(layers)]
        v = frequency_matching_loss(fT, fS, 3).item()
        assert -2 - 1e-6 <= v <= 2 + 1e-6

    def test_gradient_wrt_condensed_windows(self, tiny_cfg):
        theta = init_params(tiny_cfg, 0)
        orig = torch.randn(6, 8, 2)

        def f(x):
            th = theta.to(x.dtype)
            fT, _ = tsfe_forward(orig.to(x.dtype), th, tiny_cfg)
            fS, _ = tsfe_forward(x, th, tiny_cfg)
            return frequency_matching_loss([t.detach() for t in fT], fS, 3)

        errs = finite_difference_errors(f, torch.randn(4, 8, 2).double(), 1e-6)
        assert errs.max() < 1e-3
