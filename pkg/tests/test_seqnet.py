import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from efhvae.exceptions import DataError, DimensionError, NumericError
from efhvae.model import Architecture
from efhvae.seqnet import (
    AffineParams, LstmParams, affine, compute_gradients, init_params, load_checkpoint,
    lstm_step, save_checkpoint, stacked_forward,
)


def zero_lstm(D, H, dtype=torch.float64):
    return LstmParams(torch.zeros(4 * H, D, dtype=dtype), torch.zeros(4 * H, H, dtype=dtype),
                      torch.zeros(4 * H, dtype=dtype))


def random_lstm(D, H, seed, dtype=torch.float64):
    g = torch.Generator().manual_seed(seed)
    return LstmParams(0.5 * torch.randn(4 * H, D, generator=g, dtype=dtype),
                      0.5 * torch.randn(4 * H, H, generator=g, dtype=dtype),
                      0.5 * torch.randn(4 * H, generator=g, dtype=dtype))


def reference_step(p, x, h, c):
    """Gate equations written out per gate with numpy."""
    W, U, b = p.w_ih.numpy(), p.w_hh.numpy(), p.b.numpy()
    H = p.hidden_size
    sig = lambda a: 1 / (1 + np.exp(-a))
    pre = [W[k * H:(k + 1) * H] @ x + U[k * H:(k + 1) * H] @ h + b[k * H:(k + 1) * H] for k in range(4)]
    i, f, g, o = sig(pre[0]), sig(pre[1]), np.tanh(pre[2]), sig(pre[3])
    c_new = f * c + i * g
    return o * np.tanh(c_new), c_new


class TestLstmStep:
    def test_zero_params(self):
        p = zero_lstm(3, 5)
        h, c = lstm_step(p, torch.ones(3, dtype=torch.float64), torch.zeros(5, dtype=torch.float64),
                         torch.zeros(5, dtype=torch.float64))
        assert torch.all(h == 0) and torch.all(c == 0)

    def test_saturated_forget_gate_keeps_cell(self):
        p = zero_lstm(3, 4)
        p.b[4:8] = 100.0
        c_prev = torch.tensor([0.3, -1.2, 2.0, 0.0], dtype=torch.float64)
        _, c = lstm_step(p, torch.randn(3, dtype=torch.float64), torch.zeros(4, dtype=torch.float64), c_prev)
        assert torch.allclose(c, c_prev, atol=1e-6)

    def test_paper_sizes(self):
        p = LstmParams(torch.zeros(512, 64), torch.zeros(512, 128), torch.zeros(512))
        h, c = lstm_step(p, torch.zeros(64), torch.zeros(128), torch.zeros(128))
        assert h.shape == (128,) and c.shape == (128,)

    def test_matches_reference(self):
        p = random_lstm(3, 4, seed=0)
        rng = np.random.default_rng(0)
        x, h, c = rng.standard_normal(3), rng.standard_normal(4), rng.standard_normal(4)
        got = lstm_step(p, *(torch.as_tensor(v) for v in (x, h, c)))
        want = reference_step(p, x, h, c)
        np.testing.assert_allclose(got[0].numpy(), want[0], rtol=1e-12)
        np.testing.assert_allclose(got[1].numpy(), want[1], rtol=1e-12)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 10_000), st.floats(0.1, 20.0))
    def test_hidden_bounded(self, seed, scale):
        p = random_lstm(3, 6, seed)
        g = torch.Generator().manual_seed(seed)
        x = scale * torch.randn(3, generator=g, dtype=torch.float64)
        h, _ = lstm_step(p, x, scale * torch.randn(6, generator=g, dtype=torch.float64),
                         scale * torch.randn(6, generator=g, dtype=torch.float64))
        assert torch.all(h.abs() <= 1.0)

    def test_shape_mismatch(self):
        p = zero_lstm(3, 4)
        with pytest.raises(DimensionError):
            lstm_step(p, torch.zeros(2, dtype=torch.float64), torch.zeros(4, dtype=torch.float64),
                      torch.zeros(4, dtype=torch.float64))


class TestStackedForward:
    def test_paper_concat_length(self):
        layers = [zero_lstm(64, 128, torch.float32), zero_lstm(128, 128, torch.float32)]
        out, last = stacked_forward(layers, torch.randn(32, 64))
        assert out.shape == (32, 128) and last.shape == (256,)

    def test_zero_params_give_zero(self):
        layers = [zero_lstm(3, 4), zero_lstm(4, 4)]
        out, last = stacked_forward(layers, torch.randn(7, 3, dtype=torch.float64))
        assert torch.all(out == 0) and torch.all(last == 0)

    def test_deterministic(self):
        layers = [random_lstm(3, 4, 1), random_lstm(4, 4, 2)]
        x = torch.randn(5, 9, 3, dtype=torch.float64)
        a, b = stacked_forward(layers, x), stacked_forward(layers, x)
        assert torch.equal(a[0], b[0]) and torch.equal(a[1], b[1])

    def test_fused_matches_stepwise(self):
        layers = [random_lstm(3, 5, 1), random_lstm(5, 5, 2)]
        x = torch.randn(4, 11, 3, dtype=torch.float64)
        fo, fl = stacked_forward(layers, x, fused=True)
        mo, ml = stacked_forward(layers, x, fused=False)
        torch.testing.assert_close(fo, mo, rtol=1e-12, atol=1e-12)
        torch.testing.assert_close(fl, ml, rtol=1e-12, atol=1e-12)

    def test_last_concat_is_final_hidden_of_each_layer(self):
        layers = [random_lstm(2, 3, 5), random_lstm(3, 3, 6)]
        x = torch.randn(6, 2, dtype=torch.float64)
        out, last = stacked_forward(layers, x, fused=False)
        h = torch.zeros(3, dtype=torch.float64)
        c = torch.zeros(3, dtype=torch.float64)
        for t in range(6):
            h, c = lstm_step(layers[0], x[t], h, c)
        torch.testing.assert_close(last[:3], h)
        torch.testing.assert_close(last[3:], out[-1])

    def test_empty_sequence(self):
        with pytest.raises(DimensionError):
            stacked_forward([zero_lstm(3, 4)], torch.zeros(0, 3, dtype=torch.float64))


class TestAffine:
    def test_zero_weight(self):
        b = torch.arange(3.0)
        assert torch.equal(affine(AffineParams(torch.zeros(3, 4), b), torch.randn(4)), b)

    def test_identity(self):
        v = torch.randn(5)
        assert torch.equal(affine(AffineParams(torch.eye(5), torch.zeros(5)), v), v)

    def test_head_shape(self):
        assert affine(AffineParams(torch.zeros(32, 256), torch.zeros(32)), torch.zeros(256)).shape == (32,)

    def test_mismatch(self):
        with pytest.raises(DimensionError):
            affine(AffineParams(torch.zeros(3, 4), torch.zeros(3)), torch.zeros(5))


class TestInitParams:
    spec = Architecture(n_channels=3, n_sequences=4, n_labels=5, hidden_size=6, latent_dim=2).param_spec()

    def test_deterministic(self):
        a, b = init_params(self.spec, 7), init_params(self.spec, 7)
        assert all(torch.equal(a[k], b[k]) for k in a)

    def test_tables_and_biases_zero(self):
        p = init_params(self.spec, 1)
        assert torch.all(p["mu1"] == 0) and torch.all(p["mu2"] == 0)
        assert all(torch.all(p[k] == 0) for k, (_, kind) in self.spec.items() if kind == "bias")

    def test_xavier_bound(self):
        p = init_params(self.spec, 2)
        for k, (shape, kind) in self.spec.items():
            assert torch.isfinite(p[k]).all()
            if kind == "weight":
                s = np.sqrt(6.0 / (shape[0] + shape[1]))
                assert p[k].abs().max() <= s
                assert p[k].abs().max() > 0.5 * s


class TestGradients:
    def test_sum_of_squares(self):
        params = {"a": torch.randn(3, 2, dtype=torch.float64), "b": torch.randn(4, dtype=torch.float64)}
        _, g = compute_gradients(lambda p: (p["a"] ** 2).sum() + (p["b"] ** 2).sum(), params)
        torch.testing.assert_close(g["a"], 2 * params["a"])
        torch.testing.assert_close(g["b"], 2 * params["b"])

    def test_unused_parameter_zero(self):
        params = {"a": torch.randn(3), "unused": torch.randn(2)}
        _, g = compute_gradients(lambda p: p["a"].sum(), params)
        assert torch.equal(g["unused"], torch.zeros(2))

    def test_non_finite(self):
        with pytest.raises(NumericError):
            compute_gradients(lambda p: p["a"].sum() / 0.0, {"a": torch.ones(2)})

    def test_params_not_mutated(self):
        params = {"a": torch.randn(3)}
        before = params["a"].clone()
        compute_gradients(lambda p: (p["a"] ** 2).sum(), params)
        assert torch.equal(params["a"], before) and not params["a"].requires_grad


class TestCheckpoint:
    def test_roundtrip(self, tmp_path):
        p = init_params(TestInitParams.spec, 3)
        p["extra64"] = torch.randn(2, 3, dtype=torch.float64)
        save_checkpoint(tmp_path / "m.fhvz", p, {"stage": 1})
        q, meta = load_checkpoint(tmp_path / "m.fhvz")
        assert list(q) == list(p)
        assert all(torch.equal(p[k], q[k]) and p[k].dtype == q[k].dtype for k in p)
        assert meta == {"stage": 1}

    def test_layout(self, tmp_path):
        save_checkpoint(tmp_path / "m.fhvz", {"ab": torch.tensor([[1.0, 2.0]])})
        raw = (tmp_path / "m.fhvz").read_bytes()
        assert raw[:4] == b"FHVZ"
        assert int.from_bytes(raw[4:8], "little") == 1 and int.from_bytes(raw[8:12], "little") == 1
        assert int.from_bytes(raw[12:14], "little") == 2 and raw[14:16] == b"ab"
        assert raw[16] == 0 and raw[17] == 2
        assert np.frombuffer(raw[26:], "<f4").tolist() == [1.0, 2.0]

    def test_corrupt(self, tmp_path):
        (tmp_path / "bad.fhvz").write_bytes(b"XXXX")
        with pytest.raises(DataError):
            load_checkpoint(tmp_path / "bad.fhvz")
        save_checkpoint(tmp_path / "t.fhvz", {"a": torch.zeros(100)})
        data = (tmp_path / "t.fhvz").read_bytes()
        (tmp_path / "t.fhvz").write_bytes(data[:-8])
        with pytest.raises(DataError):
            load_checkpoint(tmp_path / "t.fhvz")
