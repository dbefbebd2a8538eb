import math

import numpy as np
import pytest
import torch

import efhvae.trainer as trainer_mod
from efhvae.corpus import CorpusConfig, build_dataset, generate_corpus, segment_and_label
from efhvae.exceptions import ConfigurationError, DataError, NumericError
from efhvae.model import Architecture
from efhvae.objective import LOSS_FIELDS, HyperConfig, LossBreakdown
from efhvae.seqnet import init_params, load_checkpoint, save_checkpoint
from efhvae.trainer import (
    AdamState, EarlyStopping, StageConfig, adam_step, evaluate_validation_bound,
    hierarchical_sample_batch, segment_counts, train_stage,
)

from conftest import toy_parallel_recordings


def toy_labels():
    segs, _ = segment_and_label(toy_parallel_recordings(), 32)
    return segs.labels


class TestStageConfig:
    def test_stage1_forces_alpha_z1_zero(self):
        assert StageConfig(stage=1, alpha_z1=10000.0).alpha_z1 == 0.0

    def test_stage2_default(self):
        assert StageConfig(stage=2).alpha_z1 == 10000.0

    @pytest.mark.parametrize("kw", [dict(stage=3), dict(K=0), dict(max_epochs=10, patience=11), dict(patience=0)])
    def test_invalid(self, kw):
        with pytest.raises(ConfigurationError):
            StageConfig(**kw)

    def test_dict_roundtrip(self):
        cfg = StageConfig(stage=2, K=5, seed=3)
        assert StageConfig.from_dict({**cfg.to_dict(), "unknown": 1}) == cfg


class TestAdam:
    def params(self):
        return {"a": torch.tensor([0.5, -1.0], dtype=torch.float64), "b": torch.tensor([2.0], dtype=torch.float64)}

    def test_zero_gradient(self):
        p = self.params()
        q, _ = adam_step(p, {k: torch.zeros_like(v) for k, v in p.items()}, AdamState.zeros_like(p), 1e-3)
        assert all(torch.equal(p[k], q[k]) for k in p)

    def test_first_step(self):
        p = {"w": torch.tensor([1.0], dtype=torch.float64)}
        q, state = adam_step(p, {"w": torch.tensor([0.1], dtype=torch.float64)}, AdamState.zeros_like(p), 1e-3)
        assert (q["w"] - p["w"]).item() == pytest.approx(-1e-3 * 0.1 / (0.1 + 1e-8), rel=1e-12)
        assert (q["w"] - p["w"]).item() == pytest.approx(-1e-3, rel=1e-6)
        assert state.t == 1

    def test_matches_reference_loop(self):
        rng = np.random.default_rng(0)
        theta = rng.standard_normal(3)
        p = {"w": torch.as_tensor(theta.copy())}
        state = AdamState.zeros_like(p)
        m = v = np.zeros(3)
        for t in range(1, 6):
            g = rng.standard_normal(3)
            m = 0.95 * m + 0.05 * g
            v = 0.999 * v + 0.001 * g * g
            theta = theta - 0.01 * (m / (1 - 0.95 ** t)) / (np.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
            p, state = adam_step(p, {"w": torch.as_tensor(g)}, state, 0.01)
        np.testing.assert_allclose(p["w"].numpy(), theta, rtol=1e-12)

    def test_lr_zero_identity(self):
        p = self.params()
        q, _ = adam_step(p, {k: torch.randn_like(v) for k, v in p.items()}, AdamState.zeros_like(p), 0.0)
        assert all(torch.equal(p[k], q[k]) for k in p)

    def test_identical_grads_identical_updates(self):
        p = {"a": torch.zeros(3, dtype=torch.float64), "b": torch.zeros(3, dtype=torch.float64)}
        g = torch.tensor([0.3, -2.0, 1e-4], dtype=torch.float64)
        q, _ = adam_step(p, {"a": g, "b": g.clone()}, AdamState.zeros_like(p), 1e-3)
        assert torch.equal(q["a"], q["b"])

    def test_non_finite(self):
        p = self.params()
        state = AdamState.zeros_like(p)
        with pytest.raises(NumericError):
            adam_step(p, {"a": torch.tensor([math.nan, 0.0], dtype=torch.float64), "b": torch.zeros(1, dtype=torch.float64)},
                      state, 1e-3)
        assert state.t == 0


class TestHierarchicalBatch:
    def test_toy_corpus_exhaustive(self):
        labels = toy_labels()
        rng = np.random.default_rng(0)
        for _ in range(100):
            idx, chosen = hierarchical_sample_batch(labels, 3, rng)
            assert len(chosen) == len(set(chosen.tolist())) == 3
            assert len(idx) == 12
            assert set(labels[idx].tolist()) == set(chosen.tolist())
            assert np.array_equal(np.sort(idx), np.flatnonzero(np.isin(labels, chosen)))

    def test_saturation(self):
        labels = toy_labels()
        idx, chosen = hierarchical_sample_batch(labels, 50, np.random.default_rng(1))
        assert len(chosen) == 10 and len(idx) == 40

    def test_deterministic(self):
        labels = toy_labels()
        a = hierarchical_sample_batch(labels, 3, np.random.default_rng(5))
        b = hierarchical_sample_batch(labels, 3, np.random.default_rng(5))
        assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])

    def test_errors(self):
        with pytest.raises(DataError):
            hierarchical_sample_batch(np.array([], dtype=int), 3, np.random.default_rng(0))
        with pytest.raises(ConfigurationError):
            hierarchical_sample_batch(toy_labels(), 0, np.random.default_rng(0))

    def test_labels_visited_uniformly(self):
        labels = toy_labels()
        rng = np.random.default_rng(2)
        hits = np.zeros(10)
        for _ in range(3000):
            hits[hierarchical_sample_batch(labels, 3, rng)[1]] += 1
        np.testing.assert_allclose(hits / 3000, 0.3, atol=0.03)


class TestEarlyStopping:
    def test_peak_then_flat(self):
        stop = EarlyStopping(50)
        for epoch in range(200):
            stop.update(epoch, -abs(epoch - 7))
            if stop.should_stop(epoch):
                break
        assert (stop.best_epoch, epoch) == (7, 57)

    def test_ties_do_not_reset(self):
        stop = EarlyStopping(2)
        assert stop.update(0, 1.0) and not stop.update(1, 1.0)
        assert stop.should_stop(2)


def _dataset(n_subjects=3, seconds=10, seed=3):
    return build_dataset(generate_corpus(CorpusConfig(n_subjects=n_subjects, n_stimuli=2, stimulus_duration_s=seconds,
                                                      n_channels=4, seed=seed)))


def _init(ds, hidden=8, latent=4, seed=0, dtype=torch.float32):
    arch = Architecture(ds.segments.data.shape[2], ds.n_sequences, len(ds.labels), hidden, 2, latent,
                        ds.segments.data.shape[1])
    return init_params(arch.param_spec(), seed, dtype=dtype)


def _cfg(**kw):
    base = dict(K=8, minibatch_size=64, max_epochs=2, patience=2, seed=0)
    base.update(kw)
    return StageConfig(**base)


@pytest.fixture(scope="module")
def ds():
    return _dataset()


@pytest.fixture(scope="module")
def stage1(ds):
    init = _init(ds)
    return init, train_stage(init, ds.train, ds.val, HyperConfig(latent_dim=4), _cfg(stage=1))


class TestTrainStage:
    def test_stage1_leaves_mu1_bit_unchanged(self, stage1):
        init, res = stage1
        assert res.best_epoch > 0
        assert torch.equal(res.params["mu1"], init["mu1"])
        assert not torch.equal(res.params["mu2"], init["mu2"])

    def test_stage1_mu1_unchanged_even_when_nonzero(self, ds):
        init = _init(ds)
        init["mu1"] = torch.randn(init["mu1"].shape, generator=torch.Generator().manual_seed(0))
        res = train_stage(init, ds.train, ds.val, HyperConfig(latent_dim=4), _cfg(stage=1, max_epochs=1, patience=1))
        assert torch.equal(res.params["mu1"], init["mu1"])

    def test_stage2_requires_init(self, ds):
        with pytest.raises(ConfigurationError):
            train_stage(None, ds.train, ds.val, HyperConfig(latent_dim=4), _cfg(stage=2))

    def test_stage2_zero_epochs_returns_init(self, ds, stage1):
        s1 = stage1[1].params
        res = train_stage(s1, ds.train, ds.val, HyperConfig(latent_dim=4), _cfg(stage=2, max_epochs=0, patience=1))
        assert all(torch.equal(res.params[k], s1[k]) for k in s1)

    def test_stage2_starts_from_checkpoint(self, ds, stage1, tmp_path):
        s1 = stage1[1].params
        save_checkpoint(tmp_path / "s1.fhvz", s1)
        loaded, _ = load_checkpoint(tmp_path / "s1.fhvz")
        seen = {}
        original = trainer_mod.compute_gradients

        def spy(fn, params):
            seen.setdefault("first", {k: v.clone() for k, v in params.items()})
            return original(fn, params)

        trainer_mod.compute_gradients = spy
        try:
            train_stage(loaded, ds.train, ds.val, HyperConfig(latent_dim=4), _cfg(stage=2, max_epochs=1, patience=1))
        finally:
            trainer_mod.compute_gradients = original
        assert all(torch.equal(seen["first"][k], s1[k]) for k in s1)

    def test_input_not_mutated(self, ds, stage1):
        init = stage1[0]
        copy = {k: v.clone() for k, v in init.items()}
        train_stage(init, ds.train, ds.val, HyperConfig(latent_dim=4), _cfg(stage=1, max_epochs=1, patience=1))
        assert all(torch.equal(copy[k], init[k]) for k in init)

    def test_history_rows(self, stage1):
        hist = stage1[1].history
        assert [(r["epoch"], r["split"]) for r in hist] == [(0, "val"), (1, "train"), (1, "val"), (2, "train"), (2, "val")]
        assert all(set(LOSS_FIELDS) <= set(r) for r in hist)

    def test_reproducible(self, ds, stage1):
        init, res = stage1
        again = train_stage(init, ds.train, ds.val, HyperConfig(latent_dim=4), _cfg(stage=1))
        assert all(torch.equal(res.params[k], again.params[k]) for k in init)
        assert again.history == res.history

    def test_empty_train(self, ds):
        with pytest.raises(DataError):
            train_stage(_init(ds), ds.train.subset(np.zeros(len(ds.train), bool)), ds.val,
                        HyperConfig(latent_dim=4), _cfg(stage=1))

    def test_ends_patience_epochs_after_peak(self, ds, monkeypatch):
        bounds = iter([-10.0, -9.0, -5.0, -6.0, -7.0, -7.5, -8.0, -9.0, -9.5, -9.9, -10.0])
        calls = []

        def fake_eval(*args, **kw):
            calls.append(1)
            v = next(bounds)
            return LossBreakdown(**{k: (v if k == "bound" else 0.0) for k in LOSS_FIELDS})

        monkeypatch.setattr(trainer_mod, "evaluate_terms", fake_eval)
        res = train_stage(_init(ds), ds.train, ds.val, HyperConfig(latent_dim=4),
                          _cfg(stage=1, max_epochs=10, patience=3))
        assert res.best_epoch == 2 and res.epochs_run == 5 and res.stopped_early

    def test_smoke_total_improves(self):
        data = build_dataset(generate_corpus(CorpusConfig(n_subjects=4, n_stimuli=2, stimulus_duration_s=20,
                                                           n_channels=4, seed=0)))
        res = train_stage(_init(data, hidden=16), data.train, data.val, HyperConfig(latent_dim=4),
                          _cfg(stage=1, K=16, max_epochs=5, patience=5))
        train_rows = [r for r in res.history if r["split"] == "train"]
        assert train_rows[-1]["total"] > train_rows[0]["total"]


class TestValidationBound:
    def counts(self, ds):
        return segment_counts(ds.train, ds.n_sequences, len(ds.labels), extra=ds.val)

    def test_deterministic(self, ds, stage1):
        seq_c, lab_c = self.counts(ds)
        p = stage1[1].params
        a = evaluate_validation_bound(p, ds.val, HyperConfig(latent_dim=4), 1, seq_c, lab_c)
        b = evaluate_validation_bound(p, ds.val, HyperConfig(latent_dim=4), 1, seq_c, lab_c)
        assert a == b and math.isfinite(a)

    def test_empty(self, ds, stage1):
        seq_c, lab_c = self.counts(ds)
        with pytest.raises(DataError):
            evaluate_validation_bound(stage1[1].params, ds.val.subset(np.zeros(len(ds.val), bool)),
                                      HyperConfig(latent_dim=4), 1, seq_c, lab_c)

    def test_checkpoint_roundtrip(self, ds, stage1, tmp_path):
        seq_c, lab_c = self.counts(ds)
        p = stage1[1].params
        save_checkpoint(tmp_path / "m.fhvz", p)
        q, _ = load_checkpoint(tmp_path / "m.fhvz")
        h = HyperConfig(latent_dim=4)
        assert evaluate_validation_bound(p, ds.val, h, 1, seq_c, lab_c) == evaluate_validation_bound(q, ds.val, h, 1, seq_c, lab_c)

    def test_excludes_discriminative_terms(self, ds, stage1):
        seq_c, lab_c = self.counts(ds)
        p = stage1[1].params
        a = evaluate_validation_bound(p, ds.val, HyperConfig(latent_dim=4, alpha_z2=0.0), 1, seq_c, lab_c)
        b = evaluate_validation_bound(p, ds.val, HyperConfig(latent_dim=4, alpha_z2=1e6), 1, seq_c, lab_c)
        assert a == b

    def test_degenerate_model_equals_mean_recon(self, ds, stage1, monkeypatch):
        seq_c, lab_c = self.counts(ds)
        recon = torch.linspace(-3.0, -1.0, len(ds.val), dtype=torch.float64)

        def stub(params, x, seq, lab, *args, **kw):
            n = x.shape[0]
            out = {k: torch.zeros(n, dtype=torch.float64) for k in LOSS_FIELDS}
            start = stub.offset
            stub.offset += n
            out["recon"] = out["bound"] = out["total"] = recon[start:start + n]
            return out

        stub.offset = 0
        monkeypatch.setattr(trainer_mod, "segment_terms", stub)
        got = evaluate_validation_bound(stage1[1].params, ds.val, HyperConfig(latent_dim=4), 1, seq_c, lab_c)
        assert got == pytest.approx(recon.mean().item(), abs=1e-12)
