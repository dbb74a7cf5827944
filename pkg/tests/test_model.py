import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from tvnet.model import (
    ModelVariant,
    TVNet,
    bce_loss,
    build_state,
    poly_lr,
    predict_mask,
    predict_scores,
    prepare,
    read_loss_history,
    train,
    write_loss_history,
)

VARIANTS = list(ModelVariant)


def _retrieved(corpus):
    # pair each sample with a pool sample; enough for plumbing tests
    return {s.sample_id: corpus.pool[i % len(corpus.pool)] for i, s in enumerate(corpus.train + corpus.val)}


def _inputs(corpus, cfg, variant, i=0):
    return prepare([corpus.train[i]], _retrieved(corpus), ModelVariant(variant), cfg)[0]


class TestForward:
    @pytest.mark.parametrize("variant", VARIANTS)
    def test_score_map_shape(self, tiny_config, tiny_corpus, variant):
        model = TVNet(tiny_config, variant)
        d = _inputs(tiny_corpus, tiny_config, variant)
        out = model(d.image, d.tokens, d.sim_image)
        assert out.shape == (1, 32, 32) and torch.isfinite(out).all()

    def test_constant_head(self, tiny_config, tiny_corpus):
        model = TVNet(tiny_config, "full")
        torch.nn.init.zeros_(model.head.weight)
        torch.nn.init.constant_(model.head.bias, 1.25)
        d = _inputs(tiny_corpus, tiny_config, "full")
        torch.testing.assert_close(model(d.image, d.tokens, d.sim_image), torch.full((1, 32, 32), 1.25))

    def test_variants_differ_on_shared_weights(self, tiny_config, tiny_corpus):
        full = TVNet(tiny_config, "full")
        base = TVNet(tiny_config, "baseline")
        base.load_state_dict(full.state_dict())
        d = _inputs(tiny_corpus, tiny_config, "full")
        assert not torch.allclose(full(d.image, d.tokens, d.sim_image), base(d.image, d.tokens))

    def test_retrieved_image_consistency(self, tiny_config, tiny_corpus):
        d = _inputs(tiny_corpus, tiny_config, "full")
        with pytest.raises(ValueError, match="needs a retrieved"):
            TVNet(tiny_config, "baseline_res")(d.image, d.tokens)
        with pytest.raises(ValueError, match="no retrieved"):
            TVNet(tiny_config, "baseline")(d.image, d.tokens, d.sim_image)
        with pytest.raises(ValueError, match=r"image must be"):
            TVNet(tiny_config, "baseline")(torch.zeros(1, 3, 64, 64), d.tokens)

    def test_active_modules(self, tiny_config):
        names = {v: set(TVNet(tiny_config, v).active_modules()) for v in VARIANTS}
        assert "enrichment" not in names[ModelVariant.BASELINE] and "amf" not in names[ModelVariant.BASELINE]
        assert "enrichment" in names[ModelVariant.BASELINE_RES] and "amf" not in names[ModelVariant.BASELINE_RES]
        assert {"enrichment", "amf"} <= names[ModelVariant.FULL]

    def test_initial_prediction_is_background(self, tiny_config, tiny_corpus):
        scores = predict_scores(TVNet(tiny_config, "baseline"), tiny_corpus.val)
        assert predict_mask(scores).mean() < 0.05


class TestLoss:
    def test_zero_scores_ln2(self, rng):
        mask = torch.from_numpy(rng.integers(0, 2, (5, 5)).astype(np.float32))
        assert bce_loss(torch.zeros(5, 5), mask).item() == pytest.approx(math.log(2), abs=1e-7)

    def test_saturated_correct(self, rng):
        mask = torch.from_numpy(rng.integers(0, 2, (5, 5)).astype(np.float32))
        assert bce_loss(200 * mask - 100, mask).item() < 1e-6

    def test_matches_summation_oracle(self, rng):
        scores, mask = rng.normal(size=(4, 4)) * 3, rng.integers(0, 2, (4, 4))
        got = bce_loss(torch.tensor(scores), torch.tensor(mask, dtype=torch.float64)).item()
        assert got == pytest.approx(oracles.bce_sum(scores, mask), rel=1e-12)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 2**31 - 1))
    def test_nonnegative(self, seed):
        rng = np.random.default_rng(seed)
        scores = torch.tensor(rng.normal(size=(3, 3)) * 20)
        assert bce_loss(scores, torch.tensor(rng.integers(0, 2, (3, 3)), dtype=torch.float64)).item() >= 0

    def test_shape_and_binary_checks(self):
        with pytest.raises(ValueError, match="differ"):
            bce_loss(torch.zeros(2, 2), torch.zeros(3, 3))
        with pytest.raises(ValueError, match="binary"):
            bce_loss(torch.zeros(2, 2), torch.full((2, 2), 0.5))


class TestThreshold:
    def test_zero_scores_background_at_half(self):
        assert predict_mask(np.zeros((3, 3)), 0.5).sum() == 0

    def test_zero_threshold_foreground(self, rng):
        assert predict_mask(rng.normal(size=(3, 3)) * 5, 0.0).all()

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 2**31 - 1), st.floats(0, 1), st.floats(0, 1))
    def test_monotone(self, seed, a, b):
        lo, hi = sorted((a, b))
        scores = np.random.default_rng(seed).normal(size=(6, 6)) * 4
        assert (predict_mask(scores, hi) <= predict_mask(scores, lo)).all()


class TestSchedule:
    def test_endpoints(self):
        assert poly_lr(0.00025, 0, 100) == 0.00025
        assert poly_lr(0.00025, 100, 100) == 0.0

    def test_nonincreasing(self):
        lrs = [poly_lr(1.0, t, 50) for t in range(51)]
        assert all(a >= b for a, b in zip(lrs, lrs[1:]))
        assert lrs[25] == pytest.approx(0.5**0.9)


class TestTraining:
    def test_zero_iterations_no_change(self, tiny_config, tiny_corpus):
        cfg = tiny_config.replace(max_iter=0)
        before = {k: v.clone() for k, v in build_state(cfg, "full").model.state_dict().items()}
        state = train(tiny_corpus.train, _retrieved(tiny_corpus), "full", cfg)
        assert state.iteration == 0 and state.losses == []
        for k, v in state.model.state_dict().items():
            assert torch.equal(v, before[k])

    def test_deterministic_replay(self, tiny_config, tiny_corpus):
        a = train(tiny_corpus.train, _retrieved(tiny_corpus), "full", tiny_config.replace(max_iter=8))
        b = train(tiny_corpus.train, _retrieved(tiny_corpus), "full", tiny_config.replace(max_iter=8))
        assert a.losses == b.losses

    def test_seed_changes_history(self, tiny_config, tiny_corpus):
        a = train(tiny_corpus.train, None, "baseline", tiny_config.replace(max_iter=4, seed=7))
        b = train(tiny_corpus.train, None, "baseline", tiny_config.replace(max_iter=4, seed=8))
        assert a.losses != b.losses

    def test_epoch_visits_every_sample(self, tiny_config, tiny_corpus):
        seen = []
        n = len(tiny_corpus.train)
        orig = TVNet.forward

        def spy(self, image, tokens, sim_image=None, return_maps=False):
            seen.append(float(image.sum()))
            return orig(self, image, tokens, sim_image, return_maps)

        TVNet.forward = spy
        try:
            train(tiny_corpus.train, None, "baseline", tiny_config.replace(max_iter=n))
        finally:
            TVNet.forward = orig
        expected = sorted(round(float(s.image.sum(dtype=np.float64)), 2) for s in tiny_corpus.train)
        assert sorted(round(x, 2) for x in seen) == expected

    def test_inactive_modules_untouched(self, tiny_config, tiny_corpus):
        cfg = tiny_config.replace(max_iter=3)
        before = build_state(cfg, "baseline").model.amf.state_dict()
        state = train(tiny_corpus.train, None, "baseline", cfg)
        for k, v in state.model.amf.state_dict().items():
            assert torch.equal(v, before[k])

    @pytest.mark.parametrize("variant", VARIANTS)
    def test_one_step_reaches_every_active_parameter(self, tiny_config, tiny_corpus, variant):
        """Dead-path detector over 5 seeds, one step each."""
        reached = set()
        for seed in range(5):
            state = build_state(tiny_config.replace(seed=seed, max_iter=1), variant)
            params = state.model.active_parameters()

            def record(st_):
                reached.update(n for n, p in params.items() if p.grad is not None and p.grad.abs().sum() > 0)

            train(tiny_corpus.train, _retrieved(tiny_corpus) if ModelVariant(variant).uses_res else None,
                  variant, tiny_config.replace(seed=seed, max_iter=1), state=state, callback=record)
        assert set(params) - reached == set()

    def test_missing_retrieval_entry(self, tiny_config, tiny_corpus):
        with pytest.raises(KeyError, match="tvnet index"):
            prepare(tiny_corpus.train, {}, ModelVariant.FULL, tiny_config)

    def test_empty_training_set(self, tiny_config):
        with pytest.raises(ValueError, match="empty"):
            train([], None, "baseline", tiny_config)


def test_loss_history_round_trip(tmp_path):
    losses = [0.693147, 0.5, 1e-5]
    write_loss_history(losses, tmp_path / "h.txt")
    assert (tmp_path / "h.txt").read_text().splitlines()[0] == "1\t0.69314700"
    assert read_loss_history(tmp_path / "h.txt") == pytest.approx(losses)
