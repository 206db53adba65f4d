"""Deviation scoring, merchant risk quantiles, and the hybrid scorer."""

import numpy as np
import pytest

from panther.downstream import (
    HybridScorer,
    ScorerConfig,
    ScoringSamples,
    build_scoring_samples,
    category_marginals,
    deviation,
    merchant_deviation_rows,
    merchant_risk,
    standardized_deviation,
    surprisal,
    train_scorer,
    write_deviations,
    write_risk,
)
from panther.errors import ConfigError
from panther.events import chronological_split, generate_synthetic, synthetic_schema
from panther.model import Model, ModelConfig
from panther.tokenizer import build_vocab
from panther.training import prepare_data
from tests.test_events import small_spec


class TestStandardizedDeviation:
    def test_uniform_is_degenerate(self):
        s = standardized_deviation(np.ones(3) / 3, 0)
        assert s.delta == 0.0 and s.degenerate

    def test_hand_computed_example(self):
        s = standardized_deviation(np.array([0.5, 0.3, 0.2]), 0)
        assert s.mu == pytest.approx(0.33333, abs=1e-4)
        assert s.sigma == pytest.approx(0.12472, abs=1e-4)
        assert s.delta == pytest.approx(1.3363, abs=1e-3)
        assert not s.degenerate

    def test_minimum_entry_is_negative(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            dist = rng.dirichlet(np.ones(8))
            s = standardized_deviation(dist, int(np.argmin(dist)))
            assert s.delta < 0

    def test_softmax_shift_invariance(self):
        rng = np.random.default_rng(1)
        logits = rng.standard_normal(12)

        def soft(x):
            e = np.exp(x - x.max())
            return e / e.sum()

        a = standardized_deviation(soft(logits), 3)
        b = standardized_deviation(soft(logits + 77.7), 3)
        assert a.delta == pytest.approx(b.delta, abs=1e-9)


class TestSurprisal:
    def test_certain_event_is_zero(self):
        assert surprisal(1.0) == 0.0

    def test_closed_form(self):
        assert surprisal(np.exp(-5.0)) == pytest.approx(5.0, abs=1e-9)

    def test_underflow_clips(self):
        assert surprisal(0.0) == 30.0
        assert surprisal(1e-300) == 30.0


class TestMerchantRisk:
    def test_singleton_quantile(self):
        for q in (0.05, 0.5, 0.9):
            scores, _ = merchant_risk([("m1", "u1", -2.0)], q=q)
            assert scores[0].r_m == -2.0

    def test_interpolated_median(self):
        rows = [("m", f"u{i}", d) for i, d in enumerate([-3.0, -1.0, 0.0, 1.0])]
        scores, _ = merchant_risk(rows, q=0.5)
        assert scores[0].r_m == pytest.approx(-0.5)

    def test_quantile_monotone_in_q(self):
        rng = np.random.default_rng(2)
        rows = [("m", f"u{i}", float(d)) for i, d in enumerate(rng.standard_normal(40))]
        values = [merchant_risk(rows, q=q)[0][0].r_m for q in (0.05, 0.25, 0.5, 0.75, 0.95)]
        assert values == sorted(values)

    def test_repeat_interactions_average_per_user(self):
        rows = [("m", "u1", -4.0), ("m", "u1", 0.0), ("m", "u2", 1.0)]
        scores, _ = merchant_risk(rows, q=0.5)
        assert scores[0].n_users == 2
        assert scores[0].r_m == pytest.approx((-2.0 + 1.0) / 2)

    def test_flagging_threshold(self):
        rows = [("bad", "u1", -5.0), ("good", "u2", 1.0)]
        scores, flagged = merchant_risk(rows, q=0.5, threshold=-1.0)
        assert flagged == {"bad"}
        assert {s.merchant_id for s in scores} == {"bad", "good"}

    def test_invalid_q_rejected(self):
        with pytest.raises(ConfigError):
            merchant_risk([("m", "u", 0.0)], q=0.0)
        with pytest.raises(ConfigError):
            merchant_risk([("m", "u", 0.0)], q=1.0)

    def test_report_files(self, tmp_path):
        rows = [("m", "u1", -4.0), ("m", "u2", 0.0)]
        scores, _ = merchant_risk(rows, q=0.05)
        write_risk(scores, tmp_path / "risk.json")
        import json
        doc = json.loads((tmp_path / "risk.json").read_text())
        assert "m" in doc and doc["m"]["n_users"] == 2


def corpus(spec=None):
    spec = spec or small_spec(num_users=12, fraud_rate=0.1, events_per_user=(20, 30))
    users, meta = generate_synthetic(spec)
    schema = synthetic_schema(spec)
    vocab = build_vocab(users, schema, cap=40)
    split = chronological_split(users, (0.6, 0.2, 0.2))
    data = prepare_data(users, vocab, split)
    model = Model(ModelConfig(vocab_size=len(vocab), d=8, layers=1, heads=2,
                              prototypes=3, conv_branches=((2, 1), (2, 2)),
                              max_len=48), seed=4)
    return model, data, vocab, meta


class TestDeviationPipeline:
    def test_deviation_modes(self):
        model, data, vocab, _ = corpus()
        prefix = data.seqs[0][:10]
        tok = int(data.seqs[0][10])
        if tok >= 3:
            s = deviation(model, prefix, tok, vocab, profile=data.profiles[0], mode="token")
            assert np.isfinite(s.delta)
        cat = vocab.schema.values["merchant_category"][0]
        s = deviation(model, prefix, cat, vocab, profile=data.profiles[0], mode="merchant")
        assert np.isfinite(s.delta)

    def test_empty_prefix_rejected(self):
        model, data, vocab, _ = corpus()
        with pytest.raises(ConfigError):
            deviation(model, np.array([], dtype=np.int64), 3, vocab)

    def test_category_marginals_sum_below_one(self):
        model, data, vocab, _ = corpus()
        probs, _ = model.predict_probs(data.seqs[0][:8][None, :], [data.profiles[0]])
        values, marg = category_marginals(probs[0, -1], vocab, "merchant_category")
        assert len(values) == len(vocab.schema.values["merchant_category"])
        assert 0.0 < marg.sum() <= 1.0 + 1e-6
        assert np.all(marg >= 0)

    def test_merchant_rows_cover_counterparties(self):
        model, data, vocab, _ = corpus()
        rows = merchant_deviation_rows(model, data, vocab, region="test")
        assert rows
        seen = {r.candidate for r in rows}
        all_cp = {cp for ms in data.merchants for cp in ms if cp}
        assert seen <= all_cp
        for r in rows[:5]:
            assert np.isfinite(r.delta)

    def test_deviations_jsonl(self, tmp_path):
        model, data, vocab, _ = corpus()
        rows = merchant_deviation_rows(model, data, vocab, region="test")
        p = tmp_path / "dev.jsonl"
        write_deviations(rows, p)
        import json
        first = json.loads(p.read_text().splitlines()[0])
        assert {"user", "merchant", "delta", "mu", "sigma", "flag"} <= set(first)


def tiny_scorer_config(**over):
    base = dict(schema_values={"a": ("x", "y"), "b": ("p", "q", "r")},
                vocab_size=20, profile_dim=4, ctx_dim=3, token_dim=3,
                conv_filters=4, hidden=8, window=10)
    base.update(over)
    return ScorerConfig(**base)


def tiny_samples(n=6, seed=0, window=10):
    rng = np.random.default_rng(seed)
    return ScoringSamples(
        ctx=rng.integers(0, 3, size=(n, 2)),
        recent=rng.integers(0, 20, size=(n, window)),
        rec_len=rng.integers(1, window, size=n),
        e_u=rng.standard_normal((n, 4)).astype(np.float32),
        delta=rng.uniform(0, 10, size=n),
        labels=rng.integers(0, 2, size=n),
    )


class TestHybridScorer:
    def test_scores_strictly_inside_unit_interval(self):
        scorer = HybridScorer(tiny_scorer_config(), seed=1)
        s = scorer.scores(tiny_samples())
        assert np.all(s > 0) and np.all(s < 1)

    def test_constant_head_when_weights_zeroed(self):
        scorer = HybridScorer(tiny_scorer_config(), seed=2)
        for name, p in scorer.named_params():
            p.data[:] = 0
        scorer.params["mlp.b2"].data[:] = 0.7
        s = scorer.scores(tiny_samples(seed=3))
        want = 1.0 / (1.0 + np.exp(-0.7))
        np.testing.assert_allclose(s, want, rtol=1e-6)

    def test_monotone_in_delta_with_positive_path(self):
        cfg = tiny_scorer_config()
        scorer = HybridScorer(cfg, seed=4)
        for name, p in scorer.named_params():
            p.data[:] = 0
        # wire the delta feature through one hidden unit with positive weights
        delta_row = cfg.feature_dim() - 2
        scorer.params["mlp.w1"].data[delta_row, 0] = 1.0
        scorer.params["mlp.w2"].data[0, 0] = 1.0
        a = tiny_samples(seed=5)
        b = ScoringSamples(a.ctx, a.recent, a.rec_len, a.e_u, a.delta + 3.0, a.labels)
        assert np.all(scorer.scores(b) > scorer.scores(a))

    def test_feature_permutation_with_permuted_weights_is_invariant(self):
        cfg = tiny_scorer_config()
        scorer = HybridScorer(cfg, seed=6)
        samples = tiny_samples(seed=7)
        import panther.autodiff as ad
        feats = scorer.features(samples).data
        rng = np.random.default_rng(8)
        perm = rng.permutation(cfg.feature_dim())
        w1 = scorer.params["mlp.w1"].data
        direct = feats @ w1
        permuted = feats[:, perm] @ w1[perm, :]
        np.testing.assert_allclose(direct, permuted, atol=1e-5)

    def test_ablation_flags_zero_features(self):
        cfg = tiny_scorer_config(use_profile=False, use_deviation=False)
        scorer = HybridScorer(cfg, seed=9)
        a = tiny_samples(seed=10)
        b = ScoringSamples(a.ctx, a.recent, a.rec_len,
                           a.e_u + 100.0, a.delta + 100.0, a.labels)
        np.testing.assert_allclose(scorer.scores(a), scorer.scores(b), atol=1e-7)

    def test_training_separates_obvious_signal(self):
        """delta carries the label exactly: training must find it."""
        rng = np.random.default_rng(11)
        n = 400
        labels = rng.integers(0, 2, size=n)
        samples = ScoringSamples(
            ctx=rng.integers(0, 3, size=(n, 2)),
            recent=rng.integers(0, 20, size=(n, 10)),
            rec_len=np.full(n, 10),
            e_u=rng.standard_normal((n, 4)).astype(np.float32),
            delta=labels * 8.0 + rng.uniform(0, 0.5, size=n),
            labels=labels,
        )
        scorer = train_scorer(samples, tiny_scorer_config(), epochs=12, lr=1e-2, seed=12)
        s = scorer.scores(samples)
        assert s[labels == 1].mean() > s[labels == 0].mean() + 0.2

    def test_save_load_round_trip(self, tmp_path):
        scorer = HybridScorer(tiny_scorer_config(), seed=13)
        p = tmp_path / "scorer.npz"
        scorer.save(p)
        loaded = HybridScorer.load(p)
        s0 = scorer.scores(tiny_samples(seed=14))
        s1 = loaded.scores(tiny_samples(seed=14))
        np.testing.assert_array_equal(s0, s1)


class TestBuildScoringSamples:
    def test_samples_shapes_and_labels(self):
        model, data, vocab, _ = corpus()
        samples = build_scoring_samples(model, data, vocab, region="train", window=16)
        assert len(samples) > 0
        assert samples.recent.shape[1] == 16
        assert set(np.unique(samples.labels)) <= {0, 1}
        assert np.all(samples.delta >= 0) and np.all(samples.delta <= 30.0)
        assert samples.e_u.shape[1] == model.config.d

    def test_deltas_match_direct_forward(self):
        model, data, vocab, _ = corpus(small_spec(num_users=4, fraud_rate=0.0,
                                                  events_per_user=(12, 16)))
        samples = build_scoring_samples(model, data, vocab, region="test", window=8)
        # recompute one delta by a direct prefix forward
        uid = samples.user_ids[0]
        i = data.user_ids.index(uid)
        lo, hi = data.cuts[uid][1], len(data.seqs[i])
        t = max(lo, 1)
        probs, _ = model.predict_probs(data.seqs[i][:t][None, :], [data.profiles[i]])
        from panther.downstream import surprisal as surp
        want = surp(probs[0, -1, data.seqs[i][t]])
        assert samples.delta[0] == pytest.approx(want, abs=1e-5)
