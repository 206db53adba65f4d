"""Event model, IO round-trips, synthetic generation, chronological split."""

import hashlib
import io
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from panther import events
from panther.errors import ConfigError, ParseError
from panther.events import (
    Motif,
    RawEvent,
    SyntheticSpec,
    UserRecord,
    chronological_split,
    generate_synthetic,
    load_events,
    synthetic_schema,
    write_events,
)

CARDS = {"channel": 3, "amount_bucket": 4, "merchant_category": 4, "risk_level": 2}


def small_spec(**over):
    base = dict(
        num_users=12,
        cardinalities=CARDS,
        fraud_rate=0.0,
        num_clusters=3,
        seed=7,
        events_per_user=(20, 40),
    )
    base.update(over)
    return SyntheticSpec(**base)


def corpus_bytes(users):
    buf = io.StringIO()
    for user in users:
        for ev in user.events:
            doc = {"user_id": ev.user_id, "ts": ev.timestamp, "attrs": ev.attributes,
                   "label": ev.label, "cp": ev.counterparty_id}
            buf.write(json.dumps(doc, separators=(",", ":")) + "\n")
    return buf.getvalue().encode()


class TestLoadEvents:
    def schema(self):
        return synthetic_schema(small_spec())

    def test_two_users_one_event_each(self, tmp_path):
        p = tmp_path / "e.jsonl"
        p.write_text(
            '{"user_id":"u1","ts":5,"attrs":{"channel":"c0","amount_bucket":"ab0","merchant_category":"mc0","risk_level":"rl0"}}\n'
            '{"user_id":"u2","ts":9,"attrs":{"channel":"c1","amount_bucket":"ab1","merchant_category":"mc1","risk_level":"rl1"}}\n'
        )
        users = load_events(p, self.schema())
        assert [u.user_id for u in users] == ["u1", "u2"]
        assert [len(u.events) for u in users] == [1, 1]

    def test_out_of_order_timestamps_sorted(self, tmp_path):
        p = tmp_path / "e.jsonl"
        attrs = '{"channel":"c0","amount_bucket":"ab0","merchant_category":"mc0","risk_level":"rl0"}'
        p.write_text(
            f'{{"user_id":"u1","ts":5,"attrs":{attrs}}}\n'
            f'{{"user_id":"u1","ts":3,"attrs":{attrs}}}\n'
        )
        (user,) = load_events(p, self.schema())
        assert [e.timestamp for e in user.events] == [3, 5]

    def test_unknown_attribute_rejected_with_line(self, tmp_path):
        p = tmp_path / "e.jsonl"
        p.write_text(
            '{"user_id":"u1","ts":1,"attrs":{"channel":"c0"}}\n'
            '{"user_id":"u1","ts":2,"attrs":{"colour":"red"}}\n'
        )
        with pytest.raises(ParseError) as exc:
            load_events(p, self.schema())
        assert "colour" in str(exc.value) and "line 2" in str(exc.value)

    def test_malformed_line_reports_number(self, tmp_path):
        p = tmp_path / "e.jsonl"
        p.write_text('{"user_id":"u1","ts":1,"attrs":{}}\n{oops\n')
        with pytest.raises(ParseError) as exc:
            load_events(p, self.schema())
        assert "line 2" in str(exc.value)

    def test_round_trip(self, tmp_path):
        users, _ = generate_synthetic(small_spec(fraud_rate=0.05))
        p = tmp_path / "rt.jsonl"
        write_events(users, p)
        loaded = load_events(p, synthetic_schema(small_spec()))
        assert len(loaded) == len(users)
        for a, b in zip(users, loaded):
            assert a.user_id == b.user_id
            assert [e.timestamp for e in a.events] == [e.timestamp for e in b.events]
            assert [e.attributes for e in a.events] == [e.attributes for e in b.events]
            assert [e.label for e in a.events] == [e.label for e in b.events]
            assert [e.counterparty_id for e in a.events] == [e.counterparty_id for e in b.events]


class TestGenerateSynthetic:
    def test_zero_fraud_rate_has_no_positive_labels(self):
        users, _ = generate_synthetic(small_spec(fraud_rate=0.0))
        assert all(ev.label == 0 for u in users for ev in u.events)

    def test_deterministic_periodicity(self):
        """One 1-token motif, period 3, jitter 0, no background noise."""
        schema = synthetic_schema(small_spec())
        tok = tuple(schema.values[n][0] for n in schema.names)
        spec = small_spec(
            num_users=1,
            num_clusters=1,
            motifs=[Motif(tokens=[tok], period=3, jitter=0.0)],
            events_per_user=(9, 9),
        )
        (user,), _ = generate_synthetic(spec)
        hits = [i for i, ev in enumerate(user.events)
                if tuple(ev.attributes[n] for n in schema.names) == tok]
        assert set(hits) >= {0, 3, 6}

    def test_fixed_seed_byte_identical(self):
        a, _ = generate_synthetic(small_spec(fraud_rate=0.02))
        b, _ = generate_synthetic(small_spec(fraud_rate=0.02))
        assert hashlib.sha256(corpus_bytes(a)).hexdigest() == hashlib.sha256(corpus_bytes(b)).hexdigest()

    def test_timestamps_nondecreasing(self):
        users, _ = generate_synthetic(small_spec())
        for u in users:
            ts = [e.timestamp for e in u.events]
            assert ts == sorted(ts)

    def test_cluster_members_share_motifs(self):
        users, meta = generate_synthetic(small_spec())
        assert set(meta["clusters"].values()) == {0, 1, 2}
        assert len(meta["motifs"]) == 3

    def test_fraud_events_use_fraud_merchants(self):
        users, meta = generate_synthetic(small_spec(fraud_rate=0.2, num_users=20))
        fraud_cp = {ev.counterparty_id for u in users for ev in u.events if ev.label == 1}
        assert fraud_cp and fraud_cp <= set(meta["fraud_merchants"])

    def test_motif_too_large_for_space_rejected(self):
        with pytest.raises(ConfigError):
            small_spec(cardinalities={"channel": 2, "risk_level": 2},
                       num_clusters=4, motifs_per_cluster=2, motif_length=3).validate()

    def test_planted_motif_recoverability(self):
        """With jitter 0, every planted motif beats any non-motif 3-gram."""
        users, meta = generate_synthetic(small_spec(motif_jitter=0.0, num_users=30))
        schema = synthetic_schema(small_spec())
        grams = {}
        for u in users:
            toks = [tuple(e.attributes[n] for n in schema.names) for e in u.events]
            for i in range(len(toks) - 2):
                g = (toks[i], toks[i + 1], toks[i + 2])
                grams[g] = grams.get(g, 0) + 1
        motif_grams = set()
        for ms in meta["motifs"]:
            for m in ms:
                if len(m["tokens"]) == 3:
                    motif_grams.add(tuple(tuple(t) for t in m["tokens"]))
        assert motif_grams
        worst_motif = min(grams.get(g, 0) for g in motif_grams)
        best_other = max((c for g, c in grams.items() if g not in motif_grams), default=0)
        assert worst_motif > best_other


class TestChronologicalSplit:
    def _user(self, n, uid="u0"):
        evs = [RawEvent(user_id=uid, timestamp=10 + i, attributes={}) for i in range(n)]
        return UserRecord(user_id=uid, events=evs)

    def test_cut_arithmetic_l10(self):
        split = chronological_split([self._user(10)], (0.8, 0.1, 0.1))
        assert split.cut_for("u0") == (8, 9)

    def test_cut_arithmetic_l5(self):
        split = chronological_split([self._user(5)], (0.6, 0.2, 0.2))
        assert split.cut_for("u0") == (3, 4)

    def test_short_user_goes_to_train_with_skip_report(self):
        split = chronological_split([self._user(2)], (0.8, 0.1, 0.1))
        assert split.cut_for("u0") == (2, 2)
        assert split.skipped == ["u0"]

    def test_bad_ratios_rejected(self):
        with pytest.raises(ConfigError):
            chronological_split([self._user(5)], (0.5, 0.2, 0.2))
        with pytest.raises(ConfigError):
            chronological_split([self._user(5)], (1.2, -0.1, -0.1))

    @settings(max_examples=50, deadline=None)
    @given(st.integers(3, 500), st.integers(0, 10_000))
    def test_split_monotonicity_invariant(self, n, seed):
        rng = np.random.default_rng(seed)
        ts = np.sort(rng.integers(0, 10_000, size=n))
        evs = [RawEvent(user_id="u", timestamp=int(t), attributes={}) for t in ts]
        split = chronological_split([UserRecord(user_id="u", events=evs)], (0.7, 0.15, 0.15))
        c1, c2 = split.cut_for("u")
        assert 0 <= c1 <= c2 <= n
        tr = ts[:c1]
        va = ts[c1:c2]
        te = ts[c2:]
        if len(tr) and len(va):
            assert tr.max() <= va.min()
        if len(va) and len(te):
            assert va.max() <= te.min()
        if len(tr) and len(te):
            assert tr.max() <= te.min()

    def test_split_save_load_round_trip(self, tmp_path):
        users = [self._user(10, "ua"), self._user(2, "ub")]
        split = chronological_split(users, (0.8, 0.1, 0.1))
        p = tmp_path / "split.json"
        split.save(p)
        loaded = events.DatasetSplit.load(p, users)
        assert loaded.cuts == split.cuts and loaded.skipped == split.skipped
