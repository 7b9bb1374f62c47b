import csv
import dataclasses
import itertools
import json
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import stats

from ttt_gate import harness
from ttt_gate.backbone import chunk_stream, shuffle_stream, synth_corpus
from ttt_gate.harness import (
    ChunkNumericError,
    EvalConfig,
    EvalRecord,
    HarnessError,
    correlation_suite,
    decision_metrics,
    emit_report,
    evaluate,
    mcnemar,
    oracle_recovery,
    relative_flops,
    run_policy_suite,
    topk_overlap,
)
from ttt_gate.ttt_layer import NonFiniteError, TTTLayer

SMALL = EvalConfig(seq_len=128, chunk_size=32, n_cal=4)


@pytest.fixture(scope="module")
def corpus():
    return synth_corpus(7, 6, 128)


@pytest.fixture(scope="module")
def suite(corpus, backbone, layer):
    return run_policy_suite(corpus, backbone, layer, SMALL)


def fake_records(adv_pairs, signals=None):
    recs = []
    for i, (s, u) in enumerate(adv_pairs):
        sig = signals[i] if signals is not None else s
        recs.append(EvalRecord(i // 4, i % 4, sig, sig / 2, s, u))
    return recs


# --- arithmetic -----------------------------------------------------------------------------

def test_relative_flops_table():
    assert relative_flops("skip") == 1.0
    assert relative_flops("update", 1) == 3.0
    assert relative_flops("gate", 0.5) == 2.0
    assert relative_flops("gate", 0.0) == 1.0
    assert [relative_flops("update", n) for n in (0, 1, 2, 4)] == [1.0, 3.0, 5.0, 9.0]
    with pytest.raises(ValueError):
        relative_flops("gate", 1.5)


def test_oracle_recovery_examples():
    assert round(oracle_recovery(2.324, 1.977, 1.935), 3) == 0.892
    assert oracle_recovery(2.0, 1.5, 1.5) == 1.0
    assert oracle_recovery(2.0, 2.0, 1.5) == 0.0
    with pytest.raises(HarnessError):
        oracle_recovery(1.0, 0.9, 1.0)


def test_mcnemar_hand_cases():
    assert mcnemar(10, 0)[0] == 8.1
    assert mcnemar(10, 10)[0] == 0.05
    assert mcnemar(0, 0) == (None, None)
    stat, p = mcnemar(7, 2)
    assert p == pytest.approx(stats.chi2.sf(stat, 1), rel=1e-12)


def test_eval_config_validation():
    for kw in ({"chunk_size": 30}, {"rho": 0.0}, {"alpha": 2.0}, {"signal": "x"}, {"carry": "x"},
               {"oracle_scope": "x"}, {"n_cal": 0}):
        with pytest.raises(ValueError):
            EvalConfig(**kw)


# --- policy suite --------------------------------------------------------------------------------

def test_record_invariants(suite):
    records, ledger = suite
    assert len(records) == 24 == ledger.chunk_count
    for r in records:
        assert r.advantage == r.ce_skip - r.ce_update
        for p, d in r.decisions.items():
            assert r.ce_realized[p] == (r.ce_update if d else r.ce_skip)
            assert r.flops_charged[p] == (3.0 if d else 1.0)


def test_skip_policy_is_mean_ce_skip(suite):
    records, ledger = suite
    summary = harness.summarize(records, ledger, SMALL)
    assert summary.mean_ce["skip"] == math.fsum(r.ce_skip for r in records) / len(records)
    assert summary.mean_ce["update1"] == math.fsum(r.ce_update for r in records) / len(records)


def test_ledger_consistency_and_budget(suite):
    records, ledger = suite
    K = len(records)
    for p in ledger.update_count:
        n = sum(r.decisions[p] for r in records)
        assert ledger.update_count[p] == n
        assert ledger.relative_flops[p] == pytest.approx(relative_flops("gate", n / K), abs=1e-15)
    assert ledger.update_count["random"] == ledger.update_count["oracle"] == round(0.5 * K)


def test_oracle_dominates_random(suite):
    records, _ = suite
    for seed in range(20):
        rnd = harness.random_select(len(records), 0.5, seed)
        rand_total = math.fsum(r.ce_update if d else r.ce_skip for r, d in zip(records, rnd))
        assert math.fsum(r.ce_realized["oracle"] for r in records) <= rand_total


def test_policy_isolation(corpus, backbone, layer, suite):
    full, _ = suite
    for drop in ("gate", "random", "oracle", "update1"):
        kept = tuple(p for p in harness.POLICIES if p != drop)
        part, _ = run_policy_suite(corpus, backbone, layer, SMALL, kept, records=full)
        for a, b in zip(full, part):
            for p in kept:
                assert a.decisions[p] == b.decisions[p] and a.ce_realized[p] == b.ce_realized[p]


def test_single_chunk_full_budget(backbone, layer):
    toks = synth_corpus(1, 1, 64)
    cfg = EvalConfig(seq_len=64, chunk_size=64, rho=1.0)
    records, ledger = run_policy_suite(toks, backbone, layer, cfg)
    (r,) = records
    for p in ("oracle", "random", "gate", "update1"):
        assert r.decisions[p] and r.ce_realized[p] == r.ce_update


def test_empty_corpus_is_an_error(backbone, layer):
    with pytest.raises(HarnessError):
        run_policy_suite(np.arange(10), backbone, layer, SMALL)


def test_unknown_policy(suite, corpus, backbone, layer):
    with pytest.raises(HarnessError):
        run_policy_suite(corpus, backbone, layer, SMALL, ("skip", "nope"), records=suite[0])


def test_non_finite_is_located(corpus, backbone, layer, monkeypatch):
    calls = {"n": 0}
    real = TTTLayer.update_forward

    def flaky(self, state, views):
        calls["n"] += 1
        if calls["n"] == 6:
            raise NonFiniteError("boom", 3)
        return real(self, state, views)

    monkeypatch.setattr(TTTLayer, "update_forward", flaky)
    with pytest.raises(ChunkNumericError) as err:
        harness.measure_corpus(corpus, backbone, layer, SMALL)
    assert (err.value.sequence_id, err.value.chunk_index) == (1, 1)


@pytest.mark.parametrize("K", [1, 2, 5, 8, 12])
def test_oracle_brute_force(K):
    r = np.random.default_rng(K)
    recs = fake_records(r.uniform(1, 3, size=(K, 2)))
    for rho in (0.25, 0.5, 0.75):
        cfg = EvalConfig(seq_len=4, chunk_size=1, rho=rho)
        out, _ = run_policy_suite(None, None, None, cfg, ("oracle",), records=recs)
        got = math.fsum(x.ce_realized["oracle"] for x in out)
        m = harness.budget(K, rho)
        best = min(
            math.fsum(x.ce_update if i in combo else x.ce_skip for i, x in enumerate(recs))
            for combo in map(set, itertools.combinations(range(K), m))
        )
        assert got == best


def test_recovery_bracketing():
    r = np.random.default_rng(0)
    skip = r.uniform(2, 3, size=40)
    recs = fake_records(np.stack([skip, skip - r.uniform(0, 0.5, size=40)], axis=1), r.normal(size=40))
    out, ledger = run_policy_suite(None, None, None, dataclasses.replace(SMALL, n_cal=8), records=recs)
    s = harness.summarize(out, ledger, SMALL)
    lo = math.fsum(x.ce_update for x in recs) / 40
    for p, ce in s.mean_ce.items():
        assert lo - 1e-12 <= ce <= s.mean_ce["skip"] + 1e-12


def test_sequence_carry_and_oracle_scope(corpus, backbone, layer):
    cfg = dataclasses.replace(SMALL, carry="sequence", oracle_scope="sequence")
    records, ledger = run_policy_suite(corpus, backbone, layer, cfg)
    by_seq = {}
    for r in records:
        by_seq.setdefault(r.sequence_id, []).append(r.decisions["oracle"])
    assert all(sum(v) == 2 for v in by_seq.values())
    first = [r for r in records if r.chunk_index == 0]
    base, _ = run_policy_suite(corpus, backbone, layer, SMALL)
    # chunk 0 sees the fresh state under either carry mode
    assert [r.ce_update for r in first] == [r.ce_update for r in base if r.chunk_index == 0]


# --- statistics ------------------------------------------------------------------------------

def pearson_ref(x, y):
    n = len(x)
    mx, my = math.fsum(x) / n, math.fsum(y) / n
    sxy = math.fsum((a - mx) * (b - my) for a, b in zip(x, y))
    sxx = math.fsum((a - mx) ** 2 for a in x)
    syy = math.fsum((b - my) ** 2 for b in y)
    return sxy / math.sqrt(sxx * syy)


def ranks_ref(x):
    order = sorted(range(len(x)), key=lambda i: x[i])
    ranks = [0.0] * len(x)
    i = 0
    while i < len(order):
        j = i
        while j + 1 < len(order) and x[order[j + 1]] == x[order[i]]:
            j += 1
        for k in range(i, j + 1):
            ranks[order[k]] = (i + j) / 2 + 1
        i = j + 1
    return ranks


def test_correlation_examples():
    adv = [0.3, -0.1, 0.5, 0.2, 0.0, 0.9]
    recs = fake_records([(1.0 + a, 1.0) for a in adv], adv)
    r, rho, ov = correlation_suite(recs)
    assert r == pytest.approx(1.0, abs=1e-12) and rho == pytest.approx(1.0, abs=1e-12) and ov == 1.0
    neg = fake_records([(1.0 + a, 1.0) for a in adv], [-a for a in adv])
    assert correlation_suite(neg)[0] == pytest.approx(-1.0, abs=1e-12)
    with pytest.raises(ValueError):
        correlation_suite(fake_records([(1.0, 0.5)] * 5, [2.0] * 5))
    with pytest.raises(ValueError):
        correlation_suite(recs[:2])


@given(st.integers(0, 10**6))
def test_correlations_match_reference(seed):
    r = np.random.default_rng(seed)
    sig = np.round(r.normal(size=50), 1)  # rounding creates ties for the rank path
    adv = r.normal(size=50)
    recs = fake_records([(1.0 + a, 1.0) for a in adv], sig)
    pr, sr, ov = correlation_suite(recs)
    advs = [x.advantage for x in recs]
    assert abs(pr - pearson_ref(list(sig), advs)) <= 1e-10
    assert abs(sr - pearson_ref(ranks_ref(list(sig)), ranks_ref(advs))) <= 1e-10
    m = round(0.5 * 50)
    top_s = set(sorted(range(50), key=lambda i: (-sig[i], i))[:m])
    top_a = set(sorted(range(50), key=lambda i: (-advs[i], i))[:m])
    assert ov == len(top_s & top_a) / m
    assert topk_overlap(sig, advs, 0.5) == ov


def test_decision_metrics(suite):
    records, _ = suite
    acc, (stat, p, b, c) = decision_metrics(records)
    assert acc["oracle"] == 1.0
    gate_ok = np.array([x.decisions["gate"] == x.decisions["oracle"] for x in records])
    rand_ok = np.array([x.decisions["random"] == x.decisions["oracle"] for x in records])
    assert acc["gate"] == gate_ok.mean()
    assert (b, c) == (int(np.sum(gate_ok & ~rand_ok)), int(np.sum(~gate_ok & rand_ok)))
    if b + c:
        assert stat == (abs(b - c) - 1) ** 2 / (b + c)
    stripped = [dataclasses.replace(x, decisions={"gate": True}) for x in records]
    with pytest.raises(HarnessError):
        decision_metrics(stripped)


# --- ablations ---------------------------------------------------------------------------------

def test_sanity_shuffled_pairs(corpus, backbone, layer):
    (n, rn), (s, rs), ratios = harness.sanity_shuffled(corpus, backbone, layer, SMALL)
    assert n.config["seed"] == s.config["seed"]
    assert n.config["input"] == "normal" and s.config["input"] == "shuffled"
    assert set(ratios) == {"normal", "shuffled"}
    shuf = shuffle_stream(corpus, 128, harness.derive_seed(SMALL.seed, "shuffle"))
    for a, b in zip(chunk_stream(corpus, 128, 128), chunk_stream(shuf, 128, 128)):
        assert sorted(np.append(a.tokens, a.labels[-1])) == sorted(np.append(b.tokens, b.labels[-1]))


def test_ablate_diagonal_zero_eta(corpus, backbone, layer):
    frozen = TTTLayer(layer.config, dataclasses.replace(layer.params, lr_gate_bias=-1e4))
    (a, ra), (b, rb), deltas = harness.ablate_diagonal(corpus, backbone, frozen, SMALL)
    assert all(v == 0.0 for v in deltas.values())
    assert [x.ce_update for x in ra] == [x.ce_update for x in rb]
    assert a.config["mask_diagonal"] == 0 and b.config["mask_diagonal"] == -1


def test_ablate_diagonal_reports_deltas(corpus, backbone, layer):
    _, _, deltas = harness.ablate_diagonal(corpus, backbone, layer, SMALL, ("skip", "update1"))
    assert deltas["skip"] == 0.0 and abs(deltas["update1"]) < 0.05


def test_delta_signal_charges_overhead(suite):
    records, _ = suite
    cfg = dataclasses.replace(SMALL, signal="delta")
    out, ledger = run_policy_suite(None, None, None, cfg, records=records)
    assert ledger.signal_overhead["gate"] == 2.0
    assert ledger.with_overhead("gate") == ledger.relative_flops["gate"] + 2.0
    assert ledger.signal_overhead["random"] == 0.0


# --- report files -------------------------------------------------------------------------------

def test_emit_report(tmp_path, suite):
    records, ledger = suite
    summary = harness.summarize(records, ledger, SMALL, {"note": "x"})
    rp, cp = emit_report(summary, records, tmp_path / "a")
    data = json.loads(rp.read_text())
    harness.validate_report(data)
    assert data["perplexity"]["skip"] == pytest.approx(math.exp(data["mean_ce"]["skip"]), rel=1e-15)
    assert data["config"]["note"] == "x"
    rows = list(csv.reader(cp.open()))
    assert len(rows) == len(records) + 1
    assert rows[0][:6] == list(harness.RECORD_COLUMNS)
    assert rows[0][6:8] == ["skip_decision", "skip_ce"]
    assert float(rows[1][4]) == records[0].ce_skip  # 17 significant digits round-trip exactly
    rp2, cp2 = emit_report(summary, records, tmp_path / "b")
    assert rp.read_bytes() == rp2.read_bytes() and cp.read_bytes() == cp2.read_bytes()


def test_schema_rejects_broken_report(suite):
    import jsonschema

    records, ledger = suite
    data = json.loads(harness.report_json(harness.summarize(records, ledger, SMALL)))
    del data["mean_ce"]
    with pytest.raises(jsonschema.ValidationError):
        harness.validate_report(data)


def test_emit_report_unwritable(tmp_path, suite):
    records, ledger = suite
    blocker = tmp_path / "file"
    blocker.write_text("")
    with pytest.raises(OSError):
        emit_report(harness.summarize(records, ledger, SMALL), records, blocker / "sub")


def test_evaluate_keeps_backbone_frozen(corpus, backbone, layer):
    before = backbone.content_hash()
    evaluate(corpus, backbone, layer, SMALL)
    assert backbone.content_hash() == before
