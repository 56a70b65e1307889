import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from biteacq.scene import default_oracle, generate_trial_dataset
from biteacq.stats import (
    CoverageError, EnumerationLimitError, Hypothesis, SuccessTable, TrialParseError, TrialRecord, analyze,
    bonferroni_gate, bonferroni_threshold, contingency, default_hypotheses, expected_success_of_proposal,
    fisher_exact, ingest_trials, ooc_similarity, random_proposal_expectation, softmax_l2, success_table,
    target_vector, write_trials,
)
from fisher_oracle import brute_fisher, closed_form_corner

HEADER = "trial_id,item,category,macro,roll,env,outcome\n"


def write_csv(tmp_path, body, name="t.csv"):
    p = tmp_path / name
    p.write_text(HEADER + body)
    return p


def rec(i, item="kiwi", macro="VS", roll=0, env="ISO", outcome="success", cat="non-flat"):
    return TrialRecord(f"t{i}", item, cat, macro, roll, env, outcome)


# ---------------------------------------------------------------- ingest

def test_generated_720_rows_round_trip(tmp_path):
    recs = generate_trial_dataset(default_oracle(), 10, seed=3)
    assert len(recs) == 720
    write_trials(recs, tmp_path / "t.csv")
    assert ingest_trials(tmp_path / "t.csv") == recs


def test_discard_kept_but_not_counted(tmp_path):
    p = write_csv(tmp_path, "a,kiwi,,VS,0,ISO,success\nb,kiwi,,VS,0,ISO,discard\n")
    recs = ingest_trials(p)
    assert len(recs) == 2
    assert success_table(recs).n("kiwi", "ISO", "VS-0") == 1


@pytest.mark.parametrize("row,line_no", [
    ("a,kiwi,,XX,0,ISO,success\n", 2),
    ("a,kiwi,,VS,45,ISO,success\n", 2),
    ("a,kiwi,,VS,0,TABLE,success\n", 2),
    ("a,kiwi,,VS,0,ISO,maybe\n", 2),
    ("a,kiwi,,VS,0,ISO\n", 2),
    ("a,kiwi,,VS,0,ISO,success\na,kiwi,,VS,0,ISO,failure\n", 3),
])
def test_parse_errors_report_line(tmp_path, row, line_no):
    with pytest.raises(TrialParseError) as err:
        ingest_trials(write_csv(tmp_path, row))
    assert err.value.line == line_no


def test_bad_header(tmp_path):
    p = tmp_path / "h.csv"
    p.write_text("id,item\n")
    with pytest.raises(TrialParseError):
        ingest_trials(p)


def test_mirror_symmetric(tmp_path):
    p = write_csv(tmp_path, "a,kiwi,,VS,0,ISO,success\nb,kiwi,,VS,0,ISO,failure\nc,kiwi,,VS,0,ISO,success\n")
    t = success_table(ingest_trials(p, mirror_symmetric=True))
    assert t.rate("kiwi", "ISO", "VS-0") == t.rate("kiwi", "ISO", "VS-90") == pytest.approx(2 / 3)


def test_symmetric_category_emits_single_roll():
    recs = generate_trial_dataset(default_oracle(), 10, seed=0, symmetric=["leafy"])
    assert sum(r.category == "leafy" for r in recs) == 90
    assert len(recs) == 630


# ---------------------------------------------------------------- tables

def test_rate_arithmetic():
    recs = [rec(i, outcome="success" if i < 7 else "failure") for i in range(10)]
    assert success_table(recs).rate("kiwi", "ISO", "VS-0") == pytest.approx(0.7)


def test_rate_order_invariant():
    recs = generate_trial_dataset(default_oracle(), 5, seed=1)
    a = success_table(recs)
    b = success_table(list(reversed(recs)))
    assert a.counts == b.counts


def test_full_dataset_has_no_gaps():
    t = success_table(generate_trial_dataset(default_oracle(), 10, seed=0))
    assert t.gaps() == []


def test_target_vector_and_gap():
    t = success_table(generate_trial_dataset(default_oracle(), 10, seed=0))
    v = target_vector(t, "long", "ISO", [0.9, 0.1, 0.2, 0.8])
    np.testing.assert_array_equal(v[:4], [0.2, 0.8, 0.9, 0.1])
    np.testing.assert_array_equal(v[4:], t.rates("long", "ISO"))
    partial = success_table([rec(0)])
    with pytest.raises(CoverageError) as err:
        target_vector(partial, "kiwi", "ISO", [0, 0, 1, 1])
    assert len(err.value.gaps) == 5


def test_empirical_rates_consistent_with_binomial_noise():
    oracle = default_oracle()
    t = success_table(generate_trial_dataset(oracle, 10, seed=4))
    diffs, expected = [], []
    for (cat, env), row in oracle.p.items():
        est = t.rates(cat, env)
        diffs.extend(np.abs(est - row))
        # mean absolute deviation of Binomial(10, p)/10 is below its standard deviation
        expected.extend(np.sqrt(row * (1 - row) / 10))
    assert np.mean(diffs) <= np.mean(expected) * 1.25


# ---------------------------------------------------------------- fisher

def test_fisher_modal_table_is_one():
    assert fisher_exact([[5, 5], [5, 5]]) == 1.0


def test_fisher_corner_value():
    p = fisher_exact([[10, 0], [0, 10]])
    assert p == pytest.approx(closed_form_corner(10), abs=1e-15)
    assert p == pytest.approx(1.082e-5, abs=1e-8)


def test_fisher_matches_brute_force_example():
    assert abs(fisher_exact([[8, 2], [3, 7]]) - brute_fisher([[8, 2], [3, 7]])) <= 1e-10


def test_fisher_sweep_small_totals():
    for n in range(0, 16):
        for a, b, c in itertools.product(range(n + 1), repeat=3):
            d = n - a - b - c
            if d < 0:
                continue
            t = [[a, b], [c, d]]
            assert abs(fisher_exact(t) - brute_fisher(t)) <= 1e-10, t


@settings(max_examples=60, deadline=None)
@given(st.lists(st.integers(0, 12), min_size=6, max_size=6))
def test_fisher_2x3_matches_brute_force(cells):
    t = [cells[:3], cells[3:]]
    assert abs(fisher_exact(t) - brute_fisher(t)) <= 1e-10


@settings(max_examples=60, deadline=None)
@given(st.lists(st.integers(0, 15), min_size=6, max_size=6), st.permutations(range(3)))
def test_fisher_symmetries(cells, perm):
    t = np.array([cells[:3], cells[3:]])
    p = fisher_exact(t)
    assert 0 < p <= 1
    assert fisher_exact(t[::-1]) == pytest.approx(p, rel=1e-12)
    assert fisher_exact(t[:, list(perm)]) == pytest.approx(p, rel=1e-12)


def test_fisher_bounds():
    with pytest.raises(EnumerationLimitError):
        fisher_exact([[101, 0], [0, 100]])
    assert fisher_exact([[101, 0], [0, 100]], max_total=400) > 0
    with pytest.raises(ValueError):
        fisher_exact([[1, 2, 3, 4], [1, 2, 3, 4]])
    with pytest.raises(ValueError):
        fisher_exact([[-1, 2], [1, 2]])


# ---------------------------------------------------------------- bonferroni

def test_bonferroni_threshold():
    assert bonferroni_threshold(0.05, 21) == pytest.approx(0.00238, abs=5e-6)
    assert round(bonferroni_threshold(0.05, 21), 4) == 0.0024


def test_bonferroni_reported_p_values():
    g = bonferroni_gate([0.0005, 0.0030], 0.05, 21)
    assert g[0].significant and g[0].significant_uncorrected
    assert not g[1].significant and g[1].significant_uncorrected


def test_bonferroni_rejects_zero_m():
    with pytest.raises(ValueError):
        bonferroni_threshold(0.05, 0)


# ---------------------------------------------------------------- hypotheses

def test_contingency_pools_groups():
    recs = [rec(0, env="ISO"), rec(1, env="WALL", outcome="failure"), rec(2, env="STACK"),
            rec(3, env="STACK", outcome="discard")]
    h = Hypothesis("x", "env", [["STACK"], ["ISO", "WALL"]])
    np.testing.assert_array_equal(contingency(recs, h), [[1, 1], [0, 1]])


def test_default_hypotheses_report():
    recs = generate_trial_dataset(default_oracle(), 10, seed=0)
    rep = analyze(recs, default_hypotheses(), m=21)
    assert len(rep["tests"]) == 12
    assert rep["corrected_threshold"] == pytest.approx(0.05 / 21)
    for t in rep["tests"]:
        assert 0 < t["p_value"] <= 1
        assert t["significant_corrected"] == (t["p_value"] < 0.05 / 21)


def test_hypothesis_from_json():
    h = Hypothesis.from_json({"name": "n", "factor": "roll", "groups": [[0], [90]], "where": {"category": ["long"]}})
    assert h.groups == [["0"], ["90"]]


def test_stack_effect_detected_with_many_trials():
    recs = generate_trial_dataset(default_oracle(), 100, seed=2)
    h = Hypothesis("non-flat TA-0 STACK vs rest", "env", [["STACK"], ["ISO", "WALL"]],
                   {"category": ["non-flat"], "macro": ["TA"], "roll": ["0"]})
    with pytest.raises(EnumerationLimitError):
        analyze(recs, [h])
    rep = analyze(recs, [h], max_total=400)
    assert rep["tests"][0]["p_value"] < 0.05


# ---------------------------------------------------------------- metrics

def table_from(rates: dict) -> SuccessTable:
    counts = {}
    for (item, env), row in rates.items():
        for a, p in zip(("VS-0", "VS-90", "TV-0", "TV-90", "TA-0", "TA-90"), row):
            s = int(round(p * 10))
            counts[(item, env, a)] = (s, 10 - s)
    return SuccessTable(counts)


def test_perfect_proposals_have_zero_regret():
    truth = table_from({("a", "ISO"): [0.1, 0.9, 0.2, 0.3, 0.4, 0.5], ("b", "WALL"): [0.8, 0.1, 0, 0, 0, 0]})
    samples = [("a", "ISO", np.array([0, 1, 0, 0, 0, 0.])), ("b", "WALL", np.array([1, 0, 0, 0, 0, 0.]))]
    s = expected_success_of_proposal(samples, truth)
    assert s.regret == 0 and s.mean == pytest.approx(0.85)


def test_random_proposals_average_true_rates():
    truth = table_from({("a", "ISO"): [0.1, 0.9, 0.2, 0.3, 0.4, 0.5]})
    rng = np.random.default_rng(0)
    samples = [("a", "ISO", rng.random(6)) for _ in range(6000)]
    s = expected_success_of_proposal(samples, truth)
    assert s.mean == pytest.approx(random_proposal_expectation([("a", "ISO")], truth), abs=0.02)


def test_lookup_miss():
    truth = table_from({("a", "ISO"): [0.5] * 6})
    with pytest.raises(KeyError):
        expected_success_of_proposal([("zzz", "ISO", np.zeros(6))], truth)


def test_similarity_identity_and_shift():
    truths = {"x": [0.9, 0.1, 0.1, 0.1, 0.1, 0.1], "y": [0.1, 0.1, 0.1, 0.1, 0.1, 0.9]}
    groups = {"x": "g1", "y": "g2"}
    rep = ooc_similarity({"q": truths["x"]}, truths, groups)
    assert rep.nearest["q"] == "x" and rep.distances["q"]["x"] == 0
    assert rep.nearest_group["q"] == "g1"
    np.testing.assert_array_equal(rep.matrix[0], [1.0, 0.0])
    shifted = ooc_similarity({"q": list(np.array(truths["x"]) + 3.0)}, truths, groups)
    assert shifted.nearest == rep.nearest
    assert softmax_l2([1, 2, 3, 4, 5, 6], [2, 3, 4, 5, 6, 7]) == pytest.approx(0, abs=1e-12)


def test_similarity_empty_group():
    with pytest.raises(ValueError):
        ooc_similarity({"q": [0] * 6}, {"x": [0] * 6}, {"x": "g1", "z": "g2"})
