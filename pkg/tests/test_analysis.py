
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mocritic.analysis import (
    Match,
    ablate,
    elo_expected,
    elo_tournament,
    elo_update,
    ensemble_eval,
    ensemble_train,
    load_features,
    load_matches,
    sensitivity_sweep,
    win_rate_matrix,
    write_features,
)
from mocritic.autodiff import ContractViolation
from mocritic.preference import PreferencePair, synth_pool

# ----------------------------------------------------------------------- Elo

# Three matches among A, B, C starting at 1500, worked through at 40 digits
# (mpmath) outside the package:
#   A beats B         -> A 1516, B 1484
#   B ties C          -> B 1484.7363067935..., C 1499.2636932064...
#   C beats A (b wins) -> A 1499.2298601853..., C 1516.0338330211...
HAND_LOG = [Match("A", "B", "a_wins"), Match("B", "C", "tie"), Match("A", "C", "b_wins")]
HAND_RATINGS = {
    "A": 1499.229860185357269858961461223831,
    "B": 1484.736306793521992876662937413113,
    "C": 1516.033833021120737264375601363056,
}


def test_expected_scores():
    assert elo_expected(1500, 1500) == (0.5, 0.5)
    e_a, e_b = elo_expected(1500, 1900)
    assert e_a == pytest.approx(1 / 11, abs=1e-15)
    assert e_a + e_b == pytest.approx(1.0, abs=2e-16)


def test_equal_rating_win_is_sixteen():
    a, b = elo_update(1500.0, 1500.0, "a_wins", 32)
    assert (a - 1500.0, b - 1500.0) == (16.0, -16.0)
    assert elo_update(1500.0, 1500.0, "tie") == (1500.0, 1500.0)


def test_underdog_win():
    a, _ = elo_update(1500.0, 1900.0, "a_wins")
    assert a - 1500.0 == pytest.approx(32 * 10 / 11, abs=1e-12)


def test_hand_computed_log():
    table = elo_tournament(HAND_LOG)
    for name, r in HAND_RATINGS.items():
        assert table.ratings[name] == pytest.approx(r, abs=1e-9)


def test_order_dependence_counterexample():
    reordered = [HAND_LOG[2], HAND_LOG[0], HAND_LOG[1]]
    a = elo_tournament(HAND_LOG).ratings
    b = elo_tournament(reordered).ratings
    assert any(abs(a[k] - b[k]) > 1e-6 for k in a)


def test_empty_and_tie_only_logs():
    assert elo_tournament([], subsets=["x", "y"]).ratings == {"x": 1500.0, "y": 1500.0}
    ties = [Match("x", "y", "tie"), Match("y", "z", "tie")]
    table = elo_tournament(ties)
    assert set(table.ratings.values()) == {1500.0}
    _, rate = win_rate_matrix(ties)
    assert not rate.any()


def test_unknown_subset_and_outcome():
    with pytest.raises(ContractViolation):
        elo_tournament([Match("x", "q", "tie")], subsets=["x", "y"])
    with pytest.raises(ContractViolation):
        Match("x", "y", "draw")


@settings(max_examples=50, deadline=None)
@given(st.floats(0, 3000), st.floats(0, 3000), st.sampled_from(["a_wins", "b_wins", "tie"]))
def test_zero_sum(ra, rb, outcome):
    na, nb = elo_update(ra, rb, outcome)
    assert (na - ra) + (nb - rb) == pytest.approx(0.0, abs=1e-9)


@settings(max_examples=50, deadline=None)
@given(st.floats(-1000, 1000), st.floats(0.01, 500))
def test_expected_strictly_monotone(d, step):
    assert elo_expected(d + step, 0)[0] > elo_expected(d, 0)[0]


def test_win_rate_ties_in_denominator():
    log = [Match("a", "b", "a_wins"), Match("a", "b", "tie"), Match("b", "a", "a_wins"), Match("a", "b", "a_wins")]
    names, rate = win_rate_matrix(log)
    assert names == ["a", "b"]
    # a won 2 of 4, b won 1 of 4, one tie
    assert rate[0, 1] == 0.5 and rate[1, 0] == 0.25
    assert rate[0, 1] + rate[1, 0] <= 1


def test_match_file_parsing(tmp_path):
    f = tmp_path / "m.csv"
    f.write_text("a,b,outcome\nx,y,a_wins\nx,y,lose\n")
    with pytest.raises(ContractViolation, match=r"m\.csv:3"):
        load_matches(f)
    g = tmp_path / "m.jsonl"
    g.write_text('{"a": "x", "b": "y", "outcome": "tie"}\n')
    assert load_matches(g) == [Match("x", "y", "tie")]


# ---------------------------------------------------------------- sweep


def test_sweep_zero_scale_is_all_ties():
    pool = synth_pool(4, seed=0)

    def scorer(clips):
        return np.array([-np.abs(np.diff(c.rotations, axis=0)).sum() for c in clips])

    rows = sensitivity_sweep(scorer, pool, [0.0, 0.1], seeds=[0, 1])
    assert rows[0].accuracy == 0.0 and rows[0].std_score == pytest.approx(np.std(scorer(list(pool.values()))))
    assert rows[1].accuracy == 1.0
    again = sensitivity_sweep(scorer, pool, [0.0, 0.1], seeds=[0, 1])
    assert again == rows


def test_sweep_rejects_unsorted_and_empty(tmp_path):
    with pytest.raises(ContractViolation):
        sensitivity_sweep(lambda c: np.zeros(len(c)), synth_pool(2, 0), [0.2, 0.1])
    with pytest.raises(ContractViolation):
        sensitivity_sweep(lambda c: np.zeros(len(c)), {}, [0.1])


# ------------------------------------------------------------- ensemble


def feature_world(n=600, seed=0, noise=True):
    """Per-motion features where 'good' is a noisy view of latent quality."""
    rng = np.random.default_rng(seed)
    quality = rng.normal(size=2 * n)
    cols = {
        "good": quality + 0.3 * rng.normal(size=2 * n),
        "weak": -0.5 * quality + rng.normal(size=2 * n),
        "noise": rng.normal(size=2 * n),
    }
    names = list(cols) if noise else ["good", "weak"]
    table = {f"m{i:04d}": np.array([cols[c][i] for c in names]) for i in range(2 * n)}
    pairs = []
    for i in range(n):
        a, b = f"m{2 * i:04d}", f"m{2 * i + 1:04d}"
        pairs.append(PreferencePair(a, b) if quality[2 * i] > quality[2 * i + 1] else PreferencePair(b, a))
    return names, table, pairs


@pytest.mark.parametrize("method", ["logistic", "linear_margin", "mlp"])
def test_ensemble_learns_orientation(method):
    names, table, pairs = feature_world(1000)
    model = ensemble_train(names, table, pairs[:800], method)
    acc = ensemble_eval(model, names, table, pairs[800:]).accuracy
    assert acc > 0.85


def test_noise_feature_coefficient_small():
    names, table, pairs = feature_world(2000, seed=3)
    coef = ensemble_train(names, table, pairs, "logistic").coefficients()
    assert coef["good"] > 1.0 and coef["weak"] < 0
    assert abs(coef["noise"]) < 0.1


def test_frozen_normalization_reproduces_predictions():
    names, table, pairs = feature_world(200)
    model = ensemble_train(names, table, pairs, "logistic")
    x = np.stack(list(table.values()))
    s1 = model.score(x)
    standardized = model.standardize(x)
    s2 = standardized @ model.weights["w"]
    np.testing.assert_array_equal(s1, s2)


def test_constant_feature_dropped_with_warning():
    names, table, pairs = feature_world(100)
    table = {k: np.append(v, 7.0) for k, v in table.items()}
    with pytest.warns(UserWarning, match="constant"):
        model = ensemble_train(names + ["flat"], table, pairs, "logistic")
    assert "flat" not in model.features


def test_separating_feature_train_accuracy():
    names, table, pairs = feature_world(100)
    sep = {}
    for p in pairs:
        sep[p.better], sep[p.worse] = 1.0, 0.0
    table = {k: np.append(v, sep[k]) for k, v in table.items()}
    for method in ("logistic", "linear_margin", "mlp"):
        model = ensemble_train(names + ["sep"], table, pairs, method)
        assert ensemble_eval(model, names + ["sep"], table, pairs).accuracy >= 0.5


def test_ablation_shapes():
    names, table, pairs = feature_world(300)
    res = ablate(names, table, pairs[:200], pairs[200:], "logistic", order=["good", "weak", "noise"])
    assert [f for f, _ in res.added] == [["good"], ["good", "weak"], ["good", "weak", "noise"]]
    removed = dict(res.removed)
    assert removed["good"] < removed["noise"]


def test_feature_csv_roundtrip(tmp_path):
    names, table, _ = feature_world(5)
    write_features(names, table, tmp_path / "f.csv")
    n2, t2 = load_features(tmp_path / "f.csv")
    assert n2 == names and all(np.array_equal(t2[k], table[k]) for k in table)
    (tmp_path / "g.csv").write_text("motion,a\nx,nan\n")
    with pytest.raises(ContractViolation, match=":2"):
        load_features(tmp_path / "g.csv")
