import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.stats import chisquare

from streamwsl.active import (
    AlPolicyConfig,
    BudgetState,
    Decision,
    StreamSelector,
    adaptive_window,
    is_uncertain,
    pool_select_kmeans,
    pool_select_uniform,
    stream_decide,
)
from streamwsl.errors import ConfigError, ContractViolation, InvalidInputError
from streamwsl.scoring import ConsistencyScore, UncertaintyScore

UNCERTAIN = ConsistencyScore(0.1, 3)
CONFIDENT = ConsistencyScore(0.9, 3)


def run(cfg, scores, n_u=None, seed=0):
    sel = StreamSelector(cfg, n_u or len(scores), seed)
    return [i for i, s in enumerate(scores) if sel.decide(s, i) is Decision.QUERY]


# --- adaptive window --------------------------------------------------------

def test_adaptive_window_values():
    assert adaptive_window(2000, 500, 0.5) == 2
    assert adaptive_window(11300, 1130, 0.4) == 4
    assert adaptive_window(100, 100, 1e-9) == 0


def test_adaptive_window_grows_with_stream_and_rejects_alpha():
    assert [adaptive_window(n, 10, 0.5) for n in (100, 200, 400)] == [5, 10, 20]
    for alpha in (0.0, 10.0, -1.0):
        with pytest.raises(ConfigError):
            adaptive_window(100, 10, alpha)
    with pytest.raises(ConfigError):
        AlPolicyConfig("adaptive_window", budget=2, alpha=3.0)


# --- stream decisions -------------------------------------------------------

def test_budget_exhausted_skips():
    cfg = AlPolicyConfig("fixed_window", budget=1, delta_fixed=0)
    assert run(cfg, [UNCERTAIN] * 5) == [0]


def test_fixed_window_example():
    cfg = AlPolicyConfig("fixed_window", budget=10, delta_fixed=6)
    scores = [CONFIDENT] * 20
    scores[10] = scores[14] = UNCERTAIN
    assert run(cfg, scores) == [10]


def test_adaptive_window_example():
    # n_U = 20, k = 5, alpha = 0.5 -> delta = 2
    cfg = AlPolicyConfig("adaptive_window", budget=5, alpha=0.5)
    scores = [UNCERTAIN] * 4 + [CONFIDENT] * 16
    assert run(cfg, scores) == [0, 3]


def test_coin_flip_needs_uncertainty_and_coin():
    cfg = AlPolicyConfig("coin_flip", budget=100, coin_prob=1.0)
    assert run(cfg, [CONFIDENT, UNCERTAIN, CONFIDENT, UNCERTAIN]) == [1, 3]
    half = AlPolicyConfig("coin_flip", budget=4000, coin_prob=0.5)
    frac = len(run(half, [UNCERTAIN] * 4000)) / 4000
    assert 0.45 < frac < 0.55


def test_score_direction_by_type():
    assert is_uncertain(ConsistencyScore(0.3, 1), 0.4)
    assert not is_uncertain(ConsistencyScore(0.5, 1), 0.4)
    assert is_uncertain(UncertaintyScore(0.7), 0.4)
    assert not is_uncertain(UncertaintyScore(0.2), 0.4)
    assert is_uncertain(0.2, 0.4) and not is_uncertain(0.7, 0.4)


def test_out_of_order_index_is_contract_violation():
    cfg = AlPolicyConfig("fixed_window", budget=3)
    state = BudgetState(3, 10)
    rng = np.random.default_rng(0)
    stream_decide(UNCERTAIN, 5, state, cfg, rng)
    with pytest.raises(ContractViolation):
        stream_decide(UNCERTAIN, 5, state, cfg, rng)
    with pytest.raises(ContractViolation):
        stream_decide(UNCERTAIN, 2, state, cfg, rng)


def test_pool_variant_rejected_by_stream_decide():
    with pytest.raises(ConfigError):
        stream_decide(UNCERTAIN, 0, BudgetState(1, 1), AlPolicyConfig("uniform_pool", 1), np.random.default_rng())


stream_cases = st.tuples(
    st.lists(st.booleans(), min_size=1, max_size=120),
    st.integers(1, 40),
    st.sampled_from(["coin_flip", "fixed_window", "adaptive_window"]),
    st.integers(0, 8),
    st.integers(0, 2**16),
)


def make_cfg(variant, k, delta):
    return AlPolicyConfig(variant, budget=k, delta_fixed=delta, alpha=min(0.5, k / 2))


@settings(max_examples=150, deadline=None)
@given(stream_cases)
def test_budget_safety_and_window_exclusion(case):
    pattern, k, variant, delta, seed = case
    scores = [UNCERTAIN if u else CONFIDENT for u in pattern]
    cfg = make_cfg(variant, k, delta)
    picked = run(cfg, scores, seed=seed)
    assert len(picked) <= k
    assert all(pattern[i] for i in picked)
    if variant != "coin_flip":
        d = delta if variant == "fixed_window" else adaptive_window(len(scores), k, cfg.alpha)
        assert all(b - a > d for a, b in zip(picked, picked[1:]))


@settings(max_examples=100, deadline=None)
@given(stream_cases, st.lists(st.booleans(), max_size=60))
def test_prefix_consistency(case, other_suffix):
    pattern, k, variant, delta, seed = case
    cut = len(pattern) // 2
    cfg = make_cfg(variant, k, delta)
    n_u = len(pattern) + 60  # known stream length, independent of the suffix contents
    full = [UNCERTAIN if u else CONFIDENT for u in pattern]
    alt = full[:cut] + [UNCERTAIN if u else CONFIDENT for u in other_suffix]
    a = [i for i in run(cfg, full, n_u, seed) if i < cut]
    b = [i for i in run(cfg, alt, n_u, seed) if i < cut]
    assert a == b


def test_adaptive_coverage_on_uniform_uncertainty():
    n_u, k, alpha = 1000, 25, 0.5
    picked = run(AlPolicyConfig("adaptive_window", budget=k, alpha=alpha), [UNCERTAIN] * n_u)
    delta = adaptive_window(n_u, k, alpha)
    assert len(picked) == k
    assert np.all(np.diff(picked) == delta + 1)
    assert picked[-1] - picked[0] + 1 >= (k - 1) * (delta + 1) + 1


# --- pool policies ----------------------------------------------------------

def test_uniform_pool_examples():
    rng = np.random.default_rng(0)
    scores = [ConsistencyScore(v, 1) for v in np.linspace(0, 1, 20)]
    assert pool_select_uniform(scores, 0.4, 0, rng) == set()
    assert pool_select_uniform([CONFIDENT] * 5, 0.4, 3, rng) == set()
    ten = [UNCERTAIN] * 10 + [CONFIDENT] * 10
    assert pool_select_uniform(ten, 0.4, 10, rng) == set(range(10))
    with pytest.raises(InvalidInputError):
        pool_select_uniform(ten, 0.4, -1, rng)


def test_uniform_pool_is_uniform():
    scores = [UNCERTAIN if i % 2 == 0 else CONFIDENT for i in range(20)]
    counts = np.zeros(20)
    for t in range(10_000):
        for i in pool_select_uniform(scores, 0.4, 3, np.random.default_rng(t)):
            counts[i] += 1
    assert counts[1::2].sum() == 0
    assert chisquare(counts[::2]).pvalue > 0.01


def test_kmeans_pool_examples():
    X = np.array([[0.0, 0], [0.1, 0], [10, 10], [10.1, 10]])
    picked = pool_select_kmeans(X, 2, rng=np.random.default_rng(0))
    assert len(picked & {0, 1}) == 1 and len(picked & {2, 3}) == 1
    assert pool_select_kmeans(X, 4, rng=np.random.default_rng(0)) == {0, 1, 2, 3}
    same = np.ones((5, 3))
    a = pool_select_kmeans(same, 2, rng=np.random.default_rng(3))
    b = pool_select_kmeans(same, 2, rng=np.random.default_rng(3))
    assert a == b and len(a) == 2
    assert a == {0, 1}
    with pytest.raises(InvalidInputError):
        pool_select_kmeans(X, 5)


def test_config_validation():
    with pytest.raises(ConfigError):
        AlPolicyConfig("random")
    with pytest.raises(ConfigError):
        AlPolicyConfig("coin_flip", coin_prob=0.0)
    with pytest.raises(ConfigError):
        AlPolicyConfig("fixed_window", delta_fixed=-1)
