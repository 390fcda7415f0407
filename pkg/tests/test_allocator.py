import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from kvhandoff.allocator import (
    N_FEATURES,
    BitAssignment,
    ControllerWeights,
    ErrorTable,
    TrainingConfig,
    allocate_exact,
    allocate_greedy,
    build_error_table,
    controller_infer,
    controller_train,
    decode_weights,
    encode_weights,
    label_calibration,
    loss_and_grad,
    objective,
    uniform_objective,
)
from kvhandoff.errors import (
    BadMagicError,
    ChecksumError,
    DimensionError,
    ModelError,
    ParameterError,
    PayloadSizeError,
    TruncatedError,
    UnsupportedVersionError,
)
from kvhandoff.handoff import ToyModel
from kvhandoff.tensorio import KVCache, SyntheticConfig, generate_synthetic_cache

from .oracles import allocator_instance, enumerate_optimum, separable_set

# a convex, strictly decreasing error row
ROW = [1.0, 0.1, 0.001, 0.0]


def _table(n, row=ROW):
    return ErrorTable(np.tile(row, (n, 1)), "analytic")


# -- error tables ----------------------------------------------------------------


@pytest.mark.parametrize("eps,exc", [
    (np.zeros((3, 3)), DimensionError),
    ([[1.0, 0.5, 0.1, 0.2]], ParameterError),
    ([[1.0, 2.0, 0.1, 0.0]], ParameterError),
    ([[-1.0, -1.0, -1.0, 0.0]], ParameterError),
    ([[np.nan, 0.5, 0.1, 0.0]], ParameterError),
])
def test_error_table_invariants(eps, exc):
    with pytest.raises(exc):
        ErrorTable(eps)


@pytest.mark.parametrize("mode", ["measured", "analytic"])
def test_constant_cache_has_zero_error(mode):
    cache = KVCache(np.full((1, 2, 5, 8), 0.3), np.full((1, 2, 5, 8), -1.25))
    assert (build_error_table(cache, mode).eps == 0).all()


@pytest.mark.parametrize("mode", ["measured", "analytic"])
def test_table_invariants_on_random_cache(mode):
    cache = generate_synthetic_cache(SyntheticConfig(seed=4, tokens=20, head_dim=40))
    eps = build_error_table(cache, mode).eps
    assert eps.shape == (20, 4)
    assert (eps[:, 3] == 0).all()
    assert (np.diff(eps, axis=1) <= 0).all()
    assert (eps[:, 0] > 0).all()


def test_unknown_table_mode():
    with pytest.raises(ParameterError):
        build_error_table(generate_synthetic_cache(SyntheticConfig(tokens=2, head_dim=4)), "guess")


@pytest.mark.parametrize("bits_col", [0, 1, 2])
def test_measured_tracks_analytic_on_uniform_data(bits_col):
    g = np.random.default_rng(0)
    cache = KVCache(g.uniform(0, 1, (2, 2, 16, 64)), g.uniform(0, 1, (2, 2, 16, 64)))
    measured = build_error_table(cache, "measured").eps[:, bits_col]
    analytic = build_error_table(cache, "analytic").eps[:, bits_col]
    ratio = measured / analytic
    assert (ratio > 1 / 3).all() and (ratio < 3).all()


# -- exact solver ------------------------------------------------------------------


def test_symmetric_instance_is_uniform_4bit():
    n = 6
    a = allocate_exact(np.ones(n), _table(n), 4 * n)
    assert a.bits.tolist() == [4] * n
    assert a.average_bits == 4.0


@pytest.mark.parametrize("n", range(1, 7))
def test_one_hot_scores_give_16_bits(n):
    s = np.zeros(n)
    hot = n // 2
    s[hot] = 1.0
    table = ErrorTable(np.random.default_rng(n).uniform(0.5, 1, (n, 1)) * ROW)
    a = allocate_exact(s, table, 2 * (n - 1) + 16)
    assert a.bits[hot] == 16
    oracle_bits, _ = enumerate_optimum(s, table.eps, 2 * (n - 1) + 16)
    assert a.bits.tolist() == oracle_bits.tolist()


def test_full_budget_is_lossless():
    n = 5
    a = allocate_exact(np.random.default_rng(1).uniform(size=n), _table(n), 16 * n)
    assert a.bits.tolist() == [16] * n
    assert a.objective_value == 0.0


@pytest.mark.parametrize("seed", range(40))
def test_exact_matches_enumeration(seed):
    scores, eps, budget = allocator_instance(seed)
    table = ErrorTable(eps, "analytic")
    a = allocate_exact(scores, table, budget)
    bits, best = enumerate_optimum(scores, eps, budget)
    assert a.bits.tolist() == bits.tolist()
    assert a.objective_value == pytest.approx(best, rel=1e-12, abs=1e-300)


def test_exact_tie_break_prefers_early_tokens():
    # every 2-token split of 12 extra bits is equally good when errors are zero past 4 bits
    table = _table(3, [1.0, 0.0, 0.0, 0.0])
    a = allocate_exact(np.ones(3), table, 24)
    assert a.bits.tolist() == [16, 4, 4]


@pytest.mark.parametrize("budget,exc", [(5.9, ParameterError), (np.nan, ParameterError)])
def test_infeasible_budget(budget, exc):
    with pytest.raises(exc):
        allocate_exact(np.ones(3), _table(3), budget)
    with pytest.raises(exc):
        allocate_greedy(np.ones(3), _table(3), budget)


def test_exact_token_cap():
    with pytest.raises(ParameterError):
        allocate_exact(np.ones(5), _table(5), 20, max_tokens=4)


def test_score_validation():
    with pytest.raises(DimensionError):
        allocate_exact(np.ones(2), _table(3), 12)
    with pytest.raises(ParameterError):
        allocate_exact([1.0, -1.0], _table(2), 12)


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 10**6), c=st.floats(1e-3, 1e3))
def test_exact_is_scale_invariant(seed, c):
    scores, eps, budget = allocator_instance(seed, max_tokens=10)
    table = ErrorTable(eps)
    a = allocate_exact(scores, table, budget)
    b = allocate_exact(scores * c, table, budget)
    assert a.bits.tolist() == b.bits.tolist()


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 10**6))
def test_solvers_feasible_and_exact_beats_uniform(seed):
    scores, eps, budget = allocator_instance(seed)
    table = ErrorTable(eps)
    exact = allocate_exact(scores, table, budget)
    greedy = allocate_greedy(scores, table, budget)
    assert exact.total_bits <= budget and greedy.total_bits <= budget
    assert exact.objective_value <= greedy.objective_value * (1 + 1e-12)
    _, uniform = uniform_objective(scores, table, budget)
    assert exact.objective_value <= uniform * (1 + 1e-12)


def test_uniform_objective_picks_largest_fitting_width():
    width, value = uniform_objective(np.ones(4), _table(4), 4 * 9)
    assert width == 8
    assert value == pytest.approx(4 * 0.001)


# -- greedy ------------------------------------------------------------------------


def test_greedy_equals_exact_on_symmetric_instance():
    n = 6
    s, t = np.ones(n), _table(n)
    assert allocate_greedy(s, t, 4 * n).bits.tolist() == allocate_exact(s, t, 4 * n).bits.tolist()


@pytest.mark.parametrize("n", [1, 4, 9])
def test_greedy_no_headroom(n):
    a = allocate_greedy(np.ones(n), _table(n), 2 * n)
    assert a.bits.tolist() == [2] * n


def test_greedy_takes_best_ratio_first():
    # token 1 has the larger weighted gain for the first 2-bit step
    table = ErrorTable([[1.0, 0.5, 0.0, 0.0], [1.0, 0.1, 0.0, 0.0]])
    a = allocate_greedy([1.0, 1.0], table, 6)
    assert a.bits.tolist() == [2, 4]


def test_greedy_fills_to_budget_when_gains_positive():
    n = 4
    a = allocate_greedy(np.ones(n), _table(n), 16 * n)
    assert a.bits.tolist() == [16] * n


# -- assignments -------------------------------------------------------------------


def test_assignment_rejects_illegal_width():
    with pytest.raises(ParameterError):
        BitAssignment.build([2, 3])


def test_assignment_average_and_objective():
    a = BitAssignment.build([2, 4, 8, 16], np.ones(4), _table(4))
    assert a.average_bits == 7.5
    assert a.objective_value == pytest.approx(1.0 + 0.1 + 0.001)
    assert objective([16, 16, 16, 16], np.ones(4), _table(4)) == 0.0


# -- controller --------------------------------------------------------------------


def test_controller_has_510_parameters():
    assert ControllerWeights.zeros().n_parameters == 510


def test_zero_weights_give_two_bits():
    x = np.random.default_rng(0).normal(size=(9, N_FEATURES))
    assert controller_infer(x, ControllerWeights.zeros()).tolist() == [2] * 9


def test_bias_favoring_eight_bits():
    w = ControllerWeights.zeros()
    b2 = np.array([0.0, 0.0, 1.0, 0.0])
    w = ControllerWeights(w.w1, w.b1, w.w2, b2)
    x = np.random.default_rng(0).normal(size=(5, N_FEATURES))
    assert controller_infer(x, w).tolist() == [8] * 5


def test_non_finite_weights_rejected():
    w = ControllerWeights.zeros()
    b1 = w.b1.copy()
    b1[3] = np.inf
    with pytest.raises(ModelError):
        ControllerWeights(w.w1, b1, w.w2, w.b2)
    with pytest.raises(ModelError):
        ControllerWeights.from_flat(np.zeros(509))


def test_infer_rejects_bad_features():
    with pytest.raises(DimensionError):
        controller_infer(np.zeros((2, 5)), ControllerWeights.zeros())
    with pytest.raises(ParameterError):
        controller_infer(np.full((1, N_FEATURES), np.nan), ControllerWeights.zeros())


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_gradient_matches_finite_differences(seed):
    g = np.random.default_rng(seed)
    x = g.normal(size=(30, N_FEATURES))
    y = g.integers(0, 4, 30)
    theta = g.normal(0, 0.3, 510)
    cw = np.array([1.0, 2.0, 0.5, 1.5])
    _, grad = loss_and_grad(theta, x, y, cw)
    h = 1e-6
    for i in g.choice(510, 10, replace=False):
        e = np.zeros(510)
        e[i] = h
        fd = (loss_and_grad(theta + e, x, y, cw)[0] - loss_and_grad(theta - e, x, y, cw)[0]) / (2 * h)
        assert abs(fd - grad[i]) <= 1e-4 * max(abs(fd), abs(grad[i]), 1e-8)


def test_training_reaches_separable_accuracy():
    x, labels = separable_set(0)
    result = controller_train(x, labels)
    assert result.train_accuracy >= 0.95


def test_trained_controller_generalizes():
    x, labels = separable_set(0, rows=600)
    result = controller_train(x[:400], labels[:400])
    held = controller_infer(x[400:], result.weights)
    assert (held == labels[400:]).mean() >= 0.90


def test_training_is_deterministic():
    x, labels = separable_set(1, rows=120)
    hyper = TrainingConfig(steps=100)
    a = controller_train(x, labels, hyper)
    b = controller_train(x, labels, hyper)
    assert np.array_equal(a.weights.flat(), b.weights.flat())


@pytest.mark.parametrize("width", [2, 4, 8, 16])
def test_single_class_collapses(width):
    x = np.random.default_rng(width).uniform(size=(40, N_FEATURES))
    result = controller_train(x, np.full(40, width), TrainingConfig(steps=200))
    probe = np.random.default_rng(99).uniform(size=(50, N_FEATURES))
    assert (controller_infer(probe, result.weights) == width).all()


def test_training_input_errors():
    with pytest.raises(ParameterError):
        controller_train(np.zeros((0, N_FEATURES)), [])
    with pytest.raises(ParameterError):
        controller_train(np.zeros((2, N_FEATURES)), [2, 3])
    with pytest.raises(DimensionError):
        controller_train(np.zeros((2, N_FEATURES)), [2])


# -- QKVW --------------------------------------------------------------------------


def _weights(seed=0):
    return ControllerWeights.from_flat(np.random.default_rng(seed).normal(size=510))


def test_weights_round_trip():
    w = _weights()
    data = encode_weights(w)
    assert len(data) == 24 + 8 * 510 + 4
    assert np.array_equal(decode_weights(data).flat(), w.flat())
    assert encode_weights(decode_weights(data)) == data


def test_weights_corruption():
    data = encode_weights(_weights())
    with pytest.raises(BadMagicError):
        decode_weights(b"XXXX" + data[4:])
    with pytest.raises(UnsupportedVersionError):
        decode_weights(data[:4] + b"\x02\x00" + data[6:])
    with pytest.raises(TruncatedError):
        decode_weights(data[:-1])
    with pytest.raises(PayloadSizeError):
        decode_weights(data + b"\0")
    flipped = bytearray(data)
    flipped[100] ^= 0x10
    with pytest.raises(ChecksumError):
        decode_weights(bytes(flipped))


# -- calibration labels ------------------------------------------------------------


def _evaluator(cache):
    model = ToyModel.for_cache(cache, seed=3)
    return model.evaluator(model.eval_queries(8))


def test_constant_cache_labels_two_bits():
    cache = KVCache(np.full((1, 2, 6, 8), 0.5), np.full((1, 2, 6, 8), 2.0))
    assert label_calibration(cache, _evaluator(cache)).tolist() == [2] * 6


def test_vacuous_threshold_labels_two_bits():
    cache = generate_synthetic_cache(SyntheticConfig(seed=2, tokens=6, head_dim=8))
    assert label_calibration(cache, _evaluator(cache), threshold=np.inf).tolist() == [2] * 6


def test_loud_token_needs_at_least_median_width():
    cache = generate_synthetic_cache(SyntheticConfig(seed=5, layers=1, heads=2, tokens=12, head_dim=16))
    values = cache.values.copy()
    values[:, :, 7] *= 10
    loud = KVCache(cache.keys, values)
    labels = label_calibration(loud, _evaluator(loud))
    assert labels[7] >= np.median(labels)


def test_tight_threshold_labels_are_legal():
    cache = generate_synthetic_cache(SyntheticConfig(seed=6, tokens=5, head_dim=8))
    labels = label_calibration(cache, _evaluator(cache), threshold=1e-9)
    assert set(labels.tolist()) <= {2, 4, 8, 16}
    assert (labels >= 8).all()
