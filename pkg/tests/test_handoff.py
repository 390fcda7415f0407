import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from kvhandoff.allocator import ControllerWeights
from kvhandoff.cachecard import build_card, encode_card
from kvhandoff.errors import CompatibilityError, DimensionError, ParameterError, TopologyError
from kvhandoff.handoff import (
    METHODS,
    ChainConfig,
    ToyModel,
    TopologyGraph,
    append_tokens,
    density_calculator,
    inject_card,
    measured_attention_stats,
    run_chain,
    toy_forward,
)
from kvhandoff.importance import SegmentKind, SegmentMap
from kvhandoff.quantizer import quantization_bounds, quantize_cache
from kvhandoff.tensorio import KVCache, SyntheticConfig, generate_synthetic_cache

from .oracles import softmax_attention_reference

GIB = 1 << 30
LLAMA_DIMS = (32, 8, 8192, 128)


def _cache(seed=0, n=24, L=2, H=2, d=16):
    return generate_synthetic_cache(SyntheticConfig(seed=seed, layers=L, heads=H, tokens=n, head_dim=d))


# -- toy model -----------------------------------------------------------------------


def test_single_token_output_is_projected_value():
    cache = _cache(n=1)
    model = ToyModel.for_cache(cache, seed=2)
    out = toy_forward(model, cache, model.eval_queries(5))
    expected = np.einsum("lhd,lhde->e", cache.values[:, :, 0].astype(np.float64), model.w_out)
    np.testing.assert_allclose(out, np.tile(expected, (5, 1)), rtol=1e-12, atol=1e-12)


def test_identical_keys_average_values():
    g = np.random.default_rng(0)
    keys = np.tile(g.normal(size=(1, 2, 1, 8)), (1, 1, 6, 1))
    values = g.normal(size=(1, 2, 6, 8))
    cache = KVCache(keys, values)
    model = ToyModel.for_cache(cache)
    out = toy_forward(model, cache, model.eval_queries(3))
    mean_v = cache.values.astype(np.float64).mean(axis=2)
    expected = np.einsum("lhd,lhde->e", mean_v, model.w_out)
    np.testing.assert_allclose(out, np.tile(expected, (3, 1)), rtol=1e-10, atol=1e-12)


def test_forward_is_deterministic():
    cache = _cache()
    a = toy_forward(ToyModel.for_cache(cache, seed=4), cache, ToyModel.for_cache(cache, seed=4).eval_queries(4))
    b = toy_forward(ToyModel.for_cache(cache, seed=4), cache, ToyModel.for_cache(cache, seed=4).eval_queries(4))
    assert a.tobytes() == b.tobytes()


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 2**32), n=st.integers(1, 12), temp=st.floats(0.25, 4))
def test_forward_matches_loop_oracle(seed, n, temp):
    cache = _cache(seed, n=n, L=2, H=3, d=5)
    model = ToyModel.for_cache(cache, seed=seed, temperature=temp)
    q = model.eval_queries(3)
    np.testing.assert_allclose(toy_forward(model, cache, q), softmax_attention_reference(model, cache, q),
                               rtol=1e-9, atol=1e-12)


def test_dimension_checks():
    cache = _cache(d=16)
    model = ToyModel(2, 2, 8)
    with pytest.raises(DimensionError):
        toy_forward(model, cache, np.zeros((1, 8)))
    with pytest.raises(DimensionError):
        toy_forward(ToyModel.for_cache(cache), cache, np.zeros((1, 7)))
    with pytest.raises(ParameterError):
        ToyModel(1, 1, 4, temperature=0)


def test_attention_rows_are_distributions():
    cache = _cache()
    model = ToyModel.for_cache(cache)
    a = model.attention(cache, model.eval_queries(4))
    assert a.shape == (2, 2, 4, 24)
    np.testing.assert_allclose(a.sum(axis=-1), 1.0, atol=1e-12)


def test_measured_stats_shapes():
    cache = _cache(n=10)
    stats = measured_attention_stats(ToyModel.for_cache(cache), cache)
    for v in (stats.received_weight, stats.weight_variance, stats.query_entropy, stats.quality):
        assert v.shape == (10,) and np.isfinite(v).all() and (v >= 0).all()
    assert stats.quality.max() == 1.0


def test_prefill_is_causal():
    model = ToyModel(2, 2, 8)
    x = model.prefill_embeddings(10)
    full = model.prefill(x)
    prefix = model.prefill(x[:6])
    np.testing.assert_allclose(full.keys[:, :, :6], prefix.keys, rtol=1e-6, atol=1e-6)
    np.testing.assert_allclose(full.values[:, :, :6], prefix.values, rtol=1e-6, atol=1e-6)


def test_prefill_blocks_agree_with_single_block():
    # 600 rows cross the 512-row block boundary
    model = ToyModel(1, 1, 8)
    x = model.prefill_embeddings(600)
    full = model.prefill(x)
    head = model.prefill(x[:512])
    np.testing.assert_allclose(full.values[:, :, :512], head.values, rtol=1e-6, atol=1e-6)


def test_append_tokens_grows_cache():
    cache = _cache(n=5)
    model = ToyModel.for_cache(cache)
    grown = append_tokens(model, cache, 3)
    assert grown.tokens == 8
    assert np.array_equal(grown.keys[:, :, :5], cache.keys)


# -- inject --------------------------------------------------------------------------


def test_lossless_inject():
    cache = _cache()
    restored, ms = inject_card(build_card(quantize_cache(cache, 16), "toy-v1", "a"), "toy-v1")
    assert restored == cache
    assert ms >= 0


def test_q4_inject_within_group_bounds():
    cache = _cache(seed=2)
    q = quantize_cache(cache, 4)
    restored, _ = inject_card(build_card(q, "toy-v1", "a"), "toy-v1")
    key_bound, value_bound = quantization_bounds(q)
    assert (np.abs(restored.keys - cache.keys) <= key_bound + 1e-6).all()
    assert (np.abs(restored.values - cache.values) <= value_bound + 1e-6).all()


def test_model_mismatch_on_inject():
    card = build_card(quantize_cache(_cache(), 4), "B", "a")
    with pytest.raises(CompatibilityError):
        inject_card(card, "A")


# -- topology ------------------------------------------------------------------------


def test_topology_round_trip():
    text = "agent a toy-v1\nagent b toy-v1\nagent c toy-v1\nedge b c\nedge a b\n"
    g = TopologyGraph.parse(text)
    assert g.kind == "chain"
    assert [a.agent_id for a in g.chain_order()] == ["a", "b", "c"]
    assert TopologyGraph.parse(g.format()) == g


def test_tree_is_classified_and_rejected_by_chains():
    g = TopologyGraph.parse("agent r m\nagent x m\nagent y m\nedge r x\nedge r y\n")
    assert g.kind == "tree"
    with pytest.raises(TopologyError):
        run_chain(g, _cache(), "uniform_q4")


@pytest.mark.parametrize("text", [
    "agent a m\nagent b m\nedge a c\n",
    "agent a m\nagent a m\n",
    "agent a m\nagent b m\nedge a b\nedge b a\n",
    "agent a m\nagent b m\nagent c m\nedge a b\n",
    "agent a m\nnode b\n",
    "",
])
def test_bad_topologies(text):
    with pytest.raises(TopologyError):
        TopologyGraph.parse(text)


def test_chain_needs_two_agents():
    with pytest.raises(TopologyError):
        run_chain(TopologyGraph.chain(1), _cache(), "uniform_q4")


# -- chains --------------------------------------------------------------------------


def test_fp16_share_is_lossless():
    reports = run_chain(TopologyGraph.chain(5), _cache(), "fp16_share")
    assert len(reports) == 4
    assert [r.output_relative_error for r in reports] == [0.0] * 4


def test_pass_through_reuses_the_card():
    reports = run_chain(TopologyGraph.chain(5), _cache(seed=3), "uniform_q4", "pass_through")
    assert len({r.card_bytes for r in reports}) == 1
    assert len({r.output_relative_error for r in reports}) == 1
    assert all(r.stage_times.create_card == 0 for r in reports[1:])


def test_requantize_does_not_shrink_error():
    reports = run_chain(TopologyGraph.chain(5), _cache(seed=3), "uniform_q4")
    assert reports[-1].output_relative_error >= reports[0].output_relative_error


def test_appended_tokens_extend_each_hop():
    cfg = ChainConfig(tokens_per_hop=2)
    reports = run_chain(TopologyGraph.chain(4), _cache(n=10), "uniform_q8", cfg=cfg)
    assert [r.tokens for r in reports] == [10, 12, 14]


@pytest.mark.parametrize("method", METHODS)
def test_report_fields(method):
    reports = run_chain(TopologyGraph.chain(3), _cache(seed=1), method)
    for hop, r in enumerate(reports, 1):
        assert r.hop == hop and r.method == method
        assert r.sender == f"agent{hop - 1}" and r.receiver == f"agent{hop}"
        assert r.output_relative_error >= 0 and r.card_bytes > 0
        assert min(r.stage_times.create_card, r.stage_times.inject, r.stage_times.generate) >= 0


@pytest.mark.parametrize("method", ["adaptive_local", "adaptive_topology"])
@pytest.mark.parametrize("solver", ["exact", "greedy"])
def test_adaptive_respects_budget(method, solver):
    cfg = ChainConfig(budget_bits=5.0, solver=solver)
    for r in run_chain(TopologyGraph.chain(3), _cache(seed=2), method, cfg=cfg):
        assert r.average_bits <= 5.0
        if solver == "exact":
            assert r.weighted_objective <= r.uniform_objective * (1 + 1e-12)


def test_controller_solver_needs_weights():
    with pytest.raises(ParameterError):
        run_chain(TopologyGraph.chain(2), _cache(), "adaptive_local", cfg=ChainConfig(solver="controller"))
    cfg = ChainConfig(solver="controller", controller=ControllerWeights.zeros())
    reports = run_chain(TopologyGraph.chain(2), _cache(), "adaptive_local", cfg=cfg)
    assert reports[0].average_bits == 2.0


def test_transport_path_matches_in_memory():
    cache = _cache(seed=5)
    a = run_chain(TopologyGraph.chain(3), cache, "adaptive_topology")
    b = run_chain(TopologyGraph.chain(3), cache, "adaptive_topology", cfg=ChainConfig(transport=True))
    assert [r.output_relative_error for r in a] == [r.output_relative_error for r in b]
    assert [r.card_bytes for r in a] == [r.card_bytes for r in b]


def test_segment_map_must_cover_the_cache():
    cache = _cache(seed=6, n=20)
    seg = SegmentMap(((0, 10, SegmentKind.SYSTEM), (10, 20, SegmentKind.AGENT_PRIVATE)))
    r = run_chain(TopologyGraph.chain(2), cache, "adaptive_topology", segments=seg,
                  cfg=ChainConfig(alpha=0.0, budget_bits=6.0))[0]
    assert r.average_bits <= 6.0
    with pytest.raises(DimensionError):
        run_chain(TopologyGraph.chain(2), cache, "adaptive_topology", segments=SegmentMap.uniform(5))


def test_chain_is_deterministic():
    cache = _cache(seed=8)
    a = run_chain(TopologyGraph.chain(3), cache, "adaptive_topology")
    b = run_chain(TopologyGraph.chain(3), cache, "adaptive_topology")
    assert [(r.output_relative_error, r.card_bytes, r.average_bits) for r in a] == \
        [(r.output_relative_error, r.card_bytes, r.average_bits) for r in b]


def test_eight_bits_beat_four_bits():
    wins = 0
    trials = 40
    for seed in range(trials):
        cache = _cache(seed=seed)
        q8 = run_chain(TopologyGraph.chain(2), cache, "uniform_q8")[0].output_relative_error
        q4 = run_chain(TopologyGraph.chain(2), cache, "uniform_q4")[0].output_relative_error
        wins += q8 <= q4
    assert wins >= 0.95 * trials


@pytest.mark.parametrize("kwargs", [{"solver": "lp"}, {"alpha": 1.5}, {"tokens_per_hop": -1},
                                    {"budget_bits": 1.0}])
def test_bad_chain_config(kwargs):
    with pytest.raises(ParameterError):
        ChainConfig(**kwargs)


def test_unknown_method_and_policy():
    with pytest.raises(ParameterError):
        run_chain(TopologyGraph.chain(2), _cache(), "uniform_q3")
    with pytest.raises(ParameterError):
        run_chain(TopologyGraph.chain(2), _cache(), "uniform_q4", "broadcast")


def test_card_bytes_match_encoding():
    cache = _cache(seed=4)
    r = run_chain(TopologyGraph.chain(2), cache, "uniform_q8")[0]
    assert r.card_bytes == len(encode_card(build_card(quantize_cache(cache, 8), "toy-v1", "agent0")))


# -- density -------------------------------------------------------------------------


def test_density_reference_values():
    fp16 = density_calculator(12 * GIB, 0, LLAMA_DIMS, 2)
    q4 = density_calculator(12 * GIB, 0, LLAMA_DIMS, 0.5)
    assert (fp16, q4) == (12, 48)
    assert q4 == 4 * fp16


def test_density_boundaries():
    assert density_calculator(GIB, GIB, LLAMA_DIMS, 2) == 0
    with pytest.raises(ParameterError):
        density_calculator(GIB, GIB + 1, LLAMA_DIMS, 2)
    with pytest.raises(ParameterError):
        density_calculator(GIB, 0, LLAMA_DIMS, 0)


@settings(max_examples=50, deadline=None)
@given(device=st.integers(1, 2**40), frac=st.floats(0, 1), n=st.integers(1, 2**14))
def test_density_quarter_bytes_is_at_least_four_times(device, frac, n):
    overhead = int(device * frac)
    dims = (4, 2, n, 64)
    assert density_calculator(device, overhead, dims, 0.5) >= 4 * density_calculator(device, overhead, dims, 2)
