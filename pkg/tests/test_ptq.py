import dataclasses

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hif4ptq import state as S
from hif4ptq.balance import ChannelMask, StatKind
from hif4ptq.calib import ActivationAccumulator
from hif4ptq.codec import Axis, Hif4Format, QuantDescriptor
from hif4ptq.config import QuantConfig
from hif4ptq.errors import ConfigError, CoverageError, IntegrityError, ShapeError, StateError
from hif4ptq.model import Linear, forward
from hif4ptq.ptq import (
    QuantizedLinear,
    ab_evaluate,
    apply_state,
    calibrate,
    evaluate,
    ptq_pipeline,
    quantized_linear_forward,
    run_ptq,
    select_layers,
)
from hif4ptq.synth import STREAM_EVAL, DistributionSpec, gen_batches, gen_toy_model

SPEC = DistributionSpec(seed=7)
TOKENS = 24


@pytest.fixture(scope="module")
def setup(small_model):
    cfg = QuantConfig(seed=7)
    stats = calibrate(small_model, gen_batches(SPEC, 4, TOKENS, 16), cfg)
    evals = gen_batches(SPEC, 2, TOKENS, 16, STREAM_EVAL)
    return small_model, cfg, stats, evals


def layer_law(blocks, budget, boundary=6, stacks=2, per_block=10):
    retained = min(budget, blocks * stacks)
    return (blocks * stacks - retained) * per_block, stacks * boundary + retained * per_block


@pytest.mark.parametrize("blocks", [0, 2, 4])
@pytest.mark.parametrize("budget", [0, 1, 2])
def test_partition_law(blocks, budget):
    model = gen_toy_model(blocks=blocks, width=8, boundary=6, seed=0)
    part = select_layers(model, QuantConfig(retained_block_budget=budget))
    assert (len(part.quantize), len(part.retain)) == layer_law(blocks, budget)
    names = [l.name for l in model.linear_layers()]
    assert sorted(part.quantize + part.retain) == sorted(names)
    assert not set(part.quantize) & set(part.retain)


def test_default_partition_shape():
    model = gen_toy_model(blocks=4, width=8, boundary=6, seed=0)
    part = select_layers(model, QuantConfig())
    assert (len(part.quantize), len(part.retain)) == (80, 12)
    rows = part.counts(model)
    assert [(r["quantized_linear"], r["fp_linear"], r["fp_blocks"]) for r in rows] == [(40, 6, 0), (40, 6, 0)]
    part2 = select_layers(model, QuantConfig(retained_block_budget=2))
    assert (len(part2.quantize), len(part2.retain)) == (60, 32)
    # Retained blocks come from the front of the first stack.
    assert part2.retained_blocks == ("transformer_1.blocks.0", "transformer_1.blocks.1")


def test_budget_over_limit():
    with pytest.raises(ConfigError):
        QuantConfig(retained_block_budget=3)


def test_calibration_counts(setup):
    model, cfg, stats, _ = setup
    assert set(stats) == set(select_layers(model, cfg).quantize)
    for acc in stats.values():
        np.testing.assert_array_equal(acc.observed_count, 4 * TOKENS)


def test_empty_stream_is_coverage_error(small_model):
    with pytest.raises(CoverageError):
        calibrate(small_model, [], QuantConfig())


def test_repeated_batch_percentile_100_is_single_batch_max(small_model):
    cfg = QuantConfig()
    b = gen_batches(SPEC, 1, TOKENS, 16)
    once = calibrate(small_model, b, cfg)
    thrice = calibrate(small_model, b * 3, cfg)
    for name in once:
        np.testing.assert_array_equal(thrice[name].percentile(100.0), once[name].max_stat())


def test_max_equals_percentile_100(setup):
    model, cfg, stats, evals = setup
    s_max = run_ptq(model, stats, dataclasses.replace(cfg, stat_kind=StatKind.MAX))
    s_100 = run_ptq(model, stats, dataclasses.replace(cfg, stat_kind=StatKind.PERCENTILE, percentile_p=100.0))
    assert S.serialize(s_max) == S.serialize(s_100)
    y1 = apply_state(model, s_max).forward(evals[0])
    y2 = apply_state(model, s_100).forward(evals[0])
    np.testing.assert_array_equal(y1, y2)


def test_missing_and_extra_stats(setup):
    model, cfg, stats, _ = setup
    partial = dict(stats)
    name = sorted(partial)[0]
    del partial[name]
    with pytest.raises(CoverageError) as exc:
        run_ptq(model, partial, cfg)
    assert exc.value.layer == name
    extra = dict(stats, bogus=ActivationAccumulator("bogus", 16).observe(np.ones((1, 16))))
    with pytest.raises(CoverageError):
        run_ptq(model, extra, cfg)


def test_state_sufficiency(setup):
    model, cfg, stats, evals = setup
    st_, qm = ptq_pipeline(model, stats, cfg)
    restored = apply_state(model, S.deserialize(S.serialize(st_)))
    for name, q in qm.qlayers.items():
        np.testing.assert_array_equal(restored.effective_weight(name), q.weight_hat)
    for b in evals:
        np.testing.assert_array_equal(restored.forward(b), qm.forward(b))


def test_retained_layers_untouched(setup):
    model, cfg, stats, _ = setup
    qm = apply_state(model, run_ptq(model, stats, cfg))
    for name in select_layers(model, cfg).retain:
        assert qm.effective_weight(name) is model.layer_map()[name].weight


def test_perturbed_weight_names_layer(setup):
    model, cfg, stats, _ = setup
    st_ = run_ptq(model, stats, cfg)
    bad = model.copy()
    target = st_.records[3].layer_name
    bad.layer_map()[target].weight[0, 0] += 0.5
    with pytest.raises(IntegrityError) as exc:
        apply_state(bad, st_)
    assert exc.value.layer == target


def test_unknown_layer_and_shape_mismatch(setup):
    model, cfg, stats, _ = setup
    st_ = run_ptq(model, stats, cfg)
    rec = st_.records[0]
    renamed = dataclasses.replace(rec, layer_name="nope")
    with pytest.raises(StateError):
        apply_state(model, S.PtqState(st_.base_model_digest, st_.config, [renamed]))
    other = gen_toy_model(blocks=2, width=8, boundary=4, seed=7)
    with pytest.raises(StateError):
        apply_state(other, st_)


def test_empty_state_leaves_model_unchanged(setup):
    model, _, _, evals = setup
    qm = apply_state(model, S.PtqState(model.digest(), QuantConfig()))
    assert not qm.qlayers
    np.testing.assert_array_equal(qm.forward(evals[0]), forward(model, evals[0]))


def test_empty_quantize_partition():
    model = gen_toy_model(blocks=0, width=8, boundary=3, seed=1)
    st_ = run_ptq(model, {}, QuantConfig())
    assert st_.records == []


def qlinear(w, b, mask=None, axis=Axis.PER_FEATURE_CHANNEL):
    from hif4ptq.codec import make_descriptor, fake_quant

    layer = Linear("l", w, b)
    mask = mask or ChannelMask.unit(w.shape[1])
    desc = make_descriptor(w / mask.mask, Axis.PER_OUTPUT_CHANNEL)
    w_hat = fake_quant(w / mask.mask, desc)
    rec = S.LayerQuantState("l", mask, desc, QuantDescriptor(axis), S.weight_checksum(w_hat))
    return QuantizedLinear(layer, rec, w_hat)


def test_code_point_forward_is_exact():
    x = np.array([[6.0, -6.0], [1.5, 3.0], [-0.5, 4.0]])
    w = np.array([[6.0, 0.5], [-4.0, 6.0], [1.0, -6.0]])
    b = np.array([0.25, -1.0, 2.0])
    np.testing.assert_array_equal(quantized_linear_forward(x, qlinear(w, b)), x @ w.T + b)


def test_zero_input_gives_bias():
    rng = np.random.default_rng(0)
    w, b = rng.standard_normal((5, 4)), rng.standard_normal(5)
    out = quantized_linear_forward(np.zeros((3, 4)), qlinear(w, b))
    np.testing.assert_array_equal(out, np.tile(b, (3, 1)))


def test_width_mismatch():
    q = qlinear(np.ones((2, 3)), None)
    with pytest.raises(ShapeError):
        quantized_linear_forward(np.ones((1, 4)), q)


def test_self_comparison_of_unquantized_model(setup):
    model, _, _, evals = setup
    rep = evaluate(model, S.PtqState(model.digest(), QuantConfig()), evals)
    assert rep["end_to_end"]["cosine"] == 1.0
    assert rep["end_to_end"]["mse"] == 0.0


def test_report_determinism(setup):
    model, cfg, stats, evals = setup
    import json

    st_ = run_ptq(model, stats, cfg)
    a = json.dumps(evaluate(model, st_, evals, stats), sort_keys=True)
    b = json.dumps(evaluate(model, st_, evals, stats), sort_keys=True)
    assert a == b
    rep = json.loads(a)
    assert rep["quantized_layers"] == len(st_.records)
    assert 0.0 < rep["end_to_end"]["cosine"] <= 1.0
    assert all("calib_clip_fraction" in l for l in rep["layers"])


def test_parallel_ptq_is_deterministic(setup):
    model, cfg, stats, _ = setup
    serial = S.serialize(run_ptq(model, stats, cfg))
    for workers in (2, 4):
        assert S.serialize(run_ptq(model, stats, dataclasses.replace(cfg, workers=workers))) == serial


def test_ab_report_shape(setup):
    model, cfg, stats, evals = setup
    rep = ab_evaluate(model, stats, cfg, evals)
    assert rep["max"]["config"]["stat_kind"] == "max"
    assert rep["percentile"]["config"]["stat_kind"] == "percentile"
    assert len(rep["layer_deltas"]) == len(stats)
    assert 0.0 <= rep["win_rate"]["layers"] <= 1.0


@settings(max_examples=30, deadline=None)
@given(st.floats(50.0, 100.0), st.floats(50.0, 100.0))
def test_monotone_clipping(setup, p1, p2):
    _, _, stats, _ = setup
    lo, hi = sorted((p1, p2))
    for acc in list(stats.values())[:5]:
        assert np.all(acc.clipped_fraction(acc.percentile(lo)) >= acc.clipped_fraction(acc.percentile(hi)))
