import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from esmoe.block import (
    EvalCounter,
    ExpertBank,
    RoutingModeError,
    esmoe_backward,
    esmoe_forward,
    gate_logits,
    route,
    top_k_indices,
)
from esmoe.config import ConfigError, EsMoeConfig, Mode, default_kernels
from esmoe.tensor import ConvParams, NonFiniteError, ShapeError, dwconv_forward

from oracles import (
    central_diff,
    gate_composed,
    hard_top_k_scalar,
    max_rel_err,
    soft_top_k_scalar,
    top_k_scalar,
)

TRAIN, INFER = Mode.TRAINING, Mode.INFERENCE


def _setup(c_in=3, c_out=4, e=4, k=2, size=6, n=3, seed=0, dtype=np.float64, **kw):
    cfg = EsMoeConfig(c_in, c_out, n_experts=e, top_k=k, **kw)
    rng = np.random.default_rng(seed)
    bank = ExpertBank.init(cfg, rng, dtype)
    x = rng.standard_normal((n, c_in, size, size)) + rng.normal(0, 1, (n, c_in, 1, 1))
    return cfg, bank, x.astype(dtype)


def _gapped(logits, gap=1e-2):
    z = np.sort(logits, axis=1)
    return np.all(np.diff(z, axis=1) > gap)


# ---- config -----------------------------------------------------------------------


def test_config_defaults():
    cfg = EsMoeConfig(16, 16)
    assert (cfg.n_experts, cfg.top_k, cfg.kernels, cfg.reduction, cfg.eps) == (4, 2, (3, 5, 7, 9), 8, 1e-9)
    assert cfg.mode is TRAIN


@pytest.mark.parametrize("c_in,expected", [(3, 8), (64, 8), (72, 9), (256, 32)])
def test_reduced_channels(c_in, expected):
    assert EsMoeConfig(c_in, 4).reduced_channels == expected


def test_default_kernels_cycle():
    assert default_kernels(2) == (3, 5)
    assert default_kernels(6) == (3, 5, 7, 9, 3, 5)


@pytest.mark.parametrize(
    "kw",
    [dict(top_k=5), dict(top_k=0), dict(kernels=(3, 5, 7)), dict(kernels=(3, 4, 5, 7)), dict(reduction=0), dict(eps=-1.0)],
)
def test_config_rejects(kw):
    with pytest.raises(ConfigError):
        EsMoeConfig(4, 4, **kw)


@pytest.mark.parametrize("k,frac", [(1, 0.75), (2, 0.50), (3, 0.25), (4, 0.0)])
def test_sparsity_fraction_table(k, frac):
    assert EsMoeConfig(8, 8, n_experts=4, top_k=k).sparsity == frac


def test_bank_param_counts():
    cfg = EsMoeConfig(16, 16)
    bank = ExpertBank.init(cfg, 0)
    c_red = cfg.reduced_channels
    assert bank.gate_param_count == 16 * c_red + c_red + c_red * 4 + 4
    assert [e.kernel_size for e in bank.experts] == [3, 5, 7, 9]
    assert bank.n_params == sum(ConvParams.param_count(16, 16, k) for k in cfg.kernels) + bank.gate_param_count


def test_bank_named_round_trip():
    cfg = EsMoeConfig(3, 4)
    bank = ExpertBank.init(cfg, 1)
    again = ExpertBank.from_named(bank.named_parameters(), 4)
    for k, v in bank.named_parameters().items():
        np.testing.assert_array_equal(v, again.named_parameters()[k])


# ---- gate -----------------------------------------------------------------------


def test_gate_depends_only_on_channel_means():
    cfg, bank, x = _setup(n=2)
    perm = np.random.default_rng(5).permutation(36)
    shuffled = x.reshape(2, 3, 36)[:, :, perm].reshape(x.shape)
    np.testing.assert_allclose(gate_logits(shuffled, bank, cfg), gate_logits(x, bank, cfg), atol=1e-12)
    flat = np.broadcast_to(x.mean(axis=(2, 3), keepdims=True), x.shape)
    np.testing.assert_allclose(gate_logits(flat, bank, cfg), gate_logits(x, bank, cfg), atol=1e-12)


def test_gate_zero_input_zero_bias():
    cfg, bank, _ = _setup()
    bank.gate_b1[:] = 0
    bank.gate_b2[:] = 0
    assert not gate_logits(np.zeros((2, 3, 5, 5)), bank, cfg).any()


def test_gate_vs_composed_oracle():
    cfg, bank, x = _setup(c_in=5, n=4, dtype=np.float32)
    expected = gate_composed(x, bank.gate_w1, bank.gate_b1, bank.gate_w2, bank.gate_b2)
    np.testing.assert_allclose(gate_logits(x, bank, cfg), expected, atol=1e-5)


def test_gate_channel_mismatch():
    cfg, bank, _ = _setup()
    with pytest.raises(ShapeError):
        gate_logits(np.zeros((1, 4, 3, 3)), bank, cfg)


# ---- routing --------------------------------------------------------------------


def test_soft_top_k_example():
    probs = np.array([0.4, 0.3, 0.2, 0.1])
    cfg = EsMoeConfig(1, 1, eps=0.0)
    out = route(np.log(probs)[None], cfg)
    expected = soft_top_k_scalar(list(np.log(probs)), 2)
    np.testing.assert_allclose(out.weights[0], expected, atol=1e-12)
    np.testing.assert_allclose(out.weights[0], [0.5714285714285714, 0.4285714285714286, 0, 0], atol=1e-12)


def test_hard_top_k_example():
    out = route(np.array([[2.0, 1.0, 0.0, -1.0]]), EsMoeConfig(1, 1, mode=INFER))
    np.testing.assert_allclose(out.weights[0], hard_top_k_scalar([2, 1, 0, -1], 2), atol=1e-15)
    np.testing.assert_allclose(out.weights[0], [0.7310585786300049, 0.2689414213699951, 0, 0], atol=1e-12)


@pytest.mark.parametrize("mode", [TRAIN, INFER])
def test_equal_logits_k_equals_e_uniform(mode):
    out = route(np.zeros((2, 4)), EsMoeConfig(1, 1, top_k=4, mode=mode))
    np.testing.assert_allclose(out.weights, 0.25, atol=1e-8)


def test_ties_broken_by_lowest_index():
    logits = np.array([[1.0, 3.0, 3.0, 3.0], [0.0, 0.0, 0.0, 0.0]])
    np.testing.assert_array_equal(top_k_indices(logits, 2), [[1, 2], [0, 1]])
    out = route(logits, EsMoeConfig(1, 1))
    np.testing.assert_array_equal(out.selected, [[1, 2], [0, 1]])


def test_route_errors():
    with pytest.raises(ShapeError):
        route(np.zeros((1, 2)), EsMoeConfig(1, 1, n_experts=4, top_k=3))
    with pytest.raises(NonFiniteError):
        route(np.array([[0.0, np.nan, 1.0, 2.0]]), EsMoeConfig(1, 1))


logit_rows = st.integers(1, 8).flatmap(
    lambda e: st.tuples(
        st.lists(st.lists(st.floats(-20, 20, allow_nan=False), min_size=e, max_size=e), min_size=1, max_size=5),
        st.integers(1, e),
    )
)


@given(logit_rows, st.sampled_from([TRAIN, INFER]))
@settings(max_examples=200, deadline=None)
def test_routing_invariants(case, mode):
    rows, k = case
    logits = np.array(rows)
    e = logits.shape[1]
    out = route(logits, EsMoeConfig(1, 1, n_experts=e, top_k=k, mode=mode))
    for i, row in enumerate(rows):
        assert list(out.selected[i]) == top_k_scalar(row, k)
        nz = np.flatnonzero(out.weights[i])
        assert set(nz) <= set(out.selected[i])
        assert abs(out.weights[i].sum() - 1) < 1e-6
        assert np.all(out.mask[i, out.selected[i]] == 1) and out.mask[i].sum() == k
    # selected entries carry strictly positive weight unless their softmax underflows
    assert np.all((out.weights > 0).sum(axis=1) <= k)


@given(logit_rows, st.floats(-100, 100, allow_nan=False), st.sampled_from([TRAIN, INFER]))
@settings(max_examples=100, deadline=None)
def test_routing_shift_invariance(case, c, mode):
    rows, k = case
    logits = np.array(rows)
    cfg = EsMoeConfig(1, 1, n_experts=logits.shape[1], top_k=k, mode=mode)
    a, b = route(logits, cfg), route(logits + c, cfg)
    if np.array_equal(a.selected, b.selected):
        np.testing.assert_allclose(a.weights, b.weights, atol=1e-6)
    else:  # a shift can only reorder exact or near-exact ties
        assert not _gapped(logits, 1e-9)


# ---- forward ----------------------------------------------------------------------


def test_forward_shapes_and_counter():
    cfg, bank, x = _setup(n=1)
    counter = EvalCounter(4)
    y, routing = esmoe_forward(x, bank, cfg.with_mode(INFER), counter)
    assert y.shape == (1, 4, 6, 6)
    assert counter.total == 2
    assert len(routing) == 1


@pytest.mark.parametrize("e", [2, 4, 8])
def test_counter_independent_of_e(e):
    cfg, bank, x = _setup(e=e, k=2, n=5)
    counter = EvalCounter(e)
    esmoe_forward(x, bank, cfg.with_mode(INFER), counter)
    assert counter.total == 10


def test_identical_experts_equal_routing_gives_single_expert():
    cfg, bank, x = _setup(k=4)
    # make every expert a copy of a kernel-3 expert padded to its own size
    base = bank.experts[0]
    for i, k in enumerate(cfg.kernels):
        dw = np.zeros((3, k, k))
        o = (k - 3) // 2
        dw[:, o : o + 3, o : o + 3] = base.dw_weight
        bank.experts[i] = ConvParams(dw, base.dw_bias.copy(), base.pw_weight.copy(), base.pw_bias.copy())
    bank.gate_w2[:] = 0
    bank.gate_b2[:] = 0
    for mode in (TRAIN, INFER):
        y, routing = esmoe_forward(x, bank, cfg.with_mode(mode))
        np.testing.assert_allclose(routing.weights, 0.25, atol=1e-8)
        np.testing.assert_allclose(y, dwconv_forward(x, base), atol=1e-8)


def _gapped_draw(seed, **kw):
    for s in range(seed, seed + 1000):
        cfg, bank, x = _setup(seed=s, **kw)
        if _gapped(gate_logits(x, bank, cfg)):
            return cfg, bank, x
    raise AssertionError("no gapped draw")


@pytest.mark.parametrize("seed", range(5))
def test_train_and_inference_outputs_match(seed):
    cfg, bank, x = _gapped_draw(seed * 100, dtype=np.float32)
    y_t, r_t = esmoe_forward(x, bank, cfg.with_mode(TRAIN))
    y_i, r_i = esmoe_forward(x, bank, cfg.with_mode(INFER))
    np.testing.assert_allclose(y_t, y_i, atol=1e-5)
    np.testing.assert_allclose(r_t.weights, r_i.weights, atol=1e-6)


def test_permutation_equivariance():
    cfg, bank, x = _gapped_draw(7)
    perm = [2, 0, 3, 1]
    pcfg = EsMoeConfig(3, 4, kernels=tuple(cfg.kernels[p] for p in perm))
    pbank = ExpertBank(
        [bank.experts[p] for p in perm], bank.gate_w1, bank.gate_b1, bank.gate_w2[perm], bank.gate_b2[perm]
    )
    for mode in (TRAIN, INFER):
        y, r = esmoe_forward(x, bank, cfg.with_mode(mode))
        py, pr = esmoe_forward(x, pbank, pcfg.with_mode(mode))
        np.testing.assert_allclose(pr.weights, r.weights[:, perm], atol=1e-12)
        np.testing.assert_allclose(py, y, atol=1e-6)


def test_logit_shift_leaves_output_unchanged():
    cfg, bank, x = _gapped_draw(11)
    y, r = esmoe_forward(x, bank, cfg)
    bank.gate_b2 += 7.5
    y2, r2 = esmoe_forward(x, bank, cfg)
    np.testing.assert_array_equal(r.selected, r2.selected)
    np.testing.assert_allclose(r2.weights, r.weights, atol=1e-6)
    np.testing.assert_allclose(y2, y, atol=1e-6)


def test_rms_norm_option():
    cfg, bank, x = _setup(rms_norm=True)
    y, _ = esmoe_forward(x, bank, cfg)
    rms = np.sqrt((y**2).mean(axis=(2, 3)))
    np.testing.assert_allclose(rms, 1.0, atol=1e-4)


def test_only_selected_experts_run_in_training_mode_too():
    cfg, bank, x = _setup(n=4)
    counter = EvalCounter(4)
    esmoe_forward(x, bank, cfg, counter)
    assert counter.total == 8


# ---- backward -------------------------------------------------------------------


def test_backward_zero_grad():
    cfg, bank, x = _setup()
    gx, gb = esmoe_backward(x, bank, cfg, np.zeros((3, 4, 6, 6)))
    assert not gx.any()
    assert all(not v.any() for v in gb.named_parameters().values())


def test_backward_requires_training_mode():
    cfg, bank, x = _setup()
    with pytest.raises(RoutingModeError):
        esmoe_backward(x, bank, cfg.with_mode(INFER), np.ones((3, 4, 6, 6)))


def test_backward_finite_differences():
    cfg, bank, x = _gapped_draw(21, size=5, n=2)
    r = np.random.default_rng(0).standard_normal((2, 4, 5, 5))
    f = lambda: float((esmoe_forward(x, bank, cfg)[0] * r).sum())
    gx, gb = esmoe_backward(x, bank, cfg, r)
    analytic = gb.named_parameters()
    assert max_rel_err(gx, central_diff(f, x)) < 1e-3
    for key, arr in bank.named_parameters().items():
        assert max_rel_err(analytic[key], central_diff(f, arr)) < 1e-3, key


def test_unselected_experts_get_exactly_zero():
    cfg, bank, x = _gapped_draw(31, n=1)
    _, routing = esmoe_forward(x, bank, cfg)
    _, gb = esmoe_backward(x, bank, cfg, np.ones((1, 4, 6, 6)))
    skipped = set(range(4)) - set(routing.selected[0])
    assert len(skipped) == 2
    for i in skipped:
        assert all(np.all(a == 0) for a in gb.experts[i].arrays().values())
    for i in routing.selected[0]:
        assert any(np.any(a != 0) for a in gb.experts[i].arrays().values())


def test_gate_receives_gradient_when_experts_differ():
    cfg, bank, x = _gapped_draw(41)
    _, gb = esmoe_backward(x, bank, cfg, np.random.default_rng(1).standard_normal((3, 4, 6, 6)))
    assert np.abs(gb.gate_w1).sum() > 0 and np.abs(gb.gate_w2).sum() > 0
