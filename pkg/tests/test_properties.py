import numpy as np
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from ddoa import arch, cost
from ddoa.acoustics import DoaGrid, class_to_doa, doa_to_class
from ddoa.arch import ArchSpec, ConvSpec
from ddoa.features import principal_phase
from ddoa.nn import bce_loss, init_model, model_forward
from ddoa.pipeline import match, score

FAST = settings(max_examples=60, deadline=None)


@st.composite
def feasible_specs(draw, M=8):
    layers, remaining = [], M - 1
    for _ in range(draw(st.integers(1, 5))):
        if remaining == 0:
            break
        fw = draw(st.integers(2, min(4, remaining + 1)))
        d = draw(st.integers(1, remaining // (fw - 1)))
        layers.append(ConvSpec(fw, d, draw(st.integers(1, 4))))
        remaining -= d * (fw - 1)
    if not layers:
        layers.append(ConvSpec(2, 1, 2))
    return ArchSpec("h", tuple(layers), M=M, K=draw(st.integers(1, 4)), dense_hidden=(3,), n_classes=5)


@FAST
@given(feasible_specs())
def test_shape_law_matches_output_width(spec):
    model = init_model(spec, seed=0)
    h = np.random.default_rng(0).standard_normal((1, spec.K, spec.M, 1))
    from ddoa.nn import conv2d_forward

    for i, layer in enumerate(model.conv_layers):
        h = conv2d_forward(h, layer)
        assert h.shape[2] == arch.output_width(spec, i)
    assert arch.validate(spec, strict=False).ok


@FAST
@given(feasible_specs())
def test_widths_strictly_decrease(spec):
    w = [spec.M] + arch.widths(spec)
    assert all(a > b for a, b in zip(w, w[1:]))


@FAST
@given(feasible_specs())
def test_strictly_valid_implies_receptive_field_m(spec):
    if arch.validate(spec, strict=True).ok:
        assert arch.receptive_field(spec) == spec.M


@FAST
@given(feasible_specs())
def test_params_equal_allocation(spec):
    report = cost.cost_report(spec)
    model = init_model(spec, seed=0)
    assert report.total_params == model.n_parameters()
    assert report.total_flops == sum(l.flops for l in report.per_layer)


@FAST
@given(feasible_specs(), st.integers(0, 2**31))
def test_posteriors_in_unit_interval(spec, seed):
    model = init_model(spec, seed=seed % 1000)
    x = np.random.default_rng(seed).uniform(-50, 50, (3, spec.K, spec.M, 1))
    p = model_forward(model, x)
    assert p.shape == (3, 5) and np.all((p >= 0) & (p <= 1))


@given(st.floats(0, 180, allow_nan=False))
def test_grid_round_trip(x):
    assert abs(class_to_doa(doa_to_class(x)) - x) <= DoaGrid().resolution / 2


@given(arrays(np.complex128, 16, elements=st.complex_numbers(max_magnitude=1e6, allow_nan=False, allow_infinity=False)))
def test_principal_phase_range(z):
    ph = principal_phase(z)
    assert np.all(ph > -np.pi) and np.all(ph <= np.pi)


@given(arrays(np.float64, 9, elements=st.floats(0, 1)), arrays(np.int8, 9, elements=st.integers(0, 1)))
def test_bce_finite_under_clamp(p, y):
    loss, grad = bce_loss(p, y.astype(float))
    assert np.isfinite(loss) and np.all(np.isfinite(grad)) and loss >= 0


angles = st.lists(st.sampled_from([float(a) for a in range(0, 181, 5)]), min_size=1, max_size=4, unique=True)


@given(angles, st.randoms(use_true_random=False))
def test_assignment_order_invariant(est, rnd):
    truth = sorted(est, key=lambda a: (a * 7919) % 181)
    shuffled_est, shuffled_truth = est[:], truth[:]
    rnd.shuffle(shuffled_est)
    rnd.shuffle(shuffled_truth)
    a = score([match(est, truth)])
    b = score([match(shuffled_est, shuffled_truth)])
    assert a.mae_degrees == b.mae_degrees and a.accuracy == b.accuracy
    assert a.mae_degrees == 0 and a.accuracy == 1


@given(angles, angles)
def test_mae_zero_iff_all_errors_zero(est, truth):
    n = min(len(est), len(truth))
    pairs = match(est[:n], truth[:n])
    r = score([pairs])
    assert (r.mae_degrees == 0) == all(e == t for e, t in pairs)


@given(st.integers(1, 6), st.integers(0, 2**31))
def test_block_average_range_and_frame_order(n, seed):
    from ddoa.pipeline import infer_block

    model = init_model(arch.d133(K=3, hidden=(4,), n_classes=37), seed=seed % 100)
    rng = np.random.default_rng(seed)
    maps = rng.uniform(-np.pi, np.pi, (n, 3, 8))
    a = infer_block(model, maps, 1).averaged_posteriors
    b = infer_block(model, maps[rng.permutation(n)], 1).averaged_posteriors
    assert np.all((a >= 0) & (a <= 1))
    np.testing.assert_allclose(a, b, rtol=1e-12, atol=1e-15)
