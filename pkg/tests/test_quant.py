import numpy as np
import pytest

from qsched.denoiser import (
    CorruptedDenoiser,
    GaussianMixture,
    MLPDenoiser,
    TimeEmbedding,
    TrainingSpec,
    train_mlp_denoiser,
)
from qsched.errors import (
    DegenerateCalibrationError,
    QuantizationError,
    ValidationError,
)
from qsched.quant import (
    CalibrationStates,
    QuantConfig,
    QuantizedDenoiser,
    calibrate_activation_scales,
    collect_calibration_states,
    estimate_ptqd_params,
    model_size_bytes,
    quantize_denoiser,
    quantize_tensor,
    tensor_scale,
)
from qsched.streams import keyed_generator

from .conftest import ConstantDenoiser, load_golden


@pytest.fixture(scope="module")
def states(gmm, schedule):
    return collect_calibration_states(gmm, schedule, 512, seed=0)


def test_config_ranges_and_labels():
    assert QuantConfig().label == "WFPAFP"
    assert QuantConfig(weight_bits=4, act_bits=8).label == "W4A8"
    assert QuantConfig(weight_bits=8).label == "W8AFP"
    with pytest.raises(ValidationError):
        QuantConfig(weight_bits=1)
    with pytest.raises(ValidationError):
        QuantConfig(weight_bits=9)
    with pytest.raises(ValidationError):
        QuantConfig(act_bits=3)


@pytest.mark.parametrize("bits", [2, 4, 8])
def test_quantizer_properties(bits):
    rng = keyed_generator(bits, "tensors")
    for case in range(1000):
        shape = tuple(int(n) for n in rng.integers(1, 12, size=int(rng.integers(1, 4))))
        values = rng.standard_normal(shape) * 10.0 ** rng.uniform(-3, 3)
        values[rng.random(shape) < 0.1] = 0.0
        scale = tensor_scale(values, bits)
        quantized = quantize_tensor(values, bits)

        assert np.all(np.abs(quantized - values) <= scale / 2 * (1 + 1e-12)), case
        assert np.array_equal(quantize_tensor(-values, bits), -quantized), case
        np.testing.assert_allclose(
            quantize_tensor(quantized, bits), quantized, rtol=0, atol=1e-12 * scale
        )
        assert np.all(quantized[values == 0.0] == 0.0), case
        assert len(np.unique(np.round(quantized / scale))) <= 2 ** bits, case


def test_quantizer_example():
    values = np.array([0.7, 0.33, -0.7])
    assert tensor_scale(values, 4) == pytest.approx(0.1)
    np.testing.assert_allclose(quantize_tensor(values, 4), [0.7, 0.3, -0.7], rtol=1e-12)


def test_zero_is_preserved():
    values = np.array([0.0, 1.0, -0.25])
    assert quantize_tensor(values, 4)[0] == 0.0
    assert np.array_equal(quantize_tensor(np.zeros(5), 4), np.zeros(5))
    assert tensor_scale(np.zeros(5), 4) == 1.0


def test_quantizer_rejects():
    with pytest.raises(ValidationError):
        quantize_tensor(np.ones(3), 1)
    with pytest.raises(QuantizationError):
        quantize_tensor(np.array([1.0, np.nan]), 4)


def test_full_precision_passthrough(mlp):
    q = QuantizedDenoiser(mlp, QuantConfig())
    x = keyed_generator(0, "x").standard_normal((8, 2))
    assert np.array_equal(q(x, 300), mlp(x, 300))


def test_activation_bits_need_states(mlp):
    cfg = QuantConfig(weight_bits=4, act_bits=8)
    with pytest.raises(QuantizationError):
        quantize_denoiser(mlp, cfg)
    with pytest.raises(QuantizationError):
        QuantizedDenoiser(mlp, cfg)


def test_weight_levels_at_w4(mlp):
    for w in mlp.weights:
        assert len(np.unique(quantize_tensor(w, 4))) <= 16


def test_precision_ordering(mlp):
    x = keyed_generator(2, "x").standard_normal((64, 2))
    reference = mlp(x, 500)
    coarse = quantize_denoiser(mlp, QuantConfig(weight_bits=4))(x, 500)
    fine = quantize_denoiser(mlp, QuantConfig(weight_bits=8))(x, 500)
    assert np.abs(fine - reference).max() < np.abs(coarse - reference).max()


def closed_form_mlp(widths=(10, 16, 16, 2)):
    weights, biases = [], []
    for layer, (a, b) in enumerate(zip(widths, widths[1:])):
        i, j = np.meshgrid(np.arange(a), np.arange(b), indexing="ij")
        weights.append(np.sin(1.0 + 0.7 * i + 1.3 * j + layer) / np.sqrt(a))
        biases.append(0.1 * np.cos(np.arange(b) + layer))
    return MLPDenoiser(weights, biases, TimeEmbedding(4, 1000))


def grid_states():
    index = np.arange(1000)
    x = np.column_stack([
        np.linspace(-2.0, 2.0, 40)[index % 40], np.linspace(-2.0, 2.0, 25)[index // 40],
    ])
    return CalibrationStates(x=x, t=1 + (index * 37) % 999)


def mean_output_error(net, cfg, states):
    quantized = quantize_denoiser(net, cfg, states)
    return float(np.mean(np.abs(quantized(states.x, states.t) - net(states.x, states.t))))


def test_quantization_error_fixture():
    expected = load_golden("quantization_error")
    net, states = closed_form_mlp(), grid_states()
    w4a8 = mean_output_error(net, QuantConfig(weight_bits=4, act_bits=8), states)
    w8a8 = mean_output_error(net, QuantConfig(weight_bits=8, act_bits=8), states)
    assert w4a8 == pytest.approx(expected["W4A8"], rel=1e-9)
    assert w8a8 == pytest.approx(expected["W8A8"], rel=1e-9)
    assert 0.0 < w8a8 <= w4a8


@pytest.mark.slow
def test_trained_net_quantization_error(schedule, recorded):
    gaussian = GaussianMixture(weights=[1.0], means=[[0.0]], component_stds=[0.2])
    spec = TrainingSpec(hidden_layers=3, width=32, steps=5000, seed=0)
    net = train_mlp_denoiser(gaussian, schedule, spec)
    states = collect_calibration_states(gaussian, schedule, 1000, seed=0)

    w4a8 = mean_output_error(net, QuantConfig(weight_bits=4, act_bits=8), states)
    w8a8 = mean_output_error(net, QuantConfig(weight_bits=8, act_bits=8), states)
    assert 0.0 < w8a8 <= w4a8
    recorded("trained_quantization_error", {"W4A8": w4a8, "W8A8": w8a8})


def test_model_size(mlp):
    # widths 18 -> 32 -> 32 -> 2
    assert model_size_bytes(mlp, QuantConfig()) == 6920
    assert model_size_bytes(mlp, QuantConfig(weight_bits=4, act_bits=8)) == 1096


def test_activation_scales(mlp, states):
    scales = calibrate_activation_scales(mlp, 8, states)
    hidden = mlp.hidden_outputs(states.x, states.t)
    assert len(scales) == len(hidden) == 2
    for scale, h in zip(scales, hidden):
        assert scale == pytest.approx(np.abs(h).max() / 127, rel=1e-12)


def test_calibration_states(gmm, schedule):
    states = collect_calibration_states(gmm, schedule, 100, seed=4)
    assert states.x.shape == (100, 2)
    assert states.t.min() >= 1 and states.t.max() < schedule.n_train
    again = collect_calibration_states(gmm, schedule, 100, seed=4)
    assert np.array_equal(states.x, again.x)
    other = collect_calibration_states(gmm, schedule, 100, seed=4, purpose="ptqd-states")
    assert not np.array_equal(states.x, other.x)
    with pytest.raises(ValidationError):
        collect_calibration_states(gmm, schedule, 0, seed=4)


def test_ptqd_on_identical_models(exact, states):
    params = estimate_ptqd_params(exact, exact, states)
    assert params.gamma == pytest.approx(0.0, abs=1e-12)
    assert params.delta_std == pytest.approx(0.0, abs=1e-12)
    np.testing.assert_allclose(params.delta_mean, 0.0, atol=1e-12)


def test_ptqd_recovers_planted_parameters(exact, gmm, schedule):
    states = collect_calibration_states(gmm, schedule, 10000, seed=1)
    planted = CorruptedDenoiser(exact, 0.1, [0.05, -0.03], 0.2, seed=2)
    params = estimate_ptqd_params(exact, planted, states)
    full = exact(states.x, states.t, np.arange(len(states)))
    values = full.size
    gamma_error = 0.2 / np.sqrt(values * np.var(full))
    std_error = 0.2 / np.sqrt(2 * values)
    assert abs(params.gamma - 0.1) <= 2 * gamma_error
    assert abs(params.delta_std - 0.2) <= 2 * std_error
    np.testing.assert_allclose(params.delta_mean, [0.05, -0.03], atol=0.01)


def test_ptqd_degenerate(states):
    constant = ConstantDenoiser([0.3, 0.3])
    with pytest.raises(DegenerateCalibrationError):
        estimate_ptqd_params(constant, constant, states)
