from typing import Callable, List

import numpy as np
import pytest

from avse_policy_tuner import autodiff as ad
from avse_policy_tuner.autodiff import DiffTensor, finite_difference_grad
from avse_policy_tuner.logging.tuner_error import InvalidArgumentError
from avse_policy_tuner.model import (
    PRELU_INIT,
    Adam,
    AdamState,
    EnhancerModel,
    ModelConfig,
    adam_step,
    parameter_shapes,
    si_snr_loss,
)
from avse_policy_tuner.signals import (
    Scene,
    VisualStream,
    Waveform,
    generate_clean,
    generate_noise,
    mix_scene,
)


@pytest.fixture
def short_scene() -> Scene:
    """A tenth of a second: enough frames for the tiny model, quick to differentiate."""
    clean = generate_clean(0.1, f0_hz=150.0, seed=21)
    return mix_scene(clean, generate_noise("pink", 0.2, seed=22), 0.0, seed=23)


def relative_error(model: EnhancerModel, build: Callable[[], DiffTensor], names: List[str]) -> float:
    """Worst relative error between backward() and central differences, per parameter."""
    model.zero_grad()
    build().backward()
    worst = 0.0
    for name in names:
        tensor = model.params[name]
        numeric = finite_difference_grad(lambda: build().item(), tensor, h=1e-6)
        scale = np.linalg.norm(tensor.grad) + np.linalg.norm(numeric)
        worst = max(worst, np.linalg.norm(tensor.grad - numeric) / max(scale, 1e-12))
    return worst


def test_parameter_count() -> None:
    assert EnhancerModel().parameter_count() == 40598
    assert EnhancerModel(seed=1).parameter_count() == 40598

    tiny = ModelConfig(N=4, kernel=8, stride=4, tcn_blocks=2, tcn_channels=4, d_v=4)
    shapes = parameter_shapes(tiny)
    assert EnhancerModel(tiny).parameter_count() == sum(int(np.prod(s)) for s in shapes.values())
    assert EnhancerModel(tiny).parameter_count() == 276


@pytest.mark.parametrize(
    ["overrides", "match"],
    [
        pytest.param({"N": 0}, "ModelConfig.N", id="Zero channels"),
        pytest.param({"stride": 32}, "must not exceed kernel", id="Stride above kernel"),
        pytest.param({"tcn_blocks": 1.5}, "ModelConfig.tcn_blocks", id="Non-integer"),
    ],
)
def test_model_config_validation(overrides, match: str) -> None:
    with pytest.raises(InvalidArgumentError, match=match):
        ModelConfig(**overrides)


def test_initialisation() -> None:
    model = EnhancerModel(seed=3)
    assert np.all(np.abs(model.params["encoder.weight"].values) <= 0.25)
    assert np.all(np.abs(model.params["fusion.weight"].values) <= 1 / np.sqrt(128))
    assert np.all(np.abs(model.params["visual.depthwise.weight"].values) <= 1 / np.sqrt(3))
    for b in range(3):
        assert model.params[f"tcn.{b}.prelu1"].values[0] == PRELU_INIT
        assert model.params[f"tcn.{b}.prelu2"].values[0] == PRELU_INIT

    # Seeded
    again = EnhancerModel(seed=3)
    for name, values in model.state_dict().items():
        assert np.array_equal(values, again.state_dict()[name])
    other = EnhancerModel(seed=4)
    assert not np.array_equal(
        model.params["encoder.weight"].values, other.params["encoder.weight"].values
    )


def test_encode(tiny_model: EnhancerModel, rng) -> None:
    zeros = tiny_model.encode(Waveform(np.zeros(40)))
    assert zeros.shape == (4, 9)
    expected = np.maximum(tiny_model.params["encoder.bias"].values, 0.0)
    assert np.allclose(zeros.values, expected[:, None])

    assert np.all(tiny_model.encode(Waveform(rng.standard_normal(200))).values >= 0)

    with pytest.raises(InvalidArgumentError, match="shorter than the encoder kernel"):
        tiny_model.encode(Waveform(np.zeros(7)))


@pytest.mark.parametrize("n_frames", [pytest.param(n, id=f"T_v={n}") for n in (10, 25, 100)])
def test_visual_frontend_shape(tiny_model: EnhancerModel, rng, n_frames: int) -> None:
    stream = VisualStream(rng.standard_normal((4, n_frames)))
    assert tiny_model.visual_frontend(stream, 37).shape == (4, 37)

    # Zero stream: the pointwise bias, broadcast across time
    zero = tiny_model.visual_frontend(VisualStream(np.zeros((4, n_frames))), 37)
    depthwise_bias = tiny_model.params["visual.depthwise.bias"].values
    pointwise = tiny_model.params["visual.pointwise.weight"].values[:, :, 0]
    bias = pointwise @ depthwise_bias + tiny_model.params["visual.pointwise.bias"].values
    assert np.allclose(zero.values, bias[:, None])


def test_visual_frontend_errors(tiny_model: EnhancerModel) -> None:
    with pytest.raises(InvalidArgumentError, match="at least 2 frames"):
        tiny_model.visual_frontend(VisualStream(np.zeros((4, 1))), 10)
    with pytest.raises(InvalidArgumentError, match="dimension 3"):
        tiny_model.visual_frontend(VisualStream(np.zeros((3, 10))), 10)


def test_separate_and_decode(tiny_model: EnhancerModel, rng) -> None:
    latent = ad.relu(DiffTensor(rng.standard_normal((4, 30))))
    vproj = DiffTensor(rng.standard_normal((4, 30)))
    mask = tiny_model.separate(latent, vproj)
    assert mask.shape == (4, 30)
    assert np.all((mask.values > 0) & (mask.values < 1))

    with pytest.raises(InvalidArgumentError, match="Frame counts differ"):
        tiny_model.separate(latent, DiffTensor(np.zeros((4, 29))))

    silent = tiny_model.decode(latent, np.zeros((4, 30)), 124)
    assert silent.shape == (1, 124)
    assert not np.any(silent.values)
    for out_len in (124, 125, 100):
        assert tiny_model.decode(latent, mask, out_len).shape == (1, out_len)

    with pytest.raises(InvalidArgumentError, match="same shape"):
        tiny_model.decode(latent, np.zeros((4, 29)), 124)


def test_forward(tiny_model: EnhancerModel, short_scene: Scene) -> None:
    first = tiny_model.forward(short_scene.noisy, short_scene.visual)
    second = tiny_model.forward(short_scene.noisy, short_scene.visual)
    assert len(first.enhanced) == len(short_scene.noisy)
    assert first.mask_mean.shape == (4, tiny_model.config.n_frames(len(short_scene.noisy)))
    assert np.all((first.mask_mean.values > 0) & (first.mask_mean.values < 1))
    assert np.array_equal(first.enhanced.samples, second.enhanced.samples)
    assert np.array_equal(first.mask_mean.values, second.mask_mean.values)

    # Default-size model at a full second: length is preserved for odd lengths too
    model = EnhancerModel(seed=0)
    clean = generate_clean(1.0, f0_hz=120.0, seed=1)
    scene = mix_scene(clean, generate_noise("babble", 1.5, seed=2), 5.0, seed=3)
    odd = Waveform(np.append(scene.noisy.samples, 0.0))
    assert len(model.forward(odd, scene.visual).enhanced) == 16001


@pytest.mark.parametrize(
    ["stage", "names"],
    [
        pytest.param("encode", ["encoder.weight", "encoder.bias"], id="Encoder"),
        pytest.param(
            "visual",
            [
                "visual.depthwise.weight",
                "visual.depthwise.bias",
                "visual.pointwise.weight",
                "visual.pointwise.bias",
            ],
            id="Visual frontend",
        ),
        pytest.param(
            "separate",
            ["fusion.weight", "tcn.0.in.weight", "tcn.1.prelu1", "tcn.1.depthwise.weight"],
            id="Separator",
        ),
        pytest.param("decode", ["decoder.weight"], id="Decoder"),
    ],
)
def test_per_layer_gradients(tiny_model: EnhancerModel, short_scene: Scene, stage, names) -> None:
    x, v = short_scene.noisy, short_scene.visual
    n_frames = tiny_model.config.n_frames(len(x))
    weights = np.random.default_rng(0).standard_normal((4, n_frames))
    latent = DiffTensor(tiny_model.encode(x).values)
    vproj = DiffTensor(tiny_model.visual_frontend(v, n_frames).values)
    mask = DiffTensor(tiny_model.separate(latent, vproj).values)

    def build() -> DiffTensor:
        if stage == "encode":
            out = tiny_model.encode(x)
        elif stage == "visual":
            out = tiny_model.visual_frontend(v, n_frames)
        elif stage == "separate":
            out = tiny_model.separate(latent, vproj)
        else:
            decoded = tiny_model.decode(latent, mask, len(x))
            return ad.sum_all(decoded * np.linspace(-1.0, 1.0, len(x)))
        return ad.sum_all(out * weights)

    assert relative_error(tiny_model, build, names) < 1e-4


def test_end_to_end_gradient(tiny_model: EnhancerModel, short_scene: Scene) -> None:
    """SI-SNR loss gradient against central differences for ten sampled parameter entries."""

    def build() -> DiffTensor:
        trace = tiny_model.forward(short_scene.noisy, short_scene.visual)
        return si_snr_loss(short_scene.clean, trace.enhanced_tensor)

    tiny_model.zero_grad()
    build().backward()

    rng = np.random.default_rng(1)
    names = sorted(tiny_model.params)
    analytic, numeric = [], []
    for name in rng.choice(names, size=10, replace=False):
        tensor = tiny_model.params[name]
        index = tuple(int(rng.integers(0, s)) for s in tensor.shape)
        analytic.append(tensor.grad[index])
        numeric.append(
            finite_difference_grad(lambda: build().item(), tensor, [index], h=1e-6)[index]
        )
    analytic, numeric = np.array(analytic), np.array(numeric)
    error = np.linalg.norm(analytic - numeric) / np.linalg.norm(numeric)
    assert error < 1e-3


def test_si_snr_loss(short_scene: Scene, rng) -> None:
    clean = short_scene.clean
    perfect = si_snr_loss(clean, DiffTensor(clean.samples[None, :]))
    assert perfect.item() <= -80.0 + 1e-9

    estimate = clean.samples + 0.5 * rng.standard_normal(len(clean))
    base = si_snr_loss(clean, DiffTensor(estimate)).item()
    for alpha in (0.5, 2.0):
        assert si_snr_loss(clean, DiffTensor(alpha * estimate)).item() == pytest.approx(
            base, abs=1e-6
        )

    with pytest.raises(InvalidArgumentError, match="Length mismatch"):
        si_snr_loss(clean, DiffTensor(estimate[:-1]))


def test_snapshot_and_freeze(tiny_model: EnhancerModel, short_scene: Scene) -> None:
    copy = tiny_model.snapshot()
    copy.params["encoder.bias"].values += 1.0
    assert not np.array_equal(
        copy.params["encoder.bias"].values, tiny_model.params["encoder.bias"].values
    )

    frozen = tiny_model.snapshot().freeze()
    assert frozen.frozen and not tiny_model.frozen
    trace = frozen.forward(short_scene.noisy, short_scene.visual)
    assert not trace.enhanced_tensor.requires_grad
    assert trace.enhanced_tensor._parents == ()


@pytest.mark.parametrize(
    ["mutate", "match"],
    [
        pytest.param(lambda d: d.pop("decoder.weight"), "missing", id="Missing parameter"),
        pytest.param(
            lambda d: d.update({"extra": np.zeros(1)}), "unexpected", id="Unexpected parameter"
        ),
        pytest.param(
            lambda d: d.update({"mask.bias": np.zeros(5)}), "Shape mismatch", id="Wrong shape"
        ),
    ],
)
def test_load_state_dict_errors(tiny_model: EnhancerModel, mutate, match: str) -> None:
    arrays = tiny_model.state_dict()
    before = tiny_model.state_dict()
    mutate(arrays)
    with pytest.raises(InvalidArgumentError, match=match):
        tiny_model.load_state_dict(arrays)
    # Nothing was partially applied
    for name, values in tiny_model.state_dict().items():
        assert np.array_equal(values, before[name])


def test_adam_step() -> None:
    state = AdamState()
    params = {"p": np.array([2.0])}
    assert adam_step(params, {"p": np.array([0.0])}, state)["p"][0] == 2.0

    state = AdamState()
    stepped = adam_step({"p": np.array([0.0])}, {"p": np.array([1.0])}, state, lr=0.001)
    assert stepped["p"][0] == pytest.approx(-0.001, rel=1e-6)
    assert state.step == 1

    with pytest.raises(InvalidArgumentError, match="does not match"):
        adam_step({"p": np.zeros(2)}, {"p": np.zeros(3)}, AdamState())


def test_adam_converges() -> None:
    p = ad.parameter(np.array([0.0]))
    optimiser = Adam({"p": p}, lr=0.1)
    for _ in range(200):
        optimiser.zero_grad()
        ad.sum_all((p - 3.0) ** 2).backward()
        optimiser.step()
    assert abs(p.values[0] - 3.0) < 0.1


def test_adam_skips_frozen(tiny_model: EnhancerModel, short_scene: Scene) -> None:
    tiny_model.params["decoder.weight"].requires_grad = False
    before = tiny_model.params["decoder.weight"].values.copy()
    optimiser = Adam(tiny_model.params, lr=0.01)

    trace = tiny_model.forward(short_scene.noisy, short_scene.visual)
    si_snr_loss(short_scene.clean, trace.enhanced_tensor).backward()
    optimiser.step()
    assert np.array_equal(tiny_model.params["decoder.weight"].values, before)
    untrained = EnhancerModel(tiny_model.config, seed=5).state_dict()
    assert not np.array_equal(tiny_model.state_dict()["encoder.weight"], untrained["encoder.weight"])
