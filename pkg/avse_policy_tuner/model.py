"""
The mask-based audio-visual enhancer: encoder, visual frontend, TCN separator and decoder,
the SI-SNR training loss, and an Adam optimiser over the model's parameters.
"""

from __future__ import annotations

import copy
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from avse_policy_tuner import autodiff as ad
from avse_policy_tuner.autodiff import DiffTensor
from avse_policy_tuner.logging.tuner_error import InvalidArgumentError
from avse_policy_tuner.metrics import EPS, si_snr_with_grad
from avse_policy_tuner.signals import DEFAULT_SAMPLE_RATE, VisualStream, Waveform

VISUAL_KERNEL = 3
TCN_KERNEL = 3
PRELU_INIT = 0.25


@dataclass(frozen=True)
class ModelConfig:
    """
    Size of the enhancer.

    :param N: Encoder channels (latent dimension and mask height).
    :param kernel: Encoder / decoder window, in samples.
    :param stride: Encoder / decoder hop, in samples.
    :param tcn_blocks: Number of residual TCN blocks; block b uses dilation 2**b.
    :param tcn_channels: Channels inside the separator.
    :param d_v: Visual feature dimension.
    """

    N: int = 64
    kernel: int = 16
    stride: int = 8
    tcn_blocks: int = 3
    tcn_channels: int = 64
    d_v: int = 4

    def __post_init__(self) -> None:
        for key, value in asdict(self).items():
            if not isinstance(value, int) or isinstance(value, bool) or value <= 0:
                raise InvalidArgumentError(f"ModelConfig.{key} must be a positive integer, got {value!r}.")
        if self.stride > self.kernel:
            raise InvalidArgumentError(
                f"ModelConfig.stride ({self.stride}) must not exceed kernel ({self.kernel})."
            )

    @property
    def dilations(self) -> Tuple[int, ...]:
        return tuple(2**b for b in range(self.tcn_blocks))

    def n_frames(self, n_samples: int) -> int:
        """K, the number of latent frames for an input of `n_samples`."""
        return (n_samples - self.kernel) // self.stride + 1

    def to_dict(self) -> Dict[str, int]:
        return asdict(self)


@dataclass
class ForwardTrace:
    """Intermediate tensors of one forward pass."""

    latent: DiffTensor
    vproj: DiffTensor
    mask_mean: DiffTensor
    enhanced_tensor: DiffTensor
    sample_rate: int = DEFAULT_SAMPLE_RATE

    @property
    def enhanced(self) -> Waveform:
        return Waveform(self.enhanced_tensor.values.reshape(-1), self.sample_rate)


def parameter_shapes(config: ModelConfig) -> Dict[str, Tuple[int, ...]]:
    """Name and shape of every trainable array, in initialisation order."""
    n, k, h, d_v = config.N, config.kernel, config.tcn_channels, config.d_v
    shapes: Dict[str, Tuple[int, ...]] = {
        "encoder.weight": (n, 1, k),
        "encoder.bias": (n,),
        "visual.depthwise.weight": (d_v, VISUAL_KERNEL),
        "visual.depthwise.bias": (d_v,),
        "visual.pointwise.weight": (h, d_v, 1),
        "visual.pointwise.bias": (h,),
        "fusion.weight": (h, n + h, 1),
        "fusion.bias": (h,),
    }
    for b in range(config.tcn_blocks):
        shapes.update(
            {
                f"tcn.{b}.in.weight": (h, h, 1),
                f"tcn.{b}.in.bias": (h,),
                f"tcn.{b}.prelu1": (1,),
                f"tcn.{b}.depthwise.weight": (h, TCN_KERNEL),
                f"tcn.{b}.depthwise.bias": (h,),
                f"tcn.{b}.prelu2": (1,),
                f"tcn.{b}.out.weight": (h, h, 1),
                f"tcn.{b}.out.bias": (h,),
            }
        )
    shapes.update(
        {
            "mask.weight": (n, h, 1),
            "mask.bias": (n,),
            "decoder.weight": (n, 1, k),
        }
    )
    return shapes


def _fan_in(name: str, shapes: Dict[str, Tuple[int, ...]]) -> int:
    weight_shape = shapes[name.replace(".bias", ".weight")]
    if "depthwise" in name:
        return weight_shape[-1]
    if name == "decoder.weight":
        return weight_shape[0] * weight_shape[-1]
    return weight_shape[1] * weight_shape[2]


class EnhancerModel:
    """
    f_theta(x, v): predicts a sigmoid mask over the encoder latent of the noisy waveform
    `x`, conditioned on the visual stream `v`, and decodes the masked latent.

    Weights are initialised from U(-1/sqrt(fan_in), 1/sqrt(fan_in)) with a fixed seed;
    PReLU slopes start at 0.25.
    """

    def __init__(self, config: Optional[ModelConfig] = None, seed: int = 0) -> None:
        self.config = config if config is not None else ModelConfig()
        rng = np.random.default_rng(seed)
        shapes = parameter_shapes(self.config)
        self.params: Dict[str, DiffTensor] = {}
        for name, shape in shapes.items():
            if "prelu" in name:
                values = np.full(shape, PRELU_INIT)
            else:
                bound = 1.0 / np.sqrt(_fan_in(name, shapes))
                values = rng.uniform(-bound, bound, size=shape)
            self.params[name] = ad.parameter(values, name=name)

    @property
    def frozen(self) -> bool:
        return not any(p.requires_grad for p in self.params.values())

    def parameters(self) -> List[DiffTensor]:
        return list(self.params.values())

    def parameter_count(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def freeze(self) -> EnhancerModel:
        """Stop recording gradients for every parameter (in place)."""
        for p in self.params.values():
            p.requires_grad = False
            p.zero_grad()
        return self

    def snapshot(self) -> EnhancerModel:
        """A deep copy whose parameters are independent of this model's."""
        clone = copy.copy(self)
        clone.params = {
            name: DiffTensor(p.values.copy(), requires_grad=p.requires_grad, name=name)
            for name, p in self.params.items()
        }
        return clone

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {name: p.values.copy() for name, p in self.params.items()}

    def load_state_dict(self, arrays: Dict[str, np.ndarray]) -> None:
        """Replace parameter values; names and shapes must match exactly."""
        if set(arrays) != set(self.params):
            missing = sorted(set(self.params) - set(arrays))
            unexpected = sorted(set(arrays) - set(self.params))
            raise InvalidArgumentError(
                f"Parameter names do not match (missing {missing}, unexpected {unexpected})."
            )
        for name, values in arrays.items():
            values = np.asarray(values, dtype=np.float64)
            if values.shape != self.params[name].shape:
                raise InvalidArgumentError(
                    f"Shape mismatch for {name}: expected {self.params[name].shape}, "
                    f"got {values.shape}."
                )
        for name, values in arrays.items():
            self.params[name].values = np.array(values, dtype=np.float64)
            self.params[name].zero_grad()

    def _p(self, name: str) -> DiffTensor:
        return self.params[name]

    def encode(self, x: Waveform) -> DiffTensor:
        """W = ReLU(Conv1D(x)), shape (N, K)."""
        if len(x) < self.config.kernel:
            raise InvalidArgumentError(
                f"Input of {len(x)} samples is shorter than the encoder kernel ({self.config.kernel})."
            )
        signal = DiffTensor(x.samples[None, :])
        return ad.relu(
            ad.conv1d(
                signal, self._p("encoder.weight"), self._p("encoder.bias"), stride=self.config.stride
            )
        )

    def visual_frontend(self, v: VisualStream, target_frames: int) -> DiffTensor:
        """Depthwise temporal conv, pointwise conv, then interpolation to K frames."""
        if v.n_frames < 2:
            raise InvalidArgumentError(f"The visual stream needs at least 2 frames, got {v.n_frames}.")
        if v.dim != self.config.d_v:
            raise InvalidArgumentError(
                f"The visual stream has dimension {v.dim}, the model expects {self.config.d_v}."
            )
        features = DiffTensor(v.features)
        hidden = ad.depthwise_conv1d(
            features, self._p("visual.depthwise.weight"), self._p("visual.depthwise.bias")
        )
        projected = ad.conv1d(
            hidden, self._p("visual.pointwise.weight"), self._p("visual.pointwise.bias")
        )
        return ad.interpolate_time(projected, target_frames)

    def separate(self, latent: DiffTensor, vproj: DiffTensor) -> DiffTensor:
        """Fuse audio and visual features and predict the mask mean, in (0, 1)^(N x K)."""
        if latent.shape[1] != vproj.shape[1]:
            raise InvalidArgumentError(
                f"Frame counts differ: latent has {latent.shape[1]}, visual has {vproj.shape[1]}."
            )
        if latent.shape[0] != self.config.N or vproj.shape[0] != self.config.tcn_channels:
            raise InvalidArgumentError(
                f"Unexpected channel counts: latent {latent.shape[0]}, visual {vproj.shape[0]}."
            )
        hidden = ad.conv1d(
            ad.concat([latent, vproj], axis=0), self._p("fusion.weight"), self._p("fusion.bias")
        )
        for b, dilation in enumerate(self.config.dilations):
            block = ad.conv1d(hidden, self._p(f"tcn.{b}.in.weight"), self._p(f"tcn.{b}.in.bias"))
            block = ad.prelu(block, self._p(f"tcn.{b}.prelu1"))
            block = ad.depthwise_conv1d(
                block,
                self._p(f"tcn.{b}.depthwise.weight"),
                self._p(f"tcn.{b}.depthwise.bias"),
                dilation=dilation,
            )
            block = ad.prelu(block, self._p(f"tcn.{b}.prelu2"))
            block = ad.conv1d(block, self._p(f"tcn.{b}.out.weight"), self._p(f"tcn.{b}.out.bias"))
            hidden = hidden + block
        return ad.sigmoid(ad.conv1d(hidden, self._p("mask.weight"), self._p("mask.bias")))

    def decode(self, latent: DiffTensor, mask: DiffTensor, out_len: int) -> DiffTensor:
        """Transposed conv of W * mask, trimmed or zero-padded to `out_len`; shape (1, out_len)."""
        mask = ad.lift(mask)
        if latent.shape != mask.shape:
            raise InvalidArgumentError(
                f"Latent {latent.shape} and mask {mask.shape} must have the same shape."
            )
        frames = ad.conv_transpose1d(latent * mask, self._p("decoder.weight"), self.config.stride)
        return ad.fit_length(frames, out_len)

    def forward(self, x: Waveform, v: VisualStream) -> ForwardTrace:
        latent = self.encode(x)
        vproj = self.visual_frontend(v, latent.shape[1])
        mask_mean = self.separate(latent, vproj)
        enhanced = self.decode(latent, mask_mean, len(x))
        return ForwardTrace(latent, vproj, mask_mean, enhanced, x.sample_rate)


def si_snr_loss(s: Waveform, y_hat: DiffTensor, eps: float = EPS) -> DiffTensor:
    """
    -SI-SNR(s, y_hat) as a scalar tensor, differentiable with respect to `y_hat`.
    """
    estimate = y_hat.values.reshape(-1)
    if len(estimate) != len(s):
        raise InvalidArgumentError(
            f"Length mismatch: reference has {len(s)}, estimate has {len(estimate)} samples."
        )
    value, grad = si_snr_with_grad(s.samples, estimate, eps)
    return ad.with_local_grad(y_hat, -value, -grad.reshape(y_hat.shape))


@dataclass
class AdamState:
    """First and second moments per parameter plus the shared step counter."""

    step: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(
    params: Dict[str, np.ndarray],
    grads: Dict[str, np.ndarray],
    state: AdamState,
    lr: float = 1e-3,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> Dict[str, np.ndarray]:
    """
    One bias-corrected Adam update. Returns new parameter arrays and advances `state`.
    """
    state.step += 1
    updated = {}
    for name, value in params.items():
        grad = grads[name]
        if grad.shape != value.shape:
            raise InvalidArgumentError(
                f"Gradient shape {grad.shape} does not match parameter {name} {value.shape}."
            )
        m = beta1 * state.m.get(name, np.zeros_like(value)) + (1 - beta1) * grad
        v = beta2 * state.v.get(name, np.zeros_like(value)) + (1 - beta2) * grad**2
        state.m[name], state.v[name] = m, v
        m_hat = m / (1 - beta1**state.step)
        v_hat = v / (1 - beta2**state.step)
        updated[name] = value - lr * m_hat / (np.sqrt(v_hat) + eps)
    return updated


class Adam:
    """Adam over a named set of tensors, updating their values in place."""

    def __init__(
        self,
        params: Dict[str, DiffTensor],
        lr: float = 1e-3,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
    ) -> None:
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.state = AdamState()

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def step(self) -> None:
        trainable = {name: p for name, p in self.params.items() if p.requires_grad}
        updated = adam_step(
            {name: p.values for name, p in trainable.items()},
            {name: p.grad for name, p in trainable.items()},
            self.state,
            self.lr,
            self.beta1,
            self.beta2,
            self.eps,
        )
        for name, values in updated.items():
            trainable[name].values = values

