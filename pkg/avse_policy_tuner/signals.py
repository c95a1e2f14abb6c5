"""
Synthetic audio-visual scenes, WAV I/O, resampling and short-time analysis.

Every generator here is a pure function of its arguments and seed, so scenes can be
generated in any order (or in parallel) and still be bit-identical.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import soundfile as sf
from numpy.lib.stride_tricks import sliding_window_view
from scipy.signal import get_window, resample_poly

from avse_policy_tuner.logging.tuner_error import (
    DegenerateSignalError,
    InvalidArgumentError,
    TunerIOError,
    UnsupportedFormatError,
    WavFormatError,
)

DEFAULT_SAMPLE_RATE = 16000
DEFAULT_FRAME_RATE = 25.0
DEFAULT_VISUAL_DIM = 4
NOISE_KINDS = ("white", "pink", "babble")

CLEAN_PEAK = 0.9
N_HARMONICS = 5
ENVELOPE_RATE_RANGE_HZ = (2.0, 6.0)
BABBLE_TALKERS = 4
BABBLE_F0_RANGE_HZ = (90.0, 250.0)
VISUAL_NOISE_STD = 0.01

PCM16_SCALE = 32768.0


@dataclass(eq=False)
class Waveform:
    """
    A sampled mono audio signal.

    :param samples: Amplitudes, nominally in [-1, 1]. Stored as a 1-D float64 array.
    :param sample_rate: Samples per second (Hz).
    """

    samples: np.ndarray
    sample_rate: int = DEFAULT_SAMPLE_RATE

    @property
    def duration_s(self) -> float:
        return len(self.samples) / self.sample_rate

    @property
    def power(self) -> float:
        """Mean-square amplitude (0 for an empty waveform)."""
        return float(np.mean(self.samples**2)) if len(self.samples) else 0.0

    @property
    def rms(self) -> float:
        return math.sqrt(self.power)

    def __len__(self) -> int:
        return len(self.samples)

    def __post_init__(self) -> None:
        self.samples = np.asarray(self.samples, dtype=np.float64).reshape(-1)
        if int(self.sample_rate) != self.sample_rate or self.sample_rate <= 0:
            raise InvalidArgumentError(f"Sample rate must be a positive integer, got {self.sample_rate}.")
        self.sample_rate = int(self.sample_rate)
        if not np.all(np.isfinite(self.samples)):
            raise InvalidArgumentError("Waveform samples must be finite (no NaN / Inf).")

    def with_samples(self, samples: np.ndarray) -> Waveform:
        """A new waveform at the same sample rate."""
        return Waveform(samples, self.sample_rate)

    def is_silent(self) -> bool:
        return not np.any(self.samples)


@dataclass(eq=False)
class VisualStream:
    """
    Per-frame visual features aligned with the target talker, shape (D_v, T_v).
    """

    features: np.ndarray
    frame_rate: float = DEFAULT_FRAME_RATE

    @property
    def dim(self) -> int:
        return self.features.shape[0]

    @property
    def n_frames(self) -> int:
        return self.features.shape[1]

    def __post_init__(self) -> None:
        self.features = np.atleast_2d(np.asarray(self.features, dtype=np.float64))
        if self.frame_rate <= 0:
            raise InvalidArgumentError(f"Frame rate must be positive, got {self.frame_rate}.")
        if not np.all(np.isfinite(self.features)):
            raise InvalidArgumentError("Visual features must be finite.")


@dataclass(eq=False)
class Scene:
    """
    One training / evaluation example: clean target, noise, their mixture at a known SNR,
    and the visual stream of the target talker.
    """

    clean: Waveform
    noise: Waveform
    noisy: Waveform
    visual: VisualStream
    snr_db: float
    seed: int
    scene_id: str = ""
    metadata: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        lengths = {len(self.clean), len(self.noise), len(self.noisy)}
        rates = {self.clean.sample_rate, self.noise.sample_rate, self.noisy.sample_rate}
        if len(lengths) != 1 or len(rates) != 1:
            raise InvalidArgumentError(
                "Scene waveforms must share length and sample rate "
                f"(lengths {sorted(lengths)}, rates {sorted(rates)})."
            )


@dataclass(eq=False)
class StftFrame:
    """
    Magnitude short-time spectrum, shape (bins, frames).
    """

    magnitudes: np.ndarray
    window_len: int
    hop: int
    n_fft: int

    @property
    def n_frames(self) -> int:
        return self.magnitudes.shape[1]


def _n_samples(duration_s: float, sample_rate: int) -> int:
    if duration_s <= 0:
        raise InvalidArgumentError(f"Duration must be positive, got {duration_s}.")
    if sample_rate <= 0:
        raise InvalidArgumentError(f"Sample rate must be positive, got {sample_rate}.")
    return int(round(duration_s * sample_rate))


def _child_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([int(seed), int(index)]).generate_state(1)[0])


def speech_envelope(n: int, sample_rate: int, rng: np.random.Generator) -> np.ndarray:
    """
    A slow syllabic envelope in [0, 1] with exact zeros (silent gaps) where the sum of
    three 2-6 Hz sinusoids dips below half its negative peak.
    """
    t = np.arange(n) / sample_rate
    rates = rng.uniform(*ENVELOPE_RATE_RANGE_HZ, size=3)
    phases = rng.uniform(0.0, 2 * np.pi, size=3)
    raw = np.sin(2 * np.pi * rates[:, None] * t[None, :] + phases[:, None]).sum(axis=0)
    peak = np.max(np.abs(raw)) if n else 0.0
    if peak > 0:
        raw = raw / peak
    return np.clip(raw + 0.5, 0.0, None) / 1.5


def generate_clean(
    duration_s: float,
    f0_hz: float,
    seed: int,
    sample_rate: int = DEFAULT_SAMPLE_RATE,
) -> Waveform:
    """
    Synthesise a voiced, speech-like target signal.

    The signal is a harmonic complex (f0 plus 4 harmonics, amplitude 1/k) modulated by a
    slow random envelope with silent gaps, scaled to a peak amplitude of 0.9.
    """
    n = _n_samples(duration_s, sample_rate)
    if not 50.0 <= f0_hz <= 400.0:
        raise InvalidArgumentError(f"f0 must lie in [50, 400] Hz, got {f0_hz}.")
    rng = np.random.default_rng(seed)

    t = np.arange(n) / sample_rate
    phases = rng.uniform(0.0, 2 * np.pi, size=N_HARMONICS)
    carrier = np.zeros(n)
    for k in range(1, N_HARMONICS + 1):
        if k * f0_hz < sample_rate / 2:
            carrier += np.sin(2 * np.pi * k * f0_hz * t + phases[k - 1]) / k

    samples = carrier * speech_envelope(n, sample_rate, rng)
    peak = np.max(np.abs(samples)) if n else 0.0
    if peak > 0:
        samples *= CLEAN_PEAK / peak
    return Waveform(samples, sample_rate)


def generate_noise(
    kind: str,
    duration_s: float,
    seed: int,
    sample_rate: int = DEFAULT_SAMPLE_RATE,
) -> Waveform:
    """
    Unit-RMS noise of the requested kind.

    - white: i.i.d. Gaussian samples.
    - pink: white noise shaped by 1/sqrt(f) in the frequency domain (-3 dB / octave).
    - babble: 4 overlapped synthetic talkers with seeds derived from `seed`.
    """
    if kind not in NOISE_KINDS:
        raise InvalidArgumentError(f"Unknown noise kind '{kind}', expected one of {NOISE_KINDS}.")
    n = _n_samples(duration_s, sample_rate)
    rng = np.random.default_rng(seed)

    match kind:
        case "white":
            samples = rng.standard_normal(n)
        case "pink":
            spectrum = np.fft.rfft(rng.standard_normal(n))
            freqs = np.fft.rfftfreq(n, d=1.0 / sample_rate)
            shaping = np.zeros_like(freqs)
            shaping[1:] = 1.0 / np.sqrt(freqs[1:])
            samples = np.fft.irfft(spectrum * shaping, n=n)
        case "babble":
            samples = np.zeros(n)
            for talker in range(BABBLE_TALKERS):
                f0 = float(rng.uniform(*BABBLE_F0_RANGE_HZ))
                samples += generate_clean(
                    duration_s, f0, _child_seed(seed, talker), sample_rate
                ).samples

    rms = math.sqrt(np.mean(samples**2)) if n else 0.0
    if rms == 0.0:
        raise DegenerateSignalError(f"Generated {kind} noise has zero energy.")
    return Waveform(samples / rms, sample_rate)


def measured_snr(clean: Waveform, noisy: Waveform) -> float:
    """SNR (dB) of `clean` against the residual `noisy - clean`."""
    residual = noisy.samples - clean.samples
    p_noise = np.mean(residual**2)
    p_clean = np.mean(clean.samples**2)
    if p_noise == 0 or p_clean == 0:
        raise DegenerateSignalError("SNR is undefined for an all-zero clean signal or residual.")
    return float(10 * np.log10(p_clean / p_noise))


def mix_scene(
    clean: Waveform,
    noise: Waveform,
    snr_db: float,
    seed: int,
    frame_rate: float = DEFAULT_FRAME_RATE,
    d_v: int = DEFAULT_VISUAL_DIM,
) -> Scene:
    """
    Mix `clean` with a crop of `noise` rescaled to the requested SNR, and attach the
    visual stream of the clean talker.

    The crop offset is drawn from `seed`, so longer noise recordings are used evenly.
    """
    if clean.sample_rate != noise.sample_rate:
        raise InvalidArgumentError(
            f"Sample rates differ (clean {clean.sample_rate}, noise {noise.sample_rate})."
        )
    if len(noise) < len(clean):
        raise InvalidArgumentError(
            f"Noise ({len(noise)} samples) is shorter than clean ({len(clean)} samples)."
        )
    rng = np.random.default_rng(seed)
    offset = int(rng.integers(0, len(noise) - len(clean) + 1))
    cropped = noise.samples[offset : offset + len(clean)]

    p_clean = clean.power
    p_noise = float(np.mean(cropped**2)) if len(cropped) else 0.0
    if p_clean == 0.0:
        raise DegenerateSignalError("Cannot mix an all-zero clean signal at a prescribed SNR.")
    if p_noise == 0.0:
        raise DegenerateSignalError("Cannot mix an all-zero noise signal at a prescribed SNR.")

    gain = math.sqrt(p_clean / (p_noise * 10 ** (snr_db / 10)))
    scaled = clean.with_samples(cropped * gain)
    noisy = clean.with_samples(clean.samples + scaled.samples)
    return Scene(
        clean=clean,
        noise=scaled,
        noisy=noisy,
        visual=visual_features(clean, frame_rate=frame_rate, d_v=d_v, seed=seed),
        snr_db=float(snr_db),
        seed=int(seed),
    )


def normalize_scene_peak(scene: Scene, peak: float = CLEAN_PEAK) -> Scene:
    """
    Apply one common gain to clean, noise and mixture so the mixture peaks at `peak`.

    A common gain leaves the SNR (and the visual stream, which is recomputed) unchanged
    in ratio terms, and keeps the mixture inside the 16-bit PCM range.
    """
    current = float(np.max(np.abs(scene.noisy.samples))) if len(scene.noisy) else 0.0
    if current == 0.0:
        raise DegenerateSignalError("Cannot normalise an all-zero mixture.")
    gain = peak / current
    clean = scene.clean.with_samples(scene.clean.samples * gain)
    return Scene(
        clean=clean,
        noise=scene.noise.with_samples(scene.noise.samples * gain),
        noisy=scene.noisy.with_samples(scene.noisy.samples * gain),
        visual=visual_features(
            clean, frame_rate=scene.visual.frame_rate, d_v=scene.visual.dim, seed=scene.seed
        ),
        snr_db=scene.snr_db,
        seed=scene.seed,
        scene_id=scene.scene_id,
        metadata=dict(scene.metadata),
    )


def frame_bounds(n_samples: int, sample_rate: int, frame_rate: float) -> np.ndarray:
    """
    Sample boundaries of the visual frames covering `n_samples`, shape (T_v + 1,).

    T_v = ceil(duration * frame_rate); the last frame may be partial.
    """
    n_frames = math.ceil(n_samples * frame_rate / sample_rate)
    edges = np.floor(np.arange(n_frames + 1) * sample_rate / frame_rate).astype(int)
    return np.minimum(edges, n_samples)


def visual_features(
    clean: Waveform,
    frame_rate: float = DEFAULT_FRAME_RATE,
    d_v: int = DEFAULT_VISUAL_DIM,
    seed: int = 0,
) -> VisualStream:
    """
    Stand-in for lip-region video features: signals correlated with the target talker.

    Row 0 is the per-frame RMS envelope of `clean`. Rows 1..d_v-1 are successive
    derivatives of the envelope, smoothed with a 3-tap moving average, plus seeded
    Gaussian noise (std 0.01).
    """
    if frame_rate <= 0:
        raise InvalidArgumentError(f"Frame rate must be positive, got {frame_rate}.")
    if d_v < 1:
        raise InvalidArgumentError(f"Visual dimension must be at least 1, got {d_v}.")
    rng = np.random.default_rng(seed)

    edges = frame_bounds(len(clean), clean.sample_rate, frame_rate)
    envelope = np.zeros(len(edges) - 1)
    for i, (start, end) in enumerate(zip(edges[:-1], edges[1:])):
        if end > start:
            envelope[i] = math.sqrt(np.mean(clean.samples[start:end] ** 2))

    features = np.zeros((d_v, len(envelope)))
    features[0] = envelope
    derivative = envelope
    smoother = np.ones(3) / 3
    for row in range(1, d_v):
        derivative = (
            np.gradient(derivative) if len(derivative) > 1 else np.zeros_like(derivative)
        )
        smoothed = np.convolve(derivative, smoother, mode="same")
        features[row] = smoothed + rng.normal(0.0, VISUAL_NOISE_STD, size=len(envelope))
    return VisualStream(features, frame_rate)


def write_wav(path: Path, waveform: Waveform) -> Path:
    """
    Write `waveform` as 16-bit PCM mono WAV.

    Samples outside [-1, 1] are clipped, and a warning reports how many were affected.
    Quantisation uses a scale of 32768, so the round-trip error is at most 1/32768.
    """
    path = Path(path)
    clipped = np.clip(waveform.samples, -1.0, 1.0)
    n_clipped = int(np.count_nonzero(clipped != waveform.samples))
    if n_clipped:
        warnings.warn(f"{n_clipped} samples outside [-1, 1] were clipped when writing {path}.")
    pcm = np.clip(np.round(clipped * PCM16_SCALE), -PCM16_SCALE, PCM16_SCALE - 1).astype("<i2")
    try:
        sf.write(path, pcm, waveform.sample_rate, subtype="PCM_16", format="WAV")
    except (OSError, RuntimeError) as e:
        raise TunerIOError(f"Could not write {path}: {e}") from e
    return path


def read_wav(path: Path) -> Waveform:
    """
    Read a 16-bit PCM mono WAV file.

    Raises `WavFormatError` for files that are not valid WAV, and `UnsupportedFormatError`
    for valid WAV files with a bit depth or channel count we do not handle.
    """
    path = Path(path)
    if not path.is_file():
        raise TunerIOError(f"No such WAV file: {path}")
    try:
        info = sf.info(str(path))
    except RuntimeError as e:
        raise WavFormatError(f"Malformed WAV file {path}: {e}") from e
    if info.format != "WAV":
        raise WavFormatError(f"{path} is not a RIFF/WAVE file (found {info.format}).")
    if info.subtype != "PCM_16":
        raise UnsupportedFormatError(f"{path} uses {info.subtype}; only 16-bit PCM is supported.")
    if info.channels != 1:
        raise UnsupportedFormatError(f"{path} has {info.channels} channels; only mono is supported.")

    pcm, sample_rate = sf.read(str(path), dtype="int16", always_2d=False)
    return Waveform(np.asarray(pcm, dtype=np.float64) / PCM16_SCALE, sample_rate)


def resample(waveform: Waveform, target_rate: int) -> Waveform:
    """
    Windowed-sinc polyphase resampling to `target_rate`.

    The output has round(len * target / source) samples. Equal rates return an exact copy.
    """
    if target_rate <= 0:
        raise InvalidArgumentError(f"Target rate must be positive, got {target_rate}.")
    target_rate = int(target_rate)
    if target_rate == waveform.sample_rate:
        return Waveform(waveform.samples.copy(), target_rate)

    expected = int(round(len(waveform) * target_rate / waveform.sample_rate))
    if len(waveform) == 0:
        return Waveform(np.zeros(0), target_rate)
    divisor = math.gcd(target_rate, waveform.sample_rate)
    out = resample_poly(
        waveform.samples, target_rate // divisor, waveform.sample_rate // divisor
    )
    if len(out) >= expected:
        out = out[:expected]
    else:
        out = np.concatenate([out, np.zeros(expected - len(out))])
    return Waveform(out, target_rate)


def frame_signal(samples: np.ndarray, window_len: int, hop: int) -> np.ndarray:
    """
    View `samples` as overlapping frames, shape (frames, window_len), with
    frames = floor((len - window_len) / hop) + 1.
    """
    return sliding_window_view(samples, window_len)[::hop]


def stft(
    waveform: Waveform, window_len: int, hop: int, n_fft: Optional[int] = None
) -> StftFrame:
    """
    Hann-windowed magnitude STFT without padding.

    :param n_fft: FFT size (defaults to `window_len`; larger values zero-pad each frame).
    """
    if not 0 < hop <= window_len <= len(waveform):
        raise InvalidArgumentError(
            f"Need 0 < hop ({hop}) <= window_len ({window_len}) <= len ({len(waveform)})."
        )
    n_fft = window_len if n_fft is None else int(n_fft)
    if n_fft < window_len:
        raise InvalidArgumentError(f"n_fft ({n_fft}) must be at least window_len ({window_len}).")
    window = get_window("hann", window_len)
    frames = frame_signal(waveform.samples, window_len, hop) * window
    magnitudes = np.abs(np.fft.rfft(frames, n=n_fft, axis=1)).T
    return StftFrame(magnitudes, window_len, hop, n_fft)
