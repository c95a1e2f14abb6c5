"""
Objective quality measures: SI-SNR, STOI, segmental SNR, and the acoustic feature vector
consumed by both reward models.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from functools import lru_cache
from typing import Dict, Tuple

import numpy as np

from avse_policy_tuner.logging.tuner_error import (
    DegenerateSignalError,
    InsufficientSignalError,
    InvalidArgumentError,
)
from avse_policy_tuner.signals import Waveform, frame_signal, resample

EPS = 1e-8
SI_SNR_MIN_LENGTH = 16

# STOI constants of the reference procedure.
STOI_RATE = 10000
STOI_FRAME = 256
STOI_HOP = 128
STOI_NFFT = 512
STOI_BANDS = 15
STOI_MIN_FREQ = 150.0
STOI_SEGMENT = 30
STOI_BETA_DB = -15.0
STOI_DYNAMIC_RANGE_DB = 40.0

SEG_SNR_FRAME = 256
SEG_SNR_FLOOR_DB = -10.0
SEG_SNR_CEIL_DB = 35.0


@dataclass(frozen=True)
class MetricReport:
    """The objective scores of one estimate against its reference."""

    si_snr_db: float
    stoi: float
    seg_snr_db: float

    def to_dict(self) -> Dict[str, float]:
        return asdict(self)


@dataclass(frozen=True)
class AcousticFeatures:
    """
    Measurable correlates of the quality axes a listener would describe.

    :param residual_noise_db: Energy of (est - scaled projection onto ref), relative to the
        reference energy.
    :param distortion_index: 1 - cos^2 of the angle between est and ref, in [0, 1].
    :param intelligibility_proxy: STOI of est against ref.
    :param loudness_db: RMS level of est in dB (full scale = 0 dB).
    :param improvement_db: SI-SNR(est) - SI-SNR(noisy).
    """

    residual_noise_db: float
    distortion_index: float
    intelligibility_proxy: float
    loudness_db: float
    improvement_db: float

    def to_dict(self) -> Dict[str, float]:
        return asdict(self)


def _check_pair(ref: Waveform, est: Waveform) -> Tuple[np.ndarray, np.ndarray]:
    if len(ref) != len(est):
        raise InvalidArgumentError(f"Length mismatch: ref has {len(ref)}, est has {len(est)} samples.")
    if ref.sample_rate != est.sample_rate:
        raise InvalidArgumentError(
            f"Sample-rate mismatch: ref {ref.sample_rate} Hz, est {est.sample_rate} Hz."
        )
    return ref.samples, est.samples


def si_snr_with_grad(
    ref: np.ndarray, est: np.ndarray, eps: float = EPS
) -> Tuple[float, np.ndarray]:
    """
    SI-SNR in dB together with its gradient with respect to `est`.

    The projection s_target = (<est, ref> / (||ref||^2 + eps)) ref splits `est` into a target
    part and an error e = est - s_target, and the value is
    10 log10(||s_target||^2 / (||e||^2 + eps)).

    Values are bounded to +-10 log10(1/eps) dB, with a zero gradient at the bounds. An
    estimate that is an exact multiple of `ref` (its unregularised projection
    residual is negligible next to its energy) scores the upper bound, so (s, s) and
    (s, 2s) agree.
    """
    ref_energy = float(np.dot(ref, ref))
    if ref_energy == 0.0:
        raise DegenerateSignalError("SI-SNR is undefined for an all-zero reference.")
    bound = 10 * np.log10(1 / eps)
    dot = float(np.dot(est, ref))
    if dot == 0.0:
        return -bound, np.zeros_like(est)

    residual = est - (dot / ref_energy) * ref
    if float(np.dot(residual, residual)) <= eps * float(np.dot(est, est)):
        return bound, np.zeros_like(est)

    alpha = dot / (ref_energy + eps)
    target = alpha * ref
    error = est - target
    target_energy = float(np.dot(target, target))
    error_energy = float(np.dot(error, error))
    value = 10 * np.log10(target_energy / (error_energy + eps))
    if not -bound < value < bound:
        return float(np.clip(value, -bound, bound)), np.zeros_like(est)

    # d||target||^2 / ||target||^2 = 2 ref / (alpha (||ref||^2 + eps)); <e, ref> = alpha eps
    d_target = 2 * ref / (alpha * (ref_energy + eps))
    d_error = 2 * (error - alpha * eps * ref / (ref_energy + eps)) / (error_energy + eps)
    grad = (10 / np.log(10)) * (d_target - d_error)
    return float(value), grad


def si_snr(ref: Waveform, est: Waveform, eps: float = EPS) -> float:
    """
    Scale-invariant signal-to-noise ratio (dB) of `est` against `ref`.

    Example
    -------
    ref = [1, 0, -1, 0] and est = [1, 0.1, -1, 0.1] project with gain 2 / (2 + eps), leaving
    an error energy of about 0.02 against a target energy of about 2: 10 log10(100) = 20 dB
    less the eps regularisation, 19.9999978 dB.
    """
    ref_samples, est_samples = _check_pair(ref, est)
    if len(ref_samples) < SI_SNR_MIN_LENGTH:
        raise InvalidArgumentError(
            f"SI-SNR needs at least {SI_SNR_MIN_LENGTH} samples, got {len(ref_samples)}."
        )
    value, _ = si_snr_with_grad(ref_samples, est_samples, eps)
    return float(value)


@lru_cache(maxsize=None)
def third_octave_matrix(
    sample_rate: int = STOI_RATE,
    n_fft: int = STOI_NFFT,
    n_bands: int = STOI_BANDS,
    min_freq: float = STOI_MIN_FREQ,
) -> np.ndarray:
    """
    One-third-octave band matrix, shape (n_bands, n_fft // 2 + 1).

    Band k spans [min_freq * 2^((2k-1)/6), min_freq * 2^((2k+1)/6)] around the centre
    frequency min_freq * 2^(k/3), with edges snapped to the nearest FFT bin.
    """
    freqs = np.linspace(0, sample_rate, n_fft + 1)[: n_fft // 2 + 1]
    k = np.arange(n_bands, dtype=float)
    low = min_freq * 2.0 ** ((2 * k - 1) / 6)
    high = min_freq * 2.0 ** ((2 * k + 1) / 6)
    matrix = np.zeros((n_bands, len(freqs)))
    for band in range(n_bands):
        low_bin = int(np.argmin((freqs - low[band]) ** 2))
        high_bin = int(np.argmin((freqs - high[band]) ** 2))
        matrix[band, low_bin:high_bin] = 1.0
    matrix.setflags(write=False)
    return matrix


def _stoi_window() -> np.ndarray:
    return np.hanning(STOI_FRAME + 2)[1:-1]


def _overlap_add(frames: np.ndarray, hop: int) -> np.ndarray:
    n_frames, frame_len = frames.shape
    out = np.zeros((n_frames - 1) * hop + frame_len) if n_frames else np.zeros(0)
    for i, frame in enumerate(frames):
        out[i * hop : i * hop + frame_len] += frame
    return out


def remove_silent_frames(
    ref: np.ndarray, est: np.ndarray, dynamic_range_db: float = STOI_DYNAMIC_RANGE_DB
) -> Tuple[np.ndarray, np.ndarray]:
    """
    Drop frames whose reference energy is more than `dynamic_range_db` below the loudest
    reference frame, then rebuild both signals by overlap-add.
    """
    window = _stoi_window()
    ref_frames = frame_signal(ref, STOI_FRAME, STOI_HOP) * window
    est_frames = frame_signal(est, STOI_FRAME, STOI_HOP) * window
    energies = 20 * np.log10(np.linalg.norm(ref_frames, axis=1) + EPS)
    keep = energies > np.max(energies) - dynamic_range_db
    return _overlap_add(ref_frames[keep], STOI_HOP), _overlap_add(est_frames[keep], STOI_HOP)


def _band_envelopes(samples: np.ndarray) -> np.ndarray:
    if len(samples) < STOI_FRAME:
        return np.zeros((STOI_BANDS, 0))
    frames = frame_signal(samples, STOI_FRAME, STOI_HOP) * _stoi_window()
    power = np.abs(np.fft.rfft(frames, n=STOI_NFFT, axis=1)) ** 2
    return np.sqrt(third_octave_matrix() @ power.T)


def stoi(ref: Waveform, est: Waveform) -> float:
    """
    Short-time objective intelligibility of `est` against `ref`, in [0, 1].

    Both signals are resampled to 10 kHz, silent frames are removed, and one-third-octave
    band envelopes are compared over 384 ms (30-frame) segments after normalisation and
    clipping of the estimate at a -15 dB signal-to-distortion ratio. The score is the mean
    correlation over bands and segments, clipped to [0, 1].
    """
    _check_pair(ref, est)
    ref_10k = resample(ref, STOI_RATE).samples
    est_10k = resample(est, STOI_RATE).samples
    if len(ref_10k) < STOI_FRAME:
        raise InsufficientSignalError(
            f"STOI needs at least {STOI_FRAME} samples at {STOI_RATE} Hz, got {len(ref_10k)}."
        )
    ref_10k, est_10k = remove_silent_frames(ref_10k, est_10k)

    ref_bands = _band_envelopes(ref_10k)
    est_bands = _band_envelopes(est_10k)
    n_frames = ref_bands.shape[1]
    if n_frames < STOI_SEGMENT:
        raise InsufficientSignalError(
            f"STOI needs {STOI_SEGMENT} non-silent frames (384 ms), found {n_frames}."
        )

    # (segments, bands, frames-per-segment)
    ref_segments = np.lib.stride_tricks.sliding_window_view(ref_bands, STOI_SEGMENT, axis=1)
    est_segments = np.lib.stride_tricks.sliding_window_view(est_bands, STOI_SEGMENT, axis=1)
    ref_segments = np.transpose(ref_segments, (1, 0, 2))
    est_segments = np.transpose(est_segments, (1, 0, 2))

    gain = np.linalg.norm(ref_segments, axis=2, keepdims=True) / (
        np.linalg.norm(est_segments, axis=2, keepdims=True) + EPS
    )
    clip_level = 1 + 10 ** (-STOI_BETA_DB / 20)
    est_clipped = np.minimum(est_segments * gain, ref_segments * clip_level)

    est_centred = est_clipped - est_clipped.mean(axis=2, keepdims=True)
    ref_centred = ref_segments - ref_segments.mean(axis=2, keepdims=True)
    est_centred = est_centred / (np.linalg.norm(est_centred, axis=2, keepdims=True) + EPS)
    ref_centred = ref_centred / (np.linalg.norm(ref_centred, axis=2, keepdims=True) + EPS)

    n_segments, n_bands, _ = ref_centred.shape
    score = float(np.sum(est_centred * ref_centred) / (n_segments * n_bands))
    return float(np.clip(score, 0.0, 1.0)) if np.isfinite(score) else 0.0


def segmental_snr(ref: Waveform, est: Waveform, frame: int = SEG_SNR_FRAME) -> float:
    """
    Mean over non-overlapping frames of the per-frame SNR, each clamped to [-10, 35] dB.

    Both frame energies carry the eps guard, so a frame where ref and est are both silent
    scores 0 dB.
    """
    ref_samples, est_samples = _check_pair(ref, est)
    if frame <= 0 or len(ref_samples) < frame:
        raise InvalidArgumentError(
            f"Segmental SNR needs 0 < frame ({frame}) <= length ({len(ref_samples)})."
        )
    n_frames = len(ref_samples) // frame
    ref_frames = ref_samples[: n_frames * frame].reshape(n_frames, frame)
    err_frames = ref_frames - est_samples[: n_frames * frame].reshape(n_frames, frame)
    per_frame = 10 * np.log10(
        (np.sum(ref_frames**2, axis=1) + EPS) / (np.sum(err_frames**2, axis=1) + EPS)
    )
    return float(np.mean(np.clip(per_frame, SEG_SNR_FLOOR_DB, SEG_SNR_CEIL_DB)))


def metric_report(ref: Waveform, est: Waveform) -> MetricReport:
    return MetricReport(
        si_snr_db=si_snr(ref, est),
        stoi=stoi(ref, est),
        seg_snr_db=segmental_snr(ref, est),
    )


def acoustic_features(ref: Waveform, est: Waveform, noisy: Waveform) -> AcousticFeatures:
    """
    Compute the feature vector that the reward models turn into a description or a score.
    """
    ref_samples, est_samples = _check_pair(ref, est)
    _check_pair(ref, noisy)
    ref_energy = float(np.dot(ref_samples, ref_samples))
    if ref_energy == 0.0:
        raise DegenerateSignalError("Acoustic features are undefined for an all-zero reference.")

    projection = float(np.dot(est_samples, ref_samples))
    residual = est_samples - (projection / ref_energy) * ref_samples
    residual_noise_db = 10 * np.log10(max(float(np.dot(residual, residual)) / ref_energy, EPS))

    est_energy = float(np.dot(est_samples, est_samples))
    if est_energy == 0.0:
        distortion = 1.0
    else:
        distortion = 1.0 - projection**2 / (est_energy * ref_energy)
    distortion = float(np.clip(distortion, 0.0, 1.0))

    loudness_db = 10 * np.log10(max(est_energy / max(len(est_samples), 1), EPS))

    return AcousticFeatures(
        residual_noise_db=float(residual_noise_db),
        distortion_index=distortion,
        intelligibility_proxy=stoi(ref, est),
        loudness_db=float(loudness_db),
        improvement_db=si_snr(ref, est) - si_snr(ref, noisy),
    )
