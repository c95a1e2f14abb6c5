"""
Reward models that score an enhanced waveform on a 1-5 scale.

The interpretable model first writes a natural-language description of the estimate's
quality and then scores that text with a phrase lexicon, so every reward comes with a
human-readable rationale. The scalar model maps the same acoustic features straight to a
MOS-like number. Both are stateless: scoring never changes the model.
"""

from __future__ import annotations

import json
import re
from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

from scipy.special import expit

from avse_policy_tuner.logging.tuner_error import (
    InvalidArgumentError,
    RewardModelMismatchError,
    UnsupportedFormatError,
)
from avse_policy_tuner.metrics import AcousticFeatures, acoustic_features
from avse_policy_tuner.signals import Waveform

SCORE_MIN = 1.0
SCORE_MAX = 5.0

PROMPTS = {
    "basic": "Give me an assessment of the quality of this speech sample",
    "detailed": (
        "Please evaluate the speech in terms of clarity, noise level, timbral naturalness, "
        "and loudness stability"
    ),
}

# Band edges of the description template.
CLEAR_MIN = 0.75
MUFFLED_MIN = 0.45
QUIET_NOISE_MAX_DB = -25.0
SOME_NOISE_MAX_DB = -10.0
SLIGHT_DISTORTION_MIN = 0.1
STRONG_DISTORTION_MIN = 0.3
TOO_LOW_DB = -35.0
TOO_LOUD_DB = -3.0

CLARITY_TEXT = (
    "The speech is clear and easy to understand",
    "The speech is somewhat muffled",
    "The speech is distorted and muffled, difficult to understand",
)
NOISE_TEXT = (
    "with no noticeable background noise",
    "with some background noises",
    "with a lot of background noise",
)
DISTORTION_TEXT = (
    "",
    "There is a slight sense of distortion.",
    "There is strong distortion.",
)
LOUDNESS_TEXT = (
    "The volume is too low.",
    "The speech has a comfortable loudness.",
    "The volume is too loud.",
)
SUMMARY_GOOD = "Overall, it is a good speech sample."
SUMMARY_POOR = "Overall, the quality of this speech sample is poor."


def clamp_score(value: float) -> float:
    return float(min(max(value, SCORE_MIN), SCORE_MAX))


@dataclass(frozen=True)
class RewardContext:
    """References available while scoring during training and evaluation."""

    clean: Waveform
    noisy: Waveform

    def check(self, est: Waveform) -> None:
        if not len(est) == len(self.clean) == len(self.noisy):
            raise InvalidArgumentError(
                f"Reward context lengths (clean {len(self.clean)}, noisy {len(self.noisy)}) "
                f"do not match the estimate ({len(est)})."
            )


@dataclass(frozen=True)
class RewardRecord:
    """
    The full trace behind one reward: features, description, and sentiment score.

    The description is empty for the scalar model.
    """

    description: str
    sentiment: float
    features: AcousticFeatures
    model_id: str
    metadata: Dict[str, Any] = field(default_factory=dict)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "description": self.description,
            "sentiment": self.sentiment,
            "features": self.features.to_dict(),
            "model_id": self.model_id,
            "metadata": dict(self.metadata),
        }


@dataclass(frozen=True)
class Lexicon:
    """
    Phrase -> weight table with longest-match, case-insensitive matching.

    The raw score is the sum of the weights of the matched phrases; it maps affinely onto
    [1, 5] with `raw_limit` landing on 5 and `-raw_limit` on 1, then clamps.
    """

    phrases: Tuple[Tuple[str, float], ...]
    raw_limit: float = 3.0
    version: str = "1.0"

    @classmethod
    def load(cls, path: Optional[Path] = None) -> Lexicon:
        """Read a lexicon JSON file (defaults to the one shipped with the package)."""
        try:
            if path is None:
                text = resources.files("avse_policy_tuner").joinpath("lexicon.json").read_text()
            else:
                text = Path(path).read_text()
            payload = json.loads(text)
            phrases = tuple(
                (phrase.lower(), float(weight)) for phrase, weight in payload["phrases"].items()
            )
            return cls(phrases, float(payload["raw_limit"]), str(payload["version"]))
        except (KeyError, TypeError, ValueError) as e:
            raise UnsupportedFormatError(f"Malformed lexicon: {e}") from e

    @property
    def weights(self) -> Dict[str, float]:
        return dict(self.phrases)

    @property
    def pattern(self) -> re.Pattern:
        # Longer phrases first, so alternation prefers the longest match at each position.
        ordered = sorted((p for p, _ in self.phrases), key=lambda p: (-len(p), p))
        return re.compile(
            r"\b(?:" + "|".join(re.escape(p) for p in ordered) + r")\b", re.IGNORECASE
        )

    def matches(self, text: str) -> List[Tuple[str, float]]:
        weights = self.weights
        return [
            (m.group(0).lower(), weights[m.group(0).lower()]) for m in self.pattern.finditer(text)
        ]

    def raw_score(self, text: str) -> float:
        return float(sum(weight for _, weight in self.matches(text)))

    def score(self, text: str) -> float:
        return clamp_score(3.0 + 2.0 * self.raw_score(text) / self.raw_limit)


DEFAULT_LEXICON = Lexicon.load()


def _band(value: float, edges: Tuple[float, float], higher_is_better: bool) -> int:
    """0 for the best band, 1 for the middle band, 2 for the worst."""
    good, middle = edges
    if higher_is_better:
        return 0 if value >= good else (1 if value >= middle else 2)
    return 0 if value <= good else (1 if value <= middle else 2)


def feature_bands(features: AcousticFeatures) -> Dict[str, int]:
    """The band (0 best .. 2 worst) each feature falls into."""
    distortion = features.distortion_index
    return {
        "clarity": _band(features.intelligibility_proxy, (CLEAR_MIN, MUFFLED_MIN), True),
        "noise": _band(features.residual_noise_db, (QUIET_NOISE_MAX_DB, SOME_NOISE_MAX_DB), False),
        "distortion": (
            0
            if distortion < SLIGHT_DISTORTION_MIN
            else (1 if distortion <= STRONG_DISTORTION_MIN else 2)
        ),
        "loudness": (
            0
            if features.loudness_db < TOO_LOW_DB
            else (2 if features.loudness_db > TOO_LOUD_DB else 1)
        ),
    }


def describe(features: AcousticFeatures, prompt: str = "basic") -> str:
    """
    Describe the quality of an estimate in the style of a listener's free-text assessment.

    The text is a pure function of the feature bands. The detailed prompt also comments on
    loudness.

    Example
    -------
    Intelligibility 0.9, residual -30 dB and distortion 0.02 give
    "The speech is clear and easy to understand, with no noticeable background noise.
    Overall, it is a good speech sample."
    """
    if prompt not in PROMPTS:
        raise InvalidArgumentError(f"Unknown prompt '{prompt}', expected one of {sorted(PROMPTS)}.")
    bands = feature_bands(features)
    sentences = [f"{CLARITY_TEXT[bands['clarity']]}, {NOISE_TEXT[bands['noise']]}."]
    if bands["distortion"]:
        sentences.append(DISTORTION_TEXT[bands["distortion"]])
    if prompt == "detailed":
        sentences.append(LOUDNESS_TEXT[bands["loudness"]])
    good = bands["clarity"] < 2 and bands["noise"] < 2 and bands["distortion"] < 2
    sentences.append(SUMMARY_GOOD if good else SUMMARY_POOR)
    return " ".join(sentences)


def sentiment_score(description: str, lexicon: Lexicon = DEFAULT_LEXICON) -> float:
    """
    Score a description on [1, 5] with the phrase lexicon.

    Example
    -------
    "The speech is clear and easy to understand, with some background noises." matches
    +1.0 and -0.3, a raw score of 0.7, which maps to 3 + 0.7 * 2/3 = 3.4667.
    """
    if not description or not description.strip():
        raise InvalidArgumentError("Cannot score an empty description.")
    return lexicon.score(description)


def reward_interpretable(
    est: Waveform,
    ctx: RewardContext,
    prompt: str = "basic",
    lexicon: Lexicon = DEFAULT_LEXICON,
) -> RewardRecord:
    """Features -> description -> sentiment."""
    ctx.check(est)
    features = acoustic_features(ctx.clean, est, ctx.noisy)
    description = describe(features, prompt)
    return RewardRecord(
        description=description,
        sentiment=sentiment_score(description, lexicon),
        features=features,
        model_id=f"interpretable/{prompt}/lexicon-{lexicon.version}",
        metadata={"prompt": PROMPTS[prompt]},
    )


def mos_proxy_scores(features: AcousticFeatures) -> Dict[str, float]:
    """
    SIG / BAK / OVRL style sub-scores on [1, 5]. OVRL is the reward.
    """
    intelligibility = 2.0 * (features.intelligibility_proxy - 0.5)
    distortion = 1.5 * features.distortion_index
    improvement = 0.30 * features.improvement_db
    return {
        "SIG": clamp_score(1 + 4 * float(expit(intelligibility - distortion))),
        "BAK": clamp_score(1 + 4 * float(expit(improvement))),
        "OVRL": clamp_score(1 + 4 * float(expit(improvement + intelligibility - distortion))),
    }


def reward_scalar_mosproxy(est: Waveform, ctx: RewardContext) -> RewardRecord:
    """A fixed smooth map of the acoustic features onto [1, 5], with no description."""
    ctx.check(est)
    features = acoustic_features(ctx.clean, est, ctx.noisy)
    scores = mos_proxy_scores(features)
    return RewardRecord(
        description="",
        sentiment=scores["OVRL"],
        features=features,
        model_id="mos_proxy/1.0",
        metadata=scores,
    )


def relative_reward(r_rl: RewardRecord, r_base: RewardRecord) -> float:
    """
    R = sentiment(RL output) - sentiment(base output), in [-4, 4].
    """
    if r_rl.model_id != r_base.model_id:
        raise RewardModelMismatchError(
            f"Cannot compare rewards from '{r_rl.model_id}' and '{r_base.model_id}'."
        )
    return float(r_rl.sentiment - r_base.sentiment)


class RewardModel(ABC):
    """A frozen scorer of enhanced waveforms."""

    kind: str = ""

    @property
    @abstractmethod
    def model_id(self) -> str:
        pass

    @abstractmethod
    def score(self, est: Waveform, ctx: RewardContext) -> RewardRecord:
        pass


class InterpretableRewardModel(RewardModel):
    kind = "interpretable"

    def __init__(self, prompt: str = "basic", lexicon: Lexicon = DEFAULT_LEXICON) -> None:
        if prompt not in PROMPTS:
            raise InvalidArgumentError(f"Unknown prompt '{prompt}', expected one of {sorted(PROMPTS)}.")
        self._prompt = prompt
        self._lexicon = lexicon

    @property
    def model_id(self) -> str:
        return f"interpretable/{self._prompt}/lexicon-{self._lexicon.version}"

    def score(self, est: Waveform, ctx: RewardContext) -> RewardRecord:
        return reward_interpretable(est, ctx, self._prompt, self._lexicon)


class MosProxyRewardModel(RewardModel):
    kind = "mos_proxy"

    @property
    def model_id(self) -> str:
        return "mos_proxy/1.0"

    def score(self, est: Waveform, ctx: RewardContext) -> RewardRecord:
        return reward_scalar_mosproxy(est, ctx)


REWARD_KINDS = ("interpretable", "mos_proxy")


def build_reward_model(kind: str, prompt: str = "basic") -> RewardModel:
    match kind:
        case "interpretable":
            return InterpretableRewardModel(prompt)
        case "mos_proxy":
            return MosProxyRewardModel()
        case _:
            raise InvalidArgumentError(
                f"Unknown reward model '{kind}', expected one of {REWARD_KINDS}."
            )
