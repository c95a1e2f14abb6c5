from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

import numpy as np

from avse_policy_tuner.finetune import PpoConfig
from avse_policy_tuner.logging.log_types import LogType
from avse_policy_tuner.logging.tuner_error import ConfigError, TunerError, TunerIOError
from avse_policy_tuner.model import ModelConfig
from avse_policy_tuner.rewards import PROMPTS, REWARD_KINDS
from avse_policy_tuner.signals import (
    NOISE_KINDS,
    Scene,
    VisualStream,
    generate_clean,
    generate_noise,
    mix_scene,
    normalize_scene_peak,
    read_wav,
    visual_features,
)
from avse_policy_tuner.utils import derive_seed, held_out, read_json_lines, write_json_lines

CHECKPOINT_EVERY_KEY = "checkpoint_every"
DURATION_KEY = "duration_s"
FRAME_RATE_KEY = "frame_rate"
MASTER_SEED_KEY = "master_seed"
MODEL_KEY = "model"
NOISE_KINDS_KEY = "noise_kinds"
OUT_DIR_KEY = "out_dir"
PPO_KEY = "ppo"
PRETRAIN_LR_KEY = "pretrain_lr"
PRETRAIN_STEPS_KEY = "pretrain_steps"
PROMPT_KEY = "prompt"
REWARD_KEY = "reward"
SAMPLE_RATE_KEY = "sample_rate"
SCENE_COUNT_KEY = "scene_count"
SNR_GRID_KEY = "snr_grid"
WORKERS_KEY = "workers"

CONFIG_KEYS = [
    CHECKPOINT_EVERY_KEY,
    DURATION_KEY,
    FRAME_RATE_KEY,
    MASTER_SEED_KEY,
    MODEL_KEY,
    NOISE_KINDS_KEY,
    OUT_DIR_KEY,
    PPO_KEY,
    PRETRAIN_LR_KEY,
    PRETRAIN_STEPS_KEY,
    PROMPT_KEY,
    REWARD_KEY,
    SAMPLE_RATE_KEY,
    SCENE_COUNT_KEY,
    SNR_GRID_KEY,
    WORKERS_KEY,
]

MANIFEST_NAME = "manifest.jsonl"
SCENES_DIR = "scenes"
F0_RANGE_HZ = (90.0, 250.0)
# Extra noise beyond the scene length, so the crop offset has room to move.
NOISE_MARGIN_S = 0.25
SPLITS = ("train", "held_out")


@dataclass(frozen=True)
class ExperimentConfig:
    """
    Everything a run needs: the scene set, model and fine-tuning hyperparameters, the reward
    model, and where to write results.
    """

    scene_count: int = 80
    snr_grid: Tuple[float, ...] = (-5.0, 0.0, 5.0)
    noise_kinds: Tuple[str, ...] = NOISE_KINDS
    model: ModelConfig = field(default_factory=ModelConfig)
    ppo: PpoConfig = field(default_factory=PpoConfig)
    reward: str = "interpretable"
    out_dir: Path = Path("runs/desk")
    master_seed: int = 1234
    duration_s: float = 1.0
    sample_rate: int = 16000
    frame_rate: float = 25.0
    pretrain_steps: int = 300
    pretrain_lr: float = 0.001
    checkpoint_every: int = 1
    workers: int = 1
    prompt: str = "basic"

    def __post_init__(self) -> None:
        if not isinstance(self.scene_count, int) or self.scene_count <= 0:
            raise ConfigError(f"{SCENE_COUNT_KEY} must be a positive integer, got {self.scene_count!r}.")
        if len(self.snr_grid) == 0:
            raise ConfigError(f"{SNR_GRID_KEY} must not be empty.")
        if len(self.noise_kinds) == 0 or any(k not in NOISE_KINDS for k in self.noise_kinds):
            raise ConfigError(f"{NOISE_KINDS_KEY} must be a non-empty subset of {NOISE_KINDS}.")
        if self.reward not in REWARD_KINDS:
            raise ConfigError(f"{REWARD_KEY} must be one of {REWARD_KINDS}, got {self.reward!r}.")
        if self.prompt not in PROMPTS:
            raise ConfigError(f"{PROMPT_KEY} must be one of {sorted(PROMPTS)}, got {self.prompt!r}.")
        if self.duration_s <= 0 or self.sample_rate <= 0 or self.frame_rate <= 0:
            raise ConfigError(
                f"{DURATION_KEY}, {SAMPLE_RATE_KEY} and {FRAME_RATE_KEY} must be positive."
            )
        if self.duration_s * self.sample_rate < self.model.kernel:
            raise ConfigError("Scenes are shorter than the encoder kernel.")
        if self.pretrain_steps < 0 or self.pretrain_lr <= 0:
            raise ConfigError(
                f"{PRETRAIN_STEPS_KEY} must be >= 0 and {PRETRAIN_LR_KEY} must be positive."
            )
        if self.checkpoint_every <= 0 or self.workers <= 0:
            raise ConfigError(f"{CHECKPOINT_EVERY_KEY} and {WORKERS_KEY} must be positive.")

    @property
    def manifest_path(self) -> Path:
        return Path(self.out_dir) / MANIFEST_NAME

    @classmethod
    def from_json(
        cls, file: Optional[Path] = None, json_str: Optional[str] = None
    ) -> ExperimentConfig:
        """
        Creates an `ExperimentConfig` by reading a json file, or a json-encoded string.

        Reading from a file trumps reading a string. Keys that are absent take their default
        values; unknown keys are rejected.

        :param file: Path to a compatible json file.
        :param json_str: String encoding a valid json document, which can be loaded with `json.loads`.
        :returns: An `ExperimentConfig` with the settings found in the document.
        """
        try:
            if file is not None:
                with open(file, "r") as f:
                    json_info = json.load(f)
            elif json_str is not None:
                json_info = json.loads(json_str)
            else:
                return cls()
        except json.JSONDecodeError as e:
            raise ConfigError(f"Config is not valid JSON: {e}") from e
        except OSError as e:
            raise TunerIOError(
                f"Could not read config {file}: {e}", log_as=LogType.FATAL_MISSING_INPUT
            ) from e
        return cls.from_dict(json_info)

    @classmethod
    def from_dict(cls, json_info: Dict[str, Any]) -> ExperimentConfig:
        if not isinstance(json_info, dict):
            raise ConfigError("The config document must be a JSON object.")
        unknown = sorted(set(json_info) - set(CONFIG_KEYS))
        if unknown:
            raise ConfigError(f"Unknown config keys: {unknown}.")

        values = dict(json_info)
        try:
            if MODEL_KEY in values:
                values[MODEL_KEY] = ModelConfig(**values[MODEL_KEY])
            if PPO_KEY in values:
                values[PPO_KEY] = PpoConfig(**values[PPO_KEY])
            for key in (SNR_GRID_KEY, NOISE_KINDS_KEY):
                if key in values:
                    values[key] = tuple(values[key])
            if OUT_DIR_KEY in values:
                values[OUT_DIR_KEY] = Path(values[OUT_DIR_KEY])
            return cls(**values)
        except ConfigError:
            raise
        except (TypeError, TunerError) as e:
            raise ConfigError(f"Invalid config: {e}") from e

    def to_dict(self) -> Dict[str, Any]:
        """The fully-defaulted config as a JSON-compatible dictionary."""
        out = asdict(self)
        out[SNR_GRID_KEY] = list(self.snr_grid)
        out[NOISE_KINDS_KEY] = list(self.noise_kinds)
        out[OUT_DIR_KEY] = str(self.out_dir)
        return out

    def with_overrides(
        self, master_seed: Optional[int] = None, out_dir: Optional[Path] = None
    ) -> ExperimentConfig:
        """A copy with the command-line overrides applied."""
        changes: Dict[str, Any] = {}
        if master_seed is not None:
            changes[MASTER_SEED_KEY] = int(master_seed)
        if out_dir is not None:
            changes[OUT_DIR_KEY] = Path(out_dir)
        return replace(self, **changes)


@dataclass(frozen=True)
class SceneRecord:
    """One line of the scene manifest."""

    id: str
    index: int
    seed: int
    snr_db: float
    noise_kind: str
    duration_s: float
    f0_hz: float
    split: str
    paths: Dict[str, str] = field(default_factory=dict)

    @property
    def is_held_out(self) -> bool:
        return self.split == "held_out"

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, record: Dict[str, Any]) -> SceneRecord:
        try:
            return cls(**record)
        except TypeError as e:
            raise ConfigError(f"Malformed manifest record {record}: {e}") from e


def scene_recipe(cfg: ExperimentConfig, index: int) -> SceneRecord:
    """
    The parameters of scene `index`. They depend only on the master seed and the index.

    The train / held-out split is `held_out(index)`: it keys on the index alone, so
    changing the master seed redraws every scene but keeps the same split.
    """
    seed = derive_seed(cfg.master_seed, "scenes", index)
    rng = np.random.default_rng(seed)
    snr_db = float(cfg.snr_grid[int(rng.integers(len(cfg.snr_grid)))])
    noise_kind = str(cfg.noise_kinds[int(rng.integers(len(cfg.noise_kinds)))])
    f0_hz = float(rng.uniform(*F0_RANGE_HZ))
    scene_id = f"scene-{index:04d}"
    return SceneRecord(
        id=scene_id,
        index=index,
        seed=seed,
        snr_db=snr_db,
        noise_kind=noise_kind,
        duration_s=float(cfg.duration_s),
        f0_hz=f0_hz,
        split="held_out" if held_out(index) else "train",
        paths={
            kind: f"{SCENES_DIR}/{scene_id}-{kind}.wav" for kind in ("clean", "noise", "noisy")
        },
    )


def build_scene(cfg: ExperimentConfig, record: SceneRecord) -> Scene:
    """
    Synthesise the scene described by `record`, peak-normalised for 16-bit export.
    """
    clean = generate_clean(
        record.duration_s,
        record.f0_hz,
        derive_seed(cfg.master_seed, "scenes", record.index, 1),
        cfg.sample_rate,
    )
    noise = generate_noise(
        record.noise_kind,
        record.duration_s + NOISE_MARGIN_S,
        derive_seed(cfg.master_seed, "noise", record.index),
        cfg.sample_rate,
    )
    scene = mix_scene(
        clean, noise, record.snr_db, record.seed, frame_rate=cfg.frame_rate, d_v=cfg.model.d_v
    )
    scene = normalize_scene_peak(scene)
    scene.scene_id = record.id
    scene.metadata.update({"noise_kind": record.noise_kind, "split": record.split})
    return scene


def load_scene(record: SceneRecord, root: Path, frame_rate: float, d_v: int) -> Scene:
    """
    Read a scene back from its WAV files. The visual stream is recomputed from the stored
    clean signal with the scene seed.
    """
    root = Path(root)
    clean, noise, noisy = (read_wav(root / record.paths[k]) for k in ("clean", "noise", "noisy"))
    visual: VisualStream = visual_features(clean, frame_rate=frame_rate, d_v=d_v, seed=record.seed)
    return Scene(
        clean=clean,
        noise=noise,
        noisy=noisy,
        visual=visual,
        snr_db=record.snr_db,
        seed=record.seed,
        scene_id=record.id,
        metadata={"noise_kind": record.noise_kind, "split": record.split},
    )


def write_manifest(path: Path, records: List[SceneRecord]) -> Path:
    return write_json_lines(path, (r.to_dict() for r in records))


def read_manifest(path: Path) -> List[SceneRecord]:
    path = Path(path)
    if not path.is_file():
        raise TunerIOError(f"No scene manifest at {path}.", log_as=LogType.FATAL_MISSING_INPUT)
    try:
        return [SceneRecord.from_dict(r) for r in read_json_lines(path)]
    except json.JSONDecodeError as e:
        raise ConfigError(f"Malformed manifest {path}: {e}") from e


def split_records(records: List[SceneRecord], split: str) -> List[SceneRecord]:
    if split not in SPLITS:
        raise ConfigError(f"Unknown split '{split}', expected one of {SPLITS}.")
    return [r for r in records if r.split == split]
