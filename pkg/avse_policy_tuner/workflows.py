"""
The command workflows behind the CLI: scene generation, supervised pretraining, PPO
fine-tuning, evaluation, scoring and per-scene explanations.

Commands that write to an output directory hold a lock file on it for their duration, and
return a `Logger` whose report summarises what was written.
"""

import json
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from functools import wraps
from pathlib import Path
from typing import Any, Callable, Dict, Iterable, List, Optional, Tuple, TypeVar

import numpy as np
import pandas as pd

from avse_policy_tuner.checkpoint import load_checkpoint, save_checkpoint
from avse_policy_tuner.experiment import (
    ExperimentConfig,
    SceneRecord,
    build_scene,
    load_scene,
    read_manifest,
    scene_recipe,
    split_records,
    write_manifest,
)
from avse_policy_tuner.finetune import EpochStats, finetune_epoch
from avse_policy_tuner.logging.log_types import LogType
from avse_policy_tuner.logging.logger import Logger
from avse_policy_tuner.logging.tuner_error import (
    DegenerateSignalError,
    InsufficientSignalError,
    InvalidArgumentError,
    NumericalFailureError,
)
from avse_policy_tuner.metrics import metric_report, segmental_snr, si_snr, stoi
from avse_policy_tuner.model import Adam, EnhancerModel, si_snr_loss
from avse_policy_tuner.rewards import (
    InterpretableRewardModel,
    RewardContext,
    build_reward_model,
)
from avse_policy_tuner.signals import Scene, Waveform, measured_snr, read_wav, write_wav
from avse_policy_tuner.utils import (
    derive_seed,
    ensure_finite,
    provide_lock_file,
    write_json,
    write_json_lines,
)

CHECKPOINT_DIR = "checkpoints"
EVAL_DIR = "eval"
LOG_DIR = "logs"

PRETRAINED_NAME = "pretrained"
ARM_FOR_REWARD = {"interpretable": "rl_interpretable", "mos_proxy": "rl_scalar"}
METHODS = ("noisy", "baseline", "rl_scalar", "rl_interpretable")
CHECKPOINT_FOR_METHOD = {
    "baseline": PRETRAINED_NAME,
    "rl_scalar": "rl_scalar",
    "rl_interpretable": "rl_interpretable",
}
TABLE_COLUMNS = ["status", "si_snr_db", "stoi", "sentiment", "seg_snr_db", "n_scenes"]

T = TypeVar("T")
R = TypeVar("R")


def checkpoint_path(out_dir: Path, name: str) -> Path:
    return Path(out_dir) / CHECKPOINT_DIR / f"{name}.json"


def parallel_map(fn: Callable[[T], R], items: Iterable[T], workers: int = 1) -> List[R]:
    """
    Order-preserving map, spread over a thread pool when `workers` > 1.

    Every item is processed independently, so the result never depends on scheduling.
    """
    items = list(items)
    if workers <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def load_split(cfg: ExperimentConfig, split: str) -> List[Scene]:
    records = split_records(read_manifest(cfg.manifest_path), split)
    if not records:
        raise InvalidArgumentError(f"The manifest at {cfg.manifest_path} has no '{split}' scenes.")
    return parallel_map(
        lambda r: load_scene(r, cfg.out_dir, cfg.frame_rate, cfg.model.d_v), records, cfg.workers
    )


def _lock_out_dir(func: Callable[..., Any]) -> Callable[..., Any]:
    locked = provide_lock_file(out_dir_arg="out_dir")(func)

    @wraps(func)
    def _inner(cfg: ExperimentConfig, **kwargs) -> Any:
        return locked(cfg, out_dir=cfg.out_dir, **kwargs)

    return _inner


@_lock_out_dir
def cmd_gen_scenes(cfg: ExperimentConfig, out_dir: Path) -> Logger:
    """
    Synthesise `cfg.scene_count` scenes, write their WAV files and the scene manifest.

    Scenes are built in parallel; each depends only on the master seed and its index.
    """
    logger = Logger(current_location=out_dir)
    records = [scene_recipe(cfg, i) for i in range(cfg.scene_count)]
    scenes = parallel_map(lambda r: build_scene(cfg, r), records, cfg.workers)

    (Path(out_dir) / records[0].paths["clean"]).parent.mkdir(parents=True, exist_ok=True)
    for record, scene in zip(records, scenes):
        for kind, waveform in (("clean", scene.clean), ("noise", scene.noise), ("noisy", scene.noisy)):
            target = Path(out_dir) / record.paths[kind]
            with warnings.catch_warnings(record=True) as caught:
                warnings.simplefilter("always")
                write_wav(target, waveform)
            for w in caught:
                logger.add_entry(LogType.WARN_CLIPPED_SAMPLES, str(w.message), where=target)

    write_manifest(cfg.manifest_path, records)
    n_held_out = sum(r.is_held_out for r in records)
    logger.add_entry(
        LogType.INFO_SCENES_WRITTEN,
        f"{len(records)} scenes ({len(records) - n_held_out} train, {n_held_out} held-out)",
        f"Manifest: {cfg.manifest_path}",
        where=out_dir,
    )
    return logger


def pretrain(
    model: EnhancerModel,
    scenes: List[Scene],
    steps: int,
    optimizer: Adam,
    seed: int,
) -> List[float]:
    """
    Minimise L_SI-SNR with one Adam step per randomly drawn training scene.

    :returns: The loss of every step.
    :raises NumericalFailureError: A loss is not finite; the model keeps its last finite
        parameters.
    """
    rng = np.random.default_rng(seed)
    losses: List[float] = []
    for step in range(steps):
        scene = scenes[int(rng.integers(len(scenes)))]
        optimizer.zero_grad()
        trace = model.forward(scene.noisy, scene.visual)
        loss = si_snr_loss(scene.clean, trace.enhanced_tensor)
        ensure_finite(f"Pretraining loss at step {step} ({scene.scene_id})", loss.item())
        loss.backward()
        optimizer.step()
        losses.append(loss.item())
    return losses


def mean_si_snr_improvement(model: EnhancerModel, scenes: List[Scene], workers: int = 1) -> float:
    """Mean of SI-SNR(enhanced) - SI-SNR(noisy) over `scenes`."""

    def _improvement(scene: Scene) -> float:
        enhanced = model.forward(scene.noisy, scene.visual).enhanced
        return si_snr(scene.clean, enhanced) - si_snr(scene.clean, scene.noisy)

    return float(np.mean(parallel_map(_improvement, scenes, workers)))


@_lock_out_dir
def cmd_pretrain(cfg: ExperimentConfig, out_dir: Path) -> Logger:
    """
    Supervised SI-SNR pretraining of the base enhancer on the training scenes.

    Writes the pretrained checkpoint and the loss curve (per step, and averaged per pass
    over the training set). On a non-finite loss the last good parameters are saved before
    the error propagates.
    """
    logger = Logger(current_location=out_dir)
    train = load_split(cfg, "train")
    held_out = load_split(cfg, "held_out")

    model = EnhancerModel(cfg.model, seed=derive_seed(cfg.master_seed, "init"))
    optimizer = Adam(model.params, lr=cfg.pretrain_lr)
    target = checkpoint_path(out_dir, PRETRAINED_NAME)
    target.parent.mkdir(parents=True, exist_ok=True)

    try:
        losses = pretrain(
            model, train, cfg.pretrain_steps, optimizer, derive_seed(cfg.master_seed, "pretrain")
        )
    except NumericalFailureError:
        last_good = checkpoint_path(out_dir, f"{PRETRAINED_NAME}-last-good")
        save_checkpoint(last_good, model, optimizer, metadata={"stage": "pretrain", "aborted": True})
        raise NumericalFailureError(
            f"Pretraining diverged; last good parameters saved to {last_good}.",
            log_as=LogType.FATAL_NON_FINITE_LOSS,
        )

    per_pass = [
        float(np.mean(losses[i : i + len(train)])) for i in range(0, len(losses), len(train))
    ]
    curve_path = Path(out_dir) / LOG_DIR / "pretrain_loss.json"
    curve_path.parent.mkdir(parents=True, exist_ok=True)
    write_json(curve_path, {"steps": losses, "epochs": per_pass, "scenes_per_epoch": len(train)})

    improvement = mean_si_snr_improvement(model, held_out, cfg.workers)
    save_checkpoint(
        target,
        model,
        optimizer,
        metadata={
            "stage": "pretrain",
            "steps": cfg.pretrain_steps,
            "held_out_si_snr_improvement_db": improvement,
        },
    )
    logger.add_entry(LogType.INFO_CHECKPOINT_WRITTEN, where=target)
    logger.add_entry(LogType.INFO_LOG_WRITTEN, where=curve_path)
    logger.add_entry(
        LogType.INFO_EPOCH_COMPLETE,
        f"{cfg.pretrain_steps} steps, final loss {losses[-1]:.3f} dB"
        if losses
        else "0 steps (untrained model saved)",
        f"Held-out SI-SNR improvement: {improvement:+.2f} dB",
        where=target,
    )
    return logger


def _epoch_summary(stats: EpochStats) -> str:
    return (
        f"epoch {stats.epoch}: mean R {stats.mean_R:+.4f}, mean sentiment "
        f"{stats.mean_sentiment:.3f}, mean SI-SNR {stats.mean_si_snr:.2f} dB, "
        f"mean KL {stats.mean_kl:.4g} ({stats.mean_kl_per_element:.3g} per element), "
        f"clip fraction {stats.clip_fraction:.2f}"
    )


@_lock_out_dir
def cmd_finetune(
    cfg: ExperimentConfig, out_dir: Path, checkpoint: Optional[Path] = None
) -> Logger:
    """
    PPO fine-tuning from the pretrained checkpoint with the configured reward model.

    The pretrained model is frozen as the base policy for the whole run; the previous-iterate
    snapshot is refreshed at the start of every epoch. Every step is appended to the
    training log.
    """
    logger = Logger(current_location=out_dir)
    source = Path(checkpoint) if checkpoint else checkpoint_path(out_dir, PRETRAINED_NAME)
    policy = load_checkpoint(source, expected_config=cfg.model).model
    base = policy.snapshot().freeze()
    reward_model = build_reward_model(cfg.reward, cfg.prompt)
    optimizer = Adam(policy.params, lr=cfg.ppo.lr)
    train = load_split(cfg, "train")

    arm = ARM_FOR_REWARD[cfg.reward]
    log_path = Path(out_dir) / LOG_DIR / f"finetune-{arm}.jsonl"
    log_path.parent.mkdir(parents=True, exist_ok=True)
    write_json_lines(log_path, [])
    checkpoint_path(out_dir, arm).parent.mkdir(parents=True, exist_ok=True)

    base_cache: Dict[str, Any] = {}
    epochs: List[Dict[str, float]] = []
    for epoch in range(1, cfg.ppo.epochs + 1):
        prev = policy.snapshot().freeze()
        try:
            stats = finetune_epoch(
                policy, base, prev, train, reward_model, cfg.ppo, optimizer, epoch, base_cache
            )
        except NumericalFailureError as e:
            last_good = checkpoint_path(out_dir, f"{arm}-last-good")
            save_checkpoint(last_good, policy, optimizer, metadata={"stage": arm, "epoch": epoch})
            raise NumericalFailureError(
                f"{e} Last good parameters saved to {last_good}.",
                log_as=LogType.FATAL_NON_FINITE_LOSS,
            ) from e

        write_json_lines(log_path, (s.to_log_record(epoch) for s in stats.steps), append=True)
        epochs.append(stats.to_dict())
        logger.add_entry(LogType.INFO_EPOCH_COMPLETE, _epoch_summary(stats), where=log_path)
        clamped = sum(s.ratio_clamped for s in stats.steps)
        if clamped:
            logger.add_entry(
                LogType.WARN_RATIO_CLIPPED,
                f"epoch {epoch}: {clamped} of {len(stats.steps)} steps",
                where=log_path,
            )
        if epoch % cfg.checkpoint_every == 0 and epoch != cfg.ppo.epochs:
            periodic = checkpoint_path(out_dir, f"{arm}-epoch-{epoch:04d}")
            save_checkpoint(periodic, policy, optimizer, metadata={"stage": arm, "epoch": epoch})
            logger.add_entry(LogType.INFO_CHECKPOINT_WRITTEN, where=periodic)

    target = checkpoint_path(out_dir, arm)
    save_checkpoint(
        target,
        policy,
        optimizer,
        metadata={"stage": arm, "epoch": cfg.ppo.epochs, "reward_model": reward_model.model_id},
    )
    summary_path = Path(out_dir) / LOG_DIR / f"finetune-{arm}-epochs.json"
    write_json(summary_path, {"reward_model": reward_model.model_id, "epochs": epochs})
    logger.add_entry(LogType.INFO_CHECKPOINT_WRITTEN, where=target)
    logger.add_entry(LogType.INFO_LOG_WRITTEN, where=log_path)
    logger.add_entry(LogType.INFO_LOG_WRITTEN, where=summary_path)
    return logger


@dataclass
class SceneScore:
    """Objective scores and the interpretable reward of one estimate."""

    method: str
    scene_id: str
    si_snr_db: float
    stoi: float
    seg_snr_db: float
    sentiment: float
    description: str

    def to_dict(self) -> Dict[str, Any]:
        return dict(vars(self))


def score_scene(method: str, scene: Scene, enhanced: Waveform, prompt: str = "basic") -> SceneScore:
    record = InterpretableRewardModel(prompt).score(
        enhanced, RewardContext(clean=scene.clean, noisy=scene.noisy)
    )
    return SceneScore(
        method=method,
        scene_id=scene.scene_id,
        si_snr_db=si_snr(scene.clean, enhanced),
        stoi=record.features.intelligibility_proxy,
        seg_snr_db=segmental_snr(scene.clean, enhanced),
        sentiment=record.sentiment,
        description=record.description,
    )


class EvalTable:
    """
    One row per method, always in the order noisy, baseline, rl_scalar, rl_interpretable.

    Every populated row aggregates the same held-out scenes. Methods without a checkpoint
    keep their row, marked "absent".
    """

    def __init__(self, scores: Dict[str, Optional[List[SceneScore]]]) -> None:
        rows = []
        for method in METHODS:
            method_scores = scores.get(method)
            if not method_scores:
                rows.append({"method": method, "status": "absent", "n_scenes": 0})
                continue
            rows.append(
                {
                    "method": method,
                    "status": "ok",
                    "si_snr_db": float(np.mean([s.si_snr_db for s in method_scores])),
                    "stoi": float(np.mean([s.stoi for s in method_scores])),
                    "sentiment": float(np.mean([s.sentiment for s in method_scores])),
                    "seg_snr_db": float(np.mean([s.seg_snr_db for s in method_scores])),
                    "n_scenes": len(method_scores),
                }
            )
        self.frame = pd.DataFrame(rows).set_index("method").reindex(columns=TABLE_COLUMNS)
        self.frame["n_scenes"] = self.frame["n_scenes"].astype(int)

    def row(self, method: str) -> pd.Series:
        return self.frame.loc[method]

    def is_absent(self, method: str) -> bool:
        return self.frame.loc[method, "status"] == "absent"

    def to_csv(self, path: Path) -> Path:
        self.frame.to_csv(path, float_format="%.6f", na_rep="absent")
        return Path(path)

    def to_markdown(self, path: Optional[Path] = None) -> str:
        display = self.frame.copy().astype(object)
        for column in ("si_snr_db", "stoi", "sentiment", "seg_snr_db"):
            display[column] = [
                "absent" if pd.isna(v) else f"{v:.3f}" for v in self.frame[column]
            ]
        text = display.to_markdown() + "\n"
        if path is not None:
            Path(path).write_text(text)
        return text


def scorable_scenes(scenes: List[Scene]) -> Tuple[List[Scene], List[str]]:
    """
    Split off scenes whose reference is too quiet to score, so that every method is
    evaluated on the same remaining set.
    """
    kept, skipped = [], []
    for scene in scenes:
        try:
            if scene.clean.is_silent():
                raise DegenerateSignalError("the clean reference is all zeros")
            stoi(scene.clean, scene.noisy)
        except (DegenerateSignalError, InsufficientSignalError) as e:
            skipped.append(f"{scene.scene_id}: {e}")
            continue
        kept.append(scene)
    if not kept:
        raise InsufficientSignalError("None of the held-out scenes can be scored.")
    return kept, skipped


@_lock_out_dir
def cmd_evaluate(
    cfg: ExperimentConfig, out_dir: Path, checkpoints: Optional[Dict[str, Path]] = None
) -> Logger:
    """
    Score every method on the held-out scenes and write the table (CSV + Markdown) and the
    per-scene scores.

    :param checkpoints: Method -> checkpoint path overrides; by default the checkpoints that
        `pretrain` and `finetune` write into `out_dir` are used.
    """
    logger = Logger(current_location=out_dir)
    held_out, skipped = scorable_scenes(load_split(cfg, "held_out"))
    if skipped:
        logger.add_entry(LogType.WARN_DEGENERATE_SCENE, *skipped, where=cfg.manifest_path)
    checkpoints = dict(checkpoints or {})

    scores: Dict[str, Optional[List[SceneScore]]] = {
        "noisy": parallel_map(
            lambda s: score_scene("noisy", s, s.noisy, cfg.prompt), held_out, cfg.workers
        )
    }
    absent = []
    for method, name in CHECKPOINT_FOR_METHOD.items():
        path = Path(checkpoints.get(method, checkpoint_path(out_dir, name)))
        if not path.is_file():
            scores[method] = None
            absent.append(f"{method} (expected {path})")
            continue
        model = load_checkpoint(path, expected_config=cfg.model).model.freeze()
        scores[method] = parallel_map(
            lambda s: score_scene(method, s, model.forward(s.noisy, s.visual).enhanced, cfg.prompt),
            held_out,
            cfg.workers,
        )
    if absent:
        logger.add_entry(LogType.WARN_CHECKPOINT_ABSENT, *absent, where=out_dir)

    table = EvalTable(scores)
    eval_dir = Path(out_dir) / EVAL_DIR
    eval_dir.mkdir(parents=True, exist_ok=True)
    csv_path = table.to_csv(eval_dir / "table.csv")
    table.to_markdown(eval_dir / "table.md")
    write_json_lines(
        eval_dir / "per_scene.jsonl",
        (s.to_dict() for method in METHODS for s in (scores.get(method) or [])),
    )
    logger.add_entry(
        LogType.INFO_TABLE_WRITTEN,
        f"{len(held_out)} held-out scenes",
        *[f"{m}: {table.row(m)['status']}" for m in METHODS],
        where=csv_path,
    )
    return logger


def cmd_score(ref: Path, est: Path, noisy: Optional[Path] = None) -> Dict[str, Any]:
    """
    Objective scores of the WAV file `est` against `ref`, plus the acoustic features and
    both reward records when the mixture `noisy` is given.
    """
    reference, estimate = read_wav(ref), read_wav(est)
    result: Dict[str, Any] = metric_report(reference, estimate).to_dict()
    if noisy is not None:
        mixture = read_wav(noisy)
        ctx = RewardContext(clean=reference, noisy=mixture)
        interpretable = build_reward_model("interpretable").score(estimate, ctx)
        result["noisy_snr_db"] = measured_snr(reference, mixture)
        result["features"] = interpretable.features.to_dict()
        result["description"] = interpretable.description
        result["sentiment"] = interpretable.sentiment
        result["mos_proxy"] = build_reward_model("mos_proxy").score(estimate, ctx).metadata
    return result


@dataclass
class Explanation:
    """Before / after descriptions of one scene with the reward and metric deltas."""

    scene_id: str
    noisy_description: str
    enhanced_description: str
    noisy_sentiment: float
    enhanced_sentiment: float
    delta_si_snr_db: float
    delta_stoi: float

    @property
    def delta_reward(self) -> float:
        return self.enhanced_sentiment - self.noisy_sentiment

    def render(self) -> str:
        return (
            f"Scene {self.scene_id}\n"
            f"Noisy:    {self.noisy_description} (sentiment {self.noisy_sentiment:.2f})\n"
            f"Enhanced: {self.enhanced_description} (sentiment {self.enhanced_sentiment:.2f})\n"
            f"Δreward {self.delta_reward:+.2f} | ΔSI-SNR {self.delta_si_snr_db:+.2f} dB | "
            f"ΔSTOI {self.delta_stoi:+.3f}\n"
        )


def explain_scene(scene: Scene, enhanced: Waveform, prompt: str = "basic") -> Explanation:
    before = score_scene("noisy", scene, scene.noisy, prompt)
    after = score_scene("enhanced", scene, enhanced, prompt)
    return Explanation(
        scene_id=scene.scene_id,
        noisy_description=before.description,
        enhanced_description=after.description,
        noisy_sentiment=before.sentiment,
        enhanced_sentiment=after.sentiment,
        delta_si_snr_db=after.si_snr_db - before.si_snr_db,
        delta_stoi=after.stoi - before.stoi,
    )


def cmd_explain(
    cfg: ExperimentConfig, scene_id: str, checkpoint: Optional[Path] = None
) -> Explanation:
    """
    Explain what the enhancer did to one scene, in words and numbers.

    Uses the interpretable RL checkpoint by default, falling back to the pretrained one.
    """
    records: Dict[str, SceneRecord] = {r.id: r for r in read_manifest(cfg.manifest_path)}
    if scene_id not in records:
        raise InvalidArgumentError(f"Scene '{scene_id}' is not in {cfg.manifest_path}.")
    scene = load_scene(records[scene_id], cfg.out_dir, cfg.frame_rate, cfg.model.d_v)

    if checkpoint is None:
        checkpoint = checkpoint_path(cfg.out_dir, "rl_interpretable")
        if not checkpoint.is_file():
            checkpoint = checkpoint_path(cfg.out_dir, PRETRAINED_NAME)
    model = load_checkpoint(checkpoint, expected_config=cfg.model).model.freeze()
    return explain_scene(scene, model.forward(scene.noisy, scene.visual).enhanced, cfg.prompt)


def print_config(cfg: ExperimentConfig) -> str:
    return json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n"
