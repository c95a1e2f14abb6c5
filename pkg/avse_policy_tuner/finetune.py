"""
Critic-free, single-step PPO fine-tuning of the enhancer.

The policy is a Gaussian over masks centred on the model's mask mean. Each scene is one
episode: sample a mask, decode it, and score the result against the frozen base model's
output with a frozen reward model. The relative reward minus a KL penalty towards the base
policy takes the place of the advantage in the clipped surrogate, and a supervised SI-SNR
term on the mean-mask output keeps the enhancer anchored.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from avse_policy_tuner import autodiff as ad
from avse_policy_tuner.autodiff import DiffTensor
from avse_policy_tuner.logging.tuner_error import InvalidArgumentError, NumericalFailureError
from avse_policy_tuner.model import Adam, EnhancerModel, si_snr_loss
from avse_policy_tuner.rewards import RewardContext, RewardModel, RewardRecord, relative_reward
from avse_policy_tuner.signals import Scene
from avse_policy_tuner.utils import derive_seed

LOG_RATIO_LIMIT = 20.0


@dataclass(frozen=True)
class PpoConfig:
    """
    Hyperparameters of the fine-tuning stage.

    :param sigma: Standard deviation of the Gaussian mask perturbation.
    :param epsilon: PPO clip range.
    :param beta: Weight of the KL penalty towards the base policy.
    :param gamma: Weight of the supervised SI-SNR loss.
    :param lr: Adam learning rate.
    :param epochs: Passes over the training scenes.
    :param seed: Seed for the action noise.
    """

    sigma: float = 0.05
    epsilon: float = 0.1
    beta: float = 0.0001
    gamma: float = 1.0
    lr: float = 0.001
    epochs: int = 20
    seed: int = 0

    def __post_init__(self) -> None:
        if not self.sigma > 0:
            raise InvalidArgumentError(f"PpoConfig.sigma must be positive, got {self.sigma}.")
        if not 0 < self.epsilon < 1:
            raise InvalidArgumentError(f"PpoConfig.epsilon must lie in (0, 1), got {self.epsilon}.")
        if self.beta < 0 or self.gamma < 0:
            raise InvalidArgumentError(
                f"PpoConfig.beta and gamma must be non-negative, got {self.beta} and {self.gamma}."
            )
        if not self.lr > 0:
            raise InvalidArgumentError(f"PpoConfig.lr must be positive, got {self.lr}.")
        if self.epochs < 0:
            raise InvalidArgumentError(f"PpoConfig.epochs must be non-negative, got {self.epochs}.")

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


@dataclass
class PolicyStep:
    """Everything computed for one scene in one fine-tuning step."""

    scene_id: str
    mu_rl: np.ndarray
    mu_base: np.ndarray
    mu_old: np.ndarray
    action: np.ndarray
    logp_new: float
    logp_old: float
    ratio: float
    kl: float
    kl_per_element: float
    reward_R: float
    objective_L: float
    clip_loss: float
    total_loss: float
    clip_active: bool
    ratio_clamped: bool
    sentiment_rl: float
    sentiment_base: float
    si_snr_rl: float
    description_rl: str

    def to_log_record(self, epoch: int) -> Dict[str, Any]:
        """The per-step line of the training log."""
        return {
            "epoch": epoch,
            "scene_id": self.scene_id,
            "R": self.reward_R,
            "kl": self.kl,
            "kl_per_element": self.kl_per_element,
            "ratio": self.ratio,
            "clip_active": self.clip_active,
            "ratio_clamped": self.ratio_clamped,
            "sentiment_rl": self.sentiment_rl,
            "sentiment_base": self.sentiment_base,
            "si_snr_rl": self.si_snr_rl,
            "description_rl": self.description_rl,
        }


@dataclass
class EpochStats:
    """Means over the scenes of one epoch."""

    epoch: int
    mean_R: float
    mean_kl: float
    mean_kl_per_element: float
    mean_sentiment: float
    mean_si_snr: float
    clip_fraction: float
    mean_ratio: float
    steps: List[PolicyStep] = field(default_factory=list, repr=False)

    def to_dict(self) -> Dict[str, float]:
        summary = asdict(self)
        summary.pop("steps")
        summary["n_steps"] = len(self.steps)
        return summary


def sample_action(mu: DiffTensor, sigma: float, seed: int) -> np.ndarray:
    """
    mu + n with n ~ N(0, sigma^2 I). The action is never clamped, so its density stays
    exactly Gaussian.
    """
    if sigma < 0:
        raise InvalidArgumentError(f"sigma must be non-negative, got {sigma}.")
    if sigma == 0:
        return mu.values.copy()
    rng = np.random.default_rng(seed)
    return mu.values + sigma * rng.standard_normal(mu.shape)


def log_prob(action: np.ndarray, mu: DiffTensor, sigma: float) -> DiffTensor:
    """Diagonal-Gaussian log-density of `action`, summed over elements; differentiable in mu."""
    if not sigma > 0:
        raise InvalidArgumentError(f"The Gaussian density needs sigma > 0, got {sigma}.")
    mu = ad.lift(mu)
    if np.shape(action) != mu.shape:
        raise InvalidArgumentError(f"Action shape {np.shape(action)} differs from mean {mu.shape}.")
    squared = ad.sum_all(ad.sub(np.asarray(action, dtype=np.float64), mu) ** 2)
    normaliser = mu.size * math.log(sigma * math.sqrt(2 * math.pi))
    return squared * (-0.5 / sigma**2) - normaliser


def kl_policies(mu_rl: DiffTensor, mu_base: DiffTensor, sigma: float) -> DiffTensor:
    """
    KL(N(mu_rl, sigma^2 I) || N(mu_base, sigma^2 I)) = ||mu_rl - mu_base||^2 / (2 sigma^2).

    The base mean is treated as a constant.
    """
    if not sigma > 0:
        raise InvalidArgumentError(f"The KL divergence needs sigma > 0, got {sigma}.")
    mu_rl = ad.lift(mu_rl)
    base = mu_base.detach() if isinstance(mu_base, DiffTensor) else DiffTensor(mu_base)
    if base.shape != mu_rl.shape:
        raise InvalidArgumentError(f"Mask means differ in shape: {mu_rl.shape} vs {base.shape}.")
    return ad.sum_all((mu_rl - base) ** 2) * (1.0 / (2 * sigma**2))


def objective_L(R: float, kl: DiffTensor, beta: float) -> DiffTensor:
    """L = R - beta * KL, with R a constant."""
    return float(R) - ad.lift(kl) * beta


def importance_ratio(logp_new: DiffTensor, logp_old: float) -> DiffTensor:
    """exp(logp_new - logp_old), with the log-ratio bounded to +-20 before exponentiation."""
    return ad.exp(ad.clip(logp_new - float(logp_old), -LOG_RATIO_LIMIT, LOG_RATIO_LIMIT))


def ppo_clip_loss(ratio: DiffTensor, L: DiffTensor, epsilon: float) -> DiffTensor:
    """
    -min(ratio * L_bar, clip(ratio, 1 - eps, 1 + eps) * L_bar), with L_bar = L held constant.

    Only the ratio carries a gradient.
    """
    ratio = ad.lift(ratio)
    advantage = float(ad.lift(L).values)
    unclipped = ratio * advantage
    clipped = ad.clip(ratio, 1.0 - epsilon, 1.0 + epsilon) * advantage
    return -ad.minimum(unclipped, clipped)


def total_loss(clip_loss: DiffTensor, si_snr_loss_value: DiffTensor, gamma: float) -> DiffTensor:
    """L_clip + gamma * L_SI-SNR."""
    return ad.lift(clip_loss) + ad.lift(si_snr_loss_value) * gamma


def _reward_context(scene: Scene) -> RewardContext:
    return RewardContext(clean=scene.clean, noisy=scene.noisy)


def base_record(
    base: EnhancerModel,
    scene: Scene,
    reward_model: RewardModel,
    cache: Optional[Dict[str, RewardRecord]] = None,
) -> RewardRecord:
    """Score the base policy's mean-mask output; the result never changes, so it is cached."""
    key = f"{reward_model.model_id}:{scene.scene_id}"
    if cache is not None and key in cache:
        return cache[key]
    enhanced = base.forward(scene.noisy, scene.visual).enhanced
    record = reward_model.score(enhanced, _reward_context(scene))
    if cache is not None:
        cache[key] = record
    return record


def policy_step(
    policy: EnhancerModel,
    base: EnhancerModel,
    prev: EnhancerModel,
    scene: Scene,
    reward_model: RewardModel,
    cfg: PpoConfig,
    action_seed: int,
    base_cache: Optional[Dict[str, RewardRecord]] = None,
) -> Tuple[PolicyStep, DiffTensor]:
    """
    Run one PPO decision on `scene` and build its step loss.

    The step loss is L_clip + gamma * L_SI-SNR + beta * KL: L enters the clip term as a
    constant, and the KL term is added separately so it still pulls towards the base policy.
    """
    n_samples = len(scene.noisy)
    trace = policy.forward(scene.noisy, scene.visual)
    mu_base = base.forward(scene.noisy, scene.visual).mask_mean
    mu_old = prev.forward(scene.noisy, scene.visual).mask_mean

    action = sample_action(trace.mask_mean, cfg.sigma, action_seed)
    y_rl = policy.decode(trace.latent.detach(), DiffTensor(action), n_samples)
    if not (np.all(np.isfinite(y_rl.values)) and np.all(np.isfinite(trace.mask_mean.values))):
        raise NumericalFailureError(f"Non-finite policy output on scene {scene.scene_id}.")
    ctx = _reward_context(scene)
    record_rl = reward_model.score(
        scene.noisy.with_samples(y_rl.values.reshape(-1)), ctx
    )
    record_base = base_record(base, scene, reward_model, base_cache)
    R = relative_reward(record_rl, record_base)

    logp_new = log_prob(action, trace.mask_mean, cfg.sigma)
    logp_old = log_prob(action, mu_old, cfg.sigma).item()
    ratio = importance_ratio(logp_new, logp_old)
    kl = kl_policies(trace.mask_mean, mu_base, cfg.sigma)
    L = objective_L(R, kl, cfg.beta)
    clip_term = ppo_clip_loss(ratio, L, cfg.epsilon)
    supervised = si_snr_loss(scene.clean, trace.enhanced_tensor)
    total = total_loss(clip_term, supervised, cfg.gamma)
    step_loss = total + kl * cfg.beta

    ratio_value = ratio.item()
    step = PolicyStep(
        scene_id=scene.scene_id,
        mu_rl=trace.mask_mean.values.copy(),
        mu_base=mu_base.values.copy(),
        mu_old=mu_old.values.copy(),
        action=action,
        logp_new=logp_new.item(),
        logp_old=logp_old,
        ratio=ratio_value,
        kl=kl.item(),
        kl_per_element=kl.item() / trace.mask_mean.size,
        reward_R=R,
        objective_L=L.item(),
        clip_loss=clip_term.item(),
        total_loss=step_loss.item(),
        clip_active=abs(ratio_value - 1.0) > cfg.epsilon,
        ratio_clamped=abs(logp_new.item() - logp_old) >= LOG_RATIO_LIMIT,
        sentiment_rl=record_rl.sentiment,
        sentiment_base=record_base.sentiment,
        si_snr_rl=-supervised.item(),
        description_rl=record_rl.description,
    )
    return step, step_loss


def finetune_epoch(
    policy: EnhancerModel,
    base_snapshot: EnhancerModel,
    prev_snapshot: EnhancerModel,
    scenes: Sequence[Scene],
    reward_model: RewardModel,
    cfg: PpoConfig,
    optimizer: Optional[Adam] = None,
    epoch: int = 0,
    base_cache: Optional[Dict[str, RewardRecord]] = None,
) -> EpochStats:
    """
    One pass over `scenes` with one optimiser step per scene.

    `base_snapshot` and `prev_snapshot` must be frozen. The caller refreshes
    `prev_snapshot` from the policy before each epoch, so the first step of an epoch has a
    ratio of exactly 1.

    :raises NumericalFailureError: A step loss is not finite; the policy is left at its
        last finite state.
    """
    if not base_snapshot.frozen or not prev_snapshot.frozen:
        raise InvalidArgumentError("The base and previous-iterate snapshots must be frozen.")
    if not scenes:
        raise InvalidArgumentError("Fine-tuning needs at least one scene.")
    optimizer = optimizer if optimizer is not None else Adam(policy.params, lr=cfg.lr)

    steps: List[PolicyStep] = []
    for index, scene in enumerate(scenes):
        optimizer.zero_grad()
        step, loss = policy_step(
            policy,
            base_snapshot,
            prev_snapshot,
            scene,
            reward_model,
            cfg,
            action_seed=derive_seed(cfg.seed, "finetune", epoch, index),
            base_cache=base_cache,
        )
        if not np.isfinite(loss.item()):
            raise NumericalFailureError(
                f"Non-finite fine-tuning loss at epoch {epoch}, scene {scene.scene_id} "
                f"(R={step.reward_R}, kl={step.kl}, ratio={step.ratio}, "
                f"si_snr={step.si_snr_rl})."
            )
        loss.backward()
        optimizer.step()
        steps.append(step)

    return EpochStats(
        epoch=epoch,
        mean_R=float(np.mean([s.reward_R for s in steps])),
        mean_kl=float(np.mean([s.kl for s in steps])),
        mean_kl_per_element=float(np.mean([s.kl_per_element for s in steps])),
        mean_sentiment=float(np.mean([s.sentiment_rl for s in steps])),
        mean_si_snr=float(np.mean([s.si_snr_rl for s in steps])),
        clip_fraction=float(np.mean([s.clip_active for s in steps])),
        mean_ratio=float(np.mean([s.ratio for s in steps])),
        steps=steps,
    )
