import math
from typing import List

import numpy as np
import pytest

from avse_policy_tuner import autodiff as ad
from avse_policy_tuner.autodiff import DiffTensor, finite_difference_grad
from avse_policy_tuner.finetune import (
    LOG_RATIO_LIMIT,
    PpoConfig,
    finetune_epoch,
    importance_ratio,
    kl_policies,
    log_prob,
    objective_L,
    policy_step,
    ppo_clip_loss,
    sample_action,
    total_loss,
)
from avse_policy_tuner.logging.tuner_error import InvalidArgumentError, NumericalFailureError
from avse_policy_tuner.model import Adam, EnhancerModel, si_snr_loss
from avse_policy_tuner.rewards import InterpretableRewardModel, MosProxyRewardModel
from avse_policy_tuner.signals import Scene, generate_clean, generate_noise, mix_scene


@pytest.fixture(scope="module")
def scenes() -> List[Scene]:
    """Three one-second scenes at 0 dB, long enough for STOI-based rewards."""
    result = []
    for i in range(3):
        clean = generate_clean(1.0, f0_hz=110.0 + 30 * i, seed=40 + i)
        noise = generate_noise(("white", "pink", "babble")[i], 1.2, seed=50 + i)
        scene = mix_scene(clean, noise, 0.0, seed=60 + i)
        scene.scene_id = f"scene-{i:03d}"
        result.append(scene)
    return result


@pytest.mark.parametrize(
    ["overrides", "match"],
    [
        pytest.param({"sigma": 0.0}, "sigma", id="Zero sigma"),
        pytest.param({"epsilon": 1.0}, "epsilon", id="Epsilon at 1"),
        pytest.param({"beta": -1.0}, "beta and gamma", id="Negative beta"),
        pytest.param({"gamma": -0.5}, "beta and gamma", id="Negative gamma"),
        pytest.param({"lr": 0.0}, "lr", id="Zero learning rate"),
        pytest.param({"epochs": -1}, "epochs", id="Negative epochs"),
    ],
)
def test_ppo_config_validation(overrides, match: str) -> None:
    with pytest.raises(InvalidArgumentError, match=match):
        PpoConfig(**overrides)


def test_ppo_config_defaults() -> None:
    cfg = PpoConfig()
    assert (cfg.sigma, cfg.epsilon, cfg.beta, cfg.gamma, cfg.lr) == (0.05, 0.1, 1e-4, 1.0, 1e-3)


def test_sample_action(rng) -> None:
    mu = DiffTensor(rng.uniform(0.1, 0.9, size=(4, 6)))
    assert np.array_equal(sample_action(mu, 0.0, seed=1), mu.values)
    assert np.array_equal(sample_action(mu, 0.05, seed=1), sample_action(mu, 0.05, seed=1))
    assert not np.array_equal(sample_action(mu, 0.05, seed=1), sample_action(mu, 0.05, seed=2))

    # Not clamped to the mask range
    wide = sample_action(DiffTensor(np.full(1000, 0.99)), 0.5, seed=3)
    assert np.any(wide > 1.0) and np.any(wide < 0.0)

    with pytest.raises(InvalidArgumentError):
        sample_action(mu, -0.1, seed=1)


def test_sample_action_mean() -> None:
    n, sigma = 100_000, 0.05
    draws = sample_action(DiffTensor(np.full(n, 0.4)), sigma, seed=9)
    assert abs(draws.mean() - 0.4) < 3 * sigma / math.sqrt(n)
    assert draws.std() == pytest.approx(sigma, rel=0.02)


def test_log_prob(rng) -> None:
    sigma = 0.05
    mu = ad.parameter(rng.uniform(0.1, 0.9, size=(3, 5)))
    mode = log_prob(mu.values, mu, sigma).item()
    assert mode == pytest.approx(-15 * math.log(sigma * math.sqrt(2 * math.pi)))

    single = ad.parameter(np.array([0.3]))
    one_sigma = log_prob(np.array([0.3 + sigma]), single, sigma).item()
    assert one_sigma == pytest.approx(log_prob(np.array([0.3]), single, sigma).item() - 0.5)

    action = mu.values + sigma * rng.standard_normal(mu.shape)
    mu.zero_grad()
    log_prob(action, mu, sigma).backward()
    assert np.allclose(mu.grad, (action - mu.values) / sigma**2)
    numeric = finite_difference_grad(lambda: log_prob(action, mu, sigma).item(), mu, h=1e-6)
    assert np.linalg.norm(mu.grad - numeric) / np.linalg.norm(numeric) < 1e-6

    with pytest.raises(InvalidArgumentError, match="sigma > 0"):
        log_prob(action, mu, 0.0)
    with pytest.raises(InvalidArgumentError, match="differs from mean"):
        log_prob(action[:, :4], mu, sigma)


def test_kl_policies(rng) -> None:
    sigma = 0.05
    base = DiffTensor(rng.uniform(0.1, 0.9, size=(2, 4)))
    assert kl_policies(base.values.copy(), base, sigma).item() == 0.0
    assert kl_policies(base.values + sigma, base, sigma).item() == pytest.approx(4.0)

    delta = rng.standard_normal(base.shape) * 0.01
    once = kl_policies(base.values + delta, base, sigma).item()
    twice = kl_policies(base.values + 2 * delta, base, sigma).item()
    assert once > 0
    assert twice == pytest.approx(4 * once)

    # Only the RL side carries a gradient
    mu_rl = ad.parameter(base.values + delta)
    mu_base = ad.parameter(base.values)
    kl_policies(mu_rl, mu_base, sigma).backward()
    assert np.allclose(mu_rl.grad, delta / sigma**2)
    assert not np.any(mu_base.grad)

    with pytest.raises(InvalidArgumentError, match="differ in shape"):
        kl_policies(base.values[:, :3], base, sigma)


def test_kl_monte_carlo() -> None:
    sigma = 0.05
    mu_base = np.array([0.2, 0.5, 0.7])
    mu_rl = mu_base + np.array([1.0, -0.5, 0.25]) * sigma
    closed_form = kl_policies(mu_rl, DiffTensor(mu_base), sigma).item()

    samples = mu_rl + sigma * np.random.default_rng(4).standard_normal((1_000_000, 3))
    log_ratio = ((samples - mu_base) ** 2 - (samples - mu_rl) ** 2).sum(axis=1) / (2 * sigma**2)
    assert log_ratio.mean() == pytest.approx(closed_form, rel=0.02)


@pytest.mark.parametrize(
    ["R", "kl", "beta", "expected"],
    [
        pytest.param(1.79, 0.0, 1e-4, 1.79, id="Zero KL"),
        pytest.param(0.5, 300.0, 0.0, 0.5, id="No KL weight"),
        pytest.param(0.0, 100.0, 1e-4, -0.01, id="Penalty only"),
    ],
)
def test_objective_L(R: float, kl: float, beta: float, expected: float) -> None:
    assert objective_L(R, DiffTensor(kl), beta).item() == pytest.approx(expected)


@pytest.mark.parametrize(
    ["ratio", "L", "epsilon", "expected"],
    [
        pytest.param(1.0, 0.7, 0.1, -0.7, id="Ratio 1"),
        pytest.param(1.0, -2.0, 0.3, 2.0, id="Ratio 1, other epsilon"),
        pytest.param(1.3, 1.0, 0.1, -1.1, id="Clipped above"),
        pytest.param(0.5, -2.0, 0.1, 1.8, id="Clipped below, negative advantage"),
        pytest.param(0.5, 1.0, 0.1, -0.5, id="Pessimistic unclipped branch"),
    ],
)
def test_ppo_clip_loss(ratio: float, L: float, epsilon: float, expected: float) -> None:
    assert ppo_clip_loss(DiffTensor(ratio), DiffTensor(L), epsilon).item() == pytest.approx(
        expected
    )


def test_ppo_clip_loss_gradients() -> None:
    # Inside the clip range the clip branch is inert and the gradient is -L
    for r in (0.91, 1.0, 1.05, 1.1):
        ratio = ad.parameter(np.array(r))
        loss = ppo_clip_loss(ratio, DiffTensor(2.0), 0.1)
        assert loss.item() == pytest.approx(-2.0 * r)
        loss.backward()
        assert ratio.grad == pytest.approx(-2.0)

    # Clipped: no gradient
    ratio = ad.parameter(np.array(1.3))
    ppo_clip_loss(ratio, DiffTensor(1.0), 0.1).backward()
    assert ratio.grad == 0.0

    # L is a constant even when it is a tensor with history
    kl = ad.parameter(np.array(3.0))
    ratio = ad.parameter(np.array(1.0))
    ppo_clip_loss(ratio, objective_L(1.0, kl, 0.5), 0.1).backward()
    assert not np.any(kl.grad)


def test_importance_ratio() -> None:
    logp = ad.parameter(np.array(-3.0))
    assert importance_ratio(logp, -3.0).item() == 1.0
    assert importance_ratio(logp, -3.5).item() == pytest.approx(math.exp(0.5))
    assert importance_ratio(logp, -100.0).item() == pytest.approx(math.exp(LOG_RATIO_LIMIT))
    assert importance_ratio(logp, 100.0).item() == pytest.approx(math.exp(-LOG_RATIO_LIMIT))


def test_total_loss() -> None:
    assert total_loss(DiffTensor(-1.1), DiffTensor(-12.0), 0.5).item() == pytest.approx(-7.1)
    assert total_loss(DiffTensor(-1.1), DiffTensor(-12.0), 1.0).item() == pytest.approx(-13.1)
    assert total_loss(DiffTensor(-1.1), DiffTensor(-12.0), 0.0).item() == pytest.approx(-1.1)

    clip = ad.parameter(np.array(0.2))
    si_snr = ad.parameter(np.array(-5.0))
    total_loss(clip, si_snr, 0.5).backward()
    assert (clip.grad, si_snr.grad) == (1.0, 0.5)


def test_rewarded_action_becomes_more_likely(rng) -> None:
    """With R > 0 and no KL or SI-SNR terms, one step raises the sampled action's density."""
    sigma = 0.05
    mu = ad.parameter(rng.uniform(0.2, 0.8, size=(3, 4)))
    action = mu.values + sigma * rng.choice([-1.0, 1.0], size=mu.shape)
    before = log_prob(action, mu, sigma).item()

    logp_new = log_prob(action, mu, sigma)
    L = objective_L(1.0, DiffTensor(0.0), beta=0.0)
    ppo_clip_loss(importance_ratio(logp_new, before), L, 0.1).backward()
    Adam({"mu": mu}, lr=1e-3).step()

    assert log_prob(action, mu, sigma).item() > before


def test_total_loss_gradient(tiny_model: EnhancerModel, scenes: List[Scene]) -> None:
    """The full step loss, with the reward and action held fixed, against central differences."""
    scene = scenes[0]
    cfg = PpoConfig(beta=0.01, gamma=0.5)
    base = tiny_model.snapshot().freeze()
    # Move away from the base so the KL term is non-zero
    for p in tiny_model.parameters():
        p.values += 0.01 * np.random.default_rng(2).standard_normal(p.shape)

    trace = tiny_model.forward(scene.noisy, scene.visual)
    mu_base = base.forward(scene.noisy, scene.visual).mask_mean
    action = sample_action(trace.mask_mean, cfg.sigma, seed=0)
    logp_old = log_prob(action, trace.mask_mean, cfg.sigma).item() - 0.05
    L_bar = objective_L(1.0, kl_policies(trace.mask_mean, mu_base, cfg.sigma), cfg.beta).item()

    def build() -> DiffTensor:
        trace = tiny_model.forward(scene.noisy, scene.visual)
        ratio = importance_ratio(log_prob(action, trace.mask_mean, cfg.sigma), logp_old)
        kl = kl_policies(trace.mask_mean, mu_base, cfg.sigma)
        clip_term = ppo_clip_loss(ratio, DiffTensor(L_bar), cfg.epsilon)
        supervised = si_snr_loss(scene.clean, trace.enhanced_tensor)
        return total_loss(clip_term, supervised, cfg.gamma) + kl * cfg.beta

    tiny_model.zero_grad()
    build().backward()
    rng = np.random.default_rng(3)
    analytic, numeric = [], []
    for name in ("mask.bias", "tcn.0.out.weight", "encoder.weight", "fusion.bias"):
        tensor = tiny_model.params[name]
        index = tuple(int(rng.integers(0, s)) for s in tensor.shape)
        analytic.append(tensor.grad[index])
        numeric.append(
            finite_difference_grad(lambda: build().item(), tensor, [index], h=1e-6)[index]
        )
    analytic, numeric = np.array(analytic), np.array(numeric)
    assert np.linalg.norm(analytic - numeric) / np.linalg.norm(numeric) < 1e-3


def test_policy_step_at_identity(tiny_model: EnhancerModel, scenes: List[Scene]) -> None:
    """Policy, base and previous iterate all equal, with a vanishing action noise."""
    cfg = PpoConfig(sigma=1e-9)
    base = tiny_model.snapshot().freeze()
    reward_model = InterpretableRewardModel()
    cache = {}
    for scene in scenes:
        step, loss = policy_step(
            tiny_model, base, base, scene, reward_model, cfg, action_seed=0, base_cache=cache
        )
        assert step.reward_R == 0.0
        assert step.kl == 0.0
        assert abs(step.ratio - 1.0) < 1e-9
        assert not step.clip_active and not step.ratio_clamped
        assert step.sentiment_rl == step.sentiment_base
        assert step.description_rl
        assert np.isfinite(loss.item())
    assert sorted(cache) == [f"{reward_model.model_id}:{s.scene_id}" for s in scenes]


def test_finetune_epoch(tiny_model: EnhancerModel, scenes: List[Scene]) -> None:
    cfg = PpoConfig(epochs=1, lr=1e-3, seed=7)
    base = tiny_model.snapshot().freeze()
    base_before = base.forward(scenes[0].noisy, scenes[0].visual).enhanced.samples
    weights_before = tiny_model.state_dict()

    stats = finetune_epoch(
        tiny_model,
        base,
        tiny_model.snapshot().freeze(),
        scenes,
        MosProxyRewardModel(),
        cfg,
        epoch=1,
    )
    assert stats.epoch == 1
    assert len(stats.steps) == 3
    assert [s.scene_id for s in stats.steps] == ["scene-000", "scene-001", "scene-002"]
    assert abs(stats.steps[0].ratio - 1.0) < 1e-9
    assert all(s.ratio > 0 and s.kl >= 0 for s in stats.steps)
    assert stats.steps[0].kl == 0.0
    assert 0.0 <= stats.clip_fraction <= 1.0
    assert stats.mean_R == pytest.approx(np.mean([s.reward_R for s in stats.steps]))
    assert stats.steps[1].kl_per_element == pytest.approx(
        stats.steps[1].kl / stats.steps[1].mu_rl.size
    )

    summary = stats.to_dict()
    assert summary["n_steps"] == 3 and "steps" not in summary
    record = stats.steps[0].to_log_record(1)
    assert set(record) >= {
        "epoch",
        "scene_id",
        "R",
        "kl",
        "ratio",
        "clip_active",
        "sentiment_rl",
        "sentiment_base",
        "si_snr_rl",
        "description_rl",
    }

    # The policy moved, the frozen base did not
    assert not np.array_equal(tiny_model.state_dict()["mask.bias"], weights_before["mask.bias"])
    base_after = base.forward(scenes[0].noisy, scenes[0].visual).enhanced.samples
    assert np.array_equal(base_before, base_after)

    # Same seeds, same run
    replay = EnhancerModel(tiny_model.config, seed=5)
    again = finetune_epoch(
        replay,
        replay.snapshot().freeze(),
        replay.snapshot().freeze(),
        scenes,
        MosProxyRewardModel(),
        cfg,
        epoch=1,
    )
    assert [s.reward_R for s in again.steps] == [s.reward_R for s in stats.steps]
    assert np.array_equal(replay.state_dict()["mask.bias"], tiny_model.state_dict()["mask.bias"])


def test_finetune_epoch_errors(tiny_model: EnhancerModel, scenes: List[Scene]) -> None:
    frozen = tiny_model.snapshot().freeze()
    reward_model = InterpretableRewardModel()
    with pytest.raises(InvalidArgumentError, match="must be frozen"):
        finetune_epoch(tiny_model, tiny_model.snapshot(), frozen, scenes, reward_model, PpoConfig())
    with pytest.raises(InvalidArgumentError, match="must be frozen"):
        finetune_epoch(tiny_model, frozen, tiny_model.snapshot(), scenes, reward_model, PpoConfig())
    with pytest.raises(InvalidArgumentError, match="at least one scene"):
        finetune_epoch(tiny_model, frozen, frozen, [], reward_model, PpoConfig())

    tiny_model.params["mask.bias"].values[:] = np.nan
    with pytest.raises(NumericalFailureError, match="scene-000"):
        finetune_epoch(tiny_model, frozen, frozen, scenes, reward_model, PpoConfig())
