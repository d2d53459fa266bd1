"""WGAN regularization of the segmentation networks.

The critic is a small strided-conv scorer over (image, mask) pairs, trained
with weight clipping; the generator adds -lambda_adv * mean(score(fake)) to
its cross-entropy loss.  A zero lambda_adv routes through exactly the plain
cross-entropy step, so non-adversarial training shares this code path.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ops
from . import tensor as tc
from .models import Model, forward
from .optim import AdamState, OptimConfig, adam_step, zero_grads
from .tensor import Tensor


@dataclass
class CriticConfig:
    levels: int = 4
    base_channels: int = 8
    clip_value: float = 0.01
    critic_steps_per_generator_step: int = 5
    leaky_slope: float = 0.2
    learning_rate: float = 1e-4

    def __post_init__(self):
        if self.levels < 1:
            raise ValueError(f"levels must be >= 1, got {self.levels}")
        if self.base_channels < 1:
            raise ValueError(f"base_channels must be >= 1, got {self.base_channels}")
        if self.clip_value <= 0:
            raise ValueError(f"clip_value must be > 0, got {self.clip_value}")
        if self.critic_steps_per_generator_step < 1:
            raise ValueError("critic_steps_per_generator_step must be >= 1")


class Critic:
    """Strided-conv scorer: [N,2,D,H,W] -> [N] unbounded reals, no batchnorm."""

    def __init__(self, config: CriticConfig, parameters: dict[str, Tensor]):
        self.config = config
        self.parameters = parameters


def build_critic(config: CriticConfig, seed: int, in_channels: int = 2) -> Critic:
    # uniform init inside the clip interval, so weights start where they stay
    rng = np.random.default_rng(seed)
    c = config.clip_value
    params: dict[str, Tensor] = {}
    cin = in_channels
    for i in range(config.levels):
        cout = config.base_channels * 2 ** i
        params[f"crit{i}.conv.weight"] = Tensor(rng.uniform(-c, c, size=(cout, cin, 3, 3, 3)), requires_grad=True)
        params[f"crit{i}.conv.bias"] = Tensor(rng.uniform(-c, c, size=cout), requires_grad=True)
        cin = cout
    params["crit_head.conv.weight"] = Tensor(rng.uniform(-c, c, size=(1, cin, 1, 1, 1)), requires_grad=True)
    params["crit_head.conv.bias"] = Tensor(rng.uniform(-c, c, size=1), requires_grad=True)
    return Critic(config, params)


def critic_forward(critic: Critic, image: Tensor, mask_or_pred: Tensor) -> Tensor:
    """Score per sample; the mask channel is judged in the context of its image."""
    if image.data.shape != mask_or_pred.data.shape:
        raise ValueError(f"image shape {image.data.shape} != mask shape {mask_or_pred.data.shape}")
    if image.data.ndim != 5 or image.data.shape[1] != 1:
        raise ValueError(f"critic expects (N,1,D,H,W) inputs, got {image.data.shape}")
    t = tc.concat([image, mask_or_pred], axis=1)
    p = critic.parameters
    for i in range(critic.config.levels):
        t = ops.conv3d(t, p[f"crit{i}.conv.weight"], p[f"crit{i}.conv.bias"], padding="same", stride=2)
        t = ops.leaky_relu(t, critic.config.leaky_slope)
    t = ops.conv3d(t, p["crit_head.conv.weight"], p["crit_head.conv.bias"], padding="same")
    return tc.tmean(t, axes=(1, 2, 3, 4))


def clip_weights(critic: Critic) -> None:
    c = critic.config.clip_value
    for t in critic.parameters.values():
        np.clip(t.data, -c, c, out=t.data)


@dataclass
class WganStepReport:
    bce: float
    adversarial: float
    wasserstein: float
    total: float
    critic_steps: int


def _mean_scalar(terms: list[Tensor]) -> Tensor:
    acc = terms[0]
    for term in terms[1:]:
        acc = tc.add(acc, term)
    if len(terms) > 1:
        acc = tc.mul(acc, 1.0 / len(terms))
    return acc


def _require_finite(value: float, what: str) -> float:
    if not np.isfinite(value):
        raise FloatingPointError(f"non-finite {what}: {value}")
    return value


def wgan_train_step(generator: Model, critic: Critic | None, batch, lambda_adv: float,
                    generator_optim: tuple[AdamState, OptimConfig],
                    critic_optim: tuple[AdamState, OptimConfig] | None = None) -> WganStepReport:
    """One generator update, preceded by the configured count of critic
    updates when lambda_adv is non-zero.

    batch is a list of (input, soft target) tensor pairs.  With lambda_adv of
    zero the critic is untouched and the step is exactly a cross-entropy step.
    """
    if not batch:
        raise ValueError("empty batch")
    gen_state, gen_cfg = generator_optim

    if lambda_adv == 0.0:
        zero_grads(generator.parameters)
        loss = _mean_scalar([ops.bce_loss(forward(generator, x, "train"), p) for x, p in batch])
        bce_value = _require_finite(float(loss.data), "cross-entropy loss")
        tc.backward(loss)
        adam_step(generator.parameters, gen_state, gen_cfg)
        return WganStepReport(bce_value, 0.0, 0.0, bce_value, 0)

    if critic is None or critic_optim is None:
        raise ValueError("lambda_adv > 0 requires a critic and its optimizer")
    critic_state, critic_cfg = critic_optim

    wasserstein = 0.0
    steps = critic.config.critic_steps_per_generator_step
    for _ in range(steps):
        with tc.no_grad():
            fakes = [forward(generator, x, "train") for x, _ in batch]
        zero_grads(critic.parameters)
        diffs = []
        for (x, p), fake in zip(batch, fakes):
            real_score = tc.tmean(critic_forward(critic, x, p))
            fake_score = tc.tmean(critic_forward(critic, x, fake))
            diffs.append(tc.sub(fake_score, real_score))
        critic_loss = _mean_scalar(diffs)
        wasserstein = _require_finite(-float(critic_loss.data), "critic Wasserstein estimate")
        tc.backward(critic_loss)
        adam_step(critic.parameters, critic_state, critic_cfg)
        clip_weights(critic)

    zero_grads(generator.parameters)
    zero_grads(critic.parameters)
    bce_terms = []
    adv_terms = []
    for x, p in batch:
        q = forward(generator, x, "train")
        bce_terms.append(ops.bce_loss(q, p))
        adv_terms.append(tc.neg(tc.tmean(critic_forward(critic, x, q))))
    bce = _mean_scalar(bce_terms)
    adv = _mean_scalar(adv_terms)
    loss = tc.add(bce, tc.mul(adv, lambda_adv))
    bce_value = _require_finite(float(bce.data), "cross-entropy loss")
    adv_value = _require_finite(float(adv.data), "adversarial loss")
    total_value = _require_finite(float(loss.data), "total generator loss")
    tc.backward(loss)
    # the backward pass also filled critic gradients; only the generator steps
    adam_step(generator.parameters, gen_state, gen_cfg)
    return WganStepReport(bce_value, adv_value, wasserstein, total_value, steps)
