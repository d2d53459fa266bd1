"""Adversarial regularization tour
================================

Train a small net with the weight-clipped critic for a handful of steps.
The Wasserstein estimate first rises while the critic learns to separate
predictions from targets, then falls as the generator catches up; over a
long run the trend is downward.
"""

import numpy as np

from voxelseg.adversarial import CriticConfig, build_critic, wgan_train_step
from voxelseg.models import build_model, variant_config
from voxelseg.optim import AdamState, OptimConfig
from voxelseg.training import volume_to_tensor
from voxelseg.volume_io import PhantomSpec, generate_phantom

dims = (16, 16, 9)
batch = []
for seed in (0, 1):
    image, mask = generate_phantom(PhantomSpec(seed=seed, dims=dims))
    batch.append((volume_to_tensor(image), volume_to_tensor(mask)))

model = build_model(variant_config("M4", input_shape=dims, base_channels=4), seed=0)
critic_cfg = CriticConfig()
critic = build_critic(critic_cfg, seed=1)
gen_opt = (AdamState(model.parameters), OptimConfig(learning_rate=1e-3))
critic_opt = (AdamState(critic.parameters), OptimConfig(learning_rate=critic_cfg.learning_rate))

for step in range(1, 61):
    report = wgan_train_step(model, critic, batch, 0.01, gen_opt, critic_opt)
    clipped = max(float(np.abs(t.data).max()) for t in critic.parameters.values())
    if step % 10 == 0:
        print(f"step {step:3d}  bce {report.bce:.4f}  wasserstein {report.wasserstein:.4f}  "
              f"max |critic weight| {clipped:.4f} (clip {critic_cfg.clip_value})")
