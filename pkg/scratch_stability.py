"""Scratch: grid stability probe for loss-weight defaults."""
import numpy as np

from modsurgery.data import SynthSpec, split_dataset, synth_dataset
from modsurgery.network import LossWeights, desk_config
from modsurgery.training import TrainConfig, TrainingDiverged, train

config = desk_config()
spec = SynthSpec(num_samples=1600, missing_rate=0.25, seed=7)
dataset = synth_dataset(spec, config)
train_set, _, _ = split_dataset(dataset, 832, 384, 384, seed=13)

for beta in (0.1, 0.05, 0.02):
    for tau in (0.1, 0.5):
        for lr in (1e-2, 5e-3):
            weights = LossWeights(alpha=1.0, beta=beta, gamma=0.1, tau=tau)
            tc = TrainConfig(epochs=40, batch_size=64, lr=lr, seed=3, weights=weights)
            try:
                store, log = train(train_set, config, tc, init_seed=1)
                print(f"beta={beta} tau={tau} lr={lr}: OK total {log[0].total:.3f}->{log[-1].total:.3f} "
                      f"or {log[-1].or_:.3f} inv {log[-1].inv:.4f} app {log[-1].app:.4f} re {log[-1].re:.3f} task {log[-1].task:.4f}")
            except TrainingDiverged as err:
                print(f"beta={beta} tau={tau} lr={lr}: DIVERGED at {err.epoch}")
