"""Scratch: loss-term trajectories under candidate default weights."""
import sys
import time

import numpy as np

from modsurgery.data import SynthSpec, fully_observed, split_dataset, synth_dataset
from modsurgery.network import Backbone, LossWeights, desk_config
from modsurgery.params import Modality
from modsurgery.training import TrainConfig, train

alpha, beta, gamma, tau = (float(x) for x in sys.argv[1:5])
lr = float(sys.argv[5])
epochs = int(sys.argv[6])

config = desk_config()
spec = SynthSpec(num_samples=4608, missing_rate=0.25, seed=7,
                 feature_scale=1.3, private_noise=0.1)
dataset = synth_dataset(spec, config)
train_set, calib_set, test_set = split_dataset(dataset, 2048, 2048, 512, seed=13)
weights = LossWeights(alpha=alpha, beta=beta, gamma=gamma, tau=tau)
tc = TrainConfig(epochs=epochs, batch_size=128, lr=lr, seed=3, weights=weights)

t0 = time.time()
store, log = train(train_set, config, tc, init_seed=1)
print(f"trained in {time.time()-t0:.0f}s")
for i in list(range(0, len(log), max(1, len(log) // 8))) + [len(log) - 1]:
    b = log[i]
    print(f"ep {i:4d} total {b.total:10.3f} task {b.task:7.4f} re {b.re:8.3f} "
          f"or {b.or_:9.3f} inv {b.inv:8.3f} app {b.app:7.4f} redec {b.re_decomp:8.3f} con {b.con:7.3f}")

net = Backbone(config)
test = test_set.batch()
calib = fully_observed(calib_set).batch()
p = net.leaves(store)
for m in (Modality.A,):
    re_tr = net.reconstruction_loss(p, m, train_set.batch()).item()
    re_te = net.reconstruction_loss(p, m, test).item()
    re_cal = net.reconstruction_loss(p, m, calib).item()
    d = config.dim(m)
    print(f"re_{m.value}: train {re_tr:.3f} test {re_te:.3f} calib {re_cal:.3f} "
          f"(per-coord: {re_tr/d:.4f}/{re_te/d:.4f}/{re_cal/d:.4f}, zero-fill ~{1.3**2+0.01:.2f})")
print("task test:", net.total_loss(store, test, weights)[1].task, " var(y)~1.0")
