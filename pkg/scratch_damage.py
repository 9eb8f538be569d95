"""Scratch: damage curve + gradient scale with distribution-aligned calibration."""
import pickle
import sys
import time
from collections import Counter
from pathlib import Path

import numpy as np
from scipy.stats import spearmanr
from sklearn.linear_model import LogisticRegression

from modsurgery.data import SynthSpec, split_dataset, synth_dataset
from modsurgery.network import Backbone, LossWeights, desk_config
from modsurgery.params import Modality, load_store, save_store
from modsurgery.surgery import (collect_activation_stats, compute_proxy,
                                compute_saliency, select_candidates)
from modsurgery.training import TrainConfig, train

config = desk_config()
spec = SynthSpec(num_samples=7680, missing_rate=0.25, seed=7,
                 feature_scale=1.3, private_noise=0.1)
dataset = synth_dataset(spec, config)
train_set, calib_set, test_set = split_dataset(dataset, 2048, 5000, 512, seed=13)
weights = LossWeights(alpha=2.0, beta=0.005, gamma=0.05, tau=0.2)

MODEL = Path("/tmp/probe_model.mbdp")
if MODEL.exists() and "--retrain" not in sys.argv:
    store = load_store(MODEL)
    print("loaded cached model")
else:
    t0 = time.time()
    store, log = train(train_set, config, TrainConfig(epochs=200, batch_size=128,
                                                      lr=5e-3, seed=3, weights=weights), init_seed=1)
    save_store(store, MODEL)
    print(f"trained {time.time()-t0:.0f}s; final re {log[-1].re:.3f} total {log[-1].total:.3f}")

net = Backbone(config)
calib = calib_set.batch()  # natural missing regime now
t0 = time.time()
sal = compute_saliency(net, store, calib, Modality.A)
stats = collect_activation_stats(net, store, calib)
proxy = compute_proxy(stats, store)
print(f"saliency+stats on 5000: {time.time()-t0:.1f}s")

pool = select_candidates(proxy, sal, 0.1, 0.05, 1.0, store.total_size).eligible
cand = select_candidates(proxy, sal, 0.1, 0.05, 0.03, store.total_size)
sel = cand.selected
w = store.to_vector()
comp = Counter(store.index_of(int(i)).entry_name.rsplit(".", 1)[0] for i in pool)
print(f"pool {len(pool)} comp {dict(comp)}; k {cand.k}; selected {len(sel)} "
      f"|w| sel {np.quantile(np.abs(w[sel]), [0.1, 0.5, 0.9]).round(4)}")

# gradient scale on an oracle eval subset (natural regime)
eval_batch = calib.take(np.arange(2048))
grad = net.gradient_vector(store, eval_batch, weights)
print("grad |g| on selected: ", np.quantile(np.abs(grad[sel]), [0.1, 0.5, 0.9]).round(5))

# oracle on selected
base = net.total_loss(store, eval_batch, weights)[1].total
t0 = time.time()
deltas = np.array([
    net.total_loss(store.apply_updates([(store.index_of(int(f)), 0.0)]), eval_batch, weights)[1].total - base
    for f in sel
])
print(f"loo {time.time()-t0:.0f}s")
proxies = proxy.values[sel]
print(f"spearman {spearmanr(proxies, deltas).statistic:.3f} "
      f"overdelete {np.mean(proxies > 1.1*deltas):.1%} neg {int((deltas<=0).sum())}/{len(sel)}")

# damage curve: zero ascending-proxy prefixes of the POOL
order = pool[np.lexsort((pool, proxy.values[pool]))]
test = test_set.batch()
keep = test_set.present[Modality.L] | test_set.present[Modality.V]
probe_set = test_set.take(np.flatnonzero(keep))
masked = probe_set.mask_out(Modality.A).batch()
labels = (probe_set.true_x[Modality.A] @ np.random.default_rng(99).normal(size=12) > 0).astype(int)
half = len(labels) // 2
task_pre = net.total_loss(store, test, weights)[1].task
re_pre = net.reconstruction_loss(net.leaves(store), Modality.A, test).item()


def probe_acc(z):
    clf = LogisticRegression(max_iter=3000).fit(z[:half], labels[:half])
    return clf.score(z[half:], labels[half:])


acc_pre = probe_acc(net.fused_matrix(store, masked))
print(f"pre: re {re_pre:.3f} task {task_pre:.4f} probe {acc_pre:.3f}")
for count in (150, 300, 476, 700, len(order)):
    count = min(count, len(order))
    post = store.apply_updates([(store.index_of(int(f)), 0.0) for f in order[:count]])
    re_post = net.reconstruction_loss(net.leaves(post), Modality.A, test).item()
    task_post = net.total_loss(post, test, weights)[1].task
    acc_post = probe_acc(net.fused_matrix(post, masked))
    print(f"zero {count:4d}: re {re_post:7.3f} ({(re_post-re_pre)/re_pre:+.1%}) "
          f"task {task_post:.4f} ({(task_post-task_pre)/task_pre:+.1%}) probe {acc_post:.3f}")
