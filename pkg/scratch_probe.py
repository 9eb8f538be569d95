"""Scratch: probe surgery + oracle feasibility at desk scale."""
import time
from collections import Counter

import numpy as np
from scipy.stats import spearmanr

from modsurgery.data import SynthSpec, fully_observed, split_dataset, synth_dataset
from modsurgery.network import Backbone, LossWeights, desk_config
from modsurgery.params import Modality
from modsurgery.surgery import (collect_activation_stats, compute_proxy,
                                compute_saliency, select_candidates)
from modsurgery.training import TrainConfig, train

t0 = time.time()
config = desk_config()
spec = SynthSpec(num_samples=1600, missing_rate=0.25, seed=7)
dataset = synth_dataset(spec, config)
train_set, calib_set, test_set = split_dataset(dataset, 832, 384, 384, seed=13)
calib_set = fully_observed(calib_set)
weights = LossWeights(alpha=1.0, beta=0.02, gamma=0.1, tau=0.1)
tc = TrainConfig(epochs=60, batch_size=64, seed=3, weights=weights)

store, log = train(train_set, config, tc, init_seed=1)
print(f"train {time.time()-t0:.1f}s |W|={store.total_size} total {log[0].total:.2f}->{log[-1].total:.2f} app {log[-1].app:.4f}")

net = Backbone(config)
calib = calib_set.batch()
stats = collect_activation_stats(net, store, calib)
proxy = compute_proxy(stats, store)
sal = compute_saliency(net, store, calib, Modality.A)
pos = sal.values[sal.values > 0]
print("saliency>0 count:", pos.size, "quantiles:", np.quantile(pos, [0.5, 0.9, 0.99]))
print("n saliency >= 0.1:", int((sal.values >= 0.1).sum()))
cand = select_candidates(proxy, sal, 0.1, 0.05, 0.03, store.total_size)
print("eligible:", len(cand.eligible), "selected:", len(cand.selected), "k:", cand.k)
names = Counter(store.index_of(int(i)).entry_name for i in cand.selected)
print("selected by entry:", dict(names))

# crude LOO oracle on the selected candidates against the calib split
t1 = time.time()
base = net.total_loss(store, calib, weights)[1].total
deltas = []
proxies = []
for flat in cand.selected:
    gi = store.index_of(int(flat))
    mod = store.apply_updates([(gi, 0.0)])
    deltas.append(net.total_loss(mod, calib, weights)[1].total - base)
    proxies.append(proxy.values[int(flat)])
deltas = np.array(deltas)
proxies = np.array(proxies)
print(f"loo time {time.time()-t1:.1f}s")
rho = spearmanr(proxies, deltas).statistic
over = np.mean(proxies > 1.1 * deltas)
print(f"Spearman {rho:.3f}  over-delete(0.1) {over:.3%}")
print("delta quantiles:", np.quantile(deltas, [0, 0.05, 0.5, 0.95, 1.0]))
print("proxy/delta ratio quantiles:", np.quantile(proxies / np.maximum(deltas, 1e-18), [0.05, 0.5, 0.95]))
print("negative deltas:", int((deltas <= 0).sum()))

# forgetting direction: post-surgery recon loss on test split
from modsurgery.params import GlobalIndex
sel_idx = [store.index_of(int(i)) for i in np.sort(cand.selected)]
post = store.apply_updates([(gi, 0.0) for gi in sel_idx])
test = test_set.batch()
params_pre = net.leaves(store)
params_post = net.leaves(post)
re_pre = net.reconstruction_loss(params_pre, Modality.A, test).item()
re_post = net.reconstruction_loss(params_post, Modality.A, test).item()
task_pre = net.total_loss(store, test, weights)[1].task
task_post = net.total_loss(post, test, weights)[1].task
print(f"test re_A pre {re_pre:.4f} post {re_post:.4f}  (increase {re_post-re_pre:+.4f})")
print(f"test task pre {task_pre:.4f} post {task_post:.4f}  (rel {100*(task_post-task_pre)/task_pre:+.2f}%)")
print("total", time.time() - t0)
