"""Scratch: does block-structured evaluation collapse the oracle gradients?"""
import time

import numpy as np
from scipy.stats import spearmanr

from modsurgery.data import SynthSpec, split_dataset, synth_dataset
from modsurgery.network import Backbone, LossWeights, desk_config
from modsurgery.params import Modality, load_store
from modsurgery.surgery import (collect_activation_stats, compute_proxy,
                                compute_saliency, select_candidates)

config = desk_config()
spec = SynthSpec(num_samples=7680, missing_rate=0.25, seed=7,
                 feature_scale=1.3, private_noise=0.1)
dataset = synth_dataset(spec, config)
train_set, calib_set, test_set = split_dataset(dataset, 2048, 5000, 512, seed=13)
weights = LossWeights(alpha=2.0, beta=0.005, gamma=0.05, tau=0.2)
store = load_store("/tmp/probe_model.mbdp")
net = Backbone(config)
calib = calib_set.batch()

sal = compute_saliency(net, store, calib, Modality.A)
proxy = compute_proxy(collect_activation_stats(net, store, calib), store)
cand = select_candidates(proxy, sal, 0.1, 0.05, 0.03, store.total_size)
sel = cand.selected

eval_batch = calib.take(np.arange(2048))
# block-mean gradient = mean of per-block gradients
grads = []
for start in range(0, 2048, 128):
    rows = np.arange(start, start + 128)
    grads.append(net.gradient_vector(store, eval_batch.take(rows), weights))
gblock = np.mean(grads, axis=0)
print("block |g| on selected:", np.quantile(np.abs(gblock[sel]), [0.1, 0.5, 0.9]).round(5))

base = net.block_loss(store, eval_batch, weights)
t0 = time.time()
deltas = np.array([
    net.block_loss(store.apply_updates([(store.index_of(int(f)), 0.0)]), eval_batch, weights) - base
    for f in sel
])
print(f"loo(block) {time.time()-t0:.0f}s for {len(sel)}")
proxies = proxy.values[sel]
print(f"spearman {spearmanr(proxies, deltas).statistic:.3f} "
      f"overdelete {np.mean(proxies > 1.1*deltas):.1%} neg {int((deltas<=0).sum())}/{len(sel)}")
w = store.to_vector()
print("selected |w| quantiles:", np.quantile(np.abs(w[sel]), [0.1, 0.5, 0.9]).round(4))
