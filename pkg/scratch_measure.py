"""Scratch: exact per-candidate mechanics on a trained model."""
import time

import numpy as np

from modsurgery.data import SynthSpec, fully_observed, split_dataset, synth_dataset
from modsurgery.network import Backbone, LossWeights, desk_config
from modsurgery.params import Modality
from modsurgery.surgery import (collect_activation_stats, compute_proxy,
                                compute_saliency, select_candidates)
from modsurgery.training import TrainConfig, train

config = desk_config()
spec = SynthSpec(num_samples=4608, missing_rate=0.25, seed=7,
                 feature_scale=1.3, private_noise=0.1)
dataset = synth_dataset(spec, config)
train_set, calib_set, test_set = split_dataset(dataset, 2048, 2048, 512, seed=13)
calib_full = fully_observed(calib_set)
weights = LossWeights(alpha=2.0, beta=0.005, gamma=0.05, tau=0.2)
tc = TrainConfig(epochs=200, batch_size=128, lr=5e-3, seed=3, weights=weights)

t0 = time.time()
store, log = train(train_set, config, tc, init_seed=1)
print(f"trained {time.time()-t0:.0f}s; final re {log[-1].re:.3f}")

net = Backbone(config)
calib = calib_full.batch().take(np.arange(1024))  # oracle eval subset
sal = compute_saliency(net, store, calib, Modality.A)
stats = collect_activation_stats(net, store, calib)
proxy = compute_proxy(stats, store)

# saliency and |w| structure per entry group
w = store.to_vector()
groups = {}
for entry in store:
    start = store.flat_of(store.index_of(0).__class__(entry.name, 0))
    flats = np.arange(start, start + entry.size)
    groups[entry.name] = flats
for name in ("gen.A.hid.W", "gen.A.hid.b", "gen.A.out.W", "gen.A.out.b", "prop.A"):
    f = groups[name]
    s = sal.values[f]
    print(f"{name:14s} n={len(f):4d} s-quant {np.quantile(s, [0.5, 0.9, 0.99]).round(3)} "
          f"n(s>=.1)={int((s >= 0.1).sum()):4d} |w|-of-pool "
          f"{np.quantile(np.abs(w[f[s >= 0.1]]), [0.1, 0.5, 0.9]).round(4) if (s >= 0.1).any() else '-'}")

cand = select_candidates(proxy, sal, 0.1, 0.05, 0.03, store.total_size)
print("pool", len(cand.eligible), "selected", len(cand.selected), "k", cand.k)

# exact decomposition for a sample of selected coords
from collections import Counter
sel = cand.selected
rng = np.random.default_rng(0)
sample = rng.choice(sel, size=min(120, len(sel)), replace=False)

grad = net.gradient_vector(store, calib, weights)
base = net.total_loss(store, calib, weights)[1].total


def loss_at(flat, value):
    gi = store.index_of(int(flat))
    return net.total_loss(store.apply_updates([(gi, value)]), calib, weights)[1].total


rows = []
h = 1e-3
for flat in sample:
    flat = int(flat)
    wq = w[flat]
    g = grad[flat]
    lp, lm = loss_at(flat, wq + h), loss_at(flat, wq - h)
    H = (lp + lm - 2 * base) / h ** 2
    delta = loss_at(flat, 0.0) - base
    chi = proxy.chi[flat]
    quad = 0.5 * H * wq ** 2
    lin = -g * wq
    name = store.index_of(flat).entry_name
    rows.append((name, wq, g, H, chi, delta, quad, lin))

hcurv = np.array([r[3] for r in rows])
chis = np.array([r[4] for r in rows])
deltas = np.array([r[5] for r in rows])
quads = np.array([r[6] for r in rows])
lins = np.array([r[7] for r in rows])
proxies = np.array([proxy.values[int(f)] for f in sample])
names = [r[0] for r in rows]

print("H(1-chi) quantiles:", np.quantile(hcurv * (1 - chis), [0.05, 0.25, 0.5, 0.75, 0.95]).round(3))
print("share H(1-chi) >= 0.909:", float(np.mean(hcurv * (1 - chis) >= 1 / 1.1)).__round__(3))
print("quad/|lin| quantiles:", np.quantile(np.abs(quads) / np.maximum(np.abs(lins), 1e-18), [0.1, 0.5, 0.9]).round(2))
print("overdelete(sample):", float(np.mean(proxies > 1.1 * deltas)).__round__(3),
      " neg deltas:", int((deltas <= 0).sum()), "/", len(deltas))
per = Counter()
bad = Counter()
for name, d, p in zip(names, deltas, proxies):
    per[name.rsplit(".", 1)[0]] += 1
    if p > 1.1 * d:
        bad[name.rsplit(".", 1)[0]] += 1
print("sample composition:", dict(per), " overdelete by group:", dict(bad))
