"""Scratch: evaluate the asymmetric-channel standard config across seeds."""
import sys
import time
from collections import Counter

import numpy as np
from scipy.stats import spearmanr
from sklearn.linear_model import LogisticRegression

from modsurgery.data import SynthSpec, split_dataset, synth_dataset
from modsurgery.network import Backbone, LossWeights, desk_config
from modsurgery.params import Modality
from modsurgery.surgery import (collect_activation_stats, compute_proxy,
                                compute_saliency, select_candidates)
from modsurgery.training import TrainConfig, train


def run(seed, fs=0.8, epochs=440, alpha=2.2, tail=0.3, missing=0.25):
    t0 = time.time()
    config = desk_config()
    spec = SynthSpec(num_samples=1792 + 5000 + 1024, missing_rate=missing, seed=7,
                     feature_scale=fs, private_noise=0.077 * fs)
    dataset = synth_dataset(spec, config)
    train_set, calib_set, test_set = split_dataset(dataset, 1792, 5000, 1024, seed=13)
    weights = LossWeights(alpha=alpha, beta=0.005, gamma=0.05, tau=0.2)
    tc = TrainConfig(epochs=epochs, batch_size=128, lr=2e-3, seed=seed,
                     average_tail=tail, weights=weights)
    store, log = train(train_set, config, tc, init_seed=seed + 100)
    net = Backbone(config)
    calib = calib_set.batch()
    sal = compute_saliency(net, store, calib, Modality.A)
    proxy = compute_proxy(collect_activation_stats(net, store, calib), store)
    cand = select_candidates(proxy, sal, 0.1, 0.05, 0.03, store.total_size)
    sel = cand.selected
    comp = Counter(store.index_of(int(i)).entry_name.rsplit(".", 1)[0] for i in sel)
    w = store.to_vector()
    train_batch = train_set.batch()
    base = net.block_loss(store, train_batch, weights)
    deltas = np.array([net.block_loss(store.apply_updates([(store.index_of(int(f)), 0.0)]),
                                      train_batch, weights) - base for f in sel])
    proxies = proxy.values[sel]
    rho = spearmanr(proxies, deltas).statistic
    od = float(np.mean(proxies > 1.1 * deltas))
    post = store.apply_updates([(store.index_of(int(f)), 0.0) for f in np.sort(sel)])
    test = test_set.batch()
    re_pre = net.reconstruction_loss(net.leaves(store), Modality.A, test).item()
    re_post = net.reconstruction_loss(net.leaves(post), Modality.A, test).item()
    task_pre = net.total_loss(store, test, weights)[1].task
    task_post = net.total_loss(post, test, weights)[1].task
    keep = test_set.present[Modality.L] | test_set.present[Modality.V]
    probe_set = test_set.take(np.flatnonzero(keep))
    masked = probe_set.mask_out(Modality.A).batch()
    labels = (probe_set.true_x[Modality.A] @ np.random.default_rng(99).normal(size=config.d_a) > 0).astype(int)
    half = len(labels) // 2

    def acc(z):
        clf = LogisticRegression(max_iter=3000).fit(z[:half], labels[:half])
        return clf.score(z[half:], labels[half:])

    a_pre, a_post = acc(net.fused_matrix(store, masked)), acc(net.fused_matrix(post, masked))
    print(f"seed={seed}: t={time.time()-t0:.0f}s |W|={store.total_size} re_end={log[-1].re:.2f} "
          f"pool={len(cand.eligible)} sel={len(sel)} {dict(comp)}")
    print(f"   rho={rho:.3f} OD={od:.2%} neg={int((deltas<=0).sum())} "
          f"|w|={np.quantile(np.abs(w[sel]), [0.1, 0.5, 0.9]).round(3)}")
    print(f"   re {re_pre:.3f}->{re_post:.3f} ({(re_post-re_pre)/re_pre:+.1%}) "
          f"task {task_pre:.4f}->{task_post:.4f} ({(task_post-task_pre)/task_pre:+.1%}) "
          f"probe {a_pre:.3f}->{a_post:.3f} ({a_post-a_pre:+.4f})", flush=True)


if __name__ == "__main__":
    for seed in [int(s) for s in sys.argv[1:]] or [3]:
        run(seed)
