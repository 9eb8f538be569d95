"""Scratch: tune the standard desk config for healthy proxy-oracle behavior."""
import sys
import time
from collections import Counter

import numpy as np
from scipy.stats import spearmanr
from sklearn.linear_model import LogisticRegression

from modsurgery.data import SynthSpec, fully_observed, split_dataset, synth_dataset
from modsurgery.network import Backbone, LossWeights, desk_config
from modsurgery.params import Modality
from modsurgery.surgery import (collect_activation_stats, compute_proxy,
                                compute_saliency, select_candidates)
from modsurgery.training import TrainConfig, train


def run(alpha, feature_scale, private_noise, epochs, lr, batch, n_train, n_calib,
        seed=3, label="", beta=0.005, gamma=0.05, tau=0.2):
    t0 = time.time()
    config = desk_config()
    spec = SynthSpec(num_samples=n_train + n_calib + 512, missing_rate=0.25, seed=7,
                     feature_scale=feature_scale, private_noise=private_noise)
    dataset = synth_dataset(spec, config)
    train_set, calib_set, test_set = split_dataset(dataset, n_train, n_calib, 512, seed=13)
    calib_set = fully_observed(calib_set)
    weights = LossWeights(alpha=alpha, beta=beta, gamma=gamma, tau=tau)
    tc = TrainConfig(epochs=epochs, batch_size=batch, lr=lr, seed=seed, weights=weights)
    try:
        store, log = train(train_set, config, tc, init_seed=1)
    except Exception as err:
        print(f"[{label}] diverged: {err}")
        return
    net = Backbone(config)
    calib = calib_set.batch()
    stats = collect_activation_stats(net, store, calib)
    proxy = compute_proxy(stats, store)
    sal = compute_saliency(net, store, calib, Modality.A)
    n_sal = int((sal.values >= 0.1).sum())
    cand = select_candidates(proxy, sal, 0.1, 0.05, 0.03, store.total_size)
    sel = cand.selected
    w = store.to_vector()
    base = net.total_loss(store, calib, weights)[1].total
    deltas, proxies = [], []
    for flat in sel:
        gi = store.index_of(int(flat))
        deltas.append(net.total_loss(store.apply_updates([(gi, 0.0)]), calib, weights)[1].total - base)
        proxies.append(proxy.values[int(flat)])
    deltas, proxies = np.array(deltas), np.array(proxies)
    rho = spearmanr(proxies, deltas).statistic if len(sel) > 2 else np.nan
    over = float(np.mean(proxies > 1.1 * deltas)) if len(sel) else np.nan

    # forgetting + probe + task on the test split
    post = store.apply_updates([(store.index_of(int(i)), 0.0) for i in np.sort(sel)])
    test = test_set.batch()
    p_pre, p_post = net.leaves(store), net.leaves(post)
    re_pre = net.reconstruction_loss(p_pre, Modality.A, test).item()
    re_post = net.reconstruction_loss(p_post, Modality.A, test).item()
    task_pre = net.total_loss(store, test, weights)[1].task
    task_post = net.total_loss(post, test, weights)[1].task

    # probe: logistic on fused Z of A-masked test samples, label = sign of proj of true x_A
    keep = test_set.present[Modality.L] | test_set.present[Modality.V]
    probe_set = test_set.take(np.flatnonzero(keep))
    masked = probe_set.mask_out(Modality.A)
    pb = masked.batch()
    rngp = np.random.default_rng(99)
    proj = rngp.normal(size=probe_set.true_x[Modality.A].shape[1])
    labels = (probe_set.true_x[Modality.A] @ proj > 0).astype(int)
    z_pre = net.fused_matrix(store, pb)
    z_post = net.fused_matrix(post, pb)
    half = len(labels) // 2
    def probe_acc(z):
        clf = LogisticRegression(max_iter=2000).fit(z[:half], labels[:half])
        return clf.score(z[half:], labels[half:])
    acc_pre, acc_post = probe_acc(z_pre), probe_acc(z_post)

    names = Counter(store.index_of(int(i)).entry_name.rsplit(".", 1)[0] for i in sel)
    print(f"[{label}] t={time.time()-t0:.0f}s total {log[0].total:.1f}->{log[-1].total:.2f} "
          f"re_end {log[-1].re:.2f} | sal>=.1 {n_sal} sel {len(sel)} {dict(names)}")
    print(f"    spearman {rho:.3f} overdelete {over:.1%} neg {int((deltas<=0).sum())} "
          f"| selected |w|: {np.quantile(np.abs(w[sel]), [0.1, 0.5, 0.9]).round(4)}")
    print(f"    test re_A {re_pre:.3f}->{re_post:.3f} ({(re_post-re_pre):+.3f}) "
          f"task {task_pre:.3f}->{task_post:.3f} ({100*(task_post-task_pre)/task_pre:+.1f}%) "
          f"probe {acc_pre:.3f}->{acc_post:.3f}")


if __name__ == "__main__":
    which = sys.argv[1] if len(sys.argv) > 1 else "a"
    if which == "a":
        run(2.0, 2.2, 0.1, 200, 5e-3, 128, 2048, 5000, label="sat-fs2.2")
    elif which == "b":
        run(2.0, 2.6, 0.1, 200, 5e-3, 128, 2048, 5000, label="sat-fs2.6")
    elif which == "c":
        run(2.0, 1.8, 0.1, 200, 5e-3, 128, 2048, 5000, label="sat-fs1.8")
