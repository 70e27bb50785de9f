"""Train the three variants on a small MNIST subset and compare spike counts.

Needs the MNIST cache (run ``imsnn train`` once with network access).
Usage: python demos/spike_budget.py [n_train] [epochs]
"""

import sys

from imsnn import TrainConfig, init_network, train
from imsnn.dataio import load_dataset

n_train = int(sys.argv[1]) if len(sys.argv) > 1 else 2000
epochs = int(sys.argv[2]) if len(sys.argv) > 2 else 2
train_set = load_dataset("mnist", "train", limit=n_train)
test_set = load_dataset("mnist", "test", limit=500)

print(f"{'variant':>8} {'acc':>6} {'spikes/neuron':>14} {'suppressed':>10}")
for variant in ("imsnn", "snn", "imsnn_c"):
    net = init_network("784-128-10", seed=0, variant=variant)
    _, recs = train(net, train_set, TrainConfig(epochs=epochs, variant=variant), test_set)
    tr, te = recs[-2], recs[-1]
    print(f"{variant:>8} {te.kappa_a:6.2f} {te.kappa_n:14.4f} {tr.suppressed_fraction:10.3f}")
