"""
Weight and temperature sweep
============================

Recall@1 over a grid of mixing weights ``w`` and relation temperatures
``tau``. The ``w = 0`` row is pure instance discrimination and does not
depend on ``tau``; ``tau = inf`` reproduces Grafit.
"""

import numpy as np

from maskcon import RunConfig, sweep
from maskcon.relations import INFINITY
from maskcon.training import format_tau, load_datasets

cfg = RunConfig(seed=0, epochs=30, eval_every=30)
w_list = [0.0, 0.5, 1.0]
tau_list = [0.05, 0.1, INFINITY]
results = sweep(cfg, w_list, tau_list, datasets=load_datasets(cfg))

table = np.array([rep[1] for _, _, rep in results]).reshape(len(w_list), len(tau_list))
print("w \\ tau " + " ".join(f"{format_tau(t):>7}" for t in tau_list))
for w, row in zip(w_list, table):
    print(f"{w:<7} " + " ".join(f"{v:7.3f}" for v in row))
