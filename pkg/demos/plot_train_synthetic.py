"""
Training on a Gaussian hierarchy
================================

Four coarse classes, each split into three fine classes. Training sees only
the coarse labels; retrieval is scored on the fine ones. Compare MaskCon to
the supervised and self-supervised contrastive baselines.
"""

from maskcon import RunConfig, train
from maskcon.training import load_datasets

cfg = RunConfig(seed=0, epochs=30, eval_every=10)
data = load_datasets(cfg)
print(f"{len(data[0])} training and {len(data[1])} test vectors of dim {data[0].input_dim}")

for kind in ("selfcon", "supcon", "maskcon"):
    result = train(cfg.replace(objective=kind), datasets=data)
    last = result.metrics[-1]
    print(f"{kind:8s} recall@1 {last.recall_1:.3f}  recall@5 {last.recall_5:.3f}  "
          f"d_z sup {last.dz_sup:.3f}  d_z mask {last.dz_mask:.3f}")

# The metrics rows of the last run trace the loss, the learning-rate
# schedule and the periodic evaluations.
for row in result.metrics[::10]:
    print(row.epoch, round(row.loss, 4), round(row.lr, 5), row.recall_1)
