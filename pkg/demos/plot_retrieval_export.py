"""
Checkpoints, retrieval and embedding export
===========================================

Train briefly, write a checkpoint, reload it, score retrieval in both the
feature and projection spaces, and export the test embeddings as CSV for
plotting elsewhere.
"""

import tempfile
from pathlib import Path

from maskcon import RunConfig, train
from maskcon import model as mdl
from maskcon.evaluation import FEATURES, PROJECTIONS, dz_report, evaluate, export_embeddings, read_embeddings

out = Path(tempfile.mkdtemp(prefix="maskcon-demo-"))
result = train(RunConfig(seed=1, epochs=10, eval_every=10), out_dir=out)

params = mdl.load_checkpoint(out / "checkpoint.mkcn")
for space in (FEATURES, PROJECTIONS):
    print(space, evaluate(params, result.test, ks=(1, 5), space=space).as_dict())

# Distance of each coarse relation kind to the fine-label relations.
for row in dz_report(params, result.test, tau_grid=(0.05, 0.1, 0.5)):
    print("d_z", row.kind, row.tau, round(row.value, 4))

path = export_embeddings(params, result.test, out / "test_embeddings.csv")
ids, coarse, fine, emb = read_embeddings(path)
print(f"wrote {path} with {emb.shape[0]} rows of dim {emb.shape[1]}")
