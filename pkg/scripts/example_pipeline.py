"""Example pipeline on the bundled toy dataset: LCF, MF, and a one-layer model."""

import logging
from pathlib import Path

import numpy as np
import pfh.specrec as sr


logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")

# Load the toy interactions (60 users, 40 items in four communities)
path = Path(sr.extras.__file__).parent / "data" / "toy.tsv"
records = (line.split("\t") for line in path.read_text().splitlines())
interactions = sr.hypergraph.InteractionSet.from_records(records)
data = sr.evaluation.split(interactions, seed=0)

# Truncated eigenbases of the training hypergraphs
config = sr.training.TrainConfig(
    embed_dim=8,
    cutoff_ratio=0.1,
    batch_size=256,
    epochs=40,
    learning_rate=1e-2,
    eval_ks=(2, 5, 10),
)
L_user, L_item = sr.hypergraph.user_item_laplacians(data.train.matrix())
bases = sr.spectral.truncated_bases(L_user, L_item, config.cutoff_ratio)
print("Passband cut-off frequencies:", bases.passband)

# Training-free low-pass filter
R = data.train.matrix().toarray()
R_lcf = sr.spectral.lcf_filter(R, bases)

# Pretrain MF, then train the one-layer model from its embeddings
u0, v0 = sr.training.pretrain_mf(data, config)
mf = sr.model.ModelParams(u0, v0)
lcfn, history = sr.training.train(config, data, bases, (u0, v0))

sources = {
    "lcf": lambda users: R_lcf[users],
    "mf": sr.evaluation.ModelScorer(mf),
    "lcfn": sr.evaluation.ModelScorer(lcfn, bases),
}
for name, source in sources.items():
    report = sr.evaluation.evaluate(source, data, "test", ks=config.eval_ks)
    fields = ", ".join(f"{k}={v:.4f}" for k, v in report.metric_fields().items())
    print(f"{name:>5}: {fields}")

# Training curve
epochs = np.array([r.epoch for r in history])
metric = np.array([r.metric_value for r in history])
print(f"Best validation {config.selection_metric}: {metric.max():.4f} (epoch {epochs[metric.argmax()]})")
