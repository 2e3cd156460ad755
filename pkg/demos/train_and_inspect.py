"""Small end-to-end run: synthesise, train, score, then look inside one pair.

Uses a shrunken network so it finishes in a few minutes on one core.  The
full-size settings are the RunConfig defaults.
"""

import tempfile
from pathlib import Path

import numpy as np

from kpmatch import evalkit
from kpmatch.config import RunConfig
from kpmatch.model import forward_pair
from kpmatch.trainkit import Dataset, heldout_accuracy, split_identities, synth_dataset, train

work = Path(tempfile.mkdtemp(prefix="kpm-demo-"))
cfg = RunConfig(dataset=str(work / "ds"), out=str(work / "run"), ids=60, per_id=6, seed=1,
                channels=(8, 16, 16), rsa_hidden=8, epochs=20, steps_per_epoch=20, drop_epoch=15,
                val_ids=10, val_pairs=40)

synth_dataset(cfg.ids, cfg.per_id, cfg.seed, cfg.dataset)
ds = Dataset.load(cfg.dataset)
result = train(cfg, ds, log=print)

print("held-out pair accuracy:", heldout_accuracy(result.params, cfg, ds, pairs=200))

# %% retrieval on the held-out identities
_, held_out = split_identities(ds.ids, cfg.val_ids)
q, g = evalkit.query_gallery_split(ds.ids, held_out)
imgs = ds.images()
scores = evalkit.score_all(result.params, cfg.model_config(), imgs[q], imgs[g])
for name, value in evalkit.metrics_rows(evalkit.rank(scores, ds.ids[q], ds.ids[g])):
    print(f"{name:6} {value:.3f}")

# %% one pair, with matching diagnostics
v = forward_pair(imgs[q[0]], imgs[g[0]], result.params, cfg.model_config(), diagnostics=True)
print("p(same) =", round(v.probability, 4))
for s, d in sorted(v.diagnostics.items()):
    h, w = d["attention"].shape
    print(f"scale {s}: {h}x{w} grid, attention peak at {tuple(int(i) for i in np.unravel_index(d['attention'].argmax(), (h, w)))}, "
          f"mean match entropy {d['entropy'].mean():.2f} nats (uniform would be {np.log(h * w):.2f})")
