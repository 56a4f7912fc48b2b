"""
Train briefly and follow the queries
====================================

A short training run on a handful of crossing clips, then an online
pass over a held-out clip with the per-query consistency report.
Expect a few minutes on one core; raise ``steps`` for sharper masks.
"""

import numpy as np

from propvis import training
from propvis.config import RunConfig

steps = 300
cfg = RunConfig(num_clips=8, seed=1)
clips = training.make_clips(cfg)
held_out = training.make_clips(cfg, seed=99, count=4)

trainer = training.Trainer.create(cfg)


def log(step, result):
    if step % 50 == 0:
        sup = "".join("1" if s else "0" for s in result.supervised)
        print(f"step {step:4d}  loss {result.loss:8.4f}  supervised {sup}")


trainer.run(clips, steps, log)

summary, reports = training.evaluate(trainer.model, held_out)
print({k: round(v, 3) if isinstance(v, float) else v for k, v in summary.items()})
for inst in reports[0].instances:
    print(f"instance {inst.instance}: anchor query {inst.anchor_query}  consistency {inst.consistency}  switches {inst.switches}")

masks, probs, track_ids = training.predict_clip(trainer.model, held_out[0][0])
print("track ids per query:", track_ids)
print("foreground probability per frame:\n", np.round([p[:, :-1].max(axis=1) for p in probs], 2))
