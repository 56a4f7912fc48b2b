"""
One tracker step by hand
========================

Walk a single frame through the model: encoder tokens, top-K local
queries, alignment of the propagated queries, and the mask decoder.
"""

import numpy as np

from propvis import aligner, segmenter as sg, synthvid as sv
from propvis.config import RunConfig
from propvis.tracker import Model, init_state, step

cfg = RunConfig()
model = Model.create(cfg)
print("parameters:", model.num_parameters(), " aligner share: %.3f" % (model.num_parameters("aligner.") / model.num_parameters()))

frames, gt = sv.scenario("crossing", seed=1)
feats = sg.encode_frame(frames[0], model.seg, cfg)
print("fine tokens:", feats.tokens.shape, " pixel embedding:", feats.pixel_embed.shape)

q_local, idx = sg.select_local_queries(feats, model.seg["class_head"], cfg.num_local)
print("local queries taken from tokens", np.sort(idx))

state = init_state(model)
q = aligner.align(state.q_global, q_local, state.g_pos, model.ali["local_pos"], model.ali, cfg.heads)
print("aligned queries:", q.shape)

# the full step does the same and also decodes masks
pred, state = step(init_state(model), frames[0], model)
print("mask logits", pred.mask_logits.shape, " boxes of the first two queries\n", np.round(pred.boxes[:2], 3))
