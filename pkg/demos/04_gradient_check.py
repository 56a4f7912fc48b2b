"""
Checking gradients against finite differences
=============================================

Every op in the autodiff core can be checked with ``grad_check``. The
same machinery runs over the whole pipeline with discrete choices
(top-K picks, binarised masks, matches) frozen by a decision trace.
"""

import numpy as np

from propvis import numcore as nc
from propvis.cli import gradcheck_model
from propvis.config import RunConfig

rng = np.random.default_rng(0)
w = nc.parameter(rng.normal(size=(4, 3)))
x = rng.normal(size=(5, 4))


def f():
    return nc.sum(nc.gelu(nc.matmul(nc.Tensor(x), w)))


rep = nc.grad_check(f, {"w": w})
print("small MLP: max relative error %.2e, passed %s" % (rep.max_error, rep.passed))

# the full model, two coordinates per tensor to keep it short
for group, rep in gradcheck_model(RunConfig(), coords=2).items():
    print(f"{group:8s} {rep.max_error:.2e} {'ok' if rep.passed else 'FAIL'}")
