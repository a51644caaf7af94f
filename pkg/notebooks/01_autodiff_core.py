# ---
# jupyter:
#   jupytext:
#     text_representation:
#       extension: .py
#       format_name: percent
#       format_version: '1.3'
# ---

# %% [markdown]
# # The autodiff core
#
# Everything in `gpsa_lab` runs on a small reverse-mode engine over float64
# numpy arrays. Each op records its parents and a backward rule; `backward`
# replays the recorded nodes in reverse.

# %%
import io

import numpy as np

from gpsa_lab import tensor as T
from gpsa_lab import gradcheck as G

# %% [markdown]
# A two-layer expression and its gradients.

# %%
rng = np.random.default_rng(0)
x = T.tensor(rng.normal(size=(4, 3)))
w = T.parameter(rng.normal(size=(3, 2)), name="w")
b = T.parameter(np.zeros(2), name="b")

loss = T.sum(T.gelu(T.matmul(x, w) + b))
T.backward(loss)
print("loss", loss.item())
print("dL/dw\n", w.grad)

# %% [markdown]
# The tape is the set of recorded tensors reachable from the loss, in the
# order they were created.

# %%
print([t._op or t.name for t in T.trace(loss)])

# %% [markdown]
# Finite differences agree with the analytic gradient.

# %%
with T.no_grad():
    num = G.numeric_grad(lambda: T.sum(T.gelu(T.matmul(x, w) + b)).item(), w.data, range(w.size))
print("relative error", G.rel_error(w.grad.reshape(-1), num))

# %% [markdown]
# The per-op suite checks every backward rule. Injecting a fault into one
# rule is caught and named.

# %%
clean = G.check_ops()
print(max(e.error for e in clean))
with T.inject_backward_fault("softmax_rows"):
    broken = G.check_ops()
print([e.name for e in broken if not e.ok])

# %% [markdown]
# Tensors serialize to a small binary format: magic, rank, extents, then
# little-endian doubles.

# %%
buf = io.BytesIO()
T.write_tensor(buf, w)
raw = buf.getvalue()
print(raw[:6], len(raw))
buf.seek(0)
print(np.array_equal(T.read_tensor(buf).data, w.data))
