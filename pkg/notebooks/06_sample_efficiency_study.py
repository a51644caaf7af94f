# ---
# jupyter:
#   jupytext:
#     text_representation:
#       extension: .py
#       format_name: percent
#       format_version: '1.3'
# ---

# %% [markdown]
# # Sample efficiency study
#
# The study compares three variants trained from the same seeds:
#
# * `convit`: GPSA layers with convolutional initialization,
# * `baseline`: the same depth with plain self-attention only,
# * `random_gpsa`: GPSA layers without the convolutional initialization.
#
# It trains on a class-balanced subsample and on the full set, with the
# epoch count stretched by `1/f` so every run sees the same number of
# optimizer steps. Runs are cached under a directory, so reruns are cheap.
#
# With CIFAR-10 available (`GPSA_DATA_ROOT` pointing at the binary batches)
# the study runs on it. Otherwise it falls back to synthetic blobs, and the
# numbers below are a smoke-scale stand-in, not a CIFAR result.

# %%
import os
import tempfile
from pathlib import Path

import numpy as np

from gpsa_lab import data as D
from gpsa_lab import model as M
from gpsa_lab import studies as S
from gpsa_lab.errors import ConfigError
from gpsa_lab.trainer import TrainConfig

try:
    train_set, test_set = D.load_cifar10()
    source = "CIFAR-10"
    mc = M.ModelConfig()
    tc = TrainConfig(epochs=20, warmup_epochs=2)
    fractions = (0.1, 1.0)
except ConfigError as exc:
    print("falling back to synthetic blobs:", exc)
    source = "synthetic blobs"
    train_set = D.synthetic_blobs(num_classes=4, per_class=50, image_size=8, seed=0, noise=0.6)
    test_set = D.synthetic_blobs(num_classes=4, per_class=25, image_size=8, seed=1, noise=0.6,
                                 split="test", stats=train_set.stats)
    mc = M.ModelConfig(image_size=8, patch_size=2, num_gpsa_layers=2, num_sa_layers=1, num_heads=4,
                       head_dim=8, num_classes=4)
    tc = TrainConfig(epochs=10, warmup_epochs=1, batch_size=32, base_lr=3e-3)
    fractions = (0.2, 1.0)

study = S.StudyConfig(model=mc, train=tc, fractions=fractions, seeds=(0, 1, 2),
                      runs=tuple((v, f) for f in fractions for v in ("convit", "baseline"))
                      + (("random_gpsa", 1.0),))
root = Path(os.environ.get("GPSA_STUDY_DIR") or tempfile.mkdtemp()) / source.replace(" ", "_")
print(source, "-", len(study.plan()), "runs under", root)
runs = S.run_study(study, train_set, test_set, root, progress=None)

# %% [markdown]
# ## Final accuracy by subsample fraction

# %%
for f in fractions:
    for v in ("convit", "baseline"):
        accs = [S.final_top1(runs[(v, f, s)]) for s in study.seeds]
        print(f"f={f:<4g} {v:9s} top1 {np.mean(accs):6.2f} +- {np.std(accs):5.2f}   {np.round(accs, 2)}")
accs = [S.final_top1(runs[("random_gpsa", 1.0, s)]) for s in study.seeds]
print(f"f=1    random_gpsa top1 {np.mean(accs):6.2f}")

# %% [markdown]
# ## Head start
#
# Accuracy after 20% of the step budget.

# %%
for v in ("convit", "baseline", "random_gpsa"):
    print(v, [round(S.top1_at(runs[(v, 1.0, s)], 0.2), 2) for s in study.seeds])

# %% [markdown]
# ## Gate and locality dynamics
#
# Mean gate and mean GPSA-layer nonlocality at initialization and after
# training, for the full-data convit runs.

# %%
probe = test_set.images[:32]
for s in study.seeds:
    g0, d0 = S.init_dynamics(mc, s, probe)
    g1, d1 = S.final_dynamics(runs[("convit", 1.0, s)], mc.num_gpsa_layers)
    print(f"seed {s}: gate {g0:.3f} -> {g1:.3f}   D_loc {d0:.3f} -> {d1:.3f}")

# %% [markdown]
# ## Masking after training

# %%
for v in ("convit", "baseline"):
    print(v, S.masked_accuracies(runs[(v, 1.0, 0)].model(), test_set))

# %% [markdown]
# On blobs the convolutional initialization carries most of the result: the
# plain self-attention baseline and the randomly initialised GPSA model stay
# near chance in this short budget, while conv-initialised runs learn, with
# a wide spread across seeds. Masking the positional pathway of the trained
# ConViT collapses it to chance, which says the GPSA layers are working
# mainly as convolutions here.
