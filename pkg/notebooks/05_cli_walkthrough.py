# ---
# jupyter:
#   jupytext:
#     text_representation:
#       extension: .py
#       format_name: percent
#       format_version: '1.3'
# ---

# %% [markdown]
# # The `gpsa-lab` command line
#
# Every subcommand takes a JSON config, repeatable `--set key=value`
# overrides and an output directory. Each run writes `config.resolved.json`
# next to its outputs, and that file reproduces the run when passed back in.
#
# Here the commands run in-process through `cli.main`; the console script
# behaves the same.

# %%
import json
import tempfile
from pathlib import Path

from gpsa_lab import cli
from gpsa_lab import metrics as MT

work = Path(tempfile.mkdtemp())
cfg = {
    "model": {"image_size": 8, "patch_size": 2, "num_gpsa_layers": 1, "num_sa_layers": 1,
              "num_heads": 4, "head_dim": 4, "num_classes": 3},
    "train": {"epochs": 10, "warmup_epochs": 1, "batch_size": 16, "base_lr": 3e-3},
    "data": {"source": "synthetic", "num_classes": 3, "per_class": 60, "test_per_class": 20},
}
(work / "micro.json").write_text(json.dumps(cfg, indent=1))


def gpsa_lab(*argv):
    code = cli.main([str(a) for a in argv])
    print("exit", code)
    return code


# %% [markdown]
# ## train

# %%
gpsa_lab("train", "--config", work / "micro.json", "--out", work / "run")
print(sorted(p.name for p in (work / "run").iterdir()))
print((work / "run" / "runlog.csv").read_text())

# %% [markdown]
# ## eval, with and without masks

# %%
for flags in ([], ["--mask-pos-embed"], ["--mask-attention", "content"], ["--mask-attention", "position"]):
    gpsa_lab("eval", "--config", work / "micro.json", "--checkpoint", work / "run" / "checkpoint",
             *flags, "--out", work / "eval")

# %% [markdown]
# ## inspect
#
# Writes per-head nonlocality, gate values and one PGM attention map per
# head for the chosen query patch.

# %%
gpsa_lab("inspect", "--config", work / "micro.json", "--checkpoint", work / "run" / "checkpoint",
         "--layer", 0, "--out", work / "inspect")
print((work / "inspect" / "gating.csv").read_text())
px = MT.read_pgm(next((work / "inspect").glob("*.pgm")))
print(px)

# %% [markdown]
# ## ablate

# %%
gpsa_lab("ablate", "--config", work / "micro.json", "--set", "train.epochs=6", "--out", work / "ablate")
print((work / "ablate" / "ablation.csv").read_text())

# %% [markdown]
# ## gradcheck
#
# Finite differences against the tape for every op and every parameter role
# of a micro model.

# %%
gpsa_lab("gradcheck", "--out", work / "grad")
print((work / "grad" / "gradcheck.txt").read_text().splitlines()[-1])

# %% [markdown]
# ## Errors and exit codes
#
# 2 for config and usage problems, 3 for a checkpoint that does not fit the
# config, 1 for numeric failure.

# %%
gpsa_lab("train", "--config", work / "micro.json", "--set", "foo.bar=1", "--out", work / "x")
gpsa_lab("inspect", "--config", work / "micro.json", "--set", "model.image_size=16",
         "--checkpoint", work / "run" / "checkpoint", "--out", work / "x")
gpsa_lab("train", "--config", work / "micro.json", "--set", "train.base_lr=1e300", "--out", work / "x")
