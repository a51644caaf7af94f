"""Multi-run experiment protocols: sample efficiency, head start, masking.

Runs are cached on disk (checkpoint + run log per run) so that the
comparisons can be recomputed without retraining.
"""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import data as D
from . import model as M
from . import tensor as T
from .metrics import nonlocality_report
from .trainer import RunLog, TrainConfig, evaluate, mean_gates, train

VARIANTS = ("convit", "baseline", "random_gpsa")


def variant_config(base: M.ModelConfig, variant: str) -> M.ModelConfig:
    """``baseline`` swaps every GPSA block for an SA block (same depth);
    ``random_gpsa`` keeps GPSA but skips the convolutional initialization."""
    if variant == "convit":
        return base
    if variant == "baseline":
        return dataclasses.replace(base, num_gpsa_layers=0, conv_init=False, strict_conv_init=False,
                                   num_sa_layers=base.num_gpsa_layers + base.num_sa_layers)
    if variant == "random_gpsa":
        return dataclasses.replace(base, conv_init=False, strict_conv_init=False)
    raise ValueError(f"unknown variant {variant!r}")


@dataclass
class StudyConfig:
    model: M.ModelConfig = field(default_factory=M.ModelConfig)
    train: TrainConfig = field(default_factory=lambda: TrainConfig(epochs=20, warmup_epochs=2))
    fractions: tuple = (0.1, 1.0)
    seeds: tuple = (0, 1, 2)
    # (variant, fraction) pairs to run; None means every combination
    runs: tuple | None = (("convit", 0.1), ("baseline", 0.1),
                          ("convit", 1.0), ("baseline", 1.0), ("random_gpsa", 1.0))

    def plan(self) -> list[tuple[str, float, int]]:
        pairs = self.runs or [(v, f) for v in VARIANTS for f in self.fractions]
        return [(v, f, s) for v, f in pairs for s in self.seeds]


@dataclass
class Run:
    variant: str
    fraction: float
    seed: int
    directory: Path

    @property
    def log(self) -> RunLog:
        return RunLog.read(self.directory / "runlog.csv")

    def model(self) -> M.ConViT:
        return M.load_checkpoint(self.directory / "checkpoint")[0]


def run_dir(root, variant: str, fraction: float, seed: int) -> Path:
    return Path(root) / variant / f"f{fraction:g}" / f"seed{seed}"


def run_study(cfg: StudyConfig, train_set: D.LabeledImageSet, test_set: D.LabeledImageSet, root,
              progress=print) -> dict[tuple[str, float, int], Run]:
    """Train every planned run that has no cached run log under ``root``."""
    runs = {}
    for variant, fraction, seed in cfg.plan():
        directory = run_dir(root, variant, fraction, seed)
        if not (directory / "runlog.csv").is_file():
            spec = D.SubsampleSpec(fraction, seed)
            tc = dataclasses.replace(cfg.train, seed=seed, init_seed=seed,
                                     epoch_multiplier=spec.epoch_multiplier)
            model = M.ConViT(variant_config(cfg.model, variant), seed=seed)
            if progress:
                progress(f"training {variant} f={fraction:g} seed={seed}")
            train(model, D.subsample(train_set, spec), tc, test_set, directory)
            (directory / "study.json").write_text(json.dumps(
                {"variant": variant, "fraction": fraction, "seed": seed, "train": tc.to_dict()}, indent=1))
        runs[(variant, fraction, seed)] = Run(variant, fraction, seed, directory)
    return runs


def final_top1(run: Run) -> float:
    return run.log.rows[-1]["test_top1"]


def top1_at(run: Run, share: float) -> float:
    """Test top-1 at the first logged epoch reaching ``share`` of the budget."""
    log = run.log
    last = log.rows[-1]["epoch"]
    for row in log.rows:
        if row["epoch"] >= share * last - 1e-9:
            return row["test_top1"]
    return log.rows[-1]["test_top1"]


def init_dynamics(model_cfg: M.ModelConfig, seed: int, probe: np.ndarray) -> tuple[float, float]:
    """Mean gate and mean GPSA-layer D_loc of a freshly initialised model."""
    model = M.ConViT(model_cfg, seed=seed)
    with T.no_grad():
        _, record = model(probe, capture=True)
    n = model_cfg.num_gpsa_layers
    return float(np.mean(mean_gates(model))), float(np.mean(nonlocality_report(record).per_layer[:n]))


def final_dynamics(run: Run, num_gpsa: int) -> tuple[float, float]:
    row = run.log.rows[-1]
    gates = [row[f"gate_{i}"] for i in range(num_gpsa)]
    dloc = [row[f"d_loc_{i}"] for i in range(num_gpsa)]
    return float(np.mean(gates)), float(np.mean(dloc))


def masked_accuracies(model: M.ConViT, test_set: D.LabeledImageSet, limit: int = 0) -> dict[str, float]:
    """Top-1 with nothing masked, without the absolute embedding, and (for
    GPSA models) with the content or positional pathway masked."""
    out = {"none": evaluate(model, test_set, limit=limit)["top1"]}
    M.mask_abs_pos_embed(model, True)
    out["pos_embed"] = evaluate(model, test_set, limit=limit)["top1"]
    M.mask_abs_pos_embed(model, False)
    if model.gpsa_blocks:
        M.mask_attention_mode(model, "position_only")
        out["content"] = evaluate(model, test_set, limit=limit)["top1"]
        M.mask_attention_mode(model, "content_only")
        out["position"] = evaluate(model, test_set, limit=limit)["top1"]
        M.mask_attention_mode(model, "none")
    return out
