"""Training loop, AdamW, schedules, evaluation and the ablation suite."""
from __future__ import annotations

import contextlib
import csv
import dataclasses
import io
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import model as M
from . import tensor as T
from .data import LabeledImageSet
from .errors import ConfigError, ContractError, NumericError, ShapeError
from .metrics import gating_summary, nonlocality_report

FREEZE_SETS = ("gating", "gpsa_attention", "all_attention")
BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8
_GPSA_ATTN = ("w_qry", "w_key", "w_val", "v_pos", "gating")
_ATTN = ("w_qry", "w_key", "w_val", "w_out", "b_out", "v_pos", "gating")


@dataclass
class TrainConfig:
    epochs: int = 20
    batch_size: int = 64
    base_lr: float = 1e-3
    weight_decay: float = 0.05
    warmup_epochs: int = 5
    schedule: str = "cosine"
    seed: int = 0
    init_seed: int = 0
    freeze_sets: list = field(default_factory=list)
    eval_every: int = 1
    epoch_multiplier: int = 1
    gate_pin: float = 0.0
    probe_size: int = 64
    eval_limit: int = 0

    def __post_init__(self):
        self.freeze_sets = list(self.freeze_sets)
        self.validate()

    def validate(self) -> None:
        if self.epochs < 0:
            raise ConfigError("train.epochs must be non-negative")
        if self.batch_size < 1:
            raise ConfigError("train.batch_size must be positive")
        if not self.base_lr > 0:
            raise ConfigError("train.base_lr must be positive")
        if self.epochs and not 0 <= self.warmup_epochs < self.epochs:
            raise ConfigError(f"train.warmup_epochs ({self.warmup_epochs}) must be below epochs ({self.epochs})")
        if self.schedule not in ("cosine", "constant"):
            raise ConfigError(f"unknown schedule {self.schedule!r}")
        bad = [s for s in self.freeze_sets if s not in FREEZE_SETS]
        if bad:
            raise ConfigError(f"unknown freeze sets {bad}; choose from {list(FREEZE_SETS)}")
        if self.eval_every < 1 or self.epoch_multiplier < 1:
            raise ConfigError("train.eval_every and train.epoch_multiplier must be >= 1")

    @property
    def total_epochs(self) -> int:
        return self.epochs * self.epoch_multiplier

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> TrainConfig:
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown train keys: {sorted(unknown)}")
        return cls(**d)


# -- optimisation primitives -----------------------------------------------------

def decays(name: str) -> bool:
    """Weight decay applies to projection matrices only."""
    leaf = name.rsplit(".", 1)[-1]
    if name in ("pos_embed", "cls_token") or leaf in ("v_pos", "gating", "gain"):
        return False
    return not (leaf.endswith("bias") or leaf.endswith("_b") or leaf == "b_out")


@dataclass
class AdamState:
    m: dict
    v: dict
    t: int = 0

    @classmethod
    def zeros(cls, params: dict) -> AdamState:
        return cls({k: np.zeros(np.shape(_arr(p))) for k, p in params.items()},
                   {k: np.zeros(np.shape(_arr(p))) for k, p in params.items()})


def _arr(p):
    return p.data if isinstance(p, T.Tensor) else p


def adamw_step(params: dict, grads: dict, state: AdamState, lr: float, wd: float,
               betas=BETAS, eps: float = ADAM_EPS) -> None:
    """One decoupled-weight-decay Adam update, in place.

    ``params`` maps names to tensors (or float arrays); names for which
    :func:`decays` is false are never decayed.
    """
    b1, b2 = betas
    state.t += 1
    c1 = 1 - b1 ** state.t
    c2 = 1 - b2 ** state.t
    for name, p in params.items():
        data = _arr(p)
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(data)
        if np.shape(g) != data.shape or state.m[name].shape != data.shape:
            raise ShapeError(f"{name}: param {data.shape}, grad {np.shape(g)}, state {state.m[name].shape}")
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        if wd and decays(name):
            data *= 1 - lr * wd
        data -= lr * (m / c1) / (np.sqrt(v / c2) + eps)


def cosine_lr(step: int, total: int, warmup: int, base_lr: float) -> float:
    """Linear warmup to ``base_lr`` then a half cosine down to 0 at ``total``."""
    if warmup and step < warmup:
        return base_lr * step / warmup
    if total <= warmup:
        return base_lr
    progress = min(1.0, (step - warmup) / (total - warmup))
    return base_lr * 0.5 * (1 + math.cos(math.pi * progress))


def constant_lr(step: int, total: int, warmup: int, base_lr: float) -> float:
    if warmup and step < warmup:
        return base_lr * step / warmup
    return base_lr


def cross_entropy(logits, labels) -> T.Tensor:
    """Mean of ``-log softmax(logits)[label]`` over the batch."""
    logits = T.tensor(logits) if not isinstance(logits, T.Tensor) else logits
    single = logits.ndim == 1
    if single:
        logits = T.reshape(logits, (1, -1))
    labels = np.atleast_1d(np.asarray(labels))
    C = logits.shape[-1]
    if labels.shape != (logits.shape[0],):
        raise ShapeError(f"{logits.shape[0]} logit rows but labels of shape {labels.shape}")
    if labels.min() < 0 or labels.max() >= C:
        raise ContractError(f"labels must lie in [0, {C})")
    picked = T.index(T.log_softmax(logits), (np.arange(len(labels)), labels.astype(np.int64)))
    return -T.mean(picked)


# -- freezing ----------------------------------------------------------------------

def frozen_names(model: M.ConViT, freeze_sets) -> set[str]:
    names = set()
    n_gpsa = len(model.gpsa_blocks)
    for s in freeze_sets:
        if s in ("gating", "gpsa_attention") and not n_gpsa:
            raise ConfigError(f"freeze set {s!r} needs GPSA layers")
    for name in model.parameters():
        parts = name.split(".")
        if parts[0] != "blocks" or parts[2] != "attn":
            continue
        leaf, is_gpsa = parts[-1], int(parts[1]) < n_gpsa
        if "gating" in freeze_sets and leaf == "gating":
            names.add(name)
        if "gpsa_attention" in freeze_sets and is_gpsa and leaf in _GPSA_ATTN:
            names.add(name)
        if "all_attention" in freeze_sets and leaf in _ATTN:
            names.add(name)
    return names


@contextlib.contextmanager
def _frozen(params: dict, names: set[str]):
    saved = {n: params[n].requires_grad for n in names}
    for n in names:
        params[n].requires_grad = False
    try:
        yield
    finally:
        for n, flag in saved.items():
            params[n].requires_grad = flag


# -- evaluation -------------------------------------------------------------------

def evaluate(model: M.ConViT, data: LabeledImageSet, batch_size: int = 256, limit: int = 0) -> dict:
    """Top-1 / top-5 accuracy (percent) and mean loss on ``data``."""
    n = len(data) if not limit else min(limit, len(data))
    k = min(5, model.config.num_classes)
    hits1 = hits5 = 0
    loss = 0.0
    with T.no_grad():
        for start in range(0, n, batch_size):
            stop = min(n, start + batch_size)
            logits = model(data.images[start:stop])
            labels = data.labels[start:stop]
            loss += cross_entropy(logits, labels).item() * (stop - start)
            top = np.argsort(-logits.data, axis=1, kind="stable")[:, :k]
            hits1 += int((top[:, 0] == labels).sum())
            hits5 += int((top == labels[:, None]).any(axis=1).sum())
    return {"top1": 100.0 * hits1 / n, "top5": 100.0 * hits5 / n, "loss": loss / n}


def probe_nonlocality(model: M.ConViT, images: np.ndarray) -> list[float]:
    """Per-layer D_loc averaged over heads, queries and the probe batch."""
    with T.no_grad():
        _, record = model(images, capture=True)
    return nonlocality_report(record).per_layer


def mean_gates(model: M.ConViT) -> list[float]:
    return [s["mean"] for s in gating_summary(model)] if model.gpsa_blocks else []


# -- run log ------------------------------------------------------------------------

class RunLog:
    """Append-only per-epoch metrics with a fixed column order.

    Columns: ``epoch, train_loss, test_top1, test_top5``, then ``d_loc_<l>``
    for every attention layer and ``gate_<l>`` for every GPSA layer.
    """

    def __init__(self, num_layers: int, num_gpsa: int):
        self.columns = (["epoch", "train_loss", "test_top1", "test_top5"]
                        + [f"d_loc_{i}" for i in range(num_layers)]
                        + [f"gate_{i}" for i in range(num_gpsa)])
        self.rows: list[dict] = []

    def append(self, row: dict) -> None:
        if set(row) != set(self.columns):
            raise ContractError(f"run log row keys {sorted(row)} do not match columns")
        if self.rows and row["epoch"] <= self.rows[-1]["epoch"]:
            raise ContractError("run log epochs must strictly increase")
        bad = [k for k, v in row.items() if not math.isfinite(v)]
        if bad:
            raise NumericError(f"non-finite run log values in {bad}")
        self.rows.append(dict(row))

    def __len__(self) -> int:
        return len(self.rows)

    def column(self, name: str) -> list:
        return [r[name] for r in self.rows]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.columns)
        for r in self.rows:
            w.writerow([r["epoch"]] + [repr(float(r[c])) for c in self.columns[1:]])
        return buf.getvalue()

    def write(self, path) -> None:
        Path(path).write_text(self.to_csv())

    @classmethod
    def read(cls, path) -> RunLog:
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        header = rows[0]
        log = cls(sum(c.startswith("d_loc_") for c in header), sum(c.startswith("gate_") for c in header))
        if header != log.columns:
            raise ContractError(f"unexpected run log header {header}")
        for r in rows[1:]:
            log.append({"epoch": int(r[0]), **{c: float(v) for c, v in zip(header[1:], r[1:])}})
        return log


# -- training -----------------------------------------------------------------------

def train(model: M.ConViT, dataset: LabeledImageSet, config: TrainConfig,
          test_set: LabeledImageSet | None = None, out_dir=None) -> RunLog:
    """Train ``model`` in place and return its run log.

    Batches follow one seeded permutation per epoch. Parameters in the
    configured freeze sets are never updated; with the ``gating`` set the
    gates are first pinned to ``config.gate_pin``. ``eval_every`` counts
    effective epochs (after ``epoch_multiplier``). When ``out_dir`` is given the
    final checkpoint and ``runlog.csv`` are written there.
    """
    config.validate()
    cfg = model.config
    if dataset.image_shape != (cfg.channels, cfg.image_size, cfg.image_size):
        raise ShapeError(f"dataset images {dataset.image_shape} do not fit the model")
    if dataset.num_classes > cfg.num_classes:
        raise ConfigError(f"dataset has {dataset.num_classes} classes, model {cfg.num_classes}")
    params = model.parameters()
    frozen = frozen_names(model, config.freeze_sets)
    if "gating" in config.freeze_sets and config.gate_pin is not None:
        for layer in model.gpsa_layers():
            layer.gating.data[...] = config.gate_pin
    trainable = {n: p for n, p in params.items() if n not in frozen}
    state = AdamState.zeros(trainable)
    schedule = cosine_lr if config.schedule == "cosine" else constant_lr
    test_set = test_set if test_set is not None else dataset
    probe = test_set.images[:config.probe_size]
    log = RunLog(len(model.blocks), len(model.gpsa_blocks))

    n = len(dataset)
    per_epoch = math.ceil(n / config.batch_size)
    total_steps = config.total_epochs * per_epoch
    warmup_steps = config.warmup_epochs * config.epoch_multiplier * per_epoch
    rng = np.random.default_rng(config.seed)
    step = 0
    with _frozen(params, frozen):
        for epoch in range(1, config.total_epochs + 1):
            order = rng.permutation(n)
            running = 0.0
            for b in range(per_epoch):
                idx = order[b * config.batch_size:(b + 1) * config.batch_size]
                lr = schedule(step, total_steps, warmup_steps, config.base_lr)
                for p in trainable.values():
                    p.grad = None
                try:
                    loss = cross_entropy(model(dataset.images[idx]), dataset.labels[idx])
                    T.backward(loss)
                except NumericError as exc:
                    raise NumericError(f"non-finite values at epoch {epoch}, batch {b}: {exc}") from None
                value = loss.item()
                if not math.isfinite(value):
                    raise NumericError(f"loss is {value} at epoch {epoch}, batch {b}")
                running += value * len(idx)
                adamw_step(trainable, {k: p.grad for k, p in trainable.items()}, state, lr,
                           config.weight_decay)
                step += 1
            if epoch % config.eval_every == 0 or epoch == config.total_epochs:
                ev = evaluate(model, test_set, limit=config.eval_limit)
                row = {"epoch": epoch, "train_loss": running / n,
                       "test_top1": ev["top1"], "test_top5": ev["top5"]}
                row.update({f"d_loc_{i}": v for i, v in enumerate(probe_nonlocality(model, probe))})
                row.update({f"gate_{i}": v for i, v in enumerate(mean_gates(model))})
                log.append(row)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        M.save_checkpoint(model, out / "checkpoint", step=step, extra={"train": config.to_dict()})
        log.write(out / "runlog.csv")
    return log


# -- ablation suite ------------------------------------------------------------------

@dataclass(frozen=True)
class AblationRow:
    row_id: str
    train_gating: bool
    conv_init: bool
    train_gpsa: bool
    use_gpsa: bool
    note: str = ""


ABLATION_ROWS = (
    AblationRow("a", True, True, True, True, "ConViT"),
    AblationRow("b", False, True, True, True, "frozen gating"),
    AblationRow("c", True, False, True, True, "no conv init"),
    AblationRow("d", False, False, True, True, "neither"),
    AblationRow("e", False, False, False, False, "DeiT"),
    AblationRow("f", False, True, False, True, "frozen GPSA, conv init"),
    AblationRow("g", False, False, False, True, "frozen GPSA, random init"),
)
ABLATION_COLUMNS = ("row_id", "train_gating", "conv_init", "train_gpsa", "use_gpsa", "top1")


def ablation_configs(row: AblationRow, model_cfg: M.ModelConfig, train_cfg: TrainConfig):
    """Model and train configs realising one ablation row."""
    if not row.use_gpsa:
        mc = dataclasses.replace(model_cfg, num_gpsa_layers=0, conv_init=False, strict_conv_init=False,
                                 num_sa_layers=model_cfg.num_gpsa_layers + model_cfg.num_sa_layers)
        return mc, dataclasses.replace(train_cfg, freeze_sets=[])
    mc = dataclasses.replace(model_cfg, conv_init=row.conv_init,
                             strict_conv_init=model_cfg.strict_conv_init and row.conv_init)
    freeze = []
    if not row.train_gpsa:
        freeze.append("gpsa_attention")
    elif not row.train_gating:
        freeze.append("gating")
    return mc, dataclasses.replace(train_cfg, freeze_sets=freeze)


def ablation_suite(model_cfg: M.ModelConfig, train_cfg: TrainConfig, dataset: LabeledImageSet,
                   test_set: LabeledImageSet | None = None, out_dir=None) -> list[dict]:
    """Train every ablation row with identical seeds; returns one dict per row."""
    results = []
    for row in ABLATION_ROWS:
        mc, tc = ablation_configs(row, model_cfg, train_cfg)
        model = M.ConViT(mc, seed=tc.init_seed)
        row_dir = Path(out_dir) / f"row_{row.row_id}" if out_dir is not None else None
        train(model, dataset, tc, test_set, row_dir)
        top1 = evaluate(model, test_set if test_set is not None else dataset, limit=tc.eval_limit)["top1"]
        results.append({"row_id": row.row_id, "train_gating": row.train_gating,
                        "conv_init": row.conv_init, "train_gpsa": row.train_gpsa,
                        "use_gpsa": row.use_gpsa, "top1": top1})
    if out_dir is not None:
        write_ablation_csv(Path(out_dir) / "ablation.csv", results)
    return results


def write_ablation_csv(path, results: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(ABLATION_COLUMNS)
        for r in results:
            w.writerow([r["row_id"]] + [int(r[c]) for c in ABLATION_COLUMNS[1:5]] + [repr(float(r["top1"]))])
