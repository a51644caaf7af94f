"""Finite-difference checks of every backward rule and every parameter role."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import model as M
from . import tensor as T
from .trainer import cross_entropy

TOLERANCE = 1e-4
STEP = 1e-5
ROLES = ("W_qry", "W_key", "W_val", "W_out", "v_pos", "lambda", "FFN", "LN", "embed", "head")


def micro_config(**overrides) -> M.ModelConfig:
    base = dict(image_size=8, patch_size=2, channels=3, num_gpsa_layers=1, num_sa_layers=1,
                num_heads=4, head_dim=4, num_classes=3)
    base.update(overrides)
    return M.ModelConfig(**base)


def rel_error(a: np.ndarray, b: np.ndarray) -> float:
    """Norm-wise relative error; absolute when both sides vanish."""
    denom = np.linalg.norm(a) + np.linalg.norm(b)
    diff = float(np.linalg.norm(a - b))
    return diff / denom if denom > 1e-12 else diff


def numeric_grad(f, arr: np.ndarray, entries, h: float = STEP) -> np.ndarray:
    """Central differences of scalar ``f()`` at the given flat ``entries`` of ``arr``."""
    flat = arr.reshape(-1)
    out = np.empty(len(entries))
    for k, i in enumerate(entries):
        old = flat[i]
        flat[i] = old + h
        fp = f()
        flat[i] = old - h
        fm = f()
        flat[i] = old
        out[k] = (fp - fm) / (2 * h)
    return out


@dataclass
class Entry:
    group: str
    name: str
    error: float

    @property
    def ok(self) -> bool:
        return self.error < TOLERANCE


@dataclass
class GradcheckReport:
    entries: list[Entry] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(e.ok for e in self.entries)

    def failures(self) -> list[Entry]:
        return [e for e in self.entries if not e.ok]

    def worst(self) -> dict[str, Entry]:
        """Worst entry of each group, in first-seen group order."""
        out: dict[str, Entry] = {}
        for e in self.entries:
            if e.group not in out or e.error > out[e.group].error:
                out[e.group] = e
        return out

    def lines(self) -> list[str]:
        return [f"{'ok  ' if e.ok else 'FAIL'} {g:<16} {e.error:.3e}  {e.name}"
                for g, e in self.worst().items()]


def _check(f, leaves: list[T.Tensor], entries_per_leaf: int, rng) -> list[float]:
    for p in leaves:
        p.grad = None
    T.backward(f())
    errors = []
    for p in leaves:
        n = p.size
        idx = np.arange(n) if n <= entries_per_leaf else rng.choice(n, entries_per_leaf, replace=False)
        with T.no_grad():
            num = numeric_grad(lambda: f().item(), p.data, idx)
        errors.append(rel_error(p.grad.reshape(-1)[idx], num))
    return errors


def _op_cases(rng):
    """(op name, loss builder, leaves) triples; each loss routes through one op."""
    a = T.parameter(rng.normal(size=(3, 4)))
    b = T.parameter(rng.normal(size=(4, 5)))
    c = T.parameter(rng.normal(size=(3, 4)))
    pos = T.parameter(rng.uniform(0.5, 2.0, size=(3, 4)))
    gain = T.parameter(rng.normal(size=4))
    bias = T.parameter(rng.normal(size=4))
    w = T.tensor(rng.normal(size=(3, 4)))
    w5 = T.tensor(rng.normal(size=(3, 5)))
    w8 = T.tensor(rng.normal(size=(3, 8)))

    def weighted(x, weights=w):
        return T.sum(x * weights)

    return [
        ("add", lambda: weighted(a + c), [a, c]),
        ("sub", lambda: weighted(a - c), [a, c]),
        ("mul", lambda: weighted(a * c), [a, c]),
        ("div", lambda: weighted(a / pos), [a, pos]),
        ("neg", lambda: weighted(-a), [a]),
        ("exp", lambda: weighted(T.exp(a)), [a]),
        ("log", lambda: weighted(T.log(pos)), [pos]),
        ("matmul", lambda: weighted(T.matmul(a, b), w5), [a, b]),
        ("sum", lambda: T.sum(T.sum(a * w, axis=1) * T.sum(c, axis=1)), [a, c]),
        ("mean", lambda: T.sum(T.mean(a * w, axis=0) * T.mean(c, axis=0)), [a, c]),
        ("reshape", lambda: weighted(T.reshape(T.reshape(a, (2, 6)) * T.reshape(c, (2, 6)), (3, 4))), [a, c]),
        ("transpose", lambda: T.sum(T.matmul(T.transpose(a), c) * T.tensor(np.eye(4) + 0.3)), [a, c]),
        ("concat", lambda: T.sum(T.concat([a, c * a], axis=1) * w8), [a, c]),
        ("broadcast_to", lambda: weighted(T.broadcast_to(gain, (3, 4)) * a), [gain, a]),
        ("index", lambda: T.sum(a[1:, ::2] * c[:2, 1::2]), [a, c]),
        ("softmax_rows", lambda: weighted(T.softmax_rows(a)), [a]),
        ("log_softmax", lambda: weighted(T.log_softmax(a)), [a]),
        ("sigmoid", lambda: weighted(T.sigmoid(a)), [a]),
        ("gelu", lambda: weighted(T.gelu(a)), [a]),
        ("layernorm", lambda: weighted(T.layernorm(a, gain, bias)), [a, gain, bias]),
    ]


def check_ops(seed: int = 0) -> list[Entry]:
    rng = np.random.default_rng(seed)
    entries = []
    for op, f, leaves in _op_cases(rng):
        errors = _check(f, leaves, 64, rng)
        entries.append(Entry(f"op:{op}", op, max(errors)))
    return entries


def check_model(config: M.ModelConfig | None = None, seed: int = 0, batch: int = 2,
                entries_per_leaf: int = 64) -> list[Entry]:
    """FD check of the classification loss against every parameter of a ConViT.

    Large tensors are probed at ``entries_per_leaf`` random positions.
    """
    config = config or micro_config()
    model = M.ConViT(config, seed=seed)
    rng = np.random.default_rng(seed + 1)
    images = rng.normal(size=(batch, config.channels, config.image_size, config.image_size))
    labels = rng.integers(0, config.num_classes, size=batch)
    params = model.parameters()
    names = list(params)

    def loss():
        return cross_entropy(model(images), labels)

    errors = _check(loss, [params[n] for n in names], entries_per_leaf, rng)
    return [Entry(M.param_role(n), n, e) for n, e in zip(names, errors)]


def run_gradcheck(config: M.ModelConfig | None = None, seed: int = 0) -> GradcheckReport:
    return GradcheckReport(check_ops(seed) + check_model(config, seed))
