"""Registry of finite-difference checks: every differentiable op plus the end-to-end losses.

All cases run in float64. Inputs to kinked ops (relu, max-pool) are drawn
away from their kinks so central differences are well defined.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import numerics as nx
from .geometry import chamfer_l2, group_cloud
from .model import ModelConfig, PretrainModel, random_mask
from .numerics import Tensor, finite_diff_check

OP_TOLERANCE = 1e-4
MODEL_TOLERANCE = 1e-3


@dataclass
class CheckOutcome:
    name: str
    max_rel_error: float
    tolerance: float
    samples: int
    raw_rel_error: float = 0.0

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance


def _p(rng, *shape, away: float = 0.0) -> Tensor:
    x = rng.standard_normal(shape)
    if away:
        x = np.where(x < 0, x - away, x + away)
    return Tensor(x, requires_grad=True)


def _fixed(salt: int) -> np.random.Generator:
    # rebuilt on every evaluation so the reduction weights never change
    return np.random.default_rng(salt)


def _weighted(out: Tensor, rng) -> Tensor:
    """Reduce to a scalar with fixed random weights so every output entry matters."""
    w = Tensor(rng.standard_normal(out.shape))
    return nx.sum(nx.mul(out, w))


def _case_binary(op):
    def build(rng):
        a, b = _p(rng, 3, 4), _p(rng, 4)
        if op is nx.div:
            b = Tensor(rng.uniform(0.5, 2.0, 4) * rng.choice([-1, 1], 4), requires_grad=True)
        return (lambda: _weighted(op(a, b), _fixed(1))), [a, b]
    return build


def _unary(fn, *shape, away=0.0):
    def build(rng):
        x = _p(rng, *shape, away=away)
        return (lambda: _weighted(fn(x), _fixed(2))), [x]
    return build


def _matmul(rng):
    a, b = _p(rng, 2, 3, 4), _p(rng, 4, 5)
    return (lambda: _weighted(nx.matmul(a, b), _fixed(3))), [a, b]


def _linear(rng):
    x, w, b = _p(rng, 5, 3), _p(rng, 3, 4), _p(rng, 4)
    return (lambda: _weighted(nx.linear(x, w, b), _fixed(4))), [x, w, b]


def _concat(rng):
    a, b = _p(rng, 2, 3), _p(rng, 2, 4)
    return (lambda: _weighted(nx.concat([a, b], axis=-1), _fixed(5))), [a, b]


def _gather(rng):
    x = _p(rng, 2, 5, 3)
    idx = np.array([[0, 2, 2], [4, 1, 0]])
    return (lambda: _weighted(nx.gather_rows(x, idx), _fixed(6))), [x]


def _where(rng):
    a, b = _p(rng, 3, 4), _p(rng, 3, 4)
    mask = rng.random((3, 4)) < 0.5
    return (lambda: _weighted(nx.where(mask, a, b), _fixed(7))), [a, b]


def _layer_norm(rng):
    x, g, b = _p(rng, 3, 6), _p(rng, 6), _p(rng, 6)
    return (lambda: _weighted(nx.layer_norm(x, g, b), _fixed(8))), [x, g, b]


def _batch_norm(rng):
    x, g, b = _p(rng, 4, 5, 3), _p(rng, 3), _p(rng, 3)
    stats = nx.BatchNormStats(3, dtype=np.float64)
    return (lambda: _weighted(nx.batch_norm_1d(x, g, b, stats, train=True), _fixed(9))), [x, g, b]


def _max_pool(rng):
    x = Tensor(rng.permutation(24).reshape(2, 4, 3) * 0.3 + rng.uniform(0, 0.01, (2, 4, 3)), requires_grad=True)
    return (lambda: _weighted(nx.max_pool(x, axis=-2), _fixed(10))), [x]


def _dropout(rng):
    x = _p(rng, 4, 5)
    return (lambda: _weighted(nx.dropout(x, 0.3, np.random.default_rng(11), train=True), _fixed(12))), [x]


def _mse(rng):
    a, b = _p(rng, 3, 4), _p(rng, 3, 4)
    return (lambda: nx.mse(a, b)), [a, b]


def _cross_entropy(rng):
    x = _p(rng, 5, 4)
    labels = np.array([0, 3, 1, 1, 2])
    return (lambda: nx.cross_entropy(x, labels)), [x]


def _chamfer(rng):
    a, b = _p(rng, 2, 6, 3), _p(rng, 2, 5, 3)
    return (lambda: nx.sum(chamfer_l2(a, b))), [a, b]


OP_CASES: dict[str, Callable] = {
    "add": _case_binary(nx.add),
    "sub": _case_binary(nx.sub),
    "mul": _case_binary(nx.mul),
    "div": _case_binary(nx.div),
    "neg": _unary(nx.neg, 3, 4),
    "matmul": _matmul,
    "linear": _linear,
    "sum": _unary(lambda x: nx.sum(x, axis=0), 3, 4),
    "mean": _unary(lambda x: nx.mean(x, axis=-1, keepdims=True), 3, 4),
    "reshape": _unary(lambda x: nx.reshape(x, (4, 3)), 3, 4),
    "transpose": _unary(lambda x: nx.transpose(x, (1, 0, 2)), 2, 3, 4),
    "concat": _concat,
    "gather_rows": _gather,
    "where": _where,
    "softmax": _unary(nx.softmax, 3, 5),
    "log_softmax": _unary(nx.log_softmax, 3, 5),
    "layer_norm": _layer_norm,
    "batch_norm_1d": _batch_norm,
    "relu": _unary(nx.relu, 4, 5, away=0.05),
    "gelu": _unary(nx.gelu, 4, 5),
    "max_pool": _max_pool,
    "mean_pool": _unary(lambda x: nx.mean_pool(x, axis=-2), 2, 4, 3),
    "dropout": _dropout,
    "mse": _mse,
    "cross_entropy": _cross_entropy,
    "chamfer_l2": _chamfer,
}


def check_op(name: str, seed: int = 0) -> CheckOutcome:
    f, params = OP_CASES[name](np.random.default_rng(seed))
    res = finite_diff_check(f, params, step=1e-6)
    return CheckOutcome(name, res.max_rel_error, OP_TOLERANCE, res.samples, res.raw_max_rel_error)


def _tiny_batch(cfg: ModelConfig, batch: int, seed: int):
    rng = np.random.default_rng(seed)
    clouds = rng.uniform(-1, 1, (batch, cfg.num_points, 3))
    groups = [group_cloud(c, cfg.num_patches, cfg.patch_size) for c in clouds]
    return np.stack([g.patches for g in groups]), np.stack([g.centers for g in groups])


def check_model(loss: str, cfg: ModelConfig | None = None, samples: int = 64, seed: int = 0,
                batch: int = 2) -> CheckOutcome:
    """Finite differences of the tiny-profile distill or recon loss in float64.

    ``samples`` parameter coordinates are drawn uniformly across all model
    parameters. The relu tokenizer and the max-pools are piecewise linear; with
    a step of 1e-6 a sampled coordinate crossing a kink is vanishingly rare.
    Batch-norm runs in training mode so its batch statistics are part of the
    checked graph.
    """
    cfg = cfg or ModelConfig.tiny()
    model = PretrainModel(cfg, distill=loss == "distill", recon=loss == "recon", seed=seed, recon_seed=seed)
    model.to(np.float64)
    patches, centers = _tiny_batch(cfg, batch, seed)
    rng = np.random.default_rng(seed + 1)
    if loss == "distill":
        target = Tensor(rng.standard_normal((batch, cfg.prefix_len, cfg.teacher_dim)) / np.sqrt(cfg.teacher_dim),
                        frozen=True)
        f = lambda: model.distill_loss(patches, centers, target)  # noqa: E731
    elif loss == "recon":
        mask = random_mask(batch, cfg.num_patches, cfg.mask_ratio, rng)
        f = lambda: model.recon_loss(patches, centers, mask)  # noqa: E731
    else:
        raise ValueError(f"unknown loss {loss!r}")
    res = finite_diff_check(f, model.parameters(), step=1e-6, samples=samples, seed=seed)
    return CheckOutcome(f"model:{loss}", res.max_rel_error, MODEL_TOLERANCE, res.samples, res.raw_max_rel_error)


def run_suite(scope: str = "all", samples: int = 64, seed: int = 0) -> list[CheckOutcome]:
    out = []
    if scope in ("ops", "all"):
        out += [check_op(name, seed) for name in OP_CASES]
    if scope in ("model", "all"):
        out += [check_model("distill", samples=samples, seed=seed),
                check_model("recon", samples=samples, seed=seed)]
    return out
