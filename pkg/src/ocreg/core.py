"""Residual separation, residual-entropy objective, lambda annealing and meters.

Given representations of an original view ``z_o`` and an augmented view
``z_a``, the augmented one is modelled as the mixture
``z_a = lam * z_o + (1 - lam) * z_n``; ``z_n`` is recovered in closed form and
its prediction entropy is pushed to the maximum, which makes the map from
original to augmented logits a positive affine one and therefore rank
preserving.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, ContractError, ShapeError

LAMBDA_CAP = 0.99
METHOD_KINDS = ("none", "ocr", "representation-l1", "representation-l2", "prediction-ce")
STRATEGIES = ("fixed", "random", "eq4", "reversed-eq4")


@dataclass
class LambdaSchedule:
    lambda0: float = 0.5
    alpha: float = 10.0
    beta: float = 0.75
    total_iters: int = 1

    def __post_init__(self):
        if not 0.0 < self.lambda0 < 1.0:
            raise ConfigError(f"lambda0 must be in (0, 1), got {self.lambda0}")
        if self.total_iters < 1:
            raise ConfigError("total_iters must be a positive integer")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class ConsistencyMethod:
    kind: str = "ocr"
    weight: float = 1.0

    def __post_init__(self):
        if self.kind not in METHOD_KINDS:
            raise ConfigError(f"unknown method kind {self.kind!r}; expected one of {METHOD_KINDS}")
        if not math.isfinite(self.weight) or self.weight < 0:
            raise ConfigError("method weight must be finite and >= 0")

    def to_dict(self) -> dict:
        return asdict(self)


def lambda_at(s: LambdaSchedule, t: int) -> float:
    """Annealed mixing coefficient lam0 * (1 - (1 + alpha t/T)^-beta), capped at 0.99."""
    if not 0 <= t <= s.total_iters:
        raise ContractError(f"iteration {t} outside [0, {s.total_iters}]")
    lam = s.lambda0 * (1.0 - (1.0 + s.alpha * t / s.total_iters) ** (-s.beta))
    return min(lam, LAMBDA_CAP)


def schedule_lambda(strategy: str, s: LambdaSchedule, t: int, rng: np.random.Generator | None = None,
                    fixed_value: float = 0.5) -> float:
    """Lambda for iteration ``t`` under one of the ablation strategies.

    ``random`` draws a fresh U(0, 1) value every call; ``reversed-eq4`` is
    ``1 - lambda_at``.
    """
    if strategy == "eq4":
        return lambda_at(s, t)
    if strategy == "fixed":
        return min(fixed_value, LAMBDA_CAP)
    if strategy == "random":
        if rng is None:
            raise ContractError("random strategy needs an rng")
        return min(float(rng.uniform(0.0, 1.0)), LAMBDA_CAP)
    if strategy == "reversed-eq4":
        return min(1.0 - lambda_at(s, t), LAMBDA_CAP)
    raise ConfigError(f"unknown lambda strategy {strategy!r}; expected one of {STRATEGIES}")


def residual(z_o: Tensor, z_a: Tensor, lam: float) -> Tensor:
    """z_n = (z_a - lam * z_o) / (1 - lam); differentiable in both views."""
    if not 0.0 <= lam <= LAMBDA_CAP:
        raise ConfigError(f"lambda must be in [0, {LAMBDA_CAP}], got {lam}")
    if z_o.shape != z_a.shape:
        raise ShapeError(f"view shapes differ: {z_o.shape} vs {z_a.shape}")
    return ad.scalar_mul(1.0 / (1.0 - lam), ad.sub(z_a, ad.scalar_mul(lam, z_o)))


def recompose(z_o: Tensor, z_n: Tensor, lam: float) -> Tensor:
    return ad.add(ad.scalar_mul(lam, z_o), ad.scalar_mul(1.0 - lam, z_n))


def ocr_loss(head: Callable[[Tensor], Tensor], z_n: Tensor) -> Tensor:
    """Negative batch-mean prediction entropy of the residual (nats); minimum is -ln C."""
    if z_n.shape[0] < 1:
        raise ContractError("ocr_loss needs a non-empty batch")
    return ad.neg(ad.mean(ad.softmax_entropy(head(z_n))))


def rep_consistency_loss(z_o: Tensor, z_a: Tensor, norm: str = "l2") -> Tensor:
    if z_o.shape != z_a.shape:
        raise ShapeError(f"view shapes differ: {z_o.shape} vs {z_a.shape}")
    diff = ad.sub(z_a, z_o)
    if norm == "l2":
        return ad.mean(ad.mul(diff, diff))
    if norm == "l1":
        # |d| = relu(d) + relu(-d)
        return ad.mean(ad.add(ad.relu(diff), ad.relu(ad.neg(diff))))
    raise ConfigError(f"norm must be 'l1' or 'l2', got {norm!r}")


def hard_labels(logits: np.ndarray) -> np.ndarray:
    """Row argmax; np.argmax already returns the lowest index on ties."""
    return np.argmax(logits, axis=1)


def pred_consistency_loss(head: Callable[[Tensor], Tensor], z_o: Tensor, z_a: Tensor) -> Tensor:
    """Cross-entropy of the augmented view against the original view's hard label."""
    if z_o.shape != z_a.shape:
        raise ShapeError(f"view shapes differ: {z_o.shape} vs {z_a.shape}")
    target = hard_labels(head(z_o.detach()).data)
    return ad.cross_entropy(head(z_a), target)


def kendall_tau_rows(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Kendall's tau-b between matching rows of two ``[n, C]`` score arrays."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 2:
        raise ShapeError(f"need two equal [n, C] arrays, got {a.shape} and {b.shape}")
    iu, ju = np.triu_indices(a.shape[1], k=1)
    sa = np.sign(a[:, iu] - a[:, ju])
    sb = np.sign(b[:, iu] - b[:, ju])
    concord = (sa * sb).sum(axis=1)
    denom = np.sqrt((sa != 0).sum(axis=1) * (sb != 0).sum(axis=1))
    with np.errstate(invalid="ignore", divide="ignore"):
        tau = np.where(denom > 0, concord / np.where(denom > 0, denom, 1.0), 0.0)
    return tau


def order_preservation_score(logits_o, logits_a) -> float:
    """Mean per-row Kendall tau between the class rankings of two views."""
    lo = logits_o.data if isinstance(logits_o, Tensor) else np.asarray(logits_o)
    la = logits_a.data if isinstance(logits_a, Tensor) else np.asarray(logits_a)
    if lo.ndim != 2 or lo.shape[1] < 2:
        raise ShapeError("need at least two classes")
    return float(kendall_tau_rows(lo, la).mean())


def _entropy(p: np.ndarray) -> float:
    p = p[p > 0]
    return float(-(p * np.log(p)).sum())


def mi_from_joint(joint: np.ndarray) -> tuple[float, float]:
    """Plug-in mutual information (nats) of a joint count table, computed two ways.

    Returns ``(kl_form, entropy_form)``: KL(p(z, y) || p(z)p(y)) and
    H(Y) - H(Y | Z), rows indexing Z and columns Y.
    """
    joint = np.asarray(joint, dtype=np.float64)
    total = joint.sum()
    if total <= 0:
        raise ContractError("joint table is empty")
    p = joint / total
    pz = p.sum(axis=1)
    py = p.sum(axis=0)
    nz = p > 0
    kl = float((p[nz] * np.log(p[nz] / np.outer(pz, py)[nz])).sum())
    # H(Y|Z) = -sum p(z,y) log p(y|z)
    cond = p / np.where(pz > 0, pz, 1.0)[:, None]
    h_y_given_z = float(-(p[nz] * np.log(cond[nz])).sum())
    return kl, _entropy(py) - h_y_given_z


def joint_counts(pred: np.ndarray, true: np.ndarray, num_classes: int) -> np.ndarray:
    pred = np.asarray(pred, dtype=np.int64)
    true = np.asarray(true, dtype=np.int64)
    if pred.shape != true.shape:
        raise ContractError("prediction and label lists differ in length")
    if pred.size == 0:
        raise ContractError("cannot estimate mutual information from an empty sample")
    for arr in (pred, true):
        if arr.min() < 0 or arr.max() >= num_classes:
            raise ContractError(f"labels must lie in [0, {num_classes})")
    table = np.zeros((num_classes, num_classes))
    np.add.at(table, (pred, true), 1.0)
    return table


def mi_labels_residual(pred_labels_n, true_labels, num_classes: int) -> float:
    """Plug-in I(argmax F(z_n); Y) in nats from paired label lists."""
    kl, ent = mi_from_joint(joint_counts(pred_labels_n, true_labels, num_classes))
    if abs(kl - ent) > 1e-9:
        raise ContractError(f"mutual information forms disagree: {kl} vs {ent}")
    return max(kl, 0.0)


@dataclass
class BatchParts:
    """Everything the objective needs for one step.

    ``features_o``/``features_a`` are the representations at the level where
    the consistency term is applied; ``logits_fn`` maps that level to logits.
    """

    logits_o: Tensor
    labels: np.ndarray
    features_o: Tensor | None = None
    features_a: Tensor | None = None
    logits_fn: Callable[[Tensor], Tensor] | None = None
    lam: float = 0.0


def total_loss(method: ConsistencyMethod, parts: BatchParts) -> tuple[Tensor, dict]:
    """Supervised cross-entropy on the original view plus weight * regularizer."""
    if method.kind not in METHOD_KINDS:
        raise ConfigError(f"unknown method kind {method.kind!r}")
    ce = ad.cross_entropy(parts.logits_o, parts.labels)
    info = {"ce": ce.item(), "reg": 0.0}
    if method.kind == "none" or method.weight == 0.0:
        return ce, info
    if parts.features_o is None or parts.features_a is None or parts.logits_fn is None:
        raise ContractError(f"method {method.kind!r} needs both views and a logits function")
    if method.kind == "ocr":
        z_n = residual(parts.features_o, parts.features_a, parts.lam)
        reg = ocr_loss(parts.logits_fn, z_n)
        info["z_n"] = z_n
    elif method.kind == "representation-l1":
        reg = rep_consistency_loss(parts.features_o, parts.features_a, "l1")
    elif method.kind == "representation-l2":
        reg = rep_consistency_loss(parts.features_o, parts.features_a, "l2")
    else:
        reg = pred_consistency_loss(parts.logits_fn, parts.features_o, parts.features_a)
    info["reg"] = reg.item()
    return ad.add(ce, ad.scalar_mul(method.weight, reg)), info
