"""Experiment orchestration: training, evaluation, attacks, Fourier maps, TTA."""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import zlib
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .augment import AugmentConfig, photometric_batch, weak_augment_batch
from .core import (
    STRATEGIES,
    BatchParts,
    ConsistencyMethod,
    LambdaSchedule,
    kendall_tau_rows,
    mi_labels_residual,
    ocr_loss,
    residual,
    schedule_lambda,
    total_loss,
)
from .data import DomainDataset, DomainSpec, concat, gen_domain, load_dataset
from .errors import ConfigError, ContractError, NumericError
from .nets import SGD, Model, save_checkpoint

log = logging.getLogger(__name__)

METRIC_COLUMNS = ("iter", "epoch", "train_loss", "ocr_loss", "lambda", "top1", "top3", "top5",
                  "order_tau", "residual_mi", "residual_entropy_ratio")


def default_sources() -> list[DomainSpec]:
    return [
        DomainSpec(palette=(1.0, 0.35, 0.3), background_level=0.1, noise_sigma=0.02, seed=11),
        DomainSpec(palette=(0.3, 1.0, 0.4), background_level=0.25, noise_sigma=0.04, seed=12),
        DomainSpec(palette=(0.4, 0.5, 1.0), background_level=0.05, noise_sigma=0.06, seed=13),
    ]


def default_target() -> DomainSpec:
    return DomainSpec(palette=(0.9, 0.85, 0.3), background_level=0.35, noise_sigma=0.08, seed=14)


@dataclass
class ExperimentConfig:
    method: ConsistencyMethod = field(default_factory=ConsistencyMethod)
    lambda0: float = 0.5
    alpha: float = 10.0
    beta: float = 0.75
    strategy: str = "eq4"
    fixed_lambda: float = 0.5
    ocr_level: str = "repr"
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    hidden_dims: list[int] = field(default_factory=lambda: [256, 128, 64])
    lr: float = 0.02
    momentum: float = 0.9
    weight_decay: float = 5e-3
    epochs: int = 8
    batch_size: int = 64
    eval_interval: int = 0
    seed: int = 0
    num_classes: int = 7
    n_per_class: int = 200
    n_target_per_class: int = 100
    image_size: int = 32
    source_domains: list[DomainSpec] = field(default_factory=default_sources)
    target_domain: DomainSpec = field(default_factory=default_target)
    data_dir: str | None = None
    out_dir: str | None = None

    def __post_init__(self):
        try:
            if isinstance(self.method, dict):
                self.method = ConsistencyMethod(**self.method)
            if isinstance(self.augment, dict):
                self.augment = AugmentConfig(**self.augment)
            self.source_domains = [DomainSpec.from_dict(s) if isinstance(s, dict) else s
                                   for s in self.source_domains]
            if isinstance(self.target_domain, dict):
                self.target_domain = DomainSpec.from_dict(self.target_domain)
        except TypeError as exc:
            raise ConfigError(f"malformed config: {exc}") from None
        self.validate()

    def validate(self) -> None:
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"unknown lambda strategy {self.strategy!r}; expected one of {STRATEGIES}")
        LambdaSchedule(self.lambda0, self.alpha, self.beta, 1)
        if not 0.0 <= self.fixed_lambda <= 0.99:
            raise ConfigError("fixed_lambda must be in [0, 0.99]")
        if self.epochs < 0 or self.batch_size < 1 or self.eval_interval < 0:
            raise ConfigError("epochs >= 0, batch_size >= 1 and eval_interval >= 0 are required")
        if self.lr < 0 or not 0 <= self.momentum < 1 or self.weight_decay < 0:
            raise ConfigError("invalid optimizer settings")
        if not self.source_domains:
            raise ConfigError("at least one source domain is required")
        if any(int(h) <= 0 for h in self.hidden_dims) or not self.hidden_dims:
            raise ConfigError("hidden_dims must be a non-empty list of positive ints")
        if self.n_per_class < 1 or self.n_target_per_class < 1:
            raise ConfigError("per-class sample counts must be positive")
        if self.data_dir is not None:
            for name in self.data_files():
                if not Path(name).is_file():
                    raise ConfigError(f"dataset file not found: {name}")

    @property
    def dims(self) -> list[int]:
        return [3 * self.image_size * self.image_size] + [int(h) for h in self.hidden_dims]

    def data_files(self) -> list[Path]:
        root = Path(self.data_dir)
        return [root / f"source_{i}.ocrd" for i in range(len(self.source_domains))] + [root / "target.ocrd"]

    def to_dict(self) -> dict:
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            if hasattr(v, "to_dict"):
                v = v.to_dict()
            elif f.name == "source_domains":
                v = [s.to_dict() for s in v]
            out[f.name] = v
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        try:
            raw = json.loads(Path(path).read_text())
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from None
        return cls.from_dict(raw)

    def replace(self, **changes) -> "ExperimentConfig":
        d = self.to_dict()
        for k, v in changes.items():
            if isinstance(v, list):
                v = [x.to_dict() if hasattr(x, "to_dict") else x for x in v]
            d[k] = v.to_dict() if hasattr(v, "to_dict") else v
        return ExperimentConfig.from_dict(d)


def build_datasets(cfg: ExperimentConfig) -> tuple[list[DomainDataset], DomainDataset]:
    if cfg.data_dir is not None:
        files = cfg.data_files()
        sources = [load_dataset(p) for p in files[:-1]]
        return sources, load_dataset(files[-1])
    sources = [gen_domain(cfg.num_classes, cfg.n_per_class, spec, domain_id=i, size=cfg.image_size)
               for i, spec in enumerate(cfg.source_domains)]
    target = gen_domain(cfg.num_classes, cfg.n_target_per_class, cfg.target_domain,
                        domain_id=len(sources), size=cfg.image_size)
    return sources, target


def heldout_source(cfg: ExperimentConfig, n_per_class: int | None = None) -> DomainDataset:
    """Fresh samples from the source domains (shifted geometry seeds), for in-domain tests."""
    n = n_per_class or cfg.n_target_per_class
    parts = [gen_domain(cfg.num_classes, n, replace(spec, seed=spec.seed + 1000), domain_id=i,
                        size=cfg.image_size)
             for i, spec in enumerate(cfg.source_domains)]
    return concat(parts)


# -- evaluation -------------------------------------------------------------

def topk_from_logits(logits: np.ndarray, labels: np.ndarray, k_list=(1, 3, 5)) -> dict[int, float]:
    """Fraction of rows whose label is among the k largest logits (ties -> lower index first)."""
    logits = np.asarray(logits)
    labels = np.asarray(labels)
    if len(labels) == 0:
        raise ContractError("cannot evaluate an empty dataset")
    order = np.argsort(-logits, axis=1, kind="stable")
    rank = np.argmax(order == labels[:, None], axis=1)
    out = {}
    for k in k_list:
        if not 1 <= k <= logits.shape[1]:
            raise ContractError(f"k={k} outside [1, {logits.shape[1]}]")
        out[int(k)] = float(np.mean(rank < k))
    return out


def evaluate(model: Model, d: DomainDataset, k_list=(1, 3, 5)) -> dict[int, float]:
    return topk_from_logits(model.predict_logits(d.images), d.labels, k_list)


@dataclass
class ProbeViews:
    """Fixed weak/strong views of held-out data used by the monitors."""

    x_o: np.ndarray
    x_a: np.ndarray
    labels: np.ndarray


def make_probe(d: DomainDataset, aug: AugmentConfig, seed: int) -> ProbeViews:
    rng = np.random.default_rng([seed, 0x9B0BE])
    x_o = weak_augment_batch(d.images, aug, rng)
    x_a = photometric_batch(x_o, aug, rng)
    return ProbeViews(x_o, x_a, d.labels)


def view_monitors(model: Model, probe: ProbeViews, lam: float, level: str = "repr",
                  batch_size: int = 512) -> dict[str, float]:
    """Kendall tau between view logits, residual MI and residual entropy ratio."""
    c = model.num_classes
    taus, preds, ents = [], [], []
    for i in range(0, len(probe.labels), batch_size):
        xo = model.prepare(probe.x_o[i:i + batch_size])
        xa = model.prepare(probe.x_a[i:i + batch_size])
        fo, fa = model.features(xo, level), model.features(xa, level)
        lo, la = model.logits_from(fo, level).data, model.logits_from(fa, level).data
        taus.append(kendall_tau_rows(lo, la))
        ln = model.logits_from(residual(fo, fa, lam), level)
        preds.append(np.argmax(ln.data, axis=1))
        ents.append(ad.softmax_entropy(ln).data)
    ent = np.concatenate(ents)
    return {
        "order_tau": float(np.concatenate(taus).mean()),
        "residual_mi": mi_labels_residual(np.concatenate(preds), probe.labels, c),
        "residual_entropy_ratio": float(np.clip(ent.mean() / math.log(c), 0.0, 1.0)),
        "ocr_loss": float(-ent.mean()),
    }


# -- training -----------------------------------------------------------------

@dataclass
class TrainResult:
    model: Model
    metrics: list[dict]
    summary: dict


def _streams(seed: int) -> dict[str, np.random.Generator]:
    # one stream per consumer so every method sees the same batches and weak views
    names = ("shuffle", "weak", "strong", "lambda")
    return {n: np.random.default_rng([seed, i, 0x0C5]) for i, n in enumerate(names)}


def monitor_lambda(cfg: ExperimentConfig, sched: LambdaSchedule, t: int) -> float:
    if cfg.strategy == "random":
        return 0.5
    return schedule_lambda(cfg.strategy, sched, t, fixed_value=cfg.fixed_lambda)


def format_metrics_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(METRIC_COLUMNS)
    for r in rows:
        w.writerow([r[c] if c in ("iter", "epoch") else f"{r[c]:.6f}" for c in METRIC_COLUMNS])
    return buf.getvalue()


def train(cfg: ExperimentConfig, datasets=None, write_outputs: bool = True) -> TrainResult:
    """Train one model; appends a metrics row every ``eval_interval`` steps (0 = per epoch)."""
    cfg.validate()
    sources, target = datasets if datasets is not None else build_datasets(cfg)
    train_set = concat(sources)
    if train_set.num_classes != cfg.num_classes:
        raise ConfigError(f"data has {train_set.num_classes} classes, config says {cfg.num_classes}")
    model = Model.create(cfg.dims, cfg.num_classes, cfg.seed)
    model.level_index(cfg.ocr_level)
    opt = SGD(model.parameters(), cfg.lr, cfg.momentum, cfg.weight_decay)
    n = len(train_set)
    steps_per_epoch = math.ceil(n / cfg.batch_size)
    total = max(cfg.epochs * steps_per_epoch, 1)
    sched = LambdaSchedule(cfg.lambda0, cfg.alpha, cfg.beta, total)
    interval = cfg.eval_interval or steps_per_epoch
    streams = _streams(cfg.seed)
    probe = make_probe(target, cfg.augment, cfg.seed)
    level = cfg.ocr_level
    method = cfg.method
    uses_views = method.kind != "none" and method.weight > 0

    def record(t: int, epoch: int, train_loss: float) -> None:
        lam = monitor_lambda(cfg, sched, t)
        top = evaluate(model, target, [k for k in (1, 3, 5) if k <= cfg.num_classes])
        row = {"iter": t, "epoch": epoch, "train_loss": train_loss, "lambda": lam,
               "top1": top[1], "top3": top.get(3, 1.0), "top5": top.get(5, 1.0)}
        row.update(view_monitors(model, probe, lam, level))
        rows.append(row)
        log.info("iter %d top1 %.4f tau %.4f mi %.4f ent %.4f", t, row["top1"], row["order_tau"],
                 row["residual_mi"], row["residual_entropy_ratio"])

    rows: list[dict] = []
    init_logits = model.predict_logits(train_set.images)
    record(0, 0, ad.cross_entropy(ad.Tensor(init_logits), train_set.labels).item())

    t = 0
    losses: list[float] = []
    for epoch in range(1, cfg.epochs + 1):
        perm = streams["shuffle"].permutation(n)
        for s in range(steps_per_epoch):
            idx = perm[s * cfg.batch_size:(s + 1) * cfg.batch_size]
            labels = train_set.labels[idx]
            x_o = weak_augment_batch(train_set.images[idx], cfg.augment, streams["weak"])
            lam = schedule_lambda(cfg.strategy, sched, t, streams["lambda"], cfg.fixed_lambda)
            xo = model.prepare(x_o)
            feat_o = model.features(xo, level)
            parts = BatchParts(model.logits_from(feat_o, level), labels, lam=lam)
            if uses_views:
                x_a = photometric_batch(x_o, cfg.augment, streams["strong"])
                parts.features_o = feat_o
                parts.features_a = model.features(model.prepare(x_a), level)
                parts.logits_fn = lambda h: model.logits_from(h, level)
            loss, _ = total_loss(method, parts)
            value = loss.item()
            if not math.isfinite(value):
                raise NumericError(f"loss became {value} at iteration {t} (epoch {epoch})")
            model.zero_grad()
            ad.backward(loss)
            opt.step()
            losses.append(value)
            t += 1
            if t % interval == 0:
                record(t, epoch, float(np.mean(losses)))
                losses = []

    summary = {
        "method": method.kind,
        "weight": method.weight,
        "strategy": cfg.strategy,
        "seed": cfg.seed,
        "iterations": t,
        "final": {k: rows[-1][k] for k in METRIC_COLUMNS if k not in ("iter", "epoch")},
    }
    if write_outputs and cfg.out_dir:
        out = Path(cfg.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "metrics.csv").write_text(format_metrics_csv(rows))
        save_checkpoint(model, out / "checkpoint.bin")
        (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
        (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
    return TrainResult(model, rows, summary)


# -- adversarial attacks --------------------------------------------------------

ATTACKS = ("fgsm", "bim", "pgd")


def input_gradient(model: Model, x: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """d(mean CE)/d(pixels) for a batch of images."""
    xt = model.prepare(x, requires_grad=True)
    ad.backward(ad.cross_entropy(model(xt), labels))
    return xt.grad.reshape(x.shape)


def adversarial_examples(model: Model, x0: np.ndarray, labels: np.ndarray, method: str, eps: float,
                         steps: int, step_size: float, rng: np.random.Generator) -> np.ndarray:
    if method not in ATTACKS:
        raise ConfigError(f"unknown attack {method!r}; expected one of {ATTACKS}")
    if eps < 0 or step_size <= 0 or steps < 1:
        raise ConfigError("attack needs eps >= 0, step_size > 0 and steps >= 1")
    x0 = np.asarray(x0, dtype=np.float64)
    if method == "fgsm":
        return np.clip(x0 + eps * np.sign(input_gradient(model, x0, labels)), 0.0, 1.0)
    delta = np.zeros_like(x0)
    if method == "pgd":
        delta = rng.uniform(-eps, eps, size=x0.shape)
        delta = np.clip(x0 + delta, 0.0, 1.0) - x0
    for _ in range(steps):
        g = input_gradient(model, x0 + delta, labels)
        delta = np.clip(delta + step_size * np.sign(g), -eps, eps)
        delta = np.clip(x0 + delta, 0.0, 1.0) - x0
    return x0 + delta


def attack(model: Model, d: DomainDataset, method: str = "pgd", eps: float = 0.01, steps: int = 10,
           step_size: float = 0.01, seed: int = 0, batch_size: int = 256) -> float:
    """Robust top-1 accuracy under a white-box L-inf attack on clean inputs."""
    rng = np.random.default_rng([seed, ATTACKS.index(method) if method in ATTACKS else 0, 0xA77])
    correct = 0
    for i in range(0, len(d), batch_size):
        x0 = d.images[i:i + batch_size].astype(np.float64)
        y = d.labels[i:i + batch_size]
        adv = adversarial_examples(model, x0, y, method, eps, steps, step_size, rng)
        if adv.min() < 0.0 or adv.max() > 1.0 or np.abs(adv - x0).max() > eps + 1e-12:
            raise NumericError("adversarial batch left the valid box or the eps-ball")
        correct += int((np.argmax(model.predict_logits(adv), axis=1) == y).sum())
    return correct / len(d)


# -- Fourier sensitivity ---------------------------------------------------------

def fourier_basis(k_row: int, k_col: int, size: int) -> np.ndarray:
    """Unit-norm real (Hartley) basis image; distinct frequencies mod ``size`` are orthogonal."""
    u = np.arange(size)[:, None]
    v = np.arange(size)[None, :]
    theta = 2.0 * np.pi * (k_row * u + k_col * v) / size
    return (np.cos(theta) + np.sin(theta)) / size


def grid_frequencies(grid: int) -> np.ndarray:
    return np.arange(grid) - grid // 2


def fourier_map(model: Model, d: DomainDataset, grid: int = 15, eps: float = 4.0, seed: int = 0) -> np.ndarray:
    """Error rate under ``eps * r * U_ij`` noise, low frequencies at the centre cell."""
    size = d.images.shape[-1]
    if grid < 1 or grid > size:
        raise ConfigError(f"grid must be in [1, {size}]")
    rng = np.random.default_rng([seed, 0xF0F])
    x = d.images.astype(np.float64)
    signs = rng.choice([-1.0, 1.0], size=len(d))[:, None, None, None]
    freqs = grid_frequencies(grid)
    out = np.empty((grid, grid))
    for i, kr in enumerate(freqs):
        for j, kc in enumerate(freqs):
            noise = eps * fourier_basis(kr, kc, size)[None, None]
            xp = np.clip(x + signs * noise, 0.0, 1.0)
            pred = np.argmax(model.predict_logits(xp), axis=1)
            out[i, j] = float(np.mean(pred != d.labels))
    return out


def write_grid_csv(matrix: np.ndarray, path) -> None:
    lines = [",".join(f"{v:.6f}" for v in row) for row in matrix]
    Path(path).write_text("\n".join(lines) + "\n")


# -- test-time adaptation ---------------------------------------------------------

TTA_METHODS = ("bn-only", "entropy", "entropy+ocr")


@dataclass
class TTAConfig:
    lr: float = 0.005
    momentum: float = 0.0
    batch_size: int = 64
    lambda0: float = 0.8
    ocr_weight: float = 1.0
    update: str = "all"
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    seed: int = 0

    def __post_init__(self):
        if self.update not in ("all", "backbone", "bias"):
            raise ConfigError("update must be 'all', 'backbone' or 'bias'")
        if self.lr < 0 or self.batch_size < 1:
            raise ConfigError("invalid TTA optimizer settings")


def _tta_params(model: Model, which: str):
    if which == "all":
        return model.parameters()
    if which == "backbone":
        return model.backbone.parameters()
    return [b for _, b in model.backbone.layers]


def _segment_key(seg: DomainDataset) -> int:
    return zlib.crc32(np.ascontiguousarray(seg.images).tobytes())


def tta_adapt(model: Model, stream: list[DomainDataset], method: str = "entropy", continual: bool = False,
              cfg: TTAConfig | None = None) -> list[float]:
    """Online accuracy per segment: predict each batch first, then take one update step.

    With ``continual=False`` the model is restored to its source weights before every
    segment. ``model`` itself is never modified.
    """
    if method not in TTA_METHODS:
        raise ConfigError(f"unknown TTA method {method!r}; expected one of {TTA_METHODS}")
    cfg = cfg or TTAConfig()
    source_state = model.state_dict()
    work = model.clone()
    opt = SGD(_tta_params(work, cfg.update), cfg.lr, cfg.momentum)
    steps_total = sum(math.ceil(len(s) / cfg.batch_size) for s in stream)
    t_global = 0
    t_local = 0
    results = []
    for seg in stream:
        if not continual:
            work.load_state_dict(source_state)
            t_local = 0
        n_steps = math.ceil(len(seg) / cfg.batch_size)
        rng = np.random.default_rng([cfg.seed, _segment_key(seg), 0x77A])
        sched = LambdaSchedule(cfg.lambda0, total_iters=steps_total if continual else n_steps)
        correct = 0
        for s in range(n_steps):
            x = seg.images[s * cfg.batch_size:(s + 1) * cfg.batch_size].astype(np.float64)
            y = seg.labels[s * cfg.batch_size:(s + 1) * cfg.batch_size]
            logits = work(work.prepare(x))
            correct += int((np.argmax(logits.data, axis=1) == y).sum())
            if method == "bn-only":
                continue
            loss = ad.mean(ad.softmax_entropy(logits))
            if method == "entropy+ocr":
                t = t_global if continual else t_local
                x_o = weak_augment_batch(x, cfg.augment, rng)
                x_a = photometric_batch(x_o, cfg.augment, rng)
                z_o = work.backbone(work.prepare(x_o))
                z_a = work.backbone(work.prepare(x_a))
                reg = ocr_loss(work.head, residual(z_o, z_a, schedule_lambda("eq4", sched, t)))
                loss = ad.add(loss, ad.scalar_mul(cfg.ocr_weight, reg))
            if not math.isfinite(loss.item()):
                raise NumericError("TTA loss became non-finite")
            work.zero_grad()
            ad.backward(loss)
            opt.step()
            t_local += 1
            t_global += 1
        results.append(correct / len(seg))
    return results


def corruption_stream(clean: DomainDataset, severity: int = 5, seed: int = 0) -> list[DomainDataset]:
    from .data import CORRUPTIONS, CorruptionSpec, corrupt

    return [corrupt(clean, CorruptionSpec(kind, severity), seed) for kind in CORRUPTIONS]


# -- layer placement ------------------------------------------------------------------

def layer_ablation(cfg: ExperimentConfig, layer: str, datasets=None) -> float:
    """Final target top-1 with the consistency term applied at ``layer``."""
    probe = Model.create(cfg.dims, cfg.num_classes, 0)
    probe.level_index(layer)
    run = train(cfg.replace(ocr_level=layer), datasets=datasets, write_outputs=False)
    return run.metrics[-1]["top1"]


def augmentation_ablation(cfg: ExperimentConfig, datasets=None) -> dict[str, float]:
    """Final target top-1 with each photometric transform removed in turn."""
    base = cfg.augment.to_dict()
    variants = {
        "all": {},
        "no-jitter": {"jitter_strength": 0.0},
        "no-grayscale": {"grayscale_prob": 0.0},
        "no-blur": {"blur_prob": 0.0},
    }
    out = {}
    for name, change in variants.items():
        run = train(cfg.replace(augment={**base, **change}), datasets=datasets, write_outputs=False)
        out[name] = run.metrics[-1]["top1"]
    return out
