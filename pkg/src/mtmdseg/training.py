"""Training driver: batch composition, the four schemes and leave-one-out folds."""
from __future__ import annotations

import copy
import csv
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import tensor as T
from .data import AugmentationPolicy, SliceSet, apply_augmentation, draw_augmentation, exams_to_slices
from .losses import LossWeights, ce_loss, contrastive_loss, one_hot, total_loss
from .metrics import METRICS, MetricsReport, per_bone_report, postprocessed_masks, slice_dice_scores
from .network import ArchConfig, DomainSpec, SegModel, build_model, save_checkpoint
from .optim import Adam
from .tensor import Tensor

log = logging.getLogger(__name__)

TRAIN_SCHEMES = ("base", "joint", "dsl", "dsl_contrastive")


@dataclass(frozen=True)
class TrainConfig:
    scheme: str = "dsl_contrastive"
    epochs: int = 30
    batch_size: int = 32
    learning_rate: float = 1e-4
    tau: float = 0.1
    lam: float = 0.1
    seed: int = 0
    augment: bool = True
    arch: ArchConfig = field(default_factory=ArchConfig)
    snapshot_epochs: tuple[int, ...] = ()

    def __post_init__(self):
        if self.scheme not in TRAIN_SCHEMES:
            raise ValueError(f"unknown scheme {self.scheme!r}; valid schemes: {', '.join(TRAIN_SCHEMES)}")
        if self.epochs < 1 or self.batch_size < 1 or self.learning_rate <= 0 or self.tau <= 0 or self.lam < 0:
            raise ValueError("epochs, batch_size, learning_rate and tau must be positive, lambda non-negative")

    @property
    def model_scheme(self) -> str:
        return "dsl" if self.scheme == "dsl_contrastive" else self.scheme

    @property
    def effective_lambda(self) -> float:
        return self.lam if self.scheme == "dsl_contrastive" else 0.0


# ---------------------------------------------------------------- splits

@dataclass(frozen=True)
class Fold:
    index: int
    train: dict[int, tuple[int, ...]]
    val: dict[int, int]
    test: dict[int, int | None]


def split_plan(exam_counts: dict[int, int]) -> list[Fold]:
    """Leave-one-out folds advancing the held-out index in every domain at once.

    Fold ``f`` tests exam ``f`` and validates on exam ``f + 1`` (cyclically).
    A domain with fewer exams than folds has no test exam in the surplus folds.
    """
    if any(n < 3 for n in exam_counts.values()):
        raise ValueError("leave-one-out needs at least 3 exams per domain")
    folds = []
    for f in range(max(exam_counts.values())):
        train, val, test = {}, {}, {}
        for k, n in exam_counts.items():
            t = f if f < n else None
            v = (f + 1) % n
            test[k], val[k] = t, v
            train[k] = tuple(i for i in range(n) if i not in (t, v))
        folds.append(Fold(f, train, val, test))
    return folds


# ---------------------------------------------------------------- batches

def _per_domain(batch_size: int, num_domains: int) -> int:
    if batch_size % num_domains:
        raise ValueError(f"batch size {batch_size} not divisible by {num_domains} domains")
    return batch_size // num_domains


def steps_per_epoch(sizes: list[int], batch_size: int) -> int:
    return math.ceil(max(sizes) / _per_domain(batch_size, len(sizes)))


def epoch_batches(sizes: list[int], batch_size: int, seed: int, epoch: int) -> list[list[np.ndarray]]:
    """Per-step, per-domain slice indices for one epoch.

    Each domain draws from a fresh shuffled stream at the start of the epoch;
    smaller domains re-shuffle when exhausted, so every domain contributes
    ``batch_size / K`` slices to every step.
    """
    per = _per_domain(batch_size, len(sizes))
    n_steps = steps_per_epoch(sizes, batch_size)
    out = [[] for _ in range(n_steps)]
    for k, n in enumerate(sizes):
        rng = np.random.default_rng([seed, epoch, k, 17])
        need = n_steps * per
        stream = np.concatenate([rng.permutation(n) for _ in range(math.ceil(need / n))])
        for s in range(n_steps):
            out[s].append(stream[s * per:(s + 1) * per])
    return out


def compose_step_batch(sizes: list[int], batch_size: int, seed: int, step: int) -> list[np.ndarray]:
    """Sub-batches of global step ``step`` (0-based); epochs are numbered from 1."""
    n_steps = steps_per_epoch(sizes, batch_size)
    return epoch_batches(sizes, batch_size, seed, step // n_steps + 1)[step % n_steps]


# ---------------------------------------------------------------- training

class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TraceRow:
    epoch: int
    term: str
    value: float


@dataclass
class TrainResult:
    model: SegModel
    trace: list[TraceRow]
    best_epoch: dict[str, int]
    val_dice: dict[str, list[float]]
    snapshots: dict[int, SegModel] = field(default_factory=dict)

    def term(self, name: str) -> np.ndarray:
        return np.array([r.value for r in self.trace if r.term == name])


def _prepare_batch(slices: SliceSet, idx: np.ndarray, policy: AugmentationPolicy | None,
                   rng: np.random.Generator, dtype) -> tuple[np.ndarray, np.ndarray]:
    imgs, labs = slices.images[idx], slices.labels[idx]
    if policy is not None:
        pairs = [apply_augmentation(i, l, draw_augmentation(policy, rng)) for i, l in zip(imgs, labs)]
        imgs = np.stack([p[0] for p in pairs])
        labs = np.stack([p[1] for p in pairs])
    return imgs[:, None].astype(dtype), labs


def _snapshot(model: SegModel) -> SegModel:
    return copy.deepcopy(model)


def validation_dice(model: SegModel, domain: int, val: SliceSet) -> float:
    probs = model.predict(val.images[:, None], domain)
    d = per_bone_report(val.labels, probs, (1.0, 1.0, 1.0)).dice
    return 0.0 if d is None else d


def _train_loop(model: SegModel, cfg: TrainConfig, train: dict[int, SliceSet], val: dict[int, SliceSet],
                tag: str) -> TrainResult:
    """Optimize ``model`` over the domains in ``train`` (its keys are model domain indices)."""
    domains = sorted(train)
    sizes = [len(train[k]) for k in domains]
    dtype = model.nets[0].dtype
    opt = Adam(model.parameters(), lr=cfg.learning_rate)
    policy = AugmentationPolicy() if cfg.augment else None
    weights = LossWeights(cfg.effective_lambda)
    joint = cfg.scheme == "joint"
    trace: list[TraceRow] = []
    val_hist: list[float] = []
    best = (-1.0, 0, None)
    snapshots = {}
    step = 0
    for epoch in range(1, cfg.epochs + 1):
        sums = {"ce": 0.0, "contrastive": 0.0, "total": 0.0}
        batches = epoch_batches(sizes, cfg.batch_size, cfg.seed, epoch)
        for per_domain in batches:
            rng = np.random.default_rng([cfg.seed, step, 23])
            xs, ys = [], []
            for k, idx in zip(domains, per_domain):
                x, y = _prepare_batch(train[k], idx, policy, rng, dtype)
                xs.append(x)
                ys.append(y)
            dom_labels = np.concatenate([np.full(len(x), k) for k, x in zip(domains, xs)])
            if joint:
                y_union = np.concatenate([np.asarray(model.routes[k].channels)[y] for k, y in zip(domains, ys)])
                probs, z = model.forward_with_embedding(Tensor(np.concatenate(xs)), domains[0], train=True)
                ce = ce_loss([probs], [one_hot(y_union, model.head_classes(domains[0]), dtype)])
            else:
                preds, zs, targets = [], [], []
                for k, x, y in zip(domains, xs, ys):
                    p, z = model.forward_with_embedding(Tensor(x), k, train=True)
                    preds.append(p)
                    zs.append(z)
                    targets.append(one_hot(y, model.head_classes(k), dtype))
                ce = ce_loss(preds, targets)
                z = T.concat(zs, axis=0) if len(zs) > 1 else zs[0]
            con = None
            if len(domains) > 1:
                if weights.lam > 0:
                    con = contrastive_loss(z, dom_labels, cfg.tau)
                else:
                    with T.no_grad():
                        con = contrastive_loss(Tensor(z.data), dom_labels, cfg.tau)
            loss = total_loss(ce, con if weights.lam > 0 else None, weights)
            lval = loss.item()
            if not np.isfinite(lval) or (con is not None and not np.isfinite(con.item())):
                raise TrainingDiverged(f"[{tag}] non-finite loss at step {step} (lr={cfg.learning_rate}); "
                                       f"ce={ce.item()}, contrastive={None if con is None else con.item()}, "
                                       f"recent={[r.value for r in trace[-3:]]}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            sums["ce"] += ce.item()
            sums["contrastive"] += 0.0 if con is None else con.item()
            sums["total"] += lval
            step += 1
        n = len(batches)
        for term, v in sums.items():
            if term == "contrastive" and len(domains) < 2:
                continue
            trace.append(TraceRow(epoch, term, v / n))
        vd = float(np.mean([validation_dice(model, k, val[k]) for k in domains]))
        val_hist.append(vd)
        trace.append(TraceRow(epoch, "val_dice", vd))
        if vd > best[0]:
            best = (vd, epoch, _snapshot(model))
        if epoch in cfg.snapshot_epochs:
            snapshots[epoch] = _snapshot(model)
        log.info("[%s] epoch %d ce=%.4f con=%.4f val_dice=%.4f", tag, epoch, sums["ce"] / n,
                 sums["contrastive"] / n, vd)
    best_model = best[2]
    best_model.meta.update({"best_epoch": best[1], "val_dice": best[0]})
    return TrainResult(best_model, trace, {tag: best[1]}, {tag: val_hist}, snapshots)


def train_one(cfg: TrainConfig, fold: Fold, datasets: dict, domains: list[DomainSpec]) -> TrainResult:
    """Train one scheme on one fold; ``datasets`` maps domain index to its exams."""
    train = {k: exams_to_slices(datasets[k], fold.train[k]) for k in datasets}
    val = {k: exams_to_slices(datasets[k], [fold.val[k]]) for k in datasets}
    model = build_model(cfg.model_scheme, domains, cfg.arch, cfg.seed)
    model.meta.update({"train_scheme": cfg.scheme, "fold": fold.index})
    if cfg.scheme != "base":
        return _train_loop(model, cfg, train, val, cfg.scheme)
    # independent per-domain models trained on their own data only
    parts = model.split()
    results = []
    for k, part in enumerate(parts):
        results.append(_train_loop(part, cfg, {0: train[k]}, {0: val[k]}, f"base/{domains[k].name}"))
    for k, r in enumerate(results):
        model.nets[k] = r.model.nets[0]
    trace = [TraceRow(row.epoch, f"{row.term}[{domains[k].name}]", row.value)
             for k, r in enumerate(results) for row in r.trace]
    best = {t: e for r in results for t, e in r.best_epoch.items()}
    model.meta.update({"best_epoch": best})
    snaps = {}
    for e in cfg.snapshot_epochs:
        snap = copy.deepcopy(model)
        for k, r in enumerate(results):
            snap.nets[k] = r.snapshots[e].nets[0]
        snaps[e] = snap
    return TrainResult(model, trace, best, {t: v for r in results for t, v in r.val_dice.items()}, snaps)


# ---------------------------------------------------------------- leave-one-out

@dataclass
class MetricRow:
    scheme: str
    domain: str
    fold: int
    metric: str
    value: float | None


@dataclass
class LooResult:
    scheme: str
    rows: list[MetricRow]
    slice_dice: dict[str, list[float]]
    reports: dict[tuple[int, str], MetricsReport]
    traces: dict[int, list[TraceRow]]
    tested: dict[str, list[int]]
    models: dict[int, SegModel] = field(default_factory=dict)
    snapshots: dict[int, dict[int, SegModel]] = field(default_factory=dict)


def evaluate_exam(model: SegModel, domain: int, exam) -> tuple[MetricsReport, np.ndarray]:
    vol, lab = exam
    s = exams_to_slices([exam])
    probs = model.predict(s.images[:, None], domain)
    report = per_bone_report(lab.labels, probs, vol.spacing)
    masks = postprocessed_masks(probs, probs.shape[1])
    return report, slice_dice_scores(lab.labels, masks)


def run_leave_one_out(cfg: TrainConfig, datasets: dict, domains: list[DomainSpec],
                      folds: list[int] | None = None, out_dir: str | Path | None = None,
                      keep_models: bool = False) -> LooResult:
    plan = split_plan({k: len(v) for k, v in datasets.items()})
    chosen = plan if folds is None else [plan[f] for f in folds]
    res = LooResult(cfg.scheme, [], {d.name: [] for d in domains}, {}, {}, {d.name: [] for d in domains})
    for fold in chosen:
        log.info("scheme %s fold %d", cfg.scheme, fold.index)
        tr = train_one(cfg, fold, datasets, domains)
        res.traces[fold.index] = tr.trace
        if keep_models:
            res.models[fold.index] = tr.model
            res.snapshots[fold.index] = tr.snapshots
        if out_dir is not None:
            save_fold_outputs(Path(out_dir), cfg, fold.index, tr)
        for k, d in enumerate(domains):
            t = fold.test[k]
            if t is None:
                continue
            report, sd = evaluate_exam(tr.model, k, datasets[k][t])
            res.tested[d.name].append(t)
            res.reports[(fold.index, d.name)] = report
            res.slice_dice[d.name].extend(sd.tolist())
            for m in METRICS:
                res.rows.append(MetricRow(cfg.scheme, d.name, fold.index, m, report.mean[m]))
    return res


def save_fold_outputs(out: Path, cfg: TrainConfig, fold: int, tr: TrainResult) -> None:
    out.mkdir(parents=True, exist_ok=True)
    if cfg.scheme == "base":
        for part in tr.model.split():
            save_checkpoint(part, out / f"{cfg.scheme}_fold{fold}_{part.domains[0].name}.ckpt")
    else:
        save_checkpoint(tr.model, out / f"{cfg.scheme}_fold{fold}.ckpt")
    for e, snap in tr.snapshots.items():
        if cfg.scheme != "base":
            save_checkpoint(snap, out / f"{cfg.scheme}_fold{fold}_epoch{e:02d}.ckpt", {"epoch": e})
    write_trace_csv(out / f"{cfg.scheme}_fold{fold}_trace.csv", tr.trace)


def write_trace_csv(path: Path, trace: list[TraceRow]) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["epoch", "term", "value"])
        for r in trace:
            w.writerow([r.epoch, r.term, repr(r.value)])


def write_metrics_csv(path: Path, rows: list[MetricRow]) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["scheme", "domain", "fold", "metric", "value"])
        for r in rows:
            w.writerow([r.scheme, r.domain, r.fold, r.metric, "undefined" if r.value is None else repr(r.value)])


def summarize(rows: list[MetricRow]) -> list[dict]:
    """Mean and standard deviation per (scheme, domain, metric); undefined values excluded and counted."""
    groups: dict[tuple, list] = {}
    for r in rows:
        groups.setdefault((r.scheme, r.domain, r.metric), []).append(r.value)
    out = []
    for (s, d, m), vals in groups.items():
        defined = [v for v in vals if v is not None]
        out.append({"scheme": s, "domain": d, "metric": m,
                    "mean": float(np.mean(defined)) if defined else None,
                    "std": float(np.std(defined)) if defined else None,
                    "n": len(defined), "undefined": len(vals) - len(defined)})
    return out


def with_overrides(cfg: TrainConfig, **kw) -> TrainConfig:
    return replace(cfg, **{k: v for k, v in kw.items() if v is not None})
