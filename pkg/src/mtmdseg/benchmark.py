"""Synthetic multi-domain benchmark: leave-one-out test Dice per scheme and seed,
plus embedding-separation statistics at the final epoch.

Results are cached in a JSON file keyed by a fingerprint of the configuration
and of the source files that influence the numbers, so an edit to the
training code invalidates stale results.
"""
from __future__ import annotations

import hashlib
import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .data import DOMAINS, exams_to_slices, generate_dataset
from .embedding import EmbeddingRecord, pca_reduce, run_tsne, separation_stats
from .network import ArchConfig, SegModel
from .tensor import Tensor, no_grad
from .training import Fold, TrainConfig, run_leave_one_out, split_plan

log = logging.getLogger(__name__)

_SOURCES = ("tensor.py", "optim.py", "dsbn.py", "network.py", "losses.py", "data.py",
            "metrics.py", "training.py", "embedding.py", "benchmark.py")


@dataclass(frozen=True)
class BenchmarkConfig:
    schemes: tuple[str, ...] = ("base", "dsl", "dsl_contrastive")
    seeds: tuple[int, ...] = (0, 1, 2)
    num_exams: int = 8
    size: tuple[int, int, int] = (16, 64, 64)
    base_width: int = 8
    depth: int = 4
    epochs: int = 30
    batch_size: int = 32
    learning_rate: float = 1e-3
    tau: float = 0.1
    lam: float = 0.1
    perplexity: float = 30.0
    embedding_fold: int = 0

    def train_config(self, scheme: str, seed: int) -> TrainConfig:
        arch = ArchConfig(base_width=self.base_width, depth=self.depth, input_size=self.size[1])
        return TrainConfig(scheme=scheme, epochs=self.epochs, batch_size=self.batch_size,
                           learning_rate=self.learning_rate, tau=self.tau, lam=self.lam, seed=seed,
                           arch=arch, snapshot_epochs=(self.epochs,))


def fingerprint(cfg: BenchmarkConfig) -> str:
    h = hashlib.sha256(json.dumps(asdict(cfg), sort_keys=True).encode())
    here = Path(__file__).parent
    for name in _SOURCES:
        h.update((here / name).read_bytes())
    return h.hexdigest()


def embedding_records(model: SegModel, datasets: dict, fold: Fold, epoch: int) -> list[EmbeddingRecord]:
    """Encoder embeddings of the fold's training and validation slices."""
    records = []
    with no_grad():
        for k in sorted(datasets):
            for split, idx in (("train", fold.train[k]), ("val", (fold.val[k],))):
                s = exams_to_slices(datasets[k], idx)
                z = model.embed(Tensor(s.images[:, None].astype(model.nets[0].dtype)), k).data
                records += [EmbeddingRecord(v.astype(np.float64), k, split, epoch) for v in z]
    return records


def embedding_analysis(model: SegModel, datasets: dict, fold: Fold, epoch: int,
                       perplexity: float, seed: int = 0) -> dict:
    records = embedding_records(model, datasets, fold, epoch)
    res = run_tsne(pca_reduce(records, 50), perplexity=perplexity, seed=seed)
    stats = separation_stats(records, coords=res.coords)
    stats["max_entropy_error"] = float(res.entropy_error.max())
    stats["n_points"] = len(records)
    return stats


@dataclass
class BenchmarkResults:
    fingerprint: str
    config: dict
    runs: dict[str, dict] = field(default_factory=dict)  # key "scheme/seed"

    def dice(self, scheme: str, seed: int, domain: str) -> float:
        """Mean test Dice over folds for one scheme, seed and domain."""
        return float(np.mean(self.runs[f"{scheme}/{seed}"]["dice"][domain]))

    def embedding(self, scheme: str, seed: int) -> dict:
        return self.runs[f"{scheme}/{seed}"]["embedding"]

    @property
    def total_seconds(self) -> float:
        return float(sum(r["seconds"] for r in self.runs.values()))


def _load(path: Path, fp: str, cfg: BenchmarkConfig) -> BenchmarkResults:
    if path.exists():
        raw = json.loads(path.read_text())
        if raw.get("fingerprint") == fp:
            return BenchmarkResults(**raw)
        log.info("cached benchmark at %s is stale; starting over", path)
    return BenchmarkResults(fp, asdict(cfg))


def run_benchmark(cfg: BenchmarkConfig, cache: str | Path) -> BenchmarkResults:
    """Run (or resume) every scheme/seed pair; each finished pair is persisted."""
    cache = Path(cache)
    cache.parent.mkdir(parents=True, exist_ok=True)
    res = _load(cache, fingerprint(cfg), cfg)
    for seed in cfg.seeds:
        datasets = None
        for scheme in cfg.schemes:
            key = f"{scheme}/{seed}"
            if key in res.runs:
                continue
            if datasets is None:
                datasets = {d.id: generate_dataset(seed, d.id, cfg.num_exams, cfg.size) for d in DOMAINS}
            t0 = time.perf_counter()
            tc = cfg.train_config(scheme, seed)
            loo = run_leave_one_out(tc, datasets, list(DOMAINS), keep_models=True)
            entry = {
                "dice": {d.name: [r.value for r in loo.rows if r.domain == d.name and r.metric == "dice"]
                         for d in DOMAINS},
                "slice_dice": loo.slice_dice,
                "tested": loo.tested,
                "trace": {},
            }
            for row in loo.traces[cfg.embedding_fold]:
                entry["trace"].setdefault(row.term, []).append(row.value)
            if scheme != "base":
                fold = split_plan({k: len(v) for k, v in datasets.items()})[cfg.embedding_fold]
                snap = loo.snapshots[cfg.embedding_fold][cfg.epochs]
                entry["embedding"] = embedding_analysis(snap, datasets, fold, cfg.epochs, cfg.perplexity)
            entry["seconds"] = time.perf_counter() - t0
            res.runs[key] = entry
            cache.write_text(json.dumps(asdict(res), indent=1))
            log.info("%s done in %.0f s", key, entry["seconds"])
    return res
