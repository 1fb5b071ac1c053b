"""Command-line entry point: ``mtmdseg {generate,train,eval,embed}``.

Exit codes: 0 success, 2 usage error, 1 runtime failure. Every command writes
``manifest.json`` into its output directory before doing any heavy work and
updates it with the final status when done.

Settings resolve as command-line flags, then the optional ``--config`` file
(JSON or TOML, keys named like the long flags with dashes as underscores),
then built-in defaults. ``MTMDSEG_THREADS`` caps the BLAS thread pool.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import re
import sys
import time
from pathlib import Path


from . import __version__
from .benchmark import embedding_records
from .data import DOMAINS, exams_to_slices, generate_dataset, generate_exam, load_dataset, save_dataset
from .embedding import emit_artifacts, pca_reduce, run_tsne, separation_stats
from .metrics import ks_two_sample, per_bone_report, postprocessed_masks, slice_dice_scores
from .network import ArchConfig, SegModel, load_checkpoint
from .training import (TRAIN_SCHEMES, MetricRow, TrainConfig, run_leave_one_out, split_plan, summarize,
                       write_metrics_csv)

log = logging.getLogger("mtmdseg")

REPRO_EPOCHS = (10, 15, 20, 25, 30)

DEFAULTS = {
    "generate": {"seed": 0, "exams": 8, "size": [16, 64, 64], "force": False},
    "train": {"scheme": "dsl_contrastive", "epochs": 30, "tau": 0.1, "lam": 0.1, "seed": 0, "lr": 1e-4,
              "batch_size": 32, "base_width": 8, "depth": 4, "folds": None, "snapshot_epochs": None,
              "no_augment": False},
    "eval": {},
    "embed": {"epochs_list": [30], "perplexity": 30.0, "learning_rate": 200.0, "seed": 0},
}
REQUIRED = {"generate": ("out",), "train": ("data", "out"), "eval": ("checkpoints", "data", "out"),
            "embed": ("checkpoint", "data", "out")}


class UsageError(Exception):
    pass


def _int_list(text: str) -> list[int]:
    try:
        return [int(t) for t in re.split(r"[,\s]+", text.strip()) if t]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a comma-separated list of integers, got {text!r}")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="mtmdseg", description="Multi-domain bone segmentation experiments.")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    def cmd(name, help_):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", type=Path, help="JSON or TOML file with default settings")
        return p

    g = cmd("generate", "write a synthetic two-domain dataset")
    g.add_argument("--out", type=Path)
    g.add_argument("--seed", type=int)
    g.add_argument("--exams", type=int, help="exams per domain (default 8)")
    g.add_argument("--size", type=int, nargs=3, metavar=("Z", "H", "W"))
    g.add_argument("--force", action="store_const", const=True, help="overwrite a non-empty output directory")

    t = cmd("train", "leave-one-out training of one scheme")
    t.add_argument("--data", type=Path)
    t.add_argument("--out", type=Path)
    t.add_argument("--scheme", choices=TRAIN_SCHEMES)
    t.add_argument("--epochs", type=int)
    t.add_argument("--tau", type=float)
    t.add_argument("--lambda", dest="lam", type=float)
    t.add_argument("--seed", type=int)
    t.add_argument("--lr", type=float, help="learning rate (default 1e-4)")
    t.add_argument("--batch-size", type=int)
    t.add_argument("--base-width", type=int)
    t.add_argument("--depth", type=int)
    t.add_argument("--folds", type=_int_list, help="subset of fold indices, e.g. 0,3")
    t.add_argument("--snapshot-epochs", type=_int_list,
                   help="epochs whose weights are also saved (default: 10,15,20,25,30 up to --epochs)")
    t.add_argument("--no-augment", action="store_const", const=True)

    e = cmd("eval", "score checkpoints on their leave-one-out test exams")
    e.add_argument("--checkpoints", type=Path, nargs="+", help="checkpoint files or directories")
    e.add_argument("--data", type=Path)
    e.add_argument("--out", type=Path)

    m = cmd("embed", "PCA + t-SNE of encoder embeddings at selected epochs")
    m.add_argument("--checkpoint", type=Path, help="final checkpoint; epoch snapshots are found next to it")
    m.add_argument("--data", type=Path)
    m.add_argument("--out", type=Path)
    m.add_argument("--epochs-list", type=_int_list)
    m.add_argument("--perplexity", type=float)
    m.add_argument("--learning-rate", type=float)
    m.add_argument("--seed", type=int)
    return ap


def read_config(path: Path | None) -> dict:
    if path is None:
        return {}
    try:
        text = path.read_text()
    except OSError as e:
        raise UsageError(f"cannot read config {path}: {e}")
    try:
        if path.suffix.lower() == ".toml":
            try:
                import tomllib
            except ModuleNotFoundError:  # Python < 3.11
                import tomli as tomllib
            cfg = tomllib.loads(text)
        else:
            cfg = json.loads(text)
    except ValueError as e:
        raise UsageError(f"cannot parse config {path}: {e}")
    if not isinstance(cfg, dict):
        raise UsageError(f"config {path} must hold a table of settings")
    return {k.replace("-", "_"): v for k, v in cfg.items()}


def resolve(args: argparse.Namespace) -> dict:
    """flags > config file > defaults."""
    command = args.command
    file_cfg = read_config(args.config)
    if "lambda" in file_cfg:
        file_cfg["lam"] = file_cfg.pop("lambda")
    flags = {k: v for k, v in vars(args).items() if v is not None and k not in ("command", "config", "verbose")}
    known = set(DEFAULTS[command]) | set(REQUIRED[command])
    unknown = set(file_cfg) - known
    if unknown:
        raise UsageError(f"unknown config keys for {command}: {', '.join(sorted(unknown))}")
    settings = {**DEFAULTS[command], **file_cfg, **flags}
    missing = [k for k in REQUIRED[command] if settings.get(k) is None]
    if missing:
        raise UsageError(f"missing required setting(s): {', '.join('--' + m for m in missing)}")
    for k in ("out", "data", "checkpoint"):
        if k in settings:
            settings[k] = Path(settings[k])
    if "checkpoints" in settings:
        cps = settings["checkpoints"]
        settings["checkpoints"] = [Path(c) for c in (cps if isinstance(cps, list) else [cps])]
    return settings


# ---------------------------------------------------------------- manifest

def code_version() -> str:
    h = hashlib.sha256()
    for f in sorted(Path(__file__).parent.glob("*.py")):
        h.update(f.name.encode())
        h.update(f.read_bytes())
    return f"{__version__}+{h.hexdigest()[:12]}"


class Manifest:
    """``manifest.json`` written up-front (status "running") and finalized on exit.

    A killed process leaves status "running"; a failure caught by ``main`` becomes "failed".
    """
    active: "Manifest | None" = None
    argv: list[str] = []

    def __init__(self, out: Path, command: str, settings: dict, inputs: list[Path]):
        self.path = out / "manifest.json"
        self.t0 = time.time()
        self.data = {
            "command": command,
            "argv": list(Manifest.argv),
            "config": {k: str(v) if isinstance(v, Path) else v for k, v in settings.items()},
            "seed": settings.get("seed"),
            "code_version": code_version(),
            "inputs": [str(p) for p in inputs],
            "output": str(out),
            "started": time.strftime("%Y-%m-%dT%H:%M:%S%z", time.localtime(self.t0)),
            "status": "running",
        }
        out.mkdir(parents=True, exist_ok=True)
        Manifest.active = self
        self._write()

    def _write(self):
        self.path.write_text(json.dumps(self.data, indent=2, default=str) + "\n")

    def finish(self, status: str = "ok", **extra):
        self.data.update(status=status, wall_clock_s=round(time.time() - self.t0, 3), **extra)
        self._write()


# ---------------------------------------------------------------- generate

def cmd_generate(s: dict) -> dict:
    if s["exams"] < 3:
        raise UsageError("--exams must be at least 3 (leave-one-out needs train, validation and test exams)")
    out: Path = s["out"]
    if out.exists() and any(out.iterdir()) and not s["force"]:
        raise RuntimeError(f"output directory {out} is not empty; pass --force to overwrite")
    try:  # bad sizes surface on the first exam; check before touching the output directory
        generate_exam(s["seed"], DOMAINS[0].id, 0, tuple(s["size"]))
    except ValueError as e:
        raise UsageError(str(e))
    man = Manifest(out, "generate", s, [])
    datasets = {d.id: generate_dataset(s["seed"], d.id, s["exams"], tuple(s["size"])) for d in DOMAINS}
    sums = save_dataset(out, datasets)
    man.finish(files=sums)
    log.info("wrote %d exams to %s", len(sums), out)
    return sums


# ---------------------------------------------------------------- train

def _load_data(path: Path) -> dict:
    try:
        return load_dataset(path)
    except FileNotFoundError as e:
        raise RuntimeError(str(e))


def cmd_train(s: dict):
    datasets = _load_data(s["data"])
    input_size = next(iter(datasets.values()))[0][0].voxels.shape[1]
    snaps = s["snapshot_epochs"]
    if snaps is None:
        snaps = [e for e in REPRO_EPOCHS if e <= s["epochs"]] or [s["epochs"]]
    try:
        arch = ArchConfig(base_width=s["base_width"], depth=s["depth"], input_size=input_size)
        cfg = TrainConfig(scheme=s["scheme"], epochs=s["epochs"], batch_size=s["batch_size"],
                          learning_rate=s["lr"], tau=s["tau"], lam=s["lam"], seed=s["seed"],
                          augment=not s["no_augment"], arch=arch, snapshot_epochs=tuple(snaps))
    except ValueError as e:
        raise UsageError(str(e))
    n_folds = len(split_plan({k: len(v) for k, v in datasets.items()}))
    folds = s["folds"]
    if folds is not None and any(not 0 <= f < n_folds for f in folds):
        raise UsageError(f"--folds must lie in 0..{n_folds - 1}")
    man = Manifest(s["out"], "train", s, [s["data"]])
    domains = [DOMAINS[k] for k in datasets]
    res = run_leave_one_out(cfg, datasets, domains, folds=folds, out_dir=s["out"])
    write_metrics_csv(s["out"] / "metrics.csv", res.rows)
    man.finish(tested=res.tested)
    return res


# ---------------------------------------------------------------- eval

def _collect_checkpoints(paths: list[Path]) -> list[Path]:
    files = []
    for p in paths:
        if p.is_dir():
            files += sorted(p.glob("*.ckpt"))
        elif p.is_file():
            files.append(p)
        else:
            raise RuntimeError(f"checkpoint path {p} does not exist")
    if not files:
        raise RuntimeError("no checkpoint files found")
    return files


def check_domains(model: SegModel, datasets: dict, source) -> None:
    for d in model.domains:
        if d.id not in datasets:
            raise RuntimeError(f"{source}: domain {d.id} ({d.name}) is not in the dataset")
        top = max(int(lab.labels.max()) for _, lab in datasets[d.id])
        if top >= d.num_classes:
            raise RuntimeError(f"{source}: dataset domain {d.id} has label {top}, outside "
                               f"the checkpoint's {d.num_classes}-class label set for {d.name}")


def evaluate_models(models: list[tuple[str, int, SegModel]], datasets: dict) -> tuple[list[MetricRow], dict, dict]:
    """Score ``(scheme, fold, model)`` entries on their fold's test exams.

    Returns metric rows, per-exam reports and per-(scheme, domain) slice Dice samples.
    """
    plan = split_plan({k: len(v) for k, v in datasets.items()})
    rows, per_exam, slices = [], {}, {}
    for scheme, fold, model in models:
        if not 0 <= fold < len(plan):
            raise RuntimeError(f"{scheme}: fold {fold} does not exist for this dataset")
        for pos, d in enumerate(model.domains):
            t = plan[fold].test[d.id]
            if t is None:
                continue
            vol, lab = datasets[d.id][t]
            probs = model.predict(exams_to_slices([(vol, lab)]).images[:, None], pos)
            report = per_bone_report(lab.labels, probs, vol.spacing)
            per_exam[(scheme, d.name, fold)] = {"exam_id": vol.exam_id, **report.to_json()}
            slices.setdefault((scheme, d.name), []).extend(
                slice_dice_scores(lab.labels, postprocessed_masks(probs, probs.shape[1])).tolist())
            rows += [MetricRow(scheme, d.name, fold, m, v) for m, v in report.mean.items()]
    return rows, per_exam, slices


def ks_report(slices: dict) -> list[dict]:
    """Pairwise KS tests of slice-level Dice between schemes, per domain (self-pairs included)."""
    out = []
    for domain in sorted({d for _, d in slices}):
        schemes = sorted(s for s, d in slices if d == domain)
        for a in schemes:
            for b in schemes:
                stat, p = ks_two_sample(slices[(a, domain)], slices[(b, domain)])
                out.append({"domain": domain, "scheme_a": a, "scheme_b": b, "D": stat, "p": p,
                            "n_a": len(slices[(a, domain)]), "n_b": len(slices[(b, domain)])})
    return out


def write_eval_outputs(out: Path, rows, per_exam, slices) -> None:
    write_metrics_csv(out / "metrics.csv", rows)
    table = summarize(rows)
    with open(out / "summary.csv", "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=["scheme", "domain", "metric", "mean", "std", "n", "undefined"])
        w.writeheader()
        w.writerows(table)
    exam_dir = out / "per_exam"
    exam_dir.mkdir(exist_ok=True)
    for (scheme, domain, fold), rep in per_exam.items():
        (exam_dir / f"{scheme}_{domain}_fold{fold}.json").write_text(json.dumps(rep, indent=2) + "\n")
    (out / "ks.json").write_text(json.dumps(ks_report(slices), indent=2) + "\n")


def cmd_eval(s: dict):
    files = _collect_checkpoints(s["checkpoints"])
    datasets = _load_data(s["data"])
    man = Manifest(s["out"], "eval", s, [s["data"], *s["checkpoints"]])
    models = []
    for f in files:
        model = load_checkpoint(f)
        if "epoch" in model.meta:  # per-epoch snapshots are for embedding analysis
            continue
        if "fold" not in model.meta:
            raise RuntimeError(f"{f}: checkpoint does not record its fold")
        check_domains(model, datasets, f)
        models.append((model.meta.get("train_scheme", model.scheme), int(model.meta["fold"]), model))
    rows, per_exam, slices = evaluate_models(models, datasets)
    write_eval_outputs(s["out"], rows, per_exam, slices)
    man.finish(checkpoints=[str(f) for f in files])
    return rows


# ---------------------------------------------------------------- embed

def epoch_checkpoint(final: Path, epoch: int) -> Path:
    return final.with_name(f"{final.stem}_epoch{epoch:02d}{final.suffix}")


def cmd_embed(s: dict):
    final: Path = s["checkpoint"]
    if not final.is_file():
        raise RuntimeError(f"checkpoint {final} does not exist")
    needed = {e: epoch_checkpoint(final, e) for e in s["epochs_list"]}
    missing = [str(p) for p in needed.values() if not p.is_file()]
    if missing:
        raise RuntimeError(f"missing epoch checkpoint(s): {', '.join(missing)}")
    datasets = _load_data(s["data"])
    man = Manifest(s["out"], "embed", s, [s["data"], final, *needed.values()])
    stats = {}
    for epoch, path in needed.items():
        model = load_checkpoint(path)
        check_domains(model, datasets, path)
        fold = split_plan({k: len(v) for k, v in datasets.items()})[int(model.meta.get("fold", 0))]
        records = embedding_records(model, datasets, fold, epoch)
        res = run_tsne(pca_reduce(records, 50), perplexity=s["perplexity"], learning_rate=s["learning_rate"],
                       seed=s["seed"])
        emit_artifacts(res.coords, records, s["out"])
        st = separation_stats(records, coords=res.coords)
        st["max_entropy_error"] = float(res.entropy_error.max())
        stats[str(epoch)] = st
    (s["out"] / "separation_stats.json").write_text(json.dumps(stats, indent=2) + "\n")
    man.finish()
    return stats


COMMANDS = {"generate": cmd_generate, "train": cmd_train, "eval": cmd_eval, "embed": cmd_embed}


def _limit_threads():
    n = os.environ.get("MTMDSEG_THREADS")
    if not n:
        return None
    try:
        count = int(n)
    except ValueError:
        raise UsageError(f"MTMDSEG_THREADS must be an integer, got {n!r}")
    from threadpoolctl import threadpool_limits
    return threadpool_limits(limits=max(count, 1))


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:  # argparse: 2 on malformed flags, 0 for --help
        return int(e.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    Manifest.active = None
    Manifest.argv = list(sys.argv[1:] if argv is None else argv)
    try:
        settings = resolve(args)
        _limit_threads()
        COMMANDS[args.command](settings)
    except UsageError as e:
        parser.print_usage(sys.stderr)
        print(f"mtmdseg {args.command}: error: {e}", file=sys.stderr)
        return 2
    except Exception as e:  # noqa: BLE001 - any runtime failure maps to exit code 1
        log.debug("failure", exc_info=True)
        if Manifest.active is not None:
            Manifest.active.finish("failed", error=f"{type(e).__name__}: {e}")
        print(f"mtmdseg {args.command}: {type(e).__name__}: {e}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
