"""Embedding analysis: PCA, exact t-SNE, domain-separation statistics and
CSV / bitmap emission."""
from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw
from sklearn.metrics import silhouette_score


@dataclass
class EmbeddingRecord:
    z: np.ndarray
    domain: int
    split: str = "train"
    epoch: int = 30


def _as_matrix(records_or_array) -> np.ndarray:
    if isinstance(records_or_array, np.ndarray):
        return np.asarray(records_or_array, dtype=float)
    return np.stack([np.asarray(r.z, dtype=float) for r in records_or_array])


def pca_reduce(records, target_dim: int = 50) -> np.ndarray:
    """Project centered data on its leading principal axes (decreasing variance).
    With ``D <= target_dim`` the centered data is returned unrotated."""
    x = _as_matrix(records)
    if x.shape[0] < 2:
        raise ValueError("PCA needs at least two samples")
    xc = x - x.mean(axis=0)
    if x.shape[1] <= target_dim:
        return xc
    cov = xc.T @ xc / (x.shape[0] - 1)
    vals, vecs = np.linalg.eigh(cov)
    order = np.argsort(vals)[::-1][:target_dim]
    vecs = vecs[:, order]
    # sign convention: largest-magnitude loading of each axis is positive
    signs = np.sign(vecs[np.abs(vecs).argmax(axis=0), np.arange(vecs.shape[1])])
    signs[signs == 0] = 1
    proj = xc @ (vecs * signs)
    return proj - proj.mean(axis=0)


# ---------------------------------------------------------------- t-SNE

def _sq_dists(x: np.ndarray) -> np.ndarray:
    s = (x * x).sum(axis=1)
    d = s[:, None] + s[None, :] - 2 * x @ x.T
    np.fill_diagonal(d, 0.0)
    return np.maximum(d, 0.0)


def conditional_probabilities(d2: np.ndarray, perplexity: float, tol: float = 1e-7,
                              max_iter: int = 200) -> tuple[np.ndarray, np.ndarray]:
    """Row-wise Gaussian conditionals whose Shannon entropy (nats) matches
    ``log(perplexity)``. Returns the matrix and the per-row entropy error."""
    n = d2.shape[0]
    target = np.log(perplexity)
    beta = np.ones(n)
    lo = np.full(n, 0.0)
    hi = np.full(n, np.inf)
    off = ~np.eye(n, dtype=bool)
    # per-row distances shifted by the nearest neighbour for stable exponentials
    dmin = np.where(off, d2, np.inf).min(axis=1, keepdims=True)
    ds = np.where(off, d2 - dmin, 0.0)

    def entropy(b):
        p = np.exp(-ds * b[:, None]) * off
        sp = p.sum(axis=1)
        h = np.log(sp) + b * (ds * p).sum(axis=1) / sp
        return h, p / sp[:, None]

    for _ in range(max_iter):
        h, p = entropy(beta)
        err = h - target
        if np.all(np.abs(err) < tol):
            break
        up = err > 0  # too flat -> increase precision
        lo = np.where(up, beta, lo)
        hi = np.where(up, hi, beta)
        beta = np.where(np.isinf(hi), beta * 2, (lo + hi) / 2)
    h, p = entropy(beta)
    return p, np.abs(h - target)


@dataclass
class TsneResult:
    coords: np.ndarray
    kl_trace: list[float] = field(default_factory=list)
    entropy_error: np.ndarray = field(default_factory=lambda: np.zeros(0))


def run_tsne(points, perplexity: float = 30.0, learning_rate: float = 200.0, seed: int = 0,
             n_iter: int = 1000, exaggeration: float = 12.0, exaggeration_iters: int = 250,
             momentum: tuple[float, float] = (0.5, 0.8), min_gain: float = 0.01) -> TsneResult:
    x = np.asarray(points, dtype=float)
    n = x.shape[0]
    if n < 3 * perplexity + 1:
        raise ValueError(f"t-SNE with perplexity {perplexity} needs at least {int(3 * perplexity + 1)} "
                         f"points, got {n}; lower the perplexity")
    rng = np.random.default_rng(seed)
    d2 = _sq_dists(x)
    if np.any(d2[~np.eye(n, dtype=bool)] == 0):
        warnings.warn("duplicate points in t-SNE input; adding 1e-10 jitter", RuntimeWarning)
        x = x + 1e-10 * rng.standard_normal(x.shape)
        d2 = _sq_dists(x)
    cond, ent_err = conditional_probabilities(d2, perplexity)
    p = (cond + cond.T) / (2 * n)
    p = np.maximum(p, 1e-12)

    y = 1e-4 * rng.standard_normal((n, 2))
    update = np.zeros_like(y)
    gains = np.ones_like(y)
    trace = []
    for it in range(n_iter):
        pe = p * exaggeration if it < exaggeration_iters else p
        mom = momentum[0] if it < exaggeration_iters else momentum[1]
        num = 1.0 / (1.0 + _sq_dists(y))
        np.fill_diagonal(num, 0.0)
        q = np.maximum(num / num.sum(), 1e-12)
        w = (pe - q) * num
        grad = 4.0 * (w.sum(axis=1)[:, None] * y - w @ y)
        inc = update * grad < 0
        gains = np.where(inc, gains + 0.2, gains * 0.8)
        np.clip(gains, min_gain, None, out=gains)
        update = mom * update - learning_rate * gains * grad
        y = y + update
        y = y - y.mean(axis=0)
        trace.append(float((p * np.log(p / q)).sum()))
    num = 1.0 / (1.0 + _sq_dists(y))
    np.fill_diagonal(num, 0.0)
    q = np.maximum(num / num.sum(), 1e-12)
    trace.append(float((p * np.log(p / q)).sum()))
    return TsneResult(y, trace, ent_err)


def tsne_2d(points, perplexity: float = 30.0, learning_rate: float = 200.0, seed: int = 0) -> np.ndarray:
    return run_tsne(points, perplexity, learning_rate, seed).coords


# ---------------------------------------------------------------- separation

def separation_stats(records, domains=None, coords: np.ndarray | None = None) -> dict[str, float]:
    """Within- vs cross-domain cosine similarity in embedding space, plus the
    silhouette of the 2D coordinates by domain label when given."""
    z = _as_matrix(records)
    if domains is None:
        domains = [r.domain for r in records]
    domains = np.asarray(domains)
    if np.unique(domains).size < 2:
        raise ValueError("separation statistics need at least two domains")
    norms = np.linalg.norm(z, axis=1, keepdims=True)
    zn = z / np.where(norms > 0, norms, 1.0)
    sim = zn @ zn.T
    off = ~np.eye(len(z), dtype=bool)
    same = (domains[:, None] == domains[None, :]) & off
    cross = domains[:, None] != domains[None, :]
    within = float(sim[same].mean()) if same.any() else float("nan")
    across = float(sim[cross].mean())
    out = {"within": within, "cross": across, "gap": within - across}
    if coords is not None:
        out["silhouette"] = float(silhouette_score(coords, domains))
    return out


# ---------------------------------------------------------------- artifacts

DOMAIN_COLORS = [(31, 119, 180), (214, 39, 40), (44, 160, 44), (148, 103, 189)]


def render_scatter(coords: np.ndarray, records, size=(256, 256)) -> Image.Image:
    w, h = size
    img = Image.new("RGB", (w, h), (255, 255, 255))
    draw = ImageDraw.Draw(img)
    lo, hi = coords.min(axis=0), coords.max(axis=0)
    span = np.where(hi - lo > 0, hi - lo, 1.0)
    pad = 8
    xy = pad + (coords - lo) / span * (np.array([w, h]) - 2 * pad - 1)
    for (px, py), r in zip(xy, records):
        rad = 2 if r.split == "train" else 4
        color = DOMAIN_COLORS[r.domain % len(DOMAIN_COLORS)]
        if r.split == "train":
            draw.ellipse([px - rad, py - rad, px + rad, py + rad], fill=color)
        else:
            draw.ellipse([px - rad, py - rad, px + rad, py + rad], outline=color, width=2)
    return img


def emit_artifacts(coords: np.ndarray, records, path: str | Path, image_size=(256, 256)) -> list[Path]:
    """Per-epoch CSV ``(x, y, domain, split, epoch)`` and scatter bitmap."""
    path = Path(path)
    try:
        path.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise OSError(f"cannot write artifacts to {path}: {e}") from e
    if len(coords) != len(records):
        raise ValueError(f"{len(coords)} coordinates for {len(records)} records")
    written = []
    epochs = sorted({r.epoch for r in records})
    for e in epochs:
        idx = [i for i, r in enumerate(records) if r.epoch == e]
        csv_path = path / f"embedding_epoch{e:02d}.csv"
        with open(csv_path, "w", newline="") as f:
            wr = csv.writer(f)
            wr.writerow(["x", "y", "domain", "split", "epoch"])
            for i in idx:
                r = records[i]
                wr.writerow([f"{coords[i, 0]:.6f}", f"{coords[i, 1]:.6f}", r.domain, r.split, r.epoch])
        img_path = path / f"embedding_epoch{e:02d}.bmp"
        render_scatter(coords[idx], [records[i] for i in idx], image_size).save(img_path, format="BMP")
        written += [csv_path, img_path]
    return written
