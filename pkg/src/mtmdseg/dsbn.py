"""Domain-specific batch normalization.

Each domain owns its affine parameters and its running statistics; the
domain index passed at call time selects which row is used and (in train
mode) which running statistics get updated.
"""
from __future__ import annotations

import numpy as np

from .tensor import ShapeError, Tensor, _make


class DSBN:
    def __init__(self, num_features: int, num_domains: int = 1, eps: float = 1e-5,
                 momentum: float = 0.1, dtype=np.float64):
        if num_features < 1 or num_domains < 1:
            raise ValueError("num_features and num_domains must be positive")
        if not 0 < momentum < 1:
            raise ValueError("momentum must lie in (0, 1)")
        self.num_features = num_features
        self.num_domains = num_domains
        self.eps = eps
        self.momentum = momentum
        self.gamma = [Tensor(np.ones(num_features, dtype=dtype), requires_grad=True) for _ in range(num_domains)]
        self.beta = [Tensor(np.zeros(num_features, dtype=dtype), requires_grad=True) for _ in range(num_domains)]
        self.running_mean = np.zeros((num_domains, num_features), dtype=dtype)
        self.running_var = np.ones((num_domains, num_features), dtype=dtype)

    def parameters(self, domain: int | None = None) -> list[Tensor]:
        ks = range(self.num_domains) if domain is None else [domain]
        return [t for k in ks for t in (self.gamma[k], self.beta[k])]

    def __call__(self, x: Tensor, domain: int, train: bool = True) -> Tensor:
        return dsbn_forward(self, x, domain, train)


def dsbn_forward(layer: DSBN, x: Tensor, domain: int, train: bool = True) -> Tensor:
    if not 0 <= domain < layer.num_domains:
        raise IndexError(f"domain index {domain} out of range for {layer.num_domains} domains")
    if x.ndim != 4:
        raise ShapeError("dsbn", "rank", 4, x.ndim)
    n, m, h, w = x.shape
    if m != layer.num_features:
        raise ShapeError("dsbn", "M", layer.num_features, m)
    gamma, beta = layer.gamma[domain], layer.beta[domain]
    g4 = gamma.data[None, :, None, None]
    b4 = beta.data[None, :, None, None]

    if not train:
        inv_std = 1.0 / np.sqrt(layer.running_var[domain] + layer.eps)
        xhat = (x.data - layer.running_mean[domain][None, :, None, None]) * inv_std[None, :, None, None]

        def back_eval(g):
            return (g * (g4 * inv_std[None, :, None, None]),
                    (g * xhat).sum(axis=(0, 2, 3)),
                    g.sum(axis=(0, 2, 3)))

        return _make(g4 * xhat + b4, (x, gamma, beta), back_eval)

    count = n * h * w
    if count < 2:
        raise ValueError("train-mode batch normalization needs at least 2 values per feature")
    mu = x.data.mean(axis=(0, 2, 3))
    centered = x.data - mu[None, :, None, None]
    var = (centered * centered).mean(axis=(0, 2, 3))
    inv_std = 1.0 / np.sqrt(var + layer.eps)
    xhat = centered * inv_std[None, :, None, None]

    mom = layer.momentum
    layer.running_mean[domain] = (1 - mom) * layer.running_mean[domain] + mom * mu
    layer.running_var[domain] = (1 - mom) * layer.running_var[domain] + mom * var * (count / (count - 1))

    def back_train(g):
        dgamma = (g * xhat).sum(axis=(0, 2, 3))
        dbeta = g.sum(axis=(0, 2, 3))
        dx = None
        if x.requires_grad:
            scale = (gamma.data * inv_std / count)[None, :, None, None]
            dx = scale * (count * g - dbeta[None, :, None, None] - xhat * dgamma[None, :, None, None])
        return dx, dgamma, dbeta

    return _make(g4 * xhat + b4, (x, gamma, beta), back_train)
