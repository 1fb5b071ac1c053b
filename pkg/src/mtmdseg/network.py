"""UNet with shared filters, per-domain normalization and per-domain heads.

Three parameter-sharing schemes are supported by :func:`build_model`:

* ``base``  -- one independent network per domain;
* ``joint`` -- a single network, a single normalization set and one head
  over the union label space (background shared);
* ``dsl``   -- shared convolutions, domain-specific normalization and heads.
"""
from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .dsbn import DSBN
from .tensor import Tensor

SCHEMES = ("base", "joint", "dsl")


@dataclass(frozen=True)
class DomainSpec:
    id: int
    name: str
    label_set: tuple[str, ...]
    n_samples: int = 0

    def __post_init__(self):
        if len(self.label_set) < 2:
            raise ValueError(f"domain {self.name!r} needs background plus at least one class")

    @property
    def num_classes(self) -> int:
        return len(self.label_set)


ANKLE = DomainSpec(0, "ankle", ("background", "calcaneus", "talus", "tibia"))
SHOULDER = DomainSpec(1, "shoulder", ("background", "scapula", "humerus"))


@dataclass(frozen=True)
class ArchConfig:
    base_width: int = 8
    depth: int = 4
    input_size: int = 64
    in_channels: int = 1

    def __post_init__(self):
        if self.input_size % (2 ** self.depth):
            raise ValueError(f"input_size {self.input_size} not divisible by 2**{self.depth}")

    @property
    def widths(self) -> list[int]:
        return [self.base_width * 2 ** s for s in range(self.depth + 1)]

    @property
    def embedding_dim(self) -> int:
        return self.widths[-1]


# full-resolution configuration (256x256 slices, 512-d embedding)
REFERENCE_ARCH = ArchConfig(base_width=32, depth=4, input_size=256)


def _kaiming_uniform(rng: np.random.Generator, shape, fan_in: int, dtype) -> Tensor:
    bound = np.sqrt(6.0 / fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape).astype(dtype), requires_grad=True)


class UNet:
    """One UNet. ``num_bn`` normalization rows, one head per entry of ``head_classes``."""

    def __init__(self, cfg: ArchConfig, num_bn: int, head_classes: list[int],
                 rng: np.random.Generator, dtype=np.float32):
        self.cfg = cfg
        self.dtype = dtype
        ws = cfg.widths
        self.shared: dict[str, Tensor] = {}
        self.bns: dict[str, DSBN] = {}
        cin = cfg.in_channels

        def double_conv(prefix, ci, co):
            for j, c_in in enumerate((ci, co)):
                self.shared[f"{prefix}.conv{j}.w"] = _kaiming_uniform(rng, (co, c_in, 3, 3), c_in * 9, dtype)
                self.shared[f"{prefix}.conv{j}.b"] = Tensor(np.zeros(co, dtype=dtype), requires_grad=True)
                self.bns[f"{prefix}.bn{j}"] = DSBN(co, num_bn, dtype=dtype)

        for s in range(cfg.depth):
            double_conv(f"enc{s}", cin, ws[s])
            cin = ws[s]
        double_conv("bottleneck", cin, ws[-1])
        for s in reversed(range(cfg.depth)):
            self.shared[f"up{s}.w"] = _kaiming_uniform(rng, (ws[s + 1], ws[s], 2, 2), ws[s + 1], dtype)
            self.shared[f"up{s}.b"] = Tensor(np.zeros(ws[s], dtype=dtype), requires_grad=True)
            double_conv(f"dec{s}", 2 * ws[s], ws[s])
        self.heads: list[tuple[Tensor, Tensor]] = []
        for nc in head_classes:
            w = _kaiming_uniform(rng, (nc, ws[0], 1, 1), ws[0], dtype)
            w.data *= np.asarray(1 / np.sqrt(2), dtype=dtype)  # linear output, gain 1
            self.heads.append((w, Tensor(np.zeros(nc, dtype=dtype), requires_grad=True)))

    # -- parameter views
    def encoder_names(self) -> list[str]:
        return [k for k in self.shared if k.startswith(("enc", "bottleneck"))]

    def parameters(self, bn: int | None = None, head: int | None = None) -> list[Tensor]:
        ps = list(self.shared.values())
        for layer in self.bns.values():
            ps += layer.parameters(bn)
        hs = range(len(self.heads)) if head is None else [head]
        for h in hs:
            ps += list(self.heads[h])
        return ps

    def named_blocks(self):
        """Ordered (name, array) pairs: every persisted array in declaration order."""
        for k, t in self.shared.items():
            yield k, t.data
        for k, layer in self.bns.items():
            for d in range(layer.num_domains):
                yield f"{k}.gamma[{d}]", layer.gamma[d].data
                yield f"{k}.beta[{d}]", layer.beta[d].data
                yield f"{k}.running_mean[{d}]", layer.running_mean[d]
                yield f"{k}.running_var[{d}]", layer.running_var[d]
        for i, (w, b) in enumerate(self.heads):
            yield f"head[{i}].w", w.data
            yield f"head[{i}].b", b.data

    # -- forward passes
    def _block(self, prefix: str, x: Tensor, bn: int, train: bool) -> Tensor:
        for j in range(2):
            x = T.conv2d(x, self.shared[f"{prefix}.conv{j}.w"], self.shared[f"{prefix}.conv{j}.b"])
            x = self.bns[f"{prefix}.bn{j}"](x, bn, train)
            x = T.relu(x)
        return x

    def _check_input(self, x: Tensor):
        s = self.cfg.input_size
        if x.ndim != 4 or x.shape[1] != self.cfg.in_channels or x.shape[2:] != (s, s):
            raise T.ShapeError("UNet", "input", (None, self.cfg.in_channels, s, s), x.shape)

    def encode(self, x: Tensor, bn: int, train: bool) -> tuple[Tensor, list[Tensor]]:
        self._check_input(x)
        skips = []
        for s in range(self.cfg.depth):
            x = self._block(f"enc{s}", x, bn, train)
            skips.append(x)
            x = T.maxpool2d(x)
        return self._block("bottleneck", x, bn, train), skips

    def logits(self, x: Tensor, bn: int, head: int, train: bool) -> tuple[Tensor, Tensor]:
        """Head logits and the bottleneck feature map (for the embedding tap)."""
        feat, skips = self.encode(x, bn, train)
        y = feat
        for s in reversed(range(self.cfg.depth)):
            y = T.transposed_conv2d(y, self.shared[f"up{s}.w"], self.shared[f"up{s}.b"])
            y = T.concat([skips[s], y], axis=1)
            y = self._block(f"dec{s}", y, bn, train)
        w, b = self.heads[head]
        return T.conv2d(y, w, b), feat


@dataclass
class Route:
    net: int
    bn: int
    head: int
    channels: list[int]  # head channels forming this domain's label space


@dataclass
class SegModel:
    """A scheme-specific collection of UNets plus domain routing."""

    scheme: str
    domains: list[DomainSpec]
    cfg: ArchConfig
    nets: list[UNet]
    routes: list[Route]
    seed: int = 0
    meta: dict = field(default_factory=dict)

    def _route(self, domain: int) -> Route:
        if not 0 <= domain < len(self.routes):
            raise IndexError(f"unknown domain {domain}; model has {len(self.routes)} domains")
        return self.routes[domain]

    def head_classes(self, domain: int) -> int:
        r = self._route(domain)
        return self.nets[r.net].heads[r.head][0].shape[0]

    def forward_with_embedding(self, x: Tensor, domain: int, train: bool = True) -> tuple[Tensor, Tensor]:
        r = self._route(domain)
        logits, feat = self.nets[r.net].logits(x, r.bn, r.head, train)
        return T.softmax_channels(logits), T.global_max_pool(feat)

    def forward(self, x: Tensor, domain: int, train: bool = True) -> Tensor:
        """Per-pixel class probabilities over the routed head's label space."""
        return self.forward_with_embedding(x, domain, train)[0]

    def embed(self, x: Tensor, domain: int, train: bool = False) -> Tensor:
        r = self._route(domain)
        feat, _ = self.nets[r.net].encode(x, r.bn, train)
        return T.global_max_pool(feat)

    def domain_probs(self, probs: np.ndarray, domain: int) -> np.ndarray:
        """Restrict head probabilities to the domain's own classes (background first)."""
        return probs[:, self._route(domain).channels]

    def predict(self, x: np.ndarray, domain: int, batch: int = 16) -> np.ndarray:
        """Eval-mode class maps ``[N, |C_k|, H, W]`` in the domain's label space."""
        out = []
        with T.no_grad():
            for i in range(0, len(x), batch):
                xb = Tensor(np.asarray(x[i:i + batch], dtype=self.nets[0].dtype))
                out.append(self.domain_probs(self.forward(xb, domain, train=False).data, domain))
        return np.concatenate(out, axis=0)

    def parameters(self, domain: int | None = None) -> list[Tensor]:
        if domain is None:
            return [p for net in self.nets for p in net.parameters()]
        r = self._route(domain)
        return self.nets[r.net].parameters(r.bn, r.head)

    def encoder_parameters(self, domain: int) -> list[Tensor]:
        r = self._route(domain)
        net = self.nets[r.net]
        ps = [net.shared[k] for k in net.encoder_names()]
        for k, layer in net.bns.items():
            if k.startswith(("enc", "bottleneck")):
                ps += layer.parameters(r.bn)
        return ps

    def num_parameters(self) -> int:
        return sum(p.data.size for p in self.parameters())

    def num_bn_parameters(self) -> int:
        return sum(p.data.size for net in self.nets for layer in net.bns.values() for p in layer.parameters())

    def split(self) -> list[SegModel]:
        """Single-domain views of a ``base`` model (one per domain)."""
        if self.scheme != "base":
            raise ValueError("only base models split into independent per-domain models")
        return [SegModel("base", [d], self.cfg, [self.nets[k]], [Route(0, 0, 0, self.routes[k].channels)],
                         self.seed, dict(self.meta)) for k, d in enumerate(self.domains)]


def build_model(scheme: str, domains: list[DomainSpec], cfg: ArchConfig | None = None,
                seed: int = 0, dtype=np.float32) -> SegModel:
    cfg = cfg or ArchConfig()
    if scheme not in SCHEMES:
        raise ValueError(f"unknown scheme {scheme!r}; expected one of {SCHEMES}")
    if not domains:
        raise ValueError("build_model needs at least one domain")
    rng = np.random.default_rng(seed)
    K = len(domains)
    if scheme == "base":
        nets = [UNet(cfg, 1, [d.num_classes], rng, dtype) for d in domains]
        routes = [Route(k, 0, 0, list(range(d.num_classes))) for k, d in enumerate(domains)]
    elif scheme == "joint":
        routes, offset = [], 1
        for d in domains:
            routes.append(Route(0, 0, 0, [0] + list(range(offset, offset + d.num_classes - 1))))
            offset += d.num_classes - 1
        nets = [UNet(cfg, 1, [offset], rng, dtype)]
    else:
        nets = [UNet(cfg, K, [d.num_classes for d in domains], rng, dtype)]
        routes = [Route(0, k, k, list(range(d.num_classes))) for k, d in enumerate(domains)]
    return SegModel(scheme, list(domains), cfg, nets, routes, seed)


# ---------------------------------------------------------------- checkpoint IO

CKPT_MAGIC = b"MDCKPT1\0"


def save_checkpoint(model: SegModel, path: str | Path, extra: dict | None = None) -> None:
    blocks = [(f"net{i}.{name}", arr) for i, net in enumerate(model.nets) for name, arr in net.named_blocks()]
    header = {
        "scheme": model.scheme,
        "arch": asdict(model.cfg),
        "domains": [{"id": d.id, "name": d.name, "label_set": list(d.label_set), "n_samples": d.n_samples}
                    for d in model.domains],
        "seed": model.seed,
        "routes": [asdict(r) for r in model.routes],
        "blocks": [{"name": n, "shape": list(a.shape)} for n, a in blocks],
        "meta": {**model.meta, **(extra or {})},
    }
    hb = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(CKPT_MAGIC)
        f.write(struct.pack("<I", len(hb)))
        f.write(hb)
        for _, arr in blocks:
            f.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def load_checkpoint(path: str | Path, dtype=np.float32) -> SegModel:
    raw = Path(path).read_bytes()
    if raw[:len(CKPT_MAGIC)] != CKPT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    (hlen,) = struct.unpack_from("<I", raw, len(CKPT_MAGIC))
    start = len(CKPT_MAGIC) + 4
    header = json.loads(raw[start:start + hlen])
    domains = [DomainSpec(d["id"], d["name"], tuple(d["label_set"]), d["n_samples"]) for d in header["domains"]]
    cfg = ArchConfig(**header["arch"])
    model = build_model(header["scheme"], domains, cfg, header["seed"], dtype)
    model.meta = header["meta"]
    arrays = {}
    off = start + hlen
    for b in header["blocks"]:
        n = int(np.prod(b["shape"]))
        if off + 4 * n > len(raw):
            raise ValueError(f"{path}: truncated payload")
        arrays[b["name"]] = np.frombuffer(raw, dtype="<f4", count=n, offset=off).reshape(b["shape"])
        off += 4 * n
    for i, net in enumerate(model.nets):
        for name, arr in net.named_blocks():
            arr[...] = arrays[f"net{i}.{name}"]
    return model
