"""Hypernetwork: colored point cloud -> latent code -> field weights.

Encoder: a per-point MLP applied to every (x, y, z, r, g, b) row, followed
by a coordinatewise max over points (hence exactly permutation invariant),
then a dense map to the latent code (one head in deterministic mode, mu and
logvar heads in variational mode).

Decoder: the target weights are emitted one layer at a time ("chunked"): a
learned per-layer embedding is concatenated to the latent code, pushed
through a shared relu trunk, and a per-layer linear head sized exactly to
that layer's parameter count produces the flattened (matrix, bias) pair.

Weight-scale convention: head weights are initialized so emitted entries
start with standard deviation around 1/sqrt(fan_in) of the target layer,
which keeps freshly generated fields in a trainable regime.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .field import FieldConfig, TargetWeights, target_layout

LOGVAR_MIN = -20.0
LOGVAR_MAX = 10.0


@dataclass
class ColoredPointCloud:
    """N x 6 array: unit-sphere positions in columns 0-2, RGB in columns 3-5."""

    points: np.ndarray

    def __post_init__(self):
        pts = np.asarray(self.points)
        if pts.ndim != 2 or pts.shape[1] != 6 or pts.shape[0] < 1:
            raise ValueError(f"expected (N, 6) point array with N >= 1, got {pts.shape}")
        if not np.all(np.isfinite(pts)):
            raise ValueError("point cloud contains non-finite values")
        radii = np.linalg.norm(pts[:, :3], axis=1)
        if radii.max() > 1.01:
            raise ValueError(f"positions must lie within the unit sphere "
                             f"(max radius {radii.max():.3f})")
        if pts[:, 3:].min() < 0.0 or pts[:, 3:].max() > 1.0:
            raise ValueError("colors must lie in [0, 1]")
        self.points = pts

    @property
    def n_points(self):
        return self.points.shape[0]


@dataclass
class LatentCode:
    z: np.ndarray
    mu: np.ndarray = None       # variational mode only
    logvar: np.ndarray = None


@dataclass(frozen=True)
class HyperConfig:
    latent_dim: int = 128
    encoder_hidden: tuple = (128, 256, 512)
    decoder_hidden: tuple = (512, 512)
    embed_dim: int = 64
    variational: bool = False

    def __post_init__(self):
        if self.latent_dim < 1 or self.embed_dim < 1:
            raise ValueError("latent_dim and embed_dim must be positive")
        if not self.encoder_hidden or not self.decoder_hidden:
            raise ValueError("encoder and decoder need at least one hidden layer")

    def to_dict(self):
        return {
            "latent_dim": self.latent_dim,
            "encoder_hidden": list(self.encoder_hidden),
            "decoder_hidden": list(self.decoder_hidden),
            "embed_dim": self.embed_dim,
            "variational": self.variational,
        }

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["encoder_hidden"] = tuple(d["encoder_hidden"])
        d["decoder_hidden"] = tuple(d["decoder_hidden"])
        return cls(**d)


def kl_divergence(mu, logvar):
    """KL(N(mu, exp(logvar)) || N(0, I)), summed over dimensions; >= 0."""
    mu = np.asarray(mu, dtype=np.float64)
    logvar = np.asarray(logvar, dtype=np.float64)
    return float(-0.5 * np.sum(1.0 + logvar - mu * mu - np.exp(logvar)))


def reparameterize(mu, logvar, rng):
    """z = mu + exp(logvar / 2) * eps with eps ~ N(0, I)."""
    mu = np.asarray(mu, dtype=np.float64)
    logvar = np.clip(np.asarray(logvar, dtype=np.float64), LOGVAR_MIN, LOGVAR_MAX)
    eps = rng.standard_normal(mu.shape)
    return mu + np.exp(0.5 * logvar) * eps


def _clamp_graph(x, lo, hi):
    """Differentiable-through clamp built from relu: max(lo, min(x, hi))."""
    lo_c = ad.constant(np.full(x.shape, lo, dtype=x.dtype))
    hi_c = ad.constant(np.full(x.shape, hi, dtype=x.dtype))
    y = ad.add(ad.relu(ad.add(x, ad.negate(lo_c))), lo_c)
    return ad.add(hi_c, ad.negate(ad.relu(ad.add(hi_c, ad.negate(y)))))


def _linear(x, w, b):
    y = ad.matmul(x, w)
    return ad.add(y, ad.broadcast_rows(b, y.shape[0]))


@dataclass
class GraphBundle:
    """Nodes produced by one hypernetwork forward build."""

    leaves: dict                # name -> parameter tensor
    z: object                   # (1, D) node
    weight_nodes: list          # [(w_node, b_node)] matching target_layout
    mu: object = None
    logvar: object = None
    kl: object = None           # scalar node, variational mode only


class HyperNet:
    """One model maps every object's cloud to its field weights."""

    def __init__(self, field_config: FieldConfig, config: HyperConfig = None, rng=None):
        self.field_config = field_config
        self.config = config or HyperConfig()
        self.layout = target_layout(field_config)
        if rng is None:
            rng = np.random.default_rng(0)
        self.params = self._init_params(rng)

    # -- initialization ----------------------------------------------------

    def _init_params(self, rng):
        cfg = self.config
        dt = ad.default_dtype()
        params = {}

        def dense(name, fan_in, fan_out, std):
            params[f"{name}.w"] = rng.normal(0.0, std, (fan_in, fan_out)).astype(dt)
            params[f"{name}.b"] = np.zeros(fan_out, dtype=dt)

        fan = 6
        for i, width in enumerate(cfg.encoder_hidden):
            dense(f"enc{i}", fan, width, np.sqrt(2.0 / fan))
            fan = width
        if cfg.variational:
            dense("mu", fan, cfg.latent_dim, 1.0 / np.sqrt(fan))
            dense("logvar", fan, cfg.latent_dim, 0.01 / np.sqrt(fan))
            # start nearly deterministic; the KL term pulls logvar up
            params["logvar.b"] = np.full(cfg.latent_dim, -4.0, dtype=dt)
        else:
            dense("latent", fan, cfg.latent_dim, 1.0 / np.sqrt(fan))

        fan = cfg.latent_dim + cfg.embed_dim
        for i, width in enumerate(cfg.decoder_hidden):
            dense(f"dec{i}", fan, width, np.sqrt(2.0 / fan))
            fan = width
        for l, spec in enumerate(self.layout):
            target_std = 1.0 / np.sqrt(spec.in_dim)
            dense(f"head{l}", fan, spec.size, target_std / np.sqrt(fan))
        params["embed"] = rng.normal(0.0, 1.0, (len(self.layout), cfg.embed_dim)).astype(dt)
        return params

    def leaves(self, trainable=True):
        make = ad.parameter if trainable else ad.constant
        return {name: make(arr, name=name) for name, arr in self.params.items()}

    # -- graph builders ------------------------------------------------------

    def encode_graph(self, leaves, cloud_node):
        h = cloud_node
        for i in range(len(self.config.encoder_hidden)):
            h = ad.relu(_linear(h, leaves[f"enc{i}.w"], leaves[f"enc{i}.b"]))
        pooled = ad.reshape(ad.reduce_max(h, axis=0), (1, h.shape[1]))
        if self.config.variational:
            mu = _linear(pooled, leaves["mu.w"], leaves["mu.b"])
            logvar = _clamp_graph(_linear(pooled, leaves["logvar.w"], leaves["logvar.b"]),
                                  LOGVAR_MIN, LOGVAR_MAX)
            return mu, logvar
        return _linear(pooled, leaves["latent.w"], leaves["latent.b"])

    def reparameterize_graph(self, mu, logvar, rng):
        eps = ad.constant(rng.standard_normal(mu.shape).astype(mu.dtype))
        return ad.add(mu, ad.mul(ad.exp(ad.scale(logvar, 0.5)), eps))

    def kl_graph(self, mu, logvar):
        one = ad.constant(np.ones(mu.shape, dtype=mu.dtype))
        terms = ad.add(ad.add(one, logvar),
                       ad.negate(ad.add(ad.mul(mu, mu), ad.exp(logvar))))
        return ad.scale(ad.reduce_sum(terms), -0.5)

    def decode_graph(self, leaves, z_node):
        """Per-layer chunks: trunk(concat(z, embed_l)) -> head_l -> (w, b)."""
        weights = []
        for l, spec in enumerate(self.layout):
            embed = ad.slice_axis(leaves["embed"], 0, l, l + 1)       # (1, E)
            h = ad.concat([z_node, embed], axis=1)
            for i in range(len(self.config.decoder_hidden)):
                h = ad.relu(_linear(h, leaves[f"dec{i}.w"], leaves[f"dec{i}.b"]))
            flat = _linear(h, leaves[f"head{l}.w"], leaves[f"head{l}.b"])  # (1, size)
            n_w = spec.in_dim * spec.out_dim
            w = ad.reshape(ad.slice_axis(flat, 1, 0, n_w), (spec.in_dim, spec.out_dim))
            b = ad.reshape(ad.slice_axis(flat, 1, n_w, spec.size), (spec.out_dim,))
            weights.append((w, b))
        return weights

    def build(self, cloud: ColoredPointCloud, rng=None, trainable=True) -> GraphBundle:
        """Full forward build: cloud constants -> latent -> weight nodes.

        In variational mode the latent is sampled when `rng` is given and
        set to the posterior mean otherwise.
        """
        leaves = self.leaves(trainable)
        cloud_node = ad.constant(cloud.points, name="cloud")
        if self.config.variational:
            mu, logvar = self.encode_graph(leaves, cloud_node)
            z = self.reparameterize_graph(mu, logvar, rng) if rng is not None else mu
            kl = self.kl_graph(mu, logvar)
            return GraphBundle(leaves, z, self.decode_graph(leaves, z), mu, logvar, kl)
        z = self.encode_graph(leaves, cloud_node)
        return GraphBundle(leaves, z, self.decode_graph(leaves, z))

    # -- numpy-level API -----------------------------------------------------

    def encode(self, cloud: ColoredPointCloud, rng=None) -> LatentCode:
        leaves = self.leaves(trainable=False)
        cloud_node = ad.constant(cloud.points, name="cloud")
        if self.config.variational:
            mu_n, logvar_n = self.encode_graph(leaves, cloud_node)
            mu, logvar = mu_n.data[0].copy(), logvar_n.data[0].copy()
            z = reparameterize(mu, logvar, rng) if rng is not None else mu.copy()
            return LatentCode(z.astype(mu.dtype), mu, logvar)
        return LatentCode(self.encode_graph(leaves, cloud_node).data[0].copy())

    def decode_weights(self, code) -> TargetWeights:
        z = code.z if isinstance(code, LatentCode) else np.asarray(code)
        if z.shape != (self.config.latent_dim,):
            raise ValueError(f"latent code must have shape ({self.config.latent_dim},), "
                             f"got {z.shape}")
        leaves = self.leaves(trainable=False)
        z_node = ad.constant(z.reshape(1, -1), name="z")
        nodes = self.decode_graph(leaves, z_node)
        tw = TargetWeights([(w.data.copy(), b.data.copy()) for w, b in nodes])
        return tw.validate(self.field_config)

    def generate(self, cloud: ColoredPointCloud, rng=None) -> TargetWeights:
        """cloud -> field weights in one call (the whole point of the model)."""
        return self.decode_weights(self.encode(cloud, rng))
