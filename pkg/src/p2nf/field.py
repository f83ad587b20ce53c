"""The per-object radiance-field MLP evaluated with externally supplied weights.

The field maps (position, view direction) to (color, density).  Weights are
never owned by this module: they arrive either as plain numpy arrays (for
evaluation) or as autodiff tensors generated by the hypernetwork (so that
gradients can flow through the weights themselves).

Architecture: a relu trunk over the positionally encoded position, with one
skip connection re-injecting the encoding mid-trunk; a head emitting density
plus a feature vector; a final layer mapping feature + encoded direction to
color.  Density is relu-activated (>= 0) and depends only on position; color
is sigmoid-activated (in [0,1]^3).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad

# paper-scale architecture is available by flag; the desk scale keeps the
# generated weight count small enough for CPU training
DESK = dict(trunk_depth=4, trunk_width=64, feature_dim=64)
PAPER = dict(trunk_depth=8, trunk_width=256, feature_dim=256)


@dataclass(frozen=True)
class FieldConfig:
    trunk_depth: int = 4
    trunk_width: int = 64
    feature_dim: int = 64
    pos_freqs: int = 10
    dir_freqs: int = 4
    skip_layers: tuple = None  # default: one skip at trunk_depth // 2

    def __post_init__(self):
        if self.skip_layers is None:
            mid = self.trunk_depth // 2
            object.__setattr__(self, "skip_layers", (mid,) if mid > 0 else ())
        else:
            object.__setattr__(self, "skip_layers", tuple(sorted(set(self.skip_layers))))
        if min(self.trunk_depth, self.trunk_width, self.feature_dim) <= 0:
            raise ValueError("all dimensions must be positive")
        if self.pos_freqs < 0 or self.dir_freqs < 0:
            raise ValueError("frequency counts must be non-negative")
        for s in self.skip_layers:
            if not (0 < s < self.trunk_depth):
                raise ValueError(f"skip layer {s} outside (0, {self.trunk_depth})")

    @property
    def pos_dim(self):
        return 3 * (1 + 2 * self.pos_freqs)

    @property
    def dir_dim(self):
        return 3 * (1 + 2 * self.dir_freqs)

    def to_dict(self):
        return {
            "trunk_depth": self.trunk_depth,
            "trunk_width": self.trunk_width,
            "feature_dim": self.feature_dim,
            "pos_freqs": self.pos_freqs,
            "dir_freqs": self.dir_freqs,
            "skip_layers": list(self.skip_layers),
        }

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["skip_layers"] = tuple(d.get("skip_layers") or ())
        if not d["skip_layers"]:
            d.pop("skip_layers")
        return cls(**d)


@dataclass
class TargetWeights:
    """Ordered (matrix, bias) pairs matching `target_layout` of some config."""

    layers: list  # list of (w, b) numpy pairs

    def validate(self, config: FieldConfig):
        layout = target_layout(config)
        if len(self.layers) != len(layout):
            raise ValueError(f"expected {len(layout)} layers, got {len(self.layers)}")
        for (w, b), spec in zip(self.layers, layout):
            if w.shape != (spec.in_dim, spec.out_dim) or b.shape != (spec.out_dim,):
                raise ValueError(f"layer '{spec.name}' has shape {w.shape}/{b.shape}, "
                                 f"expected ({spec.in_dim}, {spec.out_dim})/({spec.out_dim},)")
            if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
                raise ValueError(f"layer '{spec.name}' contains non-finite entries")
        return self

    def parameter_count(self):
        return sum(w.size + b.size for w, b in self.layers)


@dataclass(frozen=True)
class LayerSpec:
    name: str
    in_dim: int
    out_dim: int

    @property
    def size(self):
        return self.in_dim * self.out_dim + self.out_dim


def target_layout(config: FieldConfig):
    """Deterministic list of layer shapes for the field MLP."""
    layers = []
    width = config.trunk_width
    for i in range(config.trunk_depth):
        in_dim = config.pos_dim if i == 0 else width
        if i in config.skip_layers:
            in_dim += config.pos_dim
        layers.append(LayerSpec(f"trunk{i}", in_dim, width))
    layers.append(LayerSpec("sigma_feature", width, 1 + config.feature_dim))
    layers.append(LayerSpec("color", config.feature_dim + config.dir_dim, 3))
    return layers


def positional_encode(v, n_freqs):
    """Concatenate v with sin/cos of v scaled by pi * 2^j, j = 0..n_freqs-1.

    Accepts (..., k) arrays; output has last dimension k * (1 + 2 * n_freqs),
    laid out as [v, sin(pi v), cos(pi v), sin(2 pi v), cos(2 pi v), ...].
    """
    v = np.asarray(v)
    if n_freqs == 0:
        return v
    k = v.shape[-1]
    freqs = (np.pi * 2.0 ** np.arange(n_freqs)).astype(v.dtype)
    ang = v[..., None, :] * freqs[:, None]                  # (..., n_freqs, k)
    enc = np.stack([np.sin(ang), np.cos(ang)], axis=-2)     # (..., n_freqs, 2, k)
    return np.concatenate([v, enc.reshape(v.shape[:-1] + (2 * n_freqs * k,))], axis=-1)


def _linear(x, w, b):
    y = ad.matmul(x, w)
    return ad.add(y, ad.broadcast_rows(b, y.shape[0]))


def field_graph(weights, x_enc, d_enc, config: FieldConfig):
    """Build field evaluation nodes for a batch of encoded inputs.

    `weights` is a list of (w, b) pairs where entries are autodiff tensors
    (generated by the hypernetwork, or constants wrapped from numpy).
    `x_enc` (n, pos_dim) and `d_enc` (n, dir_dim) are tensors of encoded
    positions/directions.  Returns (sigma (n, 1), rgb (n, 3)) nodes.
    """
    layout = target_layout(config)
    if len(weights) != len(layout):
        raise ad.GraphError(f"expected {len(layout)} weight pairs, got {len(weights)}")

    h = x_enc
    for i in range(config.trunk_depth):
        if i in config.skip_layers:
            h = ad.concat([h, x_enc], axis=1)
        w, b = weights[i]
        h = ad.relu(_linear(h, w, b))

    w, b = weights[config.trunk_depth]
    head = _linear(h, w, b)  # (n, 1 + feature_dim), pre-activation
    sigma = ad.relu(ad.slice_axis(head, 1, 0, 1))
    feat = ad.slice_axis(head, 1, 1, 1 + config.feature_dim)

    w, b = weights[config.trunk_depth + 1]
    rgb = ad.sigmoid(_linear(ad.concat([feat, d_enc], axis=1), w, b))
    return sigma, rgb


def as_weight_nodes(tw: TargetWeights):
    """Wrap numpy target weights as constant graph leaves."""
    return [(ad.constant(w, name=f"tw{i}.w"), ad.constant(b, name=f"tw{i}.b"))
            for i, (w, b) in enumerate(tw.layers)]


def eval_field_batch(tw: TargetWeights, xs, ds, config: FieldConfig, chunk=65536):
    """Evaluate the field at positions `xs` with unit directions `ds`.

    Returns (sigma (n,), rgb (n, 3)) as numpy arrays in the current
    precision mode.  Evaluation is chunked to bound peak memory.
    """
    tw.validate(config)
    xs = np.asarray(xs, dtype=ad.default_dtype()).reshape(-1, 3)
    ds = np.asarray(ds, dtype=ad.default_dtype()).reshape(-1, 3)
    if xs.shape != ds.shape:
        raise ValueError(f"positions {xs.shape} and directions {ds.shape} differ")
    nodes = as_weight_nodes(tw)
    sig_out = np.empty(xs.shape[0], dtype=ad.default_dtype())
    rgb_out = np.empty((xs.shape[0], 3), dtype=ad.default_dtype())
    for lo in range(0, xs.shape[0], chunk):
        hi = min(lo + chunk, xs.shape[0])
        x_enc = ad.constant(positional_encode(xs[lo:hi], config.pos_freqs))
        d_enc = ad.constant(positional_encode(ds[lo:hi], config.dir_freqs))
        sigma, rgb = field_graph(nodes, x_enc, d_enc, config)
        sig_out[lo:hi] = sigma.data[:, 0]
        rgb_out[lo:hi] = rgb.data
    return sig_out, rgb_out


def eval_field(tw: TargetWeights, x, d, config: FieldConfig):
    """Color and density at a single position/direction.

    Returns (color (3,), density scalar); density is independent of `d` by
    construction (the direction enters after the density head).
    """
    d = np.asarray(d, dtype=np.float64)
    if abs(np.linalg.norm(d) - 1.0) > 1e-5:
        raise ValueError("view direction must be unit length")
    sigma, rgb = eval_field_batch(tw, np.asarray(x).reshape(1, 3), d.reshape(1, 3), config)
    return rgb[0], float(sigma[0])


def random_weights(config: FieldConfig, rng, std_scale=1.0) -> TargetWeights:
    """He-style random weights, mostly for tests and benchmarks."""
    layers = []
    for spec in target_layout(config):
        std = std_scale / np.sqrt(spec.in_dim)
        w = rng.normal(0.0, std, size=(spec.in_dim, spec.out_dim))
        b = np.zeros(spec.out_dim)
        layers.append((w.astype(ad.default_dtype()), b.astype(ad.default_dtype())))
    return TargetWeights(layers)


def zero_weights(config: FieldConfig) -> TargetWeights:
    dt = ad.default_dtype()
    return TargetWeights([
        (np.zeros((s.in_dim, s.out_dim), dtype=dt), np.zeros(s.out_dim, dtype=dt))
        for s in target_layout(config)
    ])
