"""Optimization loop: one hypernetwork serves every object in the dataset.

Each step samples a batch of pixel rays uniformly across one object's posed
views, generates that object's field weights from its point cloud, renders
the rays differentiably, and applies a single Adam update to the
hypernetwork from the mean squared color error (plus a warmed-up KL term in
generative mode).  Per-object state never outlives the step; only the
derived field weights exist per object, never stored parameters.

Reproducibility contract: one generator (seeded from the config, saved in
checkpoints) drives ray choice, stratified jitter, and latent noise, in that
order within a step; the per-epoch object shuffle is derived statelessly
from (seed, epoch).  Training 5 steps, checkpointing, and training 5 more is
bit-identical to training 10 straight in float64 mode.

Checkpoint file format: magic "P2NF", u32 version, u32 manifest length, a
canonical-JSON manifest (configs, step count, rng state, tensor name/dtype/
shape records), then the raw little-endian tensor payloads in manifest
order.
"""

from __future__ import annotations

import json
import logging
import math
import os
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .cameras import rays_for_image
from .field import FieldConfig
from .hypernet import HyperConfig, HyperNet
from .render import RenderConfig, composite_graph, psnr, render_rays_graph

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"P2NF"
CHECKPOINT_VERSION = 1


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 1000
    learning_rate: float = 5e-4
    lr_decay_to: float = 0.1            # exponential decay to this fraction over the run
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    rays_per_step: int = 1024
    objects_per_step: int = 1
    seed: int = 0
    mode: str = "deterministic"         # deterministic | generative
    beta_kl: float = 1e-4
    kl_warmup_frac: float = 0.1
    render: RenderConfig = RenderConfig()
    log_every: int = 200
    checkpoint_every: int = 0           # 0 = final checkpoint only

    def __post_init__(self):
        # learning_rate 0 is allowed as the degenerate no-update optimizer
        if self.steps <= 0 or self.learning_rate < 0 or self.rays_per_step <= 0:
            raise ValueError("steps and rays_per_step must be positive, "
                             "learning_rate non-negative")
        if self.mode not in ("deterministic", "generative"):
            raise ValueError(f"unknown mode '{self.mode}'")

    @property
    def warmup_steps(self):
        return min(500, max(1, self.steps // 20))

    def lr_at(self, step):
        # brief linear warmup keeps the first Adam steps from blowing up the
        # generated weights (head fan-in amplifies coherent updates), then
        # exponential decay to lr_decay_to over the run
        warm = min(1.0, (step + 1) / self.warmup_steps)
        return self.learning_rate * warm * self.lr_decay_to ** (step / self.steps)

    def beta_at(self, step):
        if self.mode != "generative":
            return 0.0
        warm = max(1.0, self.kl_warmup_frac * self.steps)
        return self.beta_kl * min(1.0, step / warm)


def adam_update(params, grads, moments, step, cfg: TrainConfig, lr=None):
    """Bias-corrected Adam; returns (new_params, new_moments).

    `step` is the 1-based update index; entries without a gradient pass
    through untouched.
    """
    m, v = moments
    lr = cfg.lr_at(step - 1) if lr is None else lr
    b1, b2, eps = cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps
    new_p, new_m, new_v = dict(params), dict(m), dict(v)
    for name, g in grads.items():
        p = params[name]
        g = g.astype(p.dtype, copy=False)
        mn = m[name] * p.dtype.type(b1)
        mn += g * p.dtype.type(1.0 - b1)
        vn = v[name] * p.dtype.type(b2)
        vn += np.square(g) * p.dtype.type(1.0 - b2)
        denom = np.sqrt(vn)
        denom *= p.dtype.type(1.0 / np.sqrt(1.0 - b2 ** step))
        denom += p.dtype.type(eps)
        update = mn / denom
        update *= p.dtype.type(lr / (1.0 - b1 ** step))
        new_p[name] = p - update
        new_m[name], new_v[name] = mn, vn
    return new_p, (new_m, new_v)


@dataclass
class TrainState:
    model: HyperNet
    config: TrainConfig
    adam_m: dict
    adam_v: dict
    step: int
    rng: np.random.Generator
    ray_cache: dict = field(default_factory=dict)

    @classmethod
    def fresh(cls, config, field_config=None, hyper_config=None):
        rng = np.random.default_rng(config.seed)
        hyper_config = hyper_config or HyperConfig(
            variational=(config.mode == "generative"))
        if hyper_config.variational != (config.mode == "generative"):
            raise ValueError("hyper_config.variational must match config.mode")
        model = HyperNet(field_config or FieldConfig(), hyper_config, rng)
        zeros = {k: np.zeros_like(p) for k, p in model.params.items()}
        return cls(model, config, zeros,
                   {k: np.zeros_like(p) for k, p in model.params.items()}, 0, rng)


def _object_rays(state: TrainState, obj):
    """Cached per-object ray origins/directions and composited targets."""
    cached = state.ray_cache.get(obj.object_id)
    if cached is not None:
        return cached
    bg = np.asarray(state.config.render.background, dtype=np.float64)
    origins, dirs, targets = [], [], []
    for view in obj.views:
        o, d = rays_for_image(view.pose)
        rgba = view.image.reshape(-1, 4).astype(np.float64) / 255.0
        a = rgba[:, 3:4]
        targets.append(rgba[:, :3] * a + (1.0 - a) * bg)  # composite over background
        origins.append(o)
        dirs.append(d)
    cached = (np.concatenate(origins), np.concatenate(dirs), np.concatenate(targets))
    state.ray_cache[obj.object_id] = cached
    return cached


def _step_graph(state: TrainState, obj, rng):
    """Build the full loss graph for one object; returns (loss, nodes)."""
    cfg = state.config
    origins, dirs, targets = _object_rays(state, obj)
    if len(obj.views) < 1:
        raise ValueError(f"object {obj.object_id} has no posed views")
    pick = rng.integers(0, origins.shape[0], size=cfg.rays_per_step)

    bundle = state.model.build(obj.cloud, rng=rng if cfg.mode == "generative" else None)
    rgb, alpha, _ = render_rays_graph(bundle.weight_nodes, origins[pick], dirs[pick],
                                      cfg.render, state.model.field_config, rng)
    comp = composite_graph(rgb, alpha, cfg.render.background)
    mse_node = ad.mse(comp, ad.constant(targets[pick], name="target"))
    loss = mse_node
    if cfg.mode == "generative":
        loss = ad.add(loss, ad.scale(bundle.kl, cfg.beta_at(state.step)))
    return loss, mse_node, bundle


def train_step(state: TrainState, obj, rng=None):
    """One optimization step on one object; returns (state, metrics).

    The state is updated in place (fresh parameter arrays, same object) and
    also returned for convenience.
    """
    rng = state.rng if rng is None else rng
    rng_before = rng.bit_generator.state
    with ad.finite_checks(False):
        loss, mse_node, bundle = _step_graph(state, obj, rng)

    loss_val = float(loss.data)
    if not math.isfinite(loss_val):
        # replay with per-op checks to name the offending node
        rng.bit_generator.state = rng_before
        try:
            with ad.finite_checks(True):
                _step_graph(state, obj, rng)
        except ad.NonFiniteError as e:
            raise TrainingDiverged(
                f"non-finite loss at step {state.step} on object "
                f"{obj.object_id}: {e}") from e
        raise TrainingDiverged(
            f"non-finite loss at step {state.step} on object {obj.object_id}")

    grads_by_leaf = ad.backward(loss)
    name_of = {leaf.uid: name for name, leaf in bundle.leaves.items()}
    grads = {name_of[t.uid]: g for t, g in grads_by_leaf.items() if t.uid in name_of}

    state.model.params, (state.adam_m, state.adam_v) = adam_update(
        state.model.params, grads, (state.adam_m, state.adam_v),
        state.step + 1, state.config, lr=state.config.lr_at(state.step))
    state.step += 1

    mse_val = float(mse_node.data)
    metrics = {"step": state.step, "object": obj.object_id, "loss": loss_val,
               "mse": mse_val, "psnr": psnr(mse_val) if mse_val > 0 else math.inf,
               "kl": float(bundle.kl.data) if bundle.kl is not None else 0.0}
    return state, metrics


def _epoch_order(seed, epoch, n):
    return np.random.default_rng([seed, 7919, epoch]).permutation(n)


def train(config: TrainConfig, dataset, field_config=None, hyper_config=None,
          out_path=None, resume=None, on_step=None, stop_at_step=None):
    """Run the loop over shuffled train-split objects; returns a Checkpoint.

    `stop_at_step` pauses the run early without changing the schedule (the
    learning-rate horizon stays config.steps), so a paused-and-resumed run
    retraces a straight one exactly.
    """
    from .perf import tune_allocator

    tune_allocator()
    objects = [o for o in dataset if getattr(o, "split", "train") == "train"]
    if not objects:
        raise ValueError("dataset has no training objects")
    if resume is not None:
        state = state_from_checkpoint(resume, config)
    else:
        state = TrainState.fresh(config, field_config, hyper_config)

    n = len(objects)
    last = config.steps if stop_at_step is None else min(config.steps, stop_at_step)
    while state.step < last:
        epoch, pos = divmod(state.step, n)
        order = _epoch_order(config.seed, epoch, n)
        if config.objects_per_step <= 1:
            state, metrics = train_step(state, objects[order[pos]])
        else:
            state, metrics = _accumulated_step(state, objects, order, pos, config)
        if on_step is not None:
            on_step(metrics)
        if config.log_every and state.step % config.log_every == 0:
            logger.info("step %d/%d loss %.5f psnr %.2f kl %.3f",
                        state.step, config.steps, metrics["loss"],
                        metrics["psnr"], metrics["kl"])
        if (out_path and config.checkpoint_every
                and state.step % config.checkpoint_every == 0
                and state.step < config.steps):
            save_checkpoint(checkpoint_from_state(state), out_path)
    ckpt = checkpoint_from_state(state)
    if out_path:
        save_checkpoint(ckpt, out_path)
    return ckpt


def _accumulated_step(state, objects, order, pos, config):
    """Average gradients over several objects, then one Adam update."""
    rng = state.rng
    total, metrics_acc = {}, []
    k = config.objects_per_step
    bundle = None
    mse_sum = kl_sum = 0.0
    for j in range(k):
        obj = objects[order[(pos + j) % len(order)]]
        with ad.finite_checks(False):
            loss, mse_node, bundle = _step_graph(state, obj, rng)
        if not math.isfinite(float(loss.data)):
            raise TrainingDiverged(f"non-finite loss at step {state.step} "
                                   f"on object {obj.object_id}")
        for t, g in ad.backward(loss).items():
            name = next((nm for nm, lf in bundle.leaves.items() if lf.uid == t.uid), None)
            if name:
                total[name] = total.get(name, 0.0) + g / k
        mse_sum += float(mse_node.data)
        kl_sum += float(bundle.kl.data) if bundle.kl is not None else 0.0
    state.model.params, (state.adam_m, state.adam_v) = adam_update(
        state.model.params, total, (state.adam_m, state.adam_v),
        state.step + 1, state.config, lr=state.config.lr_at(state.step))
    state.step += 1
    mse_val = mse_sum / k
    return state, {"step": state.step, "object": "<accumulated>", "loss": mse_val,
                   "mse": mse_val, "psnr": psnr(mse_val) if mse_val > 0 else math.inf,
                   "kl": kl_sum / k}


# ---------------------------------------------------------------------------
# Checkpoints.
# ---------------------------------------------------------------------------

@dataclass
class Checkpoint:
    field_config: FieldConfig
    hyper_config: HyperConfig
    params: dict
    adam_m: dict
    adam_v: dict
    step: int
    rng_state: dict
    version: int = CHECKPOINT_VERSION


def checkpoint_from_state(state: TrainState) -> Checkpoint:
    return Checkpoint(state.model.field_config, state.model.config,
                      dict(state.model.params), dict(state.adam_m), dict(state.adam_v),
                      state.step, state.rng.bit_generator.state)


def state_from_checkpoint(ckpt: Checkpoint, config: TrainConfig) -> TrainState:
    model = HyperNet(ckpt.field_config, ckpt.hyper_config, np.random.default_rng(0))
    if set(model.params) != set(ckpt.params):
        raise ValueError("checkpoint parameter names do not match the model layout")
    model.params = dict(ckpt.params)
    rng = np.random.default_rng(0)
    rng.bit_generator.state = ckpt.rng_state
    return TrainState(model, config, dict(ckpt.adam_m), dict(ckpt.adam_v),
                      ckpt.step, rng)


def model_from_checkpoint(ckpt: Checkpoint) -> HyperNet:
    model = HyperNet(ckpt.field_config, ckpt.hyper_config, np.random.default_rng(0))
    model.params = dict(ckpt.params)
    return model


_DTYPE_TAGS = {"float32": "<f4", "float64": "<f8"}


def save_checkpoint(ckpt: Checkpoint, path):
    tensors, payloads = [], []
    for group, tensor_map in (("params", ckpt.params), ("adam_m", ckpt.adam_m),
                              ("adam_v", ckpt.adam_v)):
        for name in sorted(tensor_map):
            arr = np.ascontiguousarray(tensor_map[name])
            tag = _DTYPE_TAGS.get(arr.dtype.name)
            if tag is None:
                raise ValueError(f"tensor {group}/{name} has unsupported dtype {arr.dtype}")
            arr = arr.astype(tag, copy=False)  # force little-endian byte order
            tensors.append({"group": group, "name": name, "dtype": tag,
                            "shape": list(arr.shape)})
            payloads.append(arr.tobytes())
    manifest = {
        "field_config": ckpt.field_config.to_dict(),
        "hyper_config": ckpt.hyper_config.to_dict(),
        "step": ckpt.step,
        "rng_state": ckpt.rng_state,
        "tensors": tensors,
    }
    blob = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode()
    out = bytearray()
    out += CHECKPOINT_MAGIC
    out += np.uint32(ckpt.version).tobytes()
    out += np.uint32(len(blob)).tobytes()
    out += blob
    for p in payloads:
        out += p
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as f:
        f.write(bytes(out))
    os.replace(tmp, path)


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint file (bad magic {raw[:4]!r})")
    version = int(np.frombuffer(raw[4:8], dtype="<u4")[0])
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: checkpoint version {version} is not supported "
                         f"(expected {CHECKPOINT_VERSION})")
    n = int(np.frombuffer(raw[8:12], dtype="<u4")[0])
    manifest = json.loads(raw[12:12 + n].decode())
    offset = 12 + n
    groups = {"params": {}, "adam_m": {}, "adam_v": {}}
    for rec in manifest["tensors"]:
        count = int(np.prod(rec["shape"])) if rec["shape"] else 1
        nbytes = count * int(rec["dtype"][-1])
        arr = np.frombuffer(raw[offset:offset + nbytes], dtype=rec["dtype"])
        if arr.size != count:
            raise ValueError(f"{path}: truncated payload for {rec['name']}")
        groups[rec["group"]][rec["name"]] = arr.reshape(rec["shape"]).copy()
        offset += nbytes
    if offset != len(raw):
        raise ValueError(f"{path}: {len(raw) - offset} trailing bytes after payloads")
    return Checkpoint(FieldConfig.from_dict(manifest["field_config"]),
                      HyperConfig.from_dict(manifest["hyper_config"]),
                      groups["params"], groups["adam_m"], groups["adam_v"],
                      manifest["step"], manifest["rng_state"], version)
