import math

import numpy as np
import pytest

from p2nf import autodiff as ad
from p2nf.field import FieldConfig
from p2nf.hypernet import HyperConfig
from p2nf.render import RenderConfig
from p2nf.synthdata import make_object, sphere_shape
from p2nf.trainer import (Checkpoint, TrainConfig, TrainState, adam_update,
                          checkpoint_from_state, load_checkpoint,
                          model_from_checkpoint, save_checkpoint, train,
                          train_step)

TINY_FIELD = FieldConfig(trunk_depth=2, trunk_width=8, feature_dim=8,
                         pos_freqs=2, dir_freqs=1)
TINY_HYPER = HyperConfig(latent_dim=8, encoder_hidden=(16, 32),
                         decoder_hidden=(32,), embed_dim=4)


@pytest.fixture(scope="module")
def tiny_objects():
    rng = np.random.default_rng(11)
    return [make_object(f"obj_{i}", sphere_shape(0.6 + 0.1 * i), rng,
                        n_points=128, n_views=3, resolution=24)
            for i in range(2)]


def tiny_config(**kw):
    base = dict(steps=50, rays_per_step=64, seed=5, log_every=0,
                render=RenderConfig(samples_per_ray=8))
    base.update(kw)
    return TrainConfig(**base)


# -- adam ---------------------------------------------------------------------

def test_adam_zero_gradient_keeps_params(rng):
    params = {"a": rng.normal(size=(4, 3)).astype(np.float64)}
    grads = {"a": np.zeros((4, 3))}
    moments = ({"a": np.zeros((4, 3))}, {"a": np.zeros((4, 3))})
    new_p, _ = adam_update(params, grads, moments, 1, tiny_config())
    assert np.array_equal(new_p["a"], params["a"])


def test_adam_first_step_is_signed_lr(rng, f64):
    g = rng.normal(size=16)
    params = {"a": np.zeros(16)}
    moments = ({"a": np.zeros(16)}, {"a": np.zeros(16)})
    lr = 3e-3
    new_p, _ = adam_update(params, {"a": g}, moments, 1, tiny_config(), lr=lr)
    np.testing.assert_allclose(new_p["a"], -lr * np.sign(g), rtol=1e-6)


def test_adam_matches_naive_reference(rng, f64):
    """100 random steps against a per-component textbook loop, <= 1e-12."""
    cfg = tiny_config()
    b1, b2, eps, lr = cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps, 1e-3
    p = rng.normal(size=40)
    m = np.zeros(40)
    v = np.zeros(40)
    params = {"a": p.copy()}
    moments = ({"a": m.copy()}, {"a": v.copy()})
    for t in range(1, 101):
        g = rng.normal(size=40)
        params, moments = adam_update(params, {"a": g}, moments, t, cfg, lr=lr)
        for i in range(40):  # naive reference, scalar arithmetic
            m[i] = b1 * m[i] + (1 - b1) * g[i]
            v[i] = b2 * v[i] + (1 - b2) * g[i] * g[i]
            m_hat = m[i] / (1 - b1 ** t)
            v_hat = v[i] / (1 - b2 ** t)
            p[i] -= lr * m_hat / (math.sqrt(v_hat) + eps)
        np.testing.assert_allclose(params["a"], p, atol=1e-12)
        np.testing.assert_allclose(moments[0]["a"], m, atol=1e-14)
        np.testing.assert_allclose(moments[1]["a"], v, atol=1e-14)


# -- train_step ---------------------------------------------------------------

def test_zero_learning_rate_leaves_params_bitwise(tiny_objects, f64):
    cfg = tiny_config(learning_rate=0.0)
    state = TrainState.fresh(cfg, TINY_FIELD, TINY_HYPER)
    before = {k: v.tobytes() for k, v in state.model.params.items()}
    state, _ = train_step(state, tiny_objects[0])
    after = {k: v.tobytes() for k, v in state.model.params.items()}
    assert before == after


def test_first_step_loss_in_sanity_band(tiny_objects, f64):
    """Fresh nets render near mid-gray, so the first loss tracks the
    target-pixel variance against gray."""
    state = TrainState.fresh(tiny_config(), TINY_FIELD, TINY_HYPER)
    _, metrics = train_step(state, tiny_objects[0])
    targets = []
    for view in tiny_objects[0].views:
        rgba = view.image.reshape(-1, 4) / 255.0
        targets.append(rgba[:, :3] * rgba[:, 3:] + (1 - rgba[:, 3:]))
    band = float(np.mean((np.concatenate(targets) - 0.5) ** 2))
    assert 0.02 <= metrics["loss"] <= 0.5
    assert 0.02 <= band <= 0.5  # the oracle itself sits in the band


def test_smoke_run_loss_decreases(tiny_objects):
    state = TrainState.fresh(tiny_config(steps=200, rays_per_step=128),
                             TINY_FIELD, TINY_HYPER)
    losses = []
    for _ in range(200):
        state, metrics = train_step(state, tiny_objects[0])
        losses.append(metrics["loss"])
    assert np.median(losses[-20:]) < np.median(losses[:20])


def test_generative_step_reports_kl(tiny_objects):
    hyper = HyperConfig(latent_dim=8, encoder_hidden=(16, 32),
                        decoder_hidden=(32,), embed_dim=4, variational=True)
    cfg = tiny_config(mode="generative", beta_kl=1e-3)
    state = TrainState.fresh(cfg, TINY_FIELD, hyper)
    state, metrics = train_step(state, tiny_objects[0])
    assert metrics["kl"] > 0.0
    assert math.isfinite(metrics["loss"])


def test_mode_mismatch_rejected():
    with pytest.raises(ValueError, match="variational"):
        TrainState.fresh(tiny_config(mode="generative"), TINY_FIELD, TINY_HYPER)


def test_gradient_accumulation_over_objects(tiny_objects):
    cfg = tiny_config(steps=6, objects_per_step=2)
    ckpt = train(cfg, tiny_objects, TINY_FIELD, TINY_HYPER)
    assert ckpt.step == 6
    assert all(np.all(np.isfinite(v)) for v in ckpt.params.values())


def test_non_finite_loss_aborts_naming_the_object(tiny_objects):
    from p2nf.trainer import TrainingDiverged

    state = TrainState.fresh(tiny_config(), TINY_FIELD, TINY_HYPER)
    bad = state.model.params["enc0.w"].copy()
    bad[0, 0] = np.nan
    state.model.params["enc0.w"] = bad
    with np.errstate(invalid="ignore"), pytest.raises(TrainingDiverged, match="obj_0"):
        train_step(state, tiny_objects[0])


# -- checkpoints --------------------------------------------------------------

def test_checkpoint_save_load_save_byte_identical(tiny_objects, tmp_path, f64):
    state = TrainState.fresh(tiny_config(), TINY_FIELD, TINY_HYPER)
    for _ in range(3):
        state, _ = train_step(state, tiny_objects[0])
    p1, p2 = tmp_path / "a.p2nf", tmp_path / "b.p2nf"
    save_checkpoint(checkpoint_from_state(state), p1)
    save_checkpoint(load_checkpoint(p1), p2)
    assert p1.read_bytes() == p2.read_bytes()


def test_checkpoint_magic_and_version(tmp_path, f64):
    state = TrainState.fresh(tiny_config(), TINY_FIELD, TINY_HYPER)
    path = tmp_path / "c.p2nf"
    save_checkpoint(checkpoint_from_state(state), path)
    raw = bytearray(path.read_bytes())
    assert raw[:4] == b"P2NF"
    raw[4] = 99  # corrupt the version field
    bad = tmp_path / "bad.p2nf"
    bad.write_bytes(bytes(raw))
    with pytest.raises(ValueError, match="version"):
        load_checkpoint(bad)
    with pytest.raises(ValueError, match="magic"):
        load_checkpoint(__file__)


def test_checkpoint_restores_model_outputs(tiny_objects, tmp_path):
    state = TrainState.fresh(tiny_config(), TINY_FIELD, TINY_HYPER)
    for _ in range(2):
        state, _ = train_step(state, tiny_objects[0])
    path = tmp_path / "m.p2nf"
    save_checkpoint(checkpoint_from_state(state), path)
    model = model_from_checkpoint(load_checkpoint(path))
    a = state.model.generate(tiny_objects[0].cloud)
    b = model.generate(tiny_objects[0].cloud)
    assert all(np.array_equal(wa, wb) for (wa, _), (wb, _) in zip(a.layers, b.layers))


# -- trainloop reproducibility ------------------------------------------------

def test_train_five_plus_five_equals_train_ten(tiny_objects, tmp_path, f64):
    cfg10 = tiny_config(steps=10)
    straight = train(cfg10, tiny_objects, TINY_FIELD, TINY_HYPER)

    half = train(cfg10, tiny_objects, TINY_FIELD, TINY_HYPER, stop_at_step=5)
    assert half.step == 5
    mid = tmp_path / "mid.p2nf"
    save_checkpoint(half, mid)
    resumed = train(cfg10, tiny_objects, TINY_FIELD, TINY_HYPER,
                    resume=load_checkpoint(mid))

    assert straight.step == resumed.step == 10
    for k in straight.params:
        assert straight.params[k].tobytes() == resumed.params[k].tobytes(), k
    for k in straight.adam_m:
        assert straight.adam_m[k].tobytes() == resumed.adam_m[k].tobytes()
    assert straight.rng_state == resumed.rng_state


def test_train_writes_final_checkpoint(tiny_objects, tmp_path):
    out = tmp_path / "final.p2nf"
    ckpt = train(tiny_config(steps=4), tiny_objects, TINY_FIELD, TINY_HYPER,
                 out_path=str(out))
    assert out.exists() and ckpt.step == 4
    assert out.read_bytes()[:4] == b"P2NF"


def test_train_requires_training_objects(tiny_objects):
    only_test = [type(o)(o.object_id, o.cloud, o.views, "test") for o in tiny_objects]
    with pytest.raises(ValueError, match="training objects"):
        train(tiny_config(steps=2), only_test, TINY_FIELD, TINY_HYPER)


def test_single_model_serves_all_objects(tiny_objects):
    """One parameter set; per-object state is only the derived weights."""
    state = TrainState.fresh(tiny_config(), TINY_FIELD, TINY_HYPER)
    names_before = set(state.model.params)
    for obj in tiny_objects:
        state, _ = train_step(state, obj)
    assert set(state.model.params) == names_before
