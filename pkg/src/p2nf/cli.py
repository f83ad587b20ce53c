"""Command-line surface: gen-data, train, render, mesh, eval, sample, interpolate.

Every subcommand takes --seed for end-to-end reproducibility, --threads (or
the P2N_THREADS environment variable) to cap BLAS workers, and --config FILE
holding `key=value` lines (same keys as the long flags, '-' or '_' spelled)
that overlay the defaults; explicit flags win over the file.  Each run logs
its fully resolved configuration.  Exit code 0 on success; failures print a
one-line diagnostic on stderr and exit nonzero.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys

logger = logging.getLogger("p2nf")


def _build_parser():
    top = argparse.ArgumentParser(prog="p2nf", description=__doc__.splitlines()[0])
    sub = top.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--threads", type=int, default=None,
                       help="cap BLAS threads (default: P2N_THREADS or library default)")
        p.add_argument("--config", default=None,
                       help="key=value overlay file; explicit flags take precedence")
        p.add_argument("--f64", action="store_true",
                       help="run in float64 verification precision")
        p.add_argument("-v", "--verbose", action="store_true")

    p = sub.add_parser("gen-data", help="generate a synthetic dataset directory")
    p.add_argument("--out", required=True)
    p.add_argument("--objects", type=int, default=8, help="objects per family")
    p.add_argument("--views", type=int, default=16)
    p.add_argument("--res", type=int, default=64)
    p.add_argument("--points", type=int, default=2048)
    p.add_argument("--families", default="sphere",
                   help="comma-separated: sphere,box,torus,union")
    p.add_argument("--test-objects", type=int, default=0,
                   help="objects per family assigned to the test split")
    p.add_argument("--paper-protocol", action="store_true",
                   help="fifty 200x200 views per object")
    common(p)

    p = sub.add_parser("train", help="train the hypernetwork on a dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--steps", type=int, default=20000)
    p.add_argument("--lr", type=float, default=5e-4)
    p.add_argument("--rays", type=int, default=1024)
    p.add_argument("--samples-per-ray", type=int, default=64)
    p.add_argument("--mode", choices=("deterministic", "generative"),
                   default="deterministic")
    p.add_argument("--beta-kl", type=float, default=1e-4)
    p.add_argument("--latent-dim", type=int, default=128)
    p.add_argument("--field-scale", choices=("desk", "paper"), default="desk")
    p.add_argument("--resume", default=None, help="checkpoint to continue from")
    p.add_argument("--ckpt-every", type=int, default=0)
    p.add_argument("--log-every", type=int, default=200)
    common(p)

    p = sub.add_parser("render", help="render one stored pose from a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--object", required=True)
    p.add_argument("--view", type=int, default=0)
    p.add_argument("--out", required=True, help="PNG output path")
    p.add_argument("--samples-per-ray", type=int, default=64)
    common(p)

    p = sub.add_parser("mesh", help="extract a colored mesh for one object")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--object", required=True)
    p.add_argument("--out", required=True, help=".ply or .obj output path")
    p.add_argument("--res", type=int, default=64)
    p.add_argument("--iso", type=float, default=0.5)
    common(p)

    p = sub.add_parser("eval", help="evaluate a checkpoint; CSV on stdout")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--metrics", default="psnr,chamfer,fscore")
    p.add_argument("--split", choices=("train", "test", "all"), default="all")
    p.add_argument("--views", type=int, default=5, help="poses per object for psnr")
    p.add_argument("--points", type=int, default=3000,
                   help="surface samples for chamfer/fscore")
    p.add_argument("--threshold", type=float, default=0.01)
    p.add_argument("--mesh-res", type=int, default=64)
    p.add_argument("--samples-per-ray", type=int, default=64)
    common(p)

    p = sub.add_parser("sample", help="draw latents from the prior and render them")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--count", type=int, default=4)
    p.add_argument("--res", type=int, default=64)
    p.add_argument("--mesh", action="store_true", help="also export a PLY per sample")
    p.add_argument("--mesh-res", type=int, default=64)
    p.add_argument("--samples-per-ray", type=int, default=64)
    common(p)

    p = sub.add_parser("interpolate", help="render a linear latent path between two objects")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--objects", required=True, help="two object ids: a,b")
    p.add_argument("--steps", type=int, default=5)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--res", type=int, default=64)
    p.add_argument("--samples-per-ray", type=int, default=64)
    common(p)

    return top


def _apply_config_file(parser, argv):
    """Overlay key=value file entries as parser defaults for the subcommand."""
    probe = argparse.ArgumentParser(add_help=False)
    probe.add_argument("--config", default=None)
    known, _ = probe.parse_known_args(argv[1:])
    if not known.config:
        return
    sub_actions = next(a for a in parser._actions
                       if isinstance(a, argparse._SubParsersAction))
    subparser = sub_actions.choices.get(argv[0])
    if subparser is None:
        return
    valid = {a.dest for a in subparser._actions}
    overlay = {}
    with open(known.config) as f:
        for lineno, line in enumerate(f, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{known.config}:{lineno}: expected key=value")
            key, value = (part.strip() for part in line.split("=", 1))
            dest = key.replace("-", "_")
            if dest not in valid:
                raise ValueError(f"{known.config}:{lineno}: unknown key '{key}'")
            overlay[dest] = value
    for action in subparser._actions:
        if action.dest in overlay:
            raw = overlay[action.dest]
            if action.const is not None or isinstance(action, argparse._StoreTrueAction):
                action.default = raw.lower() in ("1", "true", "yes", "on")
            elif action.type is not None:
                action.default = action.type(raw)
            else:
                action.default = raw
    logger.info("config overlay from %s: %s", known.config, overlay)


def dispatch(argv) -> int:
    parser = _build_parser()
    try:
        if argv and not argv[0].startswith("-"):
            _apply_config_file(parser, argv)
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    except (OSError, ValueError) as e:
        print(f"p2nf: {e}", file=sys.stderr)
        return 1

    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s %(name)s %(message)s")

    from .perf import limit_threads, tune_allocator

    tune_allocator()
    applied = limit_threads(args.threads)
    if applied:
        logger.info("BLAS threads capped at %d", applied)
    logger.info("resolved config: %s",
                {k: v for k, v in sorted(vars(args).items()) if k != "command"})

    from . import autodiff as ad

    try:
        with ad.precision("float64" if args.f64 else "float32"):
            return _HANDLERS[args.command](args)
    except Exception as e:  # one-line diagnostic, nonzero exit
        logger.debug("failure detail", exc_info=True)
        print(f"p2nf {args.command}: {e}", file=sys.stderr)
        return 1


def _cmd_gen_data(args):
    from .synthdata import FAMILIES, make_dataset

    families = tuple(f.strip() for f in args.families.split(",") if f.strip())
    unknown = set(families) - set(FAMILIES)
    if unknown:
        raise ValueError(f"unknown families: {sorted(unknown)}")
    views, res = (50, 200) if args.paper_protocol else (args.views, args.res)
    objects = make_dataset(args.out, families, args.objects, views, res,
                           args.points, args.seed, args.test_objects)
    logger.info("wrote %d objects to %s", len(objects), args.out)
    return 0


def _field_config(scale):
    from .field import DESK, PAPER, FieldConfig

    return FieldConfig(**(PAPER if scale == "paper" else DESK))


def _cmd_train(args):
    from .hypernet import HyperConfig
    from .render import RenderConfig
    from .synthdata import read_dataset
    from .trainer import TrainConfig, load_checkpoint, train

    dataset = read_dataset(args.data)
    config = TrainConfig(
        steps=args.steps, learning_rate=args.lr, rays_per_step=args.rays,
        seed=args.seed, mode=args.mode, beta_kl=args.beta_kl,
        render=RenderConfig(samples_per_ray=args.samples_per_ray),
        log_every=args.log_every, checkpoint_every=args.ckpt_every)
    resume = load_checkpoint(args.resume) if args.resume else None
    hyper = None if resume else HyperConfig(
        latent_dim=args.latent_dim, variational=(args.mode == "generative"))
    train(config, dataset, field_config=_field_config(args.field_scale),
          hyper_config=hyper, out_path=args.out, resume=resume)
    logger.info("checkpoint written to %s", args.out)
    return 0


def _load_model_and_data(args, need_data=True):
    from .synthdata import read_dataset
    from .trainer import load_checkpoint, model_from_checkpoint

    model = model_from_checkpoint(load_checkpoint(args.ckpt))
    dataset = read_dataset(args.data) if need_data else None
    return model, dataset


def _find_object(dataset, object_id):
    for obj in dataset:
        if obj.object_id == object_id:
            return obj
    raise ValueError(f"object '{object_id}' not found in dataset "
                     f"(have: {', '.join(o.object_id for o in dataset[:8])} ...)")


def _cmd_render(args):
    from .render import RenderConfig, render_image
    from .synthdata import save_png

    model, dataset = _load_model_and_data(args)
    obj = _find_object(dataset, args.object)
    if not (0 <= args.view < len(obj.views)):
        raise ValueError(f"view {args.view} out of range (object has {len(obj.views)})")
    tw = model.generate(obj.cloud)
    cfg = RenderConfig(samples_per_ray=args.samples_per_ray, stratified_jitter=False)
    img, _ = render_image(tw, obj.views[args.view].pose, cfg, model.field_config)
    save_png(img, args.out)
    logger.info("rendered %s view %d to %s", args.object, args.view, args.out)
    return 0


def _cmd_mesh(args):
    from .meshing import export_mesh, extract_colored_mesh

    model, dataset = _load_model_and_data(args)
    obj = _find_object(dataset, args.object)
    tw = model.generate(obj.cloud)
    mesh = extract_colored_mesh(tw, model.field_config, args.res, args.iso)
    if mesh.is_empty:
        logger.warning("extracted surface is empty at iso=%.2f", args.iso)
    export_mesh(mesh, args.out)
    logger.info("mesh with %d vertices / %d faces written to %s",
                len(mesh.vertices), len(mesh.faces), args.out)
    return 0


def _cmd_eval(args):
    import numpy as np

    from .meshing import extract_colored_mesh
    from .metrics import chamfer, fscore, psnr_eval, sample_mesh_surface
    from .render import RenderConfig
    from .synthdata import sample_colored_points

    model, dataset = _load_model_and_data(args)
    wanted = [m.strip() for m in args.metrics.split(",") if m.strip()]
    unknown = set(wanted) - {"psnr", "chamfer", "fscore"}
    if unknown:
        raise ValueError(f"unknown metrics: {sorted(unknown)}")
    objects = [o for o in dataset if args.split in ("all", o.split)]
    if not objects:
        raise ValueError(f"no objects in split '{args.split}'")
    rng = np.random.default_rng(args.seed)
    rcfg = RenderConfig(samples_per_ray=args.samples_per_ray, stratified_jitter=False)

    print("object_id,metric,value")
    for obj in objects:
        rows = {}
        if "psnr" in wanted:
            rows["psnr"] = psnr_eval(model, obj, args.views, rng, rcfg)
        if "chamfer" in wanted or "fscore" in wanted:
            tw = model.generate(obj.cloud)
            mesh = extract_colored_mesh(tw, model.field_config, args.mesh_res)
            shape = obj.rebuild_shape()
            if shape is not None:
                ref = sample_colored_points(shape, args.points, rng).points[:, :3]
            else:
                ref = obj.cloud.points[:, :3]
            if mesh.is_empty:
                rows["chamfer"] = float("inf")
                rows["fscore"] = 0.0
            else:
                rec = sample_mesh_surface(mesh, args.points, rng)
                if "chamfer" in wanted:
                    rows["chamfer"] = chamfer(ref, rec)
                if "fscore" in wanted:
                    rows["fscore"] = fscore(ref, rec, args.threshold)[0]
        for metric in wanted:
            print(f"{obj.object_id},{metric},{rows[metric]:.6g}")
    return 0


def _prior_pose(res):
    import numpy as np

    from .cameras import CameraPose, SCENE_CAMERA_RADIUS, look_at

    position = SCENE_CAMERA_RADIUS * np.array([0.62, -0.52, 0.59])
    return CameraPose(look_at(position, (0, 0, 0), (0, 0, 1)),
                      float(res), res, res)


def _cmd_sample(args):
    import numpy as np

    from .meshing import export_mesh, extract_colored_mesh
    from .render import RenderConfig, render_image
    from .synthdata import save_png

    model, _ = _load_model_and_data(args, need_data=False)
    if not model.config.variational:
        logger.warning("checkpoint was trained without the generative head; "
                       "prior samples decode through the same latent space")
    os.makedirs(args.out_dir, exist_ok=True)
    rng = np.random.default_rng(args.seed)
    cfg = RenderConfig(samples_per_ray=args.samples_per_ray, stratified_jitter=False)
    pose = _prior_pose(args.res)
    for i in range(args.count):
        z = rng.standard_normal(model.config.latent_dim)
        tw = model.decode_weights(z)
        img, _ = render_image(tw, pose, cfg, model.field_config)
        save_png(img, os.path.join(args.out_dir, f"sample_{i:02d}.png"))
        if args.mesh:
            mesh = extract_colored_mesh(tw, model.field_config, args.mesh_res)
            export_mesh(mesh, os.path.join(args.out_dir, f"sample_{i:02d}.ply"))
    logger.info("wrote %d prior samples to %s", args.count, args.out_dir)
    return 0


def _cmd_interpolate(args):
    from .render import RenderConfig, render_image
    from .synthdata import save_png

    model, dataset = _load_model_and_data(args)
    ids = [s.strip() for s in args.objects.split(",")]
    if len(ids) != 2:
        raise ValueError("--objects expects exactly two ids: a,b")
    if args.steps < 2:
        raise ValueError("--steps must be >= 2 to span both endpoints")
    za = model.encode(_find_object(dataset, ids[0]).cloud).z
    zb = model.encode(_find_object(dataset, ids[1]).cloud).z
    os.makedirs(args.out_dir, exist_ok=True)
    cfg = RenderConfig(samples_per_ray=args.samples_per_ray, stratified_jitter=False)
    pose = _prior_pose(args.res)
    for i in range(args.steps):
        t = i / (args.steps - 1)
        tw = model.decode_weights((1.0 - t) * za + t * zb)
        img, _ = render_image(tw, pose, cfg, model.field_config)
        save_png(img, os.path.join(args.out_dir, f"interp_{i:02d}.png"))
    logger.info("wrote %d interpolation frames to %s", args.steps, args.out_dir)
    return 0


_HANDLERS = {
    "gen-data": _cmd_gen_data,
    "train": _cmd_train,
    "render": _cmd_render,
    "mesh": _cmd_mesh,
    "eval": _cmd_eval,
    "sample": _cmd_sample,
    "interpolate": _cmd_interpolate,
}


def main():
    sys.exit(dispatch(sys.argv[1:]))


if __name__ == "__main__":
    main()
