"""Command-line surface binding the pipeline into reproducible workflows.

Exit codes: 0 success, 1 usage error, 2 runtime failure. All randomness is
controlled by --seed (falling back to the TUVF_SEED environment variable,
then 0).
"""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

import numpy as np


def _seed_default() -> int:
    env = os.environ.get("TUVF_SEED")
    return int(env) if env else 0


def _parse_camera(spec: str, width: int, height: int):
    from .renderer import camera_from_orbit

    try:
        az, el, radius, fov = (float(v) for v in spec.split(","))
    except ValueError:
        raise ValueError(f"camera spec must be 'az,el,radius,fov', got {spec!r}") from None
    return camera_from_orbit(az, el, radius, fov, width, height)


def _parse_resolution(spec: str) -> tuple[int, int]:
    try:
        w, h = spec.lower().split("x")
        return int(w), int(h)
    except ValueError:
        raise ValueError(f"resolution must be WxH, got {spec!r}") from None


def _load_clouds(data_dir, n_points: int, seed: int):
    from .geometry import PointCloud
    from .meshio import load_mesh, load_ply
    from .geometry import sample_mesh_surface

    paths = sorted(Path(data_dir).glob("*.obj")) + sorted(Path(data_dir).glob("*.ply"))
    if not paths:
        raise FileNotFoundError(f"no .obj or .ply shapes in {data_dir}")
    clouds = []
    for i, p in enumerate(paths):
        if p.suffix.lower() == ".ply":
            cloud, faces = load_ply(p)
            if faces is not None:
                from .geometry import TriangleMesh

                mesh = TriangleMesh(cloud.points, faces)
                cloud = sample_mesh_surface(mesh, n_points, seed=seed + i)
            elif cloud.normals is None:
                raise ValueError(f"{p}: point-cloud PLY needs nx,ny,nz normals")
        else:
            cloud = sample_mesh_surface(load_mesh(p), n_points, seed=seed + i)
        clouds.append(cloud)
    return clouds, paths


def _shape_artifacts(csae_model, mesh_path, seed: int):
    from .csae import prepare_training_cloud
    from .geometry import sample_mesh_surface
    from .meshio import load_mesh
    from .renderer import RenderArtifacts

    mesh = load_mesh(mesh_path)
    cloud = sample_mesh_surface(mesh, max(6000, csae_model.cfg.target_pool), seed=seed)
    shape = prepare_training_cloud(cloud, csae_model.cfg, seed)
    surface, grid = csae_model.surface_artifacts(shape.encoder_points)
    return RenderArtifacts.build(surface, grid)


def _load_texture_stack(tex_path, seed_tex: int, render_cfg, sphere):
    """Texture checkpoint -> (features, shading nets).

    Accepts either a generator checkpoint (tex.cips.* entries; the texture
    code is drawn from --seed-tex) or a bare field (tex.field). Shading
    nets come from the same file when present, else the deterministic
    passthrough nets.
    """
    from .checkpoint import load_checkpoint
    from .fixtures import passthrough_shading
    from .renderer import ShadingNets
    from .texgen import TextureGenerator, UvTextureField, draw_texture_code

    arrays = load_checkpoint(tex_path)
    if "tex.field" in arrays:
        field = UvTextureField(features=arrays["tex.field"],
                               uv_level=int(arrays["meta.tex.uv_level"][0]))
        features = field.features
        feature_dim = features.shape[1]
    elif any(k.startswith("tex.cips.") for k in arrays):
        gen = TextureGenerator.from_entries(arrays)
        z = draw_texture_code(gen.cfg, seed_tex)
        field = gen.field(sphere, z)
        features = field.features
        feature_dim = gen.cfg.feature_dim
    else:
        raise ValueError(f"{tex_path}: no texture entries (tex.field or tex.cips.*)")
    if "render.mlpf.w0" in arrays:
        shading = ShadingNets.from_entries(arrays, render_cfg, feature_dim)
    else:
        shading = passthrough_shading(feature_dim)
    return field, features, shading


# ---------------------------------------------------------------------------
# subcommands

def _cmd_gen_fixtures(args) -> int:
    from .fixtures import generate_fixtures

    manifest = generate_fixtures(args.out, seed=args.seed, n_shapes=args.shapes,
                                 n_views=args.views, image_size=args.size)
    print(f"wrote {len(manifest['shapes'])} shapes, {len(manifest['reals'])} "
          f"images to {args.out}")
    return 0


def _cmd_train_csae(args) -> int:
    from .config import load_config
    from .csae import train_csae

    cfg = load_config(args.config).csae()
    clouds, paths = _load_clouds(args.data, max(6000, cfg.target_pool), args.seed)
    log_path = args.out + ".losses.csv" if args.log is None else args.log
    model, history = train_csae(clouds, cfg, steps=args.steps, seed=args.seed,
                                out_path=args.out, log_path=log_path)
    print(f"trained on {len(clouds)} shapes for {args.steps} steps; "
          f"final chamfer {history[-1].chamfer:.6f}; saved {args.out}")
    return 0


def _cmd_train_texture(args) -> int:
    from .adversarial import train_texture
    from .config import load_config
    from .csae import CsaeModel
    from .imgio import load_png

    cfg = load_config(args.config)
    gan_cfg = cfg.gan()
    if args.patch is not None:
        from dataclasses import replace

        gan_cfg = replace(gan_cfg, patch_resolution=args.patch)
    csae_model = CsaeModel.load(args.csae)
    clouds, _ = _load_clouds(args.shapes, max(6000, csae_model.cfg.target_pool),
                             args.seed)
    real_paths = sorted(Path(args.reals).glob("*.png"))
    if not real_paths:
        raise FileNotFoundError(f"no .png images in {args.reals}")
    reals = [load_png(p) for p in real_paths]
    sample_dir = Path(args.out).parent
    log_path = args.out + ".losses.csv" if args.log is None else args.log
    state = train_texture(csae_model, clouds, reals, gan_cfg, cfg.renderer(),
                          cfg.texgen(), cfg.pose_sampler(), steps=args.steps,
                          seed=args.seed, out_path=args.out, log_path=log_path,
                          sample_dir=sample_dir, sample_every=args.sample_every)
    last = state.history[-1]
    print(f"{args.steps} adversarial steps; final loss_d {last.loss_d:.4f} "
          f"loss_g {last.loss_g:.4f}; saved {args.out}")
    return 0


def _cmd_render(args) -> int:
    from .config import load_config
    from .csae import CsaeModel
    from .imgio import save_png
    from .renderer import render_image

    cfg = load_config(args.config)
    render_cfg = cfg.renderer()
    csae_model = CsaeModel.load(args.csae)
    width, height = _parse_resolution(args.res)
    cam = _parse_camera(args.cam, width, height)
    artifacts = _shape_artifacts(csae_model, args.shape, args.seed)
    _, features, shading = _load_texture_stack(args.tex, args.seed_tex,
                                               render_cfg, csae_model.sphere)
    img = render_image(artifacts, features, shading, render_cfg, cam, seed=args.seed)
    save_png(args.out, img.rgb, img.alpha)
    print(f"rendered {width}x{height} to {args.out}")
    return 0


def _cmd_transfer(args) -> int:
    from .config import load_config
    from .csae import CsaeModel
    from .editing import transfer_texture
    from .imgio import save_png
    from .renderer import render_image

    cfg = load_config(args.config)
    render_cfg = cfg.renderer()
    csae_model = CsaeModel.load(args.csae)
    width, height = _parse_resolution(args.res)
    cam = _parse_camera(args.cam, width, height)
    artifacts = _shape_artifacts(csae_model, args.shape, args.seed)
    field, features, shading = _load_texture_stack(args.tex, args.seed_tex,
                                                   render_cfg, csae_model.sphere)
    transfer_texture(field, artifacts.surface)      # level check; no mutation
    img = render_image(artifacts, features, shading, render_cfg, cam, seed=args.seed)
    save_png(args.out, img.rgb, img.alpha)
    print(f"transferred texture onto {args.shape} -> {args.out}")
    return 0


def _cmd_edit(args) -> int:
    from .checkpoint import save_checkpoint
    from .config import load_config
    from .csae import CsaeModel
    from .editing import edit_texture
    from .imgio import load_mask_png, load_png

    cfg = load_config(args.config)
    render_cfg = cfg.renderer()
    edit_cfg = cfg.edit()
    if args.steps is not None:
        from dataclasses import replace

        edit_cfg = replace(edit_cfg, steps=args.steps)
    csae_model = CsaeModel.load(args.csae)
    image = load_png(args.image)
    mask = load_mask_png(args.mask)
    cam = _parse_camera(args.cam, image.shape[1], image.shape[0])
    artifacts = _shape_artifacts(csae_model, args.shape, args.seed)
    field, _, shading = _load_texture_stack(args.tex, args.seed_tex,
                                            render_cfg, csae_model.sphere)
    result = edit_texture(field, image, mask, cam, artifacts, shading,
                          render_cfg, edit_cfg)
    entries = {
        "meta.tex.uv_level": np.asarray([float(result.tex.uv_level)], np.float32),
        "tex.field": result.tex.features,
    }
    entries.update(shading.to_entries())
    save_checkpoint(entries, args.out)
    print(f"edited texture: masked error {result.masked_error_initial:.6f} -> "
          f"{result.masked_error_final:.6f}; saved {args.out}")
    return 0


def _cmd_selfcheck(args) -> int:
    from .selfcheck import run_selfcheck

    return 0 if run_selfcheck(seed=args.seed) else 2


def _cmd_print_config(args) -> int:
    from .config import format_config, load_config

    sys.stdout.write(format_config(load_config(args.config)))
    return 0


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"error: {message}", file=sys.stderr)
        raise SystemExit(1)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="tuvf",
                     description="Texture UV radiance fields at desk scale")
    sub = parser.add_subparsers(dest="command", metavar="command")

    def common(p, config=True):
        p.add_argument("--seed", type=int, default=_seed_default(),
                       help="global seed (default: TUVF_SEED or 0)")
        if config:
            p.add_argument("--config", default=None, help="config file path")

    p = sub.add_parser("gen-fixtures", help="write the procedural fixture dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--shapes", type=int, default=10)
    p.add_argument("--views", type=int, default=8)
    p.add_argument("--size", type=int, default=64)
    common(p, config=False)
    p.set_defaults(fn=_cmd_gen_fixtures)

    p = sub.add_parser("train-csae", help="stage-A geometry auto-encoder training")
    p.add_argument("--data", required=True, help="directory of .ply/.obj shapes")
    p.add_argument("--out", required=True, help="checkpoint output path")
    p.add_argument("--steps", type=int, default=500)
    p.add_argument("--log", default=None, help="CSV loss log (default: <out>.losses.csv)")
    common(p)
    p.set_defaults(fn=_cmd_train_csae)

    p = sub.add_parser("train-texture", help="stage-B adversarial texture training")
    p.add_argument("--csae", required=True)
    p.add_argument("--shapes", required=True)
    p.add_argument("--reals", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--steps", type=int, default=2000)
    p.add_argument("--patch", type=int, default=None)
    p.add_argument("--sample-every", type=int, default=500)
    p.add_argument("--log", default=None)
    common(p)
    p.set_defaults(fn=_cmd_train_texture)

    p = sub.add_parser("render", help="render a texture on a shape")
    p.add_argument("--csae", required=True)
    p.add_argument("--tex", required=True)
    p.add_argument("--shape", required=True)
    p.add_argument("--seed-tex", type=int, default=0)
    p.add_argument("--cam", default="30,25,1.3,45", help="az,el,radius,fov")
    p.add_argument("--res", default="128x128")
    p.add_argument("--out", required=True)
    common(p)
    p.set_defaults(fn=_cmd_render)

    p = sub.add_parser("transfer", help="render the same texture on another shape")
    p.add_argument("--csae", required=True)
    p.add_argument("--tex", required=True)
    p.add_argument("--shape", required=True)
    p.add_argument("--seed-tex", type=int, default=0)
    p.add_argument("--cam", default="30,25,1.3,45")
    p.add_argument("--res", default="128x128")
    p.add_argument("--out", required=True)
    common(p)
    p.set_defaults(fn=_cmd_transfer)

    p = sub.add_parser("edit", help="optimize texture features to match an edited view")
    p.add_argument("--csae", required=True)
    p.add_argument("--tex", required=True)
    p.add_argument("--shape", required=True)
    p.add_argument("--seed-tex", type=int, default=0)
    p.add_argument("--cam", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--mask", required=True)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--out", required=True)
    common(p)
    p.set_defaults(fn=_cmd_edit)

    p = sub.add_parser("selfcheck", help="run the fast invariant battery")
    common(p, config=False)
    p.set_defaults(fn=_cmd_selfcheck)

    p = sub.add_parser("print-config", help="dump the effective configuration")
    common(p, config=True)
    p.set_defaults(fn=_cmd_print_config)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if getattr(args, "command", None) is None:
        parser.print_usage(sys.stderr)
        return 1
    try:
        return args.fn(args)
    except (BrokenPipeError, KeyboardInterrupt):
        return 2
    except Exception as err:
        print(f"error: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
