"""Command-line entry point: ``progressive3d <command> ...``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import torch


def _corruption(arg):
    from .datagen import CorruptionSpec

    if arg is None:
        return CorruptionSpec()
    p = Path(arg)
    d = json.loads(p.read_text()) if p.exists() else json.loads(arg)
    return CorruptionSpec(**d)


def cmd_gen_data(args) -> int:
    from .datagen import SceneSpec, generate_dataset, write_dataset

    corruption = _corruption(args.corruption)
    scene = SceneSpec(level=args.level, texture_size=args.texture_size)
    samples = generate_dataset(
        args.n_objects, args.n_views, seed=args.seed, corruption=corruption, image_size=args.image_size, scene=scene
    )
    write_dataset(samples, args.out, corruption)
    print(f"wrote {len(samples)} objects to {args.out}")
    return 0


def cmd_train(args) -> int:
    from .datagen import read_dataset
    from .trainer import TrainConfig, load_checkpoint, run

    if args.config is None and args.resume is None:
        print("train: need --config or --resume", file=sys.stderr)
        return 2
    if args.config is not None:
        config = TrainConfig.load(args.config)
    else:
        config = TrainConfig.from_dict(load_checkpoint(args.resume)["config"])
    data = args.data or config.data
    if data is None:
        print("train: no dataset given (--data or config 'data')", file=sys.stderr)
        return 2
    samples = read_dataset(data)
    trainer = run(config, samples, out_dir=args.out, resume=args.resume)
    print(f"finished at iteration {trainer.iteration}; checkpoints and log.csv in {args.out}")
    return 0


def cmd_eval(args) -> int:
    from .datagen import read_dataset
    from .evaluation import evaluate_checkpoint

    samples = read_dataset(args.data)
    report = evaluate_checkpoint(args.ckpt, samples, out=args.out)
    for proto in ("same_view", "novel_view"):
        vals = getattr(report, proto)
        print(proto, " ".join(f"{k}={v:.5f}" for k, v in vals.items()))
    return 0


def _camera(path, image_size):
    from .io import load_camera

    return load_camera(path, image_size=image_size)


def cmd_render(args) -> int:
    from . import io
    from .mesh import DeformedMesh
    from .render import Camera, rasterize

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.ckpt:
        from .trainer import generator_from_checkpoint

        if not args.image:
            print("render: --ckpt needs --image", file=sys.stderr)
            return 2
        g, _ = generator_from_checkpoint(args.ckpt)
        size = g.config.image_size
        image = io.load_png(args.image)
        if image.shape[-1] != size:
            image = torch.nn.functional.interpolate(image[None], size=(size, size), mode="bilinear", antialias=True)[0]
        with torch.no_grad():
            pred = g(image[None])
        mesh, texture = pred.mesh, pred.texture
        cam = _camera(args.camera, size) if args.camera else Camera(0.0, 20.0, 4.0, 45.0, size)
        io.write_obj(out / "mesh.obj", mesh.batched()[0], mesh.template)
        io.save_png(out / "texture.png", texture[0])
        with torch.no_grad():
            r = rasterize(mesh, texture, cam, need_soft=False)
            io.save_png(out / "same_view.png", r.image[0])
            for k in range(8):
                c = Camera(cam.azimuth + 45.0 * k, cam.elevation, cam.distance, cam.fov, size)
                io.save_png(out / f"novel_{k * 45:03d}.png", rasterize(mesh, texture, c, need_soft=False).image[0])
    else:
        if not (args.obj and args.texture and args.camera):
            print("render: need --ckpt/--image or --obj/--texture/--camera", file=sys.stderr)
            return 2
        verts, template = io.read_obj(args.obj)
        texture = io.load_png(args.texture)[None].double()
        cam = _camera(args.camera, args.size)
        with torch.no_grad():
            r = rasterize(DeformedMesh(torch.as_tensor(verts)[None], template), texture, cam)
        io.save_png(out / "image.png", r.image[0])
        io.save_png(out / "silhouette.png", r.silhouette[0])
        io.save_png(out / "mask.png", r.coverage[0])
        io.write_pfm(out / "depth.pfm", torch.nan_to_num(r.depth[0], posinf=0.0))
    print(f"renders written to {out}")
    return 0


def cmd_project_uv(args) -> int:
    from . import io
    from .mesh import DeformedMesh
    from .uv_project import project_image_to_uv

    verts, template = io.read_obj(args.obj)
    image = io.load_png(args.image)
    cam = _camera(args.camera, image.shape[-1])
    mesh = DeformedMesh(torch.as_tensor(verts)[None], template)
    partial = project_image_to_uv(image[None].double(), mesh, cam, args.texture_size)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    io.save_png(out / "partial_texture.png", partial.texture[0])
    io.save_png(out / "visibility.png", partial.visibility[0])
    print(f"{int(partial.visibility.sum())} visible texels; written to {out}")
    return 0


def cmd_gradcheck(args) -> int:
    from .gradcheck import SUITES, run_suite

    suites = SUITES if args.module == "all" else (args.module,)
    ok = True
    for s in suites:
        for r in run_suite(s):
            print(r)
            ok &= r.passed
    return 0 if ok else 1


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="progressive3d", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a procedural multi-view dataset")
    g.add_argument("--n-objects", type=int, default=50)
    g.add_argument("--n-views", type=int, default=8)
    g.add_argument("--corruption", help="JSON string or file with CorruptionSpec fields")
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--image-size", type=int, default=64)
    g.add_argument("--texture-size", type=int, default=64)
    g.add_argument("--level", type=int, default=3, help="icosphere subdivision level of the objects")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="run the staged training schedule")
    t.add_argument("--config", help="JSON training config")
    t.add_argument("--resume", help="checkpoint to resume from")
    t.add_argument("--data", help="dataset directory (overrides the config)")
    t.add_argument("--out", required=True)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="same-view and novel-view metrics for a checkpoint")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--out", required=True, help="report JSON path")
    e.set_defaults(func=cmd_eval)

    r = sub.add_parser("render", help="render a checkpoint prediction or an OBJ + texture")
    r.add_argument("--ckpt")
    r.add_argument("--image")
    r.add_argument("--obj")
    r.add_argument("--texture")
    r.add_argument("--camera", help="camera JSON {azimuth, elevation, distance, fov}")
    r.add_argument("--size", type=int, default=128, help="image size for the OBJ form")
    r.add_argument("--out", required=True)
    r.set_defaults(func=cmd_render)

    u = sub.add_parser("project-uv", help="project an image onto a mesh's UV map")
    u.add_argument("--obj", required=True)
    u.add_argument("--image", required=True)
    u.add_argument("--camera", required=True)
    u.add_argument("--texture-size", type=int, default=256)
    u.add_argument("--out", required=True)
    u.set_defaults(func=cmd_project_uv)

    c = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    c.add_argument("--module", choices=("renderer", "losses", "mesh", "all"), default="all")
    c.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (ValueError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
