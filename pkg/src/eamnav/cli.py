"""Command-line operator surface.

Subcommands: gen (worlds/corpora), train (embedder | denoiser | lora),
run (single episode), bench (paired benchmark), render (maps/trajectories),
inspect (artifact metadata). Exit codes: 0 success, 1 usage error,
2 runtime/IO error. Every artifact carries the resolved config fingerprint.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import completion as cp
from . import config as cfgmod
from . import evalharness as ev
from . import grounding as gr
from . import render as rd
from . import simcore as sc
from . import worldgen as wg

log = logging.getLogger("eamnav")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _global_options(parser, suppress: bool) -> None:
    d = argparse.SUPPRESS if suppress else None
    parser.add_argument("--config", default=d,
                        help="JSON config file (or set EAMNAV_CONFIG)")
    parser.add_argument("--set", dest="overrides", action="append",
                        default=argparse.SUPPRESS if suppress else [],
                        metavar="SECTION.KEY=VALUE", help="config override, repeatable")
    parser.add_argument("-v", "--verbose", action="store_true",
                        default=argparse.SUPPRESS if suppress else False)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="eamnav", description=__doc__)
    _global_options(p, suppress=False)
    # global flags are also accepted after the subcommand; SUPPRESS keeps the
    # subparser from clobbering values parsed at the top level
    shared = _Parser(add_help=False)
    _global_options(shared, suppress=True)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen", help="generate worlds", parents=[shared])
    g.add_argument("--count", type=int, required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True, help="output directory")

    t = sub.add_parser("train", help="train a model", parents=[shared])
    t.add_argument("what", choices=["embedder", "denoiser", "lora"])
    t.add_argument("--worlds", required=True, help="directory of world files")
    t.add_argument("--out", required=True, help="checkpoint path")
    t.add_argument("--curve", help="loss curve CSV path")
    t.add_argument("--curve-png", help="loss curve plot path")
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--epochs", type=int, help="override training epochs")
    t.add_argument("--resume", help="initialize from an existing checkpoint")
    t.add_argument("--base", help="base denoiser checkpoint (lora)")

    r = sub.add_parser("run", help="run one navigation episode", parents=[shared])
    r.add_argument("--world", required=True)
    r.add_argument("--target", required=True, help="object class name")
    r.add_argument("--seed", type=int, default=0)
    r.add_argument("--policy", default="eamnav-full")
    r.add_argument("--embedder", help="embedder checkpoint")
    r.add_argument("--denoiser", help="denoiser checkpoint")
    r.add_argument("--start", help="x,y start cell (default: seeded random)")
    r.add_argument("--out", required=True, help="episode log (JSONL)")
    r.add_argument("--snapshot", help="write final EAM snapshot here")

    b = sub.add_parser("bench", help="paired benchmark across policies", parents=[shared])
    b.add_argument("--policies", help="comma-separated policy names")
    b.add_argument("--episodes", type=int)
    b.add_argument("--embedder", help="embedder checkpoint")
    b.add_argument("--denoiser", help="denoiser checkpoint")
    b.add_argument("--out-dir", required=True)
    b.add_argument("--jobs", type=int, help="parallel episode workers")

    d = sub.add_parser("render", help="render worlds, snapshots or logs to PNG", parents=[shared])
    d.add_argument("--world", help="world file")
    d.add_argument("--eam", help="eam snapshot file")
    d.add_argument("--log", help="episode log (draws the trajectory)")
    d.add_argument("--out", required=True)
    d.add_argument("--scale", type=int, default=8)

    i = sub.add_parser("inspect", help="describe an artifact file", parents=[shared])
    i.add_argument("path")
    return p


def _resolved_config(args) -> dict:
    cfg = cfgmod.load_config(args.config, args.overrides)
    fp = cfgmod.fingerprint(cfg)
    log.info("resolved config fingerprint %s", fp)
    return cfg


def _load_worlds(directory: str) -> list[wg.FloorPlan]:
    paths = sorted(Path(directory).glob("world_*.txt"))
    if not paths:
        raise FileNotFoundError(f"no world_*.txt files in {directory}")
    return [wg.load_world(p) for p in paths]


def cmd_gen(args) -> int:
    cfg = _resolved_config(args)
    fp = cfgmod.fingerprint(cfg)
    gen = cfgmod.gen_config(cfg)
    priors = wg.default_priors()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    manifest = {"fingerprint": fp, "count": args.count, "seed": args.seed, "worlds": []}
    for i in range(args.count):
        seed = args.seed + i
        plan = wg.place_objects(
            wg.generate_floor_plan(gen, seed), priors,
            cfg["worldgen"]["object_density"], seed + 1,
        )
        name = f"world_{seed:06d}.txt"
        wg.save_world(plan, out / name)
        manifest["worlds"].append({"file": name, "seed": seed})
    with open(out / "manifest.json", "w") as f:
        json.dump(manifest, f, sort_keys=True, indent=2)
        f.write("\n")
    print(f"wrote {args.count} worlds to {out} (fingerprint {fp})")
    return 0


def _write_curve(curve, csv_path, png_path) -> None:
    if csv_path:
        with open(csv_path, "w") as f:
            f.write("epoch,train_loss,val_loss\n")
            for row in curve:
                f.write(f"{row[0]},{row[1]:.6f},{row[2]:.6f}\n")
    if png_path:
        with open(png_path, "wb") as f:
            f.write(rd.render_loss_curve_png(curve))


def cmd_train(args) -> int:
    cfg = _resolved_config(args)
    plans = _load_worlds(args.worlds)
    if args.what == "embedder":
        return _train_embedder(args, cfg, plans)
    if args.what == "denoiser":
        return _train_denoiser(args, cfg, plans)
    return _train_lora(args, cfg, plans)


def _train_embedder(args, cfg, plans) -> int:
    g = cfg["grounding"]
    priors = wg.default_priors()
    sensors = sc.SensorConfig(
        fov_degrees=g["corpus_fov_degrees"],
        max_range=g["corpus_max_range"],
        p_detect=cfg["sensors"]["p_detect"],
        p_confuse=cfg["sensors"]["p_confuse"],
    )
    scenes = gr.build_scene_corpus(
        plans, sensors, g["corpus_frames_per_world"], args.seed,
        min_objects=g["corpus_min_objects"],
    )
    if args.resume:
        base = gr.load_model(args.resume)
    else:
        base = gr.make_base_model(g["base_seed"], priors, dim=g["dim"], noise=g["base_noise"])
    triplets = gr.mine_triplets(scenes, base, seed=args.seed)
    if not triplets:
        raise RuntimeError("triplet mining produced nothing; corpus too small")
    tc = cfgmod.train_config(cfg, finetune=True)
    if args.epochs:
        from dataclasses import replace

        tc = replace(tc, epochs=args.epochs)
    model, curve = gr.train_embedder(triplets, tc, args.seed, init=base)
    gr.save_model(model, args.out)
    _write_curve(curve, args.curve, args.curve_png)
    held = triplets[: max(1, len(triplets) // 10)]
    ap, an, margin = gr.triplet_evaluation(model, held)
    print(
        f"trained embedder on {len(triplets)} triplets from {len(scenes)} scenes; "
        f"anchor-positive {ap:.3f}, margin {margin:.3f}"
    )
    return 0


def _corpus_tensor(plans, resolution):
    return np.stack([wg.rasterize_categories(p, resolution) for p in plans])


def _train_denoiser(args, cfg, plans) -> int:
    d = cfg["diffusion"]
    corpus = _corpus_tensor(plans, d["resolution"])
    schedule = cp.make_schedule(d["steps"], d["beta_min"], d["beta_max"])
    hyper = cp.DiffusionHyper(
        batch_size=d["batch_size"],
        epochs=args.epochs or d["epochs"],
        learning_rate=d["learning_rate"],
        weight_decay=d["weight_decay"],
    )
    if args.resume:
        net, schedule = cp.load_denoiser(args.resume)
    else:
        net = cp.Denoiser(channels=corpus.shape[1], width=d["width"], seed=args.seed)
    net, curve = cp.train_denoiser(corpus, schedule, hyper, args.seed, net=net)
    cp.save_denoiser(net, schedule, args.out)
    _write_curve(curve, args.curve, args.curve_png)
    print(f"trained denoiser on {len(corpus)} plans; final loss {curve[-1][1]:.1f}")
    return 0


def _train_lora(args, cfg, plans) -> int:
    if not args.base:
        raise UsageError("train lora requires --base DENOISER_CKPT")
    d = cfg["diffusion"]
    base, schedule = cp.load_denoiser(args.base)
    corpus = _corpus_tensor(plans, d["resolution"])
    adapter = cp.make_lora(base, rank=d["lora_rank"], scaling=d["lora_scaling"], seed=args.seed)
    hyper = cp.DiffusionHyper(
        batch_size=d["batch_size"],
        epochs=args.epochs or d["epochs"],
        learning_rate=d["learning_rate"],
        weight_decay=d["weight_decay"],
    )
    adapter, curve = cp.train_lora(base, adapter, corpus, schedule, hyper, args.seed)
    cp.save_lora(adapter, args.out)
    _write_curve(curve, args.curve, args.curve_png)
    print(f"trained rank-{adapter.rank} adapter; final loss {curve[-1][1]:.1f}")
    return 0


def _models_from_args(args, cfg) -> ev.BenchModels:
    priors = wg.default_priors()
    g = cfg["grounding"]
    if getattr(args, "embedder", None):
        embedder = gr.load_model(args.embedder)
    else:
        embedder = gr.make_base_model(g["base_seed"], priors, dim=g["dim"], noise=g["base_noise"])
        log.warning("no --embedder checkpoint; using the synthetic base model")
    denoiser = schedule = None
    if getattr(args, "denoiser", None):
        denoiser, schedule = cp.load_denoiser(args.denoiser)
    return ev.BenchModels(
        embedder=embedder,
        random_embedder=gr.make_random_model(97, dim=g["dim"]),
        priors=priors,
        denoiser=denoiser,
        schedule=schedule,
    )


def _object_id(name: str) -> int:
    try:
        return wg.OBJECT_VOCAB.index(name)
    except ValueError:
        raise UsageError(
            f"unknown object {name!r}; choose from {', '.join(wg.OBJECT_VOCAB)}"
        ) from None


def cmd_run(args) -> int:
    cfg = _resolved_config(args)
    fp = cfgmod.fingerprint(cfg)
    plan = wg.load_world(args.world)
    target = _object_id(args.target)
    models = _models_from_args(args, cfg)
    policy = ev.make_policy(args.policy, models, cfgmod.planner_config(cfg))
    if args.start:
        x, y = (int(v) for v in args.start.split(","))
        start = (x, y)
    else:
        free = plan.free_mask()
        ys, xs = np.nonzero(free)
        i = int(np.random.default_rng(args.seed).integers(len(xs)))
        start = (int(xs[i]), int(ys[i]))
    spec = ev.EpisodeSpec(
        plan.seed, start, 0, target, args.seed, cfg["benchmark"]["step_budget"]
    )
    result = ev.run_episode(plan, policy, spec, cfgmod.sensor_config(cfg), keep_eam=True)
    report = ev.MetricsReport([], 1, fp, [result])
    with open(args.out, "w") as f:
        f.write(ev.episode_log_lines(report))
    if args.snapshot and result.eam_final is not None:
        from . import eam as emod

        emod.save_eam(result.eam_final, args.snapshot)
    print(
        f"episode: success={result.success} steps={result.steps} "
        f"spl={result.spl_term():.3f} fingerprint={fp}"
    )
    return 0


def cmd_bench(args) -> int:
    cfg = _resolved_config(args)
    b = cfg["benchmark"]
    if args.policies:
        b = dict(b, policies=[p.strip() for p in args.policies.split(",")])
    if args.episodes:
        b = dict(b, n_episodes=args.episodes)
    if args.jobs:
        b = dict(b, jobs=args.jobs)
    for name in b["policies"]:
        if name not in ev.POLICY_NAMES:
            raise UsageError(f"unknown policy {name!r}; expected one of {ev.POLICY_NAMES}")
    bench_cfg = ev.BenchConfig(
        policies=tuple(b["policies"]),
        n_episodes=b["n_episodes"],
        world_seed_base=b["world_seed_base"],
        episode_seed_base=b["episode_seed_base"],
        min_start_goal=b["min_start_goal"],
        step_budget=b["step_budget"],
        object_density=cfg["worldgen"]["object_density"],
        gen=cfgmod.gen_config(cfg),
        sensors=cfgmod.sensor_config(cfg),
        planner=cfgmod.planner_config(cfg),
    )
    models = _models_from_args(args, cfg)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    done = [0]

    def progress(i, name, result):
        done[0] += 1
        log.info("episode %d %s: success=%s", i, name, result.success)

    report = ev.run_benchmark(bench_cfg, models, progress=progress)
    with open(out / "episodes.csv", "w") as f:
        f.write(ev.episodes_csv(report))
    with open(out / "episodes.jsonl", "w") as f:
        f.write(ev.episode_log_lines(report))
    table = ev.report_table(report)
    with open(out / "report.txt", "w") as f:
        f.write(table)
    print(table, end="")
    return 0


def cmd_render(args) -> int:
    sources = [s for s in (args.world, args.eam, args.log) if s]
    if not sources:
        raise UsageError("render needs --world, --eam or --log")
    if args.eam:
        from . import eam as emod

        snap = emod.load_eam(args.eam)
        data = rd.render_eam_png(snap, scale=args.scale)
    elif args.log:
        if not args.world:
            raise UsageError("--log rendering also needs --world for the backdrop")
        plan = wg.load_world(args.world)
        with open(args.log) as f:
            record = json.loads(f.readline())
        traj = [tuple(p[:2]) for p in record["trajectory"]]
        indices = plan.cells.astype(np.uint8).copy()
        for x, y in traj:
            indices[y, x] = rd.IDX_TRAJECTORY
        data = rd._indexed_png(indices, args.scale)
    else:
        plan = wg.load_world(args.world)
        data = rd.render_plan_png(plan, scale=args.scale, objects=True)
    with open(args.out, "wb") as f:
        f.write(data)
    print(f"wrote {args.out}")
    return 0


def cmd_inspect(args) -> int:
    path = Path(args.path)
    data = path.read_bytes()
    if data.startswith(b"eamnav-world/1"):
        plan = wg.load_world_text(data.decode())
        print(
            f"world: {plan.width}x{plan.height}, {len(plan.rooms)} rooms, "
            f"{len(plan.objects)} objects, seed {plan.seed}"
        )
        for room in plan.rooms:
            print(f"  room {room.id}: {room.label} ({len(room.cells)} cells)")
    elif data.startswith(b"eamnav-embed/1"):
        m = gr.load_model_bytes(data)
        print(f"embedder: {m.obj_table.shape[0]} objects x d={m.dim}, "
              f"{m.n_classes} anchors, temperature {m.temperature}")
    elif data.startswith(b"eamnav-ddpm/1"):
        net, schedule = cp.load_denoiser_bytes(data)
        n = sum(p.numel() for p in net.parameters())
        print(f"denoiser: width {net.width}, {net.channels} channels, "
              f"{n} parameters, schedule T={schedule.T} "
              f"beta=[{schedule.beta_min}, {schedule.beta_max}]")
    elif data.startswith(b"eamnav-lora/1"):
        a = cp.load_lora_bytes(data)
        print(f"lora adapter: rank {a.rank}, scaling {a.scaling}, "
              f"{len(a.matrices)} matrices, {a.n_trainable()} trainable params")
    elif data.startswith(b"eamnav-eam/1"):
        from . import eam as emod

        snap = emod.load_eam_bytes(data)
        known = float((snap.exploration != 0).mean())
        print(f"eam snapshot: {snap.width}x{snap.height}, d={snap.dim}, "
              f"{known:.1%} explored")
    else:
        raise UsageError(f"unrecognized artifact: {path}")
    return 0


COMMANDS = {
    "gen": cmd_gen,
    "train": cmd_train,
    "run": cmd_run,
    "bench": cmd_bench,
    "render": cmd_render,
    "inspect": cmd_inspect,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return COMMANDS[args.command](args)
    except (UsageError, cfgmod.ConfigError, wg.GenerationError) as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except ValueError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except (OSError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
