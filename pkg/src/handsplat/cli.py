"""Command-line entry point.

Exit codes: 0 success, 1 usage error, 2 runtime error.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import fileio
from .articulated import AGENTS
from .errors import HandSplatError, MissingFile
from .metrics import evaluate
from .optim import OptimConfig
from .training import deform_agent, joint_train, pose_agent, render_agents, single_train

GT_SIDECAR = "gt/gt.json"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _frame_range(text: str) -> tuple[int, int]:
    try:
        if ".." in text:
            a, b = text.split("..", 1)
            return int(a), int(b)
        return int(text), int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"--frames expects 'a..b', got {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="handsplat", description="Two-hand and object splat reconstruction.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", help="generate a synthetic scene")
    s.add_argument("--out", required=True, help="scene directory to create")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--frames", type=int, default=10)
    s.add_argument("--size", type=int, default=128, help="image width and height in pixels")
    s.add_argument("--object", default="box", choices=["box", "cylinder", "sphere"])
    s.add_argument("--noise", default="standard", choices=["none", "standard"])
    s.add_argument("--motion", default="hold", choices=["hold", "approach"])

    f = sub.add_parser("fit", help="run a training stage")
    f.add_argument("--scene", required=True)
    f.add_argument("--run", required=True, help="run directory for checkpoints and logs")
    f.add_argument("--stage", required=True, choices=["single", "joint"])
    f.add_argument("--agent", choices=list(AGENTS))
    f.add_argument("--iters", type=int)
    f.add_argument("--config", help="JSON file overriding config fields")
    f.add_argument("--resume", action="store_true", help="continue from this stage's checkpoint")

    r = sub.add_parser("render", help="render fitted frames to PNG")
    r.add_argument("--scene", required=True)
    r.add_argument("--run", required=True)
    r.add_argument("--frames", type=_frame_range, default=None, help="inclusive range a..b (0-based)")
    r.add_argument("--out", help="output directory (default: <run>/render)")

    e = sub.add_parser("eval", help="score the fitted object against ground truth")
    e.add_argument("--scene", required=True)
    e.add_argument("--run", help="run directory; omit to score the initialization")
    e.add_argument("--gt", help=f"ground-truth sidecar (default: <scene>/{GT_SIDECAR})")
    e.add_argument("--out", help="report path (default: <run>/eval.json, or stdout)")

    x = sub.add_parser("export-ply", help="write an agent's splats as PLY")
    x.add_argument("--scene", required=True)
    x.add_argument("--run", required=True)
    x.add_argument("--agent", required=True, choices=list(AGENTS))
    x.add_argument("--frame", type=int, help="pose into camera space at this frame")
    x.add_argument("--out", required=True)
    return p


def _config(args, stage: str) -> OptimConfig:
    config = OptimConfig()
    if args.config:
        config = fileio.load_config(args.config, config)
    if args.iters is not None:
        if args.iters < 0:
            raise UsageError("--iters must be non-negative")
        field = "single_iters" if stage == "single" else "joint_iters"
        config = OptimConfig.from_dict({field: args.iters}, config)
    return config


def _checkpoint_path(run: Path, stage: str, agent: str | None = None) -> Path:
    return run / (f"single_{agent}.ckpt" if stage == "single" else "joint.ckpt")


def _fitted_states(run: Path, scene) -> dict:
    """Latest state per agent: joint checkpoint if present, else single-stage ones."""
    joint = _checkpoint_path(run, "joint")
    if joint.exists():
        return fileio.load_checkpoint(joint, scene).agents
    states = {}
    for a in AGENTS:
        path = _checkpoint_path(run, "single", a)
        if path.exists():
            states[a] = fileio.load_checkpoint(path, scene).agents[a]
    return states


def cmd_synth(args) -> int:
    from .synth import synth_generate

    if args.frames < 1 or args.size < 16:
        raise UsageError("--frames must be >= 1 and --size >= 16")
    syn = synth_generate(args.seed, args.frames, args.size, args.object, args.noise, args.motion)
    out = Path(args.out)
    fileio.write_scene(out, syn.scene)
    fileio.write_json(out / GT_SIDECAR, {
        "params": fileio.params_to_json(syn.gt_params),
        "object": syn.object_kind,
        "seed": syn.seed,
        "noise": syn.noise,
        "motion": syn.motion,
    })
    for a, state in syn.gt_states().items():
        fileio.write_ply(out / "gt" / f"splats_{a}.ply", state.gaussians())
    print(f"wrote {args.frames}-frame scene to {out}")
    return 0


def cmd_fit(args) -> int:
    if args.stage == "single" and args.agent is None:
        raise UsageError("fit --stage single requires --agent {l,r,o}")
    scene = fileio.load_scene(args.scene)
    run = Path(args.run)
    run.mkdir(parents=True, exist_ok=True)
    config = _config(args, args.stage)
    ckpt = _checkpoint_path(run, args.stage, args.agent)
    state = None
    if args.resume:
        state = fileio.load_checkpoint(ckpt, scene)
    save = lambda st: fileio.save_checkpoint(ckpt, st)  # noqa: E731
    log_path = run / (f"single_{args.agent}.csv" if args.stage == "single" else "joint.csv")
    with fileio.CsvLog(log_path, append=args.resume) as log:
        if args.stage == "single":
            state = single_train(scene, args.agent, config, state, log=log, checkpoint=save)
        else:
            singles = {}
            if state is None:
                for a in AGENTS:
                    path = _checkpoint_path(run, "single", a)
                    if not path.exists():
                        raise MissingFile(f"joint stage needs single-stage checkpoint {path}")
                    singles[a] = fileio.load_checkpoint(path, scene).agents[a]
            state = joint_train(scene, singles, config, state, log=log, checkpoint=save)
    fileio.write_json(run / f"config_{args.stage}{'_' + args.agent if args.agent else ''}.json", config.to_dict())
    last = state.history[-1]["total"] if state.history else float("nan")
    print(f"{args.stage} stage done at iteration {state.iteration}; last loss {last:.6g}; checkpoint {ckpt}")
    return 0


def cmd_render(args) -> int:
    scene = fileio.load_scene(args.scene)
    run = Path(args.run)
    states = _fitted_states(run, scene)
    missing = [a for a in AGENTS if a not in states]
    if missing:
        raise MissingFile(f"no checkpoint for agent(s) {', '.join(missing)} in {run}")
    a, b = args.frames if args.frames else (0, scene.n_frames - 1)
    if not (0 <= a <= b < scene.n_frames):
        raise UsageError(f"--frames {a}..{b} outside 0..{scene.n_frames - 1}")
    out = Path(args.out) if args.out else run / "render"
    for t in range(a, b + 1):
        image = render_agents(states, scene.camera, t)
        fileio.write_png(out / f"{t:03d}.png", image.rgb)
    print(f"rendered frames {a}..{b} to {out}")
    return 0


def cmd_eval(args) -> int:
    scene = fileio.load_scene(args.scene)
    gt_path = Path(args.gt) if args.gt else Path(scene.root) / GT_SIDECAR
    gt = fileio.read_json(gt_path)
    gt_params = fileio.params_from_json(gt.get("params", {}), str(gt_path))
    template = scene.template("o")
    pred_params = dict(scene.init_params)
    pred_vertices = template.vertices
    if args.run:
        states = _fitted_states(Path(args.run), scene)
        if not states:
            raise MissingFile(f"no checkpoints found in {args.run}")
        for a, st in states.items():
            pred_params[a] = st.frame_params()
        if "o" in states:
            pred_vertices = states["o"].params["centers"]
    report = evaluate(pred_vertices, template.vertices, template.faces, pred_params, gt_params)
    data = {**report.to_dict(), "summary": report.summary()}
    out = args.out or (str(Path(args.run) / "eval.json") if args.run else None)
    if out:
        fileio.write_json(out, data)
    else:
        import json

        print(json.dumps(data, indent=2, sort_keys=True))
    print(report.summary())
    return 0


def cmd_export_ply(args) -> int:
    scene = fileio.load_scene(args.scene)
    states = _fitted_states(Path(args.run), scene)
    if args.agent not in states:
        raise MissingFile(f"no checkpoint for agent {args.agent!r} in {args.run}")
    st = states[args.agent]
    deformed = deform_agent(st)
    if args.frame is None:
        splats = deformed.gaussians
    else:
        if not 0 <= args.frame < scene.n_frames:
            raise UsageError(f"--frame {args.frame} outside 0..{scene.n_frames - 1}")
        splats = pose_agent(st, deformed, args.frame).posed
    splats = splats.with_(colors=np.clip(splats.colors, 0.0, 1.0))
    fileio.write_ply(args.out, splats)
    print(f"wrote {len(splats)} splats to {args.out}")
    return 0


COMMANDS = {"synth": cmd_synth, "fit": cmd_fit, "render": cmd_render, "eval": cmd_eval, "export-ply": cmd_export_ply}


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except (HandSplatError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
