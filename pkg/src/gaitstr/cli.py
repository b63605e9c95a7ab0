"""``gaitstr`` command line: generate | train | eval | refine | plot.

Exit codes: 0 success, 1 usage or configuration error, 2 runtime or data error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from datetime import datetime, timezone
from pathlib import Path

from . import __version__
from .dataset import GaitDataset
from .errors import ConfigError, GaitSTRError, InvalidInputError
from .evaluation import mpjpe, write_metrics_csv, write_view_matrix_csv
from .experiments import evaluate_model, refine_joints, write_refinement_csv
from .skeleton import (
    JointSequence,
    inject_jitter,
    joints_to_bones,
    read_skeleton_archive,
    smooth_average,
    smooth_gaussian,
    write_skeleton_archive,
)
from .synthetic import CONDITIONS, GaitSample, build_dataset, read_silhouette_archive
from .training import TrainConfig, apply_overrides, dump_config, load_checkpoint, load_config, train


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _write_manifest(out_dir: Path, command: str, args, started: float, config=None, seed=None,
                    inputs=(), outputs=()):
    record = {
        "command": command,
        "argv": [a for a in sys.argv[1:]],
        "config": config,
        "seed": seed,
        "inputs": [str(p) for p in inputs],
        "outputs": [str(p) for p in outputs],
        "version": __version__,
        "started_at": datetime.fromtimestamp(started, timezone.utc).isoformat(),
        "wall_clock_s": round(time.time() - started, 3),
    }
    path = out_dir / "run_manifest.json"
    path.write_text(json.dumps(record, indent=2, sort_keys=True) + "\n")
    return path


# --- commands -----------------------------------------------------------------------


def cmd_generate(args, started):
    out = Path(args.out)
    manifest = build_dataset(out, args.ids, args.seqs, args.frames, views=args.views,
                             conditions=args.conditions, seed=args.seed)
    _write_manifest(out, "generate", args, started, seed=args.seed, outputs=[manifest],
                    config={"ids": args.ids, "seqs": args.seqs, "frames": args.frames,
                            "views": args.views, "conditions": args.conditions})
    print(manifest)


def _resolve_config(args) -> TrainConfig:
    config = load_config(args.config) if args.config else TrainConfig()
    return apply_overrides(config, args.set)


_RESUMABLE_KEYS = ("iterations", "log_interval", "checkpoint_interval")


def cmd_train(args, started):
    out = Path(args.out)
    data = GaitDataset.load(args.data).split(args.split)
    if len(data) == 0:
        raise InvalidInputError(f"split {args.split!r} of {args.data} is empty")
    if args.resume:
        if args.config:
            raise ConfigError("--config cannot be combined with --resume; the checkpoint carries its config")
        state = load_checkpoint(args.resume)
        changed = apply_overrides(state.config, args.set)
        bad = sorted(k for k, v in changed.to_dict().items()
                     if v != getattr(state.config, k) and k not in _RESUMABLE_KEYS)
        if bad:
            raise ConfigError(f"cannot change {', '.join(bad)} when resuming")
        state.config = config = changed
    else:
        state, config = None, _resolve_config(args)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(dump_config(config))
    state = train(config, data, out, resume=state)
    print(out / "last.pt")
    _write_manifest(out, "train", args, started, config=config.to_dict(), seed=config.seed,
                    inputs=[args.data] + ([args.resume] if args.resume else []),
                    outputs=[out / "last.pt", out / "metrics.csv"])


def cmd_eval(args, started):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    state = load_checkpoint(args.checkpoint)
    samples = GaitDataset.load(args.data).split(args.split).samples
    protocol = args.protocol
    if protocol == "simple":
        protocol = "condition" if any(s.condition != "clean" for s in samples) else "parity"
    with_views = protocol == "views"
    report = evaluate_model(
        state.model, samples, "condition" if with_views else protocol, state.config.frames,
        args.jitter_rate, args.jitter_magnitude, args.jitter_seed, with_views=with_views,
    )
    outputs = [write_metrics_csv(report, out / "metrics.csv")]
    if report.views is not None:
        outputs.append(write_view_matrix_csv(report.views, out / "view_matrix.csv"))
    print(f"rank1={report.rank[1]:.4f} mAP={report.mAP:.4f} mINP={report.mINP:.4f}")
    _write_manifest(out, "eval", args, started, config=vars_config(args), seed=args.jitter_seed,
                    inputs=[args.checkpoint, args.data], outputs=outputs)


def vars_config(args):
    return {k: v for k, v in vars(args).items() if k not in ("func",)}


def _paired_silhouettes(skeleton_path: Path, given):
    if given:
        return Path(given)
    guess = skeleton_path.parent.parent / "silhouettes" / (skeleton_path.stem + ".gsil")
    if not guess.exists():
        raise InvalidInputError(f"no --silhouettes given and {guess} does not exist")
    return guess


def cmd_refine(args, started):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    state = load_checkpoint(args.checkpoint)
    skel_path = Path(args.skeleton)
    joints = read_skeleton_archive(skel_path)
    if not isinstance(joints, JointSequence):
        raise InvalidInputError(f"{skel_path} holds bones; refine expects a joint archive")
    sil_path = _paired_silhouettes(skel_path, args.silhouettes)
    sils = read_silhouette_archive(sil_path)
    reference = read_skeleton_archive(args.reference) if args.reference else None
    if args.jitter_rate > 0:
        reference = reference or joints
        joints, _ = inject_jitter(joints, args.jitter_rate, args.jitter_magnitude, args.jitter_seed)
    sample = GaitSample(label=0, condition="clean", view="090", silhouettes=sils, joints=joints)
    refined = JointSequence(refine_joints(state.model, [sample])[0], joints.topology)
    outputs = [
        write_skeleton_archive(out / "refined_joints.gskl", refined),
        write_skeleton_archive(out / "refined_bones.gskl", joints_to_bones(refined)),
        write_skeleton_archive(out / "input_joints.gskl", joints),
    ]
    if reference is not None:
        table = {
            "raw": mpjpe(joints, reference),
            "average": mpjpe(smooth_average(joints), reference),
            "gaussian": mpjpe(smooth_gaussian(joints), reference),
            "refined": mpjpe(refined, reference),
        }
        outputs.append(write_refinement_csv(table, out / "mpjpe.csv"))
        for k, v in table.items():
            print(f"{k:9s} {v:.6f}")
    print(out / "refined_joints.gskl")
    _write_manifest(out, "refine", args, started, config=vars_config(args), seed=args.jitter_seed,
                    inputs=[args.checkpoint, skel_path, sil_path], outputs=outputs)


def cmd_plot(args, started):
    from .plotting import render_frame

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    original = read_skeleton_archive(args.skeleton)
    refined = read_skeleton_archive(args.refined) if args.refined else None
    sils = read_silhouette_archive(args.silhouettes) if args.silhouettes else None
    t = original.num_frames
    frames = args.frames if args.frames is not None else list(range(t))
    for f in frames:
        if not 0 <= f < t:
            raise InvalidInputError(f"frame {f} is out of range for a {t}-frame sequence")
    outputs = []
    for f in frames:
        img = render_frame(original, f, refined=refined, silhouettes=sils, scale=args.scale)
        path = out / f"frame_{f:04d}.png"
        img.save(path, optimize=False)
        outputs.append(path)
    print(f"wrote {len(outputs)} image(s) to {out}")
    _write_manifest(out, "plot", args, started, config=vars_config(args),
                    inputs=[p for p in (args.skeleton, args.refined, args.silhouettes) if p],
                    outputs=outputs)


# --- parser -------------------------------------------------------------------------


def _int_list(text):
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _str_list(text):
    return [v.strip() for v in text.split(",") if v.strip()]


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="gaitstr", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log training progress")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("generate", help="write a synthetic walking dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--ids", type=int, default=16)
    g.add_argument("--seqs", type=int, default=4, help="sequences per identity")
    g.add_argument("--frames", type=int, default=30)
    g.add_argument("--views", type=_str_list, default=["090"], help="comma-separated angles")
    g.add_argument("--conditions", type=_str_list, default=list(CONDITIONS))
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="train a model on the train split")
    t.add_argument("--data", required=True, help="dataset directory or manifest.jsonl")
    t.add_argument("--out", required=True)
    t.add_argument("--config", help="key = value config file")
    t.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override one config key (repeatable)")
    t.add_argument("--resume", help="checkpoint to continue from")
    t.add_argument("--split", default="train")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="retrieval metrics for a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--protocol", choices=("simple", "condition", "parity", "views"), default="simple")
    e.add_argument("--split", default="test")
    e.add_argument("--jitter-rate", type=float, default=0.0)
    e.add_argument("--jitter-magnitude", type=float, default=0.0)
    e.add_argument("--jitter-seed", type=int, default=0)
    e.set_defaults(func=cmd_eval)

    r = sub.add_parser("refine", help="refine one skeleton archive with a trained model")
    r.add_argument("--checkpoint", required=True)
    r.add_argument("--skeleton", required=True, help="joint archive (.gskl)")
    r.add_argument("--silhouettes", help="paired silhouette archive (.gsil)")
    r.add_argument("--reference", help="clean joint archive for the error table")
    r.add_argument("--out", required=True)
    r.add_argument("--jitter-rate", type=float, default=0.0,
                   help="corrupt the input first; the uncorrupted input becomes the reference")
    r.add_argument("--jitter-magnitude", type=float, default=0.1)
    r.add_argument("--jitter-seed", type=int, default=0)
    r.set_defaults(func=cmd_refine)

    pl = sub.add_parser("plot", help="render skeleton overlays to PNG")
    pl.add_argument("--skeleton", required=True)
    pl.add_argument("--refined", help="refined joint archive drawn on top")
    pl.add_argument("--silhouettes", help="silhouette archive drawn underneath")
    pl.add_argument("--frames", type=_int_list, help="comma-separated frame indices (default: all)")
    pl.add_argument("--scale", type=int, default=4)
    pl.add_argument("--out", required=True)
    pl.set_defaults(func=cmd_plot)
    return p


def main(argv=None) -> int:
    started = time.time()
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(f"gaitstr: error: {exc}", file=sys.stderr)
        return 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args, started)
    except (ConfigError, UsageError) as exc:
        print(f"gaitstr: config error: {exc}", file=sys.stderr)
        return 1
    except (GaitSTRError, OSError, ValueError) as exc:
        print(f"gaitstr: error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
