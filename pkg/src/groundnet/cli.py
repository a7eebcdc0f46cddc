"""Command-line entry point: ``groundnet <command> [options]``.

Commands::

    compile    parse tree -> computation graph (DOT or JSON)
    gen        world spec -> train/val/test scene files
    train      dataset + config -> checkpoint
    ground     checkpoint + scene -> per-node distributions and annotated DOT
    eval       checkpoint + dataset -> accuracy report
    gradcheck  finite-difference self-test of the differentiation engine
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import __version__
from .checkpoint import load_checkpoint, save_checkpoint
from .compiler import Lexicon, export_graph, generate_computation_graph, graph_to_dot
from .modules import execute
from .scene import load_dataset, resolve_split
from .selfcheck import TOLERANCE, check_modules, check_ops
from .synthgen import SPLITS, WorldSpec, split_sizes, write_dataset
from .train import TrainConfig, compile_scene, evaluate, train
from .treebank import read_ptb

log = logging.getLogger("groundnet")


def _parse_value(raw: str):
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def _load_config(path, overrides: list[str]) -> dict:
    cfg: dict = {}
    if path:
        with open(path, encoding="utf-8") as f:
            cfg = json.load(f)
    for item in overrides or ():
        key, sep, value = item.partition("=")
        if not sep:
            raise ValueError(f"--set expects key=value, got {item!r}")
        cfg[key.strip()] = _parse_value(value)
    return cfg


def _lexicon(args) -> Lexicon | None:
    return Lexicon.from_file(args.lexicon) if getattr(args, "lexicon", None) else None


def _write(out: str | None, text: str) -> None:
    if out in (None, "-"):
        sys.stdout.write(text)
    else:
        Path(out).parent.mkdir(parents=True, exist_ok=True)
        Path(out).write_text(text, encoding="utf-8")


def _read_trees(spec: str) -> list[str]:
    if spec.lstrip().startswith("("):
        return [spec]
    text = sys.stdin.read() if spec == "-" else Path(spec).read_text(encoding="utf-8")
    return [line for line in text.splitlines() if line.strip()]


def cmd_compile(args) -> int:
    trees = _read_trees(args.tree)
    lexicon = _lexicon(args)
    outputs = [export_graph(generate_computation_graph(read_ptb(t), lexicon), args.format) for t in trees]
    _write(args.out, "".join(outputs))
    return 0


def cmd_gen(args) -> int:
    cfg = _load_config(args.config, args.set)
    sizes = cfg.pop("sizes", None)
    if args.seed is not None:
        cfg["seed"] = args.seed
    spec = WorldSpec.from_dict(cfg)
    if args.train is not None or args.val is not None or args.test is not None:
        sizes = {"train": args.train or 0, "val": args.val or 0, "test": args.test or 0}
    elif args.size is not None:
        sizes = split_sizes(args.size)
    elif sizes is None:
        sizes = split_sizes(1000)
    paths = write_dataset(spec, sizes, args.out or "data")
    for split in SPLITS:
        log.info("%s: %d scenes -> %s", split, sizes.get(split, 0), paths[split])
    return 0


def cmd_train(args) -> int:
    cfg = _load_config(args.config, args.set)
    if args.seed is not None:
        cfg["seed"] = args.seed
    train_set = load_dataset(resolve_split(args.dataset, "train"))
    val_path = resolve_split(args.dataset, "val")
    val_set = load_dataset(val_path) if Path(args.dataset).is_dir() and val_path.exists() else []
    if train_set and "visual_dim" not in cfg:
        cfg["visual_dim"] = train_set[0].feature_dim
    config = TrainConfig.from_dict(cfg)
    ckpt = train(train_set, config, val_set, _lexicon(args))
    out = args.out or "model.ckpt"
    save_checkpoint(ckpt, out)
    for entry in ckpt.meta["history"]:
        print(json.dumps(entry, sort_keys=True))
    log.info("checkpoint written to %s", out)
    return 0


def cmd_eval(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    scenes = load_dataset(resolve_split(args.dataset, args.split))
    support_from = ckpt.meta.get("train_config", {}).get("support_from", "all")
    if args.support_from:
        support_from = args.support_from
    report = evaluate(scenes, ckpt.params, support_from, _lexicon(args))
    if args.out:
        _write(args.out, report.to_json())
    sys.stdout.write(report.table())
    return 0


def _fill(p: float) -> str:
    # white -> green with probability, like a heat map
    level = int(round(255 * (1.0 - min(max(p, 0.0), 1.0))))
    return f"#{level:02x}ff{level:02x}"


def cmd_ground(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    scenes = load_dataset(args.dataset)
    if args.scene_id is not None:
        matches = [s for s in scenes if s.id == args.scene_id]
        if not matches:
            raise KeyError(f"no scene with id {args.scene_id!r}")
        scene = matches[0]
    else:
        scene = scenes[args.index]
    graph = compile_scene(scene, _lexicon(args))
    result = execute(graph, scene, ckpt.params)
    payload = {"scene": scene.id, "expression": list(scene.expression), **result.to_dict()}
    notes, fills = {}, {}
    for nid in graph.nodes:
        box = result.predicted_box(nid)
        p = float(result.distribution(nid)[result.argmax(nid)])
        notes[nid] = f"box {box} (p={p:.2f})"
        fills[nid] = _fill(p)
    out = Path(args.out or f"ground_{scene.id}")
    _write(str(out.with_suffix(".json")), json.dumps(payload, indent=2, sort_keys=True) + "\n")
    _write(str(out.with_suffix(".dot")), graph_to_dot(graph, notes, fills))
    print(json.dumps({"scene": scene.id, "root_prediction": result.predicted_box(graph.root),
                      "target": scene.target_id}, sort_keys=True))
    return 0


def cmd_gradcheck(args) -> int:
    ops = check_ops(points=args.points, seed=args.seed or 0)
    modules = check_modules(points=args.points, seed=args.seed or 0)
    worst = 0.0
    for name, err in {**ops, **modules}.items():
        print(f"{name:<20} max rel err {err:.3e}")
        worst = max(worst, err)
    ok = worst < TOLERANCE
    print(f"overall max rel err {worst:.3e} ({'PASS' if ok else 'FAIL'} at {TOLERANCE:g})")
    return 0 if ok else 1


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="global random seed")
    common.add_argument("--out", help="output path (default: stdout or a command-specific file)")
    common.add_argument("--config", help="JSON config file")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config value (repeatable)")
    common.add_argument("--lexicon", help="function-word list, one per line")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="groundnet", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("compile", parents=[common], help="compile parse trees into computation graphs")
    p.add_argument("--tree", required=True, help="tree file (one per line), '-' for stdin, or a literal tree")
    p.add_argument("--format", choices=("dot", "json"), default="dot")
    p.set_defaults(func=cmd_compile)

    p = sub.add_parser("gen", parents=[common], help="generate a synthetic dataset")
    p.add_argument("--size", type=int, help="total scenes, split 90/2.5/7.5")
    p.add_argument("--train", type=int)
    p.add_argument("--val", type=int)
    p.add_argument("--test", type=int)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train", parents=[common], help="train a model")
    p.add_argument("--dataset", required=True, help="dataset directory or train file")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("ground", parents=[common], help="ground one scene and export per-node outputs")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True, help="scene file")
    p.add_argument("--index", type=int, default=0)
    p.add_argument("--scene-id")
    p.set_defaults(func=cmd_ground)

    p = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True, help="dataset directory or scene file")
    p.add_argument("--split", default="test", choices=SPLITS)
    p.add_argument("--support-from", choices=("all", "locate"))
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference self-test")
    p.add_argument("--points", type=int, default=10)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except Exception as e:  # surfaced verbatim, nonzero exit
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        if args.verbose:
            raise
        return 2


if __name__ == "__main__":
    sys.exit(main())
