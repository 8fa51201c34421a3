"""Command-line entry point: ``cmnet <command> [options]``.

Every command resolves its configuration as defaults < ``--config`` file <
``--set key=value`` overrides < dedicated flags, and prints the result with
the root seed before doing any work.
"""
from __future__ import annotations

import argparse
import sys
from pathlib import Path

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2

ABLATION_ROWS = (("baseline", "Baseline"), ("gru", "+ConvGRU"), ("motion", "+Motion"))

# knobs that are not model or train keys
DEFAULTS = {
    "data.count": "8",
    "data.size": "64",
    "data.frames": "3",
    "data.camouflage": "0.0",
    "data.max_shift": "4",
    "data.feather": "1.0,3.0",
    "data.cue_frames": "0",
    "eval.count": "20",
    "ablate.seeds": "3",
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="key=value config file")
    common.add_argument("--seed", type=int, default=0, help="root seed (u64)")
    common.add_argument("--out", type=Path, help="output directory or file")
    common.add_argument("--threads", type=int, default=1,
                        help="BLAS threads; bitwise reproducibility holds only for 1")
    common.add_argument("--precision", choices=("single", "double"), default="single")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="override one config key (repeatable)")

    parser = _Parser(prog="cmnet", description="Context-motion video matting toolkit")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth-data", parents=[common], help="write a synthetic dataset tree")
    p.add_argument("--count", type=int)
    p.add_argument("--size", type=int)
    p.add_argument("--frames", type=int)

    p = sub.add_parser("train", parents=[common], help="train a model")
    p.add_argument("--data", type=Path, help="dataset root (synthesised in memory if omitted)")
    p.add_argument("--steps", type=int)
    p.add_argument("--resume", type=Path, help="checkpoint to continue from")

    p = sub.add_parser("eval", parents=[common], help="score predictions against ground truth")
    p.add_argument("--data", type=Path, required=True)
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--checkpoint", type=Path)
    src.add_argument("--pred", type=Path, help="tree of predicted alpha_/fg_ images")

    p = sub.add_parser("infer", parents=[common], help="predict alpha and foreground for one sequence")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--input", type=Path, required=True, help="sequence directory with frame_%%03d.png")

    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient suite")
    p.add_argument("--size", type=int, default=8)

    p = sub.add_parser("make-trimap", parents=[common], help="trimap from an alpha matte")
    p.add_argument("--alpha", type=Path, required=True)
    p.add_argument("--radius", type=int, help="dilation radius (random in [5, 15] if omitted)")

    p = sub.add_parser("ablate", parents=[common], help="baseline / +ConvGRU / +Motion comparison")
    p.add_argument("--data", type=Path, help="training dataset root (synthesised if omitted)")
    p.add_argument("--test", type=Path, help="test dataset root (synthesised if omitted)")
    p.add_argument("--steps", type=int)
    p.add_argument("--seeds", type=int)
    return parser


def resolve_config(args) -> dict[str, str]:
    from .config import read_kv
    from .errors import UsageError
    from .model import ModelConfig
    from .train import TrainConfig

    cfg = dict(DEFAULTS)
    cfg.update(ModelConfig().to_mapping())
    cfg.update(TrainConfig().to_mapping())
    if args.config is not None:
        cfg.update(read_kv(args.config))
    for item in args.overrides:
        if "=" not in item:
            raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        cfg[k.strip()] = v.strip()
    flags = {"count": "data.count", "size": "data.size", "frames": "data.frames",
             "steps": "train.steps", "seeds": "ablate.seeds"}
    for attr, key in flags.items():
        value = getattr(args, attr, None)
        if value is not None and not (args.command == "gradcheck" and attr == "size"):
            cfg[key] = str(value)
    cfg["train.seed"] = str(args.seed)
    cfg["precision"] = args.precision
    return cfg


def echo_config(cfg: dict[str, str], seed: int) -> None:
    print(f"# resolved config (root seed {seed})")
    for k in sorted(cfg):
        print(f"{k}={cfg[k]}")
    sys.stdout.flush()


def _synth_cfg(cfg):
    from .data.synth import SynthConfig

    from .errors import UsageError

    size = int(cfg["data.size"])
    feather = tuple(float(v) for v in cfg["data.feather"].split(","))
    if len(feather) != 2:
        raise UsageError("data.feather expects MIN,MAX")
    return SynthConfig(height=size, width=size, frames=int(cfg["data.frames"]),
                       max_shift=int(cfg["data.max_shift"]), feather=feather,
                       camouflage=float(cfg["data.camouflage"]), cue_frames=int(cfg["data.cue_frames"]))


def _synth_set(cfg, seed: int, tag: str, count: int):
    from .data.synth import generate_sequence
    from .rng import derive_seed

    sc = _synth_cfg(cfg)
    return {f"seq_{i:04d}": generate_sequence(sc, derive_seed(seed, tag, i)) for i in range(count)}


def _need_out(args) -> Path:
    from .errors import UsageError

    if args.out is None:
        raise UsageError(f"{args.command} needs --out")
    return args.out


def cmd_synth_data(args, cfg) -> int:
    from .data.io import save_dataset

    out = _need_out(args)
    seqs = _synth_set(cfg, args.seed, "synth-data", int(cfg["data.count"]))
    save_dataset(out, seqs)
    print(f"wrote {len(seqs)} sequences to {out}")
    return EXIT_OK


def _model(cfg, seed: int):
    from .model import ContextMotionNet, ModelConfig

    return ContextMotionNet(ModelConfig.from_mapping(cfg), seed=seed, precision=cfg["precision"])


def cmd_train(args, cfg) -> int:
    from .config import write_kv
    from .data.io import load_dataset
    from .train import TrainConfig, Trainer

    out = _need_out(args)
    out.mkdir(parents=True, exist_ok=True)
    write_kv(out / "config.txt", cfg)
    if args.data is not None:
        seqs = list(load_dataset(args.data).values())
    else:
        seqs = list(_synth_set(cfg, args.seed, "train", int(cfg["data.count"])).values())
    tcfg = TrainConfig.from_mapping(cfg)
    model = _model(cfg, args.seed)
    with open(out / "train.log", "a", encoding="utf-8") as log:
        def emit(line: str) -> None:
            log.write(line + "\n")
            log.flush()

        trainer = Trainer(model, seqs, tcfg, out, emit)
        if args.resume is not None:
            trainer.resume(args.resume)
            print(f"resumed at step {trainer.step}")
        trainer.run()
    trainer.save(out / "final.cmck")
    last = trainer.history[-1] if trainer.history else None
    if last:
        print(f"finished step {last['step']}: loss {last['loss']:.6f}")
    return EXIT_OK


def _report_table(rows: list[tuple[str, object]]) -> str:
    head = f"{'video':<16} {'SAD':>10} {'MSE':>10} {'Grad':>10} {'Conn':>10} {'fgMSE':>10}"
    lines = [head, "-" * len(head)]
    for name, r in rows:
        lines.append(f"{name:<16} {r.sad:10.4f} {r.mse:10.4f} {r.grad:10.4f} {r.conn:10.4f} {r.fg_mse:10.4f}")
    return "\n".join(lines)


def _read_predictions(directory: Path, n: int):
    from .data.io import read_png
    from .errors import FormatError

    alphas, fgs = [], []
    for t in range(n):
        a = directory / f"alpha_{t:03d}.png"
        if not a.exists():
            raise FormatError(f"missing prediction {a}")
        alphas.append(read_png(a))
        f = directory / f"fg_{t:03d}.png"
        fgs.append(read_png(f) if f.exists() else None)
    if any(f is None for f in fgs):
        fgs = None
    return alphas, fgs


def cmd_eval(args, cfg) -> int:
    from . import checkpoint
    from .config import write_kv
    from .data.io import load_dataset
    from .metrics import evaluate_video, mean_report
    from .train import predict_sequence

    out = _need_out(args)
    data = load_dataset(args.data)
    model = None
    if args.checkpoint is not None:
        model = _model(cfg, args.seed)
        checkpoint.load(args.checkpoint, model.params)
    rows = []
    for seq_id, seq in data.items():
        if seq.alpha is None:
            continue
        if model is not None:
            alphas, fgs = predict_sequence(model, seq)
        else:
            alphas, fgs = _read_predictions(args.pred / seq_id, len(seq))
        rows.append((seq_id, evaluate_video(alphas, seq.alpha, fgs, seq.fg if fgs else None)))
    if not rows:
        print("no sequences with ground truth", file=sys.stderr)
        return EXIT_FAIL
    agg = mean_report([r for _, r in rows])
    out.mkdir(parents=True, exist_ok=True)
    for seq_id, r in rows:
        write_kv(out / f"{seq_id}.txt", r.to_mapping())
    write_kv(out / "aggregate.txt", agg.to_mapping())
    print(_report_table(rows + [("mean", agg)]))
    return EXIT_OK


def cmd_infer(args, cfg) -> int:
    from . import checkpoint
    from .data.io import load_sequence, write_png

    out = _need_out(args)
    model = _model(cfg, args.seed)
    checkpoint.load(args.checkpoint, model.params)
    seq = load_sequence(args.input)
    from .train import predict_sequence

    alphas, fgs = predict_sequence(model, seq)
    out.mkdir(parents=True, exist_ok=True)
    for t, (a, f) in enumerate(zip(alphas, fgs)):
        write_png(out / f"alpha_{t:03d}.png", a)
        write_png(out / f"fg_{t:03d}.png", f)
    print(f"wrote {len(alphas)} frames to {out}")
    return EXIT_OK


def cmd_gradcheck(args, cfg) -> int:
    from .gradsuite import TOLERANCE, run_suite

    results = run_suite(args.size, args.seed)
    worst = 0.0
    for name, err in results.items():
        flag = "ok" if err < TOLERANCE else "FAIL"
        print(f"{name:<22} {err:.3e} {flag}")
        worst = max(worst, err)
    print(f"max relative error {worst:.3e} (tolerance {TOLERANCE:g})")
    return EXIT_OK if worst < TOLERANCE else EXIT_FAIL


def cmd_make_trimap(args, cfg) -> int:
    import numpy as np

    from .data.io import read_image, write_png
    from .data.trimap import dilate_trimap
    from .rng import make_rng

    out = _need_out(args)
    radius = args.radius
    if radius is None:
        radius = int(make_rng(args.seed, "trimap").integers(5, 16))
    alpha = read_image(args.alpha)
    if alpha.shape[0] == 3:
        alpha = alpha.mean(axis=0, keepdims=True)
    tri = dilate_trimap(alpha, radius)
    write_png(out, (tri.map.astype(np.float64) / 255.0)[None], bits=8)
    print(f"radius {radius}: wrote {out}")
    return EXIT_OK


def run_ablation(train_seqs, test_seqs, cfg: dict[str, str], seeds: list[int], log=print):
    """Train the three configurations on ``train_seqs`` for each seed and
    score mean SAD on ``test_seqs``. Returns {ablation: [sad per seed]}."""
    from .model import ContextMotionNet, ModelConfig
    from .train import TrainConfig, Trainer, evaluate_sequences

    results: dict[str, list[float]] = {}
    for ablation, label in ABLATION_ROWS:
        results[ablation] = []
        for seed in seeds:
            mc = ModelConfig.from_mapping({**cfg, "ablation": ablation, "flow.provider": "oracle"})
            tc = TrainConfig.from_mapping({**cfg, "train.seed": str(seed)})
            model = ContextMotionNet(mc, seed=seed, precision=cfg.get("precision", "single"))
            Trainer(model, train_seqs, tc).run()
            report, _ = evaluate_sequences(model, test_seqs)
            results[ablation].append(report.sad)
            log(f"{label} seed {seed}: SAD {report.sad:.4f}")
    return results


def format_ablation(results: dict[str, list[float]]) -> str:
    import numpy as np

    head = f"{'config':<10} {'SAD mean':>10} {'SAD std':>10}  per-seed"
    lines = [head, "-" * len(head)]
    for ablation, label in ABLATION_ROWS:
        v = np.array(results[ablation])
        lines.append(f"{label:<10} {v.mean():10.4f} {v.std():10.4f}  " + " ".join(f"{x:.4f}" for x in v))
    return "\n".join(lines)


def cmd_ablate(args, cfg) -> int:
    from .data.io import load_dataset
    from .rng import derive_seed

    if args.data is not None:
        train = list(load_dataset(args.data).values())
    else:
        train = list(_synth_set(cfg, args.seed, "ablate-train", int(cfg["data.count"])).values())
    if args.test is not None:
        test = list(load_dataset(args.test).values())
    else:
        test = list(_synth_set(cfg, args.seed, "ablate-test", int(cfg["eval.count"])).values())
    seeds = [derive_seed(args.seed, "ablate", k) % (2 ** 32) for k in range(int(cfg["ablate.seeds"]))]
    results = run_ablation(train, test, cfg, seeds)
    table = format_ablation(results)
    print(table)
    if args.out is not None:
        args.out.parent.mkdir(parents=True, exist_ok=True)
        args.out.write_text(table + "\n", encoding="utf-8")
    return EXIT_OK


COMMANDS = {
    "synth-data": cmd_synth_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "infer": cmd_infer,
    "gradcheck": cmd_gradcheck,
    "make-trimap": cmd_make_trimap,
    "ablate": cmd_ablate,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else EXIT_OK
    if args.threads < 1:
        print("cmnet: error: --threads must be >= 1", file=sys.stderr)
        return EXIT_USAGE

    from threadpoolctl import threadpool_limits

    from .errors import CMNetError, UsageError

    try:
        cfg = resolve_config(args)
        echo_config(cfg, args.seed)
        with threadpool_limits(limits=args.threads):
            return COMMANDS[args.command](args, cfg)
    except UsageError as exc:
        print(f"cmnet {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (CMNetError, OSError, ValueError) as exc:
        print(f"cmnet {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
