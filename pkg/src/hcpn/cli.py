"""Command-line entry point: ``hcpn {synth,train,infer,eval,gradcheck,verify}``.

Configuration precedence: explicit flags override values from ``--config``
(a JSON object of run settings), which override built-in defaults.

Exit codes: 0 success, 2 usage or configuration error, 3 format or I/O error,
4 verification failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import tensor as T
from .checkpoint import match_params, read_checkpoint, read_sidecar, save_checkpoint
from .data.fileio import read_mask, write_pgm
from .data.synth import ATTRIBUTES, load_sequence, sample_scene, synth_generate, verify_sequence
from .errors import ConfigurationError, ContractError, FormatError, SpecError, VerificationError
from .gradcheck import SUITE, format_report, run_suite
from .inference import binarize, propagate_inference
from .metrics import EvalReport, evaluate_sequence, markdown_summary, write_reports
from .model import HCPNModel, ModelConfig
from .train import OPTIMIZERS, RunConfig, train

EXIT_OK, EXIT_USAGE, EXIT_FORMAT, EXIT_VERIFY = 0, 2, 3, 4

# flag name -> RunConfig field for the training and model switches
RUN_FLAGS = {
    "levels": int, "lr_encoder": float, "lr_decoder": float, "weight_decay": float, "momentum": float,
    "batch": int, "iters": int, "epochs": int, "probe_every": int, "decoder_width": int, "clip_norm": float,
}
SWITCHES = ("no_flow_stream", "no_frame_stream", "two_stream", "bypass_pcm", "bypass_ccm", "bypass_gac",
            "bypass_mcr", "paper_scale")


class UsageError(Exception):
    pass


# ---------------------------------------------------------------- helpers


def sequence_dirs(data_dir) -> list:
    """Sequence directories under ``data_dir`` (from ``index.json`` when present, else by manifest)."""
    data_dir = Path(data_dir)
    if not data_dir.is_dir():
        raise FormatError("data directory not found", path=data_dir)
    index = data_dir / "index.json"
    if index.exists():
        try:
            names = json.loads(index.read_text())["sequences"]
        except (json.JSONDecodeError, KeyError) as exc:
            raise FormatError(f"unreadable index ({exc})", path=index) from None
        return [data_dir / n for n in names]
    if (data_dir / "frames").is_dir():
        return [data_dir]
    found = sorted(p.parent for p in data_dir.glob("*/manifest.json"))
    if not found:
        found = sorted(p for p in data_dir.iterdir() if (p / "frames").is_dir())
    if not found:
        raise FormatError("no sequences found", path=data_dir)
    return found


def check_manifests(dirs) -> None:
    problems = [p for d in dirs for p in verify_sequence(d)]
    if problems:
        raise FormatError(f"manifest check failed: {problems[0]}" + (f" (+{len(problems) - 1} more)" if len(problems) > 1 else ""))


def load_config(args) -> dict:
    """Defaults < config file < explicit flags."""
    merged = {}
    if args.config:
        try:
            merged.update(json.loads(Path(args.config).read_text()))
        except json.JSONDecodeError as exc:
            raise FormatError(f"config is not valid JSON: {exc.msg}", offset=exc.pos, path=args.config) from None
    for key in ("seed", "precision"):
        if getattr(args, key, None) is not None:
            merged[key] = getattr(args, key)
    for key in list(RUN_FLAGS) + ["fusion", "channels", "optimizer"]:
        if getattr(args, key, None) is not None:
            merged[key] = getattr(args, key)
    for key in SWITCHES:
        if getattr(args, key, False):
            merged[key] = True
    return merged


def run_config(args, size: int | None = None) -> RunConfig:
    d = load_config(args)
    if size is not None:
        d["size"] = size
    return RunConfig.from_dict(d)


def load_model(path) -> HCPNModel:
    meta = read_sidecar(path)
    if "model_config" not in meta:
        raise FormatError("checkpoint sidecar lacks model_config", path=path)
    config = ModelConfig.from_dict(meta["model_config"])
    fresh = HCPNModel.create(config, seed=0)
    loaded = match_params(fresh.params, read_checkpoint(path))
    params = {k: T.Tensor(v) for k, v in loaded.items()}
    return HCPNModel(config, params)


# ---------------------------------------------------------------- commands


def cmd_synth(args) -> int:
    if args.seqs < 1:
        raise UsageError("--seqs must be at least 1")
    if args.frames < 2 or args.size < 16:
        raise UsageError("--frames must be >= 2 and --size >= 16")
    attrs = tuple(a for a in (args.attributes or "").split(",") if a)
    unknown = [a for a in attrs if a not in ATTRIBUTES]
    if unknown:
        raise UsageError(f"unknown attribute tags: {', '.join(unknown)}")
    seed = load_config(args).get("seed", 0)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    names = []
    for i in range(args.seqs):
        name = f"seq_{i:03d}"
        seq_seed = seed * 1000 + i
        synth_generate(sample_scene(seq_seed, args.size, args.frames, attrs), seq_seed, out / name)
        names.append(name)
    index = out / "index.json"
    index.write_text(json.dumps({"sequences": names, "seed": seed, "attributes": list(attrs),
                                 "frames": args.frames, "size": args.size}, indent=2) + "\n")
    print(index)
    return EXIT_OK


def cmd_train(args) -> int:
    dirs = sequence_dirs(args.data)
    check_manifests(dirs)
    datasets = [load_sequence(d) for d in dirs]
    size = datasets[0].frames[0].shape[0]
    cfg = run_config(args, size=size)
    result = train(datasets, cfg, log_path=args.log, verbose=args.verbose)
    save_checkpoint(args.out, result.model.params, extra={"model_config": result.model.config.to_dict(),
                                                          "run_config": cfg.to_dict()})
    last = result.log[-1] if result.log else {}
    print(f"checkpoint {args.out}  iters {len(result.log)}  final loss {last.get('loss', float('nan')):.4f}"
          f"  train_j {last.get('train_j', float('nan')):.4f}")
    return EXIT_OK


def _evaluate(dirs, preds_for) -> EvalReport:
    report = EvalReport()
    for d in dirs:
        ds = load_sequence(d)
        preds = preds_for(d, ds)
        attrs = ds.manifest.get("attributes", [])
        report.sequences.append(evaluate_sequence(preds, ds.gt_mask, ds.flow, attrs, d.name))
    return report


def cmd_infer(args) -> int:
    with T.precision(load_config(args).get("precision", 32)):
        model = load_model(args.model)
        dirs = sequence_dirs(args.data)
        out = Path(args.out)

        def predict(d, ds):
            probs = propagate_inference(model, ds)
            seq_out = out / d.name
            seq_out.mkdir(parents=True, exist_ok=True)
            masks = []
            for t, p in enumerate(probs):
                m = binarize(p)
                write_pgm(seq_out / f"{t:05d}.pgm", m)
                if args.probs:
                    write_pgm(seq_out / f"{t:05d}_prob.pgm", p, bits=16)
                masks.append(m)
            return masks

        report = _evaluate(dirs, predict)
    if args.report:
        write_reports(report, args.report)
    print(markdown_summary(report), end="")
    return EXIT_OK


def cmd_eval(args) -> int:
    dirs = sequence_dirs(args.data)

    def predicted(d, ds):
        if args.pred is None:
            return [m.copy() for m in ds.gt_mask]
        seq_pred = Path(args.pred) / d.name
        files = sorted(p for p in seq_pred.glob("*.pgm") if not p.name.endswith("_prob.pgm"))
        if len(files) != len(ds.frames):
            raise FormatError(f"expected {len(ds.frames)} masks, found {len(files)}", path=seq_pred)
        return [read_mask(p) for p in files]

    report = _evaluate(dirs, predicted)
    paths = write_reports(report, args.report, svg=not args.no_svg)
    print(markdown_summary(report), end="")
    print(f"reports: {', '.join(str(p) for p in paths.values())}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    seed = load_config(args).get("seed", 0)
    modules = args.modules.split(",") if args.modules else None
    if modules:
        unknown = [m for m in modules if m not in SUITE]
        if unknown:
            raise UsageError(f"unknown modules: {', '.join(unknown)} (choose from {', '.join(SUITE)})")
    results = run_suite(seed, modules, fault_op=args.fault_op, fault_module=args.fault_module)
    print(format_report(results))
    return EXIT_OK if all(r.passed for r in results) else EXIT_VERIFY


def cmd_verify(args) -> int:
    dirs = sequence_dirs(args.data)
    bad = 0
    for d in dirs:
        problems = verify_sequence(d)
        bad += bool(problems)
        for p in problems:
            print(p)
    print(f"{len(dirs) - bad}/{len(dirs)} sequences verified")
    if bad:
        raise VerificationError(f"{bad} sequence(s) failed verification")
    return EXIT_OK


# ---------------------------------------------------------------- parser


def _int_list(text: str) -> list:
    try:
        return [int(v) for v in text.split(",")]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _add_run_flags(p) -> None:
    g = p.add_argument_group("training and model (override --config)")
    for name, typ in RUN_FLAGS.items():
        g.add_argument("--" + name.replace("_", "-"), dest=name, type=typ, default=None)
    g.add_argument("--channels", type=_int_list, default=None, help="backbone channels per level, e.g. 16,32,64,128")
    g.add_argument("--fusion", choices=("add", "concat", "gaf"), default=None)
    g.add_argument("--optimizer", choices=OPTIMIZERS, default=None)
    for name in SWITCHES:
        g.add_argument("--" + name.replace("_", "-"), dest=name, action="store_true")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None)
    common.add_argument("--precision", type=int, choices=(32, 64), default=None)
    common.add_argument("--config", help="JSON file of run settings; explicit flags take precedence over it")

    parser = argparse.ArgumentParser(prog="hcpn", description=__doc__,
                                     formatter_class=argparse.RawDescriptionHelpFormatter, parents=[common])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common], help="generate synthetic sequences")
    p.add_argument("--out", required=True)
    p.add_argument("--seqs", type=int, default=1)
    p.add_argument("--frames", type=int, default=8)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--attributes", default="", help=f"comma-separated tags from {','.join(ATTRIBUTES)}")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", parents=[common], help="train a model on sequence directories")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--log", help="per-iteration CSV log")
    p.add_argument("--verbose", action="store_true")
    _add_run_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", parents=[common], help="predict masks and evaluate them")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="directory for predicted PGM masks")
    p.add_argument("--report", help="directory for CSV/markdown/SVG reports")
    p.add_argument("--probs", action="store_true", help="also write 16-bit probability maps")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", parents=[common], help="evaluate predicted masks (ground truth when --pred is omitted)")
    p.add_argument("--data", required=True)
    p.add_argument("--pred")
    p.add_argument("--report", required=True)
    p.add_argument("--no-svg", action="store_true")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference check of every module")
    p.add_argument("--modules", help=f"comma-separated subset of {','.join(SUITE)}")
    p.add_argument("--fault-op", help=argparse.SUPPRESS)
    p.add_argument("--fault-module", help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("verify", parents=[common], help="check manifests and file checksums")
    p.add_argument("--data", required=True)
    p.set_defaults(func=cmd_verify)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"hcpn: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ConfigurationError, SpecError, ContractError) as exc:
        print(f"hcpn: configuration error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (FormatError, OSError) as exc:
        print(f"hcpn: format/I-O error: {exc}", file=sys.stderr)
        return EXIT_FORMAT
    except VerificationError as exc:
        print(f"hcpn: verification failed: {exc}", file=sys.stderr)
        return EXIT_VERIFY


if __name__ == "__main__":
    sys.exit(main())
