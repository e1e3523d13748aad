"""Command-line entry point (``splitmi`` or ``python -m splitmi``)."""

import argparse
import json
import logging
import sys
from pathlib import Path

import torch

from .config import load_config
from .errors import ConfigurationError
from .experiment import AttackSpec, ExperimentSpec, build_pipeline, load_records, run_experiment, sweep
from .trainer import BaselineDefenseConfig

DEFENSES = ("none", "vclub", "add_noise", "compress")


def _spec_from_args(args):
    spec = load_config(args.config) if args.config else ExperimentSpec()
    if args.seed is not None:
        spec.seed = args.seed
    if args.aux_size is not None:
        spec.dataset.aux_size = args.aux_size
    if args.lambda_d is not None:
        spec.defense.lambda_d = args.lambda_d
    if args.lambda_l is not None:
        spec.defense.lambda_l = args.lambda_l
    if args.defense is not None:
        if args.defense == "none":
            spec.defense.lambda_d = spec.defense.lambda_l = 0.0
            spec.baseline = BaselineDefenseConfig()
        elif args.defense in ("add_noise", "compress"):
            spec.defense.lambda_d = spec.defense.lambda_l = 0.0
            spec.baseline = BaselineDefenseConfig(
                args.defense, noise_scale=args.noise_scale or 0.0, compression_rate=args.compression_rate or 0.0
            )
        elif not (spec.defense.lambda_d or spec.defense.lambda_l):
            raise ConfigurationError("--defense vclub needs --lambda-d and/or --lambda-l > 0")
    if getattr(args, "attack", None):
        spec.attacks = [AttackSpec(a) for a in args.attack]
    return spec


def _common(p):
    p.add_argument("--config", help="INI file (see docs/config_reference.md)")
    p.add_argument("--seed", type=int)
    p.add_argument("--lambda-d", type=float)
    p.add_argument("--lambda-l", type=float)
    p.add_argument("--defense", choices=DEFENSES)
    p.add_argument("--noise-scale", type=float, help="Laplace scale for --defense add_noise")
    p.add_argument("--compression-rate", type=float, help="fraction zeroed by --defense compress")
    p.add_argument("--aux-size", type=int)
    p.add_argument("--out", default="runs", help="output directory")


def cmd_train(args):
    spec = _spec_from_args(args)
    spec.attacks = []
    out = Path(args.out)
    p = build_pipeline(spec.resolved())
    out.mkdir(parents=True, exist_ok=True)
    (out / "trace.jsonl").write_text(p.trace.to_jsonl())
    from .model import save_checkpoint

    save_checkpoint(out / "model.ckpt", {"head": p.model.head, "encoder": p.model.encoder, "classifier": p.model.classifier})
    rec = run_experiment(spec, out / "records.jsonl", pipeline=p)
    print(json.dumps({"clean_accuracy": rec.clean_accuracy, "record": str(out / "records.jsonl")}))


def cmd_attack(args):
    spec = _spec_from_args(args)
    if not spec.attacks:
        spec.attacks = [AttackSpec("KA")]
    out = Path(args.out)
    rec = run_experiment(spec, out / "records.jsonl", image_dir=out / "images")
    print(json.dumps({"clean_accuracy": rec.clean_accuracy, "attacks": rec.attacks}))


def cmd_bound_check(args):
    from .guarantees import data_campaign, prediction_campaign

    start = args.seed or 0
    seeds = range(start, start + args.worlds)
    recs = prediction_campaign(seeds) + data_campaign(seeds, kappa_convention=args.kappa)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "bound_checks.jsonl").write_text("".join(r.to_json() + "\n" for r in recs))
    failures = [r for r in recs if not r.holds]
    print(json.dumps({"checks": len(recs), "counterexamples": len(failures)}))
    return 1 if failures else 0


def cmd_sweep(args):
    spec = _spec_from_args(args)
    values = [float(v) for v in args.values.split(",")]
    seeds = [int(s) for s in args.seeds.split(",")]
    out = Path(args.out) / "records.jsonl"
    recs = sweep(spec, args.axis, values, seeds, out=out, workers=args.workers)
    print(json.dumps({"records": len(recs), "file": str(out)}))


def cmd_plot(args):
    from .plotting import emit_plots

    records = []
    for path in args.records:
        records += load_records(path)
    paths = emit_plots(records, args.kind, args.out)
    print(json.dumps([str(p) for p in paths]))


def cmd_protocol_serve(args):
    from .protocol import ServerEndpoint, SocketListener

    listener = SocketListener(args.host, args.port, timeout=args.timeout)
    print(json.dumps({"listening": list(listener.address)}), flush=True)
    served = ServerEndpoint(listener.accept()).serve()
    print(json.dumps({"batches": served}))


def cmd_protocol_connect(args):
    from .data import make_splits
    from .model import build_default_architecture
    from .objectives import AuxClassifier, AuxGenerator
    from .protocol import Session, attach_boundary_defense, run_session

    spec = _spec_from_args(args).resolved()
    splits = make_splits(spec.dataset)
    model = build_default_architecture(spec.dataset.input_shape, spec.dataset.num_classes, spec.scale, spec.seed, spec.width)
    gen = aux = None
    if spec.defense.lambda_d or spec.defense.lambda_l:
        gen = AuxGenerator.for_model(model, spec.seed + 1, spec.generator_variance)
        aux = AuxClassifier.for_model(model, spec.aux_hidden, spec.seed + 2, spec.aux_layers)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    session = Session(
        model, splits.train, spec.defense, gen, aux, transport="remote", host=args.host, port=args.port,
        checkpoint_path=out / "device_abort.ckpt", timeout=args.timeout,
    )
    attach_boundary_defense(session, spec.baseline)
    trace = run_session(session, test=splits.test)
    (out / "trace.jsonl").write_text(trace.to_jsonl())
    print(json.dumps(trace.epochs[-1]))


def build_parser():
    parser = argparse.ArgumentParser(prog="splitmi", description="Split-learning privacy defense toolkit")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a (defended) split model and record clean accuracy")
    _common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("attack", help="train, then run attacks and dump reconstructions")
    _common(p)
    p.add_argument("--attack", action="append", choices=("KA", "rMLE", "PMC", "AMC"))
    p.set_defaults(func=cmd_attack)

    p = sub.add_parser("bound-check", help="verify the leakage bounds on random synthetic worlds")
    _common(p)
    p.add_argument("--worlds", type=int, default=10)
    p.add_argument("--kappa", default="derived", choices=("derived", "as_stated", "as_in_proof"))
    p.set_defaults(func=cmd_bound_check)

    p = sub.add_parser("sweep", help="one record per value of an axis and seed")
    _common(p)
    p.add_argument("--attack", action="append", choices=("KA", "rMLE", "PMC", "AMC"))
    p.add_argument("--axis", default="lambda_d")
    p.add_argument("--values", default="0,0.05,0.1,0.2,0.4")
    p.add_argument("--seeds", default="0")
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("plot", help="accuracy/robustness trade-off plots from records")
    p.add_argument("records", nargs="+")
    p.add_argument("--kind", default="acc_vs_ssim", choices=("acc_vs_ssim", "acc_vs_attack_acc"))
    p.add_argument("--out", default="plots")
    p.set_defaults(func=cmd_plot)

    for name, func, help_ in (
        ("protocol-serve", cmd_protocol_serve, "run the server side of one session over TCP"),
        ("protocol-connect", cmd_protocol_connect, "run the device side against a protocol-serve"),
    ):
        p = sub.add_parser(name, help=help_)
        if name == "protocol-connect":
            _common(p)
        p.add_argument("--host", default="127.0.0.1")
        p.add_argument("--port", type=int, default=5477)
        p.add_argument("--timeout", type=float, default=120.0)
        p.set_defaults(func=func)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    torch.set_num_threads(max(1, torch.get_num_threads()))
    try:
        return args.func(args) or 0
    except ConfigurationError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
