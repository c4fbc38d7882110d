"""Command-line entry point: ``resfri {train,eval,inspect,gradcheck,init-config}``.

Human-readable output goes to stdout.  Failures print one JSON line on
stderr (``{"error": kind, "code": n, "reason": ...}``) and exit with:
2 config, 3 data, 4 numeric abort, 5 gradient check above tolerance.
"""

import argparse
import json
import os
import sys
from dataclasses import replace

from . import gradcheck
from .config import load_config, make_config, save_config, to_document
from .data import DEFAULT_POLICIES, AugmentPolicy, load_dataset, stratified_split
from .errors import ConfigError, DataError, NumericError, UsageError
from .network import block_flops, block_params, build_network, count_flops, count_params
from .plotting import plot_model_summary, plot_training_curves
from .trainer import Trainer, evaluate

EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC, EXIT_GRADCHECK = 2, 3, 4, 5
DATASETS = ("mnist", "fashion", "cifar10", "cifar100")
NUM_CLASSES = {"mnist": 10, "fashion": 10, "cifar10": 10, "cifar100": 100}
CHANNELS = {"mnist": 1, "fashion": 1, "cifar10": 3, "cifar100": 3}


class CLIFailure(Exception):
    def __init__(self, kind, code, reason):
        super().__init__(reason)
        self.kind, self.code, self.reason = kind, code, reason


def _data_root(args):
    root = args.data_root or os.environ.get("RESFRI_DATA_ROOT")
    if not root:
        raise ConfigError("no data root: pass --data-root or set RESFRI_DATA_ROOT")
    return root


def _load_data(root, name):
    try:
        return load_dataset(root, name)
    except FileNotFoundError as exc:
        raise DataError(f"missing dataset file: {exc.filename or exc.args[0]}") from None


def _policy(args):
    policy = DEFAULT_POLICIES[args.dataset]
    if args.flip_prob is not None:
        policy = replace(policy, flip_prob=args.flip_prob)
    if args.no_augment:
        policy = AugmentPolicy.off()
    return policy


def cmd_train(args):
    if args.config:
        net_cfg, train_cfg = load_config(args.config)
    else:
        preset = "mnist" if args.dataset in ("mnist", "fashion") else "desk"
        net_cfg, train_cfg = make_config(preset)
    overrides = {k: v for k, v in (("max_epochs", args.epochs), ("seed", args.seed),
                                   ("batch_size", args.batch_size), ("lr0", args.lr))
                 if v is not None}
    if args.no_wall_time:
        overrides["record_wall_time"] = False
    train_cfg = replace(train_cfg, **overrides)
    train_cfg.__post_init__()
    if net_cfg.input_shape[0] != CHANNELS[args.dataset]:
        raise ConfigError(f"network expects {net_cfg.input_shape[0]} input channels but "
                          f"{args.dataset} has {CHANNELS[args.dataset]}")
    if net_cfg.num_classes != NUM_CLASSES[args.dataset]:
        raise ConfigError(f"network has {net_cfg.num_classes} classes but {args.dataset} "
                          f"has {NUM_CLASSES[args.dataset]}")

    train_full, test = _load_data(_data_root(args), args.dataset)
    train_ds, val_ds = stratified_split(train_full, train_cfg.val_fraction, train_cfg.seed)
    policy = _policy(args)
    log = print if not args.quiet else None
    if args.resume:
        trainer = Trainer.resume(args.resume, train_cfg, policy=policy, log=log)
    else:
        net = build_network(net_cfg, seed=train_cfg.seed)
        trainer = Trainer(net, train_cfg, policy=policy, log=log)

    os.makedirs(args.out, exist_ok=True)
    resolved = to_document(trainer.net.cfg, train_cfg)
    resolved["run"] = {"dataset": args.dataset, "policy": policy.__dict__,
                       "resume": args.resume}
    with open(os.path.join(args.out, "config.json"), "w") as f:
        json.dump(resolved, f, indent=2)
        f.write("\n")

    records = trainer.fit(train_ds, val_ds, args.out)
    if records:
        plot_training_curves(records, os.path.join(args.out, "curves.png"))
    ev = evaluate(trainer.net, test, train_cfg.eval_batch_size)
    summary = {"test_loss": ev.loss, "test_acc": ev.acc, "test_top1_err": ev.top1_err,
               "test_top5_err": ev.top5_err, "n": ev.n, "epochs": trainer.epoch}
    with open(os.path.join(args.out, "test_metrics.json"), "w") as f:
        json.dump(summary, f, indent=2, sort_keys=True)
        f.write("\n")
    print(f"test: loss={ev.loss:.4f} top1_err={ev.top1_err:.4f} top5_err={ev.top5_err:.4f} "
          f"acc={ev.acc:.4f}")
    return 0


def cmd_eval(args):
    from .checkpoint import load_checkpoint

    try:
        net, _, header = load_checkpoint(args.checkpoint)
    except FileNotFoundError:
        raise DataError(f"missing checkpoint file: {args.checkpoint}") from None
    train, test = _load_data(_data_root(args), args.dataset)
    ds = test if args.split == "test" else train
    ev = evaluate(net, ds)
    out = {"split": args.split, "loss": ev.loss, "acc": ev.acc, "top1_err": ev.top1_err,
           "top5_err": ev.top5_err, "n": ev.n, "epoch": header["epoch"]}
    if args.json:
        print(json.dumps(out, sort_keys=True))
    else:
        print(f"{args.split}: loss={ev.loss:.4f} top1_err={ev.top1_err:.4f} "
              f"top5_err={ev.top5_err:.4f} acc={ev.acc:.4f} (n={ev.n}, epoch {header['epoch']})")
    return 0


def inspect_report(net_cfg):
    net = build_network(net_cfg, seed=0)
    params = dict(block_params(net))
    flops = dict(block_flops(net))
    rows = []
    for name in params:
        row = {"name": name, "params": params[name], "flops": flops[name]}
        if name.startswith("blocks."):
            b = net_cfg.blocks[int(name.split(".")[1])]
            row.update(fusion=b.fusion.value, split=b.split, pruning_ratio=b.pruning_ratio,
                       in_channels=b.in_channels, out_channels=b.out_channels)
        rows.append(row)
    return {"blocks": rows, "total_params": count_params(net),
            "total_flops": count_flops(net), "input_shape": list(net_cfg.input_shape)}


def _human(n):
    for unit, scale in (("G", 1e9), ("M", 1e6), ("K", 1e3)):
        if n >= scale:
            return f"{n / scale:.2f}{unit}"
    return str(n)


def cmd_inspect(args):
    if args.config:
        net_cfg, _ = load_config(args.config)
    else:
        net_cfg, _ = make_config(args.preset, args.fusion, args.split)
    report = inspect_report(net_cfg)
    if args.figure:
        plot_model_summary([(r["name"], r["params"], r["flops"]) for r in report["blocks"]],
                           args.figure)
    if args.json:
        print(json.dumps(report, sort_keys=True))
        return 0
    c, h, w = report["input_shape"]
    print(f"input {c}x{h}x{w}")
    print(f"{'stage':<10} {'params':>10} {'flops':>12}  details")
    for r in report["blocks"]:
        extra = ""
        if "fusion" in r:
            extra = (f"{r['fusion']}, split={'yes' if r['split'] else 'no'}, "
                     f"pruning={r['pruning_ratio']:g}, {r['in_channels']}->{r['out_channels']}")
        print(f"{r['name']:<10} {r['params']:>10} {r['flops']:>12}  {extra}")
    print(f"{'total':<10} {report['total_params']:>10} {report['total_flops']:>12}  "
          f"(Flops {_human(report['total_flops'])} | Params {_human(report['total_params'])})")
    return 0


def cmd_gradcheck(args):
    results = gradcheck.run_suite(seed=args.seed, coords=args.coords, blocks=not args.no_blocks)
    failed = [r for r in results if not r.max_rel_err <= args.tolerance]
    for r in results:
        status = "ok" if r not in failed else "FAIL"
        print(f"{r.op:<28} max_rel_err={r.max_rel_err:.3e}  worst={r.worst:<40} {status}")
    if failed:
        worst = max(failed, key=lambda r: r.max_rel_err)
        raise CLIFailure("gradcheck", EXIT_GRADCHECK,
                         f"{len(failed)} op(s) above tolerance {args.tolerance:g}; worst "
                         f"{worst.op} at {worst.worst} ({worst.max_rel_err:.3e})")
    return 0


def cmd_init_config(args):
    net_cfg, train_cfg = make_config(args.preset, args.fusion, args.split)
    save_config(args.out, net_cfg, train_cfg)
    print(f"wrote {args.out}")
    return 0


def build_parser():
    p = argparse.ArgumentParser(prog="resfri", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train a network and write metrics/checkpoints")
    t.add_argument("--config")
    t.add_argument("--data-root")
    t.add_argument("--dataset", choices=DATASETS, required=True)
    t.add_argument("--epochs", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--out", required=True)
    t.add_argument("--resume")
    t.add_argument("--flip-prob", type=float)
    t.add_argument("--no-augment", action="store_true")
    t.add_argument("--no-wall-time", action="store_true",
                   help="write 0 in the wall_seconds column so metrics.csv is reproducible")
    t.add_argument("--quiet", action="store_true")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data-root")
    e.add_argument("--dataset", choices=DATASETS, required=True)
    e.add_argument("--split", choices=("test", "train"), default="test")
    e.add_argument("--json", action="store_true")
    e.set_defaults(func=cmd_eval)

    for name, func, helptext in (("inspect", cmd_inspect, "parameter and FLOP report"),
                                 ("init-config", cmd_init_config, "write a config file")):
        s = sub.add_parser(name, help=helptext)
        if name == "inspect":
            s.add_argument("--config")
            s.add_argument("--json", action="store_true")
            s.add_argument("--figure", help="also save a params/FLOPs bar chart here")
        else:
            s.add_argument("--out", required=True)
        s.add_argument("--preset", choices=("desk", "mnist"), default="desk")
        s.add_argument("--fusion", choices=("addition", "concatenation"), default="addition")
        s.add_argument("--split", action="store_true")
        s.set_defaults(func=func)

    g = sub.add_parser("gradcheck", help="finite-difference gradient suite (float64)")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--tolerance", type=float, default=1e-4)
    g.add_argument("--coords", type=int, default=20)
    g.add_argument("--no-blocks", action="store_true", help="primitives only (fast)")
    g.set_defaults(func=cmd_gradcheck)
    return p


def _fail(kind, code, reason):
    print(json.dumps({"error": kind, "code": code, "reason": str(reason)}), file=sys.stderr)
    return code


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except CLIFailure as exc:
        return _fail(exc.kind, exc.code, exc.reason)
    except (ConfigError, UsageError) as exc:
        return _fail("config", EXIT_CONFIG, exc)
    except (DataError, FileNotFoundError) as exc:
        return _fail("data", EXIT_DATA, exc)
    except NumericError as exc:
        return _fail("numeric", EXIT_NUMERIC, exc)


if __name__ == "__main__":
    sys.exit(main())
