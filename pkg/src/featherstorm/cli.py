"""featherstorm command line: prep, train, attack, ablate, freqstudy, dump.

Settings come from three layers, later ones winning: built-in defaults, an
INI file given with ``--config`` (a ``[common]`` section plus one section per
subcommand, keys spelled like the long flags), and explicit flags.

Exit status is 0 on success, 2 for usage, configuration and input errors and
3 for numeric failures during an attack.
"""

from __future__ import annotations

import argparse
import configparser
import os
import sys
import zlib
from fractions import Fraction
from pathlib import Path

import numpy as np

from . import attack, harness, models, plotting, synth
from .data import DataError, RandomStream, load_split, save_png, write_image_dir
from .frequency import band_pass
from .transforms import blockmix_probe, pixel_drop, safer_probe, selfmix_probe

USAGE_ERRORS = (DataError, models.CheckpointError, models.SpecError, FileNotFoundError, ValueError, KeyError)
RUNTIME_ERRORS = (ArithmeticError, harness.FeasibilityError)


class UsageError(Exception):
    pass


def number(text: str) -> float:
    """Float that also accepts fractions such as ``16/255``."""
    try:
        return float(Fraction(text.strip()))
    except (ValueError, ZeroDivisionError):
        raise argparse.ArgumentTypeError(f"not a number: {text!r}")


def name_list(text: str) -> list:
    items = [t.strip() for t in text.split(",") if t.strip()]
    if not items:
        raise argparse.ArgumentTypeError("empty list")
    return items


def int_list(text: str) -> list:
    try:
        return [int(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a comma separated list of integers: {text!r}")


def _common(p):
    p.add_argument("--config", metavar="PATH", help="INI file with [common] and per-command sections")
    p.add_argument("--seed", type=int, default=0, help="master seed (default 0)")
    p.add_argument("--data", metavar="DIR", default=os.environ.get("FEATHERSTORM_DATA", "data"),
                   help="dataset root holding train/ and test/ (default $FEATHERSTORM_DATA or ./data)")


def _models(p):
    p.add_argument("--ckpt-dir", metavar="DIR", default="checkpoints", help="checkpoint directory")


def _attack_opts(p, variant=True):
    _models(p)
    p.add_argument("--workers", type=int, default=1, metavar="K", help="worker processes (default 1)")
    p.add_argument("--surrogate", default="m0", help="model the attack is computed on")
    p.add_argument("--targets", type=name_list, default=["m1", "m2"], metavar="CSV",
                   help="comma separated target models; list the surrogate to get a white-box row")
    if variant:
        p.add_argument("--variant", type=name_list, default=["SAFER"], metavar="NAME",
                       help="attack variant, or a comma separated list: " + ", ".join(attack.VARIANTS))
    p.add_argument("--epsilon", type=number, default=16 / 255, metavar="F", help="L-inf budget (default 16/255)")
    p.add_argument("--steps", type=int, default=10, metavar="N", help="iterations (default 10)")
    p.add_argument("--alpha", type=number, default=None, metavar="F", help="step size (default epsilon/steps)")
    p.add_argument("--momentum", type=number, default=1.0, metavar="F", help="momentum decay (default 1.0)")
    p.add_argument("--ensemble-n", type=int, default=30, metavar="N", help="transformed copies per image")
    p.add_argument("--n-b", type=int, default=5, metavar="N", help="BlockMix grid size")
    p.add_argument("--keep-p", type=number, default=0.9, metavar="F", help="BlockMix keep probability")
    p.add_argument("--mix-mu", type=number, default=0.4, metavar="F", help="Self-Mix strength")
    p.add_argument("--beta-max", type=number, default=np.pi / 4, metavar="F",
                   help="rotation angles are drawn from [-beta-max, beta-max]")
    p.add_argument("--p-d", type=number, default=0.3, metavar="F", help="FIA pixel drop probability")
    p.add_argument("--tap", default=None, help="feature tap name (default: the surrogate's own)")
    p.add_argument("--n-images", type=int, default=200, metavar="N", help="evaluation images (default 200)")
    p.add_argument("--report", metavar="PATH", help="write the CSV here, plus a bar chart with suffix .png")
    p.add_argument("--dump-adv", metavar="DIR", help="write adversarial images as <id>_<variant>.png")
    p.add_argument("--timing", action="store_true", help="fill the seconds column (not byte-reproducible)")


def build_parser() -> tuple:
    parser = argparse.ArgumentParser(prog="featherstorm", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")
    subs = {}

    p = subs["prep"] = sub.add_parser("prep", help="render the synthetic shape dataset to an image tree")
    _common(p)
    p.add_argument("--train-per-class", type=int, default=300, metavar="N")
    p.add_argument("--test-per-class", type=int, default=50, metavar="N")
    p.add_argument("--size", type=int, default=32, metavar="PX")
    p.add_argument("--classes", type=int, default=10, metavar="N", help=f"at most {len(synth.CLASS_NAMES)}")

    p = subs["train"] = sub.add_parser("train", help="train every zoo model and write checkpoints")
    _common(p)
    _models(p)
    p.add_argument("--models", type=name_list, default=None, metavar="CSV", help="subset of the zoo")
    p.add_argument("--epochs", type=int, default=8, metavar="N")
    p.add_argument("--lr", type=number, default=0.02, metavar="F")
    p.add_argument("--no-augment", action="store_true", help="disable shift/flip augmentation")

    p = subs["attack"] = sub.add_parser("attack", help="transfer matrix for one or more variants")
    _common(p)
    _attack_opts(p)

    p = subs["ablate"] = sub.add_parser("ablate", help="MIM_CE, BlockMix only, Self-Mix only and full SAFER")
    _common(p)
    _attack_opts(p, variant=False)

    p = subs["freqstudy"] = sub.add_parser("freqstudy", help="high-frequency corner noise per tau plus MIM_CE")
    _common(p)
    _attack_opts(p, variant=False)
    p.add_argument("--taus", type=int_list, default=[8, 16, 24], metavar="CSV", help="corner sizes")
    p.add_argument("--hf-sigma", type=number, default=None, metavar="F",
                   help="noise std in DCT units (default: 0.1 x mean |coeff| of the corner)")

    p = subs["dump"] = sub.add_parser("dump", help="write probe and frequency band images with panel figures")
    _common(p)
    p.add_argument("--out", metavar="DIR", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--n-images", type=int, default=4, metavar="N")
    p.add_argument("--taus", type=int_list, default=[8], metavar="CSV", help="band split sizes")
    p.add_argument("--n-b", type=int, default=5, metavar="N")
    p.add_argument("--keep-p", type=number, default=0.9, metavar="F")
    p.add_argument("--mix-mu", type=number, default=0.4, metavar="F")
    p.add_argument("--beta-max", type=number, default=np.pi / 4, metavar="F")
    p.add_argument("--p-d", type=number, default=0.3, metavar="F")
    p.add_argument("--no-figures", action="store_true", help="skip the matplotlib panels")
    return parser, subs


# -- config file layering -------------------------------------------------------

def _convert(action, raw: str, where: str):
    if isinstance(action, argparse._StoreTrueAction):
        v = raw.strip().lower()
        if v in ("1", "true", "yes", "on"):
            return True
        if v in ("0", "false", "no", "off"):
            return False
        raise UsageError(f"{where}: expected a boolean, got {raw!r}")
    try:
        return action.type(raw) if action.type else raw
    except argparse.ArgumentTypeError as exc:
        raise UsageError(f"{where}: {exc}")
    except ValueError:
        raise UsageError(f"{where}: cannot parse {raw!r}")


def config_defaults(path, command: str, subparser) -> dict:
    cp = configparser.ConfigParser(interpolation=None, default_section="__none__")
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"config file not found: {p}")
    try:
        cp.read(p)
    except configparser.Error as exc:
        raise UsageError(f"{p}: {exc}")
    actions = {a.dest: a for a in subparser._actions if a.dest not in ("help", "config")}
    out = {}
    for section in ("common", command):
        if not cp.has_section(section):
            continue
        for key, raw in cp.items(section):
            dest = key.replace("-", "_")
            if dest not in actions:
                if section == "common":
                    continue
                raise UsageError(f"{p} [{section}]: unknown key {key!r}")
            out[dest] = _convert(actions[dest], raw, f"{p} [{section}] {key}")
    unknown = set(cp.sections()) - {"common"} - set(build_parser()[1])
    if unknown:
        raise UsageError(f"{p}: unknown sections {sorted(unknown)}")
    return out


def parse(argv) -> argparse.Namespace:
    parser, subs = build_parser()
    args = parser.parse_args(argv)
    if args.config:
        sp = subs[args.command]
        sp.set_defaults(**config_defaults(args.config, args.command, sp))
        args = parser.parse_args(argv)
    return args


# -- helpers -----------------------------------------------------------------------

def _data_split(root, split):
    path = Path(root)
    if not path.exists():
        raise UsageError(f"dataset path does not exist: {path}")
    return load_split(path, split)


def _load_model(ckpt_dir, name):
    path = Path(ckpt_dir) / f"{name}.fstm"
    if not path.is_file():
        raise UsageError(f"no checkpoint for model {name!r} at {path}")
    return models.load(path)


def base_config(args, variant="SAFER", **extra) -> attack.AttackConfig:
    alpha = args.alpha if args.alpha is not None else args.epsilon / args.steps
    return attack.AttackConfig(epsilon=args.epsilon, steps=args.steps, alpha=alpha, momentum_decay=args.momentum,
                               ensemble_n=args.ensemble_n, n_b=args.n_b, keep_p=args.keep_p, mix_mu=args.mix_mu,
                               beta_range=(-args.beta_max, args.beta_max), p_d=args.p_d, tap=args.tap,
                               variant=variant, **extra)


def _emit(report, args) -> None:
    text = report.to_csv(timing=args.timing)
    sys.stdout.write(text)
    if args.report:
        report.write(args.report, timing=args.timing)
        plotting.report_figure(report, Path(args.report).with_suffix(".png"))


def _experiment(args):
    if args.workers < 1:
        raise UsageError("--workers must be at least 1")
    if args.n_images < 1:
        raise UsageError("--n-images must be positive")
    data = _data_split(args.data, "test")
    surrogate = _load_model(args.ckpt_dir, args.surrogate)
    targets = [_load_model(args.ckpt_dir, t) for t in args.targets]
    kw = {"n_images": args.n_images, "workers": args.workers, "dump_dir": args.dump_adv}
    return data, surrogate, targets, kw


# -- commands ------------------------------------------------------------------------

def cmd_prep(args) -> int:
    if not 2 <= args.classes <= len(synth.CLASS_NAMES):
        raise UsageError(f"--classes must be between 2 and {len(synth.CLASS_NAMES)}")
    train, test = synth.make_splits(args.train_per_class, args.test_per_class, args.seed, size=args.size,
                                    num_classes=args.classes)
    root = Path(args.data)
    write_image_dir(train, root / "train")
    write_image_dir(test, root / "test")
    print(f"wrote {len(train)} train and {len(test)} test images to {root}")
    return 0


def cmd_train(args) -> int:
    train = _data_split(args.data, "train")
    test = _data_split(args.data, "test")
    zoo = models.zoo(train.shape, train.num_classes)
    names = args.models or sorted(zoo)
    for name in names:
        if name not in zoo:
            raise UsageError(f"unknown model {name!r}; zoo has {', '.join(sorted(zoo))}")
    out = Path(args.ckpt_dir)
    out.mkdir(parents=True, exist_ok=True)
    for name in names:
        ck = models.train(models.build(zoo[name], args.seed), train, args.epochs, args.lr, args.seed, test=test,
                          augment=not args.no_augment)
        models.save(ck, out / f"{name}.fstm")
        print(f"{name} train_accuracy={ck.train_meta['train_accuracy']:.4f} "
              f"test_accuracy={ck.train_meta['test_accuracy']:.4f}")
    return 0


def cmd_attack(args) -> int:
    for v in args.variant:
        if v not in attack.VARIANTS:
            raise UsageError(f"unknown variant {v!r}; choose from {', '.join(attack.VARIANTS)}")
    data, surrogate, targets, kw = _experiment(args)
    cfgs = [base_config(args, v) for v in dict.fromkeys(args.variant)]
    _emit(harness.transfer_matrix(surrogate, targets, data, cfgs, args.seed, **kw), args)
    return 0


def cmd_ablate(args) -> int:
    data, surrogate, targets, kw = _experiment(args)
    _emit(harness.ablation_study(surrogate, targets, data, base_config(args), args.seed, **kw), args)
    return 0


def cmd_freqstudy(args) -> int:
    data, surrogate, targets, kw = _experiment(args)
    cfg = base_config(args, "HF_NOISE", hf_sigma=args.hf_sigma)
    _emit(harness.frequency_study(surrogate, targets, data, cfg, args.taus, args.seed, **kw), args)
    return 0


def cmd_dump(args) -> int:
    data = _data_split(args.data, args.split)
    cfg = attack.AttackConfig(n_b=args.n_b, keep_p=args.keep_p, mix_mu=args.mix_mu,
                              beta_range=(-args.beta_max, args.beta_max), p_d=args.p_d)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    key = zlib.crc32(b"dump")
    for img in data.images[:args.n_images]:
        rng = RandomStream(args.seed, key, img.id)
        panels = [("clean", img.pixels),
                  ("blockmix", blockmix_probe(img, data, cfg, rng.child(1))),
                  ("selfmix", selfmix_probe(img, data, cfg, rng.child(2))),
                  ("safer", safer_probe(img, data, cfg, rng.child(3))),
                  ("fia", pixel_drop(img, cfg.p_d, rng.child(4)).pixels)]
        for tau in args.taus:
            panels.append((f"low_tau{tau:02d}", band_pass(img, tau, "low")))
            panels.append((f"high_tau{tau:02d}", band_pass(img, tau, "high")))
        for caption, px in panels:
            # the high band is centred on grey level 128 so negative detail survives the PNG
            shown = px + 128 / 255 if caption.startswith("high") else px
            save_png(out / f"{img.id}_{caption}.png", shown)
        if not args.no_figures:
            plotting.image_panel(panels, out / f"{img.id}_panel.png", f"image {img.id}, label {img.label}")
    print(f"wrote {min(args.n_images, len(data))} image sets to {out}")
    return 0


COMMANDS = {"prep": cmd_prep, "train": cmd_train, "attack": cmd_attack, "ablate": cmd_ablate,
            "freqstudy": cmd_freqstudy, "dump": cmd_dump}


def main(argv=None) -> int:
    try:
        args = parse(argv)
    except UsageError as exc:
        print(f"featherstorm: error: {exc}", file=sys.stderr)
        return 2
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"featherstorm: error: {exc}", file=sys.stderr)
        return 2
    except RUNTIME_ERRORS as exc:
        print(f"featherstorm: numeric failure: {exc}", file=sys.stderr)
        return 3
    except USAGE_ERRORS as exc:
        print(f"featherstorm: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
