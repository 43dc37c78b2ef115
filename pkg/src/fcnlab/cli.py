"""Command-line entry point: ``fcnlab <command> [options]``.

Commands: generate, train, eval, infer, bound, probe, equiv.  Options may
also come from ``--config FILE`` holding ``key = value`` lines (keys are
option names with dashes or underscores); command-line flags win.  All
randomness derives from ``--seed``: generation uses ``[seed, split, index]``
per sample and training uses the counters documented in
:func:`fcnlab.training.train`.
"""

import argparse
import math
import sys
from pathlib import Path

import numpy as np

from .errors import FCNError

EXIT_USAGE = 2


class CLIError(Exception):
    def __init__(self, message, status=1):
        super().__init__(message)
        self.status = status


def read_config(path):
    """``key = value`` lines; ``#`` comments; returns a dict of strings."""
    path = Path(path)
    if not path.exists():
        raise CLIError(f"config file not found: {path}", EXIT_USAGE)
    out = {}
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise CLIError(f"{path}:{lineno}: expected 'key = value'", EXIT_USAGE)
        key, value = (s.strip() for s in line.split("=", 1))
        out[key.replace("-", "_")] = value
    return out


def resolve_net(name):
    """A net description path, falling back to the bundled nets by file name."""
    from .skipnet import bundled_net

    path = Path(name)
    if path.exists():
        return path
    if path.parent == Path(".") and path.suffix in ("", ".net"):
        try:
            return bundled_net(path.stem)
        except FCNError:
            pass
    raise CLIError(f"net description not found: {name}", EXIT_USAGE)


def _existing(path, what):
    path = Path(path)
    if not path.exists():
        raise CLIError(f"{what} not found: {path}", EXIT_USAGE)
    return path


# -- commands ----------------------------------------------------------------------


def cmd_generate(args):
    from .data import SPLITS, ShapesConfig, background_fraction, generate, save_dataset

    # shape radii scale with the canvas so the background fraction stays put
    lo, hi = ShapesConfig.radius
    cfg = ShapesConfig(size=args.size, seed=args.seed, color_jitter=args.color_jitter,
                       color_cue=args.color_cue, radius=(lo * args.size / 64, hi * args.size / 64))
    out = Path(args.out)
    counts = {"train": args.train, "val": args.val, "test": args.test}
    for name, (split_id, _) in SPLITS.items():
        samples = generate(cfg, counts[name], split_id)
        save_dataset(out / name, samples)
        frac = background_fraction(samples) if samples else float("nan")
        print(f"{name:5s} {len(samples):5d} images  background {frac:.4f}")


def _load_split(root, split):
    from .data import load_dataset

    root = _existing(root, "dataset")
    sub = root / split
    return load_dataset(sub if (sub / "manifest.txt").exists() else root)


def _loss_cfg(args):
    from .losses import LossConfig

    kind = "sigmoid_ce" if args.loss == "sigmoid" else "softmax_sum"
    return LossConfig(kind=kind, sample_keep_p=args.keep_p, null_background=args.null_background)


def _build(desc, loss_cfg, seed=0):
    from .skipnet import build_from_description

    n_cl = desc.n_classes or 5
    return build_from_description(desc, seed=seed, n_cl=n_cl - 1 if loss_cfg.null_background else n_cl)


def _load_model(args, loss_cfg):
    from .graph import read_checkpoint
    from .skipnet import load_net

    desc = load_net(resolve_net(args.net))
    g = _build(desc, loss_cfg)
    values = read_checkpoint(_existing(args.checkpoint, "checkpoint"))
    for name, param in g.params.items():
        if name not in values or values[name].shape != param.value.shape:
            raise CLIError(f"checkpoint does not match net {args.net}: parameter {name}")
        param.value = values[name].copy()
    mean = values.get("meta.input_mean")
    scale = float(values["meta.input_scale"][0]) if "meta.input_scale" in values else 1.0
    return g, mean, scale


def cmd_train(args):
    from .data import dataset_mean
    from .experiments import DEFAULT_LR, INPUT_SCALE
    from .graph import write_checkpoint
    from .metrics import compute_metrics
    from .skipnet import load_net, upgrade
    from .training import OptimConfig, REGIMES, evaluate, train

    desc = load_net(resolve_net(args.net))
    train_set = _load_split(args.data, "train")
    root = Path(args.data)
    val_set = _load_split(root, "val") if (root / "val" / "manifest.txt").exists() else None
    loss_cfg = _loss_cfg(args)
    lr = args.lr if args.lr is not None else DEFAULT_LR[args.regime]
    optim = OptimConfig.regime(args.regime, lr, weight_decay=args.weight_decay)
    k = REGIMES[args.regime][0]
    updates = args.updates if args.updates is not None else max(1, 4000 // k)
    mean = dataset_mean(train_set)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    skips = list(desc.skips)
    if args.staged and skips:
        # single stream first, then one upgrade per skip; updates split 2:1:1...
        weights = [2] + [1] * len(skips)
        plan = [updates * w // sum(weights) for w in weights]
        plan[0] += updates - sum(plan)
        desc.skips = []
    else:
        plan = [updates]
    g = _build(desc, loss_cfg, args.seed)
    text = ""
    for stage, n in enumerate(plan):
        if stage > 0:
            g = upgrade(g, skips[stage - 1], args.lr_drop)
        log = train(g, train_set, loss_cfg, optim, n, val_samples=val_set, snapshot_every=args.snapshot_every,
                    seed=args.seed * 1000 + stage, mean=mean, mask_mode=args.mask, mirror=args.mirror,
                    jitter=args.jitter, input_scale=INPUT_SCALE)
        text += log.text() if stage == 0 else "".join(s.line() + "\n" for s in log.snapshots)
    (out / "train.log").write_text(text)
    params = {k_: p.value for k_, p in g.params.items()}
    params["meta.input_mean"] = mean
    params["meta.input_scale"] = np.array([INPUT_SCALE])
    write_checkpoint(out / "checkpoint.bin", params)
    eval_set = val_set if val_set is not None else train_set
    m = compute_metrics(evaluate(g, eval_set, loss_cfg, mean, args.mask, input_scale=INPUT_SCALE))
    table = _metrics_table(m, updates)
    (out / "metrics.txt").write_text(table)
    sys.stdout.write(table)


def _metrics_table(m, iteration=0, loss=float("nan")):
    from .training import LOG_HEADER, Snapshot

    snap = Snapshot(iteration, loss, m.pixel_acc, m.mean_acc, m.mean_iu, m.fw_iu, 0.0)
    return LOG_HEADER + "\n" + snap.line() + "\n"


def cmd_eval(args):
    from .losses import compute_loss, predict
    from .metrics import ConfusionMatrix, accumulate, compute_metrics
    from .training import n_classes_of, prepare

    loss_cfg = _loss_cfg(args)
    g, mean, scale = _load_model(args, loss_cfg)
    samples = _load_split(args.data, args.split)
    if not samples:
        raise CLIError("dataset is empty")
    cm = ConfusionMatrix(n_classes_of(g, loss_cfg))
    total = 0.0
    for start in range(0, len(samples), 50):
        x, y = prepare(samples[start:start + 50], mean, args.mask, scale)
        scores = g.forward(x, keep=False)
        y = y[:, :scores.shape[2], :scores.shape[3]]
        total += compute_loss(scores, y, loss_cfg)[0]
        accumulate(cm, predict(scores, loss_cfg.null_background), y)
    m = compute_metrics(cm, exclude_background=args.exclude_background)
    sys.stdout.write(_metrics_table(m, 0, total / len(samples)))


def cmd_infer(args):
    from .data import SegSample
    from .imageio import load_image, save_image
    from .losses import predict
    from .training import prepare

    loss_cfg = _loss_cfg(args)
    g, mean, scale = _load_model(args, loss_cfg)
    pixels = load_image(_existing(args.image, "image"))
    image = (pixels[None] if pixels.ndim == 2 else pixels.transpose(2, 0, 1)) / 255.0
    if image.shape[0] != g.input_channels():
        raise CLIError(f"image has {image.shape[0]} channels, net expects {g.input_channels()}")
    h, w = image.shape[1:]
    # pad to a multiple of the net stride so the output covers the whole image
    stride = int(g.field("score_fr").eff_stride)
    ph, pw = -h % stride, -w % stride
    sample = SegSample(image, np.zeros((h, w), dtype=np.uint8))
    x, _ = prepare([sample], mean, "none", scale)
    x = np.pad(x, ((0, 0), (0, 0), (0, ph), (0, pw)))
    scores = g.forward(x, keep=False)[:, :, :h, :w]
    labels = predict(scores, loss_cfg.null_background)[0]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_image(out / "label.png", labels.astype(np.uint8))
    if loss_cfg.null_background:
        scores = np.concatenate([np.zeros_like(scores[:, :1]), scores], axis=1)
    prob = np.exp(scores[0] - scores[0].max(axis=0))
    prob /= prob.sum(axis=0)
    for c in range(prob.shape[0]):
        save_image(out / f"score_{c}.pgm", np.round(prob[c] * 255).astype(np.uint8))
    print(f"wrote {out / 'label.png'} and {prob.shape[0]} score maps")


def cmd_bound(args):
    from .metrics import iu_upper_bound

    samples = _load_split(args.data, args.split)
    truths = [s.label for s in samples]
    n_cl = args.classes or int(max(int(t[t != 255].max(initial=0)) for t in truths) + 1)
    print(f"{'factor':>6} {'mean_iu':>8}")
    for f in args.factors:
        print(f"{f:6d} {iu_upper_bound(truths, f, n_cl):8.4f}")


def cmd_probe(args):
    from .skipnet import load_net, probe_table

    desc = load_net(resolve_net(args.net))
    print(f"{'layer':12s} {'rf':>8} {'stride':>8} {'offset':>10}")
    for name, f in probe_table(desc):
        print(f"{name:12s} {_num(f.rf_size):>8} {_num(f.eff_stride):>8} {_num(f.offset):>10}")
    _, final = probe_table(desc)[-1]
    print(f"output: rf {_num(final.rf_size)} stride {_num(final.eff_stride)} offset {_num(final.offset)}")


def _num(q):
    return str(q.numerator) if q.denominator == 1 else f"{float(q):g}"


def cmd_equiv(args):
    from .training import effective_coefficients, equivalent_momentum

    p2 = equivalent_momentum(args.p, args.k, args.k_prime)
    print(f"p' = {p2:.4f}  (exact {p2:.10f})")
    horizon = args.horizon or min(4 * math.lcm(args.k, args.k_prime), 60)
    a = effective_coefficients(args.p, args.k, horizon)
    b = effective_coefficients(p2, args.k_prime, horizon)
    step = math.lcm(args.k, args.k_prime)
    print(f"{'j':>4} {'p,k':>12} {'p_prime,k_prime':>16} {'match':>6}")
    for j in range(horizon):
        mark = "=" if j % step == 0 else ""
        print(f"{j:4d} {a[j]:12.8f} {b[j]:16.8f} {mark:>6}")


# -- parser -------------------------------------------------------------------------


def _add_common_model(p):
    p.add_argument("--loss", choices=("softmax", "sigmoid"), default="softmax")
    p.add_argument("--null-background", action="store_true")
    p.add_argument("--keep-p", type=float, default=1.0)
    p.add_argument("--mask", choices=("none", "fg_only", "bg_only", "shape_only"), default="none")


def make_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--threads", type=int, default=None, help="cap on BLAS threads")
    common.add_argument("--config", default=None, help="key = value option file")
    parser = argparse.ArgumentParser(prog="fcnlab", description="Desk-scale fully convolutional nets.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", parents=[common], help="write the synthetic shapes dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--train", type=int, default=800)
    p.add_argument("--val", type=int, default=100)
    p.add_argument("--test", type=int, default=100)
    p.add_argument("--color-jitter", type=float, default=0.3)
    p.add_argument("--color-cue", type=float, default=1.0)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", parents=[common], help="train a net on a dataset directory")
    p.add_argument("--net", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", default="run")
    p.add_argument("--regime", choices=("heavy", "online", "accum"), default="heavy")
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--weight-decay", type=float, default=5e-4)
    p.add_argument("--updates", type=int, default=None, help="default: 4000 images worth")
    p.add_argument("--staged", action="store_true", help="add the skips one stage at a time")
    p.add_argument("--lr-drop", type=float, default=1.0)
    p.add_argument("--snapshot-every", type=int, default=500)
    p.add_argument("--mirror", action="store_true")
    p.add_argument("--jitter", type=int, default=0)
    _add_common_model(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", parents=[common], help="metrics table for a checkpoint")
    p.add_argument("--net", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--exclude-background", action="store_true")
    _add_common_model(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("infer", parents=[common], help="label map and score maps for one image")
    p.add_argument("--net", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--out", default="infer")
    _add_common_model(p)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("bound", parents=[common], help="mean IU upper bound versus downsampling factor")
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--classes", type=int, default=None)
    p.add_argument("--factors", type=lambda s: [int(v) for v in s.split(",")], default=[1, 2, 4, 8, 16])
    p.set_defaults(func=cmd_bound)

    p = sub.add_parser("probe", parents=[common], help="receptive field, stride and offset per tap")
    p.add_argument("net")
    p.set_defaults(func=cmd_probe)

    p = sub.add_parser("equiv", parents=[common], help="momentum for an equivalent batch size")
    p.add_argument("p", type=float)
    p.add_argument("k", type=int)
    p.add_argument("k_prime", type=int)
    p.add_argument("--horizon", type=int, default=None)
    p.set_defaults(func=cmd_equiv)
    return parser


def _apply_config(parser, argv):
    """Re-parse with values from --config as defaults for the chosen command."""
    args = parser.parse_args(argv)
    if not args.config:
        return args
    values = read_config(args.config)
    sub = parser._subparsers._group_actions[0].choices[args.command]
    known = {a.dest: a for a in sub._actions}
    defaults = {}
    for key, raw in values.items():
        if key not in known or key in ("func", "command", "config", "help"):
            raise CLIError(f"{args.config}: unknown option {key!r} for {args.command}", EXIT_USAGE)
        action = known[key]
        if action.const is True and action.nargs == 0:
            defaults[key] = raw.lower() in ("1", "true", "yes", "on")
        else:
            defaults[key] = action.type(raw) if action.type else raw
    sub.set_defaults(**defaults)
    return parser.parse_args(argv)


def main(argv=None):
    parser = make_parser()
    try:
        args = _apply_config(parser, argv)
        if args.threads is not None:
            from threadpoolctl import threadpool_limits

            threadpool_limits(args.threads)
        args.func(args)
    except CLIError as exc:
        print(f"fcnlab: error: {exc}", file=sys.stderr)
        return exc.status
    except FileNotFoundError as exc:
        print(f"fcnlab: error: file not found: {exc.filename}", file=sys.stderr)
        return EXIT_USAGE
    except (FCNError, ValueError, OSError) as exc:
        print(f"fcnlab: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
