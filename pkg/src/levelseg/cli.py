"""Command-line interface: ``levelseg <subcommand> [flags]``.

Exit codes: 0 success, 2 bad flags, 3 unreadable/unwritable or malformed
files, 4 grids whose shapes disagree or probabilities outside [0, 1].
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from . import autodiff as ad
from . import fields, maps, metrics, synth, trainer
from .acm import AcmParams, evolve, heaviside, mask_from_phi

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_IO = 3
EXIT_DATA = 4

OVERLAY_ALPHA = 0.4
RED = np.array([1.0, 0.0, 0.0])

_ACM_DEFAULTS = AcmParams()


class CliError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


def _read(path, reader=fields.read_grid) -> np.ndarray:
    try:
        return reader(path)
    except (OSError, fields.GridError) as e:
        raise CliError(f"cannot read {path}: {e}", EXIT_IO) from e


def _write(path, writer, *args) -> None:
    try:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        writer(path, *args)
    except OSError as e:
        raise CliError(f"cannot write {path}: {e}", EXIT_IO) from e


def _same_shape(**grids) -> None:
    shapes = {name: np.shape(g) for name, g in grids.items()}
    if len(set(shapes.values())) > 1:
        desc = ", ".join(f"{k} {v[0]}x{v[1]}" for k, v in shapes.items())
        raise CliError(f"dimension mismatch: {desc}", EXIT_DATA)


def _evolve(image, phi0, lam1, lam2, params, every=0):
    try:
        return evolve(image, phi0, lam1, lam2, params, history_every=every)
    except fields.GridError as e:
        raise CliError(f"{e} (grids must be at least 3x3)", EXIT_DATA) from e


# ---------------------------------------------------------------------------
# flags


class _HelpFormatter(argparse.ArgumentDefaultsHelpFormatter):
    """Show defaults, except for flags that have none."""

    def _get_help_string(self, action):
        if action.default is None or action.default is False:
            return action.help
        return super()._get_help_string(action)


def _add_acm_flags(p: argparse.ArgumentParser, iters: int = _ACM_DEFAULTS.iters) -> None:
    d = _ACM_DEFAULTS
    g = p.add_argument_group("evolution")
    g.add_argument("--mu", type=float, default=d.mu, help="curvature weight")
    g.add_argument("--eps", type=float, default=d.eps, help="Heaviside/Dirac smoothing width")
    g.add_argument("--dt", type=float, default=d.dt, help="time step")
    g.add_argument("--iters", type=int, default=iters, help="number of evolution steps")
    g.add_argument("--window", type=int, default=d.window, help="half-width f of the (2f+1)^2 window")
    g.add_argument("--mode", choices=("localized", "global"), default=d.region_mode.value,
                   help="region statistics")


def _acm_params(args, **extra) -> AcmParams:
    try:
        return AcmParams(mu=args.mu, eps=args.eps, dt=args.dt, iters=args.iters, window=args.window,
                         region_mode=args.mode, **extra)
    except ValueError as e:
        raise CliError(str(e), EXIT_USAGE) from e


def _parser() -> argparse.ArgumentParser:
    fmt = _HelpFormatter
    p = argparse.ArgumentParser(prog="levelseg", description=__doc__.splitlines()[0], formatter_class=fmt)
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, metavar="COMMAND")

    s = sub.add_parser("evolve", formatter_class=fmt, help="evolve a level set on an image")
    s.add_argument("--image", required=True, help="input image (PGM or FGRD)")
    s.add_argument("--phi0", required=True, help="initial level set (FGRD, positive inside)")
    l1 = s.add_mutually_exclusive_group()
    l1.add_argument("--lambda1", help="per-pixel inside weight (FGRD)")
    l1.add_argument("--l1", type=float, default=1.0, help="constant inside weight")
    l2 = s.add_mutually_exclusive_group()
    l2.add_argument("--lambda2", help="per-pixel outside weight (FGRD)")
    l2.add_argument("--l2", type=float, default=1.0, help="constant outside weight")
    s.add_argument("--out", required=True, help="output mask (PGM)")
    s.add_argument("--history-dir", help="directory for phi snapshots (FGRD)")
    s.add_argument("--dump-every", type=int, default=10, help="snapshot interval in steps")
    _add_acm_flags(s)
    s.set_defaults(func=cmd_evolve)

    s = sub.add_parser("segment-dals", formatter_class=fmt,
                       help="segment from a probability map: SDM init plus probability-derived weights")
    s.add_argument("--prob", required=True, help="foreground probability map (FGRD, values in [0, 1])")
    s.add_argument("--image", required=True, help="input image (PGM or FGRD)")
    s.add_argument("--out", required=True, help="output mask (PGM)")
    s.add_argument("--prob-out", help="write the smoothed Heaviside of the final level set (FGRD)")
    s.add_argument("--dump-lambdas", metavar="DIR", help="write lambda1.fgrd and lambda2.fgrd to DIR")
    _add_acm_flags(s)
    s.set_defaults(func=cmd_segment_dals)

    s = sub.add_parser("train", formatter_class=fmt, help="train the parameter-map predictor")
    tc = trainer.TrainConfig()
    s.add_argument("--data", required=True, help="directory of scene_XXXX.pgm / scene_XXXX_gt.pgm pairs")
    s.add_argument("--epochs", type=int, default=tc.epochs, help="training epochs")
    s.add_argument("--lr", type=float, default=tc.alpha0, help="initial learning rate")
    s.add_argument("--out", required=True, help="output model (MODL)")
    s.add_argument("--acm-iters", type=int, default=tc.acm.iters, help="evolution steps during training")
    s.add_argument("--lambda-mode", choices=("fields", "constants"), default=tc.acm.lambda_mode.value,
                   help="per-pixel predicted weights or one learned pair")
    s.add_argument("--batch-size", type=int, default=tc.batch_size, help="scenes per step")
    s.add_argument("--val-fraction", type=float, default=0.2, help="trailing fraction held out")
    s.add_argument("--seed", type=int, default=tc.seed, help="initialisation and shuffling seed")
    s.add_argument("--history", help="per-epoch CSV (default: OUT with a .history.csv suffix)")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", formatter_class=fmt, help="score predicted masks against ground truth")
    s.add_argument("--pred", required=True, help="directory of predicted masks (PGM)")
    s.add_argument("--gt", required=True, help="directory of ground-truth masks, same names or NAME_gt.pgm")
    s.add_argument("--csv", required=True, help="output metrics CSV")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("gradcheck", formatter_class=fmt,
                       help="finite-difference check of the training gradient")
    s.add_argument("--size", type=int, default=16, help="scene side length")
    s.add_argument("--acm-iters", type=int, default=5, help="evolution steps")
    s.add_argument("--h", type=float, default=1e-3, help="central-difference step")
    s.add_argument("--seed", type=int, default=0, help="scene and initialisation seed")
    s.add_argument("--samples", type=int, default=64, help="parameter coordinates checked")
    s.add_argument("--tol", type=float, default=1e-3, help="pass threshold on the relative error")
    s.set_defaults(func=cmd_gradcheck)

    s = sub.add_parser("synth", formatter_class=fmt, help="write synthetic scene pairs")
    sd = synth.SceneSpec()
    s.add_argument("--n", type=int, required=True, help="number of scenes")
    s.add_argument("--size", type=int, default=sd.size, help="scene side length")
    s.add_argument("--seed", type=int, default=sd.seed, help="seed of scene 0 (scene i uses seed+i)")
    s.add_argument("--out", required=True, help="output directory")
    s.add_argument("--shapes", nargs="+", choices=synth.SHAPE_KINDS, default=list(sd.shape_kinds),
                   help="shape kinds to draw from")
    s.add_argument("--instances", type=int, nargs=2, default=list(sd.n_instances), metavar=("MIN", "MAX"),
                   help="instance count range")
    s.add_argument("--noise", type=float, default=sd.noise_sigma, help="Gaussian noise sigma")
    s.add_argument("--shading", type=float, default=sd.illumination_gradient,
                   help="illumination ramp amplitude")
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("render", formatter_class=fmt, help="overlay a mask on an image as a P6 PPM")
    s.add_argument("--image", required=True, help="input image (PGM or FGRD)")
    s.add_argument("--mask", required=True, help="mask (PGM or FGRD)")
    s.add_argument("--out", required=True, help="output colour image (P6 PPM)")
    s.add_argument("--contour", action="store_true", help="draw the 1-px mask boundary instead of a fill")
    s.set_defaults(func=cmd_render)
    return p


# ---------------------------------------------------------------------------
# subcommands


def _weight(path, scalar, image, name):
    if path is None:
        return scalar
    g = _read(path)
    _same_shape(image=image, **{name: g})
    return g


def cmd_evolve(args) -> int:
    if args.dump_every < 1:
        raise CliError("--dump-every must be >= 1", EXIT_USAGE)
    params = _acm_params(args, lambda1=args.l1, lambda2=args.l2)
    image = _read(args.image)
    phi0 = _read(args.phi0, fields.read_fgrd)
    _same_shape(image=image, phi0=phi0)
    lam1 = _weight(args.lambda1, args.l1, image, "lambda1")
    lam2 = _weight(args.lambda2, args.l2, image, "lambda2")
    every = args.dump_every if args.history_dir else 0
    phi, history = _evolve(image, phi0, lam1, lam2, params, every)
    mask = mask_from_phi(phi)
    _write(args.out, fields.write_pgm, mask)
    if args.history_dir:
        for i, snap in enumerate(history):
            _write(Path(args.history_dir) / f"phi_{i * every:04d}.fgrd", fields.write_fgrd, snap)
    print(f"{args.out}: {int(mask.sum())} foreground pixels after {params.iters} steps")
    return EXIT_OK


def cmd_segment_dals(args) -> int:
    params = _acm_params(args)
    prob = _read(args.prob, fields.read_fgrd)
    image = _read(args.image)
    _same_shape(image=image, prob=prob)
    if not (np.all(np.isfinite(prob)) and prob.min() >= 0.0 and prob.max() <= 1.0):
        raise CliError("probabilities must lie in [0, 1]", EXIT_DATA)
    phi0 = maps.prob_to_sdm(prob)
    lam1, lam2 = maps.lambda_maps(prob)
    if args.dump_lambdas:
        _write(Path(args.dump_lambdas) / "lambda1.fgrd", fields.write_fgrd, lam1)
        _write(Path(args.dump_lambdas) / "lambda2.fgrd", fields.write_fgrd, lam2)
    phi, _ = _evolve(image, phi0, lam1, lam2, params)
    mask = mask_from_phi(phi)
    _write(args.out, fields.write_pgm, mask)
    if args.prob_out:
        _write(args.prob_out, fields.write_fgrd, heaviside(phi, params.eps))
    if not mask.any():
        print("warning: empty mask (no pixel of the probability map exceeds 0.5 "
              "and the evolution grew no interior)", file=sys.stderr)
    print(f"{args.out}: {int(mask.sum())} foreground pixels after {params.iters} steps")
    return EXIT_OK


def cmd_train(args) -> int:
    base = trainer.TrainConfig()
    try:
        config = replace(base, epochs=args.epochs, alpha0=args.lr, batch_size=args.batch_size, seed=args.seed,
                         acm=replace(base.acm, iters=args.acm_iters, lambda_mode=args.lambda_mode))
    except ValueError as e:
        raise CliError(str(e), EXIT_USAGE) from e
    if not 0.0 <= args.val_fraction < 1.0:
        raise CliError("--val-fraction must lie in [0, 1)", EXIT_USAGE)
    try:
        images, gts, _ = trainer.load_pairs(args.data)
    except (OSError, ValueError) as e:
        raise CliError(f"cannot load {args.data}: {e}", EXIT_IO) from e
    if len({im.shape for im in images}) > 1:
        raise CliError("scenes differ in size", EXIT_DATA)
    n_val = int(round(len(images) * args.val_fraction))
    split = len(images) - n_val
    if split < 1:
        raise CliError("validation split leaves no training data", EXIT_USAGE)
    val = (images[split:], gts[split:]) if n_val else None
    params, history = trainer.fit_arrays(images[:split], gts[:split], config, val)
    _write(args.out, trainer.save_model, params)
    hist_path = Path(args.history) if args.history else Path(args.out).with_suffix(".history.csv")
    _write(hist_path, _write_history, history)
    if history:
        last = history[-1]
        dice = f", val dice {last['val_dice']:.4f}" if "val_dice" in last else ""
        print(f"{args.out}: {len(history)} epochs, train loss {last['train_loss']:.4f}{dice}")
    else:
        print(f"{args.out}: untrained initial parameters")
    return EXIT_OK


def _write_history(path, history) -> None:
    cols = ["epoch", "lr", "train_loss", "val_dice"]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(cols)
        for row in history:
            w.writerow([row["epoch"]] + [f"{row[c]:.6f}" if c in row else "" for c in cols[1:]])


def _gt_path(gt_dir: Path, name: str) -> Path:
    p = gt_dir / name
    if p.exists():
        return p
    return gt_dir / (Path(name).stem + "_gt.pgm")


def cmd_eval(args) -> int:
    pred_dir, gt_dir = Path(args.pred), Path(args.gt)
    if not pred_dir.is_dir() or not gt_dir.is_dir():
        raise CliError("--pred and --gt must be directories", EXIT_IO)
    names = sorted(p.name for p in pred_dir.glob("*.pgm") if not p.stem.endswith("_gt"))
    if not names:
        raise CliError(f"no PGM masks in {pred_dir}", EXIT_IO)
    rows = []
    for name in names:
        pred = _read(pred_dir / name, fields.read_mask)
        gt = _read(_gt_path(gt_dir, name), fields.read_mask)
        _same_shape(pred=pred, gt=gt)
        rows.append((name, metrics.evaluate(gt, pred)))
    text = metrics.format_csv(rows)
    _write(args.csv, lambda p, t: Path(p).write_text(t), text)
    print(text.splitlines()[-1])
    return EXIT_OK


def gradcheck_error(size: int = 16, acm_iters: int = 5, h: float = 1e-3, seed: int = 0,
                    n_samples: int = 64) -> float:
    """Max relative error of the training gradient on one synthetic scene.

    The loss is the full training objective: predictor, evolution with the
    training defaults and ``acm_iters`` steps, and the combined loss.  The
    check point is the seeded initialisation with its hidden biases moved
    clear of the ReLU kinks.
    """
    image, gt = synth.gen_scene(synth.SceneSpec(size=size, seed=seed))
    # the relu kinks would otherwise sit inside some +-h probes
    params = trainer.clear_of_kinks(image, trainer.PredictorParams.init(seed), 2.0 * h)
    acm = replace(trainer.TrainConfig().acm, iters=acm_iters)
    names = list(trainer.TRAINABLE)

    def program(*leaves):
        return trainer.batch_loss(image, gt, params, acm, dict(zip(names, leaves)))

    leaves = [params.tensors()[k] for k in names]
    return ad.grad_check(program, leaves, h=h, n_samples=n_samples, seed=seed)


def cmd_gradcheck(args) -> int:
    if args.size < 8 or args.acm_iters < 0 or not args.h > 0 or args.samples < 1:
        raise CliError("need --size >= 8, --acm-iters >= 0, --h > 0, --samples >= 1", EXIT_USAGE)
    err = gradcheck_error(args.size, args.acm_iters, args.h, args.seed, args.samples)
    ok = err < args.tol
    print(f"max relative error {err:.3e} ({'ok' if ok else 'FAILED'}, threshold {args.tol:g})")
    return EXIT_OK if ok else 1


def cmd_synth(args) -> int:
    try:
        spec = synth.SceneSpec(size=args.size, seed=args.seed, shape_kinds=tuple(args.shapes),
                               n_instances=tuple(args.instances), noise_sigma=args.noise,
                               illumination_gradient=args.shading)
    except ValueError as e:
        raise CliError(str(e), EXIT_USAGE) from e
    if args.n < 0:
        raise CliError("--n must be >= 0", EXIT_USAGE)
    try:
        paths = synth.write_dataset(args.out, args.n, spec)
    except OSError as e:
        raise CliError(f"cannot write {args.out}: {e}", EXIT_IO) from e
    print(f"{args.out}: {len(paths)} scenes")
    return EXIT_OK


def render_overlay(image, mask, contour: bool = False) -> np.ndarray:
    """RGB (H, W, 3) in [0, 1]: red fill at ``OVERLAY_ALPHA`` or a red 1-px boundary."""
    gray = np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0)
    rgb = np.repeat(gray[..., None], 3, axis=-1)
    if contour:
        rgb[metrics.boundary(mask)] = RED
    else:
        sel = np.asarray(mask) > 0
        rgb[sel] = (1.0 - OVERLAY_ALPHA) * rgb[sel] + OVERLAY_ALPHA * RED
    return rgb


def write_ppm(path, rgb: np.ndarray) -> None:
    h, w, _ = rgb.shape
    u8 = np.clip(np.rint(rgb * 255.0), 0, 255).astype(np.uint8)
    Path(path).write_bytes(b"P6\n%d %d\n255\n" % (w, h) + u8.tobytes())


def cmd_render(args) -> int:
    image = _read(args.image)
    mask = _read(args.mask, fields.read_mask)
    _same_shape(image=image, mask=mask)
    _write(args.out, write_ppm, render_overlay(image, mask, args.contour))
    print(f"{args.out}: {image.shape[1]}x{image.shape[0]}")
    return EXIT_OK


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except CliError as e:
        print(f"levelseg {args.command}: {e}", file=sys.stderr)
        return e.code


if __name__ == "__main__":
    sys.exit(main())
