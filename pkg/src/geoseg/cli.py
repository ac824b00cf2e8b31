"""Command-line entry point: ``geoseg <command> ...``."""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from contextlib import nullcontext
from pathlib import Path

import numpy as np

from . import io as gio
from . import priors as P
from .evaluation import (binarize, evaluate, render_overlay, select_threshold,
                         thin_thick_split, thin_vessel_auc, thin_vessel_metrics)
from .model import DEFAULT_SCALES, count_params, forward, init_params
from .objective import RegWeights, check_backward, check_regularizer_grads
from .trainer import (DatasetSplit, Sample, build_priors, generate_synthetic_dataset,
                      render_synthetic, train, write_log_csv)

log = logging.getLogger("geoseg")


class CommandError(Exception):
    pass


def _scale_ids(text):
    ids = [int(s) for s in text.replace(",", " ").split()]
    bad = [i for i in ids if i not in DEFAULT_SCALES]
    if bad:
        raise CommandError(f"unknown scale ids {bad}; choose from {sorted(DEFAULT_SCALES)}")
    return ids


def _overrides(pairs):
    out = {}
    for p in pairs or ():
        if "=" not in p:
            raise CommandError(f"--set expects key=value, got {p!r}")
        k, v = p.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def _write_csv(path, header, rows):
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in r])


def predict(model, image):
    return forward(image, model.params, model.config)


# -- commands ---------------------------------------------------------------

def cmd_count_params(args):
    cfg = gio.load_config(args.config)
    c = count_params(cfg.model, include_bias=not args.no_bias)
    for name in ("representation", "bridge", "blocks", "head"):
        print(f"{name} {getattr(c, name)}")
    print(f"total {c.total}")


def cmd_gen_patterns(args):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for sid in _scale_ids(args.scales):
        s = DEFAULT_SCALES[sid]
        pairs = P.make_pattern_set(args.k, s.pattern_size, s.c1, s.c2)
        gio.save_patterns(out / f"patterns_s{sid}.npz", pairs)
        if args.png:
            d = out / f"patterns_s{sid}"
            d.mkdir(exist_ok=True)
            for i, p in enumerate(pairs):
                gio.save_gray(d / f"{i:02d}_aligned.png", p.aligned.pixels)
                gio.save_gray(d / f"{i:02d}_orthogonal.png", p.orthogonal.pixels)
        log.info("scale %d: %d pattern pairs of size %d", sid, len(pairs), s.pattern_size)


def _read_exclusions(path):
    if not path:
        return ()
    rows = []
    for line in Path(path).read_text().splitlines():
        line = line.split("#", 1)[0].strip()
        if line:
            rows.append(tuple(int(v) for v in line.replace(",", " ").split()))
    return rows


def cmd_mine_noise(args):
    split = gio.load_split(args.data, "train")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    exclude = _read_exclusions(args.exclude)
    for sid in _scale_ids(args.scale):
        if args.bank:
            bank = gio.load_filter_bank(args.bank, sid)
        else:
            bank = P.make_ridge_bank(sid, args.k)
        ns = P.extract_noise_patches(split.images, split.labels, split.fovs, sid, args.ps,
                                     args.pt, args.p, args.stride or None, bank, exclude)
        gio.save_noise(out / f"noise_s{sid}.npz", ns)
        if args.png:
            d = out / f"noise_s{sid}"
            d.mkdir(exist_ok=True)
            for j, (patch, (i, r, c)) in enumerate(zip(ns.patches, ns.provenance)):
                gio.save_gray(d / f"{j:03d}_img{i}_r{r}_c{c}.png", patch, bits=16)
        log.info("scale %d: kept %d noise patches", sid, len(ns.patches))


def cmd_synth_data(args):
    if not 0 <= args.test_fraction < 1:
        raise CommandError("--test-fraction must lie in [0, 1)")
    split = generate_synthetic_dataset(args.n, args.size, args.seed)
    names = [s.name for s in split.samples]
    order = np.random.default_rng(args.seed).permutation(len(names))
    n_test = int(round(args.test_fraction * len(names)))
    test = sorted(names[i] for i in order[:n_test])
    train_names = sorted(n for n in names if n not in test)
    gio.write_split(args.out, split, {"split_seed": args.seed, "train": train_names, "test": test})


def _priors_for(cfg, split, assets):
    if cfg.reg.alpha == 0 and cfg.reg.beta == 0:
        return None
    ids = [s.scale_id for s in cfg.model.scales]
    if assets:
        priors = gio.load_priors(assets, ids)
        for sid, pairs in zip(ids, priors.patterns):
            if len(pairs) != cfg.model.n_filters:
                raise CommandError(f"scale {sid} assets hold {len(pairs)} patterns, "
                                   f"config has {cfg.model.n_filters} filters")
        return priors
    return build_priors(cfg.model, split, cfg.noise_patch_size, cfg.noise_candidates,
                        cfg.noise_keep, cfg.noise_stride or None)


def cmd_train(args):
    kv = _overrides(args.set)
    if args.epochs is not None:
        kv["epochs"] = str(args.epochs)
    if args.seed is not None:
        kv["seed"] = str(args.seed)
    if args.checkpoint_every is not None:
        kv["checkpoint_every"] = str(args.checkpoint_every)
    cfg = gio.load_config(args.config, kv)
    split = gio.load_split(args.data, "train")
    priors = _priors_for(cfg, split, args.assets)
    log.info("seed %d, %d training images", cfg.seed, len(split))

    ckdir = Path(args.checkpoint_dir) if args.checkpoint_dir else None
    if ckdir:
        ckdir.mkdir(parents=True, exist_ok=True)
    meta = {"seed": cfg.seed, "train_config": gio.config_to_kv(cfg),
            "prior_digests": gio.prior_digests(priors)}

    def on_checkpoint(step, params):
        gio.save_model(ckdir / f"step_{step:07d}.gsg",
                       gio.SegmentationModel(cfg.model, params, 0.5, cfg.reg, meta))

    params, rows = train(split, priors, cfg, ckdir, args.resume, on_checkpoint)
    if args.log:
        write_log_csv(rows, args.log)

    model = gio.SegmentationModel(cfg.model, params, 0.5, cfg.reg, meta)
    if args.threshold is not None:
        model.threshold = args.threshold
    elif cfg.epochs > 0:
        Y = [predict(model, im) for im in split.images]
        model.threshold = select_threshold(Y, split.labels, split.fovs)
    log.info("operating threshold %.2f", model.threshold)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    gio.save_model(args.out, model)


def cmd_infer(args):
    model = gio.load_model(args.model)
    Y = predict(model, gio.load_image(args.image))
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    if args.binary:
        t = args.threshold if args.threshold is not None else model.threshold
        gio.save_gray(args.out, binarize(Y, t).astype(float))
    else:
        gio.save_gray(args.out, Y, bits=16)


def cmd_eval(args):
    model = gio.load_model(args.model)
    split = gio.load_split(args.data, args.split)
    t = args.threshold if args.threshold is not None else model.threshold
    Y = [predict(model, im) for im in split.images]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    report = evaluate(Y, split.labels, split.fovs, t, with_curves=args.curves,
                      n_thresholds=args.n_thresholds)
    rows = [("threshold", t)] + report.as_rows()
    if args.curves:
        _write_csv(out / "roc_curve.csv", ("threshold", "fpr", "tpr"), report.roc_curve)
        _write_csv(out / "pr_curve.csv", ("threshold", "recall", "precision"), report.pr_curve)
    if args.thin:
        tot = np.zeros(5, dtype=np.int64)
        aucs = []
        for y, s in zip(Y, split.samples):
            thin, thick = thin_thick_split(s.label)
            r = thin_vessel_metrics(binarize(y, t), thin, args.search_range, s.fov, thick)
            tot += (r.tp_pred, r.fp, r.tp_gt, r.fn, r.tn)
            aucs.append(thin_vessel_auc(y, thin, args.search_range, s.fov, thick))
        tp_pred, fp, tp_gt, fn, tn = (int(v) for v in tot)
        rows += [
            ("thin_sens", tp_gt / (tp_gt + fn) if tp_gt + fn else 1.0),
            ("thin_spec", tn / (tn + fp) if tn + fp else 1.0),
            ("thin_prec", tp_pred / (tp_pred + fp) if tp_pred + fp else 1.0),
            ("thin_auc_mean", float(np.mean(aucs))),
        ]
    _write_csv(out / "metrics.csv", ("metric", "value"), rows)
    if args.overlays:
        d = out / "overlays"
        d.mkdir(exist_ok=True)
        for y, s in zip(Y, split.samples):
            gio.save_rgb(d / f"{s.name}.png", render_overlay(binarize(y, t), s.label, s.fov))
    for k, v in rows:
        print(f"{k},{v}")


def cmd_gradcheck(args):
    cfg = gio.load_config(args.config)
    if cfg.model.n_scales * cfg.model.n_filters * cfg.model.n_blocks > 64:
        raise CommandError("gradcheck is meant for small configs such as 'tiny'")
    rng = np.random.default_rng(args.seed)
    m = cfg.model
    params = init_params(m, args.seed)
    params = params.map(lambda a: a + 0.05 * rng.standard_normal(a.shape))
    X = rng.uniform(0, 1, (args.size, args.size))
    Yg = (rng.uniform(0, 1, (args.size, args.size)) > 0.7).astype(float)
    fake = DatasetSplit([_synthetic_sample(rng, args.size)], "train")
    pri = build_priors(m, fake, patch_size=16, n_candidates=4, n_keep=2)
    weights = RegWeights(alpha=0.1, beta=0.01)

    ok = True
    for name, r in check_regularizer_grads(params.rep, pri.patterns, pri.noise).items():
        print(f"{name}: max rel error {r.max_rel_error:.3e} over {r.n_checked} coords "
              f"{'PASS' if r.passed else 'FAIL'}")
        ok &= r.passed
    r = check_backward(X, Yg, params, m, weights, pri, h=1e-5, tolerance=1e-4)
    frac_ok = r.checked_fraction >= 0.99
    print(f"backward: max rel error {r.max_rel_error:.3e}, checked {r.n_checked}, "
          f"skipped {r.n_skipped} {'PASS' if r.passed and frac_ok else 'FAIL'}")
    ok &= r.passed and frac_ok
    if not ok:
        raise CommandError("gradient check failed")


def _synthetic_sample(rng, size):
    image, label, width_map, _, _ = render_synthetic(max(size, 64), rng)
    return Sample(image, label, np.ones_like(label), "gradcheck", width_map)


# -- parser -----------------------------------------------------------------

def build_parser():
    ap = argparse.ArgumentParser(prog="geoseg", description=__doc__)
    ap.add_argument("--threads", type=int, default=None, help="BLAS thread limit")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("count-params", help="parameter breakdown of a config")
    p.add_argument("--config", default="full")
    p.add_argument("--no-bias", action="store_true")
    p.set_defaults(func=cmd_count_params)

    p = sub.add_parser("gen-patterns", help="oriented pattern pairs per scale")
    p.add_argument("--scales", default="1,2,3,4,5")
    p.add_argument("--k", type=int, default=12)
    p.add_argument("--png", action="store_true", help="also dump each pattern as PNG")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_patterns)

    p = sub.add_parser("mine-noise", help="mine vessel-free high-response patches")
    p.add_argument("--data", required=True)
    p.add_argument("--scale", default="3")
    p.add_argument("--k", type=int, default=12)
    p.add_argument("--ps", type=int, default=64, help="patch size")
    p.add_argument("--pt", type=int, default=200, help="candidates ranked")
    p.add_argument("--p", type=int, default=100, help="patches kept")
    p.add_argument("--stride", type=int, default=0, help="0 means half the patch size")
    p.add_argument("--bank", help="npz of external filters (K, m, m) instead of the ridge bank")
    p.add_argument("--exclude", help="file of 'image row col' lines to drop")
    p.add_argument("--png", action="store_true")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_mine_noise)

    p = sub.add_parser("synth-data", help="write a synthetic stroke dataset")
    p.add_argument("--n", type=int, default=30)
    p.add_argument("--size", type=int, default=256)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--test-fraction", type=float, default=0.25)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth_data)

    p = sub.add_parser("train", help="fit a model")
    p.add_argument("--data", required=True)
    p.add_argument("--config", default="desk", help="preset (full/single/tiny/desk) or file")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="config override")
    p.add_argument("--assets", help="directory from gen-patterns/mine-noise")
    p.add_argument("--epochs", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--threshold", type=float, help="fixed operating threshold")
    p.add_argument("--log", help="training log CSV")
    p.add_argument("--checkpoint-dir")
    p.add_argument("--checkpoint-every", type=int)
    p.add_argument("--resume", help="state file from a checkpoint directory")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="segment one image")
    p.add_argument("--model", required=True)
    p.add_argument("--image", required=True)
    g = p.add_mutually_exclusive_group()
    g.add_argument("--soft", action="store_true", help="16-bit soft map (default)")
    g.add_argument("--binary", action="store_true")
    p.add_argument("--threshold", type=float)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", help="score a model on a dataset split")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--threshold", type=float)
    p.add_argument("--curves", action="store_true")
    p.add_argument("--n-thresholds", type=int, help="uniform sweep instead of every score")
    p.add_argument("--thin", action="store_true")
    p.add_argument("--search-range", type=int, default=5)
    p.add_argument("--overlays", action="store_true")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference checks of every gradient")
    p.add_argument("--config", default="tiny")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--size", type=int, default=12)
    p.set_defaults(func=cmd_gradcheck)
    return ap


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    if args.threads:
        from threadpoolctl import threadpool_limits
        limit = threadpool_limits(args.threads)
    else:
        limit = nullcontext()
    try:
        with limit:
            args.func(args)
    except (CommandError, ValueError, OSError) as e:
        log.error("%s", e)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
