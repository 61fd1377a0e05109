"""Command-line driver: reproducible two-phase runs from one JSON config.

Subcommands: train-prior, train-gan, evaluate, generate, interpolate. Every
run writes a resolved_config.json capturing all defaults; re-running any
command from that file reproduces its outputs byte for byte. All randomness
fans out of the single root seed through labeled sub-seeds.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import data as dat
from . import evaluation, gan, latent, nn, prior
from .errors import ConfigError, ContractError, ParseError, TrainingError

_REQUIRED = object()

_AFFINE_SCHEMA = {
    "rotation_deg": (float, 10.0),
    "scale_low": (float, 0.3),
    "scale_high": (float, 1.0),
    "shear": (float, 0.3),
}

_PRIOR_SCHEMA = {
    "beta_p": (float, 0.1),
    "beta_mu": (float, 4.0),
    "beta_t": (float, 0.25),
    "epochs": (int, 60),
    "batch": (int, 256),
    "lr": (float, 0.002),
    "augmentation": (str, "vat"),
    "hidden": (list, [256, 256]),
    "vat_xi": (float, 1e-6),
    "affine": (_AFFINE_SCHEMA, None),
}

_TOGGLES_SCHEMA = {
    "ce": (bool, True),
    "mse": (bool, True),
    "rec": (bool, True),
    "pce": (bool, True),
    "cm": (bool, True),
}

_GAN_SCHEMA = {
    "d_n": (int, _REQUIRED),
    "num_classes": (int, _REQUIRED),
    "hidden": (list, [256, 256]),
    "alpha_cl": (float, 10.0),
    "alpha_mse": (float, 10.0),
    "alpha_re": (float, 1.0),
    "alpha_pcl": (float, 10.0),
    "alpha_cm": (float, 1.0),
    "lambda_gp": (float, 10.0),
    "critic_iters": (int, 1),
    "epochs": (int, 200),
    "batch": (int, 30),
    "sigma": (float, 0.1),
    "gan_kind": (str, "wasserstein-gp"),
    "gp_center": (float, 0.0),
    "loss_toggles": (_TOGGLES_SCHEMA, None),
    "lr": (float, 0.0001),
    "eval_every": (int, 1),
    "strict_adversarial_sign": (bool, False),
}

_DATASET_SCHEMA = {
    "kind": (str, _REQUIRED),
    "normalization": (str, "signed"),
    "test_fraction": (float, 0.2),
    "imbalance": (dict, {}),
    # synthetic
    "classes": (int, None),
    "per_class": (int, None),
    "dim": (int, None),
    "spread": (float, 8.0),
    "noise": (float, 1.0),
    # idx
    "images": (str, None),
    "labels": (str, None),
    # csv
    "path": (str, None),
    "label_column": (str, None),
    "num_classes": (int, None),
    "image_shape": (list, None),
}

_EVAL_SCHEMA = {
    "restarts": (int, 10),
    "seeds": (list, [0, 1, 2, 3, 4]),
}

_TOP_SCHEMA = {
    "seed": (int, 0),
    "output_dir": (str, _REQUIRED),
    "prior_source": (str, None),  # parameter file path, or "uniform"
    "dataset": (_DATASET_SCHEMA, None),
    "prior": (_PRIOR_SCHEMA, None),
    "gan": (_GAN_SCHEMA, None),
    "eval": (_EVAL_SCHEMA, None),
}

_KIND_REQUIRED = {
    "synthetic": ("classes", "per_class", "dim"),
    "idx": ("images", "labels"),
    "csv": ("path",),
}


def _resolve_section(path, raw, schema):
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: expected an object")
    for key in raw:
        if key not in schema:
            raise ConfigError(f"{path}.{key}: unknown key")
    out = {}
    for key, (kind, default) in schema.items():
        loc = f"{path}.{key}" if path else key
        if isinstance(kind, dict):
            out[key] = _resolve_section(loc, raw.get(key, {}), kind)
            continue
        if key not in raw or raw[key] is None:
            if default is _REQUIRED:
                raise ConfigError(f"{loc}: required field is missing")
            out[key] = default
            continue
        value = raw[key]
        if kind is float and isinstance(value, int) and not isinstance(value, bool):
            value = float(value)
        if kind is bool and not isinstance(value, bool):
            raise ConfigError(f"{loc}: expected true/false")
        if kind is int and (isinstance(value, bool) or not isinstance(value, int)):
            raise ConfigError(f"{loc}: expected an integer")
        if not isinstance(value, kind):
            raise ConfigError(f"{loc}: expected {kind.__name__}")
        out[key] = value
    return out


def resolve_config(raw):
    """Apply defaults and strict-schema validation; returns the full tree."""
    cfg = _resolve_section("", raw, _TOP_SCHEMA)
    ds = cfg["dataset"]
    kind = ds["kind"]
    if kind not in _KIND_REQUIRED:
        raise ConfigError(f"dataset.kind: unknown kind {kind!r}")
    for field_name in _KIND_REQUIRED[kind]:
        if ds[field_name] is None:
            raise ConfigError(f"dataset.{field_name}: required for kind {kind!r}")
    if ds["normalization"] not in ("signed", "unit"):
        raise ConfigError("dataset.normalization: must be 'signed' or 'unit'")
    if not 0.0 < ds["test_fraction"] < 1.0:
        raise ConfigError("dataset.test_fraction: must be inside (0, 1)")
    for cls_key, frac in ds["imbalance"].items():
        try:
            int(cls_key)
        except ValueError:
            raise ConfigError(f"dataset.imbalance.{cls_key}: class keys must be integers") from None
        if not isinstance(frac, (int, float)) or not 0.0 < float(frac) <= 1.0:
            raise ConfigError(f"dataset.imbalance.{cls_key}: fraction must be in (0, 1]")
    declared = ds["classes"] if kind == "synthetic" else ds["num_classes"]
    if declared is not None and declared != cfg["gan"]["num_classes"]:
        raise ConfigError(
            f"gan.num_classes: {cfg['gan']['num_classes']} disagrees with dataset ({declared})"
        )
    return cfg


def load_config(path):
    try:
        raw = json.loads(Path(path).read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    return resolve_config(raw)


def sub_seed(root, label):
    """Stable 64-bit sub-seed derived from the root seed and a label."""
    digest = hashlib.sha256(f"{root}:{label}".encode()).digest()
    return int.from_bytes(digest[:8], "little")


def output_dir(cfg):
    override = os.environ.get("SIMIGAN_OUTPUT_DIR")
    path = Path(override) if override else Path(cfg["output_dir"])
    path.mkdir(parents=True, exist_ok=True)
    return path


def write_resolved(cfg, out_dir):
    (out_dir / "resolved_config.json").write_text(
        json.dumps(cfg, indent=2, sort_keys=True) + "\n"
    )


# ---------------------------------------------------------------------------
# dataset assembly


def load_splits(cfg):
    """Train/test splits, normalized with statistics from the training split.

    The imbalance spec applies to the training split only.
    """
    ds_cfg = cfg["dataset"]
    root = cfg["seed"]
    kind = ds_cfg["kind"]
    if kind == "synthetic":
        dataset = dat.synth_blobs(
            ds_cfg["classes"],
            ds_cfg["per_class"],
            ds_cfg["dim"],
            spread=ds_cfg["spread"],
            noise=ds_cfg["noise"],
            seed=sub_seed(root, "data"),
        )
    elif kind == "idx":
        dataset = dat.load_idx(ds_cfg["images"], ds_cfg["labels"])
    else:
        dataset = dat.load_csv(
            ds_cfg["path"],
            label_column=ds_cfg["label_column"],
            num_classes=ds_cfg["num_classes"],
        )
    if ds_cfg["image_shape"] is not None:
        dataset.image_shape = tuple(ds_cfg["image_shape"])
    if dataset.labels is not None and dataset.num_classes != cfg["gan"]["num_classes"]:
        raise ConfigError(
            f"gan.num_classes: {cfg['gan']['num_classes']} disagrees with "
            f"loaded dataset ({dataset.num_classes})"
        )
    train, test = dat.train_test_split(dataset, ds_cfg["test_fraction"], sub_seed(root, "split"))
    if ds_cfg["imbalance"]:
        spec = dat.ImbalanceSpec(
            fractions={int(k): float(v) for k, v in ds_cfg["imbalance"].items()}
        )
        train = dat.subsample_imbalanced(train, spec, sub_seed(root, "imbalance"))
    normed_train, params = dat.normalize(train, ds_cfg["normalization"])
    normed_test = dat.apply_normalization(test, params)
    return normed_train, normed_test, params


def _prior_config(cfg):
    p = cfg["prior"]
    return prior.PriorConfig(
        beta_p=p["beta_p"],
        beta_mu=p["beta_mu"],
        beta_t=p["beta_t"],
        epochs=p["epochs"],
        batch=p["batch"],
        lr=p["lr"],
        augmentation=p["augmentation"],
        hidden=tuple(p["hidden"]),
        vat_xi=p["vat_xi"],
        affine=prior.AffineRanges(**p["affine"]),
    )


def _train_config(cfg, uniform_prior):
    g = cfg["gan"]
    return gan.TrainConfig(
        alpha_cl=g["alpha_cl"],
        alpha_mse=g["alpha_mse"],
        alpha_re=g["alpha_re"],
        alpha_pcl=g["alpha_pcl"],
        alpha_cm=g["alpha_cm"],
        lambda_gp=g["lambda_gp"],
        critic_iters=g["critic_iters"],
        epochs=g["epochs"],
        batch=g["batch"],
        sigma=g["sigma"],
        gan_kind=g["gan_kind"],
        gp_center=g["gp_center"],
        toggles=gan.LossToggles(**g["loss_toggles"]),
        lr=g["lr"],
        eval_every=g["eval_every"],
        strict_adversarial_sign=g["strict_adversarial_sign"],
        uniform_prior=uniform_prior,
    )


def build_gan_nets(cfg, input_dim):
    g = cfg["gan"]
    root = cfg["seed"]
    hidden = list(g["hidden"])
    d_n, m = g["d_n"], g["num_classes"]
    out_act = "tanh" if cfg["dataset"]["normalization"] == "signed" else "sigmoid"
    generator = nn.build_network(
        [d_n + m, *hidden, input_dim],
        ["relu"] * len(hidden) + [out_act],
        seed=sub_seed(root, "gan-generator"),
    )
    discriminator = nn.build_network(
        [input_dim, *hidden, 1],
        ["leaky_relu"] * len(hidden) + ["linear"],
        seed=sub_seed(root, "gan-discriminator"),
    )
    encoder = nn.build_network(
        [input_dim, *hidden, d_n + m],
        ["leaky_relu"] * len(hidden) + ["linear"],
        head_split=d_n,
        seed=sub_seed(root, "gan-encoder"),
    )
    return generator, discriminator, encoder


def build_prior_net(cfg, input_dim):
    hidden = list(cfg["prior"]["hidden"])
    return nn.build_network(
        [input_dim, *hidden, cfg["gan"]["num_classes"]],
        ["relu"] * len(hidden) + ["linear"],
        seed=0,  # parameters come from the file
    )


# ---------------------------------------------------------------------------
# image/CSV emission


def write_pgm(path, image):
    """Binary portable graymap from a float image already scaled to 0..255."""
    clipped = np.clip(np.rint(image), 0, 255).astype(np.uint8)
    h, w = clipped.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(clipped.tobytes())


def _write_feature_csv(path, rows):
    header = ",".join(f"f{i}" for i in range(rows.shape[1]))
    lines = [header]
    for row in rows:
        lines.append(",".join(repr(float(v)) for v in row))
    Path(path).write_text("\n".join(lines) + "\n")


def _emit_samples(out_dir, stem, samples, norm_params, image_shape):
    """One artifact per call: a horizontal graymap strip or a CSV."""
    restored = dat.denormalize(samples, norm_params)
    if image_shape is not None:
        h, w = image_shape
        strip = np.concatenate([r.reshape(h, w) for r in restored], axis=1)
        path = out_dir / f"{stem}.pgm"
        write_pgm(path, strip)
    else:
        path = out_dir / f"{stem}.csv"
        _write_feature_csv(path, restored)
    return path


# ---------------------------------------------------------------------------
# commands


def cmd_train_prior(args):
    cfg = load_config(args.config)
    out = output_dir(cfg)
    train, _, _ = load_splits(cfg)
    net, trace = prior.train_prior(_prior_config(cfg), train, seed=sub_seed(cfg["seed"], "prior"))
    nn.save_params(net, out / "prior_params.bin")
    prior.write_prior_trace(trace, cfg["gan"]["num_classes"], out / "prior_trace.csv")
    histogram = trace[-1].histogram if trace else [0] * cfg["gan"]["num_classes"]
    lines = ["class,count"] + [f"{k},{c}" for k, c in enumerate(histogram)]
    (out / "prior_histogram.csv").write_text("\n".join(lines) + "\n")
    write_resolved(cfg, out)
    print(f"prior written to {out}")
    return 0


def cmd_train_gan(args):
    cfg = load_config(args.config)
    if args.uniform_prior:
        cfg["prior_source"] = "uniform"
    elif args.prior is not None:
        cfg["prior_source"] = args.prior
    if cfg["prior_source"] is None:
        raise ConfigError("prior_source: pass --prior PATH or --uniform-prior")
    out = output_dir(cfg)
    train, test, _ = load_splits(cfg)

    uniform = cfg["prior_source"] == "uniform"
    prior_net = None
    if not uniform:
        prior_net = build_prior_net(cfg, train.d)
        nn.load_params(prior_net, cfg["prior_source"])
    generator, discriminator, encoder = build_gan_nets(cfg, train.d)
    nets = gan.GanNets(generator, discriminator, encoder, prior_net)
    trainer = gan.Trainer(nets, _train_config(cfg, uniform), seed=sub_seed(cfg["seed"], "gan"))

    has_labels = test.labels is not None
    history = trainer.train(
        train,
        test if has_labels else None,
        eval_restarts=cfg["eval"]["restarts"],
        eval_seed=sub_seed(cfg["seed"], "eval"),
    )
    nn.save_params(generator, out / "generator_params.bin")
    nn.save_params(discriminator, out / "discriminator_params.bin")
    nn.save_params(encoder, out / "encoder_params.bin")
    if prior_net is not None:
        nn.save_params(prior_net, out / "prior_params.bin")
    gan.write_metrics_csv(history, out / "metrics.csv")
    if has_labels:
        report = evaluation.encode_and_score(
            encoder,
            test.features,
            test.labels,
            cfg["gan"]["num_classes"],
            restarts=cfg["eval"]["restarts"],
            seed=sub_seed(cfg["seed"], "eval"),
        )
        (out / "report.json").write_text(report.to_json() + "\n")
    write_resolved(cfg, out)
    print(f"run written to {out}")
    return 0


def cmd_evaluate(args):
    cfg = load_config(args.config)
    out = output_dir(cfg)
    train, test, _ = load_splits(cfg)
    if test.labels is None:
        raise ConfigError("dataset: evaluation requires labels")
    _, _, encoder = build_gan_nets(cfg, train.d)
    encoder_path = args.encoder or out / "encoder_params.bin"
    nn.load_params(encoder, encoder_path)

    m = cfg["gan"]["num_classes"]
    per_seed = []
    first_report = None
    for seed in cfg["eval"]["seeds"]:
        report = evaluation.encode_and_score(
            encoder, test.features, test.labels, m,
            restarts=cfg["eval"]["restarts"], seed=seed,
        )
        if first_report is None:
            first_report = report
        per_seed.append({"seed": seed, "acc": report.acc, "nmi": report.nmi})
    doc = first_report.to_json_dict()
    doc["per_seed"] = per_seed
    doc["mean_acc"] = float(np.mean([r["acc"] for r in per_seed]))
    doc["mean_nmi"] = float(np.mean([r["nmi"] for r in per_seed]))
    doc["best_acc"] = float(max(r["acc"] for r in per_seed))
    doc["best_nmi"] = float(max(r["nmi"] for r in per_seed))
    (out / "report.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")

    projected = evaluation.project_2d(evaluation.encode(encoder, test.features))
    lines = ["x,y,true_label,pred_label"]
    for (x, y), true_l, pred_l in zip(projected, test.labels, first_report.predicted_labels):
        lines.append(f"{x!r},{y!r},{true_l},{pred_l}")
    (out / "projection.csv").write_text("\n".join(lines) + "\n")
    write_resolved(cfg, out)
    print(f"report written to {out}")
    return 0


def _load_generator(cfg, args):
    train, _, norm_params = load_splits(cfg)
    generator, _, _ = build_gan_nets(cfg, train.d)
    out = output_dir(cfg)
    generator_path = getattr(args, "generator", None) or out / "generator_params.bin"
    nn.load_params(generator, generator_path)
    image_shape = train.image_shape
    return generator, norm_params, image_shape, out


def cmd_generate(args):
    cfg = load_config(args.config)
    generator, norm_params, image_shape, out = _load_generator(cfg, args)
    g = cfg["gan"]
    d_n, m, sigma = g["d_n"], g["num_classes"], g["sigma"]
    written = []
    if args.per_class:
        for cls in range(m):
            rng = np.random.default_rng(sub_seed(cfg["seed"], f"generate-{cls}"))
            samples = gan.generate_class_batch(
                generator, cls, args.per_class, d_n, m, sigma, rng
            )
            written.append(_emit_samples(out, f"class_{cls}", samples, norm_params, image_shape))
    if args.interpolate:
        written += _interpolation_sweep(
            cfg, generator, norm_params, image_shape, out,
            *args.interpolate, samples=args.samples,
        )
    if not written:
        raise ConfigError("generate: nothing requested; pass --per-class and/or --interpolate")
    write_resolved(cfg, out)
    print(f"{len(written)} artifact(s) written to {out}")
    return 0


def _interpolation_sweep(cfg, generator, norm_params, image_shape, out, class_a, class_b, steps, samples):
    g = cfg["gan"]
    d_n, m, sigma = g["d_n"], g["num_classes"], g["sigma"]
    if not (0 <= class_a < m and 0 <= class_b < m):
        raise ContractError(f"interpolate: classes {class_a}, {class_b} outside [0, {m})")
    if steps < 2:
        raise ContractError("interpolate: need at least 2 steps")
    rng = np.random.default_rng(sub_seed(cfg["seed"], "generate-interpolate"))
    z_rows = rng.normal(0.0, sigma, size=(samples, d_n))  # fixed across the sweep
    written = []
    for i, tau in enumerate(np.linspace(0.0, 1.0, steps)):
        codes = np.stack(
            [latent.interpolate(z, class_a, class_b, float(tau), m).concat()[0] for z in z_rows]
        )
        with ad.no_grad():
            frame = generator(codes).data
        written.append(
            _emit_samples(out, f"interp_{i:03d}", frame, norm_params, image_shape)
        )
    return written


def cmd_interpolate(args):
    cfg = load_config(args.config)
    generator, norm_params, image_shape, out = _load_generator(cfg, args)
    written = _interpolation_sweep(
        cfg, generator, norm_params, image_shape, out,
        args.class_a, args.class_b, args.steps, samples=args.samples,
    )
    write_resolved(cfg, out)
    print(f"{len(written)} frame(s) written to {out}")
    return 0


# ---------------------------------------------------------------------------
# entry point


def build_parser():
    parser = argparse.ArgumentParser(prog="simigan", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train-prior", help="phase 1: learn the categorical prior")
    p.add_argument("config")
    p.set_defaults(func=cmd_train_prior)

    p = sub.add_parser("train-gan", help="phase 2: adversarial training")
    p.add_argument("config")
    group = p.add_mutually_exclusive_group()
    group.add_argument("--prior", help="prior parameter file from train-prior")
    group.add_argument("--uniform-prior", action="store_true", help="ablation: uniform class codes")
    p.set_defaults(func=cmd_train_gan)

    p = sub.add_parser("evaluate", help="cluster the test split and report ACC/NMI")
    p.add_argument("config")
    p.add_argument("--encoder", help="encoder parameter file")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("generate", help="per-class sample grids and interpolations")
    p.add_argument("config")
    p.add_argument("--generator", help="generator parameter file")
    p.add_argument("--per-class", type=int, default=0, help="samples per class")
    p.add_argument("--interpolate", type=int, nargs=3, metavar=("A", "B", "STEPS"))
    p.add_argument("--samples", type=int, default=8, help="rows per interpolation frame")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("interpolate", help="class-interpolation sweep")
    p.add_argument("config")
    p.add_argument("class_a", type=int)
    p.add_argument("class_b", type=int)
    p.add_argument("steps", type=int)
    p.add_argument("--generator", help="generator parameter file")
    p.add_argument("--samples", type=int, default=8)
    p.set_defaults(func=cmd_interpolate)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, ContractError, ParseError, TrainingError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
