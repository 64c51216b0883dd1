"""Command-line entry point.

Subcommands share one workspace convention: --out names a directory that
holds dataset.bin, teacher.bin, metrics.csv, checkpoint.bin, and
results.txt. Exit codes: 0 success, 1 contract or config error, 2 I/O
error.
"""

import argparse
import sys
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import config as configmod
from . import data as datamod
from . import encoders, evaluation, losses, prototypes, trainer
from .errors import ConfigError

DATASET_FILE = "dataset.bin"
TEACHER_FILE = "teacher.bin"
METRICS_FILE = "metrics.csv"
CHECKPOINT_FILE = "checkpoint.bin"
RESULTS_FILE = "results.txt"
CLUSTER_REPORT_FILE = "cluster_report.txt"

GRAD_CHECK_THRESHOLD = 1e-4


def _build_parser():
    parser = argparse.ArgumentParser(
        prog="prototower",
        description="Two-tower contrastive training with prototype supervision.",
    )
    commands = parser.add_subparsers(dest="command", required=True)
    for name, brief in (
        ("gen-data", "write a synthetic paired dataset and its teacher cache"),
        ("train", "train on a generated dataset"),
        ("eval", "score a checkpoint on the held-out split"),
        ("cluster-report", "cluster embeddings and score them against labels"),
        ("grad-check", "finite-difference audit of every gradient path"),
    ):
        sub = commands.add_parser(name, help=brief)
        sub.add_argument("--config", type=Path, default=None, help="config file path")
        sub.add_argument(
            "--out", type=Path, default=None, help="workspace directory"
        )
        sub.add_argument("--seed", type=int, default=None, help="master seed override")
        sub.add_argument(
            "--preset",
            default=None,
            help="ablation arm: " + ", ".join(sorted(configmod.PRESETS)),
        )
    return parser


def _load_config(args):
    cfg = configmod.TrainConfig()
    if args.config is not None:
        cfg = configmod.load_config(args.config)
    if args.preset is not None:
        cfg = configmod.apply_preset(cfg, args.preset)
    if args.seed is not None:
        cfg = configmod.apply_seed(cfg, args.seed)
    return configmod.validate(cfg)


def _workspace(args):
    if args.out is None:
        raise ConfigError(f"{args.command} requires --out")
    out = args.out
    if not out.is_dir():
        raise OSError(f"output directory {out} does not exist")
    return out


def cmd_gen_data(args):
    cfg = _load_config(args)
    out = _workspace(args)
    ds = datamod.generate_synthetic(
        cfg.n_classes, cfg.per_class, cfg.d_latent, cfg.d_image, cfg.d_text,
        cfg.noise_sigma, cfg.seed_data,
        text_noise_scale=cfg.text_noise_scale, d_style=cfg.d_style,
    )
    if cfg.gap_scale > 0.0:
        offset_norm = cfg.gap_scale * datamod.rms(ds.x_text)
        ds = datamod.inject_modality_gap(ds, gap_norm=offset_norm, seed=cfg.seed_gap)
        print(f"injected text offset of norm {offset_norm:.4f}")
    teacher = datamod.build_teacher_cache(
        ds, cfg.teacher_dim, cfg.seed_teacher, raw_dim=cfg.teacher_raw_dim
    )
    datamod.save_dataset(out / DATASET_FILE, ds)
    datamod.save_teacher_cache(out / TEACHER_FILE, teacher)
    print(
        f"wrote {out / DATASET_FILE}: M={ds.n_samples} d_image={cfg.d_image} "
        f"d_text={cfg.d_text} n_classes={cfg.n_classes}"
    )
    print(f"wrote {out / TEACHER_FILE}: d_teacher={cfg.teacher_dim}")
    return 0


def cmd_train(args):
    cfg = _load_config(args)
    out = _workspace(args)
    ds = datamod.load_dataset(out / DATASET_FILE)
    teacher = None
    if cfg.teacher_enabled:
        teacher = datamod.load_teacher_cache(out / TEACHER_FILE)
    _, metrics = trainer.run(
        ds, cfg, teacher=teacher,
        metrics_path=out / METRICS_FILE,
        checkpoint_path=out / CHECKPOINT_FILE,
    )
    episodes = metrics[-1]["episode"] + 1 if metrics else 0
    print(f"trained {episodes} episodes, {len(metrics)} steps")
    if cfg.proto_enabled or cfg.teacher_enabled:
        print(f"classifier source: {'pbt' if cfg.pbt_enabled else 'centroid'}")
    else:
        print("classifier source: none")
    if metrics:
        last = metrics[-1]
        print(
            f"final losses: clip={last['loss_clip']:.4f} "
            f"proto={last['loss_proto']:.4f} external={last['loss_external']:.4f}"
        )
    print(f"wrote {out / METRICS_FILE} and {out / CHECKPOINT_FILE}")
    return 0


def cmd_eval(args):
    cfg = _load_config(args)
    out = _workspace(args)
    ds = datamod.load_dataset(out / DATASET_FILE)
    model = trainer.load_model(out / CHECKPOINT_FILE, cfg)
    report = evaluation.evaluate_model(ds, cfg, model)
    text = evaluation.format_report(report)
    with open(out / RESULTS_FILE, "a", encoding="utf-8", newline="\n") as fh:
        fh.write(text)
    sys.stdout.write(text)
    return 0


def cmd_cluster_report(args):
    cfg = _load_config(args)
    out = _workspace(args)
    ds = datamod.load_dataset(out / DATASET_FILE)
    model = trainer.load_model(out / CHECKPOINT_FILE, cfg)
    _, test_idx = datamod.split_indices(ds.n_samples, cfg.split_fraction, cfg.seed_split)
    labels = ds.labels[test_idx]
    lines = []
    for tag, tower in (("image", model.image_tower), ("text", model.text_tower)):
        z = prototypes.unit_rows(
            encoders.forward_values(tower, getattr(ds, f"x_{tag}")[test_idx])
        )
        ari_value, ami_value = evaluation.cluster_eval(
            z, labels, n_clusters=ds.n_classes,
            n_restarts=cfg.eval_kmeans_restarts,
            kmeans_iters=cfg.kmeans_iters, seed=cfg.seed_eval,
        )
        lines.append(f"{tag}_ari = {ari_value!r}")
        lines.append(f"{tag}_ami = {ami_value!r}")
    text = "\n".join(lines) + "\n"
    with open(out / CLUSTER_REPORT_FILE, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)
    sys.stdout.write(text)
    return 0


def default_grad_cases(seed=0):
    """Small random instances exercising every gradient path."""
    rng = np.random.default_rng(seed)
    n, d_in, d_z, d_h, k = 5, 4, 6, 3, 4
    x = rng.standard_normal((n, d_in))
    protos = prototypes.unit_rows(rng.standard_normal((k, d_h)))
    targets = prototypes.soft_targets(protos, 0.5).rows[
        rng.integers(0, k, size=n)
    ]
    w1 = rng.standard_normal((d_in, d_z)) / 2.0
    # nonzero biases keep all-dead relu rows off the normalization paths
    b1 = 0.1 * rng.standard_normal((1, d_z))
    w2 = rng.standard_normal((d_z, d_h)) / 2.0
    b2 = 0.1 * rng.standard_normal((1, d_h))
    z_other = prototypes.unit_rows(rng.standard_normal((n, d_h)))
    feats_a = rng.standard_normal((n, d_h))
    feats_b = rng.standard_normal((n, d_h))
    z_fixed = prototypes.unit_rows(rng.standard_normal((n, d_h)))
    s = np.array([[1.5]])

    def tower(nodes, features):
        h = ad.relu(ad.add(ad.matmul(ad.as_node(features), nodes[0]), nodes[1]))
        return ad.add(ad.matmul(h, nodes[2]), nodes[3])

    def clip_case(nodes):
        z_i = ad.l2_normalize_rows(tower(nodes[:4], x))
        return losses.info_nce(z_i, ad.as_node(z_other), nodes[4])

    def proto_case(nodes):
        h_i = encoders.encode([(nodes[0], nodes[1])], feats_a)
        h_t = encoders.encode([(nodes[2], nodes[3])], feats_b)
        p_i = losses.proto_scores(h_i, protos, nodes[4])
        p_t = losses.proto_scores(h_t, protos, nodes[4])
        return losses.proto_loss(p_i, targets, p_t, targets)

    def external_case(nodes):
        h = encoders.encode([(nodes[0], nodes[1])], feats_a)
        p = losses.proto_scores(h, protos, 0.3)
        return losses.external_proto_loss(p, p, targets)

    def encoder_case(nodes):
        return ad.mean_all(ad.mul(tower(nodes, x), tower(nodes, x)))

    def temperature_case(nodes):
        return losses.info_nce(
            ad.as_node(z_fixed), ad.as_node(np.roll(z_fixed, 1, axis=0)), nodes[0]
        )

    square = rng.standard_normal((d_h, d_h)) / 2.0
    return [
        ("contrastive loss", clip_case, [w1, b1, w2, b2, s]),
        ("prototype loss", proto_case, [square, b2, square.T.copy(), b2, s]),
        ("external prototype loss", external_case, [square, b2]),
        ("encoder stack", encoder_case, [w1, b1, w2, b2]),
        ("temperature", temperature_case, [s]),
    ]


def run_grad_checks(cases=None, threshold=GRAD_CHECK_THRESHOLD):
    """Finite-difference audit; returns (name, worst_rel_err, passed) rows."""
    if cases is None:
        cases = default_grad_cases()
    if not cases:
        raise ConfigError("gradient check registry is empty")
    rows = []
    for name, f, params in cases:
        err = float(ad.finite_diff_check(f, params))
        rows.append((name, err, err < threshold))
    return rows


def cmd_grad_check(args):
    rows = run_grad_checks()
    width = max(len(name) for name, _, _ in rows)
    failures = 0
    for name, err, ok in rows:
        status = "PASS" if ok else "FAIL"
        print(f"{name:<{width}}  {err:.3e}  {status}")
        failures += 0 if ok else 1
    return 0 if failures == 0 else 1


_COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "cluster-report": cmd_cluster_report,
    "grad-check": cmd_grad_check,
}


def main(argv=None):
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code in (0, None) else 1
    try:
        return _COMMANDS[args.command](args)
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (ValueError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def main_entry():
    raise SystemExit(main())
