"""Command-line entry point: ``ssrec <subcommand> ...``.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import model as mdl
from . import spectral, trainer
from .autodiff import grad_check
from .config import TrainConfig, load_config
from .data import SyntheticSpec, align_features, load_features, load_features_csv, save_features, \
    synth_generate, write_synthetic
from .errors import DataError, NumericalError
from .evaluator import (band_energy_rows, center_distance_rows, cold_start_filter, evaluate_ranking,
                        gate_distribution_rows, modality_center_distances)
from .graph import build_graph, read_interactions, write_id_map

log = logging.getLogger("ssrec")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: error: {message}\n{self.format_usage()}")


def _ks(text):
    try:
        ks = tuple(int(k) for k in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None
    if not ks or min(ks) < 1:
        raise argparse.ArgumentTypeError("K values must be >= 1")
    return ks


def build_parser():
    p = _Parser(prog="ssrec", description="Spectral multimodal recommender: train, evaluate, inspect.",
                epilog="Environment: SSR_THREADS caps BLAS worker threads. File formats: see FORMATS.md.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)

    s = sub.add_parser("synth", help="write a planted-block synthetic dataset")
    s.add_argument("--users", type=int, default=400)
    s.add_argument("--items", type=int, default=200)
    s.add_argument("--blocks", type=int, default=4)
    s.add_argument("--interactions-per-user", type=int, default=10)
    s.add_argument("--noise", type=float, default=0.5, help="modality noise sigma")
    s.add_argument("--cold-fraction", type=float, default=0.2)
    s.add_argument("--img-dim", type=int, default=48)
    s.add_argument("--txt-dim", type=int, default=32)
    s.add_argument("--seed", type=int, default=42)
    s.add_argument("--out", required=True, help="output directory")

    def data_flags(q):
        q.add_argument("--interactions", required=True, help="user<TAB>item<TAB>timestamp file")
        q.add_argument("--img-features", help="item image feature matrix")
        q.add_argument("--txt-features", help="item text feature matrix")
        q.add_argument("--csv", action="store_true", help="feature files are comma-separated text")
        q.add_argument("--config", help="TOML config file (flat key = value)")

    t = sub.add_parser("train", help="fit a model and write checkpoint, log and metrics")
    data_flags(t)
    t.add_argument("--out", required=True, help="output directory")
    t.add_argument("--max-epochs", type=int, help="override max_epochs from the config")

    e = sub.add_parser("evaluate", help="full-ranking metrics of a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--split", choices=("test", "val"), default="test")
    e.add_argument("--cold-start", action="store_true", help="restrict to users with <= 5 train interactions")
    e.add_argument("--k", type=_ks, default=(10, 20), help="comma-separated cutoffs (default 10,20)")
    e.add_argument("--out", help="also write the metrics JSON here")

    d = sub.add_parser("decompose", help="per-band spectral report of the item features as CSV")
    data_flags(d)
    d.add_argument("--bands", type=int, help="override n_bands from the config")
    d.add_argument("--out", required=True, help="CSV path")

    g = sub.add_parser("diagnose", help="band energies, gate weights and modality center distances")
    g.add_argument("--checkpoint", required=True)
    g.add_argument("--distance", choices=("euclidean", "cosine"), default="euclidean")
    g.add_argument("--out", required=True, help="output directory")

    c = sub.add_parser("gradcheck", help="finite-difference check of the training loss gradients")
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--out", help="also write the JSON report here")
    return p


# --- helpers -------------------------------------------------------------------

def _limit_threads():
    n = os.environ.get("SSR_THREADS")
    if not n:
        return None
    try:
        n = int(n)
    except ValueError:
        raise UsageError(f"SSR_THREADS must be an integer, got {n!r}") from None
    from threadpoolctl import threadpool_limits
    return threadpool_limits(limits=max(1, n))


def _load_inputs(args, cfg: TrainConfig):
    """Read interactions and the feature files the config needs; validates shapes."""
    table, user_ids, item_ids = read_interactions(args.interactions)
    loader = load_features_csv if args.csv else load_features
    feats = {}
    for c, path in (("img", args.img_features), ("txt", args.txt_features)):
        if c not in cfg.modalities:
            continue
        if path is None:
            raise DataError(f"config enables the {c} modality but --{c}-features was not given")
        feats[c] = align_features(loader(path), item_ids)
    return table, user_ids, item_ids, feats


def _config(args) -> TrainConfig:
    return load_config(args.config) if args.config else TrainConfig()


def _write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _write_csv(path, header, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)


def load_run(ckpt_path):
    """Rebuild everything a checkpoint needs: params, context, split tables."""
    params, header = mdl.load_checkpoint(ckpt_path)
    cfg = TrainConfig.from_dict(header["config"])
    data = header["data"]
    ns = argparse.Namespace(interactions=data["interactions"], img_features=data.get("img_features"),
                            txt_features=data.get("txt_features"), csv=data.get("csv", False))
    table, _, _, feats = _load_inputs(ns, cfg)
    n_users, n_items = header["n_users"], header["n_items"]
    ctx, split = trainer.build_context(table, n_users, n_items, feats, cfg)
    mdl.restore_partitions(ctx, header["partitions"])
    return params, header, ctx, split.tables(table)


# --- subcommands ---------------------------------------------------------------

def cmd_synth(args):
    spec = SyntheticSpec(n_users=args.users, n_items=args.items, n_blocks=args.blocks,
                         interactions_per_user=args.interactions_per_user, modality_noise=args.noise,
                         cold_fraction=args.cold_fraction, seed=args.seed, img_dim=args.img_dim,
                         txt_dim=args.txt_dim)
    out = write_synthetic(synth_generate(spec), args.out)
    print(json.dumps({"out": str(out), "users": spec.n_users, "items": spec.n_items}))


def cmd_train(args):
    cfg = _config(args)
    if args.max_epochs is not None:
        cfg = cfg.replace(max_epochs=args.max_epochs)
    table, user_ids, item_ids, feats = _load_inputs(args, cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_id_map(out / "user_ids.tsv", user_ids)
    write_id_map(out / "item_ids.tsv", item_ids)
    data = {"interactions": str(Path(args.interactions).resolve()), "csv": bool(args.csv)}
    for c, path in (("img", args.img_features), ("txt", args.txt_features)):
        if path is not None:
            data[f"{c}_features"] = str(Path(path).resolve())
    res = trainer.fit(table, len(user_ids), len(item_ids), feats, cfg, out_dir=out,
                      header_extra={"data": data})
    print(json.dumps(res.metrics["test"], sort_keys=True))


def cmd_evaluate(args):
    params, header, ctx, (train, val, test) = load_run(args.checkpoint)
    target = test if args.split == "test" else val
    n_users = header["n_users"]
    users = cold_start_filter(train, n_users) if args.cold_start else None
    Z = mdl.node_embedding(ctx, params)
    metrics = evaluate_ranking(Z, n_users, train, target, args.k, users=users).to_json()
    if args.out:
        _write_json(args.out, metrics)
    print(json.dumps(metrics, sort_keys=True))


def cmd_decompose(args):
    cfg = _config(args)
    if args.bands is not None:
        cfg = cfg.replace(n_bands=args.bands)
    table, user_ids, item_ids, feats = _load_inputs(args, cfg)
    if not feats:
        raise DataError("decompose needs at least one of --img-features / --txt-features")
    split = trainer.chronological_split(table)
    graph = build_graph(trainer.graph_table(table, split, cfg), len(user_ids), len(item_ids))
    ctx = mdl.prepare_context(cfg.replace(spectral=True), graph, feats)
    parts = spectral.fit_partitions(ctx.features, ctx.spectrum, cfg.n_bands, shared=cfg.shared_partition)
    rows = spectral.band_report(ctx.spectrum, ctx.features, parts)
    _write_csv(args.out, ["modality", "band", "n_modes", "eigenvalue_lo", "eigenvalue_hi",
                          "energy", "energy_fraction"], rows)


def cmd_diagnose(args):
    params, header, ctx, (train, val, test) = load_run(args.checkpoint)
    n_users = header["n_users"]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    Z, alpha, stack_data = mdl.embed_with_weights(ctx, params)
    stack = spectral.BandStack(stack_data, ctx.band_axis_map)
    _write_csv(out / "band_energy.csv", ["modality", "band", "user_mean_energy", "item_mean_energy"],
               band_energy_rows(stack, n_users))
    evaluated = np.unique(test.users)
    cold = cold_start_filter(train, n_users)
    _write_csv(out / "gate_weights.csv", ["user", "band", "alpha", "cold"],
               gate_distribution_rows(alpha, evaluated, cold, ctx.band_axis_map))
    dist = modality_center_distances(stack, n_users, metric=args.distance)
    _write_csv(out / "center_distances.csv", ["band", "modality_a", "modality_b", "distance"],
               center_distance_rows(dist, stack.modalities))
    save_features(out / "embeddings.f32bin", Z)


def cmd_gradcheck(args):
    program, params, batch, _ = trainer.gradcheck_fixture(seed=args.seed)
    report = grad_check(program, params, batch, n_coords=10**9)
    if args.out:
        _write_json(args.out, report)
    print(json.dumps(report, indent=2, sort_keys=True))
    if not report["passed"]:
        raise NumericalError("gradient check failed")


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "evaluate": cmd_evaluate,
            "decompose": cmd_decompose, "diagnose": cmd_diagnose, "gradcheck": cmd_gradcheck}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError(parser.format_help())
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        limiter = _limit_threads()
        try:
            COMMANDS[args.command](args)
        finally:
            if limiter is not None:
                limiter.unregister()
    except UsageError as exc:
        print(str(exc), file=sys.stderr, end="" if str(exc).endswith("\n") else "\n")
        return EXIT_USAGE
    except SystemExit as exc:   # --help
        return int(exc.code or 0)
    except DataError as exc:
        print(f"ssrec: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (FileNotFoundError, IsADirectoryError, PermissionError) as exc:
        print(f"ssrec: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as exc:
        print(f"ssrec: numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK
