"""Command-line entry point: generate, train, embed, eval, benchmark.

Exit codes: 0 success, 2 configuration error, 3 I/O or file-format error,
4 non-finite loss, 5 schema mismatch.
"""
from __future__ import annotations

import argparse
import json
import logging
import platform
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .data import DataFormatError, read_dataset, read_embedding, read_obs, write_dataset, write_embedding, write_table
from .evaluation import MetricError, metrics_report
from .model import SchemaError
from .numerics import NonFiniteError
from .runconfig import ConfigError, documented_keys, load_config
from .synthdata import generate
from .training import CheckpointError, embed, load_checkpoint, save_checkpoint, train

logger = logging.getLogger("invae")

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC, EXIT_SCHEMA = 0, 2, 3, 4, 5
BLOCK_PREFIX = {"invariant": ("zI",), "spurious": ("zS",), "all": ("zI", "zS")}


def versions() -> dict[str, str]:
    import scipy
    import sklearn
    import torch
    return {"invae": __version__, "numpy": np.__version__, "scipy": scipy.__version__,
            "scikit-learn": sklearn.__version__, "torch": torch.__version__,
            "python": platform.python_version()}


def _write_json(path, doc) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


# commands --------------------------------------------------------------------

def cmd_generate(args) -> int:
    run = load_config(args.config)
    if args.suite:
        run.synth.setdefault("suite", args.suite)
    cfg = run.synth_config(seed=args.seed)
    sd = generate(cfg)
    out = Path(args.out)
    write_dataset(sd.to_dataset(), out)
    _write_json(out / "manifest.json", {"synth_config": cfg.to_dict(), "seed": cfg.seed, "n_cells": len(sd),
                                        "n_genes": int(sd.counts.shape[1]), "versions": versions()})
    print(f"wrote {len(sd)} cells x {sd.counts.shape[1]} genes to {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    run = load_config(args.config)
    ds = read_dataset(args.data)
    mcfg = run.model_config(len(ds.genes), args.variant)
    tcfg = run.train_config(seed=args.seed)
    ckpt, report = train(ds, mcfg, tcfg, log_every=args.log_every)
    save_checkpoint(ckpt, args.out)
    report_path = args.report or str(Path(args.out).with_suffix("")) + ".report.json"
    _write_json(report_path, report.to_dict())
    last = report.epochs[-1]
    print(f"trained {mcfg.variant} for {len(report.epochs)} epochs (best {report.best_epoch}); final train "
          + " ".join(f"{k}={v:.6g}" for k, v in last.train.items()))
    return EXIT_OK


def cmd_embed(args) -> int:
    ds = read_dataset(args.data)
    ckpt = load_checkpoint(args.ckpt)
    z_inv, z_spur = embed(ds, ckpt, lenient=args.lenient)
    blocks = {"zI": z_inv, "zS": z_spur}
    keep = {p: blocks[p] for p in BLOCK_PREFIX[args.block] if blocks[p].shape[1] > 0}
    write_embedding(args.out, ds.cell_ids, keep)
    if args.dump_umap_input:
        write_embedding(args.dump_umap_input, ds.cell_ids, {p: b for p, b in blocks.items() if b.shape[1] > 0})
    print(f"wrote {len(ds)} x {sum(b.shape[1] for b in keep.values())} embedding to {args.out}")
    return EXIT_OK


def evaluate_files(emb_path, obs_path, true_latents_path=None, probe_train_envs=None, k: int = 15, seed: int = 0) -> dict:
    ids, blocks = read_embedding(emb_path)
    obs_ids, _, env, labels = read_obs(obs_path)
    if ids != obs_ids:
        raise SchemaError("cell_id columns of the embedding and obs.csv differ")
    named = {}
    if "zI" in blocks:
        named["invariant"] = blocks["zI"]
    if "zS" in blocks:
        named["spurious"] = blocks["zS"]
    if not named:
        raise SchemaError("embedding has no zI_* or zS_* columns")
    named["all"] = np.concatenate(list(named.values()), axis=1)
    truth = None
    if true_latents_path:
        t_ids, t_blocks = read_embedding(true_latents_path)
        if t_ids != ids:
            raise SchemaError("cell_id column of the true-latents file differs from the embedding")
        truth = {"invariant": t_blocks.get("zI"), "spurious": t_blocks.get("zS")}
    rep = metrics_report(named, type_labels=labels, batch_labels=env, true_latents=truth,
                         probe_train_envs=probe_train_envs, k=k, seed=seed)
    return rep.to_dict({"seed": seed, "versions": versions()})


def cmd_eval(args) -> int:
    envs = _split_list(args.probe_train_envs)
    doc = evaluate_files(args.emb, args.obs, args.true_latents, envs, k=args.k, seed=args.seed)
    _write_json(args.out, doc)
    print(f"wrote {len(doc['metrics'])} metrics ({len(doc['skipped'])} skipped) to {args.out}")
    return EXIT_OK


def cmd_benchmark(args) -> int:
    run = load_config(args.config)
    if args.suite:
        run.synth.setdefault("suite", args.suite)
    bench = run.bench_config()
    seeds = [int(s) for s in _split_list(args.seeds)] if args.seeds else list(bench.seeds)
    out = Path(args.out)
    rows, failures = [], []
    for seed in seeds:
        scfg = run.synth_config(seed=seed)
        sd = generate(scfg)
        ds = sd.to_dataset()
        data_dir = out / f"data_seed{seed}"
        write_dataset(ds, data_dir)
        env_levels = sorted(set(ds.env))
        heldout = [f"env{e}" for e in scfg.heldout_envs] or [env_levels[-1]]
        train_envs = list(bench.probe_train_envs) if bench.probe_train_envs else \
            [e for e in env_levels if e not in heldout]
        for variant in bench.variants:
            run_dir = out / f"{variant}_seed{seed}"
            try:
                ckpt, report = train(ds, run.model_config(len(ds.genes), variant), run.train_config(seed=seed))
                run_dir.mkdir(parents=True, exist_ok=True)
                save_checkpoint(ckpt, run_dir / "ckpt.json")
                _write_json(run_dir / "ckpt.report.json", report.to_dict())
                z_inv, z_spur = embed(ds, ckpt)
                blocks = {p: b for p, b in (("zI", z_inv), ("zS", z_spur)) if b.shape[1] > 0}
                write_embedding(run_dir / "emb.csv", ds.cell_ids, blocks)
                doc = evaluate_files(run_dir / "emb.csv", data_dir / "obs.csv", data_dir / "latents_true.csv",
                                     train_envs, seed=seed)
                _write_json(run_dir / "metrics.json", doc)
            except Exception as err:  # noqa: BLE001 - recorded, the sweep continues
                code = exit_code_for(err)
                if code is None:
                    raise
                logger.error("%s seed %d failed (exit %d): %s", variant, seed, code, err)
                failures.append({"variant": variant, "seed": seed, "exit_code": code, "error": str(err)})
                continue
            rows += [{"variant": variant, "seed": seed, "metric": k, "value": v} for k, v in doc["metrics"].items()]
            print(f"{variant} seed {seed}: " + ", ".join(
                f"{k}={doc['metrics'][k]:.3f}" for k in ("mcc_invariant", "probe_accuracy_heldout") if k in doc["metrics"]))
    out.mkdir(parents=True, exist_ok=True)
    write_table(out / "benchmark.csv", ["variant", "seed", "metric", "value"],
                ([r["variant"], r["seed"], r["metric"], float(r["value"])] for r in rows))
    _write_json(out / "benchmark.json", {"rows": rows, "failures": failures, "seeds": seeds,
                                         "variants": list(bench.variants), "versions": versions()})
    print(f"wrote {len(rows)} rows to {out / 'benchmark.csv'}" + (f"; {len(failures)} runs failed" if failures else ""))
    return EXIT_OK if not failures else max(f["exit_code"] for f in failures)


def _split_list(text):
    if text is None:
        return None
    return [p.strip() for p in text.split(",") if p.strip()]


# plumbing ----------------------------------------------------------------------

def exit_code_for(err: BaseException) -> int | None:
    if isinstance(err, ConfigError):
        return EXIT_CONFIG
    if isinstance(err, SchemaError):
        return EXIT_SCHEMA
    if isinstance(err, NonFiniteError):
        return EXIT_NUMERIC
    if isinstance(err, (OSError, DataFormatError, CheckpointError, MetricError)):
        return EXIT_IO
    return None


def _config_help() -> str:
    lines = ["config file keys (flat 'key = value', '#' comments):"]
    lines += [f"  {k} (default {v})" for k, v in documented_keys()]
    lines.append("exit codes: 0 ok, 2 config, 3 I/O, 4 non-finite loss, 5 schema mismatch")
    return "\n".join(lines)


def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.RawDescriptionHelpFormatter
    p = argparse.ArgumentParser(prog="invae", description="Invariant identifiable VAE for count data.",
                                epilog=_config_help(), formatter_class=fmt)
    p.add_argument("--version", action="version", version=f"invae {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write a synthetic dataset directory", epilog=_config_help(), formatter_class=fmt)
    g.add_argument("--config", help="run-config file (synth.* keys)")
    g.add_argument("--suite", help="named base configuration: identifiability, ood-prediction or null")
    g.add_argument("--seed", type=int, help="override synth.seed")
    g.add_argument("--out", required=True, help="output dataset directory")
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="fit a model and write a checkpoint", epilog=_config_help(), formatter_class=fmt)
    t.add_argument("--data", required=True, help="dataset directory")
    t.add_argument("--config", help="run-config file (model.* and train.* keys)")
    t.add_argument("--out", required=True, help="checkpoint path (JSON)")
    t.add_argument("--variant", choices=("invae", "ivae", "nfivae"), help="override model.variant")
    t.add_argument("--seed", type=int, help="override train.seed")
    t.add_argument("--report", help="train-report path (default: <out>.report.json)")
    t.add_argument("--log-every", type=int, default=0, help="log losses every N epochs")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("embed", help="write posterior-mean embeddings")
    e.add_argument("--data", required=True, help="dataset directory")
    e.add_argument("--ckpt", required=True, help="checkpoint path")
    e.add_argument("--out", required=True, help="embedding CSV path")
    e.add_argument("--block", choices=tuple(BLOCK_PREFIX), default="all", help="latent block to write")
    e.add_argument("--lenient", action="store_true", help="map unseen covariate levels to a zero embedding")
    e.add_argument("--dump-umap-input", metavar="PATH", help="also write the full embedding for external plotting")
    e.set_defaults(func=cmd_embed)

    v = sub.add_parser("eval", help="compute metrics for an embedding")
    v.add_argument("--emb", required=True, help="embedding CSV")
    v.add_argument("--obs", required=True, help="obs.csv of the dataset")
    v.add_argument("--true-latents", help="latents_true.csv for MCC")
    v.add_argument("--probe-train-envs", help="comma-separated environments the probe is fitted on")
    v.add_argument("--k", type=int, default=15, help="neighbours in the kNN graph")
    v.add_argument("--seed", type=int, default=0, help="seed for k-means and kBET sampling")
    v.add_argument("--out", required=True, help="metrics JSON path")
    v.set_defaults(func=cmd_eval)

    b = sub.add_parser("benchmark", help="generate, train, embed and evaluate every variant and seed",
                       epilog=_config_help(), formatter_class=fmt)
    b.add_argument("--config", help="run-config file (synth.*, model.*, train.*, bench.* keys)")
    b.add_argument("--suite", help="named base synthetic configuration")
    b.add_argument("--seeds", help="comma-separated seeds (overrides bench.seeds)")
    b.add_argument("--out", required=True, help="output directory")
    b.set_defaults(func=cmd_benchmark)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except Exception as err:  # noqa: BLE001 - mapped to documented exit codes
        code = exit_code_for(err)
        if code is None:
            raise
        print(f"error: {err}", file=sys.stderr)
        return code


if __name__ == "__main__":
    sys.exit(main())
