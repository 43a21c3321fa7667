"""Command-line entry points for the full experiment pipeline.

Subcommands:
  gen-data    simulate the arm on sine references and write the dataset CSV
  meta-train  learn loss parameters on the meta-train split
  eval        train fresh models under each learned loss, log 100-step curves
  online      streaming adaptation grid (per-run or segmented pick-and-place)
  report      export loss weights and a consolidated metrics summary

Every command is deterministic given (config, seed) and writes a manifest
with content hashes of its inputs and outputs.  Relative --out paths are
resolved under $METALOSS_OUT_ROOT when that variable is set.
"""

import argparse
import hashlib
import json
import os
from pathlib import Path
import sys

import numpy as np

from . import adapt, arm, config, data, losses, metatrain, model


def _fmt(x) -> str:
    return "%.17g" % float(x)


def _git_blob_hash(path) -> str:
    blob = Path(path).read_bytes()
    h = hashlib.sha1()
    h.update(b"blob %d\x00" % len(blob))
    h.update(blob)
    return h.hexdigest()


def _out_dir(raw: str) -> Path:
    root = os.environ.get("METALOSS_OUT_ROOT")
    p = Path(raw)
    if root and not p.is_absolute():
        p = Path(root) / p
    p.mkdir(parents=True, exist_ok=True)
    return p


def _write_manifest(out_dir: Path, command: str, cfg_doc: dict, seeds,
                    inputs, outputs):
    doc = {
        "command": command,
        "seeds": list(seeds),
        "config": cfg_doc,
        "inputs": {str(k): _git_blob_hash(v) for k, v in inputs.items()},
        "outputs": {name: _git_blob_hash(out_dir / name) for name in outputs},
    }
    path = out_dir / f"manifest_{command}.json"
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path


def _write_rows(path: Path, header, rows):
    """Plain CSV with deterministic float formatting and unix newlines."""
    with open(path, "w", newline="") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(
                c if isinstance(c, str) else _fmt(c) for c in row) + "\n")


def _load_cfg(args) -> config.ExperimentConfig:
    if getattr(args, "config", None):
        return config.load_config(args.config)
    if getattr(args, "preset", "sim") == "hardware":
        return config.hardware_style_config()
    return config.default_config()


def _load_splits(cfg, data_path):
    ds = data.read_csv(data_path)
    train, test = data.split_by_frequency(ds, cfg.collect.train_freqs,
                                          cfg.collect.test_freqs)
    if cfg.normalize_inputs:
        mu, sd = data.input_stats(train)
        return data.standardize_dataset(train, mu, sd), \
            data.standardize_dataset(test, mu, sd), (mu, sd)
    return train, test, None


# ---------------------------------------------------------------- gen-data

def cmd_gen_data(args) -> int:
    cfg = _load_cfg(args)
    out = _out_dir(args.out)
    rng = np.random.default_rng(args.seed) if cfg.collect.noise_sigma > 0 else None
    ds = data.collect_sine_dataset(
        cfg.arm.model(), cfg.arm.gains(), cfg.collect.all_freqs(),
        cfg.collect.amplitude, cfg.collect.dt, cfg.collect.duration,
        q_rest=np.asarray(cfg.collect.q_rest, dtype=np.float64),
        noise_sigma=cfg.collect.noise_sigma, rng=rng)
    train, test = data.split_by_frequency(ds, cfg.collect.train_freqs,
                                          cfg.collect.test_freqs)
    data.write_csv(ds, out / "dataset.csv")
    split = {
        "train_freqs": sorted(cfg.collect.train_freqs),
        "test_freqs": sorted(cfg.collect.test_freqs),
        "train_records": len(train),
        "test_records": len(test),
        "runs": len(ds.runs),
        "dataset": "dataset.csv",
    }
    with open(out / "split.json", "w") as fh:
        json.dump(split, fh, indent=2, sort_keys=True)
        fh.write("\n")
    config.save_config(cfg, out / "config.json")
    _write_manifest(out, "gen-data", cfg.to_dict(), [args.seed], {},
                    ["dataset.csv", "split.json", "config.json"])
    print(f"wrote {len(ds.runs)} runs, {len(ds)} records to {out / 'dataset.csv'}")
    return 0


# -------------------------------------------------------------- meta-train

def cmd_meta_train(args) -> int:
    cfg = _load_cfg(args)
    out = _out_dir(args.out)
    train, test, _ = _load_splits(cfg, args.data)
    variants = list(losses.VARIANTS)
    variants.remove("mse")
    if args.variant != "all":
        variants = [args.variant]

    header = "epoch,variant,seed,split,final_mse_after_100_steps"
    outputs = []
    epoch_csv = out / "epoch_eval.csv"
    with open(epoch_csv, "w", newline="") as log:
        log.write(header + "\n")

        def evaluate(epoch, variant, seed, lp):
            for split_name, split_ds in (("train", train), ("test", test)):
                res = metatrain.eval_learned_loss(
                    lp, split_ds, steps=cfg.meta.eval_steps,
                    seeds=cfg.meta.eval_seeds, alpha=cfg.meta.alpha,
                    batch_size=cfg.meta.batch_size,
                    hidden=tuple(cfg.meta.hidden), base_seed=seed)
                log.write(f"{epoch},{variant},{seed},{split_name},"
                          f"{_fmt(res.final_mses.mean())}\n")
            log.flush()

        try:
            for variant in variants:
                for seed in args.seed:
                    mc = cfg.meta.meta_config(variant, seed)

                    def hook(epoch, lp, variant=variant, seed=seed):
                        if epoch % args.eval_every == 0 or epoch == mc.epochs - 1:
                            evaluate(epoch, variant, seed, lp)

                    result = metatrain.meta_train(mc, train, eval_hook=hook)
                    name = f"loss_{variant}_seed{seed}.json"
                    losses.save_loss(result.loss_params, out / name)
                    outputs.append(name)
                    print(f"{variant} seed {seed}: "
                          f"final outer loss {_fmt(result.outer_losses[-1, -1])}, "
                          f"checkpoint {out / name}")
        except metatrain.MetaDivergence as err:
            print(f"meta-training diverged at epoch {err.epoch} "
                  f"batch {err.batch}: {err}", file=sys.stderr)
            print(f"partial logs kept in {epoch_csv}", file=sys.stderr)
            return 1

    outputs.append("epoch_eval.csv")
    _write_manifest(out, "meta-train", cfg.to_dict(), args.seed,
                    {"data": args.data}, outputs)
    return 0


# -------------------------------------------------------------------- eval

def cmd_eval(args) -> int:
    cfg = _load_cfg(args)
    out = _out_dir(args.out)
    train, test, _ = _load_splits(cfg, args.data)
    J = train.joint_count

    entries = [("mse", losses.LossParams("mse", J))]
    for path in args.loss:
        if not Path(path).exists():
            print(f"missing checkpoint: {path}", file=sys.stderr)
            return 1
        entries.append((Path(path).stem, losses.load_loss(path)))

    outputs = []
    final_rows = []
    for label, lp in entries:
        for split_name, split_ds in (("train", train), ("test", test)):
            res = metatrain.eval_learned_loss(
                lp, split_ds, steps=cfg.meta.eval_steps,
                seeds=cfg.meta.eval_seeds, alpha=cfg.meta.alpha,
                batch_size=cfg.meta.batch_size, hidden=tuple(cfg.meta.hidden),
                base_seed=args.seed)
            name = f"curve_{label}_{split_name}.csv"
            rows = [(str(seed), str(step), res.curves[seed, step])
                    for seed in range(res.curves.shape[0])
                    for step in range(res.curves.shape[1])]
            _write_rows(out / name, ["seed", "step", "batch_mse"], rows)
            outputs.append(name)
            for seed in range(res.final_mses.shape[0]):
                final_rows.append((label, lp.variant, split_name, str(seed),
                                   res.final_mses[seed]))
    _write_rows(out / "final_mse.csv",
                ["label", "variant", "split", "seed", "final_mse"], final_rows)
    outputs.append("final_mse.csv")
    _write_manifest(out, "eval", cfg.to_dict(), [args.seed],
                    {"data": args.data}, outputs)
    print(f"wrote {len(outputs)} files to {out}")
    return 0


# ------------------------------------------------------------------ online

def _grid_specs(cfg, loss_files):
    J = cfg.arm.joint_count
    specs = []
    for lr in cfg.adapt.mse_lrs:
        specs.append(adapt.LossSpec(f"mse@{lr:g}",
                                    losses.LossParams("mse", J), lr))
    specs.append(adapt.LossSpec(f"adam_mse@{cfg.adapt.adam_lr:g}",
                                losses.LossParams("mse", J),
                                cfg.adapt.adam_lr, optimizer="adam"))
    for path in loss_files:
        if not Path(path).exists():
            raise FileNotFoundError(f"missing checkpoint: {path}")
        specs.append(adapt.LossSpec(Path(path).stem, losses.load_loss(path),
                                    cfg.adapt.learned_lr))
    return specs


def cmd_online(args) -> int:
    cfg = _load_cfg(args)
    out = _out_dir(args.out)
    train, test, stats = _load_splits(cfg, args.data)
    specs = _grid_specs(cfg, args.loss)
    hidden = tuple(cfg.meta.hidden)

    frozen = adapt.pretrain_frozen_baseline(
        train, steps=cfg.adapt.pretrain_steps, batch_size=cfg.meta.batch_size,
        hidden=hidden, seed=args.seed)

    if args.segmented:
        segments = cfg.adapt.segments(cfg.collect.dt)
        transform = None
        if stats is not None:
            mu, sd = stats
            transform = lambda s: adapt.standardize_stream(s, mu, sd)
        cells = adapt.evaluate_losses_on_task(
            specs, segments, cfg.arm.model(), cfg.arm.gains(),
            cfg.adapt.seeds, cfg.adapt.trials, hidden=hidden,
            batch=cfg.adapt.batch, noise_sigma=cfg.adapt.noise_sigma,
            frozen_theta=frozen, transform=transform)
    else:
        named = [(f"f={run.frequency:g}",
                  adapt.Stream(run.q, run.dq, run.ddq_next, run.tau))
                 for run in test.runs]
        cells = adapt.adapt_over_streams(specs, named, cfg.adapt.seeds,
                                         hidden=hidden, batch=cfg.adapt.batch,
                                         frozen_theta=frozen)

    rows = []
    for cell in cells:
        for seg in cell.report.segments:
            for step, mse in enumerate(seg.mses):
                rows.append((seg.name, cell.spec.label, _fmt(cell.spec.lr),
                             str(cell.seed), str(cell.trial), str(step), mse))
    _write_rows(out / "online.csv",
                ["segment", "loss", "lr", "seed", "trial", "step", "batch_mse"],
                rows)

    segment_names = [seg.name for seg in cells[0].report.segments]
    labels = []
    for cell in cells:
        if cell.spec.label not in labels:
            labels.append(cell.spec.label)
    summary = []
    for seg_name in segment_names:
        for label in labels:
            vals = np.concatenate([
                cell.report.segment(seg_name).mses
                for cell in cells if cell.spec.label == label])
            lr = next(c.spec.lr for c in cells if c.spec.label == label)
            summary.append((seg_name, label, _fmt(lr), vals.mean(),
                            vals.std()))
    _write_rows(out / "summary.csv",
                ["segment", "loss", "lr", "mean_mse", "std_mse"], summary)

    inputs = {"data": args.data}
    for path in args.loss:
        inputs[path] = path
    _write_manifest(out, "online", cfg.to_dict(), [args.seed], inputs,
                    ["online.csv", "summary.csv"])
    print(f"grid of {len(cells)} cells -> {out / 'online.csv'}")
    return 0


# ------------------------------------------------------------------ report

def _probe_states(args, J):
    if args.data:
        ds = data.read_csv(args.data)
        records = [rec for run in ds.runs for rec in run]
        idx = np.linspace(0, len(records) - 1, min(500, len(records)))
        return [(records[i].q, records[i].dq) for i in idx.astype(int)]
    rng = np.random.default_rng(0)
    return [(rng.uniform(-np.pi, np.pi, J), rng.uniform(-2.0, 2.0, J))
            for _ in range(256)]


def cmd_report(args) -> int:
    run_dir = Path(args.run)
    out = _out_dir(args.out or args.run)
    produced, skipped = [], []

    checkpoints = sorted(run_dir.glob("loss_*.json"))
    for path in checkpoints:
        lp = losses.load_loss(path)
        if lp.variant == "structured":
            rows = [(str(r["joint"]), r["phi"]) for r in losses.export_phi(lp)]
            name = f"phi_{path.stem}.csv"
            _write_rows(out / name, ["joint", "phi"], rows)
            produced.append(name)
        elif lp.variant == "state_dependent":
            states = _probe_states(args, lp.joint_count)
            rows_d = losses.export_phi(lp, states)
            header = list(rows_d[0].keys())
            rows = [tuple(r[k] for k in header) for r in rows_d]
            name = f"phi_{path.stem}.csv"
            _write_rows(out / name, header, rows)
            produced.append(name)
        else:
            skipped.append(f"{path.name} ({lp.variant}: no weight export)")

    summary = {}
    for name in ("epoch_eval.csv", "final_mse.csv", "summary.csv"):
        src = run_dir / name
        if not src.exists():
            skipped.append(name)
            continue
        lines = src.read_text().splitlines()
        summary[name] = {"header": lines[0], "rows": lines[1:]}
    if not produced and not summary:
        print(f"nothing to report in {run_dir}", file=sys.stderr)
        return 1
    with open(out / "metrics_summary.json", "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")
    produced.append("metrics_summary.json")

    cfg_path = run_dir / "config.json"
    cfg_doc = json.loads(cfg_path.read_text()) if cfg_path.exists() else {}
    inputs = {p.name: p for p in checkpoints}
    for name in summary:
        inputs[name] = run_dir / name
    _write_manifest(out, "report", cfg_doc, [], inputs, produced)
    for item in skipped:
        print(f"skipping: {item}")
    print(f"report files: {', '.join(produced)}")
    return 0


# -------------------------------------------------------------------- main

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="metaloss",
                                description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="simulate the arm and write the dataset")
    g.add_argument("--config", help="experiment config JSON")
    g.add_argument("--preset", choices=["sim", "hardware"], default="sim",
                   help="built-in config when --config is not given")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", default="data")
    g.set_defaults(func=cmd_gen_data)

    m = sub.add_parser("meta-train", help="learn loss parameters")
    m.add_argument("--config", help="experiment config JSON")
    m.add_argument("--data", required=True, help="dataset CSV from gen-data")
    m.add_argument("--variant", default="all",
                   choices=["structured", "state_dependent", "mlp", "all"])
    m.add_argument("--seed", type=int, nargs="+", default=[0])
    m.add_argument("--eval-every", type=int, default=10)
    m.add_argument("--out", default="runs")
    m.set_defaults(func=cmd_meta_train)

    e = sub.add_parser("eval", help="100-step training curves per loss")
    e.add_argument("--config", help="experiment config JSON")
    e.add_argument("--data", required=True)
    e.add_argument("--loss", nargs="*", default=[],
                   help="loss checkpoint files from meta-train")
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--out", default="runs")
    e.set_defaults(func=cmd_eval)

    o = sub.add_parser("online", help="streaming adaptation grid")
    o.add_argument("--config", help="experiment config JSON")
    o.add_argument("--data", required=True)
    o.add_argument("--loss", nargs="*", default=[])
    o.add_argument("--segmented", action="store_true",
                   help="pick-and-place task instead of per-run streams")
    o.add_argument("--seed", type=int, default=0)
    o.add_argument("--out", default="runs")
    o.set_defaults(func=cmd_online)

    r = sub.add_parser("report", help="export loss weights and metrics")
    r.add_argument("--run", required=True, help="directory with prior outputs")
    r.add_argument("--data", help="dataset CSV for probe states")
    r.add_argument("--out", default=None)
    r.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except config.ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return 2
    except (data.DataFormatError, arm.SimulationDiverged,
            metatrain.MetaDivergence, adapt.AdaptationDiverged,
            FileNotFoundError, OSError, ValueError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
