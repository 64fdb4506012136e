"""Command-line entry point: ``vonebio <subcommand> ...``.

Every subcommand writes ``manifest.json`` next to its outputs (or
``<file>.manifest.json`` for single-file outputs) recording the argv,
resolved configuration, seeds, input checksums and package version.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import math
import platform
import shutil
import sys
from dataclasses import asdict
from importlib import metadata
from pathlib import Path

import numpy as np

log = logging.getLogger("vonebio")


class CommandError(RuntimeError):
    pass


# --- provenance ---------------------------------------------------------

def _version() -> str:
    try:
        return metadata.version("artifact")
    except metadata.PackageNotFoundError:
        from . import __version__

        return __version__


def checksum_path(path) -> str:
    """sha256 of a file, or of a directory's sorted relative paths and file contents."""
    p = Path(path)
    h = hashlib.sha256()
    if p.is_file():
        h.update(p.read_bytes())
    elif p.is_dir():
        for f in sorted(q for q in p.rglob("*") if q.is_file() and not q.name.endswith("manifest.json")):
            h.update(f.relative_to(p).as_posix().encode())
            h.update(hashlib.sha256(f.read_bytes()).digest())
    else:
        raise FileNotFoundError(p)
    return h.hexdigest()


def write_manifest(target, command: str, argv, config: dict, inputs: dict | None = None, outputs=None) -> Path:
    target = Path(target)
    path = target / "manifest.json" if target.is_dir() else target.with_name(target.name + ".manifest.json")
    import torch

    manifest = {
        "command": command,
        "argv": list(argv),
        "config": config,
        "inputs": {k: {"path": str(v), "sha256": checksum_path(v)} for k, v in (inputs or {}).items()},
        "outputs": [str(o) for o in (outputs or [])],
        "software": {
            "vonebio": _version(),
            "python": platform.python_version(),
            "numpy": np.__version__,
            "torch": torch.__version__,
        },
    }
    path.write_text(json.dumps(manifest, indent=2, default=str) + "\n")
    return path


def _seeds(text: str) -> list[int]:
    try:
        return [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad seed list {text!r}") from None


def _splits(text: str) -> list[str]:
    return [s for s in text.split(",") if s]


# --- subcommands --------------------------------------------------------

def cmd_sample(args, argv):
    from .gfb import build_filter_bank
    from .sampling import Regime, SamplerConfig, load_distribution_table, sample

    table = load_distribution_table(args.table) if args.regime == "bio" else None
    cfg = SamplerConfig(Regime(args.regime), args.n_simple, args.n_complex, args.seed, table, args.sf_scale)
    bank = build_filter_bank(sample(cfg), ppd=args.ppd, stride=args.stride, k=args.kernel_size)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    bank.save(out)
    config = {
        "regime": args.regime, "seed": args.seed, "n_simple": args.n_simple, "n_complex": args.n_complex,
        "sf_scale": args.sf_scale, "ppd": args.ppd, "stride": args.stride, "kernel_size": args.kernel_size,
        "table_sha256": table.checksum if table else None, "bank_checksum": bank.checksum(),
        "aliased_channels": len(bank.aliased_channels),
    }
    write_manifest(out, "sample", argv, config, {"table": args.table} if args.table else {}, [out])
    print(f"wrote {out} ({bank.kernels.shape[0]} kernels, {bank.num_channels} channels)")


def cmd_dump_kernels(args, argv):
    from .gfb import FilterBank, dump_kernels_pgm

    bank = FilterBank.load(args.bank)
    rows = None if args.rows is None else [int(r) for r in args.rows.split(",")]
    written = dump_kernels_pgm(bank, args.out, rows)
    write_manifest(Path(args.out), "dump-kernels", argv, {"rows": rows}, {"bank": args.bank}, [])
    print(f"wrote {len(written)} kernels to {args.out}")


def _load_images(data, split, limit=None, seed=0):
    from .data import load_arrays, load_directory_dataset

    idx = load_directory_dataset(data, _splits(split))
    xs, ys = zip(*(load_arrays(idx, s) for s in _splits(split)))
    x, y = np.concatenate(xs), np.concatenate(ys)
    if limit is not None and limit < len(x):
        pick = np.sort(np.random.default_rng(seed).choice(len(x), size=limit, replace=False))
        x, y = x[pick], y[pick]
    return idx, x, y


def cmd_respond(args, argv):
    from .gfb import FilterBank
    from .vone_block import normalize, vone_forward

    bank = FilterBank.load(args.bank)
    idx, x, y = _load_images(args.images, args.split, args.limit, args.seed)
    acts = vone_forward(bank, normalize(x)).numpy().astype(np.float32)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    np.savez(out, activations=acts, labels=y, cell_type=np.array([int(d.cell_type) for d in bank.descriptors]))
    write_manifest(out, "respond", argv, {"split": args.split, "limit": args.limit, "seed": args.seed,
                                          "shape": list(acts.shape)}, {"bank": args.bank, "images": args.images}, [out])
    print(f"wrote {out} {acts.shape}")


def _train_one(bank, data_root, backend_cfg, train_cfg, out, argv, inputs, meta):
    from .backend import ArrayDataset, save_checkpoint, train
    from .data import load_arrays, load_directory_dataset

    idx = load_directory_dataset(data_root, ["train", "val"])
    tx, ty = load_arrays(idx, "train")
    vx, vy = load_arrays(idx, "val")
    backend_cfg.num_classes = idx.num_classes
    backend_cfg.in_channels = bank.num_channels

    def progress(row):
        print(f"[{meta.get('name', '')} seed {train_cfg.seed}] epoch {row['epoch']} "
              f"train_loss {row['train_loss']:.4f} val_loss {row['val_loss']:.4f} "
              f"val_acc {row['val_acc']:.3f} lr {row['lr']:g}", flush=True)

    state = train(bank, backend_cfg, train_cfg, ArrayDataset(tx, ty, vx, vy), progress=progress)
    out = save_checkpoint(state, backend_cfg, train_cfg, out)
    bank.save(out / "bank.bin")
    (out / "meta.json").write_text(json.dumps({**meta, "classes": idx.class_names,
                                               "dataset_checksum": idx.checksum}, indent=2) + "\n")
    write_manifest(out, "train", argv, {"backend": asdict(backend_cfg), "train": asdict(train_cfg), **meta},
                   inputs, [out / "checkpoint.pt", out / "metrics.csv", out / "bank.bin"])
    return state


def _bank_regime(bank_path) -> str:
    """Regime recorded in the bank's manifest by ``sample``, else ``custom``."""
    m = Path(str(bank_path) + ".manifest.json")
    if m.exists():
        return json.loads(m.read_text()).get("config", {}).get("regime", "custom")
    return "custom"


def cmd_train(args, argv):
    from .backend import BackendConfig, TrainConfig
    from .gfb import FilterBank, build_filter_bank
    from .sampling import Regime, SamplerConfig, load_distribution_table, sample

    cfg = json.loads(Path(args.config).read_text()) if args.config else {}
    seeds = args.seeds or [cfg.get("train", {}).get("seed", 0)]
    if args.bank is None and args.regime is None:
        raise CommandError("give --bank or --regime")
    multi = len(seeds) > 1
    out_root = Path(args.out)
    for seed in seeds:
        tcfg = {**cfg.get("train", {}), "seed": seed}
        if args.epochs is not None:
            tcfg["epochs"] = args.epochs
        train_cfg = TrainConfig.from_dict(tcfg)
        backend_cfg = BackendConfig.from_dict(cfg.get("backend", {}))
        if args.bank is not None:
            bank = FilterBank.load(args.bank)
            inputs = {"bank": args.bank, "data": args.data}
            regime = args.regime or _bank_regime(args.bank)
        else:
            table = load_distribution_table(args.table) if args.regime == "bio" else None
            scfg = SamplerConfig(Regime(args.regime), seed=seed, table=table)
            bank = build_filter_bank(sample(scfg))
            inputs = {"data": args.data}
            regime = args.regime
        out = out_root / f"seed_{seed}" if multi else out_root
        name = args.name or regime
        _train_one(bank, args.data, backend_cfg, train_cfg, out, argv, inputs,
                   {"name": name, "regime": regime, "seed": seed})
        print(f"wrote checkpoint {out}")


def _checkpoint_dirs(paths) -> list[Path]:
    found = []
    for p in map(Path, paths):
        if (p / "checkpoint.pt").exists():
            found.append(p)
        else:
            subs = sorted(q.parent for q in p.glob("*/checkpoint.pt"))
            if not subs:
                raise CommandError(f"no checkpoint under {p}")
            found.extend(subs)
    return found


def _load_model(ckpt: Path):
    from .backend import VOneNet, load_checkpoint
    from .gfb import FilterBank

    state, backend_cfg, train_cfg = load_checkpoint(ckpt)
    bank = FilterBank.load(ckpt / "bank.bin")
    if bank.checksum() != state.bank_checksum:
        raise CommandError(f"bank in {ckpt} does not match the checkpoint")
    meta = json.loads((ckpt / "meta.json").read_text()) if (ckpt / "meta.json").exists() else {}
    model = VOneNet(bank, state.model)
    model.eval()
    return model, bank, state, meta


def cmd_eval(args, argv):
    from .corruptions import Kind, all_specs, evaluate_precorrupted, evaluate_robustness, load_constants, write_results_csv

    kinds = None if args.corruptions in ("all", "") else args.corruptions.split(",")
    constants = load_constants(args.constants)
    results = []
    ckpts = _checkpoint_dirs(args.ckpt)
    _, x, y = _load_images(args.data, args.split, args.limit, args.seed)
    for ck in ckpts:
        model, bank, state, meta = _load_model(ck)
        name, seed = meta.get("name", ck.name), int(meta.get("seed", 0))
        if args.precorrupted:
            res = evaluate_precorrupted(model, args.precorrupted, meta["classes"], kinds)
            res.clean = evaluate_robustness(model, x, y, specs=[]).clean
        else:
            specs = all_specs([Kind(k) for k in kinds] if kinds else None)
            res = evaluate_robustness(model, x, y, specs, seed=args.seed, constants=constants)
        results.append((name, seed, res))
        print(f"{name} seed {seed}: clean {res.clean:.3f} " +
              " ".join(f"{k.value if hasattr(k, 'value') else k}={v:.3f}" for k, v in res.kind_means().items()))
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_results_csv(out, results)
    write_manifest(out, "eval", argv, {"corruptions": args.corruptions, "seed": args.seed, "split": args.split,
                                       "constants": constants},
                   {"data": args.data, **{f"ckpt{i}": c / "checkpoint.pt" for i, c in enumerate(ckpts)}}, [out])
    print(f"wrote {out}")


def cmd_corrupt(args, argv):
    from .corruptions import CorruptionSpec, corrupt, image_rng, load_constants
    from .data import EXTENSIONS, decode_image, save_image

    spec = CorruptionSpec(args.kind, args.severity)
    constants = load_constants(args.constants)
    src, dst = Path(args.inp), Path(args.out)
    files = sorted(p for p in src.rglob("*") if p.suffix.lower() in EXTENSIONS and p.is_file())
    if not files:
        raise CommandError(f"no images under {src}")
    for i, f in enumerate(files):
        target = (dst / f.relative_to(src)).with_suffix(".png")
        target.parent.mkdir(parents=True, exist_ok=True)
        save_image(corrupt(decode_image(f), spec, image_rng(args.seed, spec, i), constants), target)
    write_manifest(dst, "corrupt", argv, {"kind": spec.kind.value, "severity": spec.severity, "seed": args.seed,
                                          "params": spec.resolve(constants) if spec.severity else {}},
                   {"in": src}, [])
    print(f"wrote {len(files)} images to {dst}")


def collect_variant(ckpt: Path, x: np.ndarray, batch_size: int = 50):
    """Response stats and mean |bottleneck weight| of one trained checkpoint."""
    import torch

    from .analysis import ResponseAccumulator, Variant, mean_abs_downstream_weights
    from .vone_block import normalize

    model, bank, state, meta = _load_model(ckpt)
    acc = ResponseAccumulator()
    with torch.no_grad():
        for i in range(0, len(x), batch_size):
            acc.update(model.vone(normalize(torch.as_tensor(x[i:i + batch_size]))).numpy())
    w = mean_abs_downstream_weights(state.model.bottleneck.weight.detach().numpy())
    return Variant(list(bank.descriptors), acc.finalize(), w), meta


def cmd_analyze(args, argv):
    from .analysis import (STATS_FIELDS, average_tables, bin_by_rf, compare_variants, write_bins_csv,
                           write_report_tables)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _, x, _ = _load_images(args.images, args.split, args.n_images, args.seed)
    groups: dict[str, list] = {}
    rows = []
    for ck in _checkpoint_dirs(args.ckpt):
        variant, meta = collect_variant(ck, x)
        if args.bank and len(args.ckpt) == 1:
            from .gfb import FilterBank

            if FilterBank.load(args.bank).checksum() != FilterBank.load(ck / "bank.bin").checksum():
                raise CommandError(f"--bank does not match the bank stored in {ck}")
        regime = meta.get("regime", "custom")
        groups.setdefault(regime, []).append(variant)
        for i, d in enumerate(variant.descriptors):
            p = d.params
            rows.append([regime, meta.get("seed", 0), i, d.cell_type.name.lower(), p.theta, p.sf, p.nx, p.ny,
                         variant.stats.mean_activation[i], variant.stats.sparseness[i], variant.mean_abs_weight[i]])
    with open(out / "stats.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["variant", "seed"] + STATS_FIELDS)
        w.writerows(rows)

    outputs = [out / "stats.csv"]
    if "bio" in groups and "uniform" in groups:
        report = compare_variants(groups["bio"], groups["uniform"])
        outputs += write_report_tables(out, report)
        for name, c in report.correlations.items():
            print(f"{name}: r={c.r:.3f} p={c.p:.3g} n={c.n} ({c.inclusion_rule})")
    else:
        tables = {k: average_tables([bin_by_rf(v.descriptors, v.stats, v.mean_abs_weight) for v in vs])
                  for k, vs in groups.items()}
        write_bins_csv(out / "bins_rf.csv", tables)
        outputs.append(out / "bins_rf.csv")
        log.warning("cross-variant tables need both a bio and a uniform checkpoint; wrote RF bins only")
    if args.results:
        shutil.copyfile(args.results, out / "results.csv")
        outputs.append(out / "results.csv")
    write_manifest(out, "analyze", argv, {"split": args.split, "n_images": len(x), "seed": args.seed},
                   {"images": args.images, **{f"ckpt{i}": c / "checkpoint.pt" for i, c in enumerate(_checkpoint_dirs(args.ckpt))}},
                   outputs)
    print(f"wrote analysis to {out}")


def _sem(v):
    v = np.asarray(v, dtype=float)
    return float(v.std(ddof=1) / math.sqrt(len(v))) if len(v) > 1 else float("nan")


def build_summary(results_rows: list[dict], correlations: dict) -> dict:
    """Mean and SEM over seeds of top-1 per model and kind, plus the correlations."""
    from .corruptions import NOISE_KINDS

    acc: dict = {}
    for r in results_rows:
        # per-kind mean over severities first, per seed
        acc.setdefault(r["model"], {}).setdefault(r["kind"], {}).setdefault(r["seed"], []).append(r["top1"])
    models = {}
    for model, kinds in acc.items():
        models[model] = {}
        for kind, by_seed in kinds.items():
            per_seed = [float(np.mean(v)) for v in by_seed.values()]
            models[model][kind] = {"mean": float(np.mean(per_seed)), "sem": _sem(per_seed), "n_seeds": len(per_seed)}
    summary = {"accuracy": models, "correlations": {k: c._asdict() for k, c in correlations.items()}}
    bio = models.get("bio", {})
    uni = models.get("uniform", {})
    gap = {}
    for k in NOISE_KINDS:
        if k.value in bio and k.value in uni:
            gap[k.value] = bio[k.value]["mean"] - uni[k.value]["mean"]
    if gap:
        gap["mean_noise"] = float(np.mean(list(gap.values())))
        summary["bio_minus_uniform_noise_top1"] = gap
    return summary


def cmd_report(args, argv):
    from .analysis import read_correlations_csv
    from .corruptions import read_results_csv

    a = Path(args.analysis)
    results_path = Path(args.results) if args.results else a / "results.csv"
    rows = read_results_csv(results_path) if results_path.exists() else []
    corr_path = a / "correlations.csv"
    corr = read_correlations_csv(corr_path) if corr_path.exists() else {}
    summary = build_summary(rows, corr)
    out = Path(args.out) if args.out else a / "summary.json"
    out.write_text(json.dumps(summary, indent=2) + "\n")
    inputs = {"analysis": a}
    if results_path.exists():
        inputs["results"] = results_path
    write_manifest(out, "report", argv, {}, inputs, [out])
    for model, kinds in summary["accuracy"].items():
        clean = kinds.get("clean", {}).get("mean", float("nan"))
        print(f"{model}: clean {clean:.3f}")
    for name, c in summary["correlations"].items():
        print(f"{name}: r={c['r']:.3f} p={c['p']:.3g} n={c['n']}")
    if "bio_minus_uniform_noise_top1" in summary:
        print(f"bio - uniform noise top-1: {summary['bio_minus_uniform_noise_top1']['mean_noise']:+.4f}")
    print(f"wrote {out}")


def cmd_synth_data(args, argv):
    from .data import make_synthetic_dataset

    idx = make_synthetic_dataset(args.out, args.n_classes, args.n_per_class, args.seed, args.n_val_per_class)
    write_manifest(Path(args.out), "synth-data", argv,
                   {"n_classes": args.n_classes, "n_per_class": args.n_per_class,
                    "n_val_per_class": args.n_val_per_class, "seed": args.seed, "dataset_checksum": idx.checksum})
    print(f"wrote {len(idx)} images to {args.out}")


# --- parser -------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="vonebio", description="V1 front-end sampling, training and analysis")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("sample", help="sample RF parameters and write a filter bank")
    s.add_argument("--regime", choices=["bio", "uniform"], required=True)
    s.add_argument("--seed", type=int, required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--table", help="distribution table (bio regime); default: shipped table")
    s.add_argument("--n-simple", type=int, default=256)
    s.add_argument("--n-complex", type=int, default=256)
    s.add_argument("--sf-scale", choices=["log", "linear"], default="log")
    s.add_argument("--ppd", type=float, default=32.0)
    s.add_argument("--stride", type=int, default=2)
    s.add_argument("--kernel-size", type=int, default=25)
    s.set_defaults(func=cmd_sample)

    s = sub.add_parser("dump-kernels", help="write bank kernels as PGM images")
    s.add_argument("--bank", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--rows", help="comma-separated kernel rows (default: all)")
    s.set_defaults(func=cmd_dump_kernels)

    s = sub.add_parser("respond", help="V1 activations for a directory of images")
    s.add_argument("--bank", required=True)
    s.add_argument("--images", required=True)
    s.add_argument("--split", default="val")
    s.add_argument("--limit", type=int)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_respond)

    s = sub.add_parser("train", help="train the backend on a frozen bank")
    s.add_argument("--bank")
    s.add_argument("--regime", choices=["bio", "uniform", "uni"],
                   help="sample a fresh bank per seed instead of --bank")
    s.add_argument("--table")
    s.add_argument("--data", required=True)
    s.add_argument("--config", help="JSON with optional 'train' and 'backend' sections")
    s.add_argument("--seeds", type=_seeds, help="comma-separated; several seeds give seed_<n>/ subdirectories")
    s.add_argument("--epochs", type=int)
    s.add_argument("--name")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", help="clean and corrupted top-1 accuracy")
    s.add_argument("--ckpt", action="append", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--split", default="val")
    s.add_argument("--limit", type=int)
    s.add_argument("--corruptions", default="all")
    s.add_argument("--constants")
    s.add_argument("--precorrupted", help="directory in root/<kind>/<severity>/<class>/ layout")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("corrupt", help="write a corrupted copy of an image tree")
    s.add_argument("--in", dest="inp", required=True)
    s.add_argument("--kind", required=True)
    s.add_argument("--severity", type=int, required=True)
    s.add_argument("--constants")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_corrupt)

    s = sub.add_parser("analyze", help="response statistics, bins, impact and correlations")
    s.add_argument("--ckpt", action="append", required=True)
    s.add_argument("--bank", help="optional check that the checkpoint uses this bank")
    s.add_argument("--images", required=True)
    s.add_argument("--split", default="val")
    s.add_argument("--n-images", type=int, default=1000)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--results", help="eval CSV to copy alongside for the report")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_analyze)

    s = sub.add_parser("report", help="collate accuracies and correlations into one summary")
    s.add_argument("--analysis", required=True)
    s.add_argument("--results")
    s.add_argument("--out")
    s.set_defaults(func=cmd_report)

    s = sub.add_parser("synth-data", help="render the synthetic grating dataset")
    s.add_argument("--out", required=True)
    s.add_argument("--n-classes", type=int, default=10)
    s.add_argument("--n-per-class", type=int, default=100)
    s.add_argument("--n-val-per-class", type=int, default=20)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_synth_data)
    return p


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if getattr(args, "regime", None) == "uni":
        args.regime = "uniform"
    try:
        args.func(args, argv)
    except Exception as e:  # noqa: BLE001 - top-level boundary
        err = {"error": type(e).__name__, "message": str(e), "command": args.command}
        print(json.dumps(err), file=sys.stderr)
        if args.verbose:
            raise
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
