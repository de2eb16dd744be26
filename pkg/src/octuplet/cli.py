"""Command-line interface.

Subcommands: ``finetune``, ``evaluate``, ``ablate``, ``pairs``, ``degrade`` and
``report``, plus ``synth`` and ``pretrain`` for building toy inputs.

Every flag can also come from ``--config FILE``, a flat ``key = value`` file
whose keys are the flag names (dashes or underscores). Flags given on the
command line win.

Environment:
  OCTUPLET_CACHE_DIR   where pre-trained toy backbones are cached
                       (default ``~/.cache/octuplet``)
  OCTUPLET_WORKERS     number of torch threads (default: torch's choice)
  OCTUPLET_DISABLE_NUMBA  use the pure numpy kernels
"""
import configparser
import copy
import csv
import hashlib
import json
import logging
import os
import platform
import sys
from datetime import datetime, timezone
from pathlib import Path

import click
import numpy as np
import torch

from . import __version__
from ._accel import backend_name
from .batching import scan_dataset
from .degrade import EVAL_RESOLUTIONS, KERNEL_DESCRIPTION, ResolutionSampler, degrade_pixels
from .errors import ConfigError, DataError, OctupletError
from .evaluation import (EmbeddingCache, VerificationReport, evaluate_cross_resolution,
                         evaluate_same_resolution, generate_pairs, read_lfw_pairs,
                         read_protocol, write_protocol)
from .images import DirectoryImageStore, load_image, save_png
from .octuplet import ABLATION_MASKS, TERMS, TermMask
from .synthetic import make_dataset, write_dataset
from .training import (PRESETS, FineTuneConfig, fine_tune, load_checkpoint, pretrain_classifier,
                       seed_streams, toy_backbone)

log = logging.getLogger("octuplet")

MARGIN_GRID = (1.0, 5.0, 25.0, 100.0, 500.0)
METRIC_GRID = (("euclidean", False), ("euclidean", True), ("squared-euclidean", True),
               ("squared-euclidean", False), ("cosine", True))


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------

def _int_list(ctx, param, value):
    if value is None or isinstance(value, (list, tuple)):
        return value
    try:
        return tuple(int(v) for v in str(value).replace(" ", "").split(",") if v)
    except ValueError:
        raise click.BadParameter(f"expected comma-separated integers, got {value!r}") from None


def _float_list(ctx, param, value):
    if value is None or isinstance(value, (list, tuple)):
        return value
    try:
        return tuple(float(v) for v in str(value).replace(" ", "").split(",") if v)
    except ValueError:
        raise click.BadParameter(f"expected comma-separated numbers, got {value!r}") from None


def _load_config(ctx, param, value):
    if value is None:
        return None
    parser = configparser.ConfigParser()
    try:
        text = Path(value).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config file {value}: {exc}") from exc
    try:
        parser.read_string("[run]\n" + text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config file {value}: {exc}") from exc
    names = {p.name for p in ctx.command.params}
    flat = {}
    for section in parser.sections():
        for key, val in parser.items(section):
            key = key.strip().replace("-", "_")
            if key not in names:
                raise ConfigError(f"unknown key {key!r} in config file {value}")
            flat[key] = val
    ctx.default_map = {**(ctx.default_map or {}), **flat}
    return value


def config_option(f):
    return click.option("--config", type=click.Path(dir_okay=False), callback=_load_config,
                        is_eager=True, expose_value=False,
                        help="Flat key = value file; command-line flags override it.")(f)


def _environment():
    import numba
    import PIL
    import scipy
    return {"python": sys.version.split()[0], "platform": platform.platform(),
            "numpy": np.__version__, "scipy": scipy.__version__, "torch": torch.__version__,
            "numba": numba.__version__, "pillow": PIL.__version__, "octuplet": __version__,
            "kernel_backend": backend_name(), "torch_threads": torch.get_num_threads(),
            "degradation_kernel": KERNEL_DESCRIPTION}


def write_manifest(out_dir, command, config, seed):
    """``manifest.json``: command, full run configuration, seed and environment."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    payload = {"command": command, "argv": sys.argv[1:], "config": config, "seed": seed,
               "seeds": seed_streams(seed), "environment": _environment(),
               "created": datetime.now(timezone.utc).isoformat(timespec="seconds")}
    (out / "manifest.json").write_text(json.dumps(payload, indent=2, sort_keys=True, default=str) + "\n")
    return payload


def _jsonable(params):
    return {k: (list(v) if isinstance(v, tuple) else v) for k, v in sorted(params.items())}


def _require_dir(path, what):
    if path is None or not Path(path).is_dir():
        raise ConfigError(f"{what} {path} does not exist or is not a directory")
    return Path(path)


def _require_file(path, what):
    if path is None or not Path(path).is_file():
        raise ConfigError(f"{what} {path} does not exist")
    return Path(path)


def cache_dir():
    return Path(os.environ.get("OCTUPLET_CACHE_DIR", Path.home() / ".cache" / "octuplet"))


def _apply_workers():
    n = os.environ.get("OCTUPLET_WORKERS")
    if n:
        try:
            torch.set_num_threads(max(1, int(n)))
        except ValueError:
            raise ConfigError(f"OCTUPLET_WORKERS must be an integer, got {n!r}") from None


def _load_protocol(path):
    path = _require_file(path, "protocol")
    with open(path) as fh:
        head = fh.readline().split()
    if head[:3] == ["ref1", "ref2", "genuine"]:
        return read_protocol(path)
    return read_lfw_pairs(path)


def _toy_backbone(pool, store, dim, width, epochs, lr, seed):
    """Pre-train (or fetch from the cache) a toy backbone on ``pool``."""
    key = hashlib.sha256(json.dumps(
        {"refs": sorted(r for refs in pool.images.values() for r in refs),
         "dim": dim, "width": width, "epochs": epochs, "lr": lr, "seed": seed},
        sort_keys=True).encode()).hexdigest()[:16]
    path = cache_dir() / f"toy-{key}.pt"
    if path.is_file():
        log.info("using cached toy backbone %s", path)
        return load_checkpoint(path)[0]
    model = toy_backbone(dim, seed=seed, width=width, n_classes=len(pool.identities))
    state = torch.random.get_rng_state()
    torch.manual_seed(seed)
    try:
        pretrain_classifier(model, pool, store, epochs=epochs, lr=lr, seed=seed)
    finally:
        torch.random.set_rng_state(state)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save({"state_dict": model.state_dict(), "arch": model.arch()}, path)
    return model


def _write_report(report, out_dir, stem, roc, plots):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / f"{stem}.json").write_text(report.to_json())
    (out / f"{stem}.csv").write_text(report.to_csv())
    if roc:
        for row in report.rows:
            (out / f"{stem}_roc_{row['resolution']}.csv").write_text(report.roc_csv(row["resolution"]))
    if plots:
        render_plots(out / f"{stem}.json", out)


def render_plots(report_json, out_dir):
    """Accuracy-vs-resolution bars and ROC curves, read back from a written report."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    try:
        data = json.loads(Path(report_json).read_text())
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot read report {report_json}: {exc}") from exc
    report = VerificationReport.from_dict(data)
    stem = Path(report_json).stem
    res = [r["resolution"] for r in report.rows]
    acc = [100 * r["accuracy"] for r in report.rows]
    fig, ax = plt.subplots(figsize=(5, 3.2))
    ax.bar([str(r) for r in res], acc, color="#4a7ab5")
    ax.set_xlabel("resolution [px]")
    ax.set_ylabel("accuracy [%]")
    ax.set_ylim(max(0, min(acc) - 10), 100)
    ax.set_title(f"{report.mode}-resolution verification")
    fig.tight_layout()
    fig.savefig(Path(out_dir) / f"{stem}_accuracy.png", dpi=120)
    plt.close(fig)

    fig, ax = plt.subplots(figsize=(4.5, 4))
    for row in report.rows:
        if row.get("roc"):
            far, tar = np.array(row["roc"]).T
            ax.plot(far, tar, label=f"{row['resolution']} px")
    ax.set_xscale("symlog", linthresh=1e-3)
    ax.set_xlabel("FAR")
    ax.set_ylabel("TAR")
    ax.legend(loc="lower right", fontsize=8)
    fig.tight_layout()
    fig.savefig(Path(out_dir) / f"{stem}_roc.png", dpi=120)
    plt.close(fig)


def _finetune_config(p, **overrides):
    kw = dict(preset=p["preset"], lr=p["lr"], epochs=p["epochs"], batch_size=p["batch_size"],
              margin=p["margin"], metric=p["metric"], normalize=p["normalize"],
              mask=p["term_mask"], resolutions=p["train_resolutions"], seed=p["seed"],
              val_per_epoch=p["val_per_epoch"])
    if p.get("decay_epochs") is not None:
        kw["decay_epochs"] = p["decay_epochs"]
    kw.update(overrides)
    return FineTuneConfig(**kw)


def _model_for(p, pool, store):
    if p.get("checkpoint"):
        return load_checkpoint(_require_file(p["checkpoint"], "checkpoint"))[0]
    if p.get("toy_backbone"):
        return _toy_backbone(pool, store, p["dim"], p["width"], p["pretrain_epochs"],
                             p["pretrain_lr"], p["seed"])
    raise ConfigError("give --checkpoint or --toy-backbone")


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

@click.group()
@click.version_option(__version__, prog_name="octuplet")
@click.option("-v", "--verbose", count=True, help="-v for progress, -vv for debug output.")
def cli(verbose):
    """Octuplet-loss fine-tuning and cross-resolution face verification."""
    level = logging.WARNING - 10 * min(verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    _apply_workers()


def train_options(f):
    opts = [
        click.option("--data", type=click.Path(), help="Training images, one directory per identity."),
        click.option("--manifest", type=click.Path(), help="Optional TSV identity<TAB>relpath index."),
        click.option("--checkpoint", type=click.Path(), help="Pre-trained checkpoint to start from."),
        click.option("--toy-backbone", is_flag=True, help="Pre-train a toy backbone on --data first."),
        click.option("--dim", type=int, default=64, show_default=True),
        click.option("--width", type=int, default=16, show_default=True),
        click.option("--pretrain-epochs", type=int, default=15, show_default=True),
        click.option("--pretrain-lr", type=float, default=2e-3, show_default=True),
        click.option("--preset", type=click.Choice(sorted(PRESETS)), default="adagrad-default",
                     show_default=True),
        click.option("--lr", type=float, default=None, help="Overrides the preset rate."),
        click.option("--epochs", type=int, default=None, help="Overrides the preset epochs."),
        click.option("--decay-epochs", callback=_int_list, default=None,
                     help="Comma-separated epochs after which the rate drops tenfold."),
        click.option("--batch-size", type=int, default=64, show_default=True),
        click.option("--margin", type=float, default=25.0, show_default=True),
        click.option("--metric", type=click.Choice(["euclidean", "squared-euclidean", "cosine"]),
                     default="euclidean", show_default=True),
        click.option("--normalize/--no-normalize", default=False, show_default=True),
        click.option("--term-mask", default="hh,hl,lh,ll", show_default=True),
        click.option("--train-resolutions", callback=_int_list, default="7,14,28", show_default=True),
        click.option("--valid-protocol", type=click.Path()),
        click.option("--valid-data", type=click.Path()),
        click.option("--val-per-epoch", type=int, default=4, show_default=True),
        click.option("--seed", type=int, default=0, show_default=True),
        click.option("--out", type=click.Path(), required=True),
    ]
    for opt in reversed(opts):
        f = opt(f)
    return f


@cli.command()
@config_option
@train_options
def finetune(**p):
    """Fine-tune a backbone with the octuplet loss."""
    root = _require_dir(p["data"], "dataset")
    cfg = _finetune_config(p)
    pool = scan_dataset(root, p["manifest"])
    store = DirectoryImageStore(root)
    valid, vstore = None, None
    if p["valid_protocol"]:
        valid = _load_protocol(p["valid_protocol"])
        vstore = DirectoryImageStore(_require_dir(p["valid_data"] or root, "validation data"))
    model = _model_for(p, pool, store)
    write_manifest(p["out"], "finetune", {**_jsonable(p), "finetune": cfg.to_dict()}, p["seed"])
    fine_tune(model, pool, store, cfg, valid, vstore, out_dir=p["out"])
    click.echo(f"wrote {Path(p['out']) / 'last.pt'}")


@cli.command()
@config_option
@click.option("--checkpoint", type=click.Path(), required=True)
@click.option("--protocol", "protocols", multiple=True, type=click.Path(), required=True,
              help="Native TSV or LFW-style pairs file; repeatable.")
@click.option("--data", type=click.Path(), required=True, help="Root that protocol refs resolve against.")
@click.option("--resolutions", callback=_int_list, default=",".join(map(str, EVAL_RESOLUTIONS)),
              show_default=True)
@click.option("--mode", type=click.Choice(["cross", "same"]), default="cross", show_default=True)
@click.option("--fars", callback=_float_list, default="0.001,0.01,0.1", show_default=True)
@click.option("--roc/--no-roc", default=False, help="Also write one ROC CSV per resolution.")
@click.option("--plots/--no-plots", default=False)
@click.option("--allow-missing/--strict", default=False,
              help="Skip pairs with unloadable images instead of failing.")
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--out", type=click.Path(), required=True)
def evaluate(**p):
    """Cross- or same-resolution verification report per protocol."""
    model, payload = load_checkpoint(_require_file(p["checkpoint"], "checkpoint"))
    store = DirectoryImageStore(_require_dir(p["data"], "data root"))
    run_cfg = {**_jsonable(p), "checkpoint_arch": payload["arch"]}
    write_manifest(p["out"], "evaluate", run_cfg, p["seed"])
    # output location and presentation flags stay in the manifest only, so
    # reports from identical inputs are byte-identical wherever they land
    report_cfg = {k: v for k, v in run_cfg.items() if k not in ("out", "plots", "roc")}
    fn = evaluate_cross_resolution if p["mode"] == "cross" else evaluate_same_resolution
    for proto_path in p["protocols"]:
        protocol = _load_protocol(proto_path)
        report = fn(model, protocol, store, p["resolutions"], fars=p["fars"],
                    allow_missing=p["allow_missing"], config={"run": report_cfg, "seed": p["seed"]})
        stem = f"{Path(proto_path).stem}_{p['mode']}"
        _write_report(report, p["out"], stem, p["roc"], p["plots"])
        for row in report.rows:
            click.echo(f"{stem}\t{row['resolution']}px\t{100 * row['accuracy']:.2f}%")


@cli.command()
@config_option
@train_options
@click.option("--grid", type=click.Choice(["terms", "metric", "margin-batch"]), default="terms",
              show_default=True)
@click.option("--masks", default=None, help="Semicolon-separated term masks (default: all 13 rows).")
@click.option("--margins", callback=_float_list, default=None)
@click.option("--batch-sizes", callback=_int_list, default=None)
@click.option("--protocol", type=click.Path(), required=True)
@click.option("--eval-data", type=click.Path(), help="Root for protocol refs (default: --data).")
@click.option("--resolutions", callback=_int_list, default=",".join(map(str, EVAL_RESOLUTIONS)),
              show_default=True)
def ablate(**p):
    """Fine-tune and evaluate one cell per grid configuration."""
    root = _require_dir(p["data"], "dataset")
    cells = _grid_cells(p)
    for over in cells:
        _finetune_config(p, **over)  # validate the whole grid before touching data
    pool = scan_dataset(root, p["manifest"])
    store = DirectoryImageStore(root)
    protocol = _load_protocol(p["protocol"])
    estore = DirectoryImageStore(_require_dir(p["eval_data"] or root, "evaluation data"))
    base = _model_for(p, pool, store)
    write_manifest(p["out"], "ablate", {**_jsonable(p), "cells": cells}, p["seed"])
    cache = EmbeddingCache(base, estore, protocol.refs).check()
    before = evaluate_cross_resolution(base, protocol, estore, p["resolutions"], cache=cache)
    out = Path(p["out"])
    rows = []
    for i, over in enumerate(cells):
        cfg = _finetune_config(p, **over)
        model, history = fine_tune(copy.deepcopy(base), pool, store, cfg)
        after = evaluate_cross_resolution(model, protocol, estore, p["resolutions"],
                                          config={"cell": over, "finetune": cfg.to_dict(),
                                                  "seed": p["seed"]})
        cell_dir = out / f"cell{i:02d}"
        cell_dir.mkdir(parents=True, exist_ok=True)
        history.write_csv(cell_dir / "history.csv")
        (cell_dir / "report.json").write_text(after.to_json())
        row = _cell_row(over, cfg)
        for r in p["resolutions"]:
            row[f"acc_{r}"] = after.accuracy(r)
            row[f"delta_{r}"] = after.accuracy(r) - before.accuracy(r)
        rows.append(row)
        click.echo("\t".join(f"{k}={v:.4f}" if isinstance(v, float) else f"{k}={v}"
                             for k, v in row.items()))
    (out / "baseline.json").write_text(before.to_json())
    _write_table(rows, out / "ablation.csv")
    (out / "ablation.json").write_text(json.dumps({"schema_version": 1, "grid": p["grid"],
                                                   "seed": p["seed"], "rows": rows},
                                                  indent=2, sort_keys=True) + "\n")


def _grid_cells(p):
    if p["grid"] == "terms":
        masks = ABLATION_MASKS if not p["masks"] else [TermMask.parse(m) for m in p["masks"].split(";")]
        return [{"mask": str(m)} for m in masks]
    if p["grid"] == "metric":
        return [{"metric": m, "normalize": n} for m, n in METRIC_GRID]
    margins = p["margins"] or MARGIN_GRID
    sizes = p["batch_sizes"] or (p["batch_size"],)
    return [{"margin": m, "batch_size": b} for b in sizes for m in margins]


def _cell_row(over, cfg):
    if "mask" in over:
        mask = TermMask.parse(cfg.mask)
        return {t: int(getattr(mask, t)) for t in TERMS}
    return {k: getattr(cfg, k) for k in over}


def _write_table(rows, path):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        for row in rows:
            w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})


@cli.command()
@config_option
@click.option("--data", type=click.Path(), required=True)
@click.option("--manifest", type=click.Path())
@click.option("--genuine", type=int, default=3000, show_default=True)
@click.option("--imposter", type=int, default=3000, show_default=True)
@click.option("--folds", type=int, default=10, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--out", type=click.Path(), required=True, help="Protocol TSV to write.")
def pairs(**p):
    """Generate a fold-assigned verification protocol."""
    pool = scan_dataset(_require_dir(p["data"], "dataset"), p["manifest"])
    protocol = generate_pairs(pool, p["genuine"], p["imposter"], p["folds"],
                              seed=seed_streams(p["seed"])["pairs"], name=Path(p["out"]).stem)
    Path(p["out"]).parent.mkdir(parents=True, exist_ok=True)
    write_protocol(protocol, p["out"])
    click.echo(f"wrote {len(protocol)} pairs to {p['out']}")


@cli.command()
@config_option
@click.option("--in", "src", type=click.Path(), required=True)
@click.option("--out", "dst", type=click.Path(), required=True)
@click.option("--r", "resolution", type=int, default=None, help="Fixed target resolution.")
@click.option("--resolutions", callback=_int_list, default="7,14,28", show_default=True,
              help="Per-image random choice when --r is not given.")
@click.option("--seed", type=int, default=0, show_default=True)
def degrade(**p):
    """Degrade every image below --in into the same layout under --out."""
    src = _require_dir(p["src"], "input directory")
    dst = Path(p["dst"])
    files = sorted(f for f in src.rglob("*") if f.is_file()
                   and f.suffix.lower() in (".png", ".jpg", ".jpeg", ".bmp", ".npy"))
    if not files:
        raise DataError(f"no images under {src}")
    choices = (p["resolution"],) if p["resolution"] else p["resolutions"]
    sampler = ResolutionSampler(choices, seed_streams(p["seed"])["degrade"])
    res = sampler.draw(len(files))
    for f, r in zip(files, res):
        rel = f.relative_to(src).with_suffix(".png")
        save_png(dst / rel, degrade_pixels(load_image(f), r))
    write_manifest(dst, "degrade", {**_jsonable(p), "files": len(files)}, p["seed"])
    click.echo(f"degraded {len(files)} images into {dst}")


@cli.command()
@click.option("--in", "src", type=click.Path(), required=True, help="Report JSON written by evaluate.")
@click.option("--out", type=click.Path(), default=None, help="Output directory (default: beside input).")
@click.option("--roc/--no-roc", default=True)
@click.option("--plots/--no-plots", default=True)
def report(src, out, roc, plots):
    """Re-emit CSV tables and plots from a written JSON report."""
    path = _require_file(src, "report")
    try:
        rep = VerificationReport.from_dict(json.loads(path.read_text()))
    except (ValueError, KeyError) as exc:
        raise DataError(f"{path} is not a verification report: {exc}") from exc
    out = Path(out) if out else path.parent
    out.mkdir(parents=True, exist_ok=True)
    (out / f"{path.stem}.csv").write_text(rep.to_csv())
    if roc:
        for row in rep.rows:
            (out / f"{path.stem}_roc_{row['resolution']}.csv").write_text(rep.roc_csv(row["resolution"]))
    if plots:
        render_plots(path, out)
    click.echo(f"wrote report files to {out}")


@cli.command()
@click.option("--out", type=click.Path(), required=True)
@click.option("--identities", type=int, default=300, show_default=True)
@click.option("--images", type=int, default=6, show_default=True)
@click.option("--prefix", default="id", show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
def synth(out, identities, images, prefix, seed):
    """Render a procedural face dataset as PNG directories."""
    pool, store = make_dataset(identities, images, seed=seed, prefix=prefix)
    write_dataset(pool, store, out)
    click.echo(f"wrote {identities * images} images to {out}")


@cli.command()
@config_option
@click.option("--data", type=click.Path(), required=True)
@click.option("--manifest", type=click.Path())
@click.option("--dim", type=int, default=64, show_default=True)
@click.option("--width", type=int, default=16, show_default=True)
@click.option("--epochs", type=int, default=15, show_default=True)
@click.option("--lr", type=float, default=2e-3, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--out", type=click.Path(), required=True, help="Checkpoint file to write.")
def pretrain(**p):
    """Softmax pre-training of the toy backbone on full-resolution images."""
    root = _require_dir(p["data"], "dataset")
    pool = scan_dataset(root, p["manifest"])
    store = DirectoryImageStore(root)
    model = toy_backbone(p["dim"], seed=p["seed"], width=p["width"], n_classes=len(pool.identities))
    state = torch.random.get_rng_state()
    torch.manual_seed(p["seed"])
    try:
        stats = pretrain_classifier(model, pool, store, epochs=p["epochs"], lr=p["lr"], seed=p["seed"])
    finally:
        torch.random.set_rng_state(state)
    Path(p["out"]).parent.mkdir(parents=True, exist_ok=True)
    torch.save({"state_dict": model.state_dict(), "arch": model.arch(), "config": _jsonable(p),
                "pretrain": stats}, p["out"])
    click.echo(f"training accuracy {stats[-1]['accuracy']:.4f}; wrote {p['out']}")


def main(argv=None):
    try:
        cli.main(args=argv, prog_name="octuplet", standalone_mode=False)
    except OctupletError as exc:
        click.echo(f"error: {exc}", err=True)
        return exc.exit_code
    except click.exceptions.Abort:
        click.echo("aborted", err=True)
        return 130
    except click.ClickException as exc:
        exc.show()
        return ConfigError.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
