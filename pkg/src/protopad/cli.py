"""Command-line entry point: gen-data, train, eval, extend, det-export.

Every command is driven by one JSON config (see config module) and is fully
deterministic given that config: all randomness is seed-derived and all
artifacts are written with round-trip float precision, so reruns produce
byte-identical outputs. Artifacts land under the configured output directory.

Exit codes: 0 success, 1 config error, 2 data error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

from .config import RunConfig, load_config, override_seed, resolve_datasets
from .data import Dataset, apply_normalization, fit_normalization, write_feature_table
from .episodes import extend_support, generate_synthetic, synthetic_counts
from .errors import ConfigError, DataError, NumericalError
from .metrics import export_det_csv
from .mlp import load_checkpoint, save_checkpoint
from .trainer import EvalResult, evaluate, train


def _ensure_out_dir(cfg: RunConfig) -> Path:
    cfg.output_dir.mkdir(parents=True, exist_ok=True)
    return cfg.output_dir


def _write_json(path: Path, doc: dict) -> None:
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _prepared_datasets(cfg: RunConfig) -> tuple[Dataset, Dataset, Dataset]:
    """Resolve splits and standardize them with base-country train statistics."""
    train_ds, val_ds, test_ds = resolve_datasets(cfg)
    missing = set(cfg.episode.support_countries) - set(train_ds.countries())
    if missing:
        raise DataError(f"train split has no samples for support countries {sorted(missing)}")
    if cfg.normalize:
        stats = fit_normalization(train_ds.filter_countries(cfg.episode.support_countries))
        train_ds = apply_normalization(train_ds, stats)
        val_ds = apply_normalization(val_ds, stats)
        test_ds = apply_normalization(test_ds, stats)
    return train_ds, val_ds, test_ds


def cmd_gen_data(cfg: RunConfig, table_path: Path | None = None) -> Path:
    """Generate the synthetic dataset and write it as a feature table."""
    if cfg.synthetic is None:
        raise ConfigError("gen-data requires a 'data.synthetic' section")
    out_dir = _ensure_out_dir(cfg)
    path = table_path if table_path is not None else out_dir / "dataset.csv"
    ds = generate_synthetic(cfg.synthetic)
    write_feature_table(ds, path)
    print(f"{'country':<10}{'users':>8}{'screen_sources':>16}{'images':>10}")
    for row in synthetic_counts(ds):
        print(f"{row['country']:<10}{row['n_users']:>8}{row['n_screen_sources']:>16}"
              f"{row['n_images']:>10}")
    print(f"wrote {len(ds)} samples (dimension {ds.dimension}) to {path}")
    return path


def cmd_train(cfg: RunConfig) -> Path:
    """Train the embedder on the base support countries; write checkpoint + history."""
    train_ds, val_ds, _ = _prepared_datasets(cfg)
    out_dir = _ensure_out_dir(cfg)
    base_countries = cfg.episode.support_countries
    train_base = train_ds.filter_countries(base_countries)
    val_base = val_ds.filter_countries(base_countries)
    embed_cfg = cfg.embedding.with_input_dim(train_base.dimension)

    params, history = train(train_base, val_base, cfg.episode, embed_cfg, cfg.training)
    ckpt_path = out_dir / "checkpoint.txt"
    save_checkpoint(params, embed_cfg, ckpt_path)
    (out_dir / "history.csv").write_text(history.to_csv(), encoding="utf-8")
    last = history.epochs[-1]
    print(f"trained {last.epoch} epochs ({history.stop_reason}), "
          f"best epoch {history.best_epoch}")
    print(f"final val_loss {last.val_loss:.6f}, val_eer {last.val_eer:.6f}")
    print(f"wrote {ckpt_path} and {out_dir / 'history.csv'}")
    return ckpt_path


def _run_eval(cfg: RunConfig, checkpoint: Path, spec, support_ds: Dataset,
              test_ds: Dataset) -> EvalResult:
    params, embed_cfg = load_checkpoint(checkpoint)
    return evaluate(
        params,
        embed_cfg,
        test_ds,
        spec,
        metric=cfg.metric,
        support_ds=support_ds,
        pais_by_screen_source=cfg.pais_by_screen_source,
        per_country_prototypes=cfg.per_country_prototypes,
    )


def cmd_eval(cfg: RunConfig, checkpoint: Path) -> Path:
    """Evaluate the checkpoint on the test split; write report + DET CSVs."""
    train_ds, _, test_ds = _prepared_datasets(cfg)
    out_dir = _ensure_out_dir(cfg)
    support_ds = train_ds.filter_countries(cfg.episode.support_countries)
    result = _run_eval(cfg, checkpoint, cfg.episode, support_ds, test_ds)
    report_path = out_dir / "report.json"
    _write_json(report_path, result.report.as_dict())
    for country, curve in sorted(result.curves.items()):
        (out_dir / f"det_{country}.csv").write_text(export_det_csv(curve), encoding="utf-8")
    for country, reason in sorted(result.report.skipped.items()):
        print(f"warning: skipped {country}: {reason}", file=sys.stderr)
    print(f"wrote {report_path} and {len(result.curves)} DET curves")
    return report_path


def cmd_det_export(cfg: RunConfig, checkpoint: Path) -> list[Path]:
    """Write only the per-country DET CSVs for the test split."""
    train_ds, _, test_ds = _prepared_datasets(cfg)
    out_dir = _ensure_out_dir(cfg)
    support_ds = train_ds.filter_countries(cfg.episode.support_countries)
    result = _run_eval(cfg, checkpoint, cfg.episode, support_ds, test_ds)
    paths = []
    for country, curve in sorted(result.curves.items()):
        path = out_dir / f"det_{country}.csv"
        path.write_text(export_det_csv(curve), encoding="utf-8")
        paths.append(path)
    print(f"wrote {len(paths)} DET curves to {out_dir}")
    return paths


def cmd_extend(cfg: RunConfig, checkpoint: Path, retrain: str | None = None) -> Path:
    """Compare base-support vs new-country-extended-support evaluation.

    By default the checkpoint is reused unchanged and only the support set is
    extended (pure few-shot adaptation). With retrain="fresh" or "finetune"
    the embedder is retrained on the base countries plus the added pool.
    """
    if cfg.extension is None:
        raise ConfigError("extend requires an 'extension' section in the config")
    train_ds, val_ds, test_ds = _prepared_datasets(cfg)
    out_dir = _ensure_out_dir(cfg)

    base_spec = cfg.episode
    base_support = train_ds.filter_countries(base_spec.support_countries)
    base_result = _run_eval(cfg, checkpoint, base_spec, base_support, test_ds)

    ext_spec, ext_report = extend_support(base_spec, train_ds, cfg.extension)
    print(f"extension {ext_report.new_country}: {len(ext_report.selected_users)} users, "
          f"{ext_report.total_added_images} added images "
          f"({ext_report.n_attack_images} attack, {ext_report.n_bona_fide_images} bona fide)")

    params, embed_cfg = load_checkpoint(checkpoint)
    if retrain is not None:
        pool_ids = ext_spec.support_pools[cfg.extension.new_country]
        pool_ds = train_ds.filter(lambda s: s.sample_id in pool_ids)
        enriched = train_ds.filter_countries(base_spec.support_countries).merged_with(pool_ds)
        val_ext = val_ds.filter_countries(ext_spec.support_countries)
        initial = params if retrain == "finetune" else None
        params, history = train(
            enriched,
            val_ext,
            ext_spec,
            embed_cfg,
            cfg.training,
            val_episode_spec=replace(ext_spec, support_pools=None),
            initial_params=initial,
        )
        retrained_path = out_dir / "checkpoint_extended.txt"
        save_checkpoint(params, embed_cfg, retrained_path)
        (out_dir / "history_extended.csv").write_text(history.to_csv(), encoding="utf-8")
        print(f"retrained ({retrain}) for {history.epochs[-1].epoch} epochs, "
              f"wrote {retrained_path}")

    ext_support = train_ds.filter_countries(ext_spec.support_countries)
    ext_result = evaluate(
        params,
        embed_cfg,
        test_ds,
        ext_spec,
        metric=cfg.metric,
        support_ds=ext_support,
        pais_by_screen_source=cfg.pais_by_screen_source,
        per_country_prototypes=cfg.per_country_prototypes,
    )

    countries = sorted(set(base_result.report.countries) | set(ext_result.report.countries)
                       | set(base_result.report.skipped) | set(ext_result.report.skipped))
    doc: dict = {
        "countries": {
            c: {
                "base": (base_result.report.countries[c].as_dict()
                         if c in base_result.report.countries else None),
                "extended": (ext_result.report.countries[c].as_dict()
                             if c in ext_result.report.countries else None),
            }
            for c in countries
        },
        "extension": {
            "new_country": ext_report.new_country,
            "selected_users": list(ext_report.selected_users),
            "images_per_source": dict(sorted(ext_report.images_per_source.items())),
            "n_attack_images": ext_report.n_attack_images,
            "n_bona_fide_images": ext_report.n_bona_fide_images,
            "total_added_images": ext_report.total_added_images,
            "retrain": retrain if retrain is not None else "off",
        },
    }
    skipped = {}
    if base_result.report.skipped:
        skipped["base"] = dict(sorted(base_result.report.skipped.items()))
    if ext_result.report.skipped:
        skipped["extended"] = dict(sorted(ext_result.report.skipped.items()))
    if skipped:
        doc["skipped"] = skipped

    report_path = out_dir / "extend_report.json"
    _write_json(report_path, doc)
    for country, curve in sorted(base_result.curves.items()):
        (out_dir / f"det_base_{country}.csv").write_text(export_det_csv(curve), encoding="utf-8")
    for country, curve in sorted(ext_result.curves.items()):
        (out_dir / f"det_extended_{country}.csv").write_text(export_det_csv(curve),
                                                             encoding="utf-8")
    print(f"wrote {report_path}")
    return report_path


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="protopad",
        description="Few-shot presentation-attack-detection experiments over feature vectors",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p: argparse.ArgumentParser, checkpoint: bool) -> None:
        p.add_argument("--config", required=True, help="path to the JSON run config")
        p.add_argument("--out", help="override the config's output directory")
        p.add_argument("--seed", type=int, help="override every component seed")
        if checkpoint:
            p.add_argument("--checkpoint", required=True, help="path to a saved checkpoint")

    p = sub.add_parser("gen-data", help="generate a synthetic feature table")
    common(p, checkpoint=False)
    p.add_argument("--table", help="explicit path for the feature table")

    common(sub.add_parser("train", help="train the embedder on the base countries"),
           checkpoint=False)
    common(sub.add_parser("eval", help="evaluate a checkpoint on the test split"),
           checkpoint=True)
    common(sub.add_parser("det-export", help="export per-country DET curves only"),
           checkpoint=True)
    p = sub.add_parser("extend", help="compare base vs new-country-extended support")
    common(p, checkpoint=True)
    p.add_argument("--retrain", choices=("fresh", "finetune"),
                   help="also retrain on the enriched training set")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config)
        if args.out is not None:
            cfg = replace(cfg, output_dir=Path(args.out))
        if args.seed is not None:
            cfg = override_seed(cfg, args.seed)

        if args.command == "gen-data":
            cmd_gen_data(cfg, Path(args.table) if args.table else None)
        elif args.command == "train":
            cmd_train(cfg)
        elif args.command == "eval":
            cmd_eval(cfg, Path(args.checkpoint))
        elif args.command == "det-export":
            cmd_det_export(cfg, Path(args.checkpoint))
        else:
            cmd_extend(cfg, Path(args.checkpoint), args.retrain)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except (DataError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
