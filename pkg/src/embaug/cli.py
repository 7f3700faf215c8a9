"""Experiment command line: train, eval, gradcheck, ablate, bench, expand.

Every command writes a resolved-config snapshot into the output directory
so a run can be reproduced exactly.  Exit codes: 0 success, 2 config
error, 3 runtime numeric failure, 4 I/O failure.

All semantic artifacts (JSONL metrics, CSV tables) are byte-deterministic
for a fixed seed and config; wall-clock measurements live in separate
timing files which are the one exception.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import plotting
from .config import RunConfig, load_config
from .data import FeatureDataset, class_disjoint_split, gaussian_blobs, load_feature_csv, save_feature_csv
from .errors import ConfigError, EmbaugError, NonFiniteLoss
from .evaluation import (
    bench_generation,
    export_distance_heatmap,
    load_heatmap_csv,
    recall_at_k,
    synthetic_query_robustness,
)
from .geometry import EmbeddingBatch, expand_batch, l2_normalize_rows
from .gradcheck import run_suite
from .trainer import load_checkpoint, save_checkpoint, train
from .evaluation import kmeans, nmi, pairwise_f1

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERIC = 3
EXIT_IO = 4


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_snapshot(cfg: RunConfig, out: Path) -> None:
    (out / "config_resolved.yaml").write_text(cfg.to_yaml())


def _apply_seed_override(cfg: RunConfig, args) -> None:
    if getattr(args, "seed", None) is not None:
        cfg["train"]["seed"] = args.seed
        cfg["dataset"]["seed"] = args.seed


def _load_datasets(cfg: RunConfig) -> tuple[FeatureDataset, FeatureDataset | None]:
    ds = cfg["dataset"]
    if ds["kind"] == "blobs":
        full = gaussian_blobs(
            classes=ds["classes"],
            per_class=ds["per_class"],
            input_dim=ds["input_dim"],
            center_scale=ds["center_scale"],
            noise_sigma=ds["noise_sigma"],
            seed=ds["seed"],
        )
    else:
        full = load_feature_csv(ds["path"])
        if ds["test_path"]:
            return full, load_feature_csv(ds["test_path"], split="test")
    if ds["split_fraction"] is None:
        return full, None
    return class_disjoint_split(full, float(ds["split_fraction"]), seed=ds["split_seed"])


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    _apply_seed_override(cfg, args)
    out = _out_dir(args)
    _write_snapshot(cfg, out)
    train_set, test_set = _load_datasets(cfg)
    result = train(train_set, cfg.train_config(), eval_dataset=test_set)

    save_checkpoint(result.embedder, str(out / "checkpoint.bin"))
    with open(out / "metrics.jsonl", "w") as fh:
        for report in result.reports:
            fh.write(report.to_json_line() + "\n")
    with open(out / "mining_trace.csv", "w") as fh:
        fh.write("step,ratio_syn,syn_count,ori_count\n")
        for line in result.trace_lines:
            fh.write(line + "\n")
    with open(out / "timings.csv", "w") as fh:
        fh.write("epoch,wall_ms\n")
        for i, ms in enumerate(result.epoch_times_ms, start=1):
            fh.write(f"{i},{ms!r}\n")

    if cfg["output"]["plots"]:
        plotting.training_curves(result.reports, str(out / "fig_training.png"))
        plotting.label_certainty_curves(result.reports, str(out / "fig_label_certainty.png"))
        if result.trace_lines:
            steps = [int(l.split(",")[0]) for l in result.trace_lines]
            ratios = [float(l.split(",")[1]) for l in result.trace_lines]
            plotting.ratio_curve(steps, ratios, str(out / "fig_ratio.png"))
    final = result.final_metrics
    print(f"final recall@1={final['recall_at'].get(1, float('nan')):.4f} nmi={final['nmi']:.4f} f1={final['f1']:.4f}")
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = load_config(args.config)
    _apply_seed_override(cfg, args)
    out = _out_dir(args)
    _write_snapshot(cfg, out)
    train_set, test_set = _load_datasets(cfg)
    target = test_set if test_set is not None else train_set
    embedder = load_checkpoint(args.checkpoint)
    emb = embedder.forward(target.features)
    batch = EmbeddingBatch(emb, target.labels)

    e = cfg["eval"]
    ks = [k for k in e["recall_ks"] if k <= target.n - 1] or [1]
    recall = recall_at_k(batch, batch, ks, self_match=False)
    assign = kmeans(emb, int(np.unique(target.labels).size), seed=e["kmeans_seed"], max_iters=e["kmeans_max_iters"])
    metrics = {
        "recall_at": {str(k): v for k, v in sorted(recall.items())},
        "nmi": nmi(assign, target.labels),
        "f1": pairwise_f1(assign, target.labels),
    }
    counts = np.bincount(target.labels)[1:]
    if (counts >= e["robustness_combine"]).any():
        metrics["synthetic_query_recall_at_1"] = synthetic_query_robustness(
            batch,
            combine_count=e["robustness_combine"],
            trials=e["robustness_trials"],
            seed=cfg["train"]["seed"],
            normalize=cfg["model"]["normalize_output"],
        )
    (out / "eval_metrics.json").write_text(json.dumps(metrics, sort_keys=True, indent=2) + "\n")

    if (counts >= 2 * e["heatmap_pairs_per_class"]).all():
        matrix = export_distance_heatmap(batch, e["heatmap_pairs_per_class"], str(out / "heatmap.csv"))
        if cfg["output"]["plots"]:
            plotting.heatmap(matrix, str(out / "fig_heatmap.png"))
    print(json.dumps(metrics, sort_keys=True))
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    out = _out_dir(args)
    kinds = None if args.losses == "all" else [k.strip() for k in args.losses.split(",") if k.strip()]
    rows = run_suite(kinds=kinds, trials=args.trials, seed=args.seed if args.seed is not None else 0)
    cfg = RunConfig()
    _write_snapshot(cfg, out)
    with open(out / "gradcheck.csv", "w") as fh:
        fh.write("loss,expanded,max_rel_err,passed\n")
        for r in rows:
            fh.write(f"{r['loss']},{int(r['expanded'])},{r['max_rel_err']!r},{int(r['passed'])}\n")
    all_ok = True
    for r in rows:
        status = "pass" if r["passed"] else "FAIL"
        print(f"{r['loss']:>13} expanded={int(r['expanded'])}  max_rel_err={r['max_rel_err']:.3e}  {status}")
        all_ok &= r["passed"]
    return EXIT_OK if all_ok else EXIT_NUMERIC


def cmd_ablate(args) -> int:
    cfg = load_config(args.config)
    _apply_seed_override(cfg, args)
    out = _out_dir(args)
    _write_snapshot(cfg, out)
    train_set, test_set = _load_datasets(cfg)
    sweep = cfg["ablate"]

    runs = []
    for loss_kind in sweep["losses"]:
        for n in sweep["n_values"]:
            for norm in sweep["normalize"]:
                for seed in sweep["seeds"]:
                    cell_cfg = cfg.train_config()
                    cell_cfg.loss.kind = loss_kind
                    cell_cfg.loss.expansion.enabled = True
                    cell_cfg.loss.expansion.n = int(n)
                    cell_cfg.loss.expansion.normalize = bool(norm)
                    cell_cfg.seed = int(seed)
                    cell_cfg.record_label_certainty = False
                    result = train(train_set, cell_cfg, eval_dataset=test_set)
                    runs.append(
                        {
                            "loss": loss_kind,
                            "n": int(n),
                            "normalize": bool(norm),
                            "seed": int(seed),
                            "recall_at_1": result.final_metrics["recall_at"].get(1, float("nan")),
                            "nmi": result.final_metrics["nmi"],
                            "f1": result.final_metrics["f1"],
                        }
                    )

    with open(out / "ablate_runs.csv", "w") as fh:
        fh.write("loss,n,normalize,seed,recall_at_1,nmi,f1\n")
        for r in runs:
            fh.write(
                f"{r['loss']},{r['n']},{int(r['normalize'])},{r['seed']},"
                f"{r['recall_at_1']!r},{r['nmi']!r},{r['f1']!r}\n"
            )

    summary = []
    for loss_kind in sweep["losses"]:
        for n in sweep["n_values"]:
            for norm in sweep["normalize"]:
                cell = [
                    r for r in runs
                    if r["loss"] == loss_kind and r["n"] == int(n) and r["normalize"] == bool(norm)
                ]
                row = {"loss": loss_kind, "n": int(n), "normalize": bool(norm)}
                for metric in ("recall_at_1", "nmi", "f1"):
                    vals = np.array([r[metric] for r in cell])
                    row[f"{metric}_mean"] = float(vals.mean())
                    row[f"{metric}_std"] = float(vals.std())
                summary.append(row)
    with open(out / "ablate_summary.csv", "w") as fh:
        fh.write(
            "loss,n,normalize,recall_at_1_mean,recall_at_1_std,nmi_mean,nmi_std,f1_mean,f1_std\n"
        )
        for r in summary:
            fh.write(
                f"{r['loss']},{r['n']},{int(r['normalize'])},"
                f"{r['recall_at_1_mean']!r},{r['recall_at_1_std']!r},"
                f"{r['nmi_mean']!r},{r['nmi_std']!r},{r['f1_mean']!r},{r['f1_std']!r}\n"
            )
    if cfg["output"]["plots"]:
        plotting.ablation_curves(summary, str(out / "fig_ablate.png"))
    print(f"{len(runs)} ablation runs -> {out / 'ablate_runs.csv'}")
    return EXIT_OK


def cmd_bench(args) -> int:
    cfg = load_config(args.config)
    out = _out_dir(args)
    _write_snapshot(cfg, out)
    b = cfg["bench"]
    rows = bench_generation(
        batch_sizes=[int(s) for s in b["batch_sizes"]],
        n_values=[int(n) for n in b["n_values"]],
        repeats=int(b["repeats"]),
        dim=int(b["dim"]),
        seed=cfg["train"]["seed"],
    )
    with open(out / "bench.csv", "w") as fh:
        fh.write("batch_size,n,gen_ms,total_ms\n")
        for r in rows:
            fh.write(f"{r['batch_size']},{r['n']},{r['gen_ms']!r},{r['total_ms']!r}\n")
    if cfg["output"]["plots"]:
        plotting.bench_curves(rows, str(out / "fig_bench.png"))
    for r in rows:
        print(f"batch={r['batch_size']} n={r['n']:>3} gen={r['gen_ms']:.4f}ms total={r['total_ms']:.4f}ms")
    return EXIT_OK


def cmd_expand(args) -> int:
    cfg = load_config(args.config)
    _apply_seed_override(cfg, args)
    out = _out_dir(args)
    _write_snapshot(cfg, out)
    train_set, _ = _load_datasets(cfg)
    x = cfg["expand"]
    data = train_set.features
    if x["normalize_inputs"]:
        data = l2_normalize_rows(data)
    batch = EmbeddingBatch(data, train_set.labels)
    aug = expand_batch(batch, int(x["n"]), bool(x["normalize"]), x["rule"])
    n_orig = aug.num_original
    with open(out / "augmented.csv", "w") as fh:
        cols = ",".join(f"f{i}" for i in range(aug.data.shape[1]))
        fh.write(f"row,label,provenance,source_i,source_j,fraction,{cols}\n")
        src_i, src_j = aug.source_i, aug.source_j
        for r in range(aug.total):
            if r < n_orig:
                prov, si, sj, frac = "original", -1, -1, ""
            else:
                s = r - n_orig
                prov, si, sj = "synthetic", int(src_i[s]), int(src_j[s])
                frac = repr(float(aug.syn_fraction[s]))
            values = ",".join(repr(float(v)) for v in aug.data[r])
            fh.write(f"{r},{int(aug.labels[r])},{prov},{si},{sj},{frac},{values}\n")
    print(f"{aug.total} rows ({aug.num_synthetic} synthetic) -> {out / 'augmented.csv'}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="embaug",
        description="Embedding-space augmentation experiments: synthetic point "
        "generation, hard negative mining, and pair-based metric losses.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config_required=False):
        p.add_argument("--config", default=None, required=config_required, help="YAML config path")
        p.add_argument("--seed", type=int, default=None, help="override train/dataset seed")
        p.add_argument("--out", default="runs/out", help="output directory")

    common(sub.add_parser("train", help="train an embedder and log metrics"))
    p_eval = sub.add_parser("eval", help="evaluate a checkpoint")
    common(p_eval)
    p_eval.add_argument("--checkpoint", required=True)
    p_grad = sub.add_parser("gradcheck", help="verify analytic gradients against finite differences")
    common(p_grad)
    p_grad.add_argument("--losses", default="all", help="comma-separated loss kinds or 'all'")
    p_grad.add_argument("--trials", type=int, default=10)
    common(sub.add_parser("ablate", help="sweep n / normalization / losses over seeds"))
    common(sub.add_parser("bench", help="time synthetic generation vs total loss"))
    common(sub.add_parser("expand", help="dump an augmented batch as CSV"))
    return parser


_COMMANDS = {
    "train": cmd_train,
    "eval": cmd_eval,
    "gradcheck": cmd_gradcheck,
    "ablate": cmd_ablate,
    "bench": cmd_bench,
    "expand": cmd_expand,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NonFiniteLoss as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        diag = getattr(exc, "diagnostics", None)
        if diag is not None:
            try:
                Path(args.out).mkdir(parents=True, exist_ok=True)
                (Path(args.out) / "diagnostics.json").write_text(json.dumps(diag, indent=2))
            except OSError:
                pass
        return EXIT_NUMERIC
    except (ValueError, EmbaugError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as exc:
        print(f"i/o failure: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
