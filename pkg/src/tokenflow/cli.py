"""Command-line front end.

Subcommands: ``generate`` (synthetic dataset), ``train``, ``eval``,
``benchmark``, ``ablate``. Machine-readable output goes to stdout as one JSON
document per invocation; all logging goes to stderr so stdout can be piped.
Options can come from a flat ``key = value`` config file; explicit CLI flags
win over file values.

Artifacts written under ``--out``: ``model.ckpt``, ``metrics.json``,
``keep_ratios.csv``, ``flops.json``, ``bench.csv``. ``metrics.json`` holds no
wall-clock fields, so reruns with the same seed produce byte-identical files;
timing lives in ``bench.csv``.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from dataclasses import fields, replace

import numpy as np

from .config import ModelConfig, desk_config
from .data import Dataset, build_dataset, load_dataset
from .flops import count_flops
from .keepratio import inference_k
from .model import load_checkpoint, save_checkpoint
from .scenegen import ScenarioConfig
from .tokenizers import count_tokens
from .train import (ABLATIONS, Batcher, TrainSettings, benchmark, evaluate,
                    resolve_gamma_prime, train_model)

log = logging.getLogger("tokenflow")

CONFIG_KEYS = {f.name for f in fields(ModelConfig)} \
    | {f.name for f in fields(TrainSettings)} \
    | {"scenarios", "frames", "out", "data", "ckpt", "task"}


def read_config_file(path: str) -> dict:
    """Flat ``key = value`` lines; ``#`` starts a comment. Values are coerced
    to int or float when they parse as one."""
    values = {}
    with open(path) as fh:
        for ln, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{ln}: expected 'key = value', got {raw!r}")
            key, _, val = line.partition("=")
            key, val = key.strip(), val.strip()
            if key not in CONFIG_KEYS:
                raise ValueError(f"{path}:{ln}: unknown config key {key!r}")
            for cast in (int, float):
                try:
                    val = cast(val)
                    break
                except ValueError:
                    pass
            values[key] = val
    return values


def _json_ready(obj):
    if isinstance(obj, dict):
        return {k: _json_ready(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_json_ready(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        return float(obj)
    if isinstance(obj, (np.integer, int)):
        return int(obj)
    if isinstance(obj, np.ndarray):
        return _json_ready(obj.tolist())
    return obj


def _emit(payload: dict) -> None:
    json.dump(_json_ready(payload), sys.stdout, indent=1, sort_keys=True)
    sys.stdout.write("\n")


def _write_json(path: str, payload: dict) -> None:
    with open(path, "w") as fh:
        json.dump(_json_ready(payload), fh, indent=1, sort_keys=True)
        fh.write("\n")


def _model_config(dataset: Dataset, overrides: dict) -> ModelConfig:
    """Desk defaults, then config-file overrides; the fields that must agree
    with the stored data (task, frame count, image resolution) always come
    from the dataset manifest."""
    scenario = dataset.manifest["scenario_config"]
    config = desk_config(scenario["task"])
    model_fields = {f.name for f in fields(ModelConfig)}
    picked = {k: v for k, v in overrides.items() if k in model_fields and k != "task"}
    if picked:
        config = replace(config, **picked)
    return replace(config, tau=scenario["tau"], img_hw=scenario["img_hw"])


def _train_settings(args, overrides: dict) -> TrainSettings:
    settings = TrainSettings()
    ts_fields = {f.name for f in fields(TrainSettings)}
    settings = replace(settings, **{k: v for k, v in overrides.items()
                                    if k in ts_fields})
    for key in ("lr", "weight_decay", "batch_size", "epochs", "gamma_prime",
                "budget_flops", "ablation", "uniform_p", "seed"):
        val = getattr(args, key, None)
        if val is not None:
            settings = replace(settings, **{key: val})
    return settings


def _flops_at_ratios(config: ModelConfig, ratios: list[float]):
    n = count_tokens(config)
    return count_flops(config, [inference_k(r, n) for r in ratios])


def _dataset_for(args) -> Dataset:
    if not args.data:
        raise ValueError("--data is required for this command")
    return load_dataset(args.data)


def _task_of(dataset: Dataset) -> str:
    return dataset.manifest["scenario_config"]["task"]


def cmd_generate(args, overrides: dict) -> dict:
    if not args.out:
        raise ValueError("generate needs --out")
    scenario = ScenarioConfig(task=args.task or overrides.get("task", "beam"),
                              frames=args.frames or overrides.get("frames", 105),
                              tau=overrides.get("tau", 5))
    manifest = build_dataset(scenario, args.out,
                             args.scenarios or overrides.get("scenarios", 20),
                             args.seed if args.seed is not None else 0)
    labels = {}
    for entry in manifest["samples"]:
        labels[str(entry["label"])] = labels.get(str(entry["label"]), 0) + 1
    log.info("wrote %d samples to %s", manifest["count"], args.out)
    return {"command": "generate", "out": args.out, "count": manifest["count"],
            "label_distribution": dict(sorted(labels.items(), key=lambda kv: int(kv[0]))),
            "splits": {s: sum(1 for e in manifest["samples"] if e["split"] == s)
                       for s in ("train", "val")}}


def _final_metrics(dataset, params, config, settings) -> dict:
    seed_for_eval = settings.seed + 977 if settings.ablation == "random_routing" \
        else None
    return evaluate(dataset, params, config, split="val",
                    random_routing_seed=seed_for_eval)


def cmd_train(args, overrides: dict) -> dict:
    dataset = _dataset_for(args)
    config = _model_config(dataset, overrides)
    settings = _train_settings(args, overrides)
    seeds = [settings.seed + i for i in range(args.seeds or 1)]
    runs = []
    first_artifacts = None
    for seed in seeds:
        run_settings = replace(settings, seed=seed)
        params, history = train_model(dataset, config, run_settings)
        final = _final_metrics(dataset, params, config, run_settings)
        runs.append({"seed": seed, "history": history, "final": final})
        if first_artifacts is None:
            first_artifacts = (params, history, final, run_settings)
    params, history, final, run_settings = first_artifacts
    gamma_prime = resolve_gamma_prime(run_settings, config)
    trained = replace(config, gamma_prime=gamma_prime, lam=run_settings.lam)
    report = _flops_at_ratios(trained, params.keep.values())

    metrics = {"command": "train", "task": config.task,
               "gamma_prime": gamma_prime, "ablation": settings.ablation,
               "epochs": settings.epochs, "seeds": seeds, "runs": runs,
               "final": final, "flops": report.to_dict()}
    if len(runs) > 1:
        keys = [k for k in runs[0]["final"] if isinstance(runs[0]["final"][k],
                                                          (int, float, np.floating))]
        metrics["mean"] = {k: float(np.mean([r["final"][k] for r in runs]))
                           for k in keys}
        metrics["std"] = {k: float(np.std([r["final"][k] for r in runs]))
                          for k in keys}
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        save_checkpoint(os.path.join(args.out, "model.ckpt"), params, trained)
        _write_json(os.path.join(args.out, "metrics.json"), metrics)
        _write_json(os.path.join(args.out, "flops.json"), report.to_dict())
        with open(os.path.join(args.out, "keep_ratios.csv"), "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["block", "keep_ratio"])
            for i, value in enumerate(params.keep.values()):
                writer.writerow([i, f"{value:.6f}"])
    return metrics


def cmd_eval(args, overrides: dict) -> dict:
    if not args.ckpt:
        raise ValueError("eval needs --ckpt")
    params, config = load_checkpoint(args.ckpt)
    dataset = _dataset_for(args)
    if _task_of(dataset) != config.task:
        raise ValueError(f"checkpoint task {config.task!r} does not match dataset "
                         f"task {_task_of(dataset)!r}")
    final = evaluate(dataset, params, config, split="val")
    report = _flops_at_ratios(config, params.keep.values())
    metrics = {"command": "eval", "task": config.task, "final": final,
               "keep_ratios": list(params.keep.values()),
               "flops": report.to_dict()}
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        _write_json(os.path.join(args.out, "metrics.json"), metrics)
    return metrics


def cmd_benchmark(args, overrides: dict) -> dict:
    if not args.ckpt:
        raise ValueError("benchmark needs --ckpt")
    params, config = load_checkpoint(args.ckpt)
    dataset = _dataset_for(args)
    index = dataset.indices("val")[:1] or [0]
    batch = Batcher(dataset, config).batch(index)
    rows = benchmark(params, config, batch, repeats=max(30, args.repeats or 0))
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        with open(os.path.join(args.out, "bench.csv"), "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=list(rows[0]))
            writer.writeheader()
            writer.writerows(_json_ready(rows))
    return {"command": "benchmark", "rows": rows}


def cmd_ablate(args, overrides: dict) -> dict:
    dataset = _dataset_for(args)
    config = _model_config(dataset, overrides)
    settings = _train_settings(args, overrides)
    gamma_prime = resolve_gamma_prime(settings, config)
    modes = [("proposed", replace(settings, ablation="none")),
             ("freeze_tokenizers", replace(settings, ablation="freeze_tokenizers")),
             ("random_routing", replace(settings, ablation="random_routing")),
             (f"uniform_ratio({gamma_prime:g})",
              replace(settings, ablation="uniform_ratio", uniform_p=gamma_prime))]
    seeds = [settings.seed + i for i in range(args.seeds or 1)]
    rows = []
    for label, mode_settings in modes:
        finals = []
        for seed in seeds:
            run = replace(mode_settings, seed=seed)
            params, _ = train_model(dataset, config, run)
            finals.append(_final_metrics(dataset, params, config, run))
        row = {"mode": label}
        for key in finals[0]:
            if isinstance(finals[0][key], (int, float, np.floating)) and key != "count":
                row[key] = float(np.mean([f[key] for f in finals]))
                if len(finals) > 1:
                    row[key + "_std"] = float(np.std([f[key] for f in finals]))
        rows.append(row)
        log.info("ablation %s: %s", label,
                 {k: round(v, 4) for k, v in row.items() if k != "mode"})
    metrics = {"command": "ablate", "gamma_prime": gamma_prime, "seeds": seeds,
               "rows": rows}
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        _write_json(os.path.join(args.out, "metrics.json"), metrics)
    return metrics


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="tokenflow",
        description="Budgeted multi-modal transformer: data, training, benchmarks.")
    sub = parser.add_subparsers(dest="command", required=True)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat key = value config file")
    common.add_argument("--seed", type=int, default=None)
    common.add_argument("--out", help="artifact directory")
    common.add_argument("--data", help="dataset directory")

    gen = sub.add_parser("generate", parents=[common])
    gen.add_argument("--task", choices=("beam", "handover"))
    gen.add_argument("--scenarios", type=int)
    gen.add_argument("--frames", type=int)

    for name in ("train", "ablate"):
        p = sub.add_parser(name, parents=[common])
        p.add_argument("--gamma-prime", dest="gamma_prime", type=float)
        p.add_argument("--budget-flops", dest="budget_flops", type=float)
        p.add_argument("--epochs", type=int)
        p.add_argument("--batch-size", dest="batch_size", type=int)
        p.add_argument("--lr", type=float)
        p.add_argument("--seeds", type=int, help="number of seeds to average")
        if name == "train":
            p.add_argument("--ablation", choices=ABLATIONS)
            p.add_argument("--uniform-p", dest="uniform_p", type=float)

    ev = sub.add_parser("eval", parents=[common])
    ev.add_argument("--ckpt", help="checkpoint path")
    bench = sub.add_parser("benchmark", parents=[common])
    bench.add_argument("--ckpt", help="checkpoint path")
    bench.add_argument("--repeats", type=int)
    return parser


COMMANDS = {"generate": cmd_generate, "train": cmd_train, "eval": cmd_eval,
            "benchmark": cmd_benchmark, "ablate": cmd_ablate}


def main(argv: list[str] | None = None) -> int:
    # rebind to the current sys.stderr each run; a handler captured at import
    # time would outlive stream redirection
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(logging.Formatter("%(levelname)s %(message)s"))
    root = logging.getLogger("tokenflow")
    root.handlers[:] = [handler]
    root.setLevel(logging.INFO)
    root.propagate = False
    args = build_parser().parse_args(argv)
    overrides = read_config_file(args.config) if args.config else {}
    try:
        payload = COMMANDS[args.command](args, overrides)
    except (ValueError, RuntimeError, OSError) as exc:
        log.error("%s", exc)
        return 1
    _emit(payload)
    return 0


if __name__ == "__main__":
    sys.exit(main())
