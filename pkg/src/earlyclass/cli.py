"""Command-line entry point: ``earlyclass generate|train|eval|sweep|trace``.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import data, evaluation, model, train as training
from .earliness import stopping_distribution

log = logging.getLogger("earlyclass")

OUTPUT_ENV = "EARLYCLASS_OUTPUT_DIR"


class UsageError(Exception):
    """Bad flags, config or paths; maps to exit code 2."""


@dataclass
class RunConfig:
    dataset: str | None = None
    output_dir: str = "runs/default"
    seed: int | None = None
    split_fractions: tuple[float, float, float] = (0.6, 0.2, 0.2)
    split_seed: int = 0
    model: model.ModelConfig = field(default_factory=model.ModelConfig)
    train: training.TrainConfig = field(default_factory=training.TrainConfig)

    @classmethod
    def load(cls, path: str | None) -> "RunConfig":
        if path is None:
            return cls()
        p = Path(path)
        if not p.is_file():
            raise UsageError(f"config file not found: {p}")
        try:
            raw = json.loads(p.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise UsageError(f"{p}: invalid JSON ({exc})") from None
        try:
            cfg = cls(
                dataset=raw.get("dataset"),
                output_dir=raw.get("output_dir", "runs/default"),
                seed=raw.get("seed"),
                split_fractions=tuple(raw.get("split_fractions", (0.6, 0.2, 0.2))),
                split_seed=raw.get("split_seed", 0),
                model=model.ModelConfig.from_dict(raw.get("model", {})),
                train=training.TrainConfig.from_dict(raw.get("train", {})),
            )
        except (TypeError, ValueError) as exc:
            raise UsageError(f"{p}: {exc}") from None
        extra = set(raw) - {"dataset", "output_dir", "seed", "split_fractions", "split_seed", "model", "train"}
        if extra:
            raise UsageError(f"{p}: unknown keys {sorted(extra)}")
        return cfg

    def to_dict(self) -> dict:
        return {
            "dataset": self.dataset,
            "output_dir": self.output_dir,
            "seed": self.seed,
            "split_fractions": list(self.split_fractions),
            "split_seed": self.split_seed,
            "model": asdict(self.model),
            "train": asdict(self.train),
        }


# ---------------------------------------------------------------------------
# helpers


def _output_dir(flag: str | None, default: str) -> Path:
    path = Path(os.environ.get(OUTPUT_ENV) or flag or default)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _existing(path: str | None, what: str) -> Path:
    if not path:
        raise UsageError(f"no {what} given")
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"{what} not found: {p}")
    return p


def _class_spec_path(dataset: Path) -> Path:
    return dataset.with_name(dataset.stem + ".classes.json")


def _class_names(dataset: Path, spec: str | None, num_classes: int) -> list[str] | None:
    path = Path(spec) if spec else _class_spec_path(dataset)
    if not path.is_file():
        return None
    names = [s.name for s in data.load_class_specs(path)]
    return names if len(names) == num_classes else None


def _load_samples(path: Path, n_bands: int | None) -> list[data.TimeSeriesSample]:
    try:
        return data.load_dataset(path, n_bands)
    except data.DataError as exc:
        raise UsageError(str(exc)) from None


def _floats(text: str) -> list[float]:
    try:
        values = [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise UsageError(f"cannot parse number list {text!r}") from None
    return values


def _load_model(path: Path) -> tuple[model.ParameterSet, model.ModelConfig, training.TrainConfig | None]:
    """Accept a parameter file or a training checkpoint (uses its latest parameters)."""
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise UsageError(f"{path}: unreadable model file ({exc})") from None
    fmt = raw.get("format") if isinstance(raw, dict) else None
    if fmt == training.CHECKPOINT_FORMAT:
        state, mcfg, tcfg = training.load_checkpoint(path)
        return state.params, mcfg, tcfg
    if fmt == model.PARAMS_FORMAT:
        params, mcfg = model.params_from_dict(raw)
        return params, mcfg, None
    raise UsageError(f"{path}: neither a parameter file nor a training checkpoint")


def _select(samples, which: str, fractions, seed) -> list[data.TimeSeriesSample]:
    if which == "all":
        return list(samples)
    split = data.split_by_region(samples, tuple(fractions), seed)
    return getattr(split, which)


def _write(path: Path, text: str) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)


# ---------------------------------------------------------------------------
# subcommands


def cmd_generate(args) -> int:
    if args.spec:
        specs = data.load_class_specs(_existing(args.spec, "class spec file"))
    else:
        specs = data.default_class_specs()
    cfg = data.GeneratorConfig(
        samples_per_class=args.samples_per_class,
        regions=args.regions,
        noise_std=args.noise_std,
        cloud_fraction=args.cloud_fraction,
        min_observations=args.min_observations,
        seed=args.seed,
    )
    problems = cfg.problems()
    if problems:
        raise UsageError("invalid generator settings:\n  " + "\n  ".join(problems))
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    samples = data.generate(specs, cfg)
    data.save_dataset(out, samples, len(specs[0].base))
    data.save_class_specs(_class_spec_path(out), specs)
    print(f"wrote {out}: {data.summarize(samples)}")
    return 0


def _run_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config)
    t_over = {}
    for flag, key in (("alpha", "alpha"), ("epochs", "epochs"), ("lr", "learning_rate"),
                      ("batch_size", "batch_size"), ("seq_len", "seq_len"), ("loss_mode", "loss_mode"),
                      ("init_from", "init_from"), ("micro_batch", "micro_batch")):
        value = getattr(args, flag, None)
        if value is not None:
            t_over[key] = value
    seed = args.seed if getattr(args, "seed", None) is not None else cfg.seed
    if seed is not None:
        t_over["seed"] = seed
    m_over = {}
    for flag, key in (("hidden_dim", "hidden_dim"), ("num_layers", "num_layers"), ("dropout", "dropout_rate")):
        value = getattr(args, flag, None)
        if value is not None:
            m_over[key] = value
    try:
        cfg.train = replace(cfg.train, **t_over)
        cfg.model = replace(cfg.model, **m_over)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    if args.dataset:
        cfg.dataset = args.dataset
    if args.out_dir:
        cfg.output_dir = args.out_dir
    _existing(cfg.dataset, "dataset")
    if cfg.train.init_from:
        _existing(cfg.train.init_from, "initial parameter file")
    return cfg


def _prepare(cfg: RunConfig) -> tuple[data.DatasetSplit, model.ModelConfig]:
    samples = _load_samples(Path(cfg.dataset), cfg.model.input_dim)
    if not samples:
        raise UsageError(f"dataset {cfg.dataset} is empty")
    num_classes = max(s.label for s in samples) + 1
    mcfg = cfg.model
    if num_classes != mcfg.num_classes:
        log.info("setting num_classes=%d from the dataset", num_classes)
        mcfg = replace(mcfg, num_classes=num_classes)
    try:
        split = data.split_by_region(samples, tuple(cfg.split_fractions), cfg.split_seed)
    except data.DataError as exc:
        raise UsageError(str(exc)) from None
    return split, mcfg


def cmd_train(args) -> int:
    cfg = _run_config(args)
    split, mcfg = _prepare(cfg)
    cfg.model = mcfg
    out = _output_dir(None, cfg.output_dir)
    _write(out / "run_config.json", json.dumps(cfg.to_dict(), indent=2) + "\n")
    ckpt_path = out / "checkpoint.json"

    state = None
    if args.resume:
        state, mcfg_loaded, _ = training.load_checkpoint(_existing(args.resume, "checkpoint to resume"))
        if mcfg_loaded != mcfg:
            raise UsageError("resume checkpoint was trained with a different model config")

    def on_epoch(st):
        training.save_checkpoint(ckpt_path, st, mcfg, cfg.train)
        training.save_history(out / "history.csv", st.history)

    final, history, state = training.train(mcfg, cfg.train, split, state=state, on_epoch=on_epoch)
    training.save_checkpoint(ckpt_path, state, mcfg, cfg.train)
    training.save_history(out / "history.csv", history)
    model.save_parameters(out / "model.json", final, mcfg)
    if state.best_params is not None:
        model.save_parameters(out / "best_model.json", state.best_params, mcfg)
    last = history[-1] if history else None
    msg = f"trained {len(history)} epochs" + (
        f"; best val accuracy {state.best_val_accuracy:.4f} at epoch {state.best_epoch}" if last else ""
    )
    print(msg)
    print(f"outputs in {out}")
    return 0


def cmd_eval(args) -> int:
    ckpt = _existing(args.checkpoint, "checkpoint")
    dataset = _existing(args.dataset, "dataset")
    params, mcfg, tcfg = _load_model(ckpt)
    samples = _load_samples(dataset, mcfg.input_dim)
    if samples and max(s.label for s in samples) >= mcfg.num_classes:
        raise UsageError(f"dataset has labels beyond the model's {mcfg.num_classes} classes")
    chosen = _select(samples, args.split, _floats(args.fractions), args.split_seed)
    seq_len = args.seq_len or (tcfg.seq_len if tcfg else 70)
    names = _class_names(dataset, args.spec, mcfg.num_classes)
    report = evaluation.evaluate(params, mcfg, chosen, seq_len, args.stop_mode, args.repeats, args.seed, names)
    out = _output_dir(args.out_dir, str(ckpt.parent / "eval"))
    _write(out / "report.csv", evaluation.report_csv(report))
    _write(out / "confusion.csv", evaluation.confusion_csv(report.confusion))
    _write(out / "stop_stats.csv", evaluation.stop_stats_csv(report.stop_stats))
    if not args.no_figures:
        from . import plotting

        all_days = data.subsample_batch(chosen, seq_len, args.seed)[1]
        plotting.plot_stop_times(report, all_days, np.array([s.label for s in chosen]), out / "stop_times.png", names)
    print(f"evaluated {len(chosen)} samples ({args.stop_mode}, repeats={report.repeats})")
    print(report.summary())
    print(f"reports in {out}")
    return 0


def cmd_sweep(args) -> int:
    alphas = _floats(args.alphas)
    if not alphas:
        raise UsageError("--alphas must list at least one value")
    if any(not 0 <= a <= 1 for a in alphas):
        raise UsageError(f"alphas must lie in [0, 1], got {alphas}")
    if args.seeds < 1:
        raise UsageError("--seeds must be >= 1")
    cfg = _run_config(args)
    split, mcfg = _prepare(cfg)
    names = _class_names(Path(cfg.dataset), None, mcfg.num_classes)
    out = _output_dir(args.out_dir, cfg.output_dir)
    result = evaluation.alpha_sweep(mcfg, cfg.train, split, alphas, args.seeds, args.stop_mode,
                                    args.repeats, args.workers, class_names=names)
    _write(out / "sweep.csv", result.table_csv())
    _write(out / "sweep_cells.csv", result.cells_csv())
    if not args.no_figures:
        from . import plotting

        plotting.plot_sweep(result, out / "sweep.png")
    failed = [c for c in result.cells if c.report is None]
    print(result.table_csv(), end="")
    if failed:
        print(f"{len(failed)} of {len(result.cells)} cells failed; see sweep_cells.csv", file=sys.stderr)
    print(f"sweep written to {out / 'sweep.csv'}")
    return 1 if len(failed) == len(result.cells) else 0


def cmd_trace(args) -> int:
    ckpt = _existing(args.checkpoint, "checkpoint")
    dataset = _existing(args.dataset, "dataset")
    params, mcfg, tcfg = _load_model(ckpt)
    samples = {s.sample_id: s for s in _load_samples(dataset, mcfg.input_dim)}
    if args.sample_id not in samples:
        raise UsageError(f"sample id {args.sample_id} not in {dataset}")
    sample = samples[args.sample_id]
    seq_len = args.seq_len or (tcfg.seq_len if tcfg else 70)
    seq_len = min(seq_len, sample.length)
    X, days = data.subsample(sample, seq_len, (args.seed, 0, sample.sample_id))
    trace = model.forward(params, mcfg, X)
    P = stopping_distribution(trace.stop_probs)
    from .earliness import sample_stop

    decision = sample_stop(trace.stop_probs, args.seed, trace.class_scores)
    M = mcfg.num_classes
    lines = ["t,day,p_t,P_t," + ",".join(f"yhat_{k}" for k in range(M)) + ",stopped_flag"]
    for t in range(seq_len):
        row = [str(t), repr(float(days[t])), repr(float(trace.stop_probs[t])), repr(float(P[t]))]
        row += [repr(float(v)) for v in trace.class_scores[t]]
        row.append("1" if t == decision.t_stop else "0")
        lines.append(",".join(row))
    out = Path(args.out) if args.out else _output_dir(None, str(ckpt.parent)) / f"trace_{sample.sample_id}.csv"
    out.parent.mkdir(parents=True, exist_ok=True)
    _write(out, "\n".join(lines) + "\n")
    if not args.no_figures:
        from . import plotting

        names = _class_names(dataset, None, M)
        plotting.plot_trace(days, trace.class_scores, trace.stop_probs, P, decision.t_stop,
                            out.with_suffix(".png"), names, sample.label)
    print(f"sample {sample.sample_id} (label {sample.label}): stop at t={decision.t_stop} "
          f"day {days[decision.t_stop]:.0f}, predicted {decision.label}")
    print(f"trace written to {out}")
    return 0


# ---------------------------------------------------------------------------
# parser


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="run config JSON (flags override its values)")
    p.add_argument("--dataset", help="dataset CSV")
    p.add_argument("--out-dir", help=f"output directory (env {OUTPUT_ENV} overrides)")
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--micro-batch", type=int)
    p.add_argument("--seq-len", type=int)
    p.add_argument("--hidden-dim", type=int)
    p.add_argument("--num-layers", type=int)
    p.add_argument("--dropout", type=float)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="earlyclass", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="write a synthetic phenology dataset")
    p.add_argument("--spec", help="class spec JSON (default: built-in 9-class catalogue)")
    p.add_argument("--out", required=True, help="dataset CSV to write")
    p.add_argument("--samples-per-class", type=int, default=500)
    p.add_argument("--regions", type=int, default=20)
    p.add_argument("--noise-std", type=float, default=0.02)
    p.add_argument("--cloud-fraction", type=float, default=0.2)
    p.add_argument("--min-observations", type=int, default=70)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="train one model")
    _add_train_flags(p)
    p.add_argument("--alpha", type=float)
    p.add_argument("--loss-mode", choices=("early_reward", "cross_entropy_baseline"))
    p.add_argument("--init-from", help="start from a saved parameter file (pretrain then fine-tune)")
    p.add_argument("--resume", help="continue from a training checkpoint")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True, help="checkpoint.json or model.json")
    p.add_argument("--dataset", required=True)
    p.add_argument("--split", choices=("test", "val", "train", "all"), default="test")
    p.add_argument("--fractions", default="0.6,0.2,0.2")
    p.add_argument("--split-seed", type=int, default=0)
    p.add_argument("--stop-mode", choices=evaluation.STOP_MODES, default="sampled")
    p.add_argument("--repeats", type=int, default=1)
    p.add_argument("--seed", type=int, default=evaluation.EVAL_SEED)
    p.add_argument("--seq-len", type=int)
    p.add_argument("--spec", help="class spec JSON for class names")
    p.add_argument("--out-dir")
    p.add_argument("--no-figures", action="store_true")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", help="train and evaluate over a grid of alphas")
    _add_train_flags(p)
    p.add_argument("--alphas", required=True, help="comma-separated, e.g. 0.2,0.6,1.0")
    p.add_argument("--seeds", type=int, default=3, help="seeds per alpha")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--stop-mode", choices=evaluation.STOP_MODES, default="sampled")
    p.add_argument("--repeats", type=int, default=1)
    p.add_argument("--no-figures", action="store_true")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("trace", help="per-step predictions of one sample")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--sample-id", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--seq-len", type=int)
    p.add_argument("--out", help="CSV path (default next to the checkpoint)")
    p.add_argument("--no-figures", action="store_true")
    p.set_defaults(func=cmd_trace)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (training.TrainingError, training.CheckpointError, data.DataError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
