#! /usr/bin/env python3
"""
Command line front end::

    mergeforge gen-tasks --out data
    mergeforge init --out runs/base
    mergeforge finetune --task data/parity.jsonl --base runs/base --out runs/parity
    mergeforge merge --method divergence --level layer --base runs/base \\
        --checkpoints runs/parity runs/palindrome --data data/parity.jsonl data/palindrome.jsonl \\
        --out runs/merged
    mergeforge sweep / correlate / check / report ...

Exit status: 0 on success, 1 on numeric or convergence failure (and on
failed checks), 2 on usage errors.
"""

import argparse
import json
import logging
import os
import sys

import pandas as pd

from . import __version__
from .checkpoint import load_checkpoint, params_digest, save_checkpoint
from .config import RunConfig, thread_count
from .divergence import DivergenceKind
from .errors import ContractViolation, NumericError
from .evaluation import (aggregate_experiments, budget_curve, divergence_perf_correlation, iteration_curve,
                         merge_sweep, reference_perf, sweep_frame)
from .merging import MergeLevel, MergeLog, MergeMethod, MergeSpec, OptimizerConfig, merge
from .model import ModelConfig, init_model
from .streams import substream
from .tasks import (CLASSIFICATION, DEFAULT_CLASSIFICATION, DEFAULT_GENERATION, GENERATION, TaskSpec,
                    make_classification_task, make_disjoint_suite, make_generation_task, read_tasks, write_tasks)
from .theory import (check_cross_entropy_identity, check_disentanglement, check_kracher_span, check_tv_bound)
from .trainer import TrainConfig, TrainLog, finetune, task_vector

logger = logging.getLogger(__name__)

LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"

METHOD_ALIASES = {
    "avg": MergeMethod.AVERAGE.value,
    "ta": MergeMethod.TASK_ARITHMETIC.value,
    "divergence": MergeMethod.DIVERGENCE_GUIDED.value,
    "entropy": MergeMethod.ENTROPY_MIN.value,
    "adamerging": MergeMethod.ENTROPY_MIN.value,
}
METHOD_CHOICES = sorted([m.value for m in MergeMethod] + list(METHOD_ALIASES))
CHECKS = ("disentanglement", "tv_bound", "cross_entropy", "kracher_span")


def configure_logging(verbose=False, quiet=False):
    level = logging.DEBUG if verbose else logging.WARNING if quiet else logging.INFO
    logging.basicConfig(level=level, format=LOG_FORMAT)
    logging.getLogger().setLevel(level)


def show_progress(args):
    return not args.quiet and sys.stderr.isatty()


def method_name(value):
    return MergeMethod(METHOD_ALIASES.get(value, value))


def build_spec(section, seed, method=None):
    """MergeSpec from the resolved ``merge`` configuration section."""
    method = method_name(method or section["method"])
    kwargs = {"track": section["track"]}
    if method in (MergeMethod.DIVERGENCE_GUIDED, MergeMethod.ENTROPY_MIN):
        level = MergeLevel(section["level"])
        kwargs["level"] = level
        kwargs["optimizer"] = OptimizerConfig.preset(
            method, level, section["track"], learning_rate=section["learning_rate"], epochs=section["epochs"],
            init=section["init"], dataset_size=section["budget"], batch_per_task=section["batch_per_task"],
            seed=seed, max_new_tokens=section["max_new_tokens"])
        if method is MergeMethod.DIVERGENCE_GUIDED:
            kwargs["divergence"] = DivergenceKind(section["divergence"])
    elif method is MergeMethod.TIES:
        kwargs.update(mask_rate=section["mask_rate"], ties_lambda=section["ties_lambda"])
    elif method is MergeMethod.SLERP:
        kwargs["slerp_t"] = section["slerp_t"]
    elif method is MergeMethod.TASK_ARITHMETIC:
        kwargs["scale"] = section["scale"]
    return MergeSpec(method, **kwargs)


def load_base(path):
    params, _ = load_checkpoint(path)
    if params.config is None:
        raise ContractViolation("base checkpoint {} carries no model config".format(path))
    return params


def load_finetuned(paths):
    """Checkpoints and the task id recorded in each manifest (directory name otherwise)."""
    models, ids = [], []
    for path in paths:
        params, manifest = load_checkpoint(path)
        models.append(params)
        ids.append(manifest.get("provenance", {}).get("task_id") or os.path.basename(os.path.normpath(path)))
    return models, ids


def load_matching_tasks(paths, expected):
    tasks = read_tasks(paths)
    if expected is not None and len(tasks) != expected:
        raise ContractViolation("{} task files given for {} checkpoints".format(len(tasks), expected))
    return tasks


def guard_output(out, inputs):
    out = os.path.abspath(out)
    for path in inputs or ():
        if os.path.abspath(path) == out:
            raise ContractViolation("refusing to overwrite input directory {}".format(path))


def write_frame(frame, path):
    frame.to_csv(path, index=False, float_format="%.12g")
    logger.info("wrote %s", path)


# --------------------------------------------------------------------------- #
# subcommands
# --------------------------------------------------------------------------- #

def cmd_gen_tasks(args, config):
    section, seed = config["tasks"], config.seed
    sizes = (section["n_train"], section["n_validation"], section["n_test"])
    if section["disjoint"]:
        tasks = make_disjoint_suite(section["n_disjoint"], seed, *sizes)
    else:
        tasks = [make_classification_task(TaskSpec(CLASSIFICATION, rule, *sizes), seed)
                 for rule in section["classification"] or DEFAULT_CLASSIFICATION]
        tasks += [make_generation_task(TaskSpec(GENERATION, rule, *sizes), seed)
                  for rule in section["generation"] or DEFAULT_GENERATION]
    write_tasks(tasks, args.out)
    config.write(args.out, "gen-tasks")
    logger.info("wrote %d tasks to %s", len(tasks), args.out)
    return 0


def cmd_init(args, config):
    model_config = ModelConfig(**config["model"])
    params = init_model(model_config, config.seed)
    save_checkpoint(params, args.out, seed=config.seed, provenance={"command": "init"})
    config.write(args.out, "init")
    logger.info("initialised %d parameters in %s", params.size, args.out)
    return 0


def cmd_finetune(args, config):
    guard_output(args.out, [args.base])
    base = load_base(args.base)
    task = read_tasks([args.task])[0]
    section = config["finetune"]
    train_config = TrainConfig(learning_rate=section["learning_rate"], batch_size=section["batch_size"],
                               epochs=section["epochs"], seed=config.seed)
    log = TrainLog()
    tuned = finetune(base, task, train_config, log=log, progress=show_progress(args))
    provenance = {"command": "finetune", "task_id": task.task_id, "base": params_digest(base),
                  "train_config": train_config.to_dict(), "train_log": log.to_dict()}
    save_checkpoint(tuned, args.out, seed=config.seed, provenance=provenance)
    config.write(args.out, "finetune")
    logger.info("fine-tuned %s in %d steps", task.task_id, log.steps)
    return 0


def cmd_merge(args, config):
    guard_output(args.out, [args.base] + args.checkpoints)
    spec = build_spec(config["merge"], config.seed)
    base = load_base(args.base)
    models, ids = load_finetuned(args.checkpoints)
    tvs = [task_vector(base, model, task_id) for model, task_id in zip(models, ids)]
    validation = None
    if args.data:
        validation = [t.prompts("validation") for t in load_matching_tasks(args.data, len(models))]
    result = merge(spec, base, tvs, validation, progress=show_progress(args))
    provenance = {"command": "merge", "spec": spec.to_dict(), "task_ids": ids,
                  "base": params_digest(base)}
    save_checkpoint(result.params, args.out, seed=config.seed, provenance=provenance)
    result.log.write(os.path.join(args.out, "merge_log.json"))
    config.write(args.out, "merge")
    return 0


def _finetuned_suite(args):
    base = load_base(args.base) if getattr(args, "base", None) else None
    models, _ = load_finetuned(args.checkpoints)
    tasks = load_matching_tasks(args.data, len(models))
    return base, models, tasks


def cmd_sweep(args, config):
    section = config["sweep"]
    base, models, tasks = _finetuned_suite(args)
    k_max = section["k_max"] or len(models)
    threads = thread_count()
    denominators = reference_perf(tasks, models, max_new_tokens=config["merge"]["max_new_tokens"])
    frames = []
    os.makedirs(args.out, exist_ok=True)
    for method in section["methods"]:
        spec = build_spec(config["merge"], config.seed, method)
        reports = merge_sweep(base, models, tasks, spec, range(section["k_min"], k_max + 1), denominators,
                              threads, show_progress(args), config["merge"]["max_new_tokens"])
        frame = sweep_frame(reports, spec)
        write_frame(frame, os.path.join(args.out, "sweep_{}.csv".format(spec.describe().replace("/", "_"))))
        frames.append(frame)
    summary = aggregate_experiments(pd.concat(frames, ignore_index=True))
    write_frame(summary, os.path.join(args.out, "summary.csv"))
    config.write(args.out, "sweep")
    return 0


def cmd_correlate(args, config):
    _, models, tasks = _finetuned_suite(args)
    report = divergence_perf_correlation(models, tasks, config["merge"]["divergence"], args.out,
                                         thread_count(), config["merge"]["max_new_tokens"])
    with open(os.path.join(args.out, "correlation.json"), "w", encoding="utf-8") as f:
        json.dump({"kind": report.kind, "per_task": report.per_task, "average": report.average}, f,
                  indent=2, sort_keys=True)
        f.write("\n")
    config.write(args.out, "correlate")
    return 0


def perturbed_prompts(prompts, fresh, fraction, rng):
    """``prompts`` with a ``fraction`` of entries swapped for prompts from ``fresh``."""
    out = list(prompts)
    count = min(int(round(fraction * len(out))), len(fresh))
    for i, j in zip(rng.choice(len(out), count, replace=False), rng.choice(len(fresh), count, replace=False)):
        out[i] = fresh[j]
    return out


def cmd_check(args, config):
    wanted = CHECKS if args.all else args.checks
    if not wanted:
        raise ContractViolation("name at least one check or pass --all")
    max_new = config["merge"]["max_new_tokens"]
    models = tasks = base = merged = None
    if args.checkpoints:
        models, ids = load_finetuned(args.checkpoints)
    if args.data:
        tasks = load_matching_tasks(args.data, len(models) if models else None)
    if args.base:
        base = load_base(args.base)
    if args.merged:
        merged, _ = load_checkpoint(args.merged)

    reports = []
    for check in wanted:
        if check == "cross_entropy":
            reports.append(check_cross_entropy_identity(args.trials, seed=config.seed))
        elif check == "kracher_span" and base is not None and models:
            reports.append(check_kracher_span([task_vector(base, m, i) for m, i in zip(models, ids)]))
        elif check == "disentanglement" and merged is not None and models and tasks:
            reports.append(check_disentanglement(merged, models, tasks, args.epsilon, max_new_tokens=max_new))
        elif check == "tv_bound" and merged is not None and models and tasks:
            rng = substream(config.seed, "tv_bound")
            prompts = tasks[0].prompts("validation")
            for trial in range(args.trials_tv):
                perturbed = perturbed_prompts(prompts, tasks[0].prompts("test"), args.swap, rng)
                report = check_tv_bound(models[0], merged, prompts, perturbed, max_new)
                report.check_id = "tv_bound_{}".format(trial)
                reports.append(report)
        elif args.all:
            logger.warning("skipping %s: required checkpoints or data not given", check)
        else:
            raise ContractViolation("check {} needs more inputs (see --help)".format(check))

    document = [r.to_dict() for r in reports]
    os.makedirs(args.out, exist_ok=True)
    with open(os.path.join(args.out, "checks.json"), "w", encoding="utf-8") as f:
        json.dump(document, f, indent=2, sort_keys=True)
        f.write("\n")
    config.write(args.out, "check")
    failed = [r.check_id for r in reports if not r.passed]
    if failed:
        logger.warning("failed checks: %s", ", ".join(failed))
        return 1
    return 0


def cmd_report(args, config):
    section = config["report"]
    os.makedirs(args.out, exist_ok=True)
    max_new = config["merge"]["max_new_tokens"]
    if section["curve"] == "iterations":
        if not args.log:
            raise ContractViolation("--curve iterations needs --log")
        log = MergeLog.read(args.log)
        base = tvs = tasks = None
        if args.base and args.checkpoints and args.data:
            base, models, tasks = _finetuned_suite(args)
            tvs = [task_vector(base, m, i) for m, i in zip(models, log.task_ids)]
            denominators = reference_perf(tasks, models, max_new_tokens=max_new)
        else:
            denominators = None
        frame = iteration_curve(log, base, tvs, tasks, denominators, section["every"], max_new)
        write_frame(frame, os.path.join(args.out, "iteration_curve.csv"))
    elif section["curve"] == "budget":
        base, models, tasks = _finetuned_suite(args)
        spec = build_spec(config["merge"], config.seed)
        frame = budget_curve(base, models, tasks, section["sizes"], spec, max_new_tokens=max_new)
        write_frame(frame, os.path.join(args.out, "budget_curve.csv"))
    elif section["curve"] == "summary":
        if not args.inputs:
            raise ContractViolation("--curve summary needs --inputs")
        frames = [pd.read_csv(path, keep_default_na=False) for path in args.inputs]
        write_frame(aggregate_experiments(pd.concat(frames, ignore_index=True)),
                    os.path.join(args.out, "summary.csv"))
    else:
        raise ContractViolation("unknown curve: {}".format(section["curve"]))
    config.write(args.out, "report")
    return 0


# --------------------------------------------------------------------------- #
# argument parsing
# --------------------------------------------------------------------------- #

def _sizes(text):
    try:
        return [int(v) for v in text.split(",") if v]
    except ValueError:
        raise argparse.ArgumentTypeError("expected comma-separated integers, got {!r}".format(text))


def _add_merge_flags(parser, method=True):
    if method:
        parser.add_argument("--method", choices=METHOD_CHOICES, help="merging method")
    parser.add_argument("--level", choices=[l.value for l in MergeLevel], help="coefficient granularity")
    parser.add_argument("--divergence", choices=[k.value for k in DivergenceKind], help="divergence for guided merging")
    parser.add_argument("--track", choices=[CLASSIFICATION, GENERATION], help="preset track")
    parser.add_argument("--budget", type=int, help="validation examples per task")
    parser.add_argument("--lr", dest="learning_rate", type=float, help="coefficient learning rate")
    parser.add_argument("--epochs", type=int, help="coefficient optimisation epochs")
    parser.add_argument("--init", type=float, help="initial coefficient value")
    parser.add_argument("--mask-rate", type=float, help="TIES kept fraction")
    parser.add_argument("--ties-lambda", type=float, help="TIES scaling")
    parser.add_argument("--slerp-t", type=float, help="SLERP interpolation point")
    parser.add_argument("--scale", type=float, help="task arithmetic coefficient")
    parser.add_argument("--max-new-tokens", type=int, help="generation length cap")


MERGE_KEYS = ("method", "level", "divergence", "track", "budget", "learning_rate", "epochs", "init",
              "mask_rate", "ties_lambda", "slerp_t", "scale", "max_new_tokens")


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="FILE", help="YAML configuration file")
    common.add_argument("--seed", type=int, help="global random seed")
    verbosity = common.add_mutually_exclusive_group()
    verbosity.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    verbosity.add_argument("-q", "--quiet", action="store_true", help="warnings only, no progress bars")

    parser = argparse.ArgumentParser(prog="mergeforge",
                                     description="Fine-tune toy language models and merge them with "
                                                 "divergence-guided coefficients.")
    parser.add_argument("--version", action="version", version="%(prog)s " + __version__)
    sub = parser.add_subparsers(dest="command", metavar="command")
    sub.required = True

    p = sub.add_parser("gen-tasks", parents=[common], help="write synthetic task suites")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--disjoint", action="store_true", default=None, help="sentinel-prefixed disjoint suite")
    p.add_argument("--n-disjoint", type=int, help="tasks in the disjoint suite")
    p.add_argument("--n-train", type=int)
    p.add_argument("--n-validation", type=int)
    p.add_argument("--n-test", type=int)
    p.add_argument("--classification", nargs="+", metavar="RULE")
    p.add_argument("--generation", nargs="+", metavar="TRANSFORM")
    p.set_defaults(handler=cmd_gen_tasks)

    p = sub.add_parser("init", parents=[common], help="write a randomly initialised base checkpoint")
    p.add_argument("--out", required=True)
    p.add_argument("--d-model", type=int)
    p.add_argument("--n-layers", type=int)
    p.add_argument("--n-heads", type=int)
    p.add_argument("--max-seq-len", type=int)
    p.set_defaults(handler=cmd_init)

    p = sub.add_parser("finetune", parents=[common], help="fine-tune the base on one task")
    p.add_argument("--task", required=True, help="task JSONL file")
    p.add_argument("--base", required=True, help="base checkpoint directory")
    p.add_argument("--out", required=True)
    p.add_argument("--lr", dest="learning_rate", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--epochs", type=int)
    p.set_defaults(handler=cmd_finetune)

    p = sub.add_parser("merge", parents=[common], help="merge fine-tuned checkpoints")
    p.add_argument("--base", required=True)
    p.add_argument("--checkpoints", nargs="+", required=True)
    p.add_argument("--data", nargs="+", help="task files, one per checkpoint")
    p.add_argument("--out", required=True)
    _add_merge_flags(p)
    p.set_defaults(handler=cmd_merge)

    p = sub.add_parser("sweep", parents=[common], help="merge every k-subset of the checkpoints")
    p.add_argument("--base", required=True)
    p.add_argument("--checkpoints", nargs="+", required=True)
    p.add_argument("--data", nargs="+", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--methods", nargs="+", choices=METHOD_CHOICES)
    p.add_argument("--k-min", type=int)
    p.add_argument("--k-max", type=int)
    _add_merge_flags(p, method=False)
    p.set_defaults(handler=cmd_sweep)

    p = sub.add_parser("correlate", parents=[common], help="divergence versus cross-task performance")
    p.add_argument("--checkpoints", nargs="+", required=True)
    p.add_argument("--data", nargs="+", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--divergence", choices=[k.value for k in DivergenceKind])
    p.add_argument("--max-new-tokens", type=int)
    p.set_defaults(handler=cmd_correlate)

    p = sub.add_parser("check", parents=[common], help="run the theory checks")
    p.add_argument("--out", required=True)
    p.add_argument("--all", action="store_true")
    p.add_argument("--checks", nargs="+", choices=CHECKS, default=[])
    p.add_argument("--base")
    p.add_argument("--merged")
    p.add_argument("--checkpoints", nargs="+")
    p.add_argument("--data", nargs="+")
    p.add_argument("--epsilon", type=float, default=0.1)
    p.add_argument("--trials", type=int, default=10000, help="cross-entropy identity trials")
    p.add_argument("--trials-tv", type=int, default=50, help="randomized TV-bound perturbations")
    p.add_argument("--swap", type=float, default=0.2, help="fraction of prompts swapped per perturbation")
    p.add_argument("--max-new-tokens", type=int)
    p.set_defaults(handler=cmd_check)

    p = sub.add_parser("report", parents=[common], help="curves and summaries for plotting")
    p.add_argument("--out", required=True)
    p.add_argument("--curve", choices=["iterations", "budget", "summary"])
    p.add_argument("--log", help="merge_log.json to replay")
    p.add_argument("--sizes", type=_sizes, help="comma-separated validation budgets")
    p.add_argument("--every", type=int, help="replay every n-th iteration")
    p.add_argument("--inputs", nargs="+", help="sweep CSVs to aggregate")
    p.add_argument("--base")
    p.add_argument("--checkpoints", nargs="+")
    p.add_argument("--data", nargs="+")
    _add_merge_flags(p)
    p.set_defaults(handler=cmd_report)
    return parser


def overrides_from(args):
    """Map parsed flags onto configuration sections; unset flags stay None."""
    flags = vars(args)

    def pick(keys, renames=None):
        renames = renames or {}
        return {renames.get(k, k): flags.get(k) for k in keys if k in flags}

    overrides = {
        "seed": flags.get("seed"),
        "model": pick(("d_model", "n_layers", "n_heads", "max_seq_len")),
        "tasks": pick(("n_train", "n_validation", "n_test", "disjoint", "n_disjoint", "classification",
                       "generation")),
        "sweep": pick(("methods", "k_min", "k_max")),
        "report": pick(("curve", "sizes", "every")),
    }
    if args.command == "finetune":
        overrides["finetune"] = pick(("learning_rate", "batch_size", "epochs"))
    else:
        overrides["merge"] = pick(MERGE_KEYS)
    return overrides


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    configure_logging(args.verbose, args.quiet)
    try:
        config = RunConfig.resolve(args.config, overrides_from(args))
        return args.handler(args, config)
    except (ContractViolation, FileNotFoundError) as exc:
        logger.error("%s", exc)
        return 2
    except NumericError as exc:
        logger.error("%s", exc)
        return 1


if __name__ == "__main__":
    sys.exit(main())
