import asyncio
import glob
import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from typing import Any, Dict, List, Optional, Sequence

import markdown
import pandas as pd
import torch

from .checkpoint import load_checkpoint, save_checkpoint
from .config import ExperimentConfig, apply_overrides, load_config
from .curriculum import run_variant
from .errors import CGCTError, ConfigurationError
from .evaluation import Metrics, evaluate, export_embeddings
from .variants import PROFILES, Variant

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_CONFIG = 2

METRICS_FILE = "metrics.jsonl"
STATE_LOG_FILE = "state_log.jsonl"
RESOLVED_CONFIG_FILE = "config.cfg"


def run_directory(output_dir: str, variant: str, seed: int) -> str:
    return os.path.join(output_dir, variant, str(seed))


def _dumps(record: Dict[str, Any]) -> str:
    return json.dumps(record, sort_keys=True)


def run_seed(config: ExperimentConfig, seed: int) -> Dict[str, Any]:
    """
    Builds the task for one seed, runs the variant and writes its artifacts.

    Writes ``<out>/<variant>/<seed>/state_log.jsonl``, ``step_<q>.ckpt`` after
    every curriculum step, ``final.ckpt`` and optionally ``embeddings.csv``.

    Args:
        config (ExperimentConfig): Resolved experiment config.
        seed (int): Seed of the task (when it has none of its own) and of training.

    Returns:
        dict: The metrics record of the run.
    """
    if config.run.num_threads:
        torch.set_num_threads(config.run.num_threads)
    variant = config.variant_name
    run_dir = run_directory(config.run.output_dir, variant, seed)
    os.makedirs(run_dir, exist_ok=True)

    task = config.task.build(seed)
    architecture = config.model.architecture(task)

    def save_step(step: int, bundle, record: Dict[str, Any]) -> None:
        if config.run.save_checkpoints:
            save_checkpoint(
                os.path.join(run_dir, f"step_{step}.ckpt"),
                bundle,
                meta={"variant": variant, "seed": seed, "step": step},
            )

    result = run_variant(
        task,
        config.variant_config(seed),
        config.loss,
        architecture=architecture,
        degree_of=config.graph.degree_of,
        step_callback=save_step,
        dump_dir=run_dir,
    )

    with open(os.path.join(run_dir, STATE_LOG_FILE), "w", encoding="utf-8") as f:
        for entry in result.state_log:
            f.write(_dumps(entry) + "\n")
    if config.run.save_checkpoints:
        save_checkpoint(
            os.path.join(run_dir, "final.ckpt"),
            result.bundle,
            meta={"variant": variant, "seed": seed, "step": "final"},
        )
    if config.run.export_embeddings:
        export_embeddings(result.bundle, task, os.path.join(run_dir, "embeddings.csv"))

    metrics = evaluate(
        result.bundle, task, head=config.variant.profile.classifier, degree_of=config.graph.degree_of
    )
    metrics.step_losses = [entry["losses"] for entry in result.state_log]
    metrics.pseudo_label_counts = [entry["pseudo_labels"] for entry in result.state_log]
    record = {"variant": variant, "seed": seed, **metrics.to_record()}
    record["steps"] = [
        {k: h[k] for k in ("step", "stage", "average", "accuracy") if k in h} for h in result.history
    ]
    record["selection"] = [entry["selected_domain"] for entry in result.state_log]
    return record


def summarize(records: Sequence[Dict[str, Any]]) -> pd.DataFrame:
    """
    Mean and population standard deviation over seeds, one row per variant.

    Per-target accuracy columns are named ``acc_<domain>``.
    """
    if not records:
        raise ConfigurationError("No metrics records to summarize")
    rows = []
    for record in records:
        row = {"variant": record["variant"], "seed": record["seed"], "average": record["average"]}
        row.update({f"acc_{name}": value for name, value in record["accuracy"].items()})
        rows.append(row)
    frame = pd.DataFrame(rows)
    value_columns = [c for c in frame.columns if c not in ("variant", "seed")]
    grouped = frame.groupby("variant", sort=False)
    summary = grouped[value_columns].mean()
    std = grouped[value_columns].std(ddof=0).add_suffix("_std")
    summary = summary.join(std)
    summary.insert(0, "seeds", grouped["seed"].count())
    return summary.reset_index()


def summary_markdown(summary: pd.DataFrame, title: str = "Summary") -> str:
    """Human readable table with mean ± std per value column."""
    value_columns = [c for c in summary.columns if c not in ("variant", "seeds") and not c.endswith("_std")]
    header = ["variant", "seeds"] + value_columns
    lines = [f"# {title}", "", "| " + " | ".join(header) + " |", "|" + "---|" * len(header)]
    for _, row in summary.iterrows():
        cells = [str(row["variant"]), str(int(row["seeds"]))]
        cells += [f"{row[c]:.4f} ± {row[c + '_std']:.4f}" for c in value_columns]
        lines.append("| " + " | ".join(cells) + " |")
    return "\n".join(lines) + "\n"


def write_summary(records: Sequence[Dict[str, Any]], output_dir: str, name: str = "summary") -> str:
    """
    Writes ``<name>.jsonl``, ``<name>.md`` and ``<name>.html`` into output_dir.

    Returns:
        str: The markdown table.
    """
    summary = summarize(records)
    os.makedirs(output_dir, exist_ok=True)
    with open(os.path.join(output_dir, f"{name}.jsonl"), "w", encoding="utf-8") as f:
        for row in summary.to_dict(orient="records"):
            f.write(_dumps(row) + "\n")
    table = summary_markdown(summary)
    with open(os.path.join(output_dir, f"{name}.md"), "w", encoding="utf-8") as f:
        f.write(table)
    with open(os.path.join(output_dir, f"{name}.html"), "w", encoding="utf-8") as f:
        f.write(markdown.markdown(table, extensions=["tables"]))
    return table


def _prepare(
    config_path: str, seed: Optional[int], out: Optional[str], variant: Optional[str]
) -> ExperimentConfig:
    config = apply_overrides(load_config(config_path), seed=seed, out=out, variant=variant)
    config.task.check_paths()
    config.variant.resolve_steps(len(config.task.targets) or len(config.task.shift_magnitudes))
    return config


async def _run_seeds(config: ExperimentConfig) -> List[Dict[str, Any]]:
    seeds = list(config.run.seeds)
    if config.run.parallel_seeds and len(seeds) > 1:
        loop = asyncio.get_running_loop()
        with ProcessPoolExecutor(max_workers=len(seeds)) as pool:
            futures = [loop.run_in_executor(pool, run_seed, config, seed) for seed in seeds]
            return list(await asyncio.gather(*futures))
    records = []
    for seed in seeds:
        records.append(await asyncio.to_thread(run_seed, config, seed))
    return records


async def execute(config: ExperimentConfig) -> List[Dict[str, Any]]:
    """
    Runs every seed of a resolved config and writes metrics, resolved config and summary.

    Records are appended to ``metrics.jsonl`` in seed order.
    """
    out_dir = os.path.join(config.run.output_dir, config.variant_name)
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, RESOLVED_CONFIG_FILE), "w", encoding="utf-8") as f:
        f.write(config.to_text())
    metrics_path = os.path.join(out_dir, METRICS_FILE)
    open(metrics_path, "w", encoding="utf-8").close()

    records = await _run_seeds(config)
    for record in sorted(records, key=lambda r: list(config.run.seeds).index(r["seed"])):
        with open(metrics_path, "a", encoding="utf-8") as f:
            f.write(_dumps(record) + "\n")
        logger.info("%s seed %d: average target accuracy %.4f", record["variant"], record["seed"], record["average"])
    table = write_summary(records, out_dir)
    print(table)
    print(f"Metrics written to {metrics_path}")
    return records


async def run_experiment(
    config_path: str,
    seed: Optional[int] = None,
    out: Optional[str] = None,
    variant: Optional[str] = None,
) -> int:
    """
    Runs the experiment described by a config file.

    Args:
        config_path (str): Path of the config file.
        seed (int, optional): Runs only this seed.
        out (str, optional): Overrides the output directory.
        variant (str, optional): Overrides the variant.

    Returns:
        int: 0 on success, 2 for an invalid config (before training), 1 for any other failure.
    """
    try:
        config = _prepare(config_path, seed, out, variant)
    except ConfigurationError as e:
        logger.error("Invalid configuration: %s", e)
        return EXIT_CONFIG
    try:
        await execute(config)
    except (CGCTError, OSError, RuntimeError, ValueError) as e:
        logger.exception("Experiment %s failed: %s", config_path, e)
        return EXIT_FAILURE
    return EXIT_OK


def _checkpoint_task(checkpoint_path: str, config_path: str, seed: Optional[int]):
    config = load_config(config_path)
    checkpoint = load_checkpoint(checkpoint_path)
    run_seed_value = seed if seed is not None else checkpoint.meta.get("seed", config.run.seeds[0])
    task = config.task.build(int(run_seed_value))
    if checkpoint.bundle.config.n_c != task.n_c:
        raise ConfigurationError(
            f"Checkpoint has {checkpoint.bundle.config.n_c} classes, task has {task.n_c}"
        )
    return checkpoint, task


def evaluate_checkpoint(checkpoint_path: str, config_path: str, seed: Optional[int] = None) -> Metrics:
    """
    Evaluates a saved bundle on the task of a config; the seed defaults to the checkpoint's.

    The head scored is the classifying head of the variant recorded in the
    checkpoint, or of the config's variant when the checkpoint names none.
    """
    checkpoint, task = _checkpoint_task(checkpoint_path, config_path, seed)
    config = load_config(config_path)
    name = checkpoint.meta.get("variant", config.variant_name)
    try:
        variant = Variant(name)
    except ValueError as e:
        raise ConfigurationError(f"Checkpoint names an unknown variant {name!r}") from e
    return evaluate(
        checkpoint.bundle, task, head=PROFILES[variant].classifier, degree_of=config.graph.degree_of
    )


def export_checkpoint_embeddings(
    checkpoint_path: str, config_path: str, output_path: str, seed: Optional[int] = None
) -> str:
    checkpoint, task = _checkpoint_task(checkpoint_path, config_path, seed)
    return export_embeddings(checkpoint.bundle, task, output_path)


async def run_sweep(config_dir: str, out: Optional[str] = None) -> int:
    """
    Runs every ``*.cfg`` in a directory and writes one combined summary.

    The combined ``sweep_summary.*`` files go to the sweep's output directory
    (``--out`` or the first config's output directory).
    """
    paths = sorted(glob.glob(os.path.join(config_dir, "*.cfg")))
    if not paths:
        logger.error("No *.cfg files in %s", config_dir)
        return EXIT_CONFIG
    try:
        configs = [_prepare(path, None, out, None) for path in paths]
    except ConfigurationError as e:
        logger.error("Invalid configuration: %s", e)
        return EXIT_CONFIG

    all_records: List[Dict[str, Any]] = []
    for path, config in zip(paths, configs):
        logger.info("Sweep: running %s (%s)", path, config.variant_name)
        try:
            all_records.extend(await execute(config))
        except (CGCTError, OSError, RuntimeError, ValueError) as e:
            logger.exception("Sweep entry %s failed: %s", path, e)
            return EXIT_FAILURE

    sweep_dir = out or configs[0].run.output_dir
    print(write_summary(all_records, sweep_dir, name="sweep_summary"))
    return EXIT_OK
