"""
Operator-facing command line: run sessions against a backend, generate
synthetic training data, train and evaluate the difficulty estimator,
analyze trace files, and manage config files.

Exit codes: 0 success, 1 input error, 2 backend error.
"""

from __future__ import annotations

import json
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import click
import numpy as np

from . import analyzer as ana
from .backends import OpenAICompatBackend, ScriptedBackend
from .config import (ConfigError, FsmConfig, SamplingConfig, dump_config_file,
                     load_config_file, override, validate_config,
                     validate_sampling_config)
from .embeddings import HashedProjectionProvider, HttpEmbeddingProvider
from .orchestrator import BackendFailure, run_session
from .pilot import (ConstantDifficultyPilot, PilotModel, TrainConfig,
                    TrainSample, load_checkpoint, make_synth_dataset,
                    save_checkpoint, train)
from .trace import TraceDocument, read_traces

__all__ = ["cli", "entrypoint", "BadManifest", "normalize_answer", "grade"]


class BadManifest(ValueError):
    """The run description references missing files or is malformed."""


def normalize_answer(s: str) -> str:
    return " ".join(s.split())


def grade(extracted: str | None, gold: str) -> bool:
    """Exact match on the boxed string after whitespace normalization.
    Stricter than math-equivalence grading, but fully reproducible."""
    return extracted is not None and normalize_answer(extracted) == normalize_answer(gold)


def _load_dataset(path: str) -> list[dict]:
    p = Path(path)
    if not p.exists():
        raise BadManifest(f"dataset path does not exist: {path}")
    rows = []
    with open(p, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                row = json.loads(line)
                rows.append({"id": str(row["id"]), "question": row["question"],
                             "gold": row.get("gold")})
            except (json.JSONDecodeError, KeyError) as e:
                raise BadManifest(f"{path}:{lineno}: bad dataset row: {e}") from None
    if not rows:
        raise BadManifest(f"dataset {path} is empty")
    return rows


def _load_configs(config_path: str | None, fsm_over: dict, samp_over: dict):
    if config_path:
        if not Path(config_path).exists():
            raise BadManifest(f"config path does not exist: {config_path}")
        fsm, sampling = load_config_file(config_path)
    else:
        fsm, sampling = FsmConfig(), SamplingConfig()
    fsm = override(fsm, **fsm_over)
    sampling = override(sampling, **samp_over)
    return validate_config(fsm), validate_sampling_config(sampling)


_FSM_FLAGS = ["tau_fast", "tau_slow", "tau_skip", "delta", "k_fast", "k_slow", "k_skip"]
_SAMP_FLAGS = ["temperature", "top_p", "max_total_tokens", "top_k_logprobs"]


def _config_options(fn):
    for name in reversed(_FSM_FLAGS):
        kind = int if name.startswith("k_") else float
        fn = click.option(f"--{name.replace('_', '-')}", type=kind, default=None,
                          help=f"override fsm.{name}")(fn)
    for name in reversed(_SAMP_FLAGS):
        kind = int if name in ("max_total_tokens", "top_k_logprobs") else float
        fn = click.option(f"--{name.replace('_', '-')}", type=kind, default=None,
                          help=f"override sampling.{name}")(fn)
    return fn


@click.group()
def cli():
    """Adaptive reasoning-depth controller tools."""


@cli.command("init-config")
@click.option("--out", type=click.Path(), default="cotpilot.json", show_default=True)
def cmd_init_config(out):
    """Write a config file with the default thresholds and sampling."""
    dump_config_file(out, FsmConfig(), SamplingConfig())
    click.echo(f"wrote {out}")


@cli.command("run")
@click.option("--manifest", type=str, default=None,
              help="JSON run description; flags override its fields")
@click.option("--dataset", type=str, default=None,
              help="JSONL question list: {id, question, gold}")
@click.option("--script", type=str, default=None,
              help="script file for the deterministic scripted backend")
@click.option("--base-url", type=str, default=None,
              help="OpenAI-compatible completions endpoint base URL")
@click.option("--model", type=str, default=None, help="model name for --base-url")
@click.option("--config", "config_path", type=str, default=None,
              help="JSON config file ({fsm, sampling})")
@click.option("--pilot-checkpoint", type=str, default=None)
@click.option("--constant-difficulty", type=float, default=None,
              help="use a stub scorer pinned to this difficulty")
@click.option("--embedding-url", type=str, default=None,
              help="HTTP embedding service; default is the hashing provider")
@click.option("--traces-out", type=str, required=True)
@click.option("--grades-out", type=str, default=None,
              help="also write a grades JSON keyed by question id")
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--parallel", type=int, default=1, show_default=True)
@click.option("--include-timing", is_flag=True,
              help="persist wall-clock controller overhead (breaks byte "
                   "reproducibility of trace files)")
@_config_options
def cmd_run(manifest, dataset, script, base_url, model, config_path,
            pilot_checkpoint, constant_difficulty, embedding_url, traces_out,
            grades_out, seed, parallel, include_timing, **flags):
    """Run one session per dataset question and append traces as JSONL."""
    if manifest:
        if not Path(manifest).exists():
            raise BadManifest(f"manifest does not exist: {manifest}")
        try:
            with open(manifest, encoding="utf-8") as f:
                m = json.load(f)
        except json.JSONDecodeError as e:
            raise BadManifest(f"manifest is not valid JSON: {e}") from None
        dataset = dataset or m.get("dataset")
        script = script or m.get("script")
        base_url = base_url or m.get("base_url")
        model = model or m.get("model")
        config_path = config_path or m.get("config")
        seed = m.get("seed", seed)
    if not dataset:
        raise BadManifest("no dataset given")
    if not script and not base_url:
        raise BadManifest("no backend selected: give --script or --base-url")

    rows = _load_dataset(dataset)
    fsm_over = {k: flags.get(k) for k in _FSM_FLAGS}
    samp_over = {k: flags.get(k) for k in _SAMP_FLAGS}
    fsm_cfg, sampling_cfg = _load_configs(config_path, fsm_over, samp_over)

    if script:
        if not Path(script).exists():
            raise BadManifest(f"script path does not exist: {script}")

        def make_backend():
            return ScriptedBackend.from_file(script)
    else:
        def make_backend():
            return OpenAICompatBackend(base_url, model or "default")

    if constant_difficulty is not None:
        pilot = ConstantDifficultyPilot(constant_difficulty)
    elif pilot_checkpoint:
        pilot = load_checkpoint(pilot_checkpoint)
    else:
        pilot = PilotModel.init_random(seed=seed)

    provider = (HttpEmbeddingProvider(embedding_url) if embedding_url
                else HashedProjectionProvider(seed=seed))

    def run_one(row: dict) -> TraceDocument:
        return run_session(row["question"], make_backend(), pilot, provider,
                           fsm_cfg, sampling_cfg, question_id=row["id"])

    if parallel > 1:
        with ThreadPoolExecutor(max_workers=parallel) as pool:
            traces = list(pool.map(run_one, rows))
    else:
        traces = [run_one(row) for row in rows]

    # Single appender, dataset order: byte-stable output for a fixed seed.
    grades = {}
    correct = 0
    graded = 0
    with open(traces_out, "a", encoding="utf-8") as f:
        for row, trace in zip(rows, traces):
            f.write(trace.to_json(include_timing=include_timing))
            f.write("\n")
            state_counts: dict[str, int] = {}
            for step in trace.steps:
                key = step.state_after.value
                state_counts[key] = state_counts.get(key, 0) + 1
            states = ",".join(f"{k}:{v}" for k, v in sorted(state_counts.items()))
            line = (f"{row['id']}  steps={len(trace.steps)} "
                    f"tokens={trace.total_tokens} states=[{states}] "
                    f"answer={trace.answer!r}")
            if row["gold"] is not None:
                ok = grade(trace.answer, str(row["gold"]))
                grades[row["id"]] = {"gold": str(row["gold"]), "correct": ok}
                graded += 1
                correct += int(ok)
                line += f" correct={'yes' if ok else 'no'}"
            click.echo(line)
    if graded:
        click.echo(f"accuracy: {correct}/{graded} = {correct / graded:.3f}")
    if grades_out:
        with open(grades_out, "w", encoding="utf-8") as f:
            json.dump(grades, f, indent=2, sort_keys=True)
            f.write("\n")


def _load_train_samples(path: str) -> list[TrainSample]:
    if not Path(path).exists():
        raise BadManifest(f"training data path does not exist: {path}")
    samples = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                samples.append(TrainSample.from_dict(json.loads(line)))
            except (json.JSONDecodeError, KeyError, ValueError) as e:
                raise BadManifest(f"{path}:{lineno}: bad training sample: {e}") from None
    return samples


def _ranks(values: np.ndarray) -> np.ndarray:
    order = np.argsort(values, kind="stable")
    ranks = np.empty(len(values))
    ranks[order] = np.arange(len(values), dtype=np.float64)
    return ranks


def _correlations(preds: list[float], targets: list[float]) -> tuple[float, float]:
    p = ana.pearson(preds, targets)
    s = ana.pearson(_ranks(np.asarray(preds)).tolist(),
                    _ranks(np.asarray(targets)).tolist())
    return p, s


@cli.command("synth-data")
@click.option("--n", type=int, default=500, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--min-len", type=int, default=8, show_default=True)
@click.option("--max-len", type=int, default=24, show_default=True)
@click.option("--out", type=str, required=True)
def cmd_synth_data(n, seed, min_len, max_len, out):
    """Write a synthetic-teacher training corpus as TrainSample JSONL."""
    samples = make_synth_dataset(n, seed=seed, min_len=min_len, max_len=max_len)
    with open(out, "w", encoding="utf-8") as f:
        for s in samples:
            f.write(json.dumps(s.to_dict()))
            f.write("\n")
    click.echo(f"wrote {len(samples)} trajectories to {out}")


@cli.command("train-pilot")
@click.option("--data", type=str, default=None, help="TrainSample JSONL")
@click.option("--synth", type=int, default=None,
              help="generate this many synthetic trajectories instead of --data")
@click.option("--holdout", type=float, default=0.1, show_default=True)
@click.option("--hidden-dim", type=int, default=96, show_default=True)
@click.option("--learning-rate", type=float, default=1e-3, show_default=True)
@click.option("--epochs", type=int, default=60, show_default=True)
@click.option("--batch-size", type=int, default=64, show_default=True)
@click.option("--patience", type=int, default=0, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--out", type=str, required=True, help="checkpoint path")
def cmd_train_pilot(data, synth, holdout, hidden_dim, learning_rate, epochs,
                    batch_size, patience, seed, out):
    """Distill the synthetic (or supplied) teacher targets into a model."""
    if data:
        samples = _load_train_samples(data)
    elif synth:
        samples = make_synth_dataset(synth, seed=seed)
    else:
        raise BadManifest("give --data or --synth")
    if not samples:
        raise BadManifest("training dataset is empty")

    rng = np.random.default_rng(seed)
    order = rng.permutation(len(samples))
    n_hold = max(1, int(len(samples) * holdout)) if len(samples) > 1 else 0
    hold = [samples[i] for i in order[:n_hold]]
    fit = [samples[i] for i in order[n_hold:]] or list(hold)

    input_dim = len(fit[0].trajectory[0].z)
    model = PilotModel.init_random(input_dim=input_dim, hidden_dim=hidden_dim,
                                   seed=seed)
    cfg = TrainConfig(learning_rate=learning_rate, epochs=epochs,
                      batch_size=batch_size, seed=seed, patience=patience)
    t0 = time.perf_counter()
    trained, history = train(model, fit, cfg)
    wall = time.perf_counter() - t0

    for i, loss in enumerate(history):
        click.echo(f"epoch {i + 1:4d}  loss {loss:.6f}")
    click.echo(f"trained on {len(fit)} trajectories in {wall:.1f}s")

    if hold:
        preds: list[float] = []
        targets: list[float] = []
        for s in hold:
            preds.extend(trained.forward(s.trajectory))
            targets.extend(s.targets)
        p, sp = _correlations(preds, targets)
        click.echo(f"held-out pearson {p:.4f}  spearman {sp:.4f}  "
                   f"({len(hold)} trajectories, {len(preds)} steps)")

    save_checkpoint(trained, out, seed=seed, loss_history=history)
    click.echo(f"wrote checkpoint {out}")


def _read_trace_file(path: str) -> list[TraceDocument]:
    if not Path(path).exists():
        raise BadManifest(f"trace file does not exist: {path}")
    return list(read_traces(path))


@cli.command("analyze")
@click.option("--baseline", type=str, required=True, help="baseline traces JSONL")
@click.option("--treated", type=str, required=True, help="treated traces JSONL")
@click.option("--grades", "grades_path", type=str, default=None,
              help="JSON mapping question id to {gold, correct}")
@click.option("--window", type=int, default=2, show_default=True)
@click.option("--reflection-cues", type=str, default=None,
              help="comma-separated override of the reflection cue list")
@click.option("--branching-cues", type=str, default=None)
@click.option("--out", "json_out", type=str, default=None,
              help="write the JSON report here instead of stdout")
def cmd_analyze(baseline, treated, grades_path, window, reflection_cues,
                branching_cues, json_out):
    """Token-savings attribution, state allocation and failure counts."""
    base = _read_trace_file(baseline)
    treat = _read_trace_file(treated)
    cues = ana.CueConfig(
        reflection_cues=tuple(c.strip() for c in reflection_cues.split(","))
        if reflection_cues else ana.DEFAULT_REFLECTION_CUES,
        branching_cues=tuple(c.strip() for c in branching_cues.split(","))
        if branching_cues else ana.DEFAULT_BRANCHING_CUES,
        window=window,
    )

    report = ana.token_savings_attribution(base, treat, cues)
    allocation = ana.state_allocation(treat)
    doc = {
        "attribution": report.to_dict(),
        "state_allocation": {s.value: ratio for s, ratio in sorted(
            allocation.items(), key=lambda kv: kv[0].value)},
    }

    if grades_path:
        if not Path(grades_path).exists():
            raise ana.MissingGrades(f"grades file does not exist: {grades_path}")
        with open(grades_path, encoding="utf-8") as f:
            grades = json.load(f)
        doc["length_limit_failures"] = ana.length_limit_failures(treat, grades)
        doc["outcome_conditioned_savings"] = ana.outcome_conditioned_savings(
            base, treat, grades)

    rows = [
        ("reflect_ratio", f"{report.reflect_ratio:.4f}"),
        ("branch_ratio", f"{report.branch_ratio:.4f}"),
        ("reflect_pearson", f"{report.reflect_pearson:.4f}"),
        ("branch_pearson", f"{report.branch_pearson:.4f}"),
    ]
    rows += [(f"allocation[{s.value}]", f"{ratio:.4f}")
             for s, ratio in sorted(allocation.items(), key=lambda kv: kv[0].value)]
    if grades_path:
        rows.append(("length_limit_failures", str(doc["length_limit_failures"])))
        for key, val in doc["outcome_conditioned_savings"].items():
            rows.append((key, "n/a" if val is None else f"{val:.2f}"))
    width = max(len(name) for name, _ in rows)
    click.echo(f"window W={window}, {len(base)} trace pairs")
    for name, val in rows:
        click.echo(f"  {name:<{width}}  {val}")

    payload = json.dumps(doc, indent=2)
    if json_out:
        with open(json_out, "w", encoding="utf-8") as f:
            f.write(payload)
            f.write("\n")
    else:
        click.echo(payload)


def entrypoint(argv=None) -> int:
    """CLI entry with the documented exit codes."""
    try:
        cli.main(args=argv, standalone_mode=False)
        return 0
    except click.exceptions.Exit as e:
        return e.exit_code
    except click.ClickException as e:
        e.show(file=sys.stderr)
        return 1
    except BackendFailure as e:
        click.echo(f"backend error: {e}", err=True)
        return 2
    except (BadManifest, ConfigError, ana.LengthMismatch, ana.TooShort,
            ana.UnpairedSamples, ana.MissingGrades, ana.EmptyInput,
            FileNotFoundError, ValueError) as e:
        click.echo(f"error: {e}", err=True)
        return 1


if __name__ == "__main__":
    sys.exit(entrypoint())
