"""Batch front door over the library.

Every command validates before it writes, writes through temp-and-rename, and
is deterministic for a fixed seed, so reruns produce byte-identical files.
Exit codes: 0 success, 1 bad input, 2 solver non-convergence, 3 I/O failure.
"""

from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass

import click
import numpy as np

from .composer import (
    ComplexSystemSpec,
    compose_estimate,
    estimate_via_merge,
    percentile_score,
)
from .config_enum import (
    ConfigGraph,
    enumerate_all,
    enumerate_multi_split,
    enumerate_single_split,
)
from .errors import DivergenceError, ValidationError
from .knowledge import (
    FeatureSpec,
    KnnModel,
    evaluate,
    load_model,
    save_model,
    train_knn,
    train_test_split,
    featurize_records,
)
from .composer import _predict_local
from .oloc_solver import OlocOptions, solve
from .report import PLOT_KINDS, write_atomic, write_plot_data
from .study_runner import (
    StudySpec,
    config_list_hash,
    dataset_csv_text,
    dataset_meta,
    load_dataset,
    run_study,
)
from .thermal_physics import (
    build_physics_graph,
    constant_flow_endurance,
    equal_split_flows,
    load_proportional_flows,
)

FEATURE_FLAG = {
    "drop_last": "normalized_drop_last",
    "plus_magnitude": "normalized_plus_magnitude",
}


@dataclass(frozen=True)
class CommandOutcome:
    """What a command did: exit code, files written, one-line summary."""

    exit_code: int
    artifacts: tuple[str, ...] = ()
    summary: str = ""


def _parse_floats(_ctx, _param, value):
    if value is None:
        return None
    try:
        parsed = tuple(float(v) for v in value.split(","))
    except ValueError as exc:
        raise click.BadParameter(f"expected comma-separated numbers, got {value!r}") from exc
    if not parsed:
        raise click.BadParameter("empty list")
    return parsed


def _write_json(path: str, obj) -> None:
    write_atomic(path, json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _read_json(path: str):
    with open(path) as fh:
        return json.load(fh)


def _read_config(path: str) -> ConfigGraph:
    with open(path) as fh:
        return ConfigGraph.from_json(fh.read())


def _workers(flag: int | None) -> int:
    """--workers beats THERMOFORGE_WORKERS beats available parallelism."""
    if flag is None:
        env = os.environ.get("THERMOFORGE_WORKERS")
        if env is None:
            return os.cpu_count() or 1
        try:
            flag = int(env)
        except ValueError as exc:
            raise ValidationError(f"THERMOFORGE_WORKERS={env!r} is not an integer") from exc
    if flag < 1:
        raise ValidationError(f"workers must be >= 1, got {flag}")
    return flag


def _load_models(dir_path: str) -> dict[int, KnnModel]:
    models: dict[int, KnnModel] = {}
    for name in sorted(os.listdir(dir_path)):
        if not (name.startswith("model_") and name.endswith(".json")):
            continue
        try:
            size = int(name[len("model_"):-len(".json")])
        except ValueError as exc:
            raise ValidationError(f"model file {name!r} is not model_<n>.json") from exc
        models[size] = load_model(os.path.join(dir_path, name))
    if not models:
        raise ValidationError(f"no model_<n>.json files in {dir_path}")
    return models


def _solver_options(segments: int | None) -> OlocOptions | None:
    return None if segments is None else OlocOptions(segments=segments).validate()


def _split_sizes(n_valid: int, train_frac: float) -> int:
    if not 0.0 < train_frac < 1.0:
        raise ValidationError(f"train fraction must be in (0, 1), got {train_frac}")
    return min(n_valid - 1, max(1, round(train_frac * n_valid)))


@click.group(name="thermoforge")
def cli():
    """Enumerate loop configurations, solve endurance problems, run studies,
    train and apply configuration classifiers, and emit plot data."""


@cli.command("enumerate")
@click.option("--nodes", type=int, required=True, help="Number of CPHX nodes.")
@click.option("--mode", type=click.Choice(["single", "multi", "all"]), default="single")
@click.option("--depth", type=int, default=None, help="Split-depth cap for multi/all.")
@click.option("--out", "out_dir", required=True, type=click.Path(file_okay=False))
def cmd_enumerate(nodes, mode, depth, out_dir):
    """Write every configuration of the family plus an index file."""
    if mode == "single":
        configs = enumerate_single_split(nodes)
    elif mode == "multi":
        configs = enumerate_multi_split(nodes, depth)
    else:
        configs = enumerate_all(nodes, depth)
    os.makedirs(out_dir, exist_ok=True)
    width = max(3, len(str(max(len(configs) - 1, 0))))
    files = []
    for i, g in enumerate(configs):
        name = f"config_{i:0{width}d}.json"
        write_atomic(os.path.join(out_dir, name), g.to_json() + "\n")
        files.append(name)
    index_path = os.path.join(out_dir, "index.json")
    _write_json(
        index_path,
        {
            "n_nodes": nodes,
            "mode": mode,
            "max_depth": depth,
            "count": len(configs),
            "config_hash": config_list_hash(configs),
            "files": files,
        },
    )
    return CommandOutcome(
        0,
        tuple(os.path.join(out_dir, f) for f in files) + (index_path,),
        f"wrote {len(configs)} configurations to {out_dir}",
    )


@cli.command("simulate")
@click.option("--config", "config_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--loads", required=True, callback=_parse_floats, help="Per-node kW, comma separated.")
@click.option("--policy", type=click.Choice(["equal", "proportional"]), default="equal")
@click.option("--dt", type=float, default=1e-3, show_default=True)
@click.option("--horizon", type=float, default=500.0, show_default=True)
@click.option("--out", "out_path", required=True, type=click.Path(dir_okay=False))
def cmd_simulate(config_path, loads, policy, dt, horizon, out_path):
    """Constant-flow endurance of one configuration under a fixed split policy."""
    graph = _read_config(config_path)
    if len(loads) != graph.n_nodes:
        raise ValidationError(f"{len(loads)} loads for {graph.n_nodes} nodes")
    pg = build_physics_graph(graph)
    indep = equal_split_flows(pg) if policy == "equal" else load_proportional_flows(pg, loads)
    endurance = constant_flow_endurance(pg, loads, indep, dt, horizon)
    _write_json(
        out_path,
        {
            "config": list(graph.parents),
            "loads": list(loads),
            "policy": policy,
            "dt": dt,
            "horizon": horizon,
            "independent_flows": [float(v) for v in indep],
            "endurance": endurance,
        },
    )
    shown = "none within horizon" if endurance is None else f"{endurance:.6g} s"
    return CommandOutcome(0, (out_path,), f"endurance: {shown}")


@cli.command("solve")
@click.option("--config", "config_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--loads", required=True, callback=_parse_floats)
@click.option("--segments", type=int, default=None, help="Collocation segments.")
@click.option("--out", "out_path", required=True, type=click.Path(dir_okay=False))
def cmd_solve(config_path, loads, segments, out_path):
    """Optimal flow scheduling for one configuration; exit 2 when not converged."""
    graph = _read_config(config_path)
    if len(loads) != graph.n_nodes:
        raise ValidationError(f"{len(loads)} loads for {graph.n_nodes} nodes")
    sol = solve(graph, loads, options=_solver_options(segments))
    _write_json(out_path, sol.to_dict())
    code = 0 if sol.converged else 2
    return CommandOutcome(
        code, (out_path,), f"t_end {sol.t_end:.6g} s, converged {sol.converged}"
    )


@cli.command("study")
@click.option("--spec", "spec_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--nodes", type=int, default=None, help="Override spec n_nodes.")
@click.option("--mode", type=click.Choice(["single", "multi", "all"]), default=None)
@click.option("--depth", type=int, default=None)
@click.option("--seed", type=int, default=None)
@click.option("--segments", type=int, default=None)
@click.option("--workers", type=int, default=None)
@click.option("--out", "out_path", required=True, type=click.Path(dir_okay=False))
def cmd_study(spec_path, nodes, mode, depth, seed, segments, workers, out_path):
    """Run a population study; flags override the spec file."""
    spec = StudySpec.from_dict(_read_json(spec_path))
    overrides = {}
    if nodes is not None:
        overrides["n_nodes"] = nodes
    if mode is not None:
        overrides["split_mode"] = mode
    if depth is not None:
        overrides["max_depth"] = depth
    if seed is not None:
        overrides["seed"] = seed
    if segments is not None:
        overrides["solver"] = dataclasses.replace(spec.solver, segments=segments)
    if overrides:
        spec = dataclasses.replace(spec, **overrides)
    spec = spec.validate()

    total = spec.n_pop
    notch = set()

    def progress(done, n_cells):
        tenth = done * 10 // n_cells
        if tenth not in notch:
            notch.add(tenth)
            click.echo(f"solved {done}/{n_cells} cells", err=True)

    ds = run_study(spec, workers=_workers(workers), progress=progress)
    meta_path = out_path[:-4] if out_path.endswith(".csv") else out_path
    meta_path += ".meta.json"
    write_atomic(out_path, dataset_csv_text(ds))
    _write_json(meta_path, dataset_meta(ds))
    n_valid = sum(r.valid for r in ds.records)
    return CommandOutcome(
        0,
        (out_path, meta_path),
        f"{total} samples x {len(ds.configs)} configs, {n_valid} valid",
    )


@cli.command("train")
@click.option("--dataset", "dataset_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--k", type=int, default=5, show_default=True)
@click.option("--features", type=click.Choice(sorted(FEATURE_FLAG)), default="drop_last")
@click.option("--train-frac", type=float, default=0.7, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--model", "model_path", required=True, type=click.Path(dir_okay=False))
def cmd_train(dataset_path, k, features, train_frac, seed, model_path):
    """Fit a nearest-neighbour configuration classifier on the train split."""
    ds = load_dataset(dataset_path)
    spec = FeatureSpec(mode=FEATURE_FLAG[features])
    n_train = _split_sizes(len(ds.valid_records()), train_frac)
    train, _ = train_test_split(ds, n_train, seed)
    model = train_knn(
        featurize_records(train, spec), [r.label for r in train], k=k, spec=spec
    )
    tmp = model_path + ".tmp"
    save_model(model, tmp)
    os.replace(tmp, model_path)
    return CommandOutcome(
        0, (model_path,), f"trained k={k} on {n_train} samples ({features})"
    )


@cli.command("eval")
@click.option("--dataset", "dataset_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--model", "model_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--train-frac", type=float, default=0.7, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--k", type=int, default=None, help="Override the stored k.")
@click.option("--out", "out_path", required=True, type=click.Path(dir_okay=False))
def cmd_eval(dataset_path, model_path, train_frac, seed, k, out_path):
    """Score a model on the held-out split of the same seeded partition."""
    ds = load_dataset(dataset_path)
    model = load_model(model_path)
    if k is not None:
        model = KnnModel(k=k, features=model.features, labels=model.labels, spec=model.spec)
    n_train = _split_sizes(len(ds.valid_records()), train_frac)
    _, test = train_test_split(ds, n_train, seed)
    report = evaluate(model, test, n_classes=len(ds.configs))
    _write_json(out_path, report.to_dict())
    return CommandOutcome(
        0,
        (out_path,),
        f"test accuracy {report.test_accuracy:.3f}, "
        f"gap median {report.gap_median:.4f}, max {report.gap_max:.4f}",
    )


@cli.command("predict")
@click.option("--model", "model_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--loads", required=True, callback=_parse_floats)
@click.option("--k", type=int, default=None)
@click.option("--out", "out_path", default=None, type=click.Path(dir_okay=False))
def cmd_predict(model_path, loads, k, out_path):
    """Predict the best configuration for one load vector."""
    model = load_model(model_path)
    if k is not None:
        model = KnnModel(k=k, features=model.features, labels=model.labels, spec=model.spec)
    n = len(loads)
    graph = _predict_local(model, loads, n)
    family = {g.parents: i for i, g in enumerate(enumerate_single_split(n))}
    result = {
        "n_nodes": n,
        "label": family[graph.parents],
        "parents": list(graph.parents),
    }
    artifacts = ()
    if out_path:
        _write_json(out_path, result)
        artifacts = (out_path,)
    return CommandOutcome(
        0, artifacts, json.dumps(result, sort_keys=True)
    )


@cli.command("compose")
@click.option("--system", "system_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--models", "models_dir", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--percentile", "n_random", type=int, default=None,
              help="Also rank against this many sampled composite designs.")
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--segments", type=int, default=None)
@click.option("--workers", type=int, default=None)
@click.option("--out", "out_path", required=True, type=click.Path(dir_okay=False))
def cmd_compose(system_path, models_dir, n_random, seed, segments, workers, out_path):
    """Stitch per-group predictions into a full design; optional percentile report."""
    spec = ComplexSystemSpec.from_dict(_read_json(system_path))
    design = compose_estimate(spec, _load_models(models_dir))
    _write_json(out_path, {"n_nodes": design.n_nodes, "parents": list(design.parents)})
    artifacts = [out_path]
    summary = f"composed design {list(design.parents)}"
    code = 0
    if n_random is not None:
        report = percentile_score(
            design,
            spec,
            n_random=n_random,
            seed=seed,
            options=_solver_options(segments),
            workers=_workers(workers),
        )
        stem = out_path[:-5] if out_path.endswith(".json") else out_path
        report_path = stem + ".percentile.json"
        _write_json(report_path, report.to_dict())
        artifacts.append(report_path)
        summary += f"; percentile {report.percentile:.1f} of {len(report.indices)} samples"
        if not report.design_converged:
            code = 2
    return CommandOutcome(code, tuple(artifacts), summary)


@cli.command("merge-estimate")
@click.option("--model", "model_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--loads", callback=_parse_floats, default=None, help="One 4-node vector.")
@click.option("--trials", type=int, default=None, help="Batch of sorted random vectors.")
@click.option("--d-range", callback=_parse_floats, default="4,16", show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--reference/--no-reference", default=False,
              help="Also solve the full 4-node family and report regret.")
@click.option("--segments", type=int, default=None)
@click.option("--workers", type=int, default=None)
@click.option("--out", "out_path", required=True, type=click.Path(dir_okay=False))
def cmd_merge_estimate(model_path, loads, trials, d_range, seed, reference, segments,
                       workers, out_path):
    """Estimate 4-node designs from a 3-node model via pairwise merging."""
    model = load_model(model_path)
    options = _solver_options(segments)
    n_workers = _workers(workers)
    if (loads is None) == (trials is None):
        raise ValidationError("give exactly one of --loads or --trials")

    if loads is not None:
        est = estimate_via_merge(
            loads, model, reference=reference, options=options, workers=n_workers
        )
        _write_json(out_path, est.to_dict())
        best = int(np.argmax([v for _, _, v in est.candidates]))
        code = 0 if est.converged[best] else 2
        tail = "" if est.regret is None else f", regret {est.regret:.4f}"
        return CommandOutcome(
            code, (out_path,), f"estimate {est.objective:.6g} s{tail}"
        )

    if trials < 1:
        raise ValidationError(f"trials must be >= 1, got {trials}")
    if len(d_range) != 2 or not d_range[0] < d_range[1]:
        raise ValidationError(f"d-range must be lo,hi with lo < hi, got {d_range}")
    rng = np.random.default_rng(seed)
    rows = []
    for _ in range(trials):
        draw = -np.sort(-rng.uniform(d_range[0], d_range[1], size=4))
        est = estimate_via_merge(
            draw, model, reference=reference, options=options, workers=n_workers
        )
        rows.append(
            {
                "loads": [float(v) for v in draw],
                "objective": float(est.objective),
                "parents": list(est.graph.parents),
                "regret": est.regret,
                "converged": list(est.converged),
            }
        )
    payload = {
        "seed": seed,
        "d_range": list(d_range),
        "reference": reference,
        "trials": rows,
    }
    if reference:
        payload["regrets"] = [r["regret"] for r in rows]
    _write_json(out_path, payload)
    summary = f"{trials} trials"
    if reference:
        regrets = np.array(payload["regrets"])
        summary += f", mean regret {regrets.mean():.4f}"
    return CommandOutcome(0, (out_path,), summary)


@cli.command("plot-data")
@click.option("--kind", required=True, type=click.Choice(PLOT_KINDS))
@click.option("--dataset", "dataset_path", type=click.Path(exists=True, dir_okay=False))
@click.option("--report", "report_path", type=click.Path(exists=True, dir_okay=False),
              help="Merge-trials JSON for the regret histogram.")
@click.option("--features", type=click.Choice(sorted(FEATURE_FLAG)), default="drop_last")
@click.option("--bins", type=int, default=10, show_default=True)
@click.option("--out", "out_dir", required=True, type=click.Path(file_okay=False))
def cmd_plot_data(kind, dataset_path, report_path, features, bins, out_dir):
    """Emit one CSV of plot rows and a PNG rendering beside it."""
    if kind == "regret-histogram":
        if report_path is None:
            raise ValidationError("regret-histogram needs --report")
        obj = _read_json(report_path)
        regrets = obj.get("regrets")
        if regrets is None:
            raise ValidationError(f"{report_path} has no regrets; rerun with --reference")
        source = regrets
    else:
        if dataset_path is None:
            raise ValidationError(f"{kind} needs --dataset")
        source = load_dataset(dataset_path)
    paths = write_plot_data(
        kind,
        source,
        out_dir,
        feature_spec=FeatureSpec(mode=FEATURE_FLAG[features]),
        n_bins=bins,
    )
    return CommandOutcome(0, tuple(paths), f"wrote {kind} data and figure")


def main(argv=None) -> int:
    """Console entry point; maps exceptions onto the documented exit codes."""
    try:
        outcome = cli.main(args=argv, standalone_mode=False, prog_name="thermoforge")
    except click.exceptions.Exit as exc:
        return int(exc.exit_code)
    except click.ClickException as exc:
        exc.show()
        return 1
    except click.Abort:
        click.echo("aborted", err=True)
        return 1
    except (ValidationError, json.JSONDecodeError) as exc:
        click.echo(f"error: {exc}", err=True)
        return 1
    except DivergenceError as exc:
        click.echo(f"solver failure: {exc}", err=True)
        return 2
    except OSError as exc:
        click.echo(f"i/o error: {exc}", err=True)
        return 3
    if isinstance(outcome, CommandOutcome):
        if outcome.summary:
            click.echo(outcome.summary)
        for path in outcome.artifacts:
            click.echo(path)
        return outcome.exit_code
    return 0
