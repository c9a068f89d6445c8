"""Experiment runner: dataset generation with caching, training, evaluation, export.

Subcommands:

    koopman-rff run <config.json> [--seed S] [--out DIR] [--particles N]
                                  [--rff M] [--epochs E]
    koopman-rff compare <run_dir...> [--out table.csv]
    koopman-rff export-field <run_dir> --top-j J --grid WxH
                                  [--dictionary LABEL] [--out field.csv]

A run writes, per dictionary: a model checkpoint, an eigenfunction-field
CSV, a training log (learned dictionaries), and sampled truth-vs-prediction
trajectory CSVs; plus one results.csv / results.json and a manifest. All
numeric outputs are reproducible from (config, seed); the training log also
records wall-clock times and is the one file excluded from that contract.

Datasets are cached under $KOOPMAN_CACHE_DIR (default ./.koopman-cache),
keyed by a hash of everything that affects integration.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import os
import sys

import numpy as np

from . import __version__, dictionary as dict_mod, dynamics, koopman, learning, metrics
from .config import (ConfigError, DictionarySpec, ExperimentConfig,
                     config_to_dict, load_config)


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="koopman-rff",
                                     description="Koopman operator experiments with learned RFF dictionaries")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run one experiment config")
    p_run.add_argument("config")
    p_run.add_argument("--seed", type=int, default=None)
    p_run.add_argument("--out", default=None)
    p_run.add_argument("--particles", type=int, default=None,
                       help="desk-scale override of the particle count")
    p_run.add_argument("--rff", type=int, default=None,
                       help="desk-scale override of RFF feature counts")
    p_run.add_argument("--epochs", type=int, default=None)

    p_cmp = sub.add_parser("compare", help="merge run results into one table")
    p_cmp.add_argument("run_dirs", nargs="+")
    p_cmp.add_argument("--out", default=None)

    p_exp = sub.add_parser("export-field", help="re-export an eigenfunction field CSV")
    p_exp.add_argument("run_dir")
    p_exp.add_argument("--top-j", type=int, default=1)
    p_exp.add_argument("--grid", default="100x50", help="WxH grid resolution")
    p_exp.add_argument("--dictionary", default=None, help="dictionary label if the run has several")
    p_exp.add_argument("--out", default=None)

    args = parser.parse_args(argv)
    try:
        if args.command == "run":
            return cmd_run(args)
        if args.command == "compare":
            return cmd_compare(args)
        return cmd_export_field(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (learning.TrainingDiverged, dynamics.IntegrationError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 1
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


# ---------------------------------------------------------------------------
# run
# ---------------------------------------------------------------------------

def cmd_run(args) -> int:
    cfg = load_config(args.config)
    cfg = apply_overrides(cfg, args)
    out = cfg.output_dir
    os.makedirs(out, exist_ok=True)
    lock = os.path.join(out, ".lock")
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        os.close(fd)
    except FileExistsError:
        print(f"error: {out} is locked by another run ({lock})", file=sys.stderr)
        return 1
    try:
        run_experiment(cfg)
    except learning.TrainingDiverged as exc:
        # keep whatever was logged so the failure can be inspected
        learning.write_history_jsonl(os.path.join(out, "training_log_partial.jsonl"), exc.history)
        raise
    finally:
        os.remove(lock)
    return 0


def apply_overrides(cfg: ExperimentConfig, args) -> ExperimentConfig:
    sampling, train = cfg.sampling, cfg.train
    dicts = cfg.dictionaries
    if args.particles is not None:
        if sampling.kind == "uniform":
            sampling = dataclasses.replace(sampling, n=args.particles)
        else:
            current = int(np.prod(sampling.counts))
            ratio = (args.particles / current) ** 0.5
            counts = tuple(max(1, round(c * ratio)) for c in sampling.counts)
            sampling = dataclasses.replace(sampling, counts=counts)
    if args.rff is not None:
        dicts = tuple(dataclasses.replace(d, m=args.rff) if d.type == "rff" else d
                      for d in dicts)
    if args.epochs is not None:
        train = dataclasses.replace(train, epochs=args.epochs)
    return dataclasses.replace(
        cfg,
        sampling=sampling,
        train=train,
        dictionaries=dicts,
        seed=cfg.seed if args.seed is None else args.seed,
        output_dir=cfg.output_dir if args.out is None else args.out,
    )


def cache_dir() -> str:
    return os.environ.get("KOOPMAN_CACHE_DIR", ".koopman-cache")


def dataset_cache_key(cfg: ExperimentConfig) -> str:
    t = cfg.time
    payload = {
        "system": cfg.system,
        "params": dataclasses.asdict(cfg.params()),
        "sampling": dataclasses.asdict(cfg.sampling),
        "t0": t.t0, "t_end": t.eval_t1 or t.t1, "step": t.step,
        "solver": t.solver, "reltol": t.reltol, "abstol": t.abstol,
        "substeps": t.substeps,
    }
    return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()[:24]


def initial_states(cfg: ExperimentConfig) -> np.ndarray:
    if cfg.sampling.kind == "grid":
        return dynamics.sample_grid(cfg.domain(), cfg.sampling.counts)
    return dynamics.sample_uniform(cfg.domain(), cfg.sampling.n, cfg.sampling.seed)


def load_or_generate(cfg: ExperimentConfig) -> dynamics.EnsembleTrajectory:
    key = dataset_cache_key(cfg)
    path = os.path.join(cache_dir(), f"{key}.bin")
    if os.path.exists(path):
        return dynamics.load_trajectories_bin(path)
    t = cfg.time
    ens = dynamics.simulate_ensemble(
        cfg.params(), initial_states(cfg), t.t0, t.eval_t1 or t.t1, t.step,
        solver=t.solver, reltol=t.reltol, abstol=t.abstol, substeps=t.substeps)
    os.makedirs(cache_dir(), exist_ok=True)
    dynamics.save_trajectories_bin(path, ens)
    return ens


def build_dictionary(spec: DictionarySpec, cfg: ExperimentConfig, seed: int):
    if spec.type == "rff":
        bandwidth = spec.bandwidth if spec.bandwidth is not None else 1.0
        return dict_mod.rff_init(spec.m, len(cfg.domain()), bandwidth=bandwidth, seed=seed)
    if spec.type == "gaussian":
        bounds = spec.bounds if spec.bounds is not None else cfg.domain()
        centers = dynamics.sample_grid(bounds, spec.grid)
        return dict_mod.GaussianGridDictionary(centers, spec.sigma)
    if spec.type == "monomial":
        return dict_mod.MonomialDictionary(spec.degree, len(cfg.domain()))
    raise ValueError(f"not a feature dictionary: {spec.type}")


def propagate_one_step(cfg: ExperimentConfig, points: np.ndarray) -> np.ndarray:
    """True one-step flow image of sample points (for the invariance metric)."""
    t = cfg.time
    ens = dynamics.simulate_ensemble(cfg.params(), points, t.t0, t.t0 + t.step, t.step,
                                     solver=t.solver, reltol=t.reltol, abstol=t.abstol,
                                     substeps=t.substeps)
    return ens.states[-1]


def run_experiment(cfg: ExperimentConfig) -> dict:
    out = cfg.output_dir
    os.makedirs(out, exist_ok=True)
    seeds = np.random.SeedSequence(cfg.seed).spawn(4)
    seed_dict, seed_train, seed_eval, seed_subsample = (int(s.generate_state(1)[0]) for s in seeds)

    ens = load_or_generate(cfg)
    n_train_pairs = round((cfg.time.t1 - cfg.time.t0) / cfg.time.step)
    dataset = dynamics.make_snapshots(ens)
    train_ds = dynamics.SnapshotDataset(X=dataset.X[:n_train_pairs],
                                        Y=dataset.Y[:n_train_pairs], dt=dataset.dt)

    rng_eval = np.random.default_rng(seed_eval)
    domain = np.asarray(cfg.domain(), dtype=float)
    samples = rng_eval.uniform(domain[:, 0], domain[:, 1],
                               size=(cfg.evaluation.eigfunc_samples, len(domain)))
    propagated = propagate_one_step(cfg, samples)
    field_grid = dynamics.sample_grid(cfg.domain(), cfg.evaluation.field_grid)

    rows = []
    results: dict = {"system": cfg.system, "seed": cfg.seed, "rows": rows,
                     "per_step_errors": {}, "eigenfunction_errors": {}, "kernel": {}}
    eig_csv_rows = []

    for spec in cfg.dictionaries:
        label = spec.label()
        if spec.type == "kernel":
            run_kernel_baseline(cfg, spec, ens, field_grid, out, seed_subsample, results)
            continue

        dictionary = build_dictionary(spec, cfg, seed_dict)
        if spec.type == "rff" and cfg.train.epochs > 0:
            train_cfg = dataclasses.replace(cfg.train, seed=seed_train)
            dictionary, model, history = learning.fit(train_ds, dictionary, train_cfg)
            learning.write_history_jsonl(os.path.join(out, f"training_log_{label}.jsonl"), history)
        else:
            phi_x, phi_y = (dict_mod.rff_eval(dictionary, m) if spec.type == "rff"
                            else dict_mod.fixed_eval(dictionary, m)
                            for m in train_ds.stacked())
            x_all, _ = train_ds.stacked()
            ridge = learning.effective_ridge(cfg.train, phi_x.T @ phi_x)
            model = koopman.KoopmanModel.fit(phi_x, phi_y, x_all, ridge=ridge)

        dict_eval = dictionary  # all dictionaries are callable
        evaluation = metrics.evaluate_nt_lt(model, dataset, dict_eval,
                                            nt=cfg.evaluation.nt, lt=cfg.evaluation.lt,
                                            max_starts=cfg.evaluation.max_starts)
        top_j = min(cfg.evaluation.top_j, model.n_features)
        eig_reports = metrics.eigfunc_error(model, dict_eval, samples, propagated, top_j)

        rows.append({"system": cfg.system, "dictionary": label,
                     "nt": evaluation["nt"].e_p, "lt": evaluation["lt"].e_p})
        results["per_step_errors"][label] = {
            "nt": evaluation["nt"].per_step_mean.tolist(),
            "lt": evaluation["lt"].per_step_mean.tolist(),
        }
        results["eigenfunction_errors"][label] = [
            {"eigen_index": r.eigen_index, "re_mu": r.mu.real, "im_mu": r.mu.imag,
             "e_f": r.e_f, "e_f_rel": r.e_f_rel, "sample_count": r.sample_count}
            for r in eig_reports]
        eig_csv_rows += [(label, r.eigen_index, r.mu.real, r.mu.imag, r.e_f, r.e_f_rel,
                          r.sample_count) for r in eig_reports]

        koopman.save_model(os.path.join(out, f"model_{label}.json"), model, dictionary)
        field = koopman.eigenfunction_field(model, dict_eval, field_grid, top_j)
        koopman.save_field_csv(os.path.join(out, f"field_{label}.csv"), field)
        save_dominant_field(os.path.join(out, f"field_{label}_dominant.csv"), field)
        export_sample_trajectories(cfg, ens, model, dict_eval, label, out, seed_subsample)

    write_results(out, cfg, results, eig_csv_rows)
    return results


def run_kernel_baseline(cfg, spec, ens, field_grid, out, seed, results) -> None:
    label = spec.label()
    states = ens.states
    if spec.pair_index + spec.lag >= states.shape[0]:
        raise ConfigError(f"kernel pair_index+lag {spec.pair_index + spec.lag} "
                          f"exceeds available snapshots {states.shape[0]}")
    X = states[spec.pair_index]
    Y = states[spec.pair_index + spec.lag]
    max_points = spec.max_points or 2000
    if X.shape[0] > max_points:
        rows = np.random.default_rng(seed).choice(X.shape[0], size=max_points, replace=False)
        X, Y = X[rows], Y[rows]
    result = koopman.kernel_edmd(X, Y, spec.sigma)
    top_j = min(cfg.evaluation.top_j, X.shape[0])
    field = result.field(field_grid, top_j)
    koopman.save_field_csv(os.path.join(out, f"field_{label}.csv"), field)
    save_dominant_field(os.path.join(out, f"field_{label}_dominant.csv"), field)
    np.savez(os.path.join(out, f"kernel_{label}.npz"),
             X=result.X, coefficients=result.coefficients,
             eigenvalues=result.eigenvalues, sigma=result.sigma)
    results["kernel"][label] = {
        "sigma": spec.sigma, "n_points": X.shape[0], "lag": spec.lag,
        "eigenvalues": [[mu.real, mu.imag] for mu in result.eigenvalues[:top_j]],
    }


def save_dominant_field(path, field: koopman.EigenfunctionField) -> None:
    """Single-mode CSV of the dominant nontrivial eigenfunction (mode 0 if
    every exported mode is constant-like), for coherence figures."""
    try:
        j = koopman.dominant_nontrivial_index(field.values)
    except ValueError:
        j = 0
    single = koopman.EigenfunctionField(grid=field.grid,
                                        values=field.values[:, j:j + 1],
                                        eigenvalues=field.eigenvalues[j:j + 1])
    koopman.save_field_csv(path, single)


def export_sample_trajectories(cfg, ens, model, dict_eval, label, out, seed,
                               n_sample=5) -> None:
    """Truth and reconstruction for a few particles, in the trajectory CSV format."""
    horizon = min(cfg.evaluation.lt, ens.states.shape[0] - 1)
    rng = np.random.default_rng(seed)
    pick = rng.choice(ens.n_particles, size=min(n_sample, ens.n_particles), replace=False)
    times = ens.times[:horizon + 1]
    truth = dynamics.EnsembleTrajectory(times, ens.states[:horizon + 1, pick, :])
    phi0 = dict_eval(ens.states[0, pick, :])
    xhat = koopman.reconstruct_series(model, phi0, horizon, start_step=1)
    pred_states = np.concatenate([ens.states[None, 0, pick, :], xhat], axis=0)
    pred = dynamics.EnsembleTrajectory(times, pred_states)
    traj_dir = os.path.join(out, "trajectories")
    os.makedirs(traj_dir, exist_ok=True)
    truth_path = os.path.join(traj_dir, "truth.csv")
    if not os.path.exists(truth_path):
        dynamics.save_trajectories_csv(truth_path, truth)
    dynamics.save_trajectories_csv(os.path.join(traj_dir, f"{label}.csv"), pred)


def write_results(out, cfg, results, eig_csv_rows) -> None:
    with open(os.path.join(out, "results.csv"), "w") as fh:
        fh.write("system,dictionary,nt,lt\n")
        for row in results["rows"]:
            fh.write(f"{row['system']},{row['dictionary']},{row['nt']!r},{row['lt']!r}\n")
    with open(os.path.join(out, "results.json"), "w") as fh:
        json.dump(results, fh, indent=1)
        fh.write("\n")
    with open(os.path.join(out, "eigenfunction_errors.csv"), "w") as fh:
        fh.write("dictionary,eigen_index,re_mu,im_mu,e_f,e_f_rel,sample_count\n")
        for row in eig_csv_rows:
            fh.write(",".join(repr(v) if isinstance(v, float) else str(v) for v in row) + "\n")
    manifest = {"version": __version__, "config": config_to_dict(cfg),
                "domain": [list(b) for b in cfg.domain()]}
    with open(os.path.join(out, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=1)
        fh.write("\n")


# ---------------------------------------------------------------------------
# compare
# ---------------------------------------------------------------------------

def cmd_compare(args) -> int:
    rows = {}
    for run_dir in args.run_dirs:
        path = os.path.join(run_dir, "results.json")
        if not os.path.exists(path):
            print(f"error: no results.json under {run_dir}", file=sys.stderr)
            return 2
        with open(path) as fh:
            results = json.load(fh)
        for row in results["rows"]:
            key = (row["system"], row["dictionary"])
            if key in rows:
                print(f"error: duplicate row {key}: {rows[key][1]} and {run_dir}",
                      file=sys.stderr)
                return 2
            rows[key] = (row, run_dir)
    lines = ["system,dictionary,nt,lt"]
    for (system, dict_label), (row, _) in sorted(rows.items()):
        lines.append(f"{system},{dict_label},{row['nt']!r},{row['lt']!r}")
    text = "\n".join(lines) + "\n"
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)
    return 0


# ---------------------------------------------------------------------------
# export-field
# ---------------------------------------------------------------------------

def cmd_export_field(args) -> int:
    run_dir = args.run_dir
    with open(os.path.join(run_dir, "manifest.json")) as fh:
        manifest = json.load(fh)
    domain = manifest["domain"]
    try:
        w, h = (int(v) for v in args.grid.lower().split("x"))
    except ValueError:
        print(f"error: --grid expects WxH, got {args.grid!r}", file=sys.stderr)
        return 2
    grid = dynamics.sample_grid(domain, (w, h))

    label = args.dictionary
    candidates = [f[6:-5] for f in os.listdir(run_dir)
                  if f.startswith("model_") and f.endswith(".json")]
    candidates += [f[7:-4] for f in os.listdir(run_dir)
                   if f.startswith("kernel_") and f.endswith(".npz")]
    if label is None:
        if len(candidates) != 1:
            print(f"error: run has several dictionaries {sorted(candidates)}; "
                  "pick one with --dictionary", file=sys.stderr)
            return 2
        label = candidates[0]
    elif label not in candidates:
        print(f"error: no checkpoint for {label!r}; available: {sorted(candidates)}",
              file=sys.stderr)
        return 2

    kernel_path = os.path.join(run_dir, f"kernel_{label}.npz")
    if os.path.exists(kernel_path):
        blob = np.load(kernel_path)
        result = koopman.KernelEdmdResult(
            eigenvalues=blob["eigenvalues"], coefficients=blob["coefficients"],
            psi=blob["X"][:0], X=blob["X"], sigma=float(blob["sigma"]))
        field = result.field(grid, args.top_j)
    else:
        model, dictionary = koopman.load_model(os.path.join(run_dir, f"model_{label}.json"))
        if dictionary is None:
            print("error: checkpoint lacks a dictionary", file=sys.stderr)
            return 2
        field = koopman.eigenfunction_field(model, dictionary, grid, args.top_j)
    out = args.out or os.path.join(run_dir, f"field_{label}_{w}x{h}.csv")
    koopman.save_field_csv(out, field)
    print(out)
    return 0


if __name__ == "__main__":
    sys.exit(main())
