"""Command-line entry point: ``bayeslqr learn|synthesize|validate|experiment``.

Every command is deterministic given its config and seed, writes files
atomically, and embeds the schema version, config hash and seed in every
output.

Exit codes: 0 success, 1 error, 2 infeasible initial LMI, 3 restart budget
exhausted (``synthesize``); ``validate`` exits 1 when the check fails.
"""
from __future__ import annotations

import json
import logging
import sys
import time
from pathlib import Path

import click
import numpy as np
from pydantic import ValidationError

from .benchmarks import (
    collect_rollouts,
    cubic_plant,
    dean_linear_system,
    run_experiment,
    summary_table,
    synthetic_law,
    write_results,
)
from .config import LearnConfig, RunConfig, config_hash, load_config
from .distributions import GaussianParameterLaw, RiskProfile, TruncatedLaw
from .gp import DatasetParseError, GpPosterior, TransitionDataset
from .linear import CostWeights
from .persist import atomic_write_text, dumps, read_json, write_json
from .synthesis import (
    SCHEMA_VERSION,
    InfeasibleInit,
    RestartsExhausted,
    algorithm1,
    validate,
)

log = logging.getLogger("bayeslqr")

EXIT_OK, EXIT_ERROR, EXIT_INFEASIBLE, EXIT_EXHAUSTED = 0, 1, 2, 3


class _Phase:
    """Log the wall time of one command phase at INFO level."""

    def __init__(self, name: str):
        self.name = name

    def __enter__(self):
        self.t0 = time.perf_counter()
        log.info("%s: start", self.name)

    def __exit__(self, *exc):
        log.info("%s: %.2fs", self.name, time.perf_counter() - self.t0)
        return False


def _header(cfg: RunConfig, seed: int) -> dict:
    return {"schema_version": SCHEMA_VERSION, "config_hash": config_hash(cfg), "seed": int(seed)}


def _fail(msg: str) -> None:
    click.echo(f"error: {msg}", err=True)
    sys.exit(EXIT_ERROR)


def _load(ctx_config, seed, out) -> tuple[RunConfig, int, Path | None]:
    try:
        cfg = load_config(ctx_config)
    except ValidationError as exc:
        _fail(f"invalid config:\n{exc}")
    except (OSError, ValueError) as exc:
        _fail(f"cannot read config: {exc}")
    seed = cfg.seed if seed is None else seed
    out = out if out is not None else cfg.out
    return cfg, int(seed), (Path(out) if out is not None else None)


def save_law(path, law: GaussianParameterLaw, header: dict, process_noise=None, extra: dict | None = None):
    doc = {**header, "law": law.to_dict()}
    if process_noise is not None:
        doc["process_noise"] = np.asarray(process_noise).tolist()
    if extra:
        doc.update(extra)
    write_json(path, doc)


def load_law(path) -> tuple[GaussianParameterLaw, np.ndarray | None]:
    """Read a law file written by ``learn`` (or a bare law dictionary)."""
    doc = read_json(path)
    law_doc = doc.get("law", doc)
    noise = doc.get("process_noise")
    return GaussianParameterLaw.from_dict(law_doc), (None if noise is None else np.asarray(noise, dtype=float))


def _learn_law(lc: LearnConfig, seed: int, base_dir: Path | None):
    """Dataset (from file or fresh rollouts) -> GP posterior -> Jacobian law."""
    plant = cubic_plant(lc.plant_noise)
    if lc.dataset is not None:
        path = Path(lc.dataset)
        if base_dir is not None and not path.is_absolute():
            path = base_dir / path
        data = TransitionDataset.load(path)
        source = {"dataset": str(lc.dataset)}
    else:
        rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(0,)))
        data = collect_rollouts(plant, lc.rollout_length, lc.n_rollouts, lc.input_std, rng, lc.init_std)
        source = {"plant": lc.plant, "n_rollouts": lc.n_rollouts, "rollout_length": lc.rollout_length}
    dim = data.d_x + data.d_u
    post = GpPosterior(data, lc.gp.kernel(dim), lc.gp.noise(data.d_x), lc.gp.target)
    if lc.operating_point is not None:
        q_star = np.asarray(lc.operating_point, dtype=float)
    elif (data.d_x, data.d_u) == (plant.d_x, plant.d_u):
        q_star = plant.q_star
    else:
        q_star = np.zeros(dim)
    law = post.linearize(q_star)
    return law, post.process_noise_estimate(), {"source": source, "n_data": len(data),
                                                "operating_point": q_star.tolist()}


@click.group()
@click.option("--verbose", "-v", count=True, help="Repeat for more detail (phase timings, solver info).")
def main(verbose: int):
    """Probabilistically robust LQR synthesis for learned linearized models."""
    level = logging.WARNING if verbose == 0 else logging.INFO if verbose == 1 else logging.DEBUG
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)


_config_opt = click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False),
                           help="YAML run config (defaults apply when omitted).")
_seed_opt = click.option("--seed", type=int, default=None, help="Overrides the config seed.")


@main.command()
@_config_opt
@_seed_opt
@click.option("--out", type=click.Path(dir_okay=False), default=None, help="Law JSON to write.")
@click.option("--dataset", type=click.Path(exists=True, dir_okay=False), default=None,
              help="Transition dataset (CSV or JSON); overrides the config.")
def learn(config_path, seed, out, dataset):
    """Fit the GP and write the Jacobian law at the operating point."""
    cfg, seed, out = _load(config_path, seed, out)
    if out is None:
        _fail("--out is required")
    lc = cfg.learn if dataset is None else cfg.learn.model_copy(update={"dataset": dataset})
    base = Path(config_path).parent if config_path and dataset is None else None
    try:
        with _Phase("learn"):
            law, noise, extra = _learn_law(lc, seed, base)
    except DatasetParseError as exc:
        _fail(f"cannot parse dataset: {exc}")
    except (OSError, ValueError, np.linalg.LinAlgError) as exc:
        _fail(str(exc))
    save_law(out, law, _header(cfg, seed), noise, {"learn": extra})
    click.echo(f"wrote {out}")


def _synth_law(cfg: RunConfig, seed: int, config_path, law_path):
    sc = cfg.synthesize
    if law_path is not None:
        law, noise = load_law(law_path)
        return law, noise, None
    if sc is None:
        _fail("config has no 'synthesize' section and no --law was given")
    if sc.law is not None:
        path = Path(sc.law)
        if config_path and not path.is_absolute():
            path = Path(config_path).parent / path
        law, noise = load_law(path)
        return law, noise, None
    if sc.learn is not None:
        law, noise, _ = _learn_law(sc.learn, seed, Path(config_path).parent if config_path else None)
        return law, noise, None
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(0,)))
    _, weights = dean_linear_system()
    return synthetic_law(sc.synthetic_sigma_sq, rng), None, weights


@main.command()
@_config_opt
@_seed_opt
@click.option("--out", type=click.Path(dir_okay=False), default=None, help="Controller (or report) JSON.")
@click.option("--law", "law_path", type=click.Path(exists=True, dir_okay=False), default=None,
              help="Law JSON; overrides the config's law source.")
def synthesize(config_path, seed, out, law_path):
    """Run the certified synthesis loop and write the controller."""
    cfg, seed, out = _load(config_path, seed, out)
    if out is None:
        _fail("--out is required")
    header = _header(cfg, seed)
    try:
        law, noise, default_weights = _synth_law(cfg, seed, config_path, law_path)
        if default_weights is None:
            sigma_w = noise if noise is not None else np.eye(law.d_x)
            default_weights = CostWeights(np.eye(law.d_x), np.eye(law.d_u), sigma_w)
        wc = cfg.synthesize.weights if cfg.synthesize is not None else None
        weights = wc.resolve(default_weights) if wc is not None else default_weights
        profile = cfg.risk.profile()
        with _Phase("synthesize"):
            ctrl = algorithm1(TruncatedLaw(law, profile.c), profile, weights,
                              np.random.SeedSequence(seed, spawn_key=(1,)).generate_state(1)[0],
                              max_restarts=cfg.solver.max_restarts, stop=cfg.solver.stop(),
                              settings=cfg.solver.sdp_settings())
    except InfeasibleInit as exc:
        write_json(out, {**header, "outcome": "InfeasibleInit", "message": str(exc)})
        click.echo(f"infeasible: {exc}", err=True)
        sys.exit(EXIT_INFEASIBLE)
    except RestartsExhausted as exc:
        write_json(out, {**header, "outcome": "RestartsExhausted", "message": str(exc), "attempts": exc.attempts})
        click.echo(f"restarts exhausted: {exc}", err=True)
        sys.exit(EXIT_EXHAUSTED)
    except (OSError, ValueError, KeyError, np.linalg.LinAlgError, RuntimeError) as exc:
        _fail(str(exc))
    write_json(out, {**header, "outcome": "certified", **ctrl.to_dict()})
    click.echo(f"certified: m_scenarios={ctrl.m_scenarios} m_validation={ctrl.m_validation} "
               f"empirical_stability={ctrl.empirical_stability:.5f} -> {out}")


@main.command("validate")
@click.argument("controller_path", type=click.Path(exists=True, dir_okay=False))
@click.argument("law_path", type=click.Path(exists=True, dir_okay=False))
@_config_opt
@_seed_opt
@click.option("--out", type=click.Path(dir_okay=False), default=None, help="Also write the report here.")
@click.option("--c", "c", type=float, default=None, help="Credibility (default: the controller's profile).")
@click.option("--eps", type=float, default=None)
@click.option("--beta", type=float, default=None)
@click.option("--eps-val", "eps_val", type=float, default=None)
@click.option("--alpha", type=float, default=None)
def validate_cmd(controller_path, law_path, config_path, seed, out, c, eps, beta, eps_val, alpha):
    """Monte-Carlo stability check of a controller against a law; exit 0 iff it passes."""
    cfg, seed, out = _load(config_path, seed, out)
    try:
        doc = read_json(controller_path)
        gain = np.array(doc["gain"], dtype=float, ndmin=2)
        base = doc.get("profile") or cfg.risk.model_dump()
        overrides = {"c": c, "eps": eps, "beta": beta, "eps_val": eps_val, "alpha": alpha}
        profile = RiskProfile(**{k: (overrides[k] if overrides[k] is not None else base[k]) for k in overrides})
        law, _ = load_law(law_path)
        rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(2,)))
        with _Phase("validate"):
            report = validate(gain, TruncatedLaw(law, profile.c), profile, rng)
    except (OSError, ValueError, KeyError, json.JSONDecodeError, np.linalg.LinAlgError) as exc:
        _fail(str(exc))
    text = dumps({**_header(cfg, seed), "profile": profile.as_dict(), **report.to_dict()})
    if out is not None:
        atomic_write_text(out, text)
    click.echo(text, nl=False)
    sys.exit(EXIT_OK if report.passed else EXIT_ERROR)


@main.command()
@click.argument("name", type=click.Choice(["synthetic-dist", "cubic"]))
@_config_opt
@_seed_opt
@click.option("--out", type=click.Path(file_okay=False), default=None, help="Output directory.")
@click.option("--jobs", type=click.IntRange(min=1), default=1, show_default=True, help="Worker processes.")
@click.option("--paper-scale", is_flag=True, help="Restore the published repetition and sample counts.")
@click.option("--record-timings", is_flag=True, help="Fill runtime_s (makes outputs machine dependent).")
def experiment(name, config_path, seed, out, jobs, paper_scale, record_timings):
    """Run a benchmark grid; write per-cell JSON, results.csv and print a summary."""
    cfg, seed, out = _load(config_path, seed, out)
    if out is None:
        _fail("--out is required")
    exp = cfg.experiment.model_copy(update={"name": name})
    if paper_scale:
        exp = exp.paper_scale()
    if record_timings:
        exp = exp.model_copy(update={"record_timings": True})
    cfg = cfg.model_copy(update={"experiment": exp})
    header = _header(cfg, seed)
    try:
        with _Phase(f"experiment {name}"):
            records = run_experiment(exp, cfg.risk, cfg.solver, seed, jobs,
                                     provenance={"run_config_hash": header["config_hash"]})
    except (ValueError, np.linalg.LinAlgError, RuntimeError) as exc:
        _fail(str(exc))
    csv_path = write_results(records, out, header)
    click.echo(f"{'grid':>10} {'method':>6} {'feasible':>8} {'mean_cost':>12} {'unstable':>9}")
    for row in summary_table(records):
        cost = "-" if row["mean_cost"] is None else f"{row['mean_cost']:.4e}"
        unst = "-" if row["instability_freq"] is None else f"{row['instability_freq']:.3f}"
        click.echo(f"{row['grid_value']:>10g} {row['method']:>6} {row['feasible_frac']:>8.2f} {cost:>12} {unst:>9}")
    click.echo(f"wrote {csv_path}")


if __name__ == "__main__":  # pragma: no cover
    main()
