"""Command-line tool: simulate, fit, summarize.

Configuration resolves in three layers: package defaults, then a YAML
config file (flat keys matching the option names, plus a ``priors``
section), then explicit command-line flags. Outputs embed the resolved
config and a version string in header comments, carry no timestamps, and
are byte-identical across reruns with the same inputs and seed.

Exit codes: 0 success, 2 input/validation error, 3 sampler divergence or
worker failure (partial results are still written).
"""
from __future__ import annotations

import json
import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path

import click
import numpy as np
import pandas as pd
import yaml

from .basis import build_basis
from .io import (IngestError, downsample, ingest_long_csv,
                 preprocess_activity, read_table, summarize, version_string,
                 write_table)
from .sampler import (PosteriorDraws, PriorConfig, SamplerDivergenceError,
                      fit, waic)
from .simulate import WorkerFailure, run_case

__all__ = ["RunConfig", "main"]


@dataclass
class RunConfig:
    """Resolved settings of one CLI invocation."""

    command: str
    out_dir: str
    functional: str | None = None
    scalar: str | None = None
    estimator: str = "fast"
    tau0: tuple = (0.5,)
    K_n: int | None = None
    K_eps: int = 3
    chains: int = 1
    iters: int = 2000
    burnin: int = 500
    thin: int = 1
    seed: int = 0
    preprocess: bool = False
    winsorize_pct: float = 0.999
    min_valid_days: int = 3
    max_invalid_minutes: int = 144
    downsample: int = 1
    priors: dict = field(default_factory=dict)

    def validate(self):
        if not all(0.0 < t < 1.0 for t in self.tau0):
            raise IngestError(f"tau values must lie in (0, 1): {self.tau0}")
        if not (self.iters > self.burnin >= 0):
            raise IngestError("need iters > burnin >= 0")
        if self.thin < 1 or self.chains < 1:
            raise IngestError("need thin >= 1 and chains >= 1")
        if self.downsample < 1:
            raise IngestError("downsample stride must be >= 1")


def _load_config_file(path) -> dict:
    if path is None:
        return {}
    with open(path) as fh:
        loaded = yaml.safe_load(fh) or {}
    if not isinstance(loaded, dict):
        raise IngestError("config file must hold a mapping of options")
    return loaded


def _resolve(flag_value, file_cfg: dict, key: str, default):
    if flag_value is not None and flag_value != ():
        return flag_value
    return file_cfg.get(key, default)


def _echo_config(cfg: RunConfig) -> dict:
    d = asdict(cfg)
    d["tau0"] = list(cfg.tau0)
    d["version"] = version_string()
    return d


def _fail(message: str, code: int):
    click.echo(f"error: {message}", err=True)
    sys.exit(code)


@click.group()
def main():
    """Bayesian scalar-on-function quantile regression with ME correction."""


# ---------------------------------------------------------------------------
# simulate
# ---------------------------------------------------------------------------

@main.command("simulate")
@click.option("--case", "case_id", type=int, required=True,
              help="Scenario family: 1 sample size, 2 skewed errors, "
                   "3 noise variance, 4 replicate count.")
@click.option("--out-dir", required=True, type=click.Path())
@click.option("--n-rep", type=int, default=None, help="Monte Carlo replicates.")
@click.option("--iters", type=int, default=None)
@click.option("--burnin", type=int, default=None)
@click.option("--thin", type=int, default=None)
@click.option("--tau", "taus", type=float, multiple=True)
@click.option("--estimators", type=str, default=None,
              help="Comma list among fast,naive,FBQ.")
@click.option("--parallel", type=int, default=1)
@click.option("--seed", type=int, default=None)
@click.option("--set", "sets", type=str, multiple=True,
              help="Extra scenario overrides, key=value (e.g. sigma_u=16).")
@click.option("--config", "config_path", type=click.Path(exists=True),
              default=None)
def simulate_cmd(case_id, out_dir, n_rep, iters, burnin, thin, taus,
                 estimators, parallel, seed, sets, config_path):
    """Run one simulation case and write its metrics table."""
    file_cfg = _load_config_file(config_path)
    seed = _resolve(seed, file_cfg, "seed", 0)
    overrides = dict(file_cfg.get("overrides", {}))
    for item in sets:
        key, _, value = item.partition("=")
        if not _:
            _fail(f"--set expects key=value, got {item!r}", 2)
        try:
            overrides[key] = json.loads(value)
        except json.JSONDecodeError:
            overrides[key] = value
    if n_rep is not None:
        overrides["n_r"] = n_rep
    if taus:
        overrides["tau0_list"] = tuple(taus)
    for key, val in (("iters", iters), ("burnin", burnin), ("thin", thin)):
        if val is not None:
            overrides[key] = val
    if estimators is not None:
        overrides["estimators"] = tuple(estimators.split(","))

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    echo = {"command": "simulate", "case": case_id, "seed": seed,
            "parallel": parallel, "overrides": overrides,
            "version": version_string()}
    try:
        table = run_case(case_id, overrides=overrides, parallelism=parallel,
                         seed=seed)
    except WorkerFailure as err:
        write_table(err.partial, out / "results_partial.csv", echo)
        _fail(str(err), 3)
    except (ValueError, IngestError) as err:
        _fail(str(err), 2)
    write_table(table, out / "results.csv", echo)
    (out / "run_log.json").write_text(
        json.dumps({"config": echo, "rows": len(table)}, sort_keys=True,
                   indent=2) + "\n")
    click.echo(f"wrote {out / 'results.csv'} ({len(table)} rows)")


# ---------------------------------------------------------------------------
# fit
# ---------------------------------------------------------------------------

def _draws_frame(draws: PosteriorDraws) -> pd.DataFrame:
    p = draws.beta_z.shape[1]
    K = draws.phi.shape[1]
    Ke = draws.gammas.shape[1]
    cols = {"beta0": draws.beta0}
    for j in range(p):
        cols[f"beta_z_{j + 1}"] = draws.beta_z[:, j]
    for k in range(K):
        cols[f"phi_{k + 1}"] = draws.phi[:, k]
    cols["theta2"] = draws.theta2
    for k in range(Ke):
        cols[f"w_{k + 1}"] = draws.eps_weights[:, k]
        cols[f"gamma_{k + 1}"] = draws.gammas[:, k]
        cols[f"sigma_{k + 1}"] = draws.sigmas[:, k]
    return pd.DataFrame(cols)


def _tau_tag(tau: float) -> str:
    return f"{tau:.4g}".replace(".", "p")


@main.command("fit")
@click.option("--functional", type=click.Path(exists=True), required=True)
@click.option("--scalar", "scalar_path", type=click.Path(exists=True),
              required=True)
@click.option("--out-dir", required=True, type=click.Path())
@click.option("--estimator", type=str, default=None)
@click.option("--tau", "taus", type=float, multiple=True)
@click.option("--k-n", type=int, default=None)
@click.option("--k-eps", type=int, default=None)
@click.option("--chains", type=int, default=None)
@click.option("--iters", type=int, default=None)
@click.option("--burnin", type=int, default=None)
@click.option("--thin", type=int, default=None)
@click.option("--seed", type=int, default=None)
@click.option("--preprocess/--no-preprocess", default=None,
              help="Winsorize and apply the valid-day filter before fitting.")
@click.option("--winsorize-pct", type=float, default=None)
@click.option("--min-valid-days", type=int, default=None)
@click.option("--max-invalid-minutes", type=int, default=None)
@click.option("--downsample", "downsample_stride", type=int, default=None)
@click.option("--config", "config_path", type=click.Path(exists=True),
              default=None)
def fit_cmd(functional, scalar_path, out_dir, estimator, taus, k_n, k_eps,
            chains, iters, burnin, thin, seed, preprocess, winsorize_pct,
            min_valid_days, max_invalid_minutes, downsample_stride,
            config_path):
    """Fit the quantile regression to CSV data and write summaries."""
    try:
        file_cfg = _load_config_file(config_path)
        cfg = RunConfig(
            command="fit",
            out_dir=str(out_dir),
            functional=str(functional),
            scalar=str(scalar_path),
            estimator=_resolve(estimator, file_cfg, "estimator", "fast"),
            tau0=tuple(_resolve(tuple(taus), file_cfg, "tau0", (0.5,))),
            K_n=_resolve(k_n, file_cfg, "K_n", None),
            K_eps=_resolve(k_eps, file_cfg, "K_eps", 3),
            chains=_resolve(chains, file_cfg, "chains", 1),
            iters=_resolve(iters, file_cfg, "iters", 2000),
            burnin=_resolve(burnin, file_cfg, "burnin", 500),
            thin=_resolve(thin, file_cfg, "thin", 1),
            seed=_resolve(seed, file_cfg, "seed", 0),
            preprocess=_resolve(preprocess, file_cfg, "preprocess", False),
            winsorize_pct=_resolve(winsorize_pct, file_cfg,
                                   "winsorize_pct", 0.999),
            min_valid_days=_resolve(min_valid_days, file_cfg,
                                    "min_valid_days", 3),
            max_invalid_minutes=_resolve(max_invalid_minutes, file_cfg,
                                         "max_invalid_minutes", 144),
            downsample=_resolve(downsample_stride, file_cfg, "downsample", 1),
            priors=dict(file_cfg.get("priors", {})),
        )
        cfg.validate()
    except (IngestError, ValueError, OSError, yaml.YAMLError) as err:
        _fail(str(err), 2)

    echo = _echo_config(cfg)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    report = None
    try:
        data = ingest_long_csv(cfg.functional, cfg.scalar)
        if cfg.preprocess:
            data, report = preprocess_activity(
                data, cfg.winsorize_pct, cfg.min_valid_days,
                cfg.max_invalid_minutes)
        if cfg.downsample > 1:
            data = downsample(data, cfg.downsample)
        K_n = cfg.K_n or min(15, max(4, data.T // 4))
        basis = build_basis(data.grid, K_n)
        priors = PriorConfig(K_eps=cfg.K_eps, **cfg.priors)
    except (IngestError, ValueError) as err:
        _fail(str(err), 2)

    scalar_rows, band_rows, waic_rows = [], [], []
    try:
        for tau in cfg.tau0:
            draws = fit(data, basis, priors=priors, tau0=tau,
                        estimator=cfg.estimator, chains=cfg.chains,
                        iters=cfg.iters, burnin=cfg.burnin, thin=cfg.thin,
                        seed=cfg.seed)
            sdf, bdf, w = summarize(draws, basis)
            sdf.insert(0, "tau", tau)
            bdf.insert(0, "tau", tau)
            scalar_rows.append(sdf)
            band_rows.append(bdf)
            waic_rows.append({"tau": tau, "waic": w,
                              "n_draws": draws.n_draws})
            tag = _tau_tag(tau)
            write_table(_draws_frame(draws), out / f"draws_tau{tag}.csv", echo)
            ll = pd.DataFrame(
                draws.loglik.T,
                columns=[f"obs_{i + 1}" for i in range(data.n)])
            write_table(ll, out / f"loglik_tau{tag}.csv", echo)
    except SamplerDivergenceError as err:
        _fail(f"sampler diverged: {err}", 3)
    except (ValueError, np.linalg.LinAlgError) as err:
        _fail(str(err), 2)

    write_table(pd.concat(scalar_rows, ignore_index=True),
                out / "scalar_summary.csv", echo)
    write_table(pd.concat(band_rows, ignore_index=True),
                out / "beta_bands.csv", echo)
    write_table(pd.DataFrame(waic_rows), out / "waic.csv", echo)
    manifest = {
        "config": echo,
        "grid": [float(t) for t in data.grid],
        "K_n": int(basis.K_n),
        "n": int(data.n),
        "J": int(data.J),
        "p": int(data.p),
        "taus": [float(t) for t in cfg.tau0],
        "preprocess_report": None if report is None else {
            "cap": report.cap, "n_capped": report.n_capped,
            "dropped_days": report.dropped_days,
            "dropped_subjects": report.dropped_subjects,
            "day_histogram": report.day_histogram,
            "J_common": report.J_common,
        },
    }
    (out / "manifest.json").write_text(
        json.dumps(manifest, sort_keys=True, indent=2, default=str) + "\n")
    (out / "run_log.json").write_text(
        json.dumps({"config": echo, "waic": waic_rows,
                    "outputs": sorted(p.name for p in out.glob("*.csv"))},
                   sort_keys=True, indent=2, default=str) + "\n")
    click.echo(f"fit complete: {out}")


# ---------------------------------------------------------------------------
# summarize (from stored draws)
# ---------------------------------------------------------------------------

@main.command("summarize")
@click.option("--run-dir", type=click.Path(exists=True), required=True)
@click.option("--level", type=float, default=0.95)
def summarize_cmd(run_dir, level):
    """Rebuild summary tables from the draws stored by a previous fit."""
    run = Path(run_dir)
    try:
        manifest = json.loads((run / "manifest.json").read_text())
        grid = np.asarray(manifest["grid"], dtype=float)
        basis = build_basis(grid, manifest["K_n"])
        echo = manifest["config"]
        scalar_rows, band_rows = [], []
        for tau in manifest["taus"]:
            tag = _tau_tag(tau)
            ddf = read_table(run / f"draws_tau{tag}.csv")
            ll = read_table(run / f"loglik_tau{tag}.csv").to_numpy().T
            p = manifest["p"]
            K = manifest["K_n"]
            Ke = echo["K_eps"]
            draws = PosteriorDraws(
                beta0=ddf["beta0"].to_numpy(),
                beta_z=ddf[[f"beta_z_{j + 1}" for j in range(p)]].to_numpy(),
                phi=ddf[[f"phi_{k + 1}" for k in range(K)]].to_numpy(),
                theta2=ddf["theta2"].to_numpy(),
                eps_weights=ddf[[f"w_{k + 1}" for k in range(Ke)]].to_numpy(),
                gammas=ddf[[f"gamma_{k + 1}" for k in range(Ke)]].to_numpy(),
                sigmas=ddf[[f"sigma_{k + 1}" for k in range(Ke)]].to_numpy(),
                loglik=ll,
                meta={"tau0": tau},
            )
            sdf, bdf, w = summarize(draws, basis, level=level)
            sdf.insert(0, "tau", tau)
            bdf.insert(0, "tau", tau)
            scalar_rows.append(sdf)
            band_rows.append(bdf)
            click.echo(f"tau={tau}: WAIC={w:.3f}")
        write_table(pd.concat(scalar_rows, ignore_index=True),
                    run / "scalar_summary.csv", echo)
        write_table(pd.concat(band_rows, ignore_index=True),
                    run / "beta_bands.csv", echo)
    except (OSError, KeyError, ValueError, json.JSONDecodeError) as err:
        _fail(str(err), 2)
    click.echo(f"summaries rebuilt in {run}")


if __name__ == "__main__":
    main()
