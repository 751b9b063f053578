"""Config-driven experiment pipeline: basis -> data -> chain -> diagnostics -> archive.

Every output file is a deterministic function of the resolved config, so
re-running a config reproduces the archive byte for byte. The manifest
carries sha256 digests of every file but no timestamps or paths.
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import logging
import math
import platform
import shutil
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

import numpy as np
import scipy
import yaml

from .diagnostics import adaptation_decay, acf_columns, ess_columns, summarize
from .kl import Grid, KlBasis, MaternParams, build_kl_basis, load_basis, project, save_basis, select_J
from .models import (HeatModel, HeatSolverConfig, LinearGaussianModel, OdeModel,
                     analytic_posterior, generate_synthetic_data, make_phi, observation_times,
                     write_observations)
from .samplers import Chain, SamplerConfig, run_mcmc

log = logging.getLogger(__name__)

PROBLEMS = ("ode", "robin", "linear-gaussian")
ARCHIVE_VERSION = 1


class ConfigError(ValueError):
    """Invalid experiment config; ``field`` is the dotted key at fault."""

    def __init__(self, field_name: str, message: str):
        super().__init__(f"{field_name}: {message}")
        self.field = field_name


class StageError(RuntimeError):
    """A pipeline stage failed at run time."""

    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage '{stage}' failed: {cause}")
        self.stage = stage


# -- config schema ------------------------------------------------------------

@dataclass
class PriorSection:
    sigma: float = 1.0
    nu: float = 5.0
    ell: float = 1.0
    grid_size: int = 101
    M: Optional[int] = None


@dataclass
class SamplerSection:
    kind: str = "apcn"
    beta: Optional[float] = 0.2
    delta: Optional[float] = None
    n_steps: int = 100_000
    n_prerun: int = 10_000
    rho: float = 0.99
    J: Optional[int] = None
    eps: Optional[float] = None
    radius: Optional[float] = None
    init: str = "prior"


@dataclass
class DataSection:
    n_intervals: int = 100
    include_start: bool = True
    noise_sigma: float = 0.1
    truth: str = "prior"  # "prior" or a CSV of grid values (t, value)
    n_modes: int = 5  # linear-gaussian only
    design: str = "identity"  # linear-gaussian: identity | whitened


@dataclass
class HeatSection:
    nx: int = 101
    nt: int = 401
    sensor: str = "left"
    convention: str = "outward"


@dataclass
class SeedSection:
    truth: int = 0
    noise: int = 1
    chain: int = 2


@dataclass
class OutputSection:
    dir: str = "runs/experiment"
    thin: int = 1
    lag: int = 1000
    burn_in: Optional[int] = None  # stored states; None drops the pre-run segment


@dataclass
class ExperimentConfig:
    problem: str = "ode"
    prior: PriorSection = field(default_factory=PriorSection)
    sampler: SamplerSection = field(default_factory=SamplerSection)
    data: DataSection = field(default_factory=DataSection)
    heat: HeatSection = field(default_factory=HeatSection)
    seeds: SeedSection = field(default_factory=SeedSection)
    output: OutputSection = field(default_factory=OutputSection)

    def to_dict(self, include_dir: bool = True) -> dict:
        d = dataclasses.asdict(self)
        if not include_dir:
            d["output"].pop("dir")
        return d


_SECTIONS = {"prior": PriorSection, "sampler": SamplerSection, "data": DataSection,
             "heat": HeatSection, "seeds": SeedSection, "output": OutputSection}


def _coerce(value, default, name: str):
    """Check ``value`` against the type of the section default."""
    if value is None:
        return None
    kind = type(default)
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(name, f"expected true/false, got {value!r}")
        return value
    if isinstance(default, int) or name.split(".")[-1] in ("M", "J", "burn_in"):
        if isinstance(value, bool) or not isinstance(value, (int, float)) or value != int(value):
            raise ConfigError(name, f"expected an integer, got {value!r}")
        return int(value)
    if isinstance(default, float) or default is None:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(name, f"expected a number, got {value!r}")
        return float(value)
    if kind is str and not isinstance(value, str):
        raise ConfigError(name, f"expected a string, got {value!r}")
    return value


def config_from_dict(raw: Optional[dict]) -> ExperimentConfig:
    raw = dict(raw or {})
    unknown = set(raw) - {"problem", *_SECTIONS}
    if unknown:
        name = sorted(unknown)[0]
        raise ConfigError(name, "unknown key")
    kwargs: dict[str, Any] = {"problem": raw.get("problem", "ode")}
    for key, cls in _SECTIONS.items():
        sub = raw.get(key) or {}
        if not isinstance(sub, dict):
            raise ConfigError(key, "expected a mapping")
        defaults = cls()
        names = {f.name for f in dataclasses.fields(cls)}
        for k in sub:
            if k not in names:
                raise ConfigError(f"{key}.{k}", "unknown key")
        values = {k: _coerce(v, getattr(defaults, k), f"{key}.{k}") for k, v in sub.items()}
        kwargs[key] = dataclasses.replace(defaults, **values)
    cfg = ExperimentConfig(**kwargs)
    validate(cfg)
    return cfg


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError("config", f"file not found: {path}")
    try:
        raw = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise ConfigError("config", f"not valid YAML: {exc}") from exc
    if raw is not None and not isinstance(raw, dict):
        raise ConfigError("config", "top level must be a mapping")
    cfg = config_from_dict(raw)
    truth = cfg.data.truth
    if truth != "prior" and not Path(truth).is_absolute():
        cfg.data.truth = str((path.parent / truth).resolve())
        if not Path(cfg.data.truth).is_file():
            raise ConfigError("data.truth", f"file not found: {truth}")
    return cfg


def _require(ok: bool, name: str, message: str):
    if not ok:
        raise ConfigError(name, message)


def validate(cfg: ExperimentConfig) -> None:
    _require(cfg.problem in PROBLEMS, "problem", f"must be one of {PROBLEMS}")
    p, s, d, h, o = cfg.prior, cfg.sampler, cfg.data, cfg.heat, cfg.output
    for name in ("sigma", "nu", "ell"):
        v = getattr(p, name)
        _require(v is not None and math.isfinite(v) and v > 0, f"prior.{name}", "must be positive and finite")
    _require(p.grid_size >= 2, "prior.grid_size", "must be at least 2")
    _require(p.M is None or 1 <= p.M <= p.grid_size, "prior.M", "must be in [1, grid_size]")
    _require(s.kind in ("cn", "pcn", "apcn"), "sampler.kind", "must be cn, pcn or apcn")
    if s.kind == "cn":
        _require(s.delta is not None and 0 < s.delta < 2, "sampler.delta", "CN needs delta in (0, 2)")
    else:
        _require(s.beta is not None or s.delta is not None, "sampler.beta", "pCN/ApCN need beta or delta")
        if s.beta is not None:
            _require(0 <= s.beta <= 1, "sampler.beta", "must lie in [0, 1]")
    _require(s.n_steps >= 1, "sampler.n_steps", "must be positive")
    if s.kind == "apcn":  # ignored by the other samplers
        _require(0 <= s.n_prerun <= s.n_steps, "sampler.n_prerun", "must be in [0, n_steps]")
    _require(0 < s.rho < 1, "sampler.rho", "must lie in (0, 1)")
    _require(s.J is None or s.J >= 1, "sampler.J", "must be positive")
    _require(s.eps is None or s.eps >= 0, "sampler.eps", "must be nonnegative")
    _require(s.radius is None or s.radius > 0, "sampler.radius", "must be positive")
    _require(s.init in ("prior", "zero"), "sampler.init", "must be prior or zero")
    _require(d.n_intervals >= 1, "data.n_intervals", "must be positive")
    _require(d.noise_sigma > 0, "data.noise_sigma", "must be positive")
    _require(d.design in ("identity", "whitened"), "data.design", "must be identity or whitened")
    _require(d.n_modes >= 1, "data.n_modes", "must be positive")
    if cfg.problem == "linear-gaussian":
        _require(d.n_modes <= (p.M or p.grid_size), "data.n_modes", "exceeds the number of modes")
    _require(h.sensor in ("left", "right", "both"), "heat.sensor", "must be left, right or both")
    _require(h.convention in ("outward", "literal"), "heat.convention", "must be outward or literal")
    _require(h.nx >= 3, "heat.nx", "must be at least 3")
    _require(h.nt >= 2, "heat.nt", "must be at least 2")
    for name in ("truth", "noise", "chain"):
        _require(getattr(cfg.seeds, name) >= 0, f"seeds.{name}", "must be a nonnegative integer")
    _require(o.thin >= 1, "output.thin", "must be positive")
    _require(o.lag >= 1, "output.lag", "must be positive")
    _require(o.burn_in is None or o.burn_in >= 0, "output.burn_in", "must be nonnegative")


# -- pipeline -----------------------------------------------------------------

def build_basis(cfg: ExperimentConfig) -> KlBasis:
    p = cfg.prior
    return build_kl_basis(Grid.uniform(p.grid_size), MaternParams(p.sigma, p.nu, p.ell), M=p.M)


def build_model(cfg: ExperimentConfig, basis: KlBasis):
    d = cfg.data
    if cfg.problem == "ode":
        return OdeModel(basis, observation_times(d.n_intervals, include_start=d.include_start))
    if cfg.problem == "robin":
        h = cfg.heat
        solver = HeatSolverConfig(nx=h.nx, nt=h.nt, sensor=h.sensor, convention=h.convention)
        return HeatModel(basis, observation_times(d.n_intervals, include_start=d.include_start), solver)
    design = np.zeros((d.n_modes, basis.M))
    idx = np.arange(d.n_modes)
    design[idx, idx] = 1.0 if d.design == "identity" else 1.0 / basis.sqrt_alphas[: d.n_modes]
    return LinearGaussianModel(design, basis)


def _truth(cfg: ExperimentConfig, basis: KlBasis) -> np.ndarray:
    if cfg.data.truth == "prior":
        rng = np.random.default_rng(cfg.seeds.truth)
        return basis.sqrt_alphas * rng.standard_normal(basis.M)
    tab = np.loadtxt(cfg.data.truth, delimiter=",", skiprows=1, ndmin=2)
    values = np.interp(basis.grid.points, tab[:, 0], tab[:, -1])
    return project(basis, values)


def sampler_config(cfg: ExperimentConfig, basis: KlBasis) -> SamplerConfig:
    s = cfg.sampler
    sc = SamplerConfig(kind=s.kind, beta=s.beta, delta=s.delta, n_steps=s.n_steps,
                       n_prerun=s.n_prerun if s.kind == "apcn" else 0, J=s.J, rho=s.rho, eps=s.eps,
                       seed=cfg.seeds.chain, init=s.init, thin=cfg.output.thin)
    try:
        return sc.resolved(basis)
    except ValueError as exc:
        raise ConfigError("sampler", str(exc)) from exc


def resolve(cfg: ExperimentConfig, basis: KlBasis) -> ExperimentConfig:
    """Copy of ``cfg`` with every defaulted quantity made explicit."""
    out = dataclasses.replace(cfg, prior=dataclasses.replace(cfg.prior),
                              sampler=dataclasses.replace(cfg.sampler),
                              output=dataclasses.replace(cfg.output))
    sc = sampler_config(cfg, basis)
    out.prior.M = basis.M
    out.sampler.beta = sc.beta
    if sc.kind == "apcn":
        out.sampler.J, out.sampler.eps = sc.J, sc.eps
    else:
        out.sampler.n_prerun = 0
    if out.output.burn_in is None:
        out.output.burn_in = -(-out.sampler.n_prerun // out.output.thin)
    n_store = out.sampler.n_steps // out.output.thin + 1
    if out.output.burn_in >= n_store:
        raise ConfigError("output.burn_in", f"must be below the {n_store} stored states")
    return out


def _fmt(x) -> str:
    return repr(float(x))


def _write_csv(path: Path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def write_diagnostics(out: Path, chain: Chain, basis: KlBasis, burn_in: int, lag: int) -> dict:
    """Per-grid-point summary table, ACF table and a JSON block; returns the JSON block."""
    s = summarize(chain, basis, burn_in=burn_in, max_lag=lag)
    lag_used = int(s.lags[-1])
    _write_csv(out / "summary.csv",
               ["t", "mean", "median", "band_lo", "band_hi", "ess", "acf_lag"],
               [[_fmt(t), _fmt(m), _fmt(md), _fmt(lo), _fmt(hi), _fmt(e), _fmt(a)]
                for t, m, md, lo, hi, e, a in zip(basis.grid.points, s.mean_field, s.median_field,
                                                   s.band_lo, s.band_hi, s.ess_field, s.acf_curves[:, -1])])
    _write_csv(out / "acf.csv", ["lag"] + [f"t{i}" for i in range(basis.grid.size)],
               [[k] + [_fmt(v) for v in s.acf_curves[:, k]] for k in range(lag_used + 1)])
    decay = None
    if s.lambda_traj is not None and s.lambda_traj.shape[0] > 1:
        try:
            decay = adaptation_decay(s.lambda_traj, s.lambda_steps, n_min=max(1e3, float(s.lambda_steps[0])))
        except ValueError:
            decay = None
    info = {
        "acceptance_rate": chain.acceptance_rate,
        "acceptance_rate_post_burn_in": s.acceptance_rate,
        "mean_accept_prob": chain.meta["mean_accept_prob"],
        "burn_in": burn_in,
        "n_samples": s.n_samples,
        "lag": lag_used,
        "mean_ess": float(s.ess_field.mean()),
        "min_ess": float(s.ess_field.min()),
        "adaptation_decay": None if decay is None or not math.isfinite(decay) else decay,
    }
    _write_json(out / "summary.json", info)
    return info


def run_experiment(cfg: ExperimentConfig, out_dir=None, progress: bool = False) -> Path:
    """Run the full pipeline and write the archive; returns its directory."""
    out = Path(out_dir if out_dir is not None else cfg.output.dir)
    try:
        basis = build_basis(cfg)
    except Exception as exc:
        raise StageError("basis", exc) from exc
    resolved = resolve(cfg, basis)
    if out.exists():
        shutil.rmtree(out)
    out.mkdir(parents=True)

    try:
        model = build_model(resolved, basis)
        truth = _truth(resolved, basis)
        obs = generate_synthetic_data(model, truth, resolved.data.noise_sigma,
                                      np.random.default_rng(resolved.seeds.noise))
    except Exception as exc:
        raise StageError("data", exc) from exc

    try:
        potential = make_phi(model, obs, resolved.sampler.radius)
        chain = run_mcmc(potential, basis, sampler_config(resolved, basis), progress=progress)
    except Exception as exc:
        raise StageError("sampling", exc) from exc

    try:
        (out / "config.resolved.yaml").write_text(
            yaml.safe_dump(resolved.to_dict(include_dir=False), sort_keys=True))
        save_basis(basis, out)
        _write_csv(out / "truth.csv", ["t", "value"],
                   [[_fmt(t), _fmt(v)] for t, v in zip(basis.grid.points, basis.synthesize(truth))])
        _write_csv(out / "truth_coeffs.csv", ["j", "coeff"],
                   [[j, _fmt(c)] for j, c in enumerate(truth, start=1)])
        write_observations(obs, out / "observations.csv",
                           {"truth_seed": resolved.seeds.truth, "noise_seed": resolved.seeds.noise,
                            "model": model.describe()})
        np.save(out / "chain.npy", chain.samples)
        _write_csv(out / "chain.csv", ["step", "accepted", "phi"],
                   [[int(k), int(a), _fmt(p)] for k, a, p in zip(chain.steps, chain.accepted, chain.phis)])
        if chain.lambda_traj is not None:
            keep = (chain.lambda_steps % resolved.output.thin == 0)
            keep[-1] = True
            _write_csv(out / "lambda.csv", ["step"] + [f"lambda_{j}" for j in range(1, resolved.sampler.J + 1)],
                       [[int(n)] + [_fmt(v) for v in row]
                        for n, row in zip(chain.lambda_steps[keep], chain.lambda_traj[keep])])
        if resolved.problem == "linear-gaussian":
            mean, cov = analytic_posterior(model.design, obs, basis.alphas)
            _write_csv(out / "analytic_posterior.csv", ["j", "mean", "var"],
                       [[j, _fmt(m), _fmt(v)] for j, (m, v) in enumerate(zip(mean, np.diag(cov)), start=1)])
    except Exception as exc:
        raise StageError("write", exc) from exc

    try:
        info = write_diagnostics(out, chain, basis, resolved.output.burn_in, resolved.output.lag)
    except Exception as exc:
        raise StageError("diagnostics", exc) from exc

    _write_json(out / "chain_meta.json", chain.meta)
    write_manifest(out, resolved, info)
    return out


def write_manifest(out: Path, resolved: ExperimentConfig, info: dict) -> None:
    from . import __version__
    files = sorted(p.name for p in out.iterdir() if p.is_file() and p.name != "manifest.json")
    manifest = {
        "archive_version": ARCHIVE_VERSION,
        "package_version": __version__,
        "numpy_version": np.__version__,
        "scipy_version": scipy.__version__,
        "python_version": platform.python_version(),
        "problem": resolved.problem,
        "sampler": resolved.sampler.kind,
        "J": resolved.sampler.J,
        "seeds": dataclasses.asdict(resolved.seeds),
        "acceptance_rate": info["acceptance_rate"],
        "files": {name: _sha256(out / name) for name in files},
    }
    _write_json(out / "manifest.json", manifest)


# -- archive access and comparison --------------------------------------------

@dataclass
class Archive:
    path: Path
    config: ExperimentConfig
    basis: KlBasis
    chain: Chain


def load_archive(path) -> Archive:
    path = Path(path)
    if not (path / "manifest.json").is_file():
        raise FileNotFoundError(f"{path} is not a run archive (no manifest.json)")
    raw = yaml.safe_load((path / "config.resolved.yaml").read_text())
    raw["output"]["dir"] = str(path)
    cfg = config_from_dict(raw)
    basis = load_basis(path)
    samples = np.load(path / "chain.npy")
    tab = np.loadtxt(path / "chain.csv", delimiter=",", skiprows=1, ndmin=2)
    meta = json.loads((path / "chain_meta.json").read_text())
    lam_steps = lam = None
    if (path / "lambda.csv").is_file():
        lt = np.loadtxt(path / "lambda.csv", delimiter=",", skiprows=1, ndmin=2)
        lam_steps, lam = lt[:, 0].astype(int), lt[:, 1:]
    chain = Chain(samples, tab[:, 1].astype(bool), tab[:, 2], tab[:, 0].astype(int), meta, lam_steps, lam)
    return Archive(path, cfg, basis, chain)


def resummarize(path, lag: Optional[int] = None, burn_in: Optional[int] = None) -> dict:
    """Recompute the diagnostics tables of an archive (optionally at a new lag or burn-in)."""
    arc = load_archive(path)
    lag = arc.config.output.lag if lag is None else lag
    burn_in = arc.config.output.burn_in if burn_in is None else burn_in
    return write_diagnostics(arc.path, arc.chain, arc.basis, burn_in, lag)


@dataclass
class Comparison:
    t: np.ndarray
    ess_a: np.ndarray
    ess_b: np.ndarray
    acf_a: np.ndarray
    acf_b: np.ndarray
    lag: int
    dominance: float  # fraction of points where A has the larger ESS, ties count half

    def write_csv(self, path) -> None:
        _write_csv(Path(path), ["t", "ess_a", "ess_b", f"acf_a_lag{self.lag}", f"acf_b_lag{self.lag}"],
                   [[_fmt(t), _fmt(a), _fmt(b), _fmt(x), _fmt(y)]
                    for t, a, b, x, y in zip(self.t, self.ess_a, self.ess_b, self.acf_a, self.acf_b)])


def _grid_stats(arc: Archive, lag: int):
    values = arc.basis.synthesize(arc.chain.samples[arc.config.output.burn_in:])
    lag = min(lag, values.shape[0] - 1)
    return ess_columns(values), acf_columns(values, lag)[:, -1], lag


def compare_runs(path_a, path_b, lag: Optional[int] = None) -> Comparison:
    """Per-grid-point ESS and lag-``lag`` ACF of two archives on the same grid."""
    a, b = load_archive(path_a), load_archive(path_b)
    if a.config.problem != b.config.problem:
        raise ValueError(f"archives solve different problems ({a.config.problem} vs {b.config.problem})")
    if a.basis.grid.size != b.basis.grid.size or not np.allclose(a.basis.grid.points, b.basis.grid.points):
        raise ValueError("archives use incompatible grids")
    lag = a.config.output.lag if lag is None else lag
    ess_a, acf_a, lag_a = _grid_stats(a, lag)
    ess_b, acf_b, lag_b = _grid_stats(b, lag)
    if lag_a != lag_b:
        raise ValueError(f"lag {lag} exceeds the shorter chain")
    return Comparison(a.basis.grid.points, ess_a, ess_b, acf_a, acf_b, lag_a, dominance_fraction(ess_a, ess_b))


def dominance_fraction(ess_a, ess_b) -> float:
    ess_a, ess_b = np.asarray(ess_a), np.asarray(ess_b)
    wins = np.where(ess_a > ess_b, 1.0, np.where(ess_a == ess_b, 0.5, 0.0))
    return float(wins.mean())


def spectrum_report(cfg: ExperimentConfig, n_show: int = 20):
    """Leading eigenvalues, cumulative energy fractions and the selected J."""
    basis = build_basis(cfg)
    J = cfg.sampler.J if cfg.sampler.J is not None else select_J(basis.alphas, cfg.sampler.rho)
    frac = np.cumsum(basis.alphas) / basis.alphas.sum()
    n = min(max(n_show, J), basis.M)
    return basis.alphas[:n], frac[:n], J
