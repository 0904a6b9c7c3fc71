"""End-to-end experiment stages: synthetic data, error statistics, the
REF/CEM/BAE inversion triptych, posterior analysis, and reporting.

Every stage writes plain files (field CSVs and JSON metadata) into the
output directory, so stages can run in one process or as separate CLI
invocations.  All randomness derives from the master seed through fixed
stream keys, and floats are written with %.17g, so a rerun with the same
config reproduces every output byte for byte.
"""

from __future__ import annotations

import json
import os

import numpy as np

from . import bae, config as config_mod, fem, posterior as posterior_mod, prior as prior_mod
from .forward_model import ErrorModel, ObservationOperator, PoissonForwardModel
from .mesh import build_slab_mesh, extract_bottom_mesh
from .optimizer import LineSearchError, MapObjective, solve_map

MODELS = ("ref", "cem", "bae")

# spawn keys of the master seed, one stream per purpose
STREAM_TRUTH_BETA = 0
STREAM_TRUTH_A = 1
STREAM_NOISE = 2
# stream 3 is reserved inside bae.sample_seed
STREAM_EIGS = 4


def _stream(cfg, *key):
    return np.random.SeedSequence(cfg.master_seed, spawn_key=tuple(key))


# ---------------------------------------------------------------------------
# file helpers

def write_field_csv(mesh, values, path):
    """Field CSV: header x[,y[,z]],value, one node per line, %.17g."""
    values = np.asarray(values, dtype=float)
    if values.shape != (mesh.n_nodes,):
        raise ValueError(f"field length {values.shape} != {mesh.n_nodes} nodes")
    header = ",".join("xyz"[: mesh.dim]) + ",value"
    lines = [header]
    for coords, v in zip(mesh.nodes, values):
        lines.append(",".join("%.17g" % c for c in coords) + ",%.17g" % v)
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def read_field_csv(path):
    with open(path) as fh:
        rows = fh.read().strip().splitlines()[1:]
    return np.array([float(r.rsplit(",", 1)[1]) for r in rows])


def write_spectrum_csv(full_spectrum, path):
    lines = ["index,eigenvalue"]
    for i, lam in enumerate(full_spectrum):
        lines.append("%d,%.17g" % (i, lam))
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def write_json(payload, path):
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def read_json(path):
    with open(path) as fh:
        return json.load(fh)


# ---------------------------------------------------------------------------
# geometry and models

def _build_mesh(res, cfg):
    if cfg.dim == 3:
        nx, ny, nz = res
    else:
        (nx, nz), ny = res, 1
    return build_slab_mesh(nx, ny, nz, cfg.length, cfg.thickness, dim=cfg.dim)


class Workspace:
    """Meshes, priors, and observation operators derived from a config.

    Construction is deterministic; building a workspace twice from the
    same config yields identical objects.  Model construction is funnelled
    through :meth:`make_model` so stages can log which meshes and
    conductivities they touched.
    """

    def __init__(self, cfg):
        config_mod.validate_config(cfg)
        self.cfg = cfg
        self.mesh_fine = _build_mesh(cfg.synthesis_resolution, cfg)
        self.mesh_inv = _build_mesh(cfg.inversion_resolution, cfg)
        self.bottom_fine = extract_bottom_mesh(self.mesh_fine)
        self.bottom_inv = extract_bottom_mesh(self.mesh_inv)
        self.obs_points = self._observation_points()
        self.obs_fine = ObservationOperator(self.mesh_fine, self.obs_points)
        self.obs_inv = ObservationOperator(self.mesh_inv, self.obs_points)
        self._priors = {}

    def _observation_points(self):
        cfg = self.cfg
        if cfg.observation_points is not None:
            return np.asarray(cfg.observation_points, dtype=float)
        return default_observation_points(cfg.dim, cfg.length, cfg.thickness)

    @property
    def q(self):
        return self.obs_points.shape[0]

    def _prior(self, key, spec, mesh):
        if key not in self._priors:
            gamma = spec.gamma
            if isinstance(gamma, (list, tuple)):
                gamma = np.diag(np.asarray(gamma, dtype=float))
            self._priors[key] = prior_mod.assemble_prior(
                mesh, spec.alpha, gamma, spec.kappa, spec.mean, spec.bc_variant
            )
        return self._priors[key]

    def beta_prior_fine(self):
        return self._prior("beta_fine", self.cfg.beta_prior, self.bottom_fine)

    def beta_prior_inv(self):
        return self._prior("beta_inv", self.cfg.beta_prior, self.bottom_inv)

    def a_prior_fine(self):
        return self._prior("a_fine", self.cfg.a_prior, self.mesh_fine)

    def a_mean_inv(self):
        return np.full(self.mesh_inv.n_nodes, float(self.cfg.a_prior.mean))

    def make_model(self, grid, log_conductivity, label, log=None):
        mesh, bottom, obs = {
            "fine": (self.mesh_fine, self.bottom_fine, self.obs_fine),
            "inversion": (self.mesh_inv, self.bottom_inv, self.obs_inv),
        }[grid]
        model = PoissonForwardModel(
            mesh, bottom, log_conductivity, self.cfg.flux, obs,
            label=f"{grid}/{label}",
        )
        if log is not None:
            log.append({"label": label, "grid": grid, "mesh": mesh.fingerprint()})
        return model


def default_observation_points(dim, length, height):
    """Quasi-regular measurement layout on the top surface: 4 rows of 8
    plus one centre point on the inset [0.1, 0.9]^2 (33 points) in 3-D, a
    9-point inset line in 2-D."""
    if dim == 3:
        xs = np.linspace(0.1, 0.9, 8) * length
        ys = np.linspace(0.1, 0.9, 4) * length
        pts = [(x, y) for y in ys for x in xs]
        pts.append((0.5 * length, 0.5 * length))
        return np.array([(x, y, height) for x, y in pts])
    xs = np.linspace(0.1, 0.9, 9) * length
    return np.column_stack([xs, np.full(xs.size, height)])


# ---------------------------------------------------------------------------
# stage: synthesize

def compute_noise_std(noiseless_obs, noise_percent):
    """Noise standard deviation as a percentage of the observation range."""
    span = float(np.max(noiseless_obs) - np.min(noiseless_obs))
    return span * noise_percent / 100.0


def synthesize_data(cfg, out_dir, noise_percent_override=None):
    """Draw truth fields, solve the fine forward problem, add noise.

    The truth fields default to fixed draws from the priors under
    dedicated seed streams.  Writes observations.json and the truth fields
    on both meshes.
    """
    ws = Workspace(cfg)
    os.makedirs(out_dir, exist_ok=True)
    models_used = []

    beta_true_fine = ws.beta_prior_fine().sample(_stream(cfg, STREAM_TRUTH_BETA))
    a_true_fine = ws.a_prior_fine().sample(_stream(cfg, STREAM_TRUTH_A))
    model = ws.make_model("fine", a_true_fine, "a_true", models_used)
    noiseless = model.solve_forward(beta_true_fine).obs

    noise_percent = cfg.noise_percent if noise_percent_override is None else noise_percent_override
    if noise_percent > 0:
        delta_e = compute_noise_std(noiseless, noise_percent)
        noise = np.random.default_rng(_stream(cfg, STREAM_NOISE)).normal(
            0.0, delta_e, noiseless.size
        )
        d_obs = noiseless + noise
    else:
        delta_e = compute_noise_std(noiseless, cfg.noise_percent)
        d_obs = noiseless.copy()

    beta_true_inv = fem.interpolate_field(ws.bottom_fine, beta_true_fine, ws.bottom_inv)
    a_true_inv = fem.interpolate_field(ws.mesh_fine, a_true_fine, ws.mesh_inv)

    write_field_csv(ws.bottom_fine, beta_true_fine, os.path.join(out_dir, "beta_true_fine.csv"))
    write_field_csv(ws.bottom_inv, beta_true_inv, os.path.join(out_dir, "beta_true_inversion.csv"))
    write_field_csv(ws.mesh_fine, a_true_fine, os.path.join(out_dir, "a_true_fine.csv"))
    write_field_csv(ws.mesh_inv, a_true_inv, os.path.join(out_dir, "a_true_inversion.csv"))
    write_json(
        {
            "points": ws.obs_points.tolist(),
            "d_obs": d_obs.tolist(),
            "noiseless": noiseless.tolist(),
            "delta_e": delta_e,
            "noise_percent": noise_percent,
            "flux": cfg.flux,
            "models_used": models_used,
            "solve_counts": model.counter.as_dict(),
        },
        os.path.join(out_dir, "observations.json"),
    )
    return ws, d_obs, delta_e


# ---------------------------------------------------------------------------
# stage: approximation-error statistics

def error_stats_stage(cfg, out_dir, ws=None):
    """Monte Carlo discrepancy statistics between the fine random-a model
    and the coarse fixed-a model; writes error_stats.json."""
    ws = ws or Workspace(cfg)
    os.makedirs(out_dir, exist_ok=True)
    models_used = []
    prior_a = ws.a_prior_fine()
    prior_beta = ws.beta_prior_fine()
    approx_model = ws.make_model("inversion", ws.a_mean_inv(), "a_star", models_used)

    def accurate(a_values, beta_values):
        model = ws.make_model("fine", a_values, "a_sample", None)
        return model.solve_forward(beta_values).obs

    def approx(beta_values):
        beta_coarse = fem.interpolate_field(ws.bottom_fine, beta_values, ws.bottom_inv)
        return approx_model.solve_forward(beta_coarse).obs

    models_used.append(
        {"label": "a_sample", "grid": "fine", "mesh": ws.mesh_fine.fingerprint()}
    )
    samples = bae.compute_error_samples(
        accurate, approx, prior_a, prior_beta, cfg.bae_samples, cfg.master_seed
    )
    stats = bae.sample_stats(
        samples,
        master_seed=cfg.master_seed,
        fingerprints={
            "synthesis_mesh": ws.mesh_fine.fingerprint(),
            "inversion_mesh": ws.mesh_inv.fingerprint(),
            "beta_prior": f"alpha={cfg.beta_prior.alpha},gamma={cfg.beta_prior.gamma}",
            "a_prior": f"alpha={cfg.a_prior.alpha},gamma={cfg.a_prior.gamma}",
            "models_used": models_used,
        },
    )
    stats.to_json(os.path.join(out_dir, "error_stats.json"))
    return stats


# ---------------------------------------------------------------------------
# stage: inversion

def build_error_model(which, delta_e, q, stats=None):
    if which in ("ref", "cem"):
        return ErrorModel.noise_only(delta_e, q)
    if which == "bae":
        if stats is None:
            raise ValueError("the bae inversion needs approximation-error statistics")
        return bae.enhanced_model(stats, delta_e**2 * np.eye(q))
    raise ValueError(f"unknown model {which!r}; expected one of {MODELS}")


def invert_stage(cfg, out_dir, which, ws=None):
    """MAP estimation for one error model; writes the MAP field, the
    convergence record, and a metadata JSON."""
    if which not in MODELS:
        raise ValueError(f"unknown model {which!r}; expected one of {MODELS}")
    ws = ws or Workspace(cfg)
    obs_payload = read_json(os.path.join(out_dir, "observations.json"))
    d_obs = np.asarray(obs_payload["d_obs"], dtype=float)
    delta_e = float(obs_payload["delta_e"])

    models_used = []
    if which == "ref":
        a_inv = read_field_csv(os.path.join(out_dir, "a_true_inversion.csv"))
        model = ws.make_model("inversion", a_inv, "a_true", models_used)
    else:
        model = ws.make_model("inversion", ws.a_mean_inv(), "a_star", models_used)

    stats = None
    if which == "bae":
        stats = bae.ErrorStats.from_json(os.path.join(out_dir, "error_stats.json"))
    err = build_error_model(which, delta_e, ws.q, stats)

    prior_beta = ws.beta_prior_inv()
    objective = MapObjective(model, prior_beta, err, d_obs)
    beta0 = prior_beta.mean.copy()
    flag = "converged"
    try:
        beta_map, record = solve_map(objective, beta0, cfg.optimizer)
        flag = record.flag
    except LineSearchError as exc:
        beta_map, record = exc.beta, exc.record
        flag = record.flag

    write_field_csv(ws.bottom_inv, beta_map, os.path.join(out_dir, f"map_{which}.csv"))
    record.to_csv(os.path.join(out_dir, f"convergence_{which}.csv"))
    write_json(
        {
            "model": which,
            "flag": flag,
            "summary": record.summary(),
            "solve_counts": model.counter.as_dict(),
            "models_used": models_used,
            "error_model": {
                "mean_shift_norm": float(np.linalg.norm(err.mean_shift)),
                "covariance_trace": float(np.trace(err.covariance)),
            },
        },
        os.path.join(out_dir, f"invert_{which}.json"),
    )
    return beta_map, record


# ---------------------------------------------------------------------------
# stage: posterior

def default_section_lines(dim, length):
    """Endpoints of the two cross-section chords on the bottom surface."""
    if dim >= 3:
        return {
            "p": ((0.15 * length, 0.15 * length), (0.85 * length, 0.85 * length)),
            "q": ((0.15 * length, 0.85 * length), (0.85 * length, 0.15 * length)),
        }
    return {
        "p": ((0.1 * length,), (0.9 * length,)),
        "q": ((0.1 * length,), (0.9 * length,)),
    }


def extract_cross_section(mesh, values, start, end, n_samples):
    """P1 samples of a bottom-surface field along a chord.

    Returns (fractions, points, values) at n_samples equally spaced
    stations from start to end.
    """
    start = np.asarray(start, dtype=float)
    end = np.asarray(end, dtype=float)
    s = np.linspace(0.0, 1.0, n_samples)
    points = start[None, :] + s[:, None] * (end - start)[None, :]
    return s, points, fem.evaluate_field(mesh, values, points)


def posterior_stage(cfg, out_dir, which, ws=None):
    """Low-rank posterior at the MAP point of one model; writes the
    spectrum, the pointwise variance field, cross sections, and metadata."""
    if which not in MODELS:
        raise ValueError(f"unknown model {which!r}; expected one of {MODELS}")
    ws = ws or Workspace(cfg)
    obs_payload = read_json(os.path.join(out_dir, "observations.json"))
    delta_e = float(obs_payload["delta_e"])
    beta_map = read_field_csv(os.path.join(out_dir, f"map_{which}.csv"))
    beta_true = read_field_csv(os.path.join(out_dir, "beta_true_inversion.csv"))

    models_used = []
    if which == "ref":
        a_inv = read_field_csv(os.path.join(out_dir, "a_true_inversion.csv"))
        model = ws.make_model("inversion", a_inv, "a_true", models_used)
    else:
        model = ws.make_model("inversion", ws.a_mean_inv(), "a_star", models_used)
    stats = None
    if which == "bae":
        stats = bae.ErrorStats.from_json(os.path.join(out_dir, "error_stats.json"))
    err = build_error_model(which, delta_e, ws.q, stats)

    prior_beta = ws.beta_prior_inv()
    objective = MapObjective(model, prior_beta, err, None)
    state = model.solve_forward(beta_map)
    n_probe = ws.q + cfg.eig_oversample
    lr = posterior_mod.ppmisfit_eigs(
        objective.misfit_hessian_action(state), prior_beta, beta_map,
        n_probe, _stream(cfg, STREAM_EIGS, MODELS.index(which)),
        truncate_above=cfg.truncate_above, expected_rank=ws.q,
    )
    variance = posterior_mod.pointwise_variance(lr)

    write_spectrum_csv(lr.full_spectrum, os.path.join(out_dir, f"spectrum_{which}.csv"))
    write_field_csv(ws.bottom_inv, variance, os.path.join(out_dir, f"variance_{which}.csv"))

    section_files = {}
    for line_name, (start, end) in default_section_lines(cfg.dim, cfg.length).items():
        path = os.path.join(out_dir, f"section_{line_name}_{which}.csv")
        _write_section(ws.bottom_inv, beta_map, beta_true, variance,
                       start, end, cfg.cross_section_samples, path)
        section_files[line_name] = os.path.basename(path)

    write_json(
        {
            "model": which,
            "retained_rank": int(lr.rank),
            "truncation_threshold": lr.truncation_threshold,
            "n_probe": n_probe,
            "probe_deficient": bool(lr.probe_deficient),
            "models_used": models_used,
            "solve_counts": model.counter.as_dict(),
            "sections": section_files,
        },
        os.path.join(out_dir, f"posterior_{which}.json"),
    )
    return lr, variance


def _write_section(mesh, beta_map, beta_true, variance, start, end, n, path):
    s, points, map_vals = extract_cross_section(mesh, beta_map, start, end, n)
    _, _, true_vals = extract_cross_section(mesh, beta_true, start, end, n)
    _, _, var_vals = extract_cross_section(mesh, variance, start, end, n)
    sd = np.sqrt(np.maximum(var_vals, 0.0))
    coords = ",".join("xyz"[: points.shape[1]])
    lines = [f"s,{coords},map,truth,sd,lower,upper"]
    for k in range(n):
        row = [s[k], *points[k], map_vals[k], true_vals[k], sd[k],
               map_vals[k] - 2 * sd[k], map_vals[k] + 2 * sd[k]]
        lines.append(",".join("%.17g" % v for v in row))
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# stage: report and manifest

def coverage_report(beta_map, pointwise_var, beta_true):
    """Fraction of nodes where the truth is within 2 posterior standard
    deviations of the MAP."""
    band = 2.0 * np.sqrt(np.maximum(np.asarray(pointwise_var, dtype=float), 0.0))
    return float(np.mean(np.abs(beta_true - beta_map) <= band))


def report_stage(cfg, out_dir):
    """Aggregate coverage, dominance, and cost parity into report.json."""
    beta_true = read_field_csv(os.path.join(out_dir, "beta_true_inversion.csv"))
    obs_payload = read_json(os.path.join(out_dir, "observations.json"))
    delta_e = float(obs_payload["delta_e"])
    q = len(obs_payload["d_obs"])

    coverage = {}
    solves = {}
    flags = {}
    for which in MODELS:
        beta_map = read_field_csv(os.path.join(out_dir, f"map_{which}.csv"))
        variance = read_field_csv(os.path.join(out_dir, f"variance_{which}.csv"))
        coverage[which] = coverage_report(beta_map, variance, beta_true)
        meta = read_json(os.path.join(out_dir, f"invert_{which}.json"))
        solves[which] = meta["summary"]
        flags[which] = meta["flag"]

    stats = bae.ErrorStats.from_json(os.path.join(out_dir, "error_stats.json"))
    dom = bae.dominance_check(stats, np.zeros(q), delta_e**2 * np.eye(q))
    parity = (
        solves["bae"]["poisson_solves"] / solves["cem"]["poisson_solves"]
        if solves["cem"]["poisson_solves"] else float("inf")
    )
    payload = {
        "coverage": coverage,
        "dominance": dom.as_dict(),
        "noise_trace": float(q * delta_e**2),
        "approx_error_trace": float(np.trace(stats.eps_cov)),
        "cost_parity_bae_over_cem": parity,
        "optimizer": solves,
        "flags": flags,
    }
    write_json(payload, os.path.join(out_dir, "report.json"))
    return payload


def run_all(cfg, out_dir):
    """Full pipeline; writes manifest.json listing every artifact."""
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "config_resolved.json"), "w") as fh:
        fh.write(config_mod.to_json(cfg))

    ws, _, _ = synthesize_data(cfg, out_dir)
    error_stats_stage(cfg, out_dir, ws=ws)
    for which in MODELS:
        invert_stage(cfg, out_dir, which, ws=ws)
        posterior_stage(cfg, out_dir, which, ws=ws)
    report = report_stage(cfg, out_dir)

    artifacts = ["config_resolved.json", "observations.json", "error_stats.json",
                 "beta_true_fine.csv", "beta_true_inversion.csv",
                 "a_true_fine.csv", "a_true_inversion.csv", "report.json"]
    for which in MODELS:
        artifacts.extend([
            f"map_{which}.csv", f"convergence_{which}.csv", f"invert_{which}.json",
            f"spectrum_{which}.csv", f"variance_{which}.csv", f"posterior_{which}.json",
            f"section_p_{which}.csv", f"section_q_{which}.csv",
        ])
    stage_models = {
        "synthesize": read_json(os.path.join(out_dir, "observations.json"))["models_used"],
        "error_stats": bae.ErrorStats.from_json(
            os.path.join(out_dir, "error_stats.json")
        ).fingerprints.get("models_used", []),
    }
    for which in MODELS:
        stage_models[f"invert_{which}"] = read_json(
            os.path.join(out_dir, f"invert_{which}.json")
        )["models_used"]
        stage_models[f"posterior_{which}"] = read_json(
            os.path.join(out_dir, f"posterior_{which}.json")
        )["models_used"]

    manifest = {
        "config_hash": config_mod.config_hash(cfg),
        "master_seed": cfg.master_seed,
        "artifacts": sorted(artifacts),
        "stage_models": stage_models,
        "coverage": report["coverage"],
        "dominance": report["dominance"]["dominant"],
        "cost_parity_bae_over_cem": report["cost_parity_bae_over_cem"],
        "flags": report["flags"],
        "solve_counts": {m: report["optimizer"][m]["poisson_solves"] for m in MODELS},
    }
    write_json(manifest, os.path.join(out_dir, "manifest.json"))
    return manifest
