"""Command line entry point: dmftsim <subcommand> --config cfg.ini --out dir.

Subcommands: spectral | simulate | dmft | fixed-point | amp-check | compare
| pipeline.  Every stage is deterministic given the config, and CSV/JSON
artifacts are byte-identical across reruns.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import amp as amp_mod
from . import dmft as dmft_mod
from . import fixed_point as fp_mod
from . import metrics
from .config import ConfigError, ExperimentConfig, load_config
from .gd import GdConfig, empirical_joint, loss_value, run_gd
from .model import make_instance
from .spectral import QuadratureSpec, solve_lambda_star, spectral_estimator

FLOAT_FMT = "%.17g"


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, default=_json_default) + "\n")


def _json_default(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    raise TypeError(f"not JSON serializable: {type(obj)}")


def _write_matrix_csv(path: Path, M: np.ndarray, corner: str = "t\\s") -> None:
    M = np.atleast_2d(M)
    with open(path, "w") as fh:
        fh.write(corner + "," + ",".join(str(s) for s in range(M.shape[1])) + "\n")
        for t, row in enumerate(M):
            fh.write(str(t) + "," + ",".join(FLOAT_FMT % v for v in row) + "\n")


def _write_samples(path_base: Path, arr: np.ndarray, fmt: str) -> Path:
    if fmt == "npy":
        path = path_base.with_suffix(".npy")
        np.save(path, arr)
    else:
        path = path_base.with_suffix(".csv")
        with open(path, "w") as fh:
            fh.write(",".join(f"c{j}" for j in range(arr.shape[1])) + "\n")
            for row in arr:
                fh.write(",".join(FLOAT_FMT % v for v in row) + "\n")
    return path


def _quad(cfg: ExperimentConfig) -> QuadratureSpec:
    return QuadratureSpec(gh_nodes=cfg.gh_nodes, z_samples=cfg.z_samples,
                          seed=cfg.quad_seed)


def _mc(cfg: ExperimentConfig) -> dmft_mod.MonteCarloSpec:
    return dmft_mod.MonteCarloSpec(K=cfg.dmft_K, seed=cfg.dmft_seed,
                                   jitter=cfg.dmft_jitter)


class Runner:
    """Caches the expensive intermediates shared between pipeline stages."""

    def __init__(self, cfg: ExperimentConfig, out: Path):
        self.cfg = cfg
        self.out = out
        self._lam_sol = None
        self._inst = None
        self._spec = None
        self._traj = None
        self._dmft_state = None
        self._dmft_law = None
        self._fp = None

    # -- shared intermediates ---------------------------------------------

    def lam_sol(self):
        if self._lam_sol is None:
            cfg = self.cfg
            self._lam_sol = solve_lambda_star(
                cfg.preprocess(), cfg.link(), cfg.noise(), cfg.delta, _quad(cfg))
        return self._lam_sol

    def inst(self):
        if self._inst is None:
            cfg = self.cfg
            self._inst = make_instance(cfg.n, cfg.d, cfg.seed, cfg.link(),
                                       cfg.noise(), cfg.signal())
        return self._inst

    def spec_result(self):
        if self._spec is None:
            self._spec = spectral_estimator(self.inst(), self.cfg.preprocess())
        return self._spec

    def theta0(self) -> np.ndarray:
        cfg = self.cfg
        if cfg.init == "spectral":
            return self.spec_result().theta0
        rng = np.random.default_rng(cfg.seed + 7_777_777)
        theta0 = rng.standard_normal(cfg.d)
        return theta0 * np.sqrt(cfg.d) / np.linalg.norm(theta0)

    def traj(self):
        if self._traj is None:
            cfg = self.cfg
            gd_cfg = GdConfig(gamma=cfg.gamma, lambda_ridge=cfg.lambda_ridge, m=cfg.m)
            self._traj = run_gd(self.inst(), cfg.loss(), gd_cfg, self.theta0())
        return self._traj

    def dmft_state(self):
        if self._dmft_state is None:
            cfg = self.cfg
            state = dmft_mod.init_dmft(
                cfg.loss(), cfg.link(), cfg.noise(), cfg.preprocess(),
                self.lam_sol(), cfg.delta, cfg.gamma, cfg.lambda_ridge,
                _mc(cfg), signal=cfg.signal(),
                independent_init=(cfg.init == "independent"))
            self._dmft_law = dmft_mod.run_dmft(state, cfg.m)
            self._dmft_state = state
        return self._dmft_state

    def dmft_law(self):
        self.dmft_state()
        return self._dmft_law

    def fixed_point(self):
        if self._fp is None:
            cfg = self.cfg
            init = None
            if cfg.fp_warm_start == "dmft":
                init = fp_mod.warm_start_from_dmft(self.dmft_state())
            sol_cfg = fp_mod.SolverConfig(K=cfg.fp_K, damping=cfg.fp_damping,
                                          tol=cfg.fp_tol, max_outer=cfg.fp_max_outer,
                                          seed=cfg.fp_seed)
            self._fp = fp_mod.iterate_fixed_point(
                cfg.loss(), cfg.link(), cfg.noise(), cfg.delta, cfg.gamma,
                cfg.lambda_ridge, sol_cfg, init=init, signal=cfg.signal())
        return self._fp

    # -- stages -------------------------------------------------------------

    def stage_spectral(self) -> dict:
        sol = self.lam_sol()
        spec = self.spec_result()
        record = {
            "lambda_star": sol.lambda_star,
            "lambda_bar": sol.lambda_bar,
            "overlap_a": sol.overlap_a,
            "lam1_lim": sol.lam1_lim,
            "lam2_lim": sol.lam2_lim,
            "lam1_emp": spec.lam1_emp,
            "lam2_emp": spec.lam2_emp,
            "overlap_emp": spec.overlap_emp,
        }
        _write_json(self.out / "spectral.json", record)
        return {"ok": True}

    def stage_simulate(self) -> dict:
        cfg = self.cfg
        inst = self.inst()
        traj = self.traj()
        loss = cfg.loss()
        sqd = np.sqrt(inst.d)
        with open(self.out / "trajectory.csv", "w") as fh:
            fh.write("t,dist,overlap,loss\n")
            for t in range(traj.m + 1):
                dist = np.linalg.norm(traj.theta[t] - inst.theta_star) / sqd
                ov = float(traj.theta[t] @ inst.theta_star / inst.d)
                lv = loss_value(inst, loss, cfg.lambda_ridge, traj.theta[t])
                fh.write(f"{t}," + ",".join(
                    FLOAT_FMT % v for v in (dist, ov, lv)) + "\n")
        return {"ok": True}

    def stage_dmft(self) -> dict:
        state = self.dmft_state()
        law = self.dmft_law()
        out = self.out
        m = state.t_eta
        _write_matrix_csv(out / "C_theta.csv", state.C_theta)
        _write_matrix_csv(out / "R_theta.csv", state.R_theta_matrix())
        _write_matrix_csv(out / "C_eta.csv", state.C_eta)
        _write_matrix_csv(out / "R_eta.csv", state.R_eta_matrix())
        cols = {
            "C_theta_star": np.asarray(state.c_theta_star),
            "R_theta_diamond": np.asarray(state.r_theta_dia),
            "C_eta_diamond": np.asarray(state.c_eta_dia),
            "R_eta_star": np.asarray(state.R_eta_star),
            "R_eta_diamond": np.asarray(state.R_eta_dia),
            "R_eta_diamond2": np.asarray(state.R_eta_dd),
            "Gamma": np.asarray(state.Gamma),
        }
        with open(out / "kernels_channels.csv", "w") as fh:
            fh.write("t," + ",".join(cols) + "\n")
            n_rows = max(len(v) for v in cols.values())
            for t in range(n_rows):
                vals = [FLOAT_FMT % c[t] if t < len(c) else "" for c in cols.values()]
                fh.write(f"{t}," + ",".join(vals) + "\n")
        _write_samples(out / "dmft_theta_samples", law.theta_samples, self.cfg.sample_format)
        _write_samples(out / "dmft_eta_samples", law.eta_samples, self.cfg.sample_format)
        diag = {
            "C_eta_diamond_diamond": state.C_eta_dia_dia,
            "overlap_a": state.a,
            "min_eig_w_process": min(state.w_proc.min_eig_before_jitter),
            "min_eig_u_process": min(state.u_proc.min_eig_before_jitter),
        }
        if m >= 10:
            rep = dmft_mod.tti_diagnostics(state)
            diag["tti_deviation_by_lag"] = {str(k): v for k, v in rep.tti_dev.items()}
            diag["response_fit_slope"] = rep.fit_slope
            diag["response_fit_r2"] = rep.fit_r2
            diag["dia_theta_decay_ratio"] = float(
                rep.dia_theta.max() / max(rep.dia_theta[-1], 1e-300))
        _write_json(out / "dmft_diagnostics.json", diag)
        return {"ok": True}

    def stage_fixed_point(self) -> dict:
        cfg = self.cfg
        fp = self.fixed_point()
        res = fp_mod.fixed_point_residuals(fp, cfg.loss(), cfg.delta, cfg.lambda_ridge)
        record = {
            "R_theta_inf": fp.R_theta_inf,
            "R_eta_inf": fp.R_eta_inf,
            "R_eta_star": fp.R_eta_star,
            "Gamma_inf": fp.Gamma_inf,
            "C_eta_inf": fp.C_eta_inf,
            "C_theta_inf": fp.C_theta_inf,
            "residuals": res,
            "iterations": fp.iterations,
            "converged": fp.converged,
        }
        _write_json(self.out / "fixed_point.json", record)
        return {"ok": fp.converged}

    def stage_amp_check(self) -> dict:
        cfg = self.cfg
        if cfg.init != "spectral":
            raise ConfigError("field algo.init: amp-check requires spectral init")
        table = amp_mod.onsager_from_dmft(self.dmft_state(), cfg.m)
        run = amp_mod.run_spectral_amp(
            self.inst(), cfg.preprocess(), self.lam_sol(), self.theta0(),
            table, cfg.loss(), cfg.gamma, cfg.lambda_ridge, cfg.m)
        err_theta, err_eta = amp_mod.verify_equivalence(run, self.traj())
        se = amp_mod.se_check(run, self.dmft_law(), self.theta0(),
                              self.inst().theta_star, cfg.delta)
        record = {
            "equiv_error_theta": err_theta,
            "equiv_error_eta": err_eta,
            "se_report": se,
        }
        _write_json(self.out / "amp_check.json", record)
        return {"ok": bool(err_theta <= 1e-8 and err_eta <= 1e-8)}

    def stage_compare(self) -> dict:
        cfg = self.cfg
        traj = self.traj()
        tb, eb = empirical_joint(traj, self.inst().theta_star)
        state = self.dmft_state()
        rep = metrics.compare_empirical_vs_dmft(
            tb, eb, self.dmft_law(), state.C_theta, state.c_theta_star, state.C_eta)
        record = {
            "w2_theta": rep.w2_theta,
            "w2_eta": rep.w2_eta,
            "cov_disc_theta": rep.cov_disc_theta,
            "cov_disc_eta": rep.cov_disc_eta,
            "overlap_emp": rep.overlap_emp,
            "overlap_dmft": rep.overlap_dmft,
            "max_overlap_diff": rep.max_overlap_diff,
            "w2_tol": cfg.w2_tol,
            "cov_tol": cfg.cov_tol,
        }
        ok = bool(
            rep.w2_theta.max() <= cfg.w2_tol
            and rep.w2_eta.max() <= cfg.w2_tol
            and rep.cov_disc_theta <= cfg.cov_tol
        )
        record["ok"] = ok
        _write_json(self.out / "comparison.json", record)
        with open(self.out / "comparison.csv", "w") as fh:
            fh.write("t,w2_theta,w2_eta,overlap_emp,overlap_dmft\n")
            for t in range(len(rep.w2_theta)):
                fh.write(f"{t}," + ",".join(FLOAT_FMT % v for v in (
                    rep.w2_theta[t], rep.w2_eta[t],
                    rep.overlap_emp[t], rep.overlap_dmft[t])) + "\n")
        return {"ok": ok}

    STAGES = {
        "spectral": stage_spectral,
        "simulate": stage_simulate,
        "dmft": stage_dmft,
        "fixed-point": stage_fixed_point,
        "amp-check": stage_amp_check,
        "compare": stage_compare,
    }


def run_pipeline(cfg: ExperimentConfig, out_dir: Path) -> int:
    """Execute the configured stages in dependency order; nonzero exit when
    any stage check fails."""
    out_dir.mkdir(parents=True, exist_ok=True)
    runner = Runner(cfg, out_dir)
    order = ["spectral", "simulate", "dmft", "amp-check", "fixed-point",
             "compare"]
    requested = [s for s in order if s in cfg.pipeline_stages]
    status = {}
    for name in requested:
        status[name] = Runner.STAGES[name](runner)
    _write_json(out_dir / "pipeline_status.json", status)
    return 0 if all(v["ok"] for v in status.values()) else 1


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="dmftsim",
        description="Spectral-initialized gradient descent: simulation, DMFT "
                    "integration, fixed points, and AMP cross-checks.")
    parser.add_argument("subcommand", choices=[
        "spectral", "simulate", "dmft", "fixed-point", "amp-check",
        "compare", "pipeline"])
    parser.add_argument("--config", required=True, help="INI config file")
    parser.add_argument("--out", default=None, help="output directory")
    parser.add_argument("--seed", type=int, default=None,
                        help="override model.seed")
    args = parser.parse_args(argv)

    try:
        cfg = load_config(args.config)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    out_dir = Path(args.out if args.out is not None else cfg.out_dir)

    if args.subcommand == "pipeline":
        return run_pipeline(cfg, out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    runner = Runner(cfg, out_dir)
    try:
        result = Runner.STAGES[args.subcommand](runner)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    return 0 if result["ok"] else 1


if __name__ == "__main__":
    sys.exit(main())
