"""gapkit command-line harness.

Exit codes: 0 success, 2 config/usage error, 3 every replicate failed.
"""
from __future__ import annotations

import json
import sys

import click
import numpy as np

from . import __version__
from .completion import hard_impute, soft_impute
from .core import (
    IncompleteMatrix,
    SeedSpec,
    format_float,
    read_matrix_csv,
    sep,
    write_mask_csv,
    write_matrix_csv,
)
from .em import EmConfig, EVariant, MVariant, em_gaussian_fit, em_student_fit
from .graph import (
    RecoveryConfig,
    FidelityKind,
    SmoothnessKind,
    UndirectedGraph,
    gmrf_learn,
    recover_tikhonov,
    recover_tv,
    stsrgl_fit,
    var_learn,
)
from .harness import (
    ConfigError,
    comparison_csv,
    compare_methods,
    load_config,
    run_experiment,
)
from .mechanisms import MechanismKind, MechanismSpec, classify_pattern, gen_mask
from .mnar import sem_selection_fit
from .structcov import CovStructure, StructureKind, em_structured_fit
from .subspace import RobustConfig, petrels_init, petrels_update, petrels_weights, robust_update
from .timeseries import Ar1StudentParams, ar1t_fit_saem, ar1t_multiple_impute
from .imputation import ImputerKind, ImputerSpec, multiple_impute, run_imputer

EXIT_CONFIG = 2
EXIT_ALL_FAILED = 3


@click.group()
@click.version_option(__version__)
def main():
    """Missing-data toolkit: simulate masks, impute, estimate, benchmark."""


def _fail_config(message):
    click.echo(f"config error: {message}", err=True)
    sys.exit(EXIT_CONFIG)


def _load(path, mask):
    try:
        return read_matrix_csv(path, mask)
    except (OSError, ValueError) as exc:
        _fail_config(exc)


@main.command("mask")
@click.option("--mechanism", type=click.Choice([k.value for k in MechanismKind]), required=True)
@click.option("--shape", nargs=2, type=int, default=None, help="p n (MCAR without data)")
@click.option("--data", "data_path", type=click.Path(exists=True), default=None)
@click.option("--rate", type=float, default=0.2)
@click.option("--phi0", type=float, default=0.0)
@click.option("--phi1", type=float, default=1.0)
@click.option("--driver-row", type=int, default=0)
@click.option("--seed", type=int, default=0)
@click.option("--out", type=click.Path(), required=True)
@click.option("--classify", is_flag=True, help="print the pattern class of the mask")
def mask_cmd(mechanism, shape, data_path, rate, phi0, phi1, driver_row, seed, out, classify):
    """Draw an observation mask under a missingness mechanism."""
    spec = MechanismSpec(
        MechanismKind(mechanism), rate=rate, driver_row=driver_row, phi0=phi0, phi1=phi1
    )
    X = None
    if data_path is not None:
        X = read_matrix_csv(data_path).values
        shape = X.shape
    if shape is None:
        _fail_config("either --shape or --data is required")
    try:
        m = gen_mask(tuple(shape), spec, X=X, seed=SeedSpec(seed))
    except ValueError as exc:
        _fail_config(exc)
    write_mask_csv(out, m)
    if classify:
        click.echo(classify_pattern(m).value)


@main.command("impute")
@click.option("--in", "in_path", type=click.Path(exists=True), required=True)
@click.option("--mask", "mask_path", type=click.Path(exists=True), default=None)
@click.option("--method", type=click.Choice([k.value for k in ImputerKind]), default="mean")
@click.option("--k", type=int, default=5)
@click.option("--add-noise", is_flag=True)
@click.option("--draws", type=int, default=1, help="multiple-imputation draw count")
@click.option("--seed", type=int, default=0)
@click.option("--out", type=click.Path(), required=True)
def impute_cmd(in_path, mask_path, method, k, add_noise, draws, seed, out):
    """Fill the holes of a CSV matrix."""
    X = _load(in_path, mask_path)
    spec = ImputerSpec(ImputerKind(method), k=k, add_noise=add_noise)
    try:
        if draws > 1:
            for d, Xc in enumerate(multiple_impute(X, spec, draws, SeedSpec(seed))):
                write_matrix_csv(_numbered(out, d + 1), Xc)
        else:
            write_matrix_csv(out, run_imputer(X, spec, SeedSpec(seed)))
    except ValueError as exc:
        _fail_config(exc)


def _numbered(path, d):
    if "." in path.rsplit("/", 1)[-1]:
        stem, ext = path.rsplit(".", 1)
        return f"{stem}.{d}.{ext}"
    return f"{path}.{d}"


@main.command("estimate")
@click.option("--in", "in_path", type=click.Path(exists=True), required=True)
@click.option("--mask", "mask_path", type=click.Path(exists=True), default=None)
@click.option("--model", type=click.Choice(["gaussian", "student"]), default="gaussian")
@click.option("--evariant", type=click.Choice([v.value for v in EVariant]), default="exact")
@click.option("--mvariant", type=click.Choice([v.value for v in MVariant]), default="full")
@click.option("--structure", default=None, help="factor:r or floor:sigma")
@click.option("--estimate-nu", is_flag=True)
@click.option("--tol", type=float, default=1e-8)
@click.option("--maxiter", type=int, default=500)
@click.option("--seed", type=int, default=0)
@click.option("--out", type=click.Path(), default=None)
def estimate_cmd(in_path, mask_path, model, evariant, mvariant, structure, estimate_nu, tol, maxiter, seed, out):
    """EM parameter estimation; emits JSON with mu, sigma, nu and the trace."""
    X = _load(in_path, mask_path)
    cfg = EmConfig(
        e_variant=EVariant(evariant),
        m_variant=MVariant(mvariant),
        tol=tol,
        max_iter=maxiter,
        seed=SeedSpec(seed),
    )
    try:
        if structure:
            fit = em_structured_fit(X, _parse_structure(structure), cfg)
            payload = _fit_payload(fit.params.mu, fit.params.sigma, None, fit.loglik_trace, fit.converged)
        elif model == "gaussian":
            fit = em_gaussian_fit(X, cfg=cfg)
            payload = _fit_payload(fit.params.mu, fit.params.sigma, None, fit.loglik_trace, fit.converged)
        else:
            fit = em_student_fit(X, cfg=cfg, estimate_nu=estimate_nu)
            payload = _fit_payload(
                fit.params.mu, fit.params.sigma, fit.params.nu, fit.loglik_trace, fit.converged
            )
    except ValueError as exc:
        _fail_config(exc)
    _emit_json(payload, out)


def _parse_structure(text):
    kind, _, value = text.partition(":")
    try:
        if kind == "factor":
            return CovStructure(StructureKind.FACTOR_MODEL, r=int(value))
        if kind == "floor":
            return CovStructure(StructureKind.NOISE_FLOOR, sigma_known=float(value))
    except ValueError:
        pass
    _fail_config(f"bad --structure {text!r}; expected factor:r or floor:sigma")


def _fit_payload(mu, sigma, nu, trace, converged):
    payload = {
        "mu": list(map(float, mu)),
        "sigma": [list(map(float, row)) for row in sigma],
        "loglik_trace": list(map(float, trace)),
        "converged": bool(converged),
    }
    if nu is not None:
        payload["nu"] = float(nu)
    return payload


def _emit_json(payload, out):
    text = json.dumps(payload, sort_keys=True, indent=2) + "\n"
    if out:
        with open(out, "w", encoding="utf-8") as fh:
            fh.write(text)
    else:
        click.echo(text, nl=False)


@main.command("mnar-fit")
@click.option("--in", "in_path", type=click.Path(exists=True), required=True)
@click.option("--mask", "mask_path", type=click.Path(exists=True), default=None)
@click.option("--phi0", type=float, default=0.0)
@click.option("--phi1-init", type=float, default=0.0)
@click.option("--iters", type=int, default=200)
@click.option("--burnin", type=int, default=50)
@click.option("--seed", type=int, default=0)
@click.option("--out", type=click.Path(), default=None)
def mnar_fit_cmd(in_path, mask_path, phi0, phi1_init, iters, burnin, seed, out):
    """Stochastic-EM fit of the self-masked selection model."""
    X = _load(in_path, mask_path)
    try:
        res = sem_selection_fit(
            X, init_phi=(phi0, phi1_init), iters=iters, burn_in=burnin, seed=SeedSpec(seed)
        )
    except ValueError as exc:
        _fail_config(exc)
    payload = {
        "mu": list(map(float, res.theta.mu)),
        "sigma": list(map(float, res.theta.sigma)),
        "phi": list(map(float, res.phi)),
        "separation_warnings": res.separation_warnings,
        "mu_chain": [list(map(float, row)) for row in res.mu_chain],
        "phi_chain": [list(map(float, row)) for row in res.phi_chain],
    }
    _emit_json(payload, out)


@main.command("complete")
@click.option("--in", "in_path", type=click.Path(exists=True), required=True)
@click.option("--mask", "mask_path", type=click.Path(exists=True), default=None)
@click.option("--mode", type=click.Choice(["hard", "soft"]), default="hard")
@click.option("--rank", type=int, default=2)
@click.option("--lam", "--lambda", type=float, default=1.0)
@click.option("--tol", type=float, default=1e-6)
@click.option("--maxiter", type=int, default=500)
@click.option("--out", type=click.Path(), required=True)
def complete_cmd(in_path, mask_path, mode, rank, lam, tol, maxiter, out):
    """Low-rank completion of a gappy CSV matrix."""
    X = _load(in_path, mask_path)
    try:
        if mode == "hard":
            res = hard_impute(X, rank, tol=tol, max_iter=maxiter)
        else:
            res = soft_impute(X, lam, tol=tol, max_iter=maxiter)
    except ValueError as exc:
        _fail_config(exc)
    write_matrix_csv(out, res.X)
    if not res.converged:
        click.echo("warning: completion did not converge", err=True)


@main.command("track")
@click.option("--stream", type=click.Path(exists=True), required=True, help="p x T CSV, empty = missing")
@click.option("--mode", type=click.Choice(["petrels", "robust"]), default="petrels")
@click.option("--rank", type=int, default=2)
@click.option("--forget", type=float, default=0.98)
@click.option("--rho", type=float, default=1.0)
@click.option("--alpha", type=float, default=0.0)
@click.option("--truth", type=click.Path(exists=True), default=None, help="p x r basis CSV for sep")
@click.option("--seed", type=int, default=0)
@click.option("--out", type=click.Path(), required=True)
def track_cmd(stream, mode, rank, forget, rho, alpha, truth, seed, out):
    """Stream a gappy matrix through the subspace tracker; per-step CSV out."""
    Y = _load(stream, None)
    U_true = read_matrix_csv(truth).values if truth else None
    state = petrels_init(Y.p, rank, SeedSpec(seed), lambda_forget=forget)
    cfg = RobustConfig(rho=rho, alpha_reg=alpha)
    lines = ["t,residual" + (",sep" if U_true is not None else "")]
    for t in range(Y.n):
        y_t = Y.filled(0.0)[:, t]
        m_t = Y.mask[:, t]
        if mode == "petrels":
            petrels_update(state, y_t, m_t)
        else:
            robust_update(state, y_t, m_t, cfg)
        w, _ = petrels_weights(state.U, y_t, m_t)
        resid = np.linalg.norm(m_t * (y_t - state.U @ w))
        row = f"{t},{format_float(resid)}"
        if U_true is not None:
            row += f",{format_float(sep(state.U, U_true))}"
        lines.append(row)
    with open(out, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


@main.group("graph")
def graph_group():
    """Graph-signal recovery and graph learning."""


def _read_edge_csv(path, p):
    edges = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            i, j, w = line.split(",")
            edges.append((int(i), int(j), float(w)))
    return UndirectedGraph.from_edges(p, edges)


def _write_edge_csv(path, pairs):
    with open(path, "w", encoding="utf-8") as fh:
        for i, j, w in pairs:
            fh.write(f"{i},{j},{format_float(w)}\n")


@graph_group.command("recover")
@click.option("--in", "in_path", type=click.Path(exists=True), required=True)
@click.option("--mask", "mask_path", type=click.Path(exists=True), default=None)
@click.option("--graph", "graph_path", type=click.Path(exists=True), required=True)
@click.option("--smoothness", "smooth", type=click.Choice(["tikhonov", "tv", "spatiotemporal"]), default="tikhonov")
@click.option("--fidelity", type=click.Choice([v.value for v in FidelityKind]), default="exact")
@click.option("--alpha", type=float, default=1.0)
@click.option("--beta", type=float, default=0.0)
@click.option("--out", type=click.Path(), required=True)
def graph_recover_cmd(in_path, mask_path, graph_path, smooth, fidelity, alpha, beta, out):
    """Interpolate missing node signals on a known graph."""
    Y = _load(in_path, mask_path)
    G = _read_edge_csv(graph_path, Y.p)
    try:
        if smooth == "tv":
            X = recover_tv(Y, G, alpha=alpha)
        else:
            cfg = RecoveryConfig(
                fidelity=FidelityKind(fidelity),
                smoothness=SmoothnessKind(smooth),
                alpha=alpha,
                beta=beta,
            )
            X = recover_tikhonov(Y, G, cfg)
    except ValueError as exc:
        _fail_config(exc)
    write_matrix_csv(out, X)


@graph_group.command("learn")
@click.option("--in", "in_path", type=click.Path(exists=True), required=True)
@click.option("--model", type=click.Choice(["gmrf", "var"]), default="gmrf")
@click.option("--alpha", type=float, default=0.1)
@click.option("--out", type=click.Path(), required=True)
def graph_learn_cmd(in_path, model, alpha, out):
    """Learn a graph from a complete signal matrix; edge-list CSV out."""
    X = _load(in_path, None)
    if X.n_missing() > 0:
        _fail_config("graph learning needs a complete matrix; impute first")
    vals = X.values
    if model == "gmrf":
        S = vals @ vals.T / X.n
        G = gmrf_learn(S, alpha)
        _write_edge_csv(out, G.edges())
    else:
        A = var_learn(vals, alpha).A
        nz = np.argwhere(np.abs(A) > 0)
        _write_edge_csv(out, [(i, j, A[i, j]) for i, j in nz])


@graph_group.command("joint")
@click.option("--in", "in_path", type=click.Path(exists=True), required=True)
@click.option("--mask", "mask_path", type=click.Path(exists=True), default=None)
@click.option("--alpha-a", type=float, default=0.01)
@click.option("--alpha-l", type=float, default=0.05)
@click.option("--sigma-n2", type=float, default=0.01)
@click.option("--iters", type=int, default=10)
@click.option("--out-prefix", required=True, help="writes <prefix>.X.csv, .L.csv, .A.csv")
def graph_joint_cmd(in_path, mask_path, alpha_a, alpha_l, sigma_n2, iters, out_prefix):
    """Joint signal recovery plus spatial/temporal graph learning."""
    Y = _load(in_path, mask_path)
    try:
        res = stsrgl_fit(Y, alpha_a=alpha_a, alpha_l=alpha_l, sigma_n2=sigma_n2, iters=iters)
    except ValueError as exc:
        _fail_config(exc)
    write_matrix_csv(f"{out_prefix}.X.csv", res.X)
    _write_edge_csv(f"{out_prefix}.L.csv", res.L.edges())
    A = res.A.A
    nz = np.argwhere(np.abs(A) > 0)
    _write_edge_csv(f"{out_prefix}.A.csv", [(i, j, A[i, j]) for i, j in nz])


@main.command("ts-fit")
@click.option("--in", "in_path", type=click.Path(exists=True), required=True)
@click.option("--iters", type=int, default=300)
@click.option("--nu", type=float, default=None, help="fix the degrees of freedom")
@click.option("--seed", type=int, default=0)
@click.option("--out", type=click.Path(), default=None)
def ts_fit_cmd(in_path, iters, nu, seed, out):
    """Fit the AR(1) Student-t model to a single-column gappy series."""
    y = _read_series(in_path)
    cfg = EmConfig(max_iter=iters, seed=SeedSpec(seed))
    init = None
    if nu is not None:
        from .timeseries import _ols_ar1

        mu0, a0, s0 = _ols_ar1(y)
        init = Ar1StudentParams(mu0, a0, s0, nu)
    try:
        fit = ar1t_fit_saem(y, init=init, cfg=cfg, estimate_nu=nu is None)
    except ValueError as exc:
        _fail_config(exc)
    payload = {
        "mu": fit.params.mu,
        "a": fit.params.a,
        "sigma": fit.params.sigma,
        "nu": fit.params.nu,
        "iters": fit.n_iter,
    }
    _emit_json(payload, out)


def _read_series(path):
    vals = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            tok = line.strip().rstrip(",")
            vals.append(float(tok) if tok else np.nan)
    return np.array(vals)


@main.command("ts-impute")
@click.option("--in", "in_path", type=click.Path(exists=True), required=True)
@click.option("--draws", type=int, default=5)
@click.option("--mu", type=float, required=True)
@click.option("--a", type=float, required=True)
@click.option("--sigma", type=float, required=True)
@click.option("--nu", type=float, required=True)
@click.option("--seed", type=int, default=0)
@click.option("--out", type=click.Path(), required=True)
def ts_impute_cmd(in_path, draws, mu, a, sigma, nu, seed, out):
    """Posterior-draw completions of a gappy series; one column per draw."""
    y = _read_series(in_path)
    try:
        params = Ar1StudentParams(mu, a, sigma, nu)
        paths = ar1t_multiple_impute(y, params, draws, SeedSpec(seed))
    except ValueError as exc:
        _fail_config(exc)
    write_matrix_csv(out, paths.T)


@main.command("bench")
@click.option("--config", "config_path", type=click.Path(exists=True), required=True)
@click.option("--out-dir", type=click.Path(), default=".")
def bench_cmd(config_path, out_dir):
    """Run a replicated experiment; writes results.csv and manifest.json."""
    import os

    try:
        config = load_config(config_path)
        result = run_experiment(config)
    except ConfigError as exc:
        _fail_config(exc)
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "results.csv"), "w", encoding="utf-8") as fh:
        fh.write(result.to_csv())
    with open(os.path.join(out_dir, "manifest.json"), "w", encoding="utf-8") as fh:
        fh.write(result.manifest_json())
    if result.all_failed:
        click.echo("all replicates failed", err=True)
        sys.exit(EXIT_ALL_FAILED)


@main.command("compare")
@click.option("--config", "config_paths", type=click.Path(exists=True), multiple=True, required=True)
@click.option("--out", type=click.Path(), required=True)
def compare_cmd(config_paths, out):
    """Aligned-seed comparison of several method configs."""
    try:
        configs = [load_config(p) for p in config_paths]
        rows = compare_methods(configs)
    except ConfigError as exc:
        _fail_config(exc)
    with open(out, "w", encoding="utf-8") as fh:
        fh.write(comparison_csv(rows))


if __name__ == "__main__":
    main()
