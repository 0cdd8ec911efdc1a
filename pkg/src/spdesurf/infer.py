"""Gaussian likelihood, Fisher scoring and AIC model selection.

Observations sit exactly on mesh nodes without measurement noise, so the
stacked data vector ``y = (u1, u2)`` is itself a draw of the nodal weights
and ``y ~ N(0, Q^{-1})``.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp

from .fem import assemble
from .mesh import TriangleMesh, grid_panel_mesh
from .model import (
    InvalidParameterError,
    ModelSpec,
    ParamVector,
    build_precision,
    common_indices,
    panel_indices,
    param_count,
)
from .sample import NotPositiveDefiniteError, dense_cholesky, factorize

log = logging.getLogger(__name__)

LOG_2PI = math.log(2.0 * math.pi)
DENSE_LIMIT = 8000
MEMORY_BUDGET = 1 << 30  # bytes of dense workspace for Fisher products


class FitError(RuntimeError):
    pass


@dataclass(eq=False)
class PanelDataset:
    mesh: TriangleMesh
    y: np.ndarray
    panel_id: int = 0

    def __post_init__(self):
        self.y = np.asarray(self.y, dtype=float).ravel()
        if self.y.shape != (2 * self.mesh.n_vertices,):
            raise ValueError(
                f"expected {2 * self.mesh.n_vertices} observations, got {self.y.size}"
            )
        if not np.all(np.isfinite(self.y)):
            raise ValueError("observations must be finite")

    @cached_property
    def fem(self):
        return assemble(self.mesh)

    @property
    def u1(self):
        return self.y[: self.mesh.n_vertices]

    @property
    def u2(self):
        return self.y[self.mesh.n_vertices:]


@dataclass
class FitOptions:
    max_iter: int = 200
    grad_tol: float = 1e-6
    rel_tol: float = 1e-8
    max_halvings: int = 30
    ridge: float = 1e-8
    cond_limit: float = 1e12
    max_step: float = 0.5  # largest change of any transformed coordinate per step
    dense_limit: int = DENSE_LIMIT
    threads: int = 1


@dataclass
class FitResult:
    params: ParamVector
    trace: list
    iterations: int
    converged: bool
    exact_loglik: float | None = None
    surrogate_loglik: float | None = None
    flags: list = field(default_factory=list)

    @property
    def spec(self) -> ModelSpec:
        return self.params.spec


# --------------------------------------------------------------------------
# likelihood pieces


def log_likelihood(Q, y) -> float:
    """-N/2 log 2pi + 1/2 log det Q - 1/2 y^T Q y, via a sparse Cholesky."""
    y = np.asarray(y, dtype=float).ravel()
    Q = sp.csc_matrix(Q)
    if Q.shape != (y.size, y.size):
        raise ValueError(f"dimension mismatch: Q is {Q.shape}, y has {y.size} entries")
    factor = factorize(Q)
    return -0.5 * y.size * LOG_2PI + 0.5 * factor.logdet() - 0.5 * float(y @ (Q @ y))


def gaussian_terms(Q, dQ, y, order: int = 2, dense_limit: int = DENSE_LIMIT, budget: int = MEMORY_BUDGET):
    """Log-likelihood, its gradient and Fisher information for one observation.

    ``dQ`` holds the precision derivatives; structurally empty ones are
    skipped.  The trace terms use a dense inverse, so ``order >= 1`` requires
    ``dim(Q) <= dense_limit``.
    """
    y = np.asarray(y, dtype=float).ravel()
    N = y.size
    if order == 0:
        return log_likelihood(Q, y), None, None
    if N > dense_limit:
        raise FitError(f"dense gradient terms need dim <= {dense_limit}, got {N}; use a surrogate subset")
    Qd = Q.toarray()
    c = dense_cholesky(Qd)
    logdet = 2.0 * float(np.sum(np.log(np.diag(c))))
    ll = -0.5 * N * LOG_2PI + 0.5 * logdet - 0.5 * float(y @ (Qd @ y))
    S = sla.cho_solve((c, True), np.eye(N), overwrite_b=True)
    del Qd, c

    p = len(dQ)
    active = [i for i in range(p) if dQ[i].nnz]
    g = np.zeros(p)
    for i in active:
        A = dQ[i].tocoo()
        g[i] = 0.5 * float(np.dot(S[A.row, A.col], A.data)) - 0.5 * float(y @ (dQ[i] @ y))
    if order == 1:
        return ll, g, None

    # tr(S dQi S dQj) = <X_i, X_j^T> with X_i = dQi S; each block is one GEMM
    fisher = np.zeros((p, p))
    chunk = max(1, int(budget // (16 * N * N)))
    blocks = [active[k:k + chunk] for k in range(0, len(active), chunk)]

    def products(idx):
        X = np.empty((len(idx), N * N))
        XT = np.empty((len(idx), N * N))
        for r, i in enumerate(idx):
            M = np.asarray(dQ[i] @ S)
            X[r] = M.ravel()
            XT[r] = M.T.ravel()
        return X, XT

    for a, blk_a in enumerate(blocks):
        Xa, XaT = products(blk_a)
        fisher[np.ix_(blk_a, blk_a)] = 0.5 * (Xa @ XaT.T)
        for blk_b in blocks[a + 1:]:
            _, XbT = products(blk_b)
            fisher[np.ix_(blk_a, blk_b)] = 0.5 * (Xa @ XbT.T)
            del XbT
        del Xa, XaT
    fisher = np.triu(fisher) + np.triu(fisher, 1).T
    return ll, g, fisher


def _panel_of(spec: ModelSpec, k: int, ds: PanelDataset) -> int:
    if spec.stationary:
        return 0
    return ds.panel_id if 0 <= ds.panel_id < spec.n_panels else k


def _map_datasets(fn, datasets, threads: int):
    if threads > 1 and len(datasets) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(fn, range(len(datasets))))
    return [fn(k) for k in range(len(datasets))]


def joint_log_likelihood(spec: ModelSpec, params: ParamVector, datasets, threads: int = 1) -> float:
    """Sum of independent per-panel log-likelihoods sharing common parameters."""

    def one(k):
        ds = datasets[k]
        pm = build_precision(spec, params, ds.fem, ds.mesh, panel=_panel_of(spec, k, ds), wrt=[])
        return log_likelihood(pm.Q, ds.y)

    return float(sum(_map_datasets(one, datasets, threads)))


def _joint_terms(spec, params, datasets, wrt, order, options):
    wrt = np.arange(len(params.flat)) if wrt is None else np.asarray(wrt, dtype=int)

    def one(k):
        ds = datasets[k]
        panel = _panel_of(spec, k, ds)
        pm = build_precision(spec, params, ds.fem, ds.mesh, panel=panel, wrt=wrt)
        return gaussian_terms(pm.Q, pm.dQ, ds.y, order=order, dense_limit=options.dense_limit)

    parts = _map_datasets(one, datasets, options.threads)
    ll = float(sum(p[0] for p in parts))
    g = np.sum([p[1] for p in parts], axis=0) if order >= 1 else None
    fisher = np.sum([p[2] for p in parts], axis=0) if order >= 2 else None
    return ll, g, fisher


def log_likelihood_grad(spec, params, datasets, options: FitOptions | None = None) -> np.ndarray:
    """Gradient in the unconstrained (flat) coordinates, summed over panels."""
    return _joint_terms(spec, params, datasets, None, 1, options or FitOptions())[1]


def fisher_information(spec, params, datasets, options: FitOptions | None = None) -> np.ndarray:
    return _joint_terms(spec, params, datasets, None, 2, options or FitOptions())[2]


# --------------------------------------------------------------------------
# optimisation


class SpdeObjective:
    """Joint log-likelihood as a function of a subset of flat parameters."""

    def __init__(self, spec, datasets, base: ParamVector, free=None, options: FitOptions | None = None):
        self.spec = spec
        self.datasets = list(datasets)
        self.base = base
        self.free = np.arange(len(base.flat)) if free is None else np.asarray(free, dtype=int)
        self.options = options or FitOptions()

    def params(self, x) -> ParamVector:
        flat = self.base.flat.copy()
        flat[self.free] = x
        return ParamVector(self.spec, flat)

    def value(self, x) -> float:
        try:
            with np.errstate(over="ignore", invalid="ignore"):
                return joint_log_likelihood(self.spec, self.params(x), self.datasets, self.options.threads)
        except (InvalidParameterError, NotPositiveDefiniteError, FloatingPointError):
            return -np.inf

    def terms(self, x):
        return _joint_terms(self.spec, self.params(x), self.datasets, self.free, 2, self.options)


def _natural_direction(g, fisher, options, flags):
    p = len(g)
    tr = float(np.trace(fisher))
    try:
        ev = np.linalg.eigvalsh(fisher)
        if ev[0] <= ev[-1] / options.cond_limit:
            fisher = fisher + options.ridge * (tr / p) * np.eye(p)
        step = np.linalg.solve(fisher, g)
        if not np.all(np.isfinite(step)):
            raise np.linalg.LinAlgError("non-finite step")
        return step
    except np.linalg.LinAlgError:
        flags.append("fisher-solve-failed")
        scale = tr / p if tr > 0 else 1.0
        return 0.1 * g / scale


def natural_gradient_ascent(objective, x0, options: FitOptions | None = None):
    """Fisher-scoring ascent with step halving.

    ``objective`` provides ``value(x)`` and ``terms(x) -> (ll, grad, fisher)``.
    Returns (x, trace, accepted_steps, converged, flags).
    """
    opt = options or FitOptions()
    x = np.array(x0, dtype=float)
    flags: list = []
    ll, g, fisher = objective.terms(x)
    trace = [ll]
    steps = 0
    converged = False
    for _ in range(opt.max_iter):
        if np.max(np.abs(g), initial=0.0) < opt.grad_tol:
            converged = True
            break
        direction = _natural_direction(g, fisher, opt, flags)
        # a full scoring step can jump between likelihood modes; cap its length
        longest = np.max(np.abs(direction), initial=0.0)
        if longest > opt.max_step:
            direction = direction * (opt.max_step / longest)
        t = 1.0
        accepted = None
        for _ in range(opt.max_halvings + 1):
            trial = x + t * direction
            ll_new = objective.value(trial)
            if ll_new >= ll:
                accepted = trial
                break
            t *= 0.5
        if accepted is None:
            flags.append("line-search-stalled")
            gain = 0.5 * float(g @ direction)
            converged = gain <= opt.rel_tol * max(abs(ll), 1.0)
            break
        x = accepted
        steps += 1
        ll_prev = ll
        ll, g, fisher = objective.terms(x)
        trace.append(ll)
        log.debug("step %d: ll=%.6f (t=%g)", steps, ll, t)
        if abs(ll - ll_prev) <= opt.rel_tol * abs(ll_prev):
            converged = True
            break
    return x, trace, steps, converged, flags


def natural_gradient_fit(spec, theta0: ParamVector, datasets, options: FitOptions | None = None, free=None) -> FitResult:
    """Maximise the joint likelihood over the ``free`` flat parameters."""
    opt = options or FitOptions()
    obj = SpdeObjective(spec, datasets, theta0, free=free, options=opt)
    if not np.isfinite(obj.value(obj.base.flat[obj.free])):
        raise FitError("initial parameters give an invalid model")
    x, trace, steps, converged, flags = natural_gradient_ascent(obj, theta0.flat[obj.free], opt)
    return FitResult(
        params=obj.params(x),
        trace=trace,
        iterations=steps,
        converged=converged,
        surrogate_loglik=trace[-1],
        flags=flags,
    )


def surrogate_subset(dataset: PanelDataset, side: int) -> PanelDataset:
    """Centred side x side sub-grid of a gridded panel, with its own sub-mesh."""
    shape = dataset.mesh.grid_shape
    if shape is None:
        raise ValueError("surrogate subsets need a gridded panel mesh")
    ny, nx = shape
    if side > min(nx, ny):
        raise ValueError(f"side {side} exceeds panel grid {ny}x{nx}")
    if side < 2:
        raise ValueError("side must be >= 2")
    if side == nx == ny:
        return dataset
    oj, oi = (ny - side) // 2, (nx - side) // 2
    jj, ii = np.meshgrid(np.arange(oj, oj + side), np.arange(oi, oi + side), indexing="ij")
    idx = (jj * nx + ii).ravel()
    sub = grid_panel_mesh(side, side, 1.0)
    mesh = TriangleMesh(dataset.mesh.vertices[idx], sub.triangles, grid_shape=(side, side))
    n = dataset.mesh.n_vertices
    y = np.concatenate([dataset.y[idx], dataset.y[n + idx]])
    return PanelDataset(mesh, y, dataset.panel_id)


def rescale_tau(spec, params: ParamVector, datasets) -> ParamVector:
    """Scale all tau coefficients by the closed-form likelihood-optimal factor."""
    N = sum(ds.y.size for ds in datasets)
    q = 0.0
    for k, ds in enumerate(datasets):
        pm = build_precision(spec, params, ds.fem, ds.mesh, panel=_panel_of(spec, k, ds), wrt=[])
        q += float(ds.y @ (pm.Q @ ds.y))
    if not q > 0:
        return params
    s = math.sqrt(N / q)
    keys = ("tau_d", "tau_o") if spec.stationary else ("c_tau_d", "c_tau_o")
    return params.replace(**{k: params[k] * s for k in keys})


def stationary_to_nonstationary(spec_nonstat: ModelSpec, stat: ParamVector) -> ParamVector:
    """Embed a stationary fit as the gamma = 0 point of the nonstationary spec."""
    vals = {}
    for name, v in stat.natural().items():
        key = "c_" + name if name in ("tau_d", "tau_o", "eta_d", "eta_o") else name
        vals[key] = v
    return ParamVector.from_natural(spec_nonstat, vals)


def two_stage_fit(spec_nonstat: ModelSpec, theta_stat: ParamVector, datasets, options: FitOptions | None = None) -> FitResult:
    """Fix common parameters at a stationary fit, then fit each panel's Fourier block."""
    if spec_nonstat.stationary:
        raise ValueError("two-stage fitting applies to nonstationary specs")
    opt = options or FitOptions()
    spec = spec_nonstat.with_panels(max(spec_nonstat.n_panels, len(datasets)))
    base = stationary_to_nonstationary(spec, theta_stat)
    inner = FitOptions(**{**opt.__dict__, "threads": 1})

    def one(k):
        ds = datasets[k]
        panel = _panel_of(spec, k, ds)
        try:
            return natural_gradient_fit(spec, base, [ds], inner, free=panel_indices(spec, panel)), panel
        except Exception as exc:  # noqa: BLE001 - re-raised with panel context
            raise FitError(f"panel {ds.panel_id}: {exc}") from exc

    results = _map_datasets(one, datasets, opt.threads)
    flat = base.flat.copy()
    for res, panel in results:
        idx = panel_indices(spec, panel)
        flat[idx] = res.params.flat[idx]
    length = max(len(r.trace) for r, _ in results)
    trace = np.zeros(length)
    for r, _ in results:
        trace += np.pad(r.trace, (0, length - len(r.trace)), mode="edge")
    flags = [f"panel {datasets[k].panel_id}: {f}" for k, (r, _) in enumerate(results) for f in r.flags]
    return FitResult(
        params=ParamVector(spec, flat),
        trace=trace.tolist(),
        iterations=max(r.iterations for r, _ in results),
        converged=all(r.converged for r, _ in results),
        surrogate_loglik=float(trace[-1]),
        flags=flags,
    )


def fit_model(
    spec: ModelSpec,
    datasets,
    options: FitOptions | None = None,
    surrogate_side: int | None = None,
    theta0: ParamVector | None = None,
    stationary_fit: FitResult | None = None,
) -> FitResult:
    """Fit on surrogate subsets (if requested) and report the exact likelihood.

    Nonstationary specs use the two-stage procedure seeded by ``stationary_fit``
    (fitted here when not given).
    """
    opt = options or FitOptions()
    spec = spec.with_panels(max(spec.n_panels, len(datasets)))
    datasets = [PanelDataset(d.mesh, d.y, k) if d.panel_id != k else d for k, d in enumerate(datasets)]
    train = [surrogate_subset(d, surrogate_side) for d in datasets] if surrogate_side else datasets
    if spec.stationary:
        start = theta0 if theta0 is not None else rescale_tau(spec, ParamVector.default(spec), train)
        result = natural_gradient_fit(spec, start, train, opt)
    else:
        if stationary_fit is None:
            stationary_fit = fit_model(spec.stationary_counterpart(), datasets, opt, surrogate_side)
        result = two_stage_fit(spec, stationary_fit.params, train, opt)
    result.exact_loglik = joint_log_likelihood(spec, result.params, datasets, opt.threads)
    return result


def aic(dim: int, loglik: float) -> float:
    """Akaike information criterion 2 dim - 2 loglik."""
    return 2 * dim - 2 * loglik


@dataclass
class SelectionTable:
    rows: list
    winner: int | None

    COLUMNS = ("isotropic", "stationary", "noise", "n_params", "surrogate_ll", "exact_ll", "aic", "converged", "status")

    def as_records(self):
        return [{k: r.get(k) for k in self.COLUMNS} for r in self.rows]


def model_selection(specs, datasets, options: FitOptions | None = None, surrogate_side: int | None = None) -> SelectionTable:
    """Fit each spec, tabulate likelihoods and AIC; the winner minimises AIC."""
    if not specs:
        raise ValueError("need at least one spec")
    opt = options or FitOptions()
    n_panels = len(datasets)
    stationary_cache: dict = {}
    rows = []
    for spec in specs:
        spec = spec.with_panels(n_panels)
        row = {
            "spec": spec,
            "isotropic": not spec.anisotropic,
            "stationary": spec.stationary,
            "noise": spec.noise,
            "n_params": param_count(spec),
            "surrogate_ll": None,
            "exact_ll": None,
            "aic": None,
            "converged": False,
            "status": "ok",
            "fit": None,
        }
        try:
            if spec.stationary:
                fit = stationary_cache.get(spec)
                if fit is None:
                    fit = fit_model(spec, datasets, opt, surrogate_side)
                    stationary_cache[spec] = fit
            else:
                stat_spec = spec.stationary_counterpart()
                if stat_spec not in stationary_cache:
                    stationary_cache[stat_spec] = fit_model(stat_spec, datasets, opt, surrogate_side)
                fit = fit_model(spec, datasets, opt, surrogate_side, stationary_fit=stationary_cache[stat_spec])
            row.update(
                surrogate_ll=fit.surrogate_loglik,
                exact_ll=fit.exact_loglik,
                aic=aic(row["n_params"], fit.exact_loglik),
                converged=fit.converged,
                fit=fit,
            )
        except Exception as exc:  # noqa: BLE001 - failures are tabulated, not fatal
            log.warning("fit of %s failed: %s", spec.label, exc)
            row["status"] = f"failed: {exc}"
        rows.append(row)
    ok = [k for k, r in enumerate(rows) if r["aic"] is not None and np.isfinite(r["aic"])]
    winner = min(ok, key=lambda k: rows[k]["aic"]) if ok else None
    return SelectionTable(rows=rows, winner=winner)
