"""Coupled-SPDE model variants and their sparse precision matrices.

The field is the stacked nodal weight vector ``w = (w1, w2)`` of the two
surfaces.  Every variant has the form ``Q = K^T P K`` where ``K`` is the
2x2 block Galerkin operator and ``P`` the (block diagonal) precision of the
projected driving noise.  Lumped mass replaces the consistent mass matrix
throughout so that ``P`` and ``Q`` stay sparse.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from itertools import product

import numpy as np
import scipy.sparse as sp

from .fem import FemMatrices
from .mesh import TriangleMesh

OPERATORS = ("iso_stat", "iso_nonstat", "aniso_stat", "aniso_nonstat")
NOISES = ("white", "smoother", "oscillatory")

PROFILE_FLOOR = 1e-6
PROFILE_PERIOD = 100.0  # mm
FOURIER_TERMS = [(i, j) for i in range(1, 5) for j in range(2)]


class InvalidParameterError(ValueError):
    """Parameter values outside the model's domain."""


@dataclass(frozen=True)
class ModelSpec:
    operator: str
    noise: str
    n_panels: int = 1

    def __post_init__(self):
        if self.operator not in OPERATORS:
            raise ValueError(f"unknown operator kind {self.operator!r}; choose from {OPERATORS}")
        if self.noise not in NOISES:
            raise ValueError(f"unknown noise kind {self.noise!r}; choose from {NOISES}")
        if int(self.n_panels) < 1:
            raise ValueError("n_panels must be >= 1")

    @property
    def anisotropic(self) -> bool:
        return self.operator.startswith("aniso")

    @property
    def stationary(self) -> bool:
        return self.operator.endswith("_stat")

    @property
    def label(self) -> str:
        return f"{self.operator}/{self.noise}"

    def stationary_counterpart(self) -> "ModelSpec":
        op = self.operator.replace("_nonstat", "_stat")
        return ModelSpec(op, self.noise, self.n_panels)

    def with_panels(self, n_panels: int) -> "ModelSpec":
        return ModelSpec(self.operator, self.noise, n_panels)


def all_specs(n_panels: int = 6) -> list[ModelSpec]:
    """The twelve variants, ordered iso-stat, iso-nonstat, aniso-stat, aniso-nonstat."""
    return [ModelSpec(op, nz, n_panels) for op, nz in product(OPERATORS, NOISES)]


def _gamma_names(kind: str, panel: int) -> list[str]:
    return [f"gamma_{kind}_{i}{j}[{panel}]" for i, j in FOURIER_TERMS]


def common_names(spec: ModelSpec) -> list[str]:
    if spec.stationary:
        names = ["tau_d", "tau_o", "eta_d", "eta_o"]
    else:
        names = ["c_tau_d", "c_tau_o", "c_eta_d", "c_eta_o"]
    if spec.anisotropic:
        names += ["h1", "h2"]
    if spec.noise in ("smoother", "oscillatory"):
        names.append("eta_noise")
    if spec.noise == "oscillatory":
        names.append("theta_osc")
    return names


def param_names(spec: ModelSpec) -> list[str]:
    names = common_names(spec)
    if not spec.stationary:
        for p in range(spec.n_panels):
            names += _gamma_names("tau", p) + _gamma_names("eta", p)
    return names


def param_count(spec: ModelSpec) -> int:
    base = {"iso_stat": 4, "aniso_stat": 6, "iso_nonstat": 4, "aniso_nonstat": 6}[spec.operator]
    if not spec.stationary:
        base += 16 * spec.n_panels
    return base + {"white": 0, "smoother": 1, "oscillatory": 2}[spec.noise]


def panel_indices(spec: ModelSpec, panel: int) -> np.ndarray:
    """Flat indices of the random-effect (Fourier) block of one panel."""
    if spec.stationary:
        return np.zeros(0, dtype=int)
    start = len(common_names(spec)) + 16 * panel
    return np.arange(start, start + 16)


def common_indices(spec: ModelSpec) -> np.ndarray:
    return np.arange(len(common_names(spec)))


def _transform(name: str) -> str:
    if name.startswith("gamma_"):
        return "identity"
    if name == "theta_osc":
        return "logit"
    return "log"


DEFAULT_NATURAL = {
    "tau_d": 1.0,
    "tau_o": 0.5,
    "eta_d": 1.0,
    "eta_o": 1.0,
    "h1": 1.0,
    "h2": 1.0,
    "eta_noise": 1.0,
    "theta_osc": 0.5,
}


@dataclass(frozen=True, eq=False)
class ParamVector:
    """Parameters stored as an unconstrained flat vector.

    Positive parameters live on the log scale, ``theta_osc`` on the logit
    scale and Fourier coefficients as is.  Natural values are derived.
    """

    spec: ModelSpec
    flat: np.ndarray
    names: tuple = field(init=False)

    def __post_init__(self):
        flat = np.array(self.flat, dtype=float).ravel()
        names = tuple(param_names(self.spec))
        if flat.shape != (len(names),):
            raise ValueError(f"{self.spec.label} expects {len(names)} parameters, got {flat.size}")
        flat.setflags(write=False)
        object.__setattr__(self, "flat", flat)
        object.__setattr__(self, "names", names)

    @classmethod
    def from_natural(cls, spec: ModelSpec, values: dict | None = None) -> "ParamVector":
        values = dict(values or {})
        names = param_names(spec)
        unknown = set(values) - set(names)
        if unknown:
            raise KeyError(f"unknown parameters for {spec.label}: {sorted(unknown)}")
        flat = np.empty(len(names))
        for k, name in enumerate(names):
            if name in values:
                v = float(values[name])
            elif name.startswith("c_"):
                v = DEFAULT_NATURAL[name[2:]]
            else:
                v = DEFAULT_NATURAL.get(name, 0.0)
            kind = _transform(name)
            if kind == "log":
                if not v > 0 or not np.isfinite(v):
                    raise InvalidParameterError(f"{name} must be positive and finite, got {v}")
                flat[k] = np.log(v)
            elif kind == "logit":
                if not 0.0 <= v < 1.0:
                    raise InvalidParameterError(f"{name} must lie in [0, 1), got {v}")
                with np.errstate(divide="ignore"):
                    flat[k] = np.log(v) - np.log1p(-v)
            else:
                flat[k] = v
        return cls(spec, flat)

    @classmethod
    def default(cls, spec: ModelSpec) -> "ParamVector":
        return cls.from_natural(spec)

    def natural_array(self) -> np.ndarray:
        out = np.empty_like(self.flat)
        for k, name in enumerate(self.names):
            kind = _transform(name)
            x = self.flat[k]
            if kind == "log":
                out[k] = np.exp(x)
            elif kind == "logit":
                out[k] = 1.0 / (1.0 + np.exp(-x))
            else:
                out[k] = x
        return out

    def natural(self) -> dict:
        return dict(zip(self.names, self.natural_array().tolist()))

    def __getitem__(self, name: str) -> float:
        return float(self.natural_array()[self.names.index(name)])

    def chain_factors(self) -> np.ndarray:
        """d(natural)/d(flat) for each entry."""
        nat = self.natural_array()
        out = np.ones_like(nat)
        for k, name in enumerate(self.names):
            kind = _transform(name)
            if kind == "log":
                out[k] = nat[k]
            elif kind == "logit":
                out[k] = nat[k] * (1.0 - nat[k])
        return out

    def gamma(self, kind: str, panel: int) -> np.ndarray:
        """Fourier coefficients of one profile as an 8-vector in (i, j) order."""
        idx = [self.names.index(n) for n in _gamma_names(kind, panel)]
        return self.flat[idx]

    def replace(self, **natural) -> "ParamVector":
        vals = self.natural()
        vals.update(natural)
        return ParamVector.from_natural(self.spec, vals)


def fourier_basis(x3) -> np.ndarray:
    """Sinusoids sin(2 pi i x3 / 100 + j pi / 4), columns in (i, j) order."""
    x3 = np.asarray(x3, dtype=float)
    return np.stack(
        [np.sin(2.0 * np.pi * i * x3 / PROFILE_PERIOD + j * np.pi / 4.0) for i, j in FOURIER_TERMS],
        axis=-1,
    )


def nonstationary_profile(coeffs, x3):
    """Low-frequency profile 1 + sum_ij gamma_ij sin(2 pi i x3/100 + j pi/4)."""
    coeffs = np.asarray(coeffs, dtype=float).ravel()
    if coeffs.shape != (8,):
        raise ValueError("expected 8 Fourier coefficients")
    return 1.0 + fourier_basis(x3) @ coeffs


@dataclass(frozen=True, eq=False)
class PrecisionModel:
    Q: sp.csc_matrix
    dQ: list
    wrt: np.ndarray
    K: sp.csc_matrix = None


class _Coefficients:
    """Vertexwise tau/eta coefficient vectors and the stiffness for one panel."""

    def __init__(self, spec, params, fem, mesh, panel):
        if params.spec.operator != spec.operator or params.spec.noise != spec.noise:
            raise ValueError("parameter vector belongs to a different model spec")
        with np.errstate(over="ignore"):
            nat = params.natural()
        n = fem.n
        self.nat = nat
        for name, v in nat.items():
            if not np.isfinite(v) or (_transform(name) == "log" and not v > 0):
                raise InvalidParameterError(f"{name} must be positive and finite, got {v}")
        if "theta_osc" in nat and not 0.0 <= nat["theta_osc"] < 1.0:
            raise InvalidParameterError(f"theta_osc must lie in [0, 1), got {nat['theta_osc']}")

        if spec.stationary:
            self.tau_prof = np.ones(n)
            self.eta_prof = np.ones(n)
            pre = ""
        else:
            if not 0 <= panel < spec.n_panels:
                raise ValueError(f"panel {panel} outside 0..{spec.n_panels - 1}")
            self.basis = fourier_basis(mesh.vertices[:, 2])
            self.tau_prof = 1.0 + self.basis @ params.gamma("tau", panel)
            self.eta_prof = 1.0 + self.basis @ params.gamma("eta", panel)
            lo = min(self.tau_prof.min(), self.eta_prof.min())
            if not lo > PROFILE_FLOOR:
                raise InvalidParameterError(
                    f"nonstationary profile drops to {lo:.3g} (must exceed {PROFILE_FLOOR})"
                )
            pre = "c_"
        self.c = {k: nat[pre + k] for k in ("tau_d", "tau_o", "eta_d", "eta_o")}
        self.tau = {r: self.c["tau_" + r] * self.tau_prof for r in "do"}
        self.eta = {r: self.c["eta_" + r] * self.eta_prof for r in "do"}

        if spec.anisotropic:
            self.h = (nat["h1"], nat["h2"])
            self.Gt = fem.aniso(*self.h)
            self.dGt = fem.aniso_derivatives(*self.h)
        else:
            self.h = None
            self.Gt = fem.G
            self.dGt = None
        self.lumped = fem.lumped
        self.M = {r: (self.Gt + sp.diags(self.eta[r] * fem.lumped)).tocsc() for r in "do"}
        self.K = {r: (sp.diags(self.tau[r]) @ self.M[r]).tocsc() for r in "do"}


def _coefficients(spec, params, fem, mesh, panel):
    return _Coefficients(spec, params, fem, mesh, panel)


def operator_block(spec, params, fem: FemMatrices, mesh: TriangleMesh, r: int, s: int, panel: int = 0):
    """Block K^(rs) = diag(tau) (diag(eta) C_lumped + G~) of the Galerkin operator."""
    if r not in (1, 2) or s not in (1, 2):
        raise ValueError("block indices must be 1 or 2")
    co = _coefficients(spec, params, fem, mesh, panel)
    return co.K["d" if r == s else "o"]


def _noise_block(spec, co):
    """Precision of one surface's projected noise, plus derivative pieces."""
    Cinv = sp.diags(1.0 / co.lumped)
    if spec.noise == "white":
        return Cinv.tocsc()
    eta = co.nat["eta_noise"]
    if spec.noise == "smoother":
        Kn = (co.Gt + sp.diags(eta * co.lumped)).tocsc()
        return (Kn @ Cinv @ Kn).tocsc()
    theta = co.nat["theta_osc"]
    Cl = sp.diags(co.lumped)
    return (eta * eta * Cl + 2.0 * eta * np.cos(np.pi * theta) * co.Gt + co.Gt @ Cinv @ co.Gt).tocsc()


def noise_precision(spec, params, fem: FemMatrices, mesh: TriangleMesh | None = None, panel: int = 0):
    """Block-diagonal precision of the projected noise, identical blocks per surface."""
    co = _coefficients(spec, params, fem, mesh, panel)
    P = _noise_block(spec, co)
    return sp.block_diag([P, P], format="csc")


def _sym(X):
    return (X + X.T).tocsc()


def _quad(Ka, P, Kb):
    """Block matrix Ka^T diag(P, P) Kb for exchangeable 2x2 block operators.

    Each operator is a pair (D, O) meaning [[D, O], [O, D]]; ``None`` stands
    for a zero block.  Built so that swapping the two surfaces is an exact
    symmetry of the result.
    """

    def prod(A, B):
        if A is None or B is None:
            return None
        return (A.T @ P @ B).tocsc()

    def add(X, Y):
        if X is None:
            return Y
        if Y is None:
            return X
        return X + Y

    (Da, Oa), (Db, Ob) = Ka, Kb
    A, B = prod(Da, Db), prod(Oa, Ob)
    X, Y = prod(Da, Ob), prod(Oa, Db)
    n = P.shape[0]
    z = sp.csc_matrix((n, n))
    q11, q22 = add(A, B), add(B, A)
    q12, q21 = add(X, Y), add(Y, X)
    return sp.bmat([[q11 if q11 is not None else z, q12 if q12 is not None else z],
                    [q21 if q21 is not None else z, q22 if q22 is not None else z]], format="csc")


def build_precision(spec, params, fem: FemMatrices, mesh: TriangleMesh, panel: int = 0, wrt=None):
    """Assemble Q = K^T P K and dQ/d(flat parameter) for the requested indices.

    ``wrt`` selects flat parameter indices (default: all).  Derivatives with
    respect to another panel's Fourier block are empty sparse matrices.
    """
    co = _coefficients(spec, params, fem, mesh, panel)
    P = _noise_block(spec, co)
    K = (co.K["d"], co.K["o"])
    Q = _quad(K, P, K)
    Q = (0.5 * (Q + Q.T)).tocsc()

    names = params.names
    wrt = np.arange(len(names)) if wrt is None else np.asarray(wrt, dtype=int)
    chain = params.chain_factors()
    n2 = 2 * fem.n
    Cinv = sp.diags(1.0 / co.lumped)
    own_tau = own_eta = ()
    if not spec.stationary:
        own_tau = _gamma_names("tau", panel)
        own_eta = _gamma_names("eta", panel)

    dQ = []
    for idx in wrt:
        name = names[idx]
        dK = None
        dP = None
        if name in ("tau_d", "c_tau_d"):
            dK = (co.K["d"], None)
        elif name in ("tau_o", "c_tau_o"):
            dK = (None, co.K["o"])
        elif name in ("eta_d", "c_eta_d"):
            dK = (sp.diags(co.tau["d"] * co.eta["d"] * co.lumped).tocsc(), None)
        elif name in ("eta_o", "c_eta_o"):
            dK = (None, sp.diags(co.tau["o"] * co.eta["o"] * co.lumped).tocsc())
        elif name in ("h1", "h2"):
            dG = co.dGt[0 if name == "h1" else 1] * chain[idx]
            dK = (sp.diags(co.tau["d"]) @ dG, sp.diags(co.tau["o"]) @ dG)
            dP = _noise_stiffness_derivative(spec, co, dG, Cinv)
        elif name == "eta_noise":
            dP = _noise_eta_derivative(spec, co, Cinv)
        elif name == "theta_osc":
            eta, theta = co.nat["eta_noise"], co.nat["theta_osc"]
            dP = (-2.0 * eta * np.pi * np.sin(np.pi * theta) * chain[idx]) * co.Gt
        elif name in own_tau:
            s = co.basis[:, own_tau.index(name)]
            dK = (
                (sp.diags(co.c["tau_d"] * s) @ co.M["d"]).tocsc(),
                (sp.diags(co.c["tau_o"] * s) @ co.M["o"]).tocsc(),
            )
        elif name in own_eta:
            s = co.basis[:, own_eta.index(name)]
            dK = (
                sp.diags(co.tau["d"] * co.c["eta_d"] * s * co.lumped).tocsc(),
                sp.diags(co.tau["o"] * co.c["eta_o"] * s * co.lumped).tocsc(),
            )
        else:
            dQ.append(sp.csc_matrix((n2, n2)))
            continue

        parts = []
        if dK is not None:
            parts.append(_sym(_quad(dK, P, K)))
        if dP is not None:
            parts.append(_quad(K, dP.tocsc(), K))
        D = parts[0] if len(parts) == 1 else parts[0] + parts[1]
        dQ.append((0.5 * (D + D.T)).tocsc())

    Kfull = sp.bmat([[co.K["d"], co.K["o"]], [co.K["o"], co.K["d"]]], format="csc")
    return PrecisionModel(Q=Q, dQ=dQ, wrt=wrt, K=Kfull)


def _noise_stiffness_derivative(spec, co, dG, Cinv):
    if spec.noise == "white":
        return None
    if spec.noise == "smoother":
        Kn = co.Gt + sp.diags(co.nat["eta_noise"] * co.lumped)
        return _sym(dG @ Cinv @ Kn)
    eta, theta = co.nat["eta_noise"], co.nat["theta_osc"]
    return 2.0 * eta * np.cos(np.pi * theta) * dG + _sym(dG @ Cinv @ co.Gt)


def _noise_eta_derivative(spec, co, Cinv):
    # derivative with respect to log(eta_noise)
    eta = co.nat["eta_noise"]
    if spec.noise == "smoother":
        Kn = (co.Gt + sp.diags(eta * co.lumped)).tocsc()
        return 2.0 * eta * Kn
    theta = co.nat["theta_osc"]
    return 2.0 * eta * eta * sp.diags(co.lumped) + 2.0 * eta * np.cos(np.pi * theta) * co.Gt
