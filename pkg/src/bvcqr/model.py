"""Joint log-density of the hierarchical varying-coefficient model.

Generative structure (constrained view)::

    Y | .        ~ N(X beta + W h + U b, sigma_sq I)
    h_l | .      ~ N(q theta_l, phi_l_sq I)                 l = 1, 2
    phi_l_sq     ~ InvGamma(alpha0, gamma0)
    b_i | .      ~ N_2(0, sigma_sq D)
    D^-1         ~ Wishart(nu0, C0)
    sigma_sq     ~ InvGamma(alpha, gamma)
    beta         ~ flat
    theta_lm | . ~ N(0, lambda_lm^2 tau_l^tau_power)
    lambda_lm    ~ half-t(df_lambda, 0, 1)
    tau_l        ~ half-t(df_tau, 0, a0 * phi_l_sq)

Without the horseshoe, ``theta_lm ~ N(0, theta_prior_sd^2)`` and the
lambda/tau blocks are dropped from the state.

The sampler works on an unconstrained vector. Positive scalars enter as
logs, ``D`` through its log-Cholesky factor (of ``sigma_sq * D`` in the
non-centered mode, which decouples sigma_sq from the random effects). With the default non-centered
parameterization the theta, h and b blocks hold standardized deviates::

    theta = z * xi**w,   log xi = log lambda + (tau_power/2) log tau
    h_l   = q theta_l + phi_l * eta_l
    b_i   = chol(sigma_sq * D) @ zeta_i

so the lambda slots carry ``log xi`` rather than ``log lambda``. The weight
``w = ModelOptions.theta_weight`` (default 0.5) sits between the centered
(w = 0) and fully non-centered (w = 1) forms: under the half-Cauchy tail a
null coefficient's scale ranges over several decades, and the half-way
weight keeps the posterior spread of z within a small factor at both ends of
that range. Slots listed in ``ModelOptions.centered_theta`` use w = 0. The beta
block is sheared as ``T (beta + Gamma h)``, where ``Gamma`` projects the
columns of W onto X and ``T`` is the unit-triangular factor of X. This
removes the ridges between the fixed intercept/age effects and the mixture
effects, both through theta and through the common shift of the eta deviates.
Both shears have unit Jacobian. With ``noncentered=False`` the blocks hold beta, theta, h and b
directly.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import gammaln, multigammaln

from .design import QuantizedDesign
from .errors import ConfigError, NumericalError

LOG_2PI = math.log(2.0 * math.pi)
LOG_4 = math.log(4.0)

TERM_NAMES = (
    "likelihood",
    "h_prior",
    "phi_prior",
    "sigma_prior",
    "b_prior",
    "D_prior",
    "beta_prior",
    "theta_prior",
    "lambda_prior",
    "tau_prior",
)


@dataclass(frozen=True)
class Hyperparameters:
    alpha0: float = 1.0
    gamma0: float = 1.0
    alpha: float = 1.0
    gamma: float = 1.0
    nu0: float = 3.0
    C0: np.ndarray = field(default_factory=lambda: np.eye(2))
    df_lambda: float = 1.0
    df_tau: float = 1.0
    a0: float = 1.0

    def __post_init__(self):
        C0 = np.asarray(self.C0, dtype=float)
        object.__setattr__(self, "C0", C0)
        for name in ("alpha0", "gamma0", "alpha", "gamma", "df_lambda", "df_tau", "a0"):
            v = getattr(self, name)
            if not (np.isfinite(v) and v > 0):
                raise ConfigError(f"hyperparameter {name} must be a positive finite number, got {v}")
        if not self.nu0 >= 2:
            raise ConfigError(f"nu0 must be >= 2, got {self.nu0}")
        if C0.shape != (2, 2) or not np.allclose(C0, C0.T):
            raise ConfigError("C0 must be a symmetric 2x2 matrix")
        if np.any(np.linalg.eigvalsh(C0) <= 0):
            raise ConfigError("C0 must be positive definite")

    @classmethod
    def from_dict(cls, d: dict) -> "Hyperparameters":
        unknown = set(d) - {f.name for f in dataclasses.fields(cls)}
        if unknown:
            raise ConfigError(f"unknown hyperparameter(s): {', '.join(sorted(unknown))}")
        return cls(**d)

    def to_dict(self) -> dict:
        out = dataclasses.asdict(self)
        out["C0"] = np.asarray(self.C0).tolist()
        return out


@dataclass(frozen=True)
class ModelOptions:
    horseshoe: bool = True
    noncentered: bool = True
    tau_power: float = 2.0
    theta_prior_sd: float = 10.0
    centered_theta: tuple[int, ...] = ()
    theta_weight: float = 0.5

    def __post_init__(self):
        object.__setattr__(self, "centered_theta", tuple(sorted(int(j) for j in self.centered_theta)))
        if any(j < 0 for j in self.centered_theta):
            raise ConfigError("centered_theta indices must be non-negative")
        if not 0.0 <= self.theta_weight <= 1.0:
            raise ConfigError("theta_weight must lie in [0, 1]")
        if self.tau_power not in (1.0, 2.0):
            raise ConfigError(f"tau_power must be 1 or 2, got {self.tau_power}")
        if not self.theta_prior_sd > 0:
            raise ConfigError("theta_prior_sd must be positive")

    @classmethod
    def from_dict(cls, d: dict) -> "ModelOptions":
        unknown = set(d) - {f.name for f in dataclasses.fields(cls)}
        if unknown:
            raise ConfigError(f"unknown model option(s): {', '.join(sorted(unknown))}")
        return cls(**d)

    def to_dict(self) -> dict:
        out = dataclasses.asdict(self)
        out["centered_theta"] = list(self.centered_theta)
        return out


@dataclass
class ParameterState:
    """Constrained parameter values. ``b`` is ordered (b1_1, b2_1, b1_2, ...)."""

    beta: np.ndarray
    theta1: np.ndarray
    theta2: np.ndarray
    phi1_sq: float
    phi2_sq: float
    sigma_sq: float
    D: np.ndarray
    h: np.ndarray
    b: np.ndarray
    lambda1: np.ndarray | None = None
    lambda2: np.ndarray | None = None
    tau1: float | None = None
    tau2: float | None = None

    def copy(self) -> "ParameterState":
        return ParameterState(
            **{
                k: (np.array(v, dtype=float) if v is not None and np.ndim(v) > 0 else v)
                for k, v in dataclasses.asdict(self).items()
            }
        )


class Layout:
    """Packing order shared by the unconstrained and constrained flat vectors.

    beta | theta1, theta2 | phi1_sq, phi2_sq | lambda1, lambda2 | tau1, tau2 |
    sigma_sq | D (3) | h1, h2 | b (per subject: intercept, slope)

    The lambda and tau blocks are empty when the horseshoe is disabled.
    """

    def __init__(self, n_fixed: int, n_exposures: int, n_subjects: int, horseshoe: bool = True):
        k, M, n = n_fixed, n_exposures, n_subjects
        sizes = [
            ("beta", k),
            ("theta", 2 * M),
            ("phi", 2),
            ("lambda", 2 * M if horseshoe else 0),
            ("tau", 2 if horseshoe else 0),
            ("sigma", 1),
            ("chol", 3),
            ("h", 2 * n),
            ("b", 2 * n),
        ]
        self.slices: dict[str, slice] = {}
        start = 0
        for name, size in sizes:
            self.slices[name] = slice(start, start + size)
            start += size
        self.dim = start
        self.n_fixed, self.n_exposures, self.n_subjects = k, M, n
        self.horseshoe = horseshoe

    def __getitem__(self, name: str) -> slice:
        return self.slices[name]

    def names(self, x_names=None, exposure_names=None, subject_ids=None) -> list[str]:
        k, M, n = self.n_fixed, self.n_exposures, self.n_subjects
        xn = list(x_names) if x_names else [str(j) for j in range(k)]
        zn = list(exposure_names) if exposure_names else [f"z_{m + 1}" for m in range(M)]
        sn = list(subject_ids) if subject_ids else [str(i + 1) for i in range(n)]
        out = [f"beta[{x}]" for x in xn]
        out += [f"theta1[{z}]" for z in zn] + [f"theta2[{z}]" for z in zn]
        out += ["phi1_sq", "phi2_sq"]
        if self.horseshoe:
            out += [f"lambda1[{z}]" for z in zn] + [f"lambda2[{z}]" for z in zn]
            out += ["tau1", "tau2"]
        out += ["sigma_sq", "D[1,1]", "D[2,1]", "D[2,2]"]
        out += [f"h1[{s}]" for s in sn] + [f"h2[{s}]" for s in sn]
        for s in sn:
            out += [f"b1[{s}]", f"b2[{s}]"]
        return out


def _half_t_logpdf(x, df, scale):
    return (
        np.log(2.0)
        + gammaln(0.5 * (df + 1))
        - gammaln(0.5 * df)
        - 0.5 * np.log(df * np.pi)
        - np.log(scale)
        - 0.5 * (df + 1) * np.log1p((x / scale) ** 2 / df)
    )


def _inv_gamma_logpdf(x, shape, rate):
    return shape * np.log(rate) - gammaln(shape) - (shape + 1) * np.log(x) - rate / x


class BVCQRModel:
    """Log-density and gradient over the unconstrained parameter vector."""

    def __init__(
        self,
        design: QuantizedDesign,
        hyper: Hyperparameters | None = None,
        options: ModelOptions | None = None,
        backend: str = "auto",
    ):
        if backend not in ("auto", "numba", "numpy"):
            raise ConfigError(f"unknown backend {backend!r}; expected auto, numba or numpy")
        self.design = design
        self.hyper = hyper or Hyperparameters()
        self.options = options or ModelOptions()
        self.layout = Layout(design.n_fixed, design.n_exposures, design.n_subjects, self.options.horseshoe)
        self.dim = self.layout.dim
        self.names = self.layout.names(design.x_names, design.exposure_names, design.subject_ids)
        self._psi = np.linalg.inv(self.hyper.C0)
        nu0 = self.hyper.nu0
        self._wishart_const = (
            0.5 * nu0 * np.linalg.slogdet(self._psi)[1] - nu0 * np.log(2.0) - multigammaln(0.5 * nu0, 2)
        )
        self._half_t_const_lam = _half_t_logpdf(0.0, self.hyper.df_lambda, 1.0)
        # theta slot j holds theta_j / xi_j**w_j: w = 1 is fully non-centered, w = 0
        # holds theta itself (horseshoe, non-centered mode only)
        self._nc = np.full(2 * design.n_exposures, self.options.theta_weight if self.options.horseshoe else 1.0)
        if self.options.centered_theta:
            if max(self.options.centered_theta) >= 2 * design.n_exposures:
                raise ConfigError("centered_theta index out of range")
            if self.options.horseshoe and self.options.noncentered:
                self._nc[list(self.options.centered_theta)] = 0.0
        if self.options.noncentered:
            self._init_shear()
        self._kernel = None
        if backend != "numpy":
            try:
                from . import _kernel
            except ImportError:
                if backend == "numba":
                    raise ConfigError("the numba backend needs numba installed") from None
            else:
                self._init_kernel(_kernel)
        self.backend = "numpy" if self._kernel is None else "numba"

    def _init_kernel(self, mod):
        d, hp, o, L = self.design, self.hyper, self.options, self.layout
        c = np.zeros(mod.N_CONSTS)
        c[mod.C_ALPHA0], c[mod.C_GAMMA0] = hp.alpha0, hp.gamma0
        c[mod.C_ALPHA], c[mod.C_GAMMA], c[mod.C_NU0] = hp.alpha, hp.gamma, hp.nu0
        c[mod.C_DF_LAM], c[mod.C_DF_TAU], c[mod.C_A0] = hp.df_lambda, hp.df_tau, hp.a0
        c[mod.C_WISHART] = self._wishart_const
        c[mod.C_HT_LAM] = self._half_t_const_lam
        c[mod.C_HT_TAU] = _half_t_logpdf(0.0, hp.df_tau, 1.0)
        c[mod.C_IG0] = hp.alpha0 * np.log(hp.gamma0) - gammaln(hp.alpha0)
        c[mod.C_IG] = hp.alpha * np.log(hp.gamma) - gammaln(hp.alpha)
        c[mod.C_THETA_SD], c[mod.C_TAU_POWER] = o.theta_prior_sd, o.tau_power
        k = d.n_fixed
        blocks = ("beta", "theta", "phi", "lambda", "tau", "sigma", "chol", "h", "b")
        off = np.array([L[name].start for name in blocks], dtype=np.int64)
        f64 = lambda a: np.ascontiguousarray(a, dtype=np.float64)  # noqa: E731
        T_inv = self._T_inv if o.noncentered else np.eye(k)
        gam = self._gamma if o.noncentered else np.zeros((k, 2 * d.n_subjects))
        self._kargs = (
            f64(d.Y), f64(d.X), f64(d.q), np.ascontiguousarray(d.subject, dtype=np.int64),
            f64(d.ages), f64(T_inv), f64(gam), f64(self._psi), c, off,
            self._nc.copy(), d.n_exposures, d.n_subjects, bool(o.horseshoe), bool(o.noncentered),
        )
        self._kernel = mod.logp_grad

    def _init_shear(self):
        # beta_u = T (beta + Gamma h): Gamma regresses the columns of W on X,
        # T is the unit upper-triangular Gram-Schmidt factor of X. Both shears
        # have unit Jacobian.
        d = self.design
        k = d.n_fixed
        if d.n_obs < k or np.linalg.matrix_rank(d.X) < k:
            # no well-defined factor; fall back to the identity shear
            self._gamma = np.zeros((k, 2 * d.n_subjects))
            self._T = self._T_inv = np.eye(k)
            return
        self._gamma = np.asarray((d.W.T @ np.linalg.pinv(d.X).T).T)
        R = np.linalg.qr(d.X, mode="r")
        T = R / np.diag(R)[:, None]
        self._T = T
        self._T_inv = np.linalg.inv(T)

    # ------------------------------------------------------------------ transforms

    def _forward(self, u: np.ndarray) -> dict:
        L, d, o = self.layout, self.design, self.options
        M, n = d.n_exposures, d.n_subjects
        f = {}
        f["log_s"] = u[L["phi"]]
        f["s"] = np.exp(f["log_s"])
        f["log_v"] = float(u[L["sigma"]][0])
        f["v"] = math.exp(f["log_v"])
        a, c, dd = (float(x) for x in u[L["chol"]])
        f["chol_u"] = (a, c, dd)
        # non-centered: the slots hold the log-Cholesky factor of sigma_sq * D
        Lraw = np.array([[math.exp(a), 0.0], [c, math.exp(dd)]])
        f["Lraw"] = Lraw
        if o.noncentered:
            Lc = Lraw / math.sqrt(f["v"])
            f["logdetD"] = 2.0 * (a + dd) - 2.0 * f["log_v"]
        else:
            Lc = Lraw
            f["logdetD"] = 2.0 * (a + dd)
        f["Lc"] = Lc
        f["D"] = Lc @ Lc.T
        raw_theta = u[L["theta"]]
        f["raw_theta"] = raw_theta
        if o.horseshoe:
            f["log_tau"] = u[L["tau"]]
            f["tau"] = np.exp(f["log_tau"])
            if o.noncentered:
                # lambda slots hold log(lambda * tau^(tau_power/2)), the theta scale
                f["log_xi"] = u[L["lambda"]]
                f["log_lam"] = f["log_xi"] - 0.5 * o.tau_power * np.repeat(f["log_tau"], M)
            else:
                f["log_lam"] = u[L["lambda"]]
            f["lam"] = np.exp(f["log_lam"])
        if o.noncentered:
            if o.horseshoe:
                f["xi"] = np.exp(f["log_xi"])
                theta = raw_theta * np.exp(self._nc * f["log_xi"])
            else:
                theta = raw_theta * o.theta_prior_sd
        else:
            theta = raw_theta
            f["beta"] = u[L["beta"]]
        f["theta"] = theta
        f["mean_h"] = np.concatenate([d.q @ theta[:M], d.q @ theta[M:]])
        raw_h = u[L["h"]]
        f["raw_h"] = raw_h
        if o.noncentered:
            f["phi"] = np.sqrt(f["s"])
            h = f["mean_h"] + np.repeat(f["phi"], n) * raw_h
        else:
            h = raw_h
        f["h"] = h
        if o.noncentered:
            f["beta"] = self._T_inv @ u[L["beta"]] - self._gamma @ h
        raw_b = u[L["b"]].reshape(n, 2)
        f["raw_b"] = raw_b
        f["b"] = raw_b @ Lraw.T if o.noncentered else raw_b
        return f

    def constrain(self, u: np.ndarray) -> ParameterState:
        u = np.asarray(u, dtype=float)
        if not np.all(np.isfinite(u)):
            raise NumericalError("cannot constrain a non-finite vector")
        f = self._forward(u)
        M = self.design.n_exposures
        st = ParameterState(
            beta=f["beta"].copy(),
            theta1=f["theta"][:M].copy(),
            theta2=f["theta"][M:].copy(),
            phi1_sq=float(f["s"][0]),
            phi2_sq=float(f["s"][1]),
            sigma_sq=float(f["v"]),
            D=f["D"].copy(),
            h=f["h"].copy(),
            b=f["b"].ravel().copy(),
        )
        if self.options.horseshoe:
            st.lambda1, st.lambda2 = f["lam"][:M].copy(), f["lam"][M:].copy()
            st.tau1, st.tau2 = float(f["tau"][0]), float(f["tau"][1])
        return st

    def unconstrain(self, state: ParameterState) -> np.ndarray:
        L, d, o = self.layout, self.design, self.options
        M, n = d.n_exposures, d.n_subjects
        u = np.empty(self.dim)
        s = np.array([state.phi1_sq, state.phi2_sq], dtype=float)
        u[L["phi"]] = np.log(s)
        u[L["sigma"]] = np.log(state.sigma_sq)
        Lc = np.linalg.cholesky(np.asarray(state.D, dtype=float))
        if o.noncentered:
            Lc = Lc * np.sqrt(state.sigma_sq)
        u[L["chol"]] = [np.log(Lc[0, 0]), Lc[1, 0], np.log(Lc[1, 1])]
        theta = np.concatenate([state.theta1, state.theta2])
        beta = np.asarray(state.beta, dtype=float)
        if o.horseshoe:
            lam = np.concatenate([state.lambda1, state.lambda2])
            tau = np.array([state.tau1, state.tau2], dtype=float)
            u[L["tau"]] = np.log(tau)
            log_lam = np.log(lam)
            if o.noncentered:
                u[L["lambda"]] = log_lam + 0.5 * o.tau_power * np.repeat(np.log(tau), M)
            else:
                u[L["lambda"]] = log_lam
        h = np.asarray(state.h, dtype=float)
        b = np.asarray(state.b, dtype=float).reshape(n, 2)
        if o.noncentered:
            if o.horseshoe:
                scale = lam * np.repeat(tau ** (0.5 * o.tau_power), M)
                scale = scale**self._nc
            else:
                scale = np.full(2 * M, o.theta_prior_sd)
            u[L["theta"]] = theta / scale
            u[L["beta"]] = self._T @ (beta + self._gamma @ h)
            mean_h = np.concatenate([d.q @ theta[:M], d.q @ theta[M:]])
            u[L["h"]] = (h - mean_h) / np.repeat(np.sqrt(s), n)
            zeta = np.linalg.solve(Lc, b.T).T
            u[L["b"]] = zeta.ravel()
        else:
            u[L["beta"]] = beta
            u[L["theta"]] = theta
            u[L["h"]] = h
            u[L["b"]] = b.ravel()
        return u

    def constrained_vector(self, u: np.ndarray) -> np.ndarray:
        """Flat constrained values in layout order (D stored as D11, D21, D22)."""
        f = self._forward(np.asarray(u, dtype=float))
        L = self.layout
        out = np.empty(self.dim)
        out[L["beta"]] = f["beta"]
        out[L["theta"]] = f["theta"]
        out[L["phi"]] = f["s"]
        if self.options.horseshoe:
            out[L["lambda"]] = f["lam"]
            out[L["tau"]] = f["tau"]
        out[L["sigma"]] = f["v"]
        D = f["D"]
        out[L["chol"]] = [D[0, 0], D[1, 0], D[1, 1]]
        out[L["h"]] = f["h"]
        out[L["b"]] = f["b"].ravel()
        return out

    # ------------------------------------------------------------------ density

    def _log_jacobian(self, f: dict) -> float:
        o, d = self.options, self.design
        M, n = d.n_exposures, d.n_subjects
        a, _, dd = f["chol_u"]
        jac = float(np.sum(f["log_s"])) + f["log_v"] + LOG_4 + 3.0 * a + 2.0 * dd
        if o.noncentered:
            # D = C / sigma_sq for the three free entries of C
            jac -= 3.0 * f["log_v"]
        if o.horseshoe:
            jac += float(np.sum(f["log_lam"]) + np.sum(f["log_tau"]))
        if o.noncentered:
            if o.horseshoe:
                jac += float(self._nc @ f["log_xi"])
            else:
                jac += 2 * M * math.log(o.theta_prior_sd)
            jac += 0.5 * n * float(np.sum(f["log_s"]))
            jac += n * (a + dd)
        return jac

    def _evaluate(self, u: np.ndarray, grad: bool = True):
        d, hp, o, L = self.design, self.hyper, self.options, self.layout
        M, n, N = d.n_exposures, d.n_subjects, d.n_obs
        f = self._forward(u)
        beta, theta, h, b = f["beta"], f["theta"], f["h"], f["b"]
        s, v, D, Lc = f["s"], f["v"], f["D"], f["Lc"]
        log_v = f["log_v"]
        terms = {}

        R = d.Y - d.X @ beta - d.W_dot(h) - d.U_dot(b)
        RR = float(R @ R)
        terms["likelihood"] = -0.5 * N * (LOG_2PI + log_v) - 0.5 * RR / v

        dh = h - f["mean_h"]
        ss_h = np.array([dh[:n] @ dh[:n], dh[n:] @ dh[n:]])
        terms["h_prior"] = float(np.sum(-0.5 * n * (LOG_2PI + f["log_s"]) - 0.5 * ss_h / s))
        terms["phi_prior"] = float(np.sum(_inv_gamma_logpdf(s, hp.alpha0, hp.gamma0)))
        terms["sigma_prior"] = _inv_gamma_logpdf(v, hp.alpha, hp.gamma)

        logdetD = f["logdetD"]
        detD = math.exp(logdetD)
        Dinv = np.array([[D[1, 1], -D[0, 1]], [-D[0, 1], D[0, 0]]]) / detD
        bD = b @ Dinv
        S_b = float(np.sum(bD * b))
        terms["b_prior"] = -n * LOG_2PI - n * log_v - 0.5 * n * logdetD - 0.5 * S_b / v
        terms["D_prior"] = (
            self._wishart_const - 0.5 * (hp.nu0 + 3.0) * logdetD - 0.5 * float(np.sum(self._psi * Dinv))
        )
        terms["beta_prior"] = 0.0

        if o.horseshoe:
            lam, tau, tp = f["lam"], f["tau"], o.tau_power
            log_var = 2.0 * f["log_lam"] + tp * np.repeat(f["log_tau"], M)
            var_th = np.exp(log_var)
            terms["theta_prior"] = float(np.sum(-0.5 * LOG_2PI - 0.5 * log_var - 0.5 * theta**2 / var_th))
            nu = hp.df_lambda
            terms["lambda_prior"] = float(
                2 * M * self._half_t_const_lam - 0.5 * (nu + 1) * np.sum(np.log1p(lam**2 / nu))
            )
            tau_scale = hp.a0 * s
            terms["tau_prior"] = float(np.sum(_half_t_logpdf(tau, hp.df_tau, tau_scale)))
        else:
            sd = o.theta_prior_sd
            terms["theta_prior"] = float(np.sum(-0.5 * LOG_2PI - math.log(sd) - 0.5 * theta**2 / sd**2))
            terms["lambda_prior"] = 0.0
            terms["tau_prior"] = 0.0
        terms["jacobian"] = self._log_jacobian(f)

        if not grad:
            return terms, None

        # ---- partials w.r.t. constrained quantities
        g_beta = d.X.T @ R / v
        g_h = d.W_T_dot(R) / v
        g_b = d.U_T_dot(R).reshape(n, 2) / v
        g_v = -0.5 * N / v + 0.5 * RR / v**2

        g_h -= np.repeat(1.0 / s, n) * dh
        g_theta = np.concatenate([d.q.T @ dh[:n] / s[0], d.q.T @ dh[n:] / s[1]])
        g_s = -0.5 * n / s + 0.5 * ss_h / s**2
        g_s += -(hp.alpha0 + 1.0) / s + hp.gamma0 / s**2
        g_v += -(hp.alpha + 1.0) / v + hp.gamma / v**2

        g_b -= bD / v
        g_v += -n / v + 0.5 * S_b / v**2
        B = b.T @ b
        g_D = (-0.5 * (n + hp.nu0 + 3.0)) * Dinv + Dinv @ (0.5 / v * B + 0.5 * self._psi) @ Dinv

        if o.horseshoe:
            g_theta -= theta / var_th
            t2 = theta**2 / var_th
            g_loglam = -1.0 + t2
            g_logtau = 0.5 * tp * np.add.reduceat(t2 - 1.0, [0, M])
            nu = hp.df_lambda
            g_loglam -= (nu + 1.0) * lam**2 / (nu + lam**2)
            nu = hp.df_tau
            tau_den = nu * tau_scale**2 + tau**2
            g_logtau -= (nu + 1.0) * tau**2 / tau_den
            g_s += hp.a0 * (-1.0 / tau_scale + (nu + 1.0) * tau**2 / (tau_scale * tau_den))
        else:
            g_theta -= theta / o.theta_prior_sd**2

        # ---- back through the transforms (reverse of _forward)
        g = np.empty(self.dim)
        g_L = 2.0 * g_D @ Lc
        Lraw = f["Lraw"]
        if o.noncentered:
            # Lc = Lraw / sqrt(v)
            g_v -= 0.5 * float(np.sum(g_L * Lc)) / v
            g_L = g_L / math.sqrt(v)
            g[L["b"]] = (g_b @ Lraw).ravel()
            g_L += g_b.T @ f["raw_b"]

            g[L["beta"]] = self._T_inv.T @ g_beta
            g_h -= self._gamma.T @ g_beta
            phi = f["phi"]
            g[L["h"]] = np.repeat(phi, n) * g_h
            g_theta += np.concatenate([d.q.T @ g_h[:n], d.q.T @ g_h[n:]])
            rh = f["raw_h"] * g_h
            g_s += np.array([rh[:n].sum(), rh[n:].sum()]) / (2.0 * phi)

            if o.horseshoe:
                g[L["theta"]] = g_theta * np.exp(self._nc * f["log_xi"])
                g_logxi = g_theta * theta * self._nc
            else:
                g[L["theta"]] = g_theta * o.theta_prior_sd
        else:
            g[L["b"]] = g_b.ravel()
            g[L["h"]] = g_h
            g[L["beta"]] = g_beta
            g[L["theta"]] = g_theta

        g[L["phi"]] = g_s * s
        g[L["sigma"]] = g_v * v
        if o.horseshoe:
            if o.noncentered:
                g[L["lambda"]] = g_loglam + g_logxi
                g_logtau -= 0.5 * tp * np.add.reduceat(g_loglam, [0, M])
            else:
                g[L["lambda"]] = g_loglam
            g[L["tau"]] = g_logtau
        g[L["chol"]] = [g_L[0, 0] * Lraw[0, 0], g_L[1, 0], g_L[1, 1] * Lraw[1, 1]]
        self._add_jacobian_grad(g)
        return terms, g

    def _add_jacobian_grad(self, g: np.ndarray) -> None:
        L, o = self.layout, self.options
        M, n = self.design.n_exposures, self.design.n_subjects
        nc = o.noncentered
        g[L["phi"]] += 1.0 + (0.5 * n if nc else 0.0)
        g[L["sigma"]] += -2.0 if nc else 1.0
        g[L["chol"].start] += 3.0 + (n if nc else 0.0)
        g[L["chol"].start + 2] += 2.0 + (n if nc else 0.0)
        if o.horseshoe:
            if nc:
                # log J = sum(log xi over non-centered slots) + sum(log lambda) + sum(log tau)
                g[L["lambda"]] += 1.0 + self._nc
                g[L["tau"]] += 1.0 - 0.5 * o.tau_power * M
            else:
                g[L["lambda"]] += 1.0
                g[L["tau"]] += 1.0

    def log_density(self, u: np.ndarray) -> float:
        with np.errstate(all="ignore"):
            terms, _ = self._evaluate(np.asarray(u, dtype=float), grad=False)
        return float(sum(terms.values()))

    def logp_grad(self, u: np.ndarray) -> tuple[float, np.ndarray]:
        """Unconstrained log-density and gradient; -inf on numerical failure."""
        if self._kernel is not None:
            g = np.empty(self.dim)
            try:
                lp = self._kernel(np.asarray(u, dtype=np.float64), g, *self._kargs)
            except (OverflowError, ValueError, ZeroDivisionError):
                return -np.inf, np.zeros(self.dim)
            if not math.isfinite(lp) or not np.all(np.isfinite(g)):
                return -np.inf, g
            return lp, g
        with np.errstate(all="ignore"):
            try:
                terms, g = self._evaluate(u, grad=True)
            except (OverflowError, ValueError, ZeroDivisionError):
                return -np.inf, np.zeros(self.dim)
        lp = sum(terms.values())
        if not math.isfinite(lp) or not np.all(np.isfinite(g)):
            return -np.inf, g
        return float(lp), g

    def grad(self, u: np.ndarray) -> np.ndarray:
        u = np.asarray(u, dtype=float)
        if not np.all(np.isfinite(u)):
            raise NumericalError("gradient requested at a non-finite point")
        with np.errstate(all="ignore"):
            _, g = self._evaluate(u, grad=True)
        bad = np.flatnonzero(~np.isfinite(g))
        if bad.size:
            raise NumericalError(f"non-finite gradient at coordinate {bad[0]} ({self.names[bad[0]]})")
        return g

    def terms(self, state: ParameterState) -> dict[str, float]:
        """Named log-density terms at ``state`` (including ``jacobian``)."""
        u = self.unconstrain(state)
        with np.errstate(all="ignore"):
            terms, _ = self._evaluate(u, grad=False)
        return {k: float(v) for k, v in terms.items()}

    def log_joint(self, state: ParameterState, jacobian: bool = True) -> float:
        terms = self.terms(state)
        for name, val in terms.items():
            if not np.isfinite(val):
                raise NumericalError(f"non-finite log-density term: {name} = {val}")
        if not jacobian:
            terms.pop("jacobian")
        return float(sum(terms.values()))

    def initial_point(self, rng: np.random.Generator, radius: float = 2.0) -> np.ndarray:
        return rng.uniform(-radius, radius, size=self.dim)


class FixedSubsetTarget:
    """Restrict a model's unconstrained density to ``free`` coordinates.

    All other coordinates stay at their values in ``base``.
    """

    def __init__(self, model: BVCQRModel, base: np.ndarray, free: np.ndarray):
        self.model = model
        self.base = np.array(base, dtype=float)
        self.free = np.asarray(free, dtype=np.int64)
        self.dim = len(self.free)
        self.names = [model.names[i] for i in self.free]

    def full(self, x: np.ndarray) -> np.ndarray:
        u = self.base.copy()
        u[self.free] = x
        return u

    def logp_grad(self, x: np.ndarray) -> tuple[float, np.ndarray]:
        lp, g = self.model.logp_grad(self.full(x))
        return lp, g[self.free]

    def constrained_vector(self, x: np.ndarray) -> np.ndarray:
        return self.model.constrained_vector(self.full(x))[self.free]

    def initial_point(self, rng: np.random.Generator, radius: float = 2.0) -> np.ndarray:
        return self.base[self.free] + rng.uniform(-radius, radius, size=self.dim)


def log_joint(
    state: ParameterState,
    design: QuantizedDesign,
    hyper: Hyperparameters | None = None,
    options: ModelOptions | None = None,
) -> float:
    return BVCQRModel(design, hyper, options).log_joint(state)


def grad_log_joint(
    u: np.ndarray,
    design: QuantizedDesign,
    hyper: Hyperparameters | None = None,
    options: ModelOptions | None = None,
) -> np.ndarray:
    return BVCQRModel(design, hyper, options).grad(u)


def unconstrain(state, design, hyper=None, options=None) -> np.ndarray:
    return BVCQRModel(design, hyper, options).unconstrain(state)


def constrain(u, design, hyper=None, options=None) -> ParameterState:
    return BVCQRModel(design, hyper, options).constrain(u)
