"""No-U-Turn Hamiltonian Monte Carlo with windowed warmup adaptation.

The transition is the multinomial variant: trajectories double in a random
direction, states are drawn from each new subtree in proportion to their
Boltzmann weight, and doubling stops on a generalized U-turn (checked on the
merged tree and across the seams between subtrees) or on divergence.

A target is any object exposing ``dim`` and ``logp_grad(x) -> (float, grad)``.
``logp`` may be ``-inf`` outside the support. Optional ``constrained_vector``
and ``names`` are used when recording draws.
"""

from __future__ import annotations

import dataclasses
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, NumericalError

log = logging.getLogger(__name__)

MAX_DELTA_H = 1000.0
UNRELIABLE_DIVERGENCE_FRAC = 0.10


@dataclass(frozen=True)
class SamplerConfig:
    iterations: int = 2000
    warmup: int = 1000
    target_accept: float = 0.8
    max_tree_depth: int = 10
    seed: int = 0
    chains: int = 4
    init_radius: float = 2.0
    n_jobs: int = 1

    def __post_init__(self):
        if not 0 <= self.warmup < self.iterations:
            raise ConfigError("need 0 <= warmup < iterations")
        if not 0.0 < self.target_accept < 1.0:
            raise ConfigError("target_accept must lie in (0, 1)")
        if self.chains < 1:
            raise ConfigError("chains must be >= 1")
        if self.max_tree_depth < 1:
            raise ConfigError("max_tree_depth must be >= 1")
        if self.init_radius <= 0:
            raise ConfigError("init_radius must be positive")

    @classmethod
    def from_dict(cls, d: dict) -> "SamplerConfig":
        unknown = set(d) - {f.name for f in dataclasses.fields(cls)}
        if unknown:
            raise ConfigError(f"unknown sampler option(s): {', '.join(sorted(unknown))}")
        return cls(**d)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass
class PosteriorDraws:
    """Retained draws, shape (n_draws, n_chains, dim), in the constrained view."""

    draws: np.ndarray
    names: list[str]
    energy: np.ndarray
    tree_depth: np.ndarray
    divergent: np.ndarray
    step_size: np.ndarray
    n_leapfrog: np.ndarray
    accept_stat: np.ndarray
    config: dict = field(default_factory=dict)
    unconstrained: np.ndarray | None = None

    @property
    def n_draws(self) -> int:
        return self.draws.shape[0]

    @property
    def n_chains(self) -> int:
        return self.draws.shape[1]

    @property
    def divergent_fraction(self) -> float:
        return float(np.mean(self.divergent)) if self.divergent.size else 0.0

    @property
    def unreliable(self) -> bool:
        return self.divergent_fraction > UNRELIABLE_DIVERGENCE_FRAC

    def index(self, name: str) -> int:
        return self.names.index(name)

    def get(self, name: str) -> np.ndarray:
        """Draws of one coordinate, shape (n_draws, n_chains)."""
        return self.draws[:, :, self.index(name)]

    def pooled(self) -> np.ndarray:
        """All chains stacked, chain-major: shape (n_chains * n_draws, dim)."""
        return np.concatenate([self.draws[:, c, :] for c in range(self.n_chains)], axis=0)


class GaussianTarget:
    """Independent normal target, used to calibrate the sampler."""

    def __init__(self, dim: int = 2, mean=0.0, sd=1.0):
        self.dim = dim
        self.mean = np.broadcast_to(np.asarray(mean, dtype=float), (dim,)).copy()
        self.sd = np.broadcast_to(np.asarray(sd, dtype=float), (dim,)).copy()
        self.names = [f"x[{i}]" for i in range(dim)]

    def logp_grad(self, x):
        z = (x - self.mean) / self.sd
        return -0.5 * float(z @ z), -z / self.sd


# --------------------------------------------------------------------------- integrator


class _Point:
    __slots__ = ("q", "p", "g", "logp")

    def __init__(self, q, p, g, logp):
        self.q, self.p, self.g, self.logp = q, p, g, logp


def leapfrog(target, q, p, g, eps, inv_metric):
    """One leapfrog step. Returns (q, p, grad, logp)."""
    p = p + 0.5 * eps * g
    q = q + eps * inv_metric * p
    logp, g = target.logp_grad(q)
    p = p + 0.5 * eps * g
    return q, p, g, logp


def hamiltonian(logp, p, inv_metric):
    return -logp + 0.5 * float(np.sum(inv_metric * p * p))


def _logaddexp(a, b):
    if a == -math.inf:
        return b
    if b == -math.inf:
        return a
    if a > b:
        return a + math.log1p(math.exp(b - a))
    return b + math.log1p(math.exp(a - b))


def _no_uturn(p_sharp_minus, p_sharp_plus, rho):
    return float(p_sharp_plus @ rho) > 0.0 and float(p_sharp_minus @ rho) > 0.0


class _Subtree:
    __slots__ = ("valid", "propose", "p_sharp_beg", "p_sharp_end", "p_beg", "p_end", "rho", "log_w")


class _Transition:
    """State for a single NUTS transition."""

    def __init__(self, target, eps, inv_metric, rng, max_depth):
        self.target = target
        self.eps = eps
        self.inv_metric = inv_metric
        self.rng = rng
        self.max_depth = max_depth
        self.n_leapfrog = 0
        self.sum_metro = 0.0
        self.divergent = False

    def build(self, z: _Point, depth: int, direction: int, H0: float) -> tuple[_Subtree, _Point]:
        """Grow ``2**depth`` leapfrog steps from ``z``; returns (subtree, new edge)."""
        if depth == 0:
            q, p, g, logp = leapfrog(self.target, z.q, z.p, z.g, direction * self.eps, self.inv_metric)
            self.n_leapfrog += 1
            edge = _Point(q, p, g, logp)
            H = hamiltonian(logp, p, self.inv_metric) if np.isfinite(logp) else math.inf
            if not math.isfinite(H):
                H = math.inf
            t = _Subtree()
            delta = H0 - H
            if -delta > MAX_DELTA_H:
                self.divergent = True
                t.valid = False
                t.log_w = -math.inf
                return t, edge
            t.valid = True
            t.log_w = delta
            self.sum_metro += 1.0 if delta > 0 else math.exp(delta)
            ps = self.inv_metric * p
            t.propose = edge
            t.p_sharp_beg = t.p_sharp_end = ps
            t.p_beg = t.p_end = p
            t.rho = p.copy()
            return t, edge

        init, z = self.build(z, depth - 1, direction, H0)
        if not init.valid:
            return init, z
        final, z = self.build(z, depth - 1, direction, H0)
        if not final.valid:
            return final, z

        t = _Subtree()
        t.log_w = _logaddexp(init.log_w, final.log_w)
        if math.log(self.rng.uniform()) < final.log_w - t.log_w:
            t.propose = final.propose
        else:
            t.propose = init.propose
        rho = init.rho + final.rho
        ok = _no_uturn(init.p_sharp_beg, final.p_sharp_end, rho)
        ok = ok and _no_uturn(init.p_sharp_beg, final.p_sharp_beg, init.rho + final.p_beg)
        ok = ok and _no_uturn(init.p_sharp_end, final.p_sharp_end, final.rho + init.p_end)
        t.valid = ok
        t.p_sharp_beg, t.p_sharp_end = init.p_sharp_beg, final.p_sharp_end
        t.p_beg, t.p_end = init.p_beg, final.p_end
        t.rho = rho
        return t, z

    def run(self, q, logp, g):
        rng, inv_metric = self.rng, self.inv_metric
        p = rng.standard_normal(len(q)) / np.sqrt(inv_metric)
        H0 = hamiltonian(logp, p, inv_metric)
        start = _Point(q, p, g, logp)
        left = right = start
        ps = inv_metric * p
        # outer edges of the current tree: momentum and sharp momentum at each end
        ps_left = ps_right = ps
        p_left = p_right = p
        rho = p.copy()
        log_w = 0.0
        sample = start
        depth = 0
        while depth < self.max_depth:
            if rng.uniform() > 0.5:
                sub, right = self.build(right, depth, +1, H0)
                if not sub.valid:
                    break
                ok = _no_uturn(ps_left, sub.p_sharp_end, rho + sub.rho)
                ok = ok and _no_uturn(ps_left, sub.p_sharp_beg, rho + sub.p_beg)
                ok = ok and _no_uturn(ps_right, sub.p_sharp_end, sub.rho + p_right)
                ps_right, p_right = sub.p_sharp_end, sub.p_end
            else:
                sub, left = self.build(left, depth, -1, H0)
                if not sub.valid:
                    break
                # subtree runs right-to-left: beg touches the old tree, end is outermost
                ok = _no_uturn(sub.p_sharp_end, ps_right, rho + sub.rho)
                ok = ok and _no_uturn(sub.p_sharp_end, ps_left, sub.rho + p_left)
                ok = ok and _no_uturn(sub.p_sharp_beg, ps_right, rho + sub.p_beg)
                ps_left, p_left = sub.p_sharp_end, sub.p_end
            depth += 1
            if sub.log_w > log_w or math.log(rng.uniform()) < sub.log_w - log_w:
                sample = sub.propose
            log_w = _logaddexp(log_w, sub.log_w)
            rho = rho + sub.rho
            if not ok:
                break
        accept = self.sum_metro / self.n_leapfrog if self.n_leapfrog else 0.0
        energy = hamiltonian(sample.logp, sample.p, inv_metric)
        return sample, depth, accept, energy


def nuts_transition(target, q, logp, g, eps, inv_metric, rng, max_depth=10):
    """One NUTS step. Returns (q, logp, grad, info dict)."""
    tr = _Transition(target, eps, inv_metric, rng, max_depth)
    sample, depth, accept, energy = tr.run(q, logp, g)
    info = {
        "tree_depth": depth,
        "accept_stat": accept,
        "divergent": tr.divergent,
        "n_leapfrog": tr.n_leapfrog,
        "energy": energy,
    }
    return sample.q, sample.logp, sample.g, info


# --------------------------------------------------------------------------- adaptation


class DualAveraging:
    """Step-size adaptation toward a target acceptance statistic."""

    def __init__(self, target_accept=0.8, gamma=0.05, t0=10.0, kappa=0.75):
        self.delta, self.gamma, self.t0, self.kappa = target_accept, gamma, t0, kappa
        self.restart(1.0)

    def restart(self, eps):
        self.mu = math.log(10.0 * eps)
        self.counter = 0
        self.s_bar = 0.0
        self.x_bar = 0.0

    def update(self, accept) -> float:
        accept = min(1.0, accept)
        self.counter += 1
        eta = 1.0 / (self.counter + self.t0)
        self.s_bar = (1.0 - eta) * self.s_bar + eta * (self.delta - accept)
        x = self.mu - self.s_bar * math.sqrt(self.counter) / self.gamma
        x_eta = self.counter ** (-self.kappa)
        self.x_bar = x_eta * x + (1.0 - x_eta) * self.x_bar
        return math.exp(x)

    @property
    def final(self) -> float:
        return math.exp(self.x_bar)


def warmup_windows(warmup: int, init_buffer=75, term_buffer=50, base_window=25) -> list[tuple[int, int]]:
    """(start, end) iterations of the slow metric-adaptation windows.

    Fast step-size-only phases surround them: ``init_buffer`` iterations
    before the first window and ``term_buffer`` after the last. Windows
    double in length; a window that cannot double into the next absorbs
    the remainder.
    """
    if warmup < 20:
        return []
    if init_buffer + term_buffer + base_window > warmup:
        init_buffer = int(0.15 * warmup)
        term_buffer = int(0.1 * warmup)
        base_window = warmup - (init_buffer + term_buffer)
    windows = []
    start, size = init_buffer, base_window
    last = warmup - term_buffer
    while start < last:
        end = start + size
        if end + 2 * size > last:
            end = last
        windows.append((start, end))
        start, size = end, 2 * size
    return windows


def find_reasonable_step_size(target, q, logp, g, eps, inv_metric, rng) -> float:
    """Double or halve ``eps`` until one-step acceptance crosses 0.8."""
    p = rng.standard_normal(len(q)) / np.sqrt(inv_metric)
    H0 = hamiltonian(logp, p, inv_metric)
    _, p1, _, lp1 = leapfrog(target, q, p, g, eps, inv_metric)
    H1 = hamiltonian(lp1, p1, inv_metric) if np.isfinite(lp1) else math.inf
    delta = H0 - H1
    direction = 1 if delta > math.log(0.8) else -1
    for _ in range(100):
        p = rng.standard_normal(len(q)) / np.sqrt(inv_metric)
        H0 = hamiltonian(logp, p, inv_metric)
        _, p1, _, lp1 = leapfrog(target, q, p, g, eps, inv_metric)
        H1 = hamiltonian(lp1, p1, inv_metric) if np.isfinite(lp1) else math.inf
        delta = H0 - H1
        if direction == 1 and not delta > math.log(0.8):
            break
        if direction == -1 and not delta < math.log(0.8):
            break
        eps = eps * 2.0 if direction == 1 else eps * 0.5
        if eps > 1e7 or eps < 1e-12:
            break
    return eps


# --------------------------------------------------------------------------- chains


def _initial_point(target, rng, radius):
    for _ in range(100):
        if hasattr(target, "initial_point"):
            q = target.initial_point(rng, radius)
        else:
            q = rng.uniform(-radius, radius, size=target.dim)
        logp, g = target.logp_grad(q)
        if np.isfinite(logp) and np.all(np.isfinite(g)):
            return q, logp, g
    raise NumericalError("could not find a finite initial density after 100 attempts")


def chain_seed(seed: int, chain: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([int(seed) & 0xFFFFFFFFFFFFFFFF, int(chain)])


def run_chain(target, config: SamplerConfig, chain: int) -> dict:
    """Run one chain; returns per-iteration arrays for the retained draws."""
    rng = np.random.default_rng(chain_seed(config.seed, chain))
    q, logp, g = _initial_point(target, rng, config.init_radius)
    dim = len(q)
    inv_metric = np.ones(dim)
    warmup = config.warmup
    n_keep = config.iterations - warmup

    eps = 1.0
    if warmup > 0:
        eps = find_reasonable_step_size(target, q, logp, g, eps, inv_metric, rng)
    da = DualAveraging(config.target_accept)
    da.restart(eps)
    windows = warmup_windows(warmup)
    win_idx = 0
    acc_sum = np.zeros(dim)
    acc_sq = np.zeros(dim)
    acc_n = 0

    keep_q = np.empty((n_keep, dim))
    stats = {k: np.empty(n_keep) for k in ("energy", "tree_depth", "accept_stat", "n_leapfrog", "step_size")}
    stats["divergent"] = np.zeros(n_keep, dtype=bool)

    for it in range(config.iterations):
        q, logp, g, info = nuts_transition(target, q, logp, g, eps, inv_metric, rng, config.max_tree_depth)
        if it < warmup:
            eps = da.update(info["accept_stat"])
            if win_idx < len(windows) and windows[win_idx][0] <= it < windows[win_idx][1]:
                acc_sum += q
                acc_sq += q * q
                acc_n += 1
                if it == windows[win_idx][1] - 1:
                    mean = acc_sum / acc_n
                    var = np.maximum(acc_sq / acc_n - mean**2, 0.0) * acc_n / max(acc_n - 1, 1)
                    inv_metric = (acc_n / (acc_n + 5.0)) * var + 1e-3 * (5.0 / (acc_n + 5.0))
                    acc_sum[:] = 0.0
                    acc_sq[:] = 0.0
                    acc_n = 0
                    win_idx += 1
                    eps = find_reasonable_step_size(target, q, logp, g, eps, inv_metric, rng)
                    da.restart(eps)
            if it == warmup - 1:
                eps = da.final
        else:
            k = it - warmup
            keep_q[k] = q
            stats["energy"][k] = info["energy"]
            stats["tree_depth"][k] = info["tree_depth"]
            stats["accept_stat"][k] = info["accept_stat"]
            stats["n_leapfrog"][k] = info["n_leapfrog"]
            stats["step_size"][k] = eps
            stats["divergent"][k] = info["divergent"]
    stats["q"] = keep_q
    stats["inv_metric"] = inv_metric
    return stats


def _run_chain_job(args):
    target, config, chain = args
    return run_chain(target, config, chain)


def sample(target, config: SamplerConfig | None = None) -> PosteriorDraws:
    """Run ``config.chains`` chains and collect post-warmup draws.

    Each chain's RNG is derived from ``(seed, chain)``, so serial and parallel
    execution (``n_jobs > 1``) give identical output.
    """
    config = config or SamplerConfig()
    jobs = [(target, config, c) for c in range(config.chains)]
    if config.n_jobs > 1 and config.chains > 1:
        with ProcessPoolExecutor(max_workers=min(config.n_jobs, config.chains)) as ex:
            results = list(ex.map(_run_chain_job, jobs))
    else:
        results = [_run_chain_job(j) for j in jobs]

    conv = getattr(target, "constrained_vector", None)
    unc = np.stack([r["q"] for r in results], axis=1)
    if conv is not None:
        draws = np.empty_like(unc)
        for c in range(unc.shape[1]):
            for k in range(unc.shape[0]):
                draws[k, c] = conv(unc[k, c])
    else:
        draws = unc.copy()
    names = list(getattr(target, "names", [f"x[{i}]" for i in range(unc.shape[2])]))

    def stack(key, dtype=float):
        return np.stack([r[key] for r in results], axis=1).astype(dtype)

    out = PosteriorDraws(
        draws=draws,
        names=names,
        energy=stack("energy"),
        tree_depth=stack("tree_depth", int),
        divergent=stack("divergent", bool),
        step_size=stack("step_size"),
        n_leapfrog=stack("n_leapfrog", int),
        accept_stat=stack("accept_stat"),
        config=config.to_dict(),
        unconstrained=unc,
    )
    if out.unreliable:
        log.warning("%.1f%% divergent transitions; fit flagged unreliable", 100 * out.divergent_fraction)
    return out
