"""Joint alignment and low-rank frontal reconstruction.

The inner loop is an inexact augmented-Lagrangian / ADMM scheme over
``(L, c, dp, e)`` with multipliers ``(a, B)`` for the two constraints

    h1 = x + J dp - U c - e = 0          (linearised warp)
    h2 = L - R(U c)         = 0          (L inside the clean subspace)

minimising ``||L||_* + lam * ||e||_1``. The outer loop re-warps the image,
recomputes the Jacobian and applies ``p <- p + dp``.
"""
import csv
import io
import logging
from dataclasses import dataclass, field, replace

import numpy as np
import scipy.linalg

from .numlin import shrink, thin_svd
from .shapewarp import (
    params_from_shape,
    pixel_map,
    shape_from_params,
    steepest_descent_images,
    warp_jacobian,
    warp_texture,
)

log = logging.getLogger(__name__)

TRACE_COLUMNS = ("outer", "inner", "mu", "objective", "h1_rel", "h2_rel", "de_rel", "dL_rel")
MAX_GRAM_CONDITION = 1e12


class IllConditionedGram(np.linalg.LinAlgError):
    def __init__(self, condition):
        super().__init__(f"projected Gram matrix is ill-conditioned (condition estimate {condition:.3g})")
        self.condition = condition


class SolverDivergence(RuntimeError):
    """Raised when an iterate becomes non-finite; carries the partial state."""

    def __init__(self, message, state=None, trace=None):
        super().__init__(message)
        self.state = state
        self.trace = trace or []


@dataclass(frozen=True)
class SolverConfig:
    lam: float = 0.3
    rho: float = 1.1
    mu0: float = 1e-6
    mu_max: float = 1e10
    eps1: float = 1e-3
    eps2: float = 1e-5
    eps3: float = 1e-7
    max_inner: int = 500
    max_outer: int = 30
    # keep the multiplier term in the dp subproblem (off: dp as printed)
    dp_multiplier: bool = False

    def __post_init__(self):
        for name in ("lam", "mu0", "mu_max", "eps1", "eps2", "eps3"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if not self.rho > 1:
            raise ValueError(f"rho must exceed 1, got {self.rho}")
        if self.mu0 > self.mu_max:
            raise ValueError(f"mu0={self.mu0} exceeds mu_max={self.mu_max}")
        if self.max_inner < 1 or self.max_outer < 1:
            raise ValueError("max_inner and max_outer must be at least 1")


@dataclass
class InnerState:
    L: np.ndarray
    e: np.ndarray
    c: np.ndarray
    dp: np.ndarray
    a: np.ndarray
    B: np.ndarray
    mu: float
    t: int = 0
    converged: bool = False
    dp_frozen: bool = False
    nuclear: float = 0.0
    objective_trace: list = field(default_factory=list)
    h1_trace: list = field(default_factory=list)
    h2_trace: list = field(default_factory=list)
    de_trace: list = field(default_factory=list)
    dL_trace: list = field(default_factory=list)
    mu_trace: list = field(default_factory=list)

    @property
    def objective(self):
        return self.objective_trace[-1] if self.objective_trace else 0.0


@dataclass
class FitResult:
    p_final: np.ndarray
    shape: np.ndarray
    L: np.ndarray
    e: np.ndarray
    c: np.ndarray
    converged_inner: list
    converged_outer: bool
    objective_trace: list
    inner_iterations: list
    trace: list = field(repr=False, default_factory=list)
    params_trace: list = field(repr=False, default_factory=list)

    @property
    def n_outer(self):
        return len(self.objective_trace)


# -- residuals and block updates -----------------------------------------------


def _check_len(name, vec, n):
    if vec.shape != (n,):
        raise ValueError(f"{name} has shape {vec.shape}, expected ({n},)")


def _jdp(J, dp, f):
    if J is None or J.shape[1] == 0:
        return np.zeros(f)
    return J @ dp


def residual_h1(x, J, dp, U, c, e):
    x = np.asarray(x, dtype=np.float64)
    f = x.shape[0]
    _check_len("e", np.asarray(e), f)
    if U.shape[0] != f:
        raise ValueError(f"U has {U.shape[0]} rows, x has {f}")
    _check_len("c", np.asarray(c), U.shape[1])
    if J is not None and J.shape[0] != f:
        raise ValueError(f"J has {J.shape[0]} rows, x has {f}")
    return x + _jdp(J, dp, f) - U @ c - e


def residual_h2(L, U, c):
    L = np.asarray(L, dtype=np.float64)
    if U.shape[0] != L.size:
        raise ValueError(f"U has {U.shape[0]} rows but L has {L.size} entries")
    _check_len("c", np.asarray(c), U.shape[1])
    return L - (U @ c).reshape(L.shape)


def _svt_with_norm(q, tau):
    factors = thin_svd(q)
    s = shrink(factors.singular_values, tau)
    keep = s > 0
    out = (factors.left[:, keep] * s[keep]) @ factors.right[:, keep].T
    return out, float(s.sum())


def update_L(U, c, B, mu, return_norm=False):
    """``L = D_{1/mu}[R(U c) - B / mu]``."""
    if not mu > 0:
        raise ValueError(f"mu must be positive, got {mu}")
    M = (U @ c).reshape(B.shape)
    L, nuc = _svt_with_norm(M - B / mu, 1.0 / mu)
    return (L, nuc) if return_norm else L


def update_c(x, J, dp, e, L, a, B, mu, U):
    """Closed-form minimiser of the augmented Lagrangian over ``c``."""
    if not mu > 0:
        raise ValueError(f"mu must be positive, got {mu}")
    f = U.shape[0]
    for name, vec in (("x", x), ("e", e), ("a", a)):
        _check_len(name, np.asarray(vec), f)
    if L.size != f or B.size != f:
        raise ValueError(f"L and B must have {f} entries")
    xhat = x + _jdp(J, dp, f) - e
    return U.T @ (a + B.ravel()) / (2.0 * mu) + U.T @ (xhat + L.ravel()) / 2.0


class ProjectedGaussNewton:
    """Solves ``min_dp ||(I - U U^T)(r + J dp)||^2`` for varying ``r``.

    The Gram matrix ``J^T J - (U^T J)^T (U^T J)`` is factorised once.
    """

    def __init__(self, J, U):
        if J.shape[0] != U.shape[0]:
            raise ValueError(f"J has {J.shape[0]} rows, U has {U.shape[0]}")
        self.J = J
        self.U = U
        self.UtJ = U.T @ J
        gram = J.T @ J - self.UtJ.T @ self.UtJ
        gram = 0.5 * (gram + gram.T)
        self.gram = gram
        if gram.shape[0] == 0:
            self.condition = 1.0
            self._factor = None
            return
        w = np.linalg.eigvalsh(gram)
        self.condition = np.inf if w[0] <= 0 else float(w[-1] / w[0])
        if not self.condition < MAX_GRAM_CONDITION:
            raise IllConditionedGram(self.condition)
        self._factor = scipy.linalg.cho_factor(gram)

    def __call__(self, r):
        if self._factor is None:
            return np.zeros(0)
        rhs = self.J.T @ r - self.UtJ.T @ (self.U.T @ r)
        return -scipy.linalg.cho_solve(self._factor, rhs)


def projected_gram(J, U):
    UtJ = U.T @ J
    return J.T @ J - UtJ.T @ UtJ


def update_dp(J, U, x, e, a=None, mu=None):
    """``dp = -(Jt^T Jt)^{-1} Jt^T (x - e)`` with ``Jt`` the Jacobian projected
    onto the orthogonal complement of ``span(U)``. Passing ``a`` and ``mu``
    adds the multiplier term ``a / mu`` to the residual."""
    r = np.asarray(x, dtype=np.float64) - e
    if a is not None:
        r = r + a / mu
    return ProjectedGaussNewton(J, U)(r)


def update_e(x, J, dp, U, c, a, mu, lam):
    """``e = S_{lam/mu}[x + J dp - U c + a / mu]``."""
    if not mu > 0:
        raise ValueError(f"mu must be positive, got {mu}")
    f = U.shape[0]
    _check_len("x", np.asarray(x), f)
    _check_len("a", np.asarray(a), f)
    return shrink(x + _jdp(J, dp, f) - U @ c + a / mu, lam / mu)


def update_multipliers(a, B, mu, h1, h2):
    return a + mu * h1, B + mu * h2


# -- loops -------------------------------------------------------------------


def inner_solve(x, mask, J, basis, cfg=SolverConfig(), outer=0, trace=None):
    """Run the inner ADMM loop from a cold start.

    ``J=None`` (or a zero-column J) freezes ``dp`` at zero. Entries of ``x``
    and rows of ``J`` outside ``mask`` are zeroed. Returns the final
    :class:`InnerState`; ``trace`` (a list) receives one CSV row per
    iteration when given.
    """
    U = basis.u
    f = U.shape[0]
    m, n = basis.frame
    x = np.asarray(x, dtype=np.float64).copy()
    _check_len("x", x, f)
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        x[~mask] = 0.0
    norm_x = np.linalg.norm(x)
    if not norm_x > 0:
        raise ValueError("inner_solve needs a texture with nonzero norm")

    n_p = 0 if J is None else J.shape[1]
    if n_p and mask is not None:
        J = np.where(mask[:, None], J, 0.0)
    state = InnerState(
        L=np.zeros((m, n)),
        e=np.zeros(f),
        c=np.zeros(U.shape[1]),
        dp=np.zeros(n_p),
        a=np.zeros(f),
        B=np.zeros((m, n)),
        mu=cfg.mu0,
    )
    gauss_newton = None
    if n_p:
        try:
            gauss_newton = ProjectedGaussNewton(J, U)
        except IllConditionedGram as exc:
            log.warning("%s; freezing dp for this outer iteration", exc)
            state.dp_frozen = True
    else:
        state.dp_frozen = True

    for t in range(1, cfg.max_inner + 1):
        mu = state.mu
        L_prev, e_prev = state.L, state.e
        L, nuc = update_L(U, state.c, state.B, mu, return_norm=True)
        c = update_c(x, J, state.dp, state.e, L, state.a, state.B, mu, U)
        dp = state.dp
        if gauss_newton is not None:
            r = x - state.e
            if cfg.dp_multiplier:
                r = r + state.a / mu
            dp = gauss_newton(r)
        e = update_e(x, J, dp, U, c, state.a, mu, cfg.lam)
        h1 = residual_h1(x, J, dp, U, c, e)
        h2 = residual_h2(L, U, c)
        a, B = update_multipliers(state.a, state.B, mu, h1, h2)

        h1_rel = np.linalg.norm(h1) / norm_x
        h2_rel = np.linalg.norm(h2) / norm_x
        de_rel = np.linalg.norm(e - e_prev) / norm_x
        dL_rel = np.linalg.norm(L - L_prev) / norm_x
        objective = nuc + cfg.lam * np.abs(e).sum()

        state.L, state.c, state.dp, state.e, state.a, state.B = L, c, dp, e, a, B
        state.nuclear = nuc
        state.t = t
        state.objective_trace.append(objective)
        state.h1_trace.append(h1_rel)
        state.h2_trace.append(h2_rel)
        state.de_trace.append(de_rel)
        state.dL_trace.append(dL_rel)
        state.mu_trace.append(mu)
        if trace is not None:
            trace.append((outer, t, mu, objective, h1_rel, h2_rel, de_rel, dL_rel))
        if not (np.isfinite(objective) and np.isfinite(h1_rel) and np.isfinite(h2_rel)):
            raise SolverDivergence(f"non-finite iterate at inner iteration {t}", state, trace)

        state.mu = min(cfg.rho * mu, cfg.mu_max)
        if max(de_rel, dL_rel) <= cfg.eps2 and max(h1_rel, h2_rel) <= cfg.eps3:
            state.converged = True
            break
    return state


def _prepare(model, tri, basis):
    if tuple(basis.frame) != tuple(model.frame):
        raise ValueError(f"basis frame {basis.frame} does not match shape model frame {model.frame}")
    pmap = pixel_map(model, tri)
    return pmap, warp_jacobian(model, tri, pmap)


def fit(image, init_shape, model, tri, basis, cfg=SolverConfig(), p0=None):
    """Align the shape model to ``image`` starting from ``init_shape``.

    Each outer iteration warps the image at the current ``p``, recomputes the
    Jacobian, runs :func:`inner_solve` and applies ``p <- p + dp``. Stops when
    ``|phi_t - phi_{t-1}| < eps1 * max(1, phi_{t-1})`` with
    ``phi = ||L||_* + lam * ||e||_1``, or after ``max_outer`` iterations.
    """
    pmap, dwdp = _prepare(model, tri, basis)
    p = params_from_shape(model, init_shape) if p0 is None else np.asarray(p0, dtype=np.float64).copy()
    trace = []
    phis, converged_inner, iters, params = [], [], [], [p.copy()]
    converged_outer = False
    state = None
    for outer in range(1, cfg.max_outer + 1):
        shape = shape_from_params(model, p)
        x, wmask = warp_texture(image, shape, model, tri, pmap=pmap)
        mask = wmask & basis.mask
        J = steepest_descent_images(image, model, tri, p, pmap=pmap, dwdp=dwdp)
        try:
            state = inner_solve(x, mask, J, basis, cfg, outer=outer, trace=trace)
        except SolverDivergence as exc:
            exc.trace = trace
            raise
        phi = state.objective
        p = p + state.dp
        phis.append(phi)
        converged_inner.append(state.converged)
        iters.append(state.t)
        params.append(p.copy())
        log.debug("outer %d: phi=%.6g inner=%d |dp|=%.3g", outer, phi, state.t, np.linalg.norm(state.dp))
        if len(phis) > 1 and abs(phi - phis[-2]) < cfg.eps1 * max(1.0, phis[-2]):
            converged_outer = True
            break
    return FitResult(
        p_final=p,
        shape=shape_from_params(model, p),
        L=state.L,
        e=state.e,
        c=state.c,
        converged_inner=converged_inner,
        converged_outer=converged_outer,
        objective_trace=phis,
        inner_iterations=iters,
        trace=trace,
        params_trace=params,
    )


def crop_box(mask, frame):
    """Row/column slices of the bounding box of ``True`` pixels."""
    grid = np.asarray(mask).reshape(frame)
    rows = np.flatnonzero(grid.any(axis=1))
    cols = np.flatnonzero(grid.any(axis=0))
    if rows.size == 0:
        raise ValueError("mask has no unmasked pixels")
    return slice(rows[0], rows[-1] + 1), slice(cols[0], cols[-1] + 1)


def frontalize(image, init_shape, model, tri, basis, cfg=SolverConfig()):
    """Fit, then run one more outer pass with ``dp`` frozen.

    Returns ``(frontal, result)`` where ``frontal`` is the final ``L`` cropped
    to the bounding box of the basis mask, and ``result`` carries the last
    pass's ``L``, ``e``, ``c`` and its trace rows.
    """
    result = fit(image, init_shape, model, tri, basis, cfg)
    pmap, _ = _prepare(model, tri, basis)
    x, wmask = warp_texture(image, result.shape, model, tri, pmap=pmap)
    trace = list(result.trace)
    state = inner_solve(x, wmask & basis.mask, None, basis, cfg, outer=result.n_outer + 1, trace=trace)
    rows, cols = crop_box(basis.mask, basis.frame)
    frontal = state.L[rows, cols].copy()
    result = replace(result, L=state.L, e=state.e, c=state.c, trace=trace)
    return frontal, result


def format_trace_csv(rows):
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(TRACE_COLUMNS)
    for outer, inner, mu, obj, h1, h2, de, dl in rows:
        writer.writerow([outer, inner] + [repr(float(v)) for v in (mu, obj, h1, h2, de, dl)])
    return buf.getvalue()
