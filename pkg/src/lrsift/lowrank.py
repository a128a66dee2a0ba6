"""Robust PCA by inexact ALM and local low-rank rectification (TILT-style).

The rectification problem is

    min ||A||_* + lam ||E||_1   s.t.   I o tau = A + E

solved by linearizing the warp around the current estimate and running an
ALM inner loop over (A, E, dtau); the outer loop re-linearizes until the
update is small.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
from scipy import ndimage
from scipy.linalg import null_space

from lrsift.imaging import AffineWarp, SingularWarpError, bilinear, window_offsets


@dataclass
class TiltParams:
    """Solver knobs.

    ``mu_init`` is relative: the initial penalty is ``mu_init / ||D||_2``.
    """

    outer_max_iter: int = 30
    outer_tol: float = 1e-3
    inner_max_iter: int = 200
    inner_tol: float = 1e-6
    mu_init: float = 1.25
    mu_growth: float = 1.5
    constraint_tol: float = 1e-4
    blur_sigma: float = 1.0
    max_backtracks: int = 4
    orientation_init: bool = True

    def validate(self):
        for name in ("outer_max_iter", "outer_tol", "inner_max_iter", "inner_tol", "mu_init", "constraint_tol"):
            if not getattr(self, name) > 0:
                raise ValueError(f"TiltParams.{name} must be positive")
        if not self.mu_growth > 1:
            raise ValueError("TiltParams.mu_growth must exceed 1")
        if self.blur_sigma < 0 or self.max_backtracks < 0:
            raise ValueError("TiltParams.blur_sigma and max_backtracks must be non-negative")


class RPCAResult(NamedTuple):
    low_rank: np.ndarray
    sparse: np.ndarray
    converged: bool
    iterations: int


def soft_threshold(X, tau):
    return np.sign(X) * np.maximum(np.abs(X) - tau, 0.0)


def svt(X, tau):
    """Singular value thresholding; returns the shrunk matrix and its nuclear norm."""
    U, s, Vt = np.linalg.svd(X, full_matrices=False)
    s = s - tau
    r = int(np.count_nonzero(s > 0))
    if r == 0:
        return np.zeros_like(X), 0.0
    return (U[:, :r] * s[:r]) @ Vt[:r], float(s[:r].sum())


def default_lambda(shape):
    return 1.0 / np.sqrt(max(shape))


# standalone decompositions favour accuracy: a slower penalty schedule
# reaches the exact-recovery solution instead of a merely feasible one
RPCA_DEFAULTS = TiltParams(inner_max_iter=1000, inner_tol=1e-7, mu_growth=1.1)


def rpca_alm(D, lam=None, params=None):
    """Inexact ALM for ``min ||A||_* + lam ||E||_1  s.t.  D = A + E``.

    Stops when ``||D - A - E||_F / ||D||_F < params.inner_tol``; on hitting
    ``inner_max_iter`` the last iterate is returned with ``converged=False``.
    Without ``params`` the accuracy-oriented ``RPCA_DEFAULTS`` apply.
    """
    params = params or RPCA_DEFAULTS
    D = np.asarray(D, dtype=float)
    if D.ndim != 2 or min(D.shape) < 2:
        raise ValueError("rpca_alm needs a matrix with both dimensions >= 2")
    if not np.all(np.isfinite(D)):
        raise ValueError("rpca_alm input must be finite")
    lam = default_lambda(D.shape) if lam is None else float(lam)
    if lam <= 0:
        raise ValueError("lambda must be positive")
    dnorm = np.linalg.norm(D)
    if dnorm == 0:
        return RPCAResult(np.zeros_like(D), np.zeros_like(D), True, 0)
    spec = np.linalg.norm(D, 2)
    Y = D / max(spec, np.abs(D).max() / lam)
    mu = params.mu_init / spec
    mu_max = mu * 1e7
    E = np.zeros_like(D)
    A = np.zeros_like(D)
    for it in range(1, params.inner_max_iter + 1):
        A, _ = svt(D - E + Y / mu, 1.0 / mu)
        E = soft_threshold(D - A + Y / mu, lam / mu)
        R = D - A - E
        Y += mu * R
        mu = min(mu * params.mu_growth, mu_max)
        if np.linalg.norm(R) / dnorm < params.inner_tol:
            return RPCAResult(A, E, True, it)
    return RPCAResult(A, E, False, params.inner_max_iter)


def relaxed_objective(A, E, lam):
    return float(np.linalg.svd(A, compute_uv=False).sum() + lam * np.abs(E).sum())


def numerical_rank(M, rel_tol=0.03):
    """Number of singular values above ``rel_tol`` times the largest."""
    s = np.linalg.svd(np.asarray(M, dtype=float), compute_uv=False)
    if s.size == 0 or s[0] == 0:
        return 0
    return int(np.count_nonzero(s > rel_tol * s[0]))


def fix_aspect_ratio(warp):
    """Equalize the two axis scales of the rectified frame.

    The rectified window samples the source with step ``||L^-1 e_b||`` along
    output axis ``b``; both steps are replaced by their geometric mean by
    rescaling the rows of ``L``.  Rotation, shear-free axes and ``det`` are
    kept, so rectified axes stay orthogonal.
    """
    L = warp.linear
    if abs(np.linalg.det(L)) < 1e-12:
        raise SingularWarpError("cannot fix the aspect ratio of a singular warp")
    steps = np.linalg.norm(np.linalg.inv(L), axis=0)
    g = np.sqrt(steps[0] * steps[1])
    scale = (steps / g)[:, None]
    return AffineWarp(L * scale, warp.translation * scale[:, 0])


# ---------------------------------------------------------------------------
# rectification
# ---------------------------------------------------------------------------

class _CallCounter:
    def __init__(self):
        self._lock = threading.Lock()
        self.value = 0

    def increment(self):
        with self._lock:
            self.value += 1

    def reset(self):
        with self._lock:
            self.value = 0


# instrumented count of solve_tilt invocations (cost-structure checks)
SOLVE_TILT_CALLS = _CallCounter()


@dataclass
class TiltProblem:
    """Rectify the window of ``patch`` centred at ``center``.

    ``center`` defaults to the middle of ``patch`` and ``window`` (w, h) to
    its full size; passing a larger image lets the warped window read real
    pixels instead of replicated borders.
    """

    patch: np.ndarray
    init_warp: AffineWarp = field(default_factory=AffineWarp.identity)
    lam: float | None = None
    params: TiltParams = field(default_factory=TiltParams)
    center: np.ndarray | None = None
    window: tuple | None = None

    def resolved(self):
        img = np.asarray(self.patch, dtype=float)
        h, w = img.shape
        window = tuple(int(v) for v in (self.window or (w, h)))
        if min(window) < 20:
            raise ValueError("rectification window must be at least 20x20")
        center = np.array([(w - 1) / 2.0, (h - 1) / 2.0]) if self.center is None else np.asarray(self.center, float)
        lam = default_lambda(window[::-1]) if self.lam is None else float(self.lam)
        if lam <= 0:
            raise ValueError("lambda must be positive")
        self.params.validate()
        return img, center, window, lam


@dataclass
class TiltSolution:
    warp: AffineWarp
    low_rank: np.ndarray
    sparse: np.ndarray
    outer_iterations: int
    converged: bool
    objective: float
    history: list = field(default_factory=list)
    fully_valid: bool = True


class _WarpedWindow:
    """Samples the (blurred) source under a sampling matrix ``S = L^-1``."""

    def __init__(self, img, center, window, blur):
        self.src = ndimage.gaussian_filter(img, blur, mode="nearest") if blur > 0 else img
        self.center = center
        self.qx, self.qy = window_offsets(window)

    def sample(self, S, grad=False):
        xs = self.center[0] + S[0, 0] * self.qx + S[0, 1] * self.qy
        ys = self.center[1] + S[1, 0] * self.qx + S[1, 1] * self.qy
        return bilinear(self.src, xs, ys, grad=grad)

    def normalized(self, S):
        D, valid = self.sample(S)
        n = np.linalg.norm(D)
        return (D / n if n > 0 else D), valid

    def jacobian(self, S):
        """Jacobian of the unit-norm warped window w.r.t. ``P`` in ``S (I + P)``.

        Columns follow ``P.ravel()`` order; rows follow ``D.ravel()``.
        """
        D, valid, ix, iy = self.sample(S, grad=True)
        n = np.linalg.norm(D)
        # gradient of the warped window in output coordinates
        gu = S[0, 0] * ix + S[1, 0] * iy
        gv = S[0, 1] * ix + S[1, 1] * iy
        J = np.stack([(gu * self.qx).ravel(), (gu * self.qy).ravel(),
                      (gv * self.qx).ravel(), (gv * self.qy).ravel()], axis=1)
        d = D.ravel() / n
        Jn = (J - np.outer(d, d @ J)) / n
        return D / n, Jn, valid


def _gauge_constraints(S):
    """Rows ``C`` with ``C @ vec(P) = 0`` for the update ``S (I + P)``.

    To first order they keep the sampled area (``tr P = 0``) and the ratio
    of the two sampling-axis lengths, which are the scale and aspect
    directions a low-rank objective cannot see.
    """
    G = S.T @ S
    C = np.zeros((2, 4))
    C[0, [0, 3]] = 1.0
    # d(||S e0||^2 - ||S e1||^2) = 2 (G e0).(P e0) - 2 (G e1).(P e1)
    C[1, [0, 2]] = G[:, 0]
    C[1, [1, 3]] -= G[:, 1]
    return C


def _axis_candidates(D, min_sep_deg=25.0, rel_peak=0.05, max_second=2):
    """Sampling matrices ``K`` (det 1) mapping the output axes onto pairs of
    dominant line directions of ``D``.

    Line directions come from a magnitude-weighted histogram of gradient
    orientations.  The strongest direction is paired with each of the next
    strongest local peaks (at least ``min_sep_deg`` away) and with its
    perpendicular, since a weak second family is easily outvoted.  For each
    pair the axis assignment closest to the identity is used.
    """
    gy, gx = np.gradient(D)
    wgt = gx * gx + gy * gy
    if not wgt.sum() > 0:
        return []
    ang = (np.degrees(np.arctan2(gy, gx)) + 90.0) % 180.0
    hist, _ = np.histogram(ang, bins=180, range=(0.0, 180.0), weights=wgt)
    hist = ndimage.gaussian_filter1d(hist, 2.0, mode="wrap")
    p1 = int(np.argmax(hist))
    dist = np.abs((np.arange(180) - p1 + 90) % 180 - 90)
    is_peak = (hist >= np.roll(hist, 1)) & (hist > np.roll(hist, -1))
    ok = is_peak & (dist >= min_sep_deg) & (hist >= rel_peak * hist[p1])
    second = [int(p) for p in np.argsort(-np.where(ok, hist, -1.0))[:max_second] if ok[p]]

    def peak(p):
        a, b, c = hist[(p - 1) % 180], hist[p], hist[(p + 1) % 180]
        den = a - 2 * b + c
        return p + 0.5 + (0.5 * (a - c) / den if den < 0 else 0.0)

    a1 = peak(p1)
    out = []
    for a2 in [peak(p) for p in second] + [a1 + 90.0]:
        dirs = [np.array([np.cos(np.radians(a)), np.sin(np.radians(a))]) for a in (a1, a2)]
        best, best_score = None, -np.inf
        for d1, d2 in ((dirs[0], dirs[1]), (dirs[1], dirs[0])):
            d1 = d1 if d1[0] >= 0 else -d1
            d2 = d2 if d2[1] >= 0 else -d2
            K = np.column_stack([d1, d2])
            det = np.linalg.det(K)
            if det > 0.2 and d1[0] + d2[1] > best_score:
                best, best_score = K / np.sqrt(det), d1[0] + d2[1]
        if best is not None:
            out.append(best)
    return out


def _linearized_alm(D, Jr, lam, params):
    """ALM on ``min ||A||_* + lam||E||_1  s.t.  D + Jr z = A + E``; returns ``z``."""
    m, n = D.shape
    d = D.ravel()
    dnorm = np.linalg.norm(d)
    spec = np.linalg.norm(D, 2)
    Jpinv = np.linalg.pinv(Jr)
    Y = np.zeros_like(D)
    mu = params.mu_init / spec
    mu_max = mu * 1e7
    E = np.zeros_like(D)
    z = np.zeros(Jr.shape[1])
    Dz = D
    for _ in range(params.inner_max_iter):
        A, _ = svt(Dz - E + Y / mu, 1.0 / mu)
        E = soft_threshold(Dz - A + Y / mu, lam / mu)
        z = Jpinv @ (A + E - D - Y / mu).ravel()
        Dz = D + (Jr @ z).reshape(m, n)
        R = Dz - A - E
        Y += mu * R
        mu = min(mu * params.mu_growth, mu_max)
        if np.linalg.norm(R) / dnorm < params.inner_tol:
            break
    return z


def _rpca_objective(D, lam, params):
    res = rpca_alm(D, lam, params)
    return relaxed_objective(res.low_rank, res.sparse, lam), res


def solve_tilt(problem):
    """Find the affine warp that makes a window maximally low-rank.

    Each outer iteration warps the window by the current estimate,
    normalizes it to unit Frobenius norm, solves the linearized program and
    takes the update ``S <- S (I + dP)`` (halving the step until the relaxed
    objective decreases).  Optionally the start is replaced by the warp that
    aligns the window's two dominant line directions with the axes, when that
    scores better.  Translation is pinned at the window centre; the sampled
    area and the ratio of the sampling-axis lengths are held fixed to first
    order, which removes the zoom and collapse-to-a-line solutions.  The returned warp has its aspect ratio fixed.
    """
    SOLVE_TILT_CALLS.increment()
    img, center, window, lam = problem.resolved()
    params = problem.params
    L0 = problem.init_warp.linear
    if abs(np.linalg.det(L0)) < 1e-12:
        raise SingularWarpError("initial warp is singular")
    ww = _WarpedWindow(img, center, window, params.blur_sigma)
    S = np.linalg.inv(L0)

    D, valid = ww.normalized(S)
    raw, _ = ww.sample(S)
    if np.ptp(raw) < 1e-8:
        # constant window: nothing to rectify
        zeros = np.zeros_like(D)
        return TiltSolution(AffineWarp(L0, np.zeros(2)), D.copy(), zeros, 0, True,
                            relaxed_objective(D, zeros, lam), [], bool(valid.all()))

    f, res = _rpca_objective(D, lam, params)
    if params.orientation_init:
        S0 = S
        for K in _axis_candidates(raw):
            S_alt = S0 @ K
            D_alt, _ = ww.normalized(S_alt)
            f_alt, res_alt = _rpca_objective(D_alt, lam, params)
            if f_alt < f:
                S, f, res = S_alt, f_alt, res_alt
    history = [f]
    converged = False
    outer = 0
    for outer in range(1, params.outer_max_iter + 1):
        D, Jn, _ = ww.jacobian(S)
        N = null_space(_gauge_constraints(S))
        Jr = Jn @ N
        if not np.all(np.isfinite(Jr)) or np.linalg.matrix_rank(Jr) < Jr.shape[1]:
            converged = True
            break
        z = _linearized_alm(D, Jr, lam, params)
        P = (N @ z).reshape(2, 2)
        step = 1.0
        accepted = False
        for _ in range(params.max_backtracks + 1):
            S_new = S @ (np.eye(2) + step * P)
            if abs(np.linalg.det(S_new)) > 1e-8:
                Dn, _ = ww.normalized(S_new)
                f_new, res_new = _rpca_objective(Dn, lam, params)
                if f_new < f:
                    accepted = True
                    break
            step *= 0.5
        if not accepted:
            # no descent along the linearized direction: stationary
            converged = True
            outer -= 1
            break
        S, f, res = S_new, f_new, res_new
        history.append(f)
        if step * np.linalg.norm(P) < params.outer_tol:
            converged = True
            break

    warp = fix_aspect_ratio(AffineWarp(np.linalg.inv(S), np.zeros(2)))
    S = np.linalg.inv(warp.linear)
    D, valid = ww.normalized(S)
    res = rpca_alm(D, lam, params)
    objective = relaxed_objective(res.low_rank, res.sparse, lam)
    return TiltSolution(warp, res.low_rank, res.sparse, max(outer, 0), converged and res.converged,
                        objective, history, bool(valid.all()))
