"""Low-complexity poisoning against Krum.

Krum's selection test is replaced by a single distance budget: the crafted
model must stay within ``E - (M-1) eps`` summed distance of a chosen subset
of ``U - 2M - 1`` benign models, where ``E`` is the best benign Krum score.
For a fixed subset this is a convex problem (closest point to the target
inside a sum-of-distances ball) solved through its KKT conditions; the subset
itself is picked greedily, exhaustively or by random restarts.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np
from scipy.linalg.lapack import dgesv
from scipy.optimize import brentq

from ..models import ModelSpec
from ..numkit import pairwise_distances, project_box
from .context import (
    AttackContext,
    AttackResult,
    CmpHyper,
    KnowledgeLevel,
    collude,
    estimated_benign,
    krum_selects,
    resolve_target,
)

EXHAUSTIVE_LIMIT = 12


class KktError(RuntimeError):
    """The KKT system could not be solved; carries the best residuals seen."""

    def __init__(self, message: str, stationarity: float = math.inf, constraint: float = math.inf):
        self.stationarity = stationarity
        self.constraint = constraint
        super().__init__(f"{message} (stationarity={stationarity:.3g}, constraint={constraint:.3g})")


class KktInfeasibleError(KktError):
    """The distance budget is smaller than its minimum over all models."""


@dataclass
class KktState:
    multiplier: float
    iterate: np.ndarray
    stationarity: float
    constraint: float

    def objective(self, target: np.ndarray) -> float:
        d = self.iterate - target
        return float(d @ d)


@dataclass
class SimplifiedConstraint:
    alpha: np.ndarray  # bool mask over the benign models
    E: float
    eps: float
    Xi: np.ndarray
    Lambda: float
    M: int
    U: int
    solution: KktState | None = None
    fa: float = math.inf


def _as_points(benign) -> np.ndarray:
    if isinstance(benign, np.ndarray) and benign.ndim == 2:
        return benign.astype(np.float64, copy=False)
    pts = np.asarray([getattr(b, "params", b) for b in benign], dtype=np.float64)
    return pts.reshape(len(pts), -1)


def compute_E(benign, M: int, U: int | None = None) -> float:
    """Smallest benign Krum score computed among benign models only.

    Each benign model is scored by its summed distance to the ``U - M - 2``
    nearest other benign models (``U`` defaults to ``B + M``).
    """
    pts = _as_points(benign)
    B = pts.shape[0]
    U = B + M if U is None else U
    k = U - M - 2
    if k < 1 or k > B - 1:
        raise ValueError(f"need 1 <= U - M - 2 <= B - 1 (U={U}, M={M}, B={B})")
    dist = pairwise_distances(pts)
    np.fill_diagonal(dist, np.inf)
    return float(np.cumsum(np.sort(dist, axis=1)[:, :k], axis=1)[:, -1].min())


def sphere_init(benign, target, M: int, U: int, eps: float, E: float) -> np.ndarray:
    """Starting point on the sphere where the squared-distance bound is tight.

    The bound ``sum_j ||theta_j - x||^2 / 2 + (U-2M-2)/2 + (M-1) eps - E <= 0``
    is a ball around the benign centroid ``c``; this returns the point of its
    boundary sphere in the direction of ``target``. Falls back to ``c`` when
    the ball is empty or the target sits on the centroid.
    """
    pts = _as_points(benign)
    B = pts.shape[0]
    if B < 1:
        raise ValueError("need at least one benign model")
    target = np.asarray(target, dtype=np.float64)
    xi = pts.sum(axis=0)
    centre = xi / B
    lam = (U - 2 * M - 2 + 2 * (M - 1) * eps - 2 * E) / B
    r2 = float(xi @ xi) / B**2 - float(np.einsum("ij,ij->", pts, pts)) / B - lam
    offset = target - centre
    dist = float(np.linalg.norm(offset))
    if r2 < 0 or dist == 0.0:
        return centre
    return centre + offset * (math.sqrt(r2) / dist)


def stronger_constraint(benign, x, M: int, U: int, eps: float, E: float) -> float:
    """Left-hand side of the squared-distance bound used by ``sphere_init``."""
    pts = _as_points(benign)
    diff = pts - np.asarray(x, dtype=np.float64)
    return float(np.einsum("ij,ij->", diff, diff)) / 2 + (U - 2 * M - 2) / 2 + (M - 1) * eps - E


def _kkt_residuals(x, target, sel, lam, budget):
    diff = x - sel
    r = np.linalg.norm(diff, axis=1)
    r_safe = np.where(r > 0, r, np.inf)
    stat = 2 * (x - target) + lam * (diff / r_safe[:, None]).sum(axis=0)
    return float(np.linalg.norm(stat)), float(r.sum() - budget)


def _kink_minimiser(sel, lam):
    """The selected model that minimises ``||x||^2 + lam * sum_j ||x - s_j||``, if any.

    The objective is strongly convex, so ``s_j`` is its minimiser exactly when
    the smooth part's gradient there lies in the ``lam``-ball, the
    subdifferential of ``lam * ||x - s_j||`` at ``s_j``.
    """
    diff = sel[:, None, :] - sel[None, :, :]
    r = np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))
    with np.errstate(invalid="ignore", divide="ignore"):
        unit = np.where(r[:, :, None] > 0, diff / r[:, :, None], 0.0)
    pull = 2 * sel + lam * unit.sum(axis=1)
    ok = np.einsum("ij,ij->i", pull, pull) <= lam * lam
    return sel[int(np.argmax(ok))].copy() if ok.any() else None


def _inner_solve(x, sel, lam, tol, max_iter=100):
    """Minimise ``||x||^2 + lam * sum_j ||x - s_j||`` by damped Newton."""

    def phi(z):
        return float(z @ z) + lam * float(np.linalg.norm(z - sel, axis=1).sum())

    # Newton cannot converge onto a kink, so settle that case exactly first
    kink = _kink_minimiser(sel, lam)
    if kink is not None:
        return kink
    k = x.shape[0]
    eye = np.eye(k)
    # near a selected model (the objective's kink) lam / r blows up and the
    # Hessian's 2I part is lost to cancellation; the floor caps lam / r at
    # 1e8 so the Newton model stays positive definite, and the line search
    # on the true objective still guards each step
    floor = max(1e-12 * max(1.0, float(np.abs(sel).max())), lam * 1e-8)
    f = phi(x)
    for _ in range(max_iter):
        diff = x - sel
        r = np.maximum(np.linalg.norm(diff, axis=1), floor)
        u = diff / r[:, None]
        grad = 2 * x + lam * u.sum(axis=0)
        if np.linalg.norm(grad) <= tol:
            break
        w = lam / r
        hess = (2 + w.sum()) * eye - (u * w[:, None]).T @ u
        step = np.linalg.solve(hess, grad)
        t = 1.0
        slope = float(grad @ step)
        while True:
            x_new = x - t * step
            f_new = phi(x_new)
            if f_new <= f - 1e-4 * t * slope:
                break
            t *= 0.5
            if t < 1e-10:
                # no further decrease representable in floating point
                return x
        x, f = x_new, f_new
    return x


def _span_basis(rows: np.ndarray) -> np.ndarray | None:
    """Orthonormal basis (as columns) of the row span, or None if the rows are all zero."""
    gram = rows @ rows.T
    w, v = np.linalg.eigh(gram)
    if w[-1] > 0 and w[0] > w[-1] * 1e-8:
        # well conditioned: the small Gram eigenproblem is much cheaper than an SVD
        return (rows.T @ v) / np.sqrt(w)
    _, sv, vt = np.linalg.svd(rows, full_matrices=False)
    if sv[0] == 0.0:
        return None
    return vt[sv > sv[0] * 1e-12].T


def _joint_newton(x, sel, budget, tol, max_iter=50):
    """Newton on the full KKT system in ``(x, lam)`` with a merit line search.

    Returns ``(lam, x)`` on convergence with ``lam > 0``, otherwise ``None``
    so the caller can fall back to the bracketed multiplier search.
    """

    k = x.shape[0]
    res = np.empty(k + 1)

    # small dense system solved many times; plain einsum keeps overhead low
    def system(z, lam):
        diff = z - sel
        r = np.sqrt(np.einsum("ij,ij->i", diff, diff))
        if not r.all():
            return None
        u = diff / r[:, None]
        g = u.sum(axis=0)
        out = res.copy()
        out[:k] = 2 * z + lam * g
        out[k] = r.sum() - budget
        return out, u, r, g, math.sqrt(float(out @ out))

    out = system(x, 0.0)
    if out is None:
        return None
    g = out[3]
    # stationarity gives 2 ||x|| = lam ||sum_j u_j|| at the solution
    lam = max(2.0 * math.sqrt(float(x @ x)) / math.sqrt(float(g @ g)), 1e-3)
    out = system(x, lam)
    jac = np.zeros((k + 1, k + 1))
    diag = np.diag_indices(k)
    for _ in range(max_iter):
        if out is None:
            return None
        vec, u, r, g, norm = out
        if norm <= tol:
            return (lam, x) if lam > 0 else None
        w = lam / r
        jac[:k, :k] = -(u * w[:, None]).T @ u
        jac[diag] += 2 + w.sum()
        jac[:k, k] = g
        jac[k, :k] = g
        _, _, step, info = dgesv(jac, vec)
        if info != 0:
            return None
        t = 1.0
        while t >= 1e-8:
            z_new, lam_new = x - t * step[:k], lam - t * step[k]
            cand = system(z_new, lam_new) if lam_new > 0 else None
            if cand is not None and cand[4] <= (1 - 1e-4 * t) * norm:
                break
            t *= 0.5
        else:
            return None
        x, lam, out = z_new, lam_new, cand
    return None


def solve_p1_kkt(
    alpha,
    benign,
    target,
    M: int,
    eps: float,
    E: float,
    init=None,
    tol: float = 1e-6,
    max_iter: int = 200,
) -> KktState:
    """Closest point to ``target`` whose summed distance to the selected benign
    models is at most ``E - (M-1) eps``.

    Solves stationarity ``2(x - target) + lam * sum_j (x - s_j)/||x - s_j|| = 0``
    with the budget active. A joint Newton solve on ``(x, lam)`` is tried
    first; if it stalls, Brent's bracketed search on ``lam`` takes over with
    a damped Newton inner solve for ``x``. The stationarity condition puts
    ``x`` in ``target + span{s_j - target}``, so the inner solve runs in that
    subspace of dimension at most ``sum(alpha)``. If the target already meets
    the budget it is returned with ``lam = 0``.
    """
    pts = _as_points(benign)
    target = np.asarray(target, dtype=np.float64)
    mask = np.asarray(alpha, dtype=bool)
    sel = pts[mask]
    if sel.shape[0] == 0:
        raise ValueError("alpha selects no benign model")
    budget = E - (M - 1) * eps

    g_target = float(np.linalg.norm(sel - target, axis=1).sum()) - budget
    if g_target <= 0:
        return KktState(0.0, target.copy(), 0.0, 0.0)

    basis = _span_basis(sel - target)
    if basis is None:
        raise KktInfeasibleError("all selected models sit on the target and the budget is negative", 0.0, g_target)
    s_red = (sel - target) @ basis
    start = np.zeros(basis.shape[1]) if init is None else (np.asarray(init, dtype=np.float64) - target) @ basis
    inner_tol = tol * 1e-3
    quick = _joint_newton(start, s_red, budget, inner_tol)
    if quick is not None:
        lam, z = quick
        x = target + basis @ z
        stat, cons = _kkt_residuals(x, target, sel, lam, budget)
        if stat <= tol and abs(cons) <= tol:
            return KktState(lam, x, stat, abs(cons))
    state = {"x": start}

    def x_of(lam):
        state["x"] = _inner_solve(state["x"], s_red, lam, inner_tol)
        return state["x"]

    def g_of(lam):
        return float(np.linalg.norm(x_of(lam) - s_red, axis=1).sum()) - budget

    hi = 1.0
    while g_of(hi) > 0:
        hi *= 4.0
        if hi > 1e12:
            x = target + basis @ state["x"]
            stat, cons = _kkt_residuals(x, target, sel, hi, budget)
            raise KktInfeasibleError("distance budget cannot be met by any model", stat, abs(cons))
    lo = hi / 4.0 if hi > 1.0 else 0.0
    lam = brentq(g_of, lo, hi, xtol=1e-15, rtol=4 * np.finfo(float).eps, maxiter=max_iter)
    x = target + basis @ x_of(lam)
    stat, cons = _kkt_residuals(x, target, sel, lam, budget)
    if stat > tol or abs(cons) > tol:
        raise KktError("KKT residuals above tolerance", stat, abs(cons))
    return KktState(float(lam), x, stat, abs(cons))


def _greedy_alpha(pts: np.ndarray, target: np.ndarray, size: int) -> np.ndarray:
    order = np.argsort(np.linalg.norm(pts - target, axis=1), kind="stable")
    mask = np.zeros(pts.shape[0], dtype=bool)
    mask[order[:size]] = True
    return mask


def select_alpha(
    benign,
    target,
    M: int,
    U: int,
    eps: float,
    E: float | None = None,
    method: str = "greedy",
    restarts: int = 8,
    rng: np.random.Generator | None = None,
    tol: float = 1e-6,
    init=None,
) -> SimplifiedConstraint:
    """Choose the ``U - 2M - 1`` benign models the crafted model must stay near.

    ``greedy`` takes those nearest the target. ``exhaustive`` solves the KKT
    problem for every subset (``B <= 12`` only) and keeps the lowest objective.
    ``restarts`` compares the greedy subset against ``restarts`` random ones.
    """
    pts = _as_points(benign)
    target = np.asarray(target, dtype=np.float64)
    B = pts.shape[0]
    size = U - 2 * M - 1
    if size < 1 or size > B:
        raise ValueError(f"need 1 <= U - 2M - 1 <= B (U={U}, M={M}, B={B})")
    if E is None:
        E = compute_E(pts, M, U)
    xi = pts.sum(axis=0)
    lam_const = (U - 2 * M - 2 + 2 * (M - 1) * eps - 2 * E) / B

    def evaluate(mask):
        try:
            sol = solve_p1_kkt(mask, pts, target, M, eps, E, init, tol)
        except KktError:
            return None, math.inf
        return sol, sol.objective(target)

    if method == "greedy" or size == B:
        candidates = [_greedy_alpha(pts, target, size)]
    elif method == "exhaustive":
        if B > EXHAUSTIVE_LIMIT:
            raise ValueError(f"exhaustive selection is limited to B <= {EXHAUSTIVE_LIMIT}")
        candidates = []
        for combo in itertools.combinations(range(B), size):
            mask = np.zeros(B, dtype=bool)
            mask[list(combo)] = True
            candidates.append(mask)
    elif method == "restarts":
        rng = rng if rng is not None else np.random.default_rng(0)
        candidates = [_greedy_alpha(pts, target, size)]
        for _ in range(restarts):
            mask = np.zeros(B, dtype=bool)
            mask[rng.choice(B, size=size, replace=False)] = True
            candidates.append(mask)
    else:
        raise ValueError(f"unknown method {method!r}")

    best = SimplifiedConstraint(candidates[0], E, eps, xi, lam_const, M, U)
    for mask in candidates:
        sol, fa = evaluate(mask)
        if fa < best.fa:
            best = SimplifiedConstraint(mask, E, eps, xi, lam_const, M, U, sol, fa)
    return best


def cmp_krum_simplified(
    ctx: AttackContext, hyper: CmpHyper, spec: ModelSpec | None, rng: np.random.Generator
) -> AttackResult:
    """One-shot crafted model from the relaxed problem, then a single Krum check.

    Pipeline: ``E`` from the benign models, subset selection, sphere
    initialiser, KKT solve, box projection, ``eps`` collusion copies. When the
    budget is infeasible the initialiser itself is uploaded. If Krum rejects
    the result, the step from the broadcast model to it is shrunk by ``lam``
    up to ``restore_steps`` times until Krum accepts; ``iterations`` counts
    the Krum checks made.
    """
    if ctx.level is KnowledgeLevel.NONE:
        raise ValueError("cmp_krum_simplified needs full or partial knowledge")
    m = ctx.krum_m()
    target = resolve_target(ctx, spec, hyper)
    benign_ids, benign_pts = estimated_benign(ctx)
    M, U = ctx.M, ctx.num_clients

    E = compute_E(benign_pts, M, U)
    init = sphere_init(benign_pts, target, M, U, hyper.eps, E)
    choice = select_alpha(
        benign_pts, target, M, U, hyper.eps, E, hyper.alpha_method, hyper.restarts, rng, hyper.kkt_tol, init
    )
    feasible = choice.solution is not None
    theta = choice.solution.iterate if feasible else init
    theta = project_box(theta, ctx.domain)
    crafted = collude(theta, ctx, hyper.sigma, hyper.eps, rng)
    ok = krum_selects(crafted, benign_ids, benign_pts, m)
    checks = 1
    if not ok and hyper.restore_steps:
        # the benign-only score bound is optimistic once the crafted copies
        # join the round; shorten the step from the broadcast model the way
        # the iterative attack does until Krum accepts
        anchor = project_box(np.asarray(ctx.global_model, dtype=np.float64), ctx.domain)
        frac = 1.0
        for _ in range(hyper.restore_steps):
            frac *= hyper.lam
            if frac < hyper.varsigma:
                break
            cand = collude(anchor + frac * (theta - anchor), ctx, hyper.sigma, hyper.eps, rng)
            checks += 1
            if krum_selects(cand, benign_ids, benign_pts, m):
                crafted, ok = cand, True
                break
    return AttackResult(crafted, success=ok, iterations=checks, feasible=feasible)
