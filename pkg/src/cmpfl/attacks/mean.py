"""Closed-form attacks on weighted-mean aggregation."""

from __future__ import annotations

import numpy as np

from ..aggregation import ClientUpdate
from ..numkit import project_box
from .context import AttackContext, AttackResult, KnowledgeLevel

AS_PRINTED = "as-printed"
DERIVATION_CONSISTENT = "derivation-consistent"


def _target(ctx: AttackContext) -> np.ndarray:
    if ctx.target is None:
        raise ValueError("mean attacks need a target model")
    return np.asarray(ctx.target, dtype=np.float64)


def _place(ctx: AttackContext, crafted: np.ndarray) -> tuple[list[ClientUpdate], bool]:
    projected = project_box(crafted, ctx.domain)
    feasible = bool(np.array_equal(projected, crafted))
    ups = [ClientUpdate(cid, projected.copy(), ctx.weight(cid)) for cid in ctx.compromised_ids]
    return ups, feasible


def cmp_mean_full(ctx: AttackContext) -> AttackResult:
    """Every compromised client uploads ``(target - sum_B p_i theta_i) / s``.

    With ``s`` the compromised weight this puts the mean exactly on the
    target. If the box clips the crafted model the result is flagged
    infeasible and the aggregate will miss the target.
    """
    if ctx.level is not KnowledgeLevel.FULL:
        raise ValueError("cmp_mean_full needs full knowledge")
    target = _target(ctx)
    s = sum(ctx.weight(cid) for cid in ctx.compromised_ids)
    if s <= 0:
        raise ValueError("compromised clients carry no aggregation weight")
    benign = np.zeros_like(target)
    for u in ctx.benign_updates():
        benign = benign + u.weight * u.params
    ups, feasible = _place(ctx, (target - benign) / s)
    return AttackResult(ups, feasible=feasible)


def cmp_mean_partial(ctx: AttackContext, variant: str = DERIVATION_CONSISTENT) -> AttackResult:
    """Mean attack when benign models are unseen.

    The benign contribution is estimated from the compromised honest models
    scaled by ``(1 - s) / s``. ``variant`` picks the coefficient on
    ``sum_M p_i theta_i``: ``(2/s - 1)`` (as printed in the closed form) or
    ``(1 - 1/s)`` (what the estimate actually implies). The returned
    ``predicted_fa`` is ``coef**2 * ||sum_M p_i theta_i||**2``.
    """
    if ctx.level is KnowledgeLevel.NONE:
        raise ValueError("cmp_mean_partial needs the compromised clients' honest models")
    target = _target(ctx)
    honest = ctx.compromised_updates()
    s = sum(ctx.weight(u.client_id) for u in honest)
    if s <= 0:
        raise ValueError("compromised clients carry no aggregation weight")
    weighted = np.zeros_like(target)
    for u in honest:
        weighted = weighted + ctx.weight(u.client_id) * u.params
    if variant == AS_PRINTED:
        coef = 2.0 / s - 1.0
    elif variant == DERIVATION_CONSISTENT:
        coef = 1.0 - 1.0 / s
    else:
        raise ValueError(f"unknown variant {variant!r}")
    ups, feasible = _place(ctx, (target + coef * weighted) / s)
    predicted = coef * coef * float(weighted @ weighted)
    return AttackResult(ups, predicted_fa=predicted, feasible=feasible)
