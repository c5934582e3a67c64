"""Iterative covert poisoning against Krum (projected descent with a Krum check)."""

from __future__ import annotations

import numpy as np

from ..models import ModelSpec
from ..numkit import project_box
from .context import (
    AttackContext,
    AttackResult,
    CmpHyper,
    KnowledgeLevel,
    attacker_objective,
    collude,
    estimated_benign,
    krum_selects,
)


def cmp_krum_original(
    ctx: AttackContext, hyper: CmpHyper, spec: ModelSpec | None, rng: np.random.Generator
) -> AttackResult:
    """Walk the crafted model from the broadcast model down the attacker's
    objective while Krum keeps selecting it.

    Each iteration takes a projected gradient step, surrounds the candidate
    with ``M - 1`` copies at distance ``eps`` and runs Krum over the copies
    plus the benign models the attacker plans against. A rejected step is
    undone and the step size decays by ``lam``. The loop ends when the step
    size drops below ``varsigma``, after ``max_iter`` iterations, or when an
    accepted step no longer moves the model.
    """
    if ctx.level is KnowledgeLevel.NONE:
        raise ValueError("cmp_krum_original needs full or partial knowledge")
    m = ctx.krum_m()
    benign_ids, benign_pts = estimated_benign(ctx)

    theta = project_box(np.array(ctx.global_model, dtype=np.float64), ctx.domain)
    eta = hyper.eta0
    accepted = None
    k = 0
    while eta >= hyper.varsigma and k < hyper.max_iter:
        _, grad = attacker_objective(theta, ctx, spec)
        cand = project_box(theta - eta * grad, ctx.domain)
        crafted = collude(cand, ctx, hyper.sigma, hyper.eps, rng)
        k += 1
        if krum_selects(crafted, benign_ids, benign_pts, m):
            moved = not np.array_equal(cand, theta)
            theta, accepted = cand, crafted
            if not moved:
                break
        else:
            eta *= hyper.lam

    if accepted is not None:
        return AttackResult(accepted, success=True, iterations=k)
    crafted = collude(theta, ctx, hyper.sigma, hyper.eps, rng)
    return AttackResult(crafted, success=krum_selects(crafted, benign_ids, benign_pts, m), iterations=k)
