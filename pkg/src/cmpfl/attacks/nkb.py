"""Blind poisoning: the attacker does not know the aggregation rule and adapts
its step size from whether the last crafted model showed up in the broadcast."""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from ..datakit import LabelMap, flip_labels
from ..models import ModelSpec, loss_gradient
from ..numkit import project_box
from .context import AttackContext, AttackResult, collude


@dataclass(frozen=True)
class NkbState:
    eta: float = 1.0
    lambda_nkb: float = 2.0  # growth factor, > 1
    xi: float = 1e-2  # acceptance radius
    prev: np.ndarray | None = None
    eta_min: float = 1e-6
    eta_max: float = 1e2

    def __post_init__(self):
        if self.lambda_nkb <= 1:
            raise ValueError("lambda_nkb must exceed 1")
        if self.xi <= 0 or not 0 < self.eta_min <= self.eta_max:
            raise ValueError("need xi > 0 and 0 < eta_min <= eta_max")


def cmp_nkb_round(
    state: NkbState,
    global_model,
    ctx: AttackContext,
    spec: ModelSpec,
    label_map: LabelMap,
    sigma: float,
    eps: float,
    rng: np.random.Generator,
) -> tuple[AttackResult, NkbState]:
    """One round of the blind attack.

    The previous crafted model counts as accepted when the new broadcast lies
    within ``xi`` of it; the step size then grows by ``lambda_nkb``, otherwise
    it shrinks by the same factor (the first round counts as rejected). The
    crafted model is one projected gradient step on the label-flipped loss
    from the broadcast model, taken with the updated step size.
    """
    global_model = np.asarray(global_model, dtype=np.float64)
    accepted = state.prev is not None and float(np.linalg.norm(state.prev - global_model)) <= state.xi
    eta = state.eta * state.lambda_nkb if accepted else state.eta / state.lambda_nkb
    eta = min(max(eta, state.eta_min), state.eta_max)

    flipped = flip_labels(ctx.attack_data(), label_map)
    theta = project_box(global_model - eta * loss_gradient(spec, global_model, flipped), ctx.domain)
    crafted = collude(theta, ctx, sigma, eps, rng)
    return AttackResult(crafted, success=accepted, iterations=1), replace(state, eta=eta, prev=theta)
