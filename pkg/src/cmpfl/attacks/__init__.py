"""Attacker side: baselines and the covert model poisoning family."""

from .baselines import attack_gaussian, attack_label_flip
from .context import (
    TARGETED,
    UNTARGETED,
    AttackContext,
    AttackResult,
    CmpHyper,
    KnowledgeLevel,
    ascent_target,
    attacker_objective,
)
from .krum import cmp_krum_original
from .mean import AS_PRINTED, DERIVATION_CONSISTENT, cmp_mean_full, cmp_mean_partial
from .nkb import NkbState, cmp_nkb_round
from .simplified import (
    KktError,
    KktInfeasibleError,
    KktState,
    SimplifiedConstraint,
    cmp_krum_simplified,
    compute_E,
    select_alpha,
    solve_p1_kkt,
    stronger_constraint,
    sphere_init,
)

__all__ = [
    "AS_PRINTED",
    "DERIVATION_CONSISTENT",
    "TARGETED",
    "UNTARGETED",
    "AttackContext",
    "AttackResult",
    "CmpHyper",
    "KktError",
    "KktInfeasibleError",
    "KktState",
    "KnowledgeLevel",
    "NkbState",
    "SimplifiedConstraint",
    "ascent_target",
    "attack_gaussian",
    "attack_label_flip",
    "attacker_objective",
    "cmp_krum_original",
    "cmp_krum_simplified",
    "cmp_mean_full",
    "cmp_mean_partial",
    "cmp_nkb_round",
    "compute_E",
    "select_alpha",
    "solve_p1_kkt",
    "stronger_constraint",
    "sphere_init",
]
