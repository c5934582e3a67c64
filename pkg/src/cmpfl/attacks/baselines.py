"""Reference attacks: Gaussian noise on honest models, and label flipping."""

from __future__ import annotations

import numpy as np

from ..aggregation import ClientUpdate
from ..datakit import LabelMap, flip_labels
from ..models import ModelSpec, TrainParams, local_train
from ..numkit import project_box, substream
from .context import AttackContext, AttackResult


def attack_gaussian(ctx: AttackContext, sigma: float, rng: np.random.Generator) -> AttackResult:
    """Each compromised client uploads its honest model plus N(0, sigma^2) noise."""
    out = []
    for u in ctx.compromised_updates():
        noisy = u.params + rng.normal(0.0, sigma, size=u.params.shape) if sigma > 0 else u.params.copy()
        out.append(ClientUpdate(u.client_id, project_box(noisy, ctx.domain), ctx.weight(u.client_id)))
    return AttackResult(out)


def attack_label_flip(
    ctx: AttackContext, label_map: LabelMap, spec: ModelSpec, train: TrainParams
) -> AttackResult:
    """Compromised clients train honestly, from the broadcast model, on relabelled data.

    Each client uses the same random stream as its honest training would
    (``substream(ctx.round_seed, client_id)``), so the identity map reproduces
    the honest upload exactly.
    """
    out = []
    for cid in ctx.compromised_ids:
        data = flip_labels(ctx.visible_datasets[cid], label_map)
        params = local_train(spec, ctx.global_model, data, train, substream(ctx.round_seed, cid), ctx.domain)
        out.append(ClientUpdate(cid, params, ctx.weight(cid)))
    return AttackResult(out)
