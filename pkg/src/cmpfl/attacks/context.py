"""What the attacker sees, its tuning knobs, and helpers shared by all attacks."""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from ..aggregation import AggregationRule, ClientUpdate, krum_scores
from ..models import Dataset, ModelSpec, loss, loss_gradient
from ..numkit import BoxDomain, clipped_gaussian_direction, project_box


class KnowledgeLevel(str, enum.Enum):
    FULL = "full"
    PARTIAL = "partial"
    NONE = "none"


TARGETED = "targeted"
UNTARGETED = "untargeted"


@dataclass
class AttackContext:
    """One round's view for the attacker.

    ``visible_updates`` are honest local models: every client's under full
    knowledge, only the compromised clients' otherwise. ``visible_datasets``
    maps client id to local data on the same footing.
    """

    level: KnowledgeLevel
    compromised_ids: tuple[int, ...]
    global_model: np.ndarray
    num_clients: int
    visible_updates: list[ClientUpdate] = field(default_factory=list)
    visible_datasets: dict[int, Dataset] = field(default_factory=dict)
    weights: dict[int, float] = field(default_factory=dict)
    target: np.ndarray | None = None
    objective: str = TARGETED
    aggregation_known: AggregationRule | None = None
    domain: BoxDomain = field(default_factory=BoxDomain)
    round_seed: int = 0

    def __post_init__(self):
        self.level = KnowledgeLevel(self.level)
        self.compromised_ids = tuple(sorted(int(i) for i in self.compromised_ids))
        if not self.compromised_ids:
            raise ValueError("an attack needs at least one compromised client")
        if len(set(self.compromised_ids)) != len(self.compromised_ids):
            raise ValueError("duplicate compromised ids")
        if not all(0 <= i < self.num_clients for i in self.compromised_ids):
            raise ValueError("compromised ids must be client ids in [0, U)")
        if self.objective not in (TARGETED, UNTARGETED):
            raise ValueError(f"objective must be {TARGETED!r} or {UNTARGETED!r}")
        seen = {u.client_id for u in self.visible_updates}
        if self.level is not KnowledgeLevel.FULL and seen - set(self.compromised_ids):
            raise ValueError(f"{self.level.value} knowledge cannot see benign updates")
        if self.level is KnowledgeLevel.PARTIAL and seen != set(self.compromised_ids):
            raise ValueError("partial knowledge sees exactly the compromised clients' models")
        if self.level is KnowledgeLevel.NONE and self.aggregation_known is not None:
            raise ValueError("no-knowledge attacker cannot know the aggregation rule")

    @property
    def M(self) -> int:
        return len(self.compromised_ids)

    @property
    def benign_ids(self) -> tuple[int, ...]:
        bad = set(self.compromised_ids)
        return tuple(i for i in range(self.num_clients) if i not in bad)

    def update_of(self, cid: int) -> ClientUpdate:
        for u in self.visible_updates:
            if u.client_id == cid:
                return u
        raise KeyError(f"client {cid} not visible to the attacker")

    def compromised_updates(self) -> list[ClientUpdate]:
        return [self.update_of(i) for i in self.compromised_ids]

    def benign_updates(self) -> list[ClientUpdate]:
        bad = set(self.compromised_ids)
        return sorted((u for u in self.visible_updates if u.client_id not in bad), key=lambda u: u.client_id)

    def attack_data(self) -> Dataset:
        return Dataset.concat([self.visible_datasets[i] for i in sorted(self.visible_datasets)])

    def weight(self, cid: int) -> float:
        if cid in self.weights:
            return self.weights[cid]
        return self.update_of(cid).weight

    def krum_m(self) -> int:
        rule = self.aggregation_known
        if rule is None or rule.name != "krum":
            raise ValueError("this attack needs the server to be known to run Krum")
        return self.M if rule.m is None else rule.m


@dataclass(frozen=True)
class CmpHyper:
    eta0: float = 1.0
    lam: float = 0.5  # step decay on rejection, in (0, 1)
    sigma: float = 1.0  # std of the collusion noise before clipping
    eps: float = 1e-3  # collusion radius
    varsigma: float = 1e-4  # stop once the step size falls below this
    max_iter: int = 200
    alpha_method: str = "greedy"
    restarts: int = 8
    kkt_tol: float = 1e-6
    # step shrinks toward the broadcast model allowed when Krum rejects the
    # one-shot solution; 0 keeps the one-shot answer as is
    restore_steps: int = 10
    # gradient ascent used to place a target when the objective is untargeted
    ascent_lr: float = 1.0
    ascent_steps: int = 20

    def __post_init__(self):
        if min(self.eta0, self.sigma, self.eps, self.varsigma) <= 0:
            raise ValueError("eta0, sigma, eps and varsigma must be positive")
        if not 0 < self.lam < 1:
            raise ValueError("lam must lie strictly between 0 and 1")
        if self.max_iter < 1:
            raise ValueError("max_iter must be >= 1")
        if self.restore_steps < 0:
            raise ValueError("restore_steps must be >= 0")
        if self.alpha_method not in ("greedy", "exhaustive", "restarts"):
            raise ValueError(f"unknown alpha_method {self.alpha_method!r}")


@dataclass
class AttackResult:
    updates: list[ClientUpdate]
    success: bool | None = None
    iterations: int | None = None
    predicted_fa: float | None = None
    feasible: bool = True

    @property
    def crafted(self) -> np.ndarray:
        return self.updates[0].params


def attacker_objective(params, ctx: AttackContext, spec: ModelSpec | None = None) -> tuple[float, np.ndarray]:
    """Value and gradient of the attacker's loss at ``params``.

    Targeted: squared distance to ``ctx.target``. Untargeted: the negated
    benign loss over every dataset the attacker can see.
    """
    params = np.asarray(params, dtype=np.float64)
    if ctx.objective == TARGETED:
        if ctx.target is None:
            raise ValueError("targeted objective needs a target model")
        diff = params - ctx.target
        return float(diff @ diff), 2.0 * diff
    if spec is None:
        raise ValueError("untargeted objective needs the model spec")
    data = ctx.attack_data()
    return -loss(spec, params, data), -loss_gradient(spec, params, data)


def ascent_target(ctx: AttackContext, spec: ModelSpec, hyper: CmpHyper) -> np.ndarray:
    """Stand-in target for untargeted attacks: projected gradient ascent on the
    benign loss from the broadcast model."""
    data = ctx.attack_data()
    theta = np.array(ctx.global_model, dtype=np.float64)
    for _ in range(hyper.ascent_steps):
        theta = project_box(theta + hyper.ascent_lr * loss_gradient(spec, theta, data), ctx.domain)
    return theta


def resolve_target(ctx: AttackContext, spec: ModelSpec | None, hyper: CmpHyper) -> np.ndarray:
    if ctx.objective == TARGETED:
        if ctx.target is None:
            raise ValueError("targeted objective needs a target model")
        return np.asarray(ctx.target, dtype=np.float64)
    if spec is None:
        raise ValueError("untargeted objective needs the model spec")
    return ascent_target(ctx, spec, hyper)


def collude(theta1: np.ndarray, ctx: AttackContext, sigma: float, eps: float, rng) -> list[ClientUpdate]:
    """Crafted model on the first compromised client, eps-radius noisy copies on the rest."""
    ids = ctx.compromised_ids
    out = [ClientUpdate(ids[0], np.array(theta1, dtype=np.float64), ctx.weight(ids[0]))]
    for cid in ids[1:]:
        noise = clipped_gaussian_direction(theta1.shape[0], sigma, eps, rng)
        out.append(ClientUpdate(cid, theta1 + noise, ctx.weight(cid)))
    return out


def estimated_benign(ctx: AttackContext) -> tuple[list[int], np.ndarray]:
    """Benign ids and models the attacker plans against.

    Full knowledge returns the real benign uploads. Otherwise the compromised
    clients' honest models are tiled cyclically over the benign ids as
    stand-ins for the unseen ones.
    """
    ids = list(ctx.benign_ids)
    if ctx.level is KnowledgeLevel.FULL:
        ups = ctx.benign_updates()
        return [u.client_id for u in ups], np.stack([u.params for u in ups]) if ups else np.empty((0, ctx.global_model.size))
    honest = np.stack([u.params for u in ctx.compromised_updates()])
    reps = np.resize(np.arange(honest.shape[0]), len(ids))
    return ids, honest[reps]


def krum_selects(crafted: list[ClientUpdate], benign_ids, benign_points: np.ndarray, m: int) -> bool:
    """Whether Krum over crafted + benign picks the first crafted update."""
    ids = np.array([u.client_id for u in crafted] + list(benign_ids))
    points = np.vstack([np.stack([u.params for u in crafted]), benign_points]) if len(benign_ids) else np.stack(
        [u.params for u in crafted]
    )
    scores = krum_scores(points, m)
    winner = ids[scores == scores.min()].min()
    return int(winner) == crafted[0].client_id
