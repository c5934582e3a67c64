"""Round loop: broadcast, local training, attack, aggregation, metrics.

One trial builds its data, partition and initial model from a seed derived
from ``(config.seed, trial)``. Every random draw after that comes from a
stream keyed by ``(trial, round, client)``, so a trial is reproducible in
isolation and trials can run in any order.
"""

from __future__ import annotations

import dataclasses
import math
import time
from dataclasses import dataclass, field

import numpy as np

from .aggregation import AggregationRule, ClientUpdate, aggregate
from .attacks import (
    DERIVATION_CONSISTENT,
    TARGETED,
    UNTARGETED,
    AttackContext,
    AttackResult,
    CmpHyper,
    KnowledgeLevel,
    NkbState,
    ascent_target,
    attack_gaussian,
    attack_label_flip,
    cmp_krum_original,
    cmp_krum_simplified,
    cmp_mean_full,
    cmp_mean_partial,
    cmp_nkb_round,
)
from .datakit import (
    LabelMap,
    flip_labels,
    gen_classification,
    gen_regression,
    load_csv,
    load_idx,
    cyclic_target_map,
    parity_labels,
    partition_noniid,
    regression_strata,
    split,
)
from .models import Dataset, ModelSpec, TrainParams, init_params, local_train, loss, predict
from .numkit import BoxDomain, derive_seed, substream

ATTACKS = (
    "none",
    "gaussian",
    "label-flip",
    "cmp-mean",
    "cmp-krum-original",
    "cmp-krum-simplified",
    "cmp-nkb",
)
DATA_SOURCES = ("synthetic", "idx", "csv")

# stream keys past any client id
_ATTACK_KEY = 1 << 20
_TARGET_KEY = (1 << 20) + 1
_INIT_KEY = (1 << 20) + 2


@dataclass(frozen=True)
class DataConfig:
    source: str = "synthetic"
    n_train: int = 2000
    n_test: int = 500
    input_dim: int = 10
    num_classes: int = 3
    separation: float = 3.0
    noise: float = 0.1  # regression target noise
    strata: int = 2  # quantile bins used to skew regression data
    images: str | None = None
    labels: str | None = None
    test_images: str | None = None
    test_labels: str | None = None
    path: str | None = None
    target: int | str = -1

    def __post_init__(self):
        if self.source not in DATA_SOURCES:
            raise ValueError(f"data.source must be one of {DATA_SOURCES}")
        if self.n_train < 1 or self.n_test < 1:
            raise ValueError("data.n_train and data.n_test must be positive")
        if self.strata < 1:
            raise ValueError("data.strata must be positive")
        if self.source == "idx" and not (self.images and self.labels):
            raise ValueError("data.images and data.labels are required for idx data")
        if self.source == "csv" and not self.path:
            raise ValueError("data.path is required for csv data")


@dataclass(frozen=True)
class ModelConfig:
    kind: str = "mlp"
    hidden_dim: int = 8


@dataclass(frozen=True)
class NkbConfig:
    eta: float = 1.0
    lambda_nkb: float = 2.0
    xi: float = 1e-2
    eta_min: float = 1e-6
    eta_max: float = 1e2

    def initial_state(self) -> NkbState:
        return NkbState(self.eta, self.lambda_nkb, self.xi, None, self.eta_min, self.eta_max)


@dataclass(frozen=True)
class AttackConfig:
    kind: str = "none"
    level: str = "full"
    objective: str = TARGETED
    gaussian_sigma: float = 3.0
    mean_variant: str = DERIVATION_CONSISTENT
    target_epochs: int = 20
    target_lr: float = 0.5
    cmp: CmpHyper = field(default_factory=CmpHyper)
    nkb: NkbConfig = field(default_factory=NkbConfig)

    def __post_init__(self):
        if self.kind not in ATTACKS:
            raise ValueError(f"attack.kind must be one of {ATTACKS}")
        KnowledgeLevel(self.level)
        if self.objective not in (TARGETED, UNTARGETED):
            raise ValueError(f"attack.objective must be {TARGETED!r} or {UNTARGETED!r}")
        if self.gaussian_sigma < 0:
            raise ValueError("attack.gaussian_sigma must be >= 0")
        if self.kind == "cmp-nkb" and self.level != "none":
            raise ValueError("attack.kind 'cmp-nkb' runs with attack.level 'none'")
        if self.kind in ("cmp-mean", "cmp-krum-original", "cmp-krum-simplified") and self.level == "none":
            raise ValueError(f"attack.kind {self.kind!r} needs attack.level 'full' or 'partial'")


@dataclass(frozen=True)
class ExperimentConfig:
    U: int = 20
    M: int = 0
    T: int = 30
    p: float = 0.5
    model: ModelConfig = field(default_factory=ModelConfig)
    data: DataConfig = field(default_factory=DataConfig)
    aggregation: AggregationRule = field(default_factory=AggregationRule)
    attack: AttackConfig = field(default_factory=AttackConfig)
    train: TrainParams = field(default_factory=TrainParams)
    bound: float = 10.0
    seed: int = 0
    trials: int = 1

    def __post_init__(self):
        if self.U < 1:
            raise ValueError("U must be positive")
        if not 0 <= self.M < self.U:
            raise ValueError(f"need 0 <= M < U (M={self.M}, U={self.U})")
        if self.T < 1:
            raise ValueError("T must be >= 1")
        if not 0.0 <= self.p <= 1.0:
            raise ValueError("p must lie in [0, 1]")
        if self.trials < 1:
            raise ValueError("trials must be >= 1")
        if self.bound <= 0:
            raise ValueError("bound must be positive")
        agg = self.aggregation
        if agg.name == "krum" and self.U - self.krum_m - 2 < 1:
            raise ValueError(f"Krum needs U - m - 2 >= 1 (U={self.U}, m={self.krum_m})")
        if agg.name == "trimmed-mean" and not (0 <= self.trim_k and 2 * self.trim_k < self.U):
            raise ValueError(f"trimmed mean needs 0 <= 2k < U (k={self.trim_k}, U={self.U})")
        kind = self.attack.kind
        if kind == "cmp-mean" and agg.name != "mean":
            raise ValueError("attack.kind 'cmp-mean' targets aggregation 'mean'")
        if kind.startswith("cmp-krum") and agg.name != "krum":
            raise ValueError(f"attack.kind {kind!r} targets aggregation 'krum'")
        if kind == "cmp-krum-simplified" and self.U - 2 * self.M - 1 < 1:
            raise ValueError(f"the simplified attack needs U - 2M - 1 >= 1 (U={self.U}, M={self.M})")

    @property
    def krum_m(self) -> int:
        return self.M if self.aggregation.m is None else self.aggregation.m

    @property
    def trim_k(self) -> int:
        return self.M if self.aggregation.k is None else self.aggregation.k

    def resolved_rule(self) -> AggregationRule:
        if self.aggregation.name == "krum":
            return AggregationRule("krum", m=self.krum_m)
        if self.aggregation.name == "trimmed-mean":
            return AggregationRule("trimmed-mean", k=self.trim_k)
        return AggregationRule("mean")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass
class RoundRecord:
    t: int
    global_params: np.ndarray
    selected_id: int | None
    success: bool | None
    metrics: dict[str, float]


@dataclass
class TrialState:
    """Everything fixed for one trial plus the evolving global model."""

    trial: int
    spec: ModelSpec
    clients: list[Dataset]
    weights: np.ndarray
    test: Dataset
    label_map: LabelMap | None
    compromised: tuple[int, ...]
    global_params: np.ndarray
    target: np.ndarray | None = None
    nkb: NkbState | None = None
    attack_seconds: list[float] = field(default_factory=list)


@dataclass
class MetricsReport:
    config: dict
    records: list[list[RoundRecord]]
    final: dict[str, list[float]]  # metric -> one value per trial
    success_rate: list[float] | None
    attack_seconds: list[float]

    def mean(self, metric: str) -> float:
        return float(np.mean(self.final[metric]))

    @property
    def final_error_rate(self) -> float | None:
        return self.mean("error_rate") if "error_rate" in self.final else None

    @property
    def final_attacker_accuracy(self) -> float | None:
        return self.mean("attacker_accuracy") if "attacker_accuracy" in self.final else None

    @property
    def mean_success_rate(self) -> float | None:
        return None if self.success_rate is None else float(np.mean(self.success_rate))

    def timing(self) -> dict[str, float | int]:
        s = np.asarray(self.attack_seconds, dtype=np.float64)
        if s.size == 0:
            return {"invocations": 0, "mean_seconds": 0.0, "std_seconds": 0.0}
        return {"invocations": int(s.size), "mean_seconds": float(s.mean()), "std_seconds": float(s.std())}

    def summary(self) -> dict:
        """Deterministic part of the report (wall-clock timing lives in ``timing()``)."""
        out = {
            "config": self.config,
            "seed": self.config["seed"],
            "final": {k: {"mean": self.mean(k), "per_trial": v} for k, v in self.final.items()},
        }
        if self.success_rate is not None:
            out["success_rate"] = {"mean": self.mean_success_rate, "per_trial": self.success_rate}
        return out


# -- metrics ----------------------------------------------------------------


def metric_error_rate(spec: ModelSpec, params, test: Dataset) -> float:
    """Fraction of test examples misclassified."""
    if not spec.is_classifier:
        raise ValueError("error rate is defined for classifiers; use the normalised cost for regression")
    return float(np.mean(predict(spec, params, test.features) != test.labels))


def metric_attacker_accuracy(spec: ModelSpec, params, test: Dataset, label_map: LabelMap) -> float:
    """Fraction of test examples predicted as the attacker's relabelling of their true class."""
    if not spec.is_classifier:
        raise ValueError("attacker's accuracy is defined for classifiers")
    return float(np.mean(predict(spec, params, test.features) == label_map.apply(test.labels)))


def metric_success_rate(records: list[RoundRecord], compromised, aggregation: str = "krum") -> float:
    """Fraction of rounds in which Krum picked a compromised upload."""
    if aggregation != "krum":
        raise ValueError("successful attacking rate is defined for Krum only")
    if not records:
        raise ValueError("no rounds recorded")
    bad = set(compromised)
    return sum(r.selected_id in bad for r in records) / len(records)


def round_metrics(spec: ModelSpec, params, test: Dataset, label_map: LabelMap | None) -> dict[str, float]:
    out = {"loss": loss(spec, params, test)}
    if spec.is_classifier:
        out["error_rate"] = metric_error_rate(spec, params, test)
        if label_map is not None:
            out["attacker_accuracy"] = metric_attacker_accuracy(spec, params, test, label_map)
    return out


# -- trial setup ----------------------------------------------------------


def _load_data(cfg: ExperimentConfig, rng: np.random.Generator) -> tuple[Dataset, Dataset]:
    d = cfg.data
    regression = cfg.model.kind == "linear-regression"
    n = d.n_train + d.n_test
    if d.source == "synthetic":
        if regression:
            data = gen_regression(n, d.input_dim, d.noise, rng)
        else:
            classes = 2 if cfg.model.kind == "linear-svm" else d.num_classes
            data = gen_classification(n, d.input_dim, classes, d.separation, rng)
        return split(data, d.n_test, rng)
    if d.source == "idx":
        data = load_idx(d.images, d.labels)
        if d.test_images and d.test_labels:
            train, test = data, load_idx(d.test_images, d.test_labels)
            train = train.subset(rng.permutation(len(train))[: d.n_train])
            test = test.subset(rng.permutation(len(test))[: d.n_test])
        else:
            train, test = split(data.subset(rng.permutation(len(data))[:n]), d.n_test, rng)
    else:
        train, test = split(load_csv(d.path, d.target), d.n_test, rng)
    if cfg.model.kind == "linear-svm" and train.is_classification:
        train, test = parity_labels(train), parity_labels(test)
    return train, test


def _model_spec(cfg: ExperimentConfig, train: Dataset) -> ModelSpec:
    kind, d = cfg.model.kind, train.features.shape[1]
    if kind == "linear-regression":
        var = float(np.var(train.labels))
        return ModelSpec(kind, d, target_variance=var if var > 0 else 1.0)
    if kind == "linear-svm":
        return ModelSpec(kind, d, num_classes=2)
    classes = max(int(train.labels.max()) + 1, cfg.data.num_classes if cfg.data.source == "synthetic" else 2)
    return ModelSpec(kind, d, num_classes=classes, hidden_dim=cfg.model.hidden_dim)


def setup_trial(cfg: ExperimentConfig, trial: int) -> TrialState:
    rng = substream(cfg.seed, trial)
    train, test = _load_data(cfg, rng)
    spec = _model_spec(cfg, train)
    if spec.is_classifier:
        part = partition_noniid(train.labels, cfg.U, cfg.p, rng, spec.num_classes if spec.kind == "mlp" else 2)
        label_map = cyclic_target_map(spec.num_classes if spec.kind == "mlp" else 2)
    else:
        strata = regression_strata(train, min(cfg.data.strata, cfg.U))
        part = partition_noniid(strata, cfg.U, cfg.p, rng, min(cfg.data.strata, cfg.U))
        label_map = None
    clients = [train.subset(a) for a in part.assignments]
    state = TrialState(
        trial=trial,
        spec=spec,
        clients=clients,
        weights=part.weights,
        test=test,
        label_map=label_map,
        compromised=tuple(range(cfg.M)),
        global_params=init_params(spec, substream(cfg.seed, trial, _INIT_KEY)),
    )
    if cfg.attack.kind == "cmp-nkb":
        state.nkb = cfg.attack.nkb.initial_state()
    if cfg.M and cfg.attack.objective == TARGETED and cfg.attack.kind.startswith("cmp"):
        state.target = _targeted_model(cfg, state)
    return state


def _attacker_datasets(cfg: ExperimentConfig, state: TrialState) -> dict[int, Dataset]:
    ids = range(cfg.U) if cfg.attack.level == "full" else state.compromised
    return {i: state.clients[i] for i in ids}


def _targeted_model(cfg: ExperimentConfig, state: TrialState) -> np.ndarray:
    """Model the attacker wants the server to adopt: trained from the initial
    global model on the attacker's data with relabelled classes."""
    data = Dataset.concat(list(_attacker_datasets(cfg, state).values()))
    if state.label_map is not None:
        data = flip_labels(data, state.label_map)
    train = TrainParams(cfg.attack.target_epochs, cfg.attack.target_lr, cfg.train.batch)
    rng = substream(cfg.seed, state.trial, _TARGET_KEY)
    return local_train(state.spec, state.global_params, data, train, rng, BoxDomain.symmetric(cfg.bound))


# -- rounds -------------------------------------------------------------------


def _context(cfg: ExperimentConfig, state: TrialState, honest: list[ClientUpdate], round_seed: int) -> AttackContext:
    level = KnowledgeLevel(cfg.attack.level)
    bad = set(state.compromised)
    visible = honest if level is KnowledgeLevel.FULL else [u for u in honest if u.client_id in bad]
    return AttackContext(
        level=level,
        compromised_ids=state.compromised,
        global_model=state.global_params,
        num_clients=cfg.U,
        visible_updates=visible,
        visible_datasets=_attacker_datasets(cfg, state),
        weights={u.client_id: u.weight for u in visible},
        target=state.target,
        objective=cfg.attack.objective,
        aggregation_known=None if level is KnowledgeLevel.NONE else cfg.resolved_rule(),
        domain=BoxDomain.symmetric(cfg.bound),
        round_seed=round_seed,
    )


def _run_attack(cfg: ExperimentConfig, state: TrialState, ctx: AttackContext, rng) -> AttackResult:
    a = cfg.attack
    if a.kind == "gaussian":
        return attack_gaussian(ctx, a.gaussian_sigma, rng)
    if a.kind == "label-flip":
        label_map = state.label_map
        if label_map is None:
            raise ValueError("label flipping needs a classification task")
        return attack_label_flip(ctx, label_map, state.spec, cfg.train)
    if a.kind == "cmp-mean":
        if ctx.target is None:
            ctx.target = ascent_target(ctx, state.spec, a.cmp)
        if ctx.level is KnowledgeLevel.FULL:
            return cmp_mean_full(ctx)
        return cmp_mean_partial(ctx, a.mean_variant)
    if a.kind == "cmp-krum-original":
        return cmp_krum_original(ctx, a.cmp, state.spec, rng)
    if a.kind == "cmp-krum-simplified":
        return cmp_krum_simplified(ctx, a.cmp, state.spec, rng)
    if a.kind == "cmp-nkb":
        label_map = state.label_map
        if label_map is None:
            raise ValueError("the blind attack relabels classes and needs a classification task")
        result, state.nkb = cmp_nkb_round(
            state.nkb, state.global_params, ctx, state.spec, label_map, a.cmp.sigma, a.cmp.eps, rng
        )
        return result
    raise ValueError(f"unknown attack {a.kind!r}")


def run_round(state: TrialState, cfg: ExperimentConfig, t: int) -> RoundRecord:
    """Broadcast, train every client honestly, swap in the attacker's uploads,
    aggregate, and advance ``state.global_params``."""
    if not 0 <= t < cfg.T:
        raise ValueError(f"round index {t} outside [0, {cfg.T})")
    round_seed = derive_seed(cfg.seed, state.trial, t)
    domain = BoxDomain.symmetric(cfg.bound)
    honest = [
        ClientUpdate(
            i,
            local_train(state.spec, state.global_params, state.clients[i], cfg.train, substream(round_seed, i), domain),
            float(state.weights[i]),
        )
        for i in range(cfg.U)
    ]
    uploads = honest
    success = None
    if cfg.attack.kind != "none" and cfg.M:
        ctx = _context(cfg, state, honest, round_seed)
        start = time.perf_counter()
        result = _run_attack(cfg, state, ctx, substream(round_seed, _ATTACK_KEY))
        state.attack_seconds.append(time.perf_counter() - start)
        crafted = {u.client_id: u for u in result.updates}
        uploads = [crafted.get(u.client_id, u) for u in honest]
        success = result.success

    outcome = aggregate(cfg.resolved_rule(), uploads)
    state.global_params = outcome.global_params
    metrics = round_metrics(state.spec, outcome.global_params, state.test, state.label_map)
    return RoundRecord(t, outcome.global_params.copy(), outcome.selected_id, success, metrics)


def run_trial(cfg: ExperimentConfig, trial: int) -> tuple[list[RoundRecord], list[float]]:
    state = setup_trial(cfg, trial)
    records = [run_round(state, cfg, t) for t in range(cfg.T)]
    return records, state.attack_seconds


def run_experiment(cfg: ExperimentConfig, trials: list[int] | None = None) -> MetricsReport:
    """Run ``cfg.trials`` independent trials of ``cfg.T`` rounds each."""
    trials = list(range(cfg.trials)) if trials is None else trials
    records, seconds = [], []
    for trial in trials:
        recs, secs = run_trial(cfg, trial)
        records.append(recs)
        seconds.extend(secs)
    final: dict[str, list[float]] = {k: [recs[-1].metrics[k] for recs in records] for k in records[0][-1].metrics}
    success = None
    if cfg.aggregation.name == "krum":
        compromised = tuple(range(cfg.M))
        success = [metric_success_rate(recs, compromised) for recs in records]
    for values in final.values():
        if any(not math.isfinite(v) for v in values):
            raise FloatingPointError("non-finite metric; check the learning rate and box bound")
    return MetricsReport(cfg.to_dict(), records, final, success, seconds)
