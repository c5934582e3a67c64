import warnings

import numpy as np
import pytest

from cmpfl.aggregation import AggregationRule, ClientUpdate, KrumGuaranteeWarning, aggregate_krum, aggregate_mean
from cmpfl.attacks import (
    AS_PRINTED,
    DERIVATION_CONSISTENT,
    UNTARGETED,
    AttackContext,
    CmpHyper,
    KktInfeasibleError,
    KnowledgeLevel,
    NkbState,
    attack_gaussian,
    attack_label_flip,
    attacker_objective,
    cmp_krum_original,
    cmp_krum_simplified,
    cmp_mean_full,
    cmp_mean_partial,
    cmp_nkb_round,
    compute_E,
    select_alpha,
    solve_p1_kkt,
    stronger_constraint,
    sphere_init,
)
from cmpfl.attacks.context import collude
from cmpfl.datakit import LabelMap, gen_classification, cyclic_target_map
from cmpfl.models import ModelSpec, TrainParams, init_params, local_train
from cmpfl.numkit import BoxDomain, make_rng, substream

from helpers import full_context, krum_instance


def _mean_ctx(benign, compromised_honest, target, level=KnowledgeLevel.FULL, weights=None):
    M = len(compromised_honest)
    U = M + len(benign)
    weights = weights or [1.0 / U] * U
    vals = list(compromised_honest) + list(benign)
    ups = [ClientUpdate(i, np.atleast_1d(np.asarray(v, dtype=np.float64)), weights[i]) for i, v in enumerate(vals)]
    if level is not KnowledgeLevel.FULL:
        ups = ups[:M]
    return AttackContext(
        level, tuple(range(M)), np.zeros_like(ups[0].params), U, visible_updates=ups,
        weights=dict(enumerate(weights)), target=np.atleast_1d(np.asarray(target, dtype=np.float64)),
        aggregation_known=AggregationRule("mean"),
    )


# -- objective and baselines ---------------------------------------------------

def test_targeted_objective_examples():
    ctx = _mean_ctx([1.0], [0.0], [1.0])
    assert attacker_objective(np.array([1.0]), ctx) == (0.0, pytest.approx(np.zeros(1)))
    value, grad = attacker_objective(np.array([3.0]), ctx)
    assert value == 4.0 and grad.tolist() == [4.0]
    ctx.target = None
    with pytest.raises(ValueError):
        attacker_objective(np.array([3.0]), ctx)


def test_untargeted_objective_gradient():
    rng = make_rng(0)
    spec = ModelSpec("mlp", 3, num_classes=3, hidden_dim=4)
    data = gen_classification(20, 3, 3, 3.0, rng)
    ctx = AttackContext(
        KnowledgeLevel.NONE, (0,), init_params(spec, rng), 3, visible_datasets={0: data}, objective=UNTARGETED
    )
    x = init_params(spec, rng)
    value, grad = attacker_objective(x, ctx, spec)
    h = 1e-6
    numeric = np.array([
        (attacker_objective(x + h * e, ctx, spec)[0] - attacker_objective(x - h * e, ctx, spec)[0]) / (2 * h)
        for e in np.eye(x.size)
    ])
    assert value < 0
    np.testing.assert_allclose(grad, numeric, rtol=1e-4, atol=1e-7)


def test_gaussian_baseline():
    ctx = _mean_ctx([1.0, 2.0], [[0.5, 0.5], [1.0, 1.0]], [0.0, 0.0])
    ctx.visible_updates = [ClientUpdate(u.client_id, np.full(2, u.params[0]), u.weight) for u in ctx.visible_updates]
    honest = [u.params for u in ctx.compromised_updates()]
    zero = attack_gaussian(ctx, 0.0, make_rng(0))
    for u, h in zip(zero.updates, honest):
        np.testing.assert_array_equal(u.params, h)
    a = attack_gaussian(ctx, 3.0, make_rng(1))
    b = attack_gaussian(ctx, 3.0, make_rng(1))
    for u, v in zip(a.updates, b.updates):
        np.testing.assert_array_equal(u.params, v.params)
    assert not np.array_equal(a.updates[0].params, honest[0])


def test_label_flip_baseline():
    rng = make_rng(2)
    spec = ModelSpec("mlp", 2, num_classes=3, hidden_dim=3)
    data = gen_classification(30, 2, 3, 3.0, rng)
    g = init_params(spec, rng)
    train = TrainParams(epochs=2, lr=0.3, batch=8)
    ctx = AttackContext(
        KnowledgeLevel.NONE, (1,), g, 4, visible_datasets={1: data}, weights={1: 0.25}, round_seed=99
    )
    honest = local_train(spec, g, data, train, substream(99, 1))
    same = attack_label_flip(ctx, LabelMap.identity(3), spec, train)
    np.testing.assert_array_equal(same.crafted, honest)
    flipped = attack_label_flip(ctx, cyclic_target_map(3), spec, train)
    assert not np.array_equal(flipped.crafted, honest)


def test_collusion_copies_sit_at_radius():
    ctx = krum_instance(make_rng(3), U=12, M=5, max_dim=7)
    theta = np.arange(ctx.global_model.size, dtype=np.float64)
    ups = collude(theta, ctx, 1.0, 0.25, make_rng(4))
    np.testing.assert_array_equal(ups[0].params, theta)
    assert [u.client_id for u in ups] == [0, 1, 2, 3, 4]
    for u in ups[1:]:
        assert abs(np.linalg.norm(u.params - theta) - 0.25) <= 1e-12


# -- mean aggregation --------------------------------------------------------

def test_mean_full_worked_example():
    ctx = _mean_ctx([1.0, 3.0], [5.0, 5.0], 0.0)
    res = cmp_mean_full(ctx)
    assert [u.params.tolist() for u in res.updates] == [[-2.0], [-2.0]]
    agg = aggregate_mean(res.updates + ctx.benign_updates())
    assert agg.global_params.tolist() == [0.0]


def test_mean_full_all_compromised_and_consistent_benign():
    ctx = _mean_ctx([], [4.0, 1.0], 7.0)
    assert cmp_mean_full(ctx).crafted.tolist() == [7.0]
    ctx = _mean_ctx([2.0, 2.0, 2.0], [0.0], 2.0 * 0.9, weights=[0.1, 0.3, 0.3, 0.3])
    res = cmp_mean_full(ctx)
    assert res.crafted == pytest.approx(0.0, abs=1e-12)


def test_mean_full_flags_clipping():
    ctx = _mean_ctx([1.0, 3.0], [5.0, 5.0], 0.0)
    ctx.domain = BoxDomain(-1.0, 1.0)
    res = cmp_mean_full(ctx)
    assert not res.feasible and res.crafted.tolist() == [-1.0]


def test_mean_full_needs_weight_and_knowledge():
    ctx = _mean_ctx([1.0], [5.0], 0.0, weights=[0.0, 1.0])
    with pytest.raises(ValueError):
        cmp_mean_full(ctx)
    with pytest.raises(ValueError):
        cmp_mean_full(_mean_ctx([1.0], [5.0], 0.0, level=KnowledgeLevel.PARTIAL))


def test_mean_partial_examples():
    single = _mean_ctx([], [2.0], 0.0, level=KnowledgeLevel.PARTIAL)
    printed = cmp_mean_partial(single, AS_PRINTED)
    assert printed.crafted.tolist() == [2.0] and printed.predicted_fa == 4.0
    derived = cmp_mean_partial(_mean_ctx([], [2.0], 3.0, level=KnowledgeLevel.PARTIAL))
    assert derived.crafted.tolist() == [3.0] and derived.predicted_fa == 0.0
    with pytest.raises(ValueError):
        cmp_mean_partial(single, "other")


def test_mean_partial_hits_target_when_estimate_is_right():
    rng = make_rng(5)
    for _ in range(20):
        U, M, d = 6, 2, 3
        w = rng.dirichlet(np.ones(U))
        honest = rng.normal(size=(M, d))
        s = w[:M].sum()
        weighted = (w[:M, None] * honest).sum(axis=0)
        benign_sum = (1 - s) / s * weighted
        # spread the required benign sum over the benign clients
        benign = rng.normal(size=(U - M, d))
        benign += (benign_sum - (w[M:, None] * benign).sum(axis=0)) / (1 - s)
        target = rng.normal(size=d)
        ctx = _mean_ctx(list(benign), list(honest), target, weights=list(w))
        ctx_partial = _mean_ctx(list(benign), list(honest), target, level=KnowledgeLevel.PARTIAL, weights=list(w))
        ctx_partial.domain = BoxDomain.symmetric(1e6)
        res = cmp_mean_partial(ctx_partial, DERIVATION_CONSISTENT)
        assert res.feasible
        agg = aggregate_mean(res.updates + ctx.benign_updates()).global_params
        assert np.linalg.norm(agg - target) <= 1e-9


# -- Krum: iterative attack ------------------------------------------------------

def _krum_winner(ctx, crafted):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", KrumGuaranteeWarning)
        return aggregate_krum(crafted + ctx.benign_updates(), ctx.krum_m()).selected_id


def test_original_selected_immediately_at_cluster_centre():
    target = np.array([1.0, -2.0])
    ctx = full_context(np.tile(target, (8, 1)), 3, target, global_model=target)
    res = cmp_krum_original(ctx, CmpHyper(), None, make_rng(0))
    assert res.success and res.iterations == 1
    np.testing.assert_array_equal(res.crafted, target)


def test_original_with_tiny_step_returns_the_start():
    ctx = krum_instance(make_rng(1), U=10, M=2, max_dim=4)
    res = cmp_krum_original(ctx, CmpHyper(eta0=1e-5, varsigma=1e-4), None, make_rng(2))
    assert res.iterations == 0
    np.testing.assert_array_equal(res.crafted, ctx.global_model)
    assert res.success == (_krum_winner(ctx, res.updates) == 0)


def test_original_success_means_krum_selects_it():
    rng = make_rng(3)
    for _ in range(20):
        ctx = krum_instance(rng, U=12, M=3, max_dim=10)
        res = cmp_krum_original(ctx, CmpHyper(), None, rng)
        if res.success:
            assert _krum_winner(ctx, res.updates) == 0
        assert np.linalg.norm(res.crafted - ctx.target) <= np.linalg.norm(ctx.global_model - ctx.target)


def test_original_one_dimensional_success_is_confirmed_by_oracle():
    from cmpfl.oracles import krum_select_bruteforce

    rng = make_rng(13)
    confirmed = 0
    for _ in range(50):
        benign = rng.normal(0.0, 1.0, size=(5, 1))
        ctx = full_context(benign, 2, rng.normal(0.0, 3.0, size=1), global_model=benign.mean(axis=0))
        res = cmp_krum_original(ctx, CmpHyper(), None, rng)
        if res.success:
            points = [u.params for u in res.updates] + [u.params for u in ctx.benign_updates()]
            assert krum_select_bruteforce(points, list(range(7)), 2) == 0
            confirmed += 1
    assert confirmed > 0


def test_original_needs_krum_and_knowledge():
    ctx = krum_instance(make_rng(4), U=10, M=2, max_dim=3)
    ctx.aggregation_known = AggregationRule("mean")
    with pytest.raises(ValueError):
        cmp_krum_original(ctx, CmpHyper(), None, make_rng(0))


# -- Krum: simplified attack -------------------------------------------------------

def test_compute_E_examples():
    assert compute_E(np.ones((5, 2)), 1, 7) == 0.0
    assert compute_E(np.array([[0.0], [1.0], [2.0]]), 1, 4) == 1.0
    with pytest.raises(ValueError):
        compute_E(np.array([[0.0], [1.0]]), 1, 6)


def test_sphere_init_worked_example():
    benign = np.array([[0.0], [2.0]])
    init = sphere_init(benign, np.array([5.0]), 2, 7, 0.0, 2.5)
    assert init.tolist() == [2.0]
    assert stronger_constraint(benign, init, 2, 7, 0.0, 2.5) == 0.0


def test_sphere_init_fixed_point_and_fallback():
    benign = np.array([[0.0], [2.0]])
    assert sphere_init(benign, np.array([0.0]), 2, 7, 0.0, 2.5).tolist() == [0.0]
    # a large E makes the ball empty
    assert sphere_init(benign, np.array([5.0]), 2, 7, 0.0, -10.0).tolist() == [1.0]


def test_sphere_init_is_on_the_constraint_boundary():
    rng = make_rng(6)
    checked = 0
    while checked < 50:
        B, d, M = int(rng.integers(2, 8)), int(rng.integers(1, 6)), int(rng.integers(1, 3))
        U = B + M
        pts = rng.normal(size=(B, d))
        eps, E = float(rng.uniform(0, 0.1)), float(rng.uniform(0, 10))
        x = sphere_init(pts, rng.normal(size=d) * 5, M, U, eps, E)
        if np.array_equal(x, pts.mean(axis=0)):
            continue
        checked += 1
        assert abs(stronger_constraint(pts, x, M, U, eps, E)) <= 1e-9


def test_kkt_slack_target():
    res = solve_p1_kkt([True], np.array([[0.0]]), np.array([0.5]), 1, 0.0, 1.0)
    assert res.multiplier == 0.0 and res.iterate.tolist() == [0.5]


def test_kkt_one_dimensional_example():
    res = solve_p1_kkt([True], np.array([[0.0]]), np.array([5.0]), 1, 0.0, 1.0)
    assert res.iterate[0] == pytest.approx(1.0, abs=1e-9)
    assert res.multiplier == pytest.approx(8.0, rel=1e-6)


def test_kkt_infeasible_budget():
    with pytest.raises(KktInfeasibleError):
        solve_p1_kkt([True, True], np.array([[0.0], [4.0]]), np.array([9.0]), 1, 0.0, 1.0)


def test_kkt_residuals_on_random_instances():
    rng = make_rng(7)
    for _ in range(30):
        B, d = int(rng.integers(3, 13)), int(rng.integers(1, 20))
        pts = rng.normal(size=(B, d))
        mask = rng.random(B) < 0.5
        mask[:2] = True
        sel = pts[mask]
        centre = sel.mean(axis=0)
        E = float(np.linalg.norm(sel - centre, axis=1).sum()) * 1.2
        res = solve_p1_kkt(mask, pts, centre + rng.normal(size=d) * 4, 1, 0.0, E)
        assert res.stationarity <= 1e-6 and res.constraint <= 1e-6


def test_alpha_examples():
    pts = np.array([[0.0], [1.0], [9.0]])
    greedy = select_alpha(pts, np.array([0.0]), 1, 5, 0.0)
    assert greedy.alpha.tolist() == [True, True, False]
    for method in ("greedy", "exhaustive", "restarts"):
        forced = select_alpha(pts, np.array([4.0]), 1, 6, 0.0, E=30.0, method=method)
        assert forced.alpha.all()
    with pytest.raises(ValueError):
        select_alpha(pts, np.array([0.0]), 2, 5, 0.0, E=1.0)


def test_exhaustive_never_loses_to_greedy():
    rng = make_rng(8)
    for _ in range(10):
        B, M = int(rng.integers(4, 9)), 1
        pts = rng.normal(size=(B, 3))
        target = rng.normal(size=3) * 3
        greedy = select_alpha(pts, target, M, B + M, 1e-3)
        best = select_alpha(pts, target, M, B + M, 1e-3, method="exhaustive")
        assert best.fa <= greedy.fa


def test_simplified_on_cluster_around_target():
    rng = make_rng(9)
    # dyadic values keep the benign centroid bitwise equal to the target
    target = np.array([1.0, -2.0, 0.5, 3.0, 0.25])
    for M in (1, 2, 3):
        ctx = full_context(np.tile(target, (10, 1)), M, target, global_model=target + 1.0)
        res = cmp_krum_simplified(ctx, CmpHyper(), None, rng)
        assert res.success and res.iterations == 1
        np.testing.assert_array_equal(res.crafted, target)
    assert _krum_winner(ctx, res.updates) == 0


def test_simplified_one_shot_and_restoration_agree_with_krum():
    rng = make_rng(10)
    for steps in (0, 10):
        for _ in range(10):
            ctx = krum_instance(rng, U=12, M=3, max_dim=8)
            res = cmp_krum_simplified(ctx, CmpHyper(restore_steps=steps), None, rng)
            assert res.success == (_krum_winner(ctx, res.updates) == 0)
            if steps == 0:
                assert res.iterations == 1


def test_simplified_partial_knowledge_runs():
    ctx = krum_instance(make_rng(11), U=12, M=3, max_dim=4)
    partial = AttackContext(
        KnowledgeLevel.PARTIAL, ctx.compromised_ids, ctx.global_model, ctx.num_clients,
        visible_updates=ctx.compromised_updates(), weights=ctx.weights, target=ctx.target,
        aggregation_known=ctx.aggregation_known,
    )
    res = cmp_krum_simplified(partial, CmpHyper(), None, make_rng(0))
    assert len(res.updates) == 3 and np.all(np.isfinite(res.crafted))


# -- blind attack ------------------------------------------------------------------

def _blind_setup(U=3):
    rng = make_rng(12)
    spec = ModelSpec("mlp", 2, num_classes=3, hidden_dim=3)
    data = gen_classification(30, 2, 3, 3.0, rng)
    ctx = AttackContext(
        KnowledgeLevel.NONE, tuple(range(U)), init_params(spec, rng), U,
        visible_datasets={i: data for i in range(U)}, weights={i: 1.0 / U for i in range(U)},
    )
    return spec, ctx


def test_blind_first_round_shrinks_and_acceptance_grows():
    spec, ctx = _blind_setup()
    state = NkbState(eta=1.0, lambda_nkb=2.0)
    res, state = cmp_nkb_round(state, ctx.global_model, ctx, spec, cyclic_target_map(3), 1.0, 1e-3, make_rng(0))
    assert state.eta == 0.5 and res.success is False
    res, state = cmp_nkb_round(state, state.prev, ctx, spec, cyclic_target_map(3), 1.0, 1e-3, make_rng(0))
    assert state.eta == 1.0 and res.success is True


def test_blind_against_mean_reaches_max_step():
    spec, ctx = _blind_setup(U=3)
    state = NkbState(eta=1.0, lambda_nkb=2.0, xi=1e-2, eta_max=64.0)
    g = ctx.global_model
    history = []
    rng = make_rng(1)
    for _ in range(50):
        res, state = cmp_nkb_round(state, g, ctx, spec, cyclic_target_map(3), 1.0, 1e-3, rng)
        g = aggregate_mean(res.updates).global_params
        history.append(state.eta)
    assert history[-1] == 64.0
    first = history.index(64.0)
    assert all(e == 64.0 for e in history[first:])


def test_blind_state_validation():
    with pytest.raises(ValueError):
        NkbState(lambda_nkb=1.0)
    with pytest.raises(ValueError):
        NkbState(xi=0.0)
