import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from clbench import ndcore, scenarios
from clbench.ndcore import AdamState, ModelSpec, adam_step, init_params
from clbench.strategies import (
    AccessViolation,
    EwcState,
    MemoryBuffer,
    Model,
    SessionOrderError,
    SiState,
    StrategyConfig,
    StreamAccess,
    TrainConfig,
    agem_project,
    estimate_fisher,
    ewc_penalty,
    ewc_penalty_gradient,
    gdumb_insert_balanced,
    gem_project,
    load_strategy_state,
    lwf_kd_dlogits,
    lwf_kd_loss,
    make_strategy,
    reservoir_insert,
    save_strategy_state,
    si_consolidate,
    si_penalty,
    si_update,
    train_task,
)


class TestEwcPenalty:
    def test_zero_at_anchor(self):
        state = EwcState()
        theta = np.array([0.3, -0.7])
        state.add(theta, np.array([1.0, 4.0]))
        assert ewc_penalty(state, theta, lam=2.0) == 0.0

    def test_hand_computed_value(self):
        # (lam/2) * (1*1^2 + 4*0.5^2) = 2.0 at lam=2
        state = EwcState()
        state.add(np.zeros(2), np.array([1.0, 4.0]))
        assert ewc_penalty(state, np.array([1.0, 0.5]), lam=2.0) == 2.0

    def test_zero_fisher_unconstrained(self):
        state = EwcState()
        state.add(np.zeros(3), np.zeros(3))
        assert ewc_penalty(state, np.array([5.0, -3.0, 2.0]), lam=10.0) == 0.0

    def test_multi_anchor_sums(self):
        state = EwcState()
        state.add(np.zeros(1), np.array([2.0]))
        state.add(np.ones(1), np.array([2.0]))
        # (1/2)*(2*1 + 2*0) + ... theta=1: first anchor diff 1, second diff 0
        assert ewc_penalty(state, np.ones(1), lam=1.0) == 1.0

    def test_shape_mismatch_rejected(self):
        state = EwcState()
        state.add(np.zeros(2), np.ones(2))
        with pytest.raises(ValueError):
            ewc_penalty(state, np.zeros(3), lam=1.0)

    def test_gradient_matches_finite_difference(self):
        state = EwcState()
        rng = np.random.default_rng(0)
        state.add(rng.normal(size=4), rng.uniform(0, 2, 4))
        state.add(rng.normal(size=4), rng.uniform(0, 2, 4))
        theta = rng.normal(size=4)
        grad = ewc_penalty_gradient(state, theta, lam=1.7)
        h = 1e-6
        for i in range(4):
            up, down = theta.copy(), theta.copy()
            up[i] += h
            down[i] -= h
            numeric = (ewc_penalty(state, up, 1.7) - ewc_penalty(state, down, 1.7)) / (2 * h)
            assert grad[i] == pytest.approx(numeric, rel=1e-5)

    def test_negative_fisher_rejected(self):
        with pytest.raises(ValueError):
            EwcState().add(np.zeros(2), np.array([1.0, -0.5]))


class TestEstimateFisher:
    def spec_and_data(self):
        spec = ModelSpec(input_dim=2, hidden_dims=(), output_dim=2)
        x = np.array([[1.0, 0.5], [-0.5, 2.0]])
        y = np.array([0, 1])
        return spec, x, y

    def test_saturated_model_gives_zero_vector(self):
        spec, x, y = self.spec_and_data()
        params = ndcore.ParamVector(np.zeros(spec.n_params), spec.layout())
        params.segment("w0")[...] = [[800.0, -800.0], [0.0, 0.0]]
        x = np.array([[1.0, 0.0]])
        fisher = estimate_fisher(params, spec, x, np.array([0]), budget=1, rng=np.random.default_rng(0))
        assert np.array_equal(fisher, np.zeros(spec.n_params))

    def test_budget_one_is_single_example_square(self):
        spec, x, y = self.spec_and_data()
        params = init_params(spec, np.random.default_rng(3))
        rng = np.random.default_rng(5)
        fisher = estimate_fisher(params, spec, x, y, budget=1, rng=rng)
        picked = np.random.default_rng(5).choice(2, size=1, replace=False)[0]
        expected = ndcore.backward(params, spec, x[picked : picked + 1], y[picked : picked + 1]).values ** 2
        assert np.array_equal(fisher, expected)

    def test_linear_softmax_hand_oracle(self):
        # per-example gradient of CE for a linear model: gW = x (p - onehot),
        # gb = p - onehot; Fisher = mean of elementwise squares
        spec, x, y = self.spec_and_data()
        params = init_params(spec, np.random.default_rng(7))
        W, b = params.segment("w0"), params.segment("b0")
        expected = np.zeros(spec.n_params)
        for i in range(2):
            z = x[i] @ W + b
            p = np.exp(z - z.max())
            p /= p.sum()
            p[y[i]] -= 1.0
            g = np.concatenate([np.outer(x[i], p).ravel(), p])
            expected += g**2
        expected /= 2.0
        fisher = estimate_fisher(params, spec, x, y, budget=10, rng=np.random.default_rng(0))
        np.testing.assert_allclose(fisher, expected, atol=1e-12)
        assert np.all(fisher >= 0.0)

    def test_empty_data_rejected(self):
        spec, _, _ = self.spec_and_data()
        params = init_params(spec, np.random.default_rng(0))
        with pytest.raises(ValueError):
            estimate_fisher(params, spec, np.zeros((0, 2)), np.zeros(0, dtype=int), 4, np.random.default_rng(0))


class TestSi:
    def test_no_movement_no_penalty(self):
        state = SiState(xi=0.1)
        theta = np.array([0.5, -0.5])
        state.begin_task(theta)
        si_consolidate(state, theta)
        assert np.array_equal(state.omega, np.zeros(2))
        assert si_penalty(state, theta + 1.0, lam=3.0) == 0.0  # omega is zero

    def test_single_step_hand_value(self):
        # w = -g * dtheta = 0.1; omega += 0.1 / (0.1^2 + 0.1) = 0.909090...
        state = SiState(xi=0.1)
        state.begin_task(np.array([0.0]))
        si_update(state, np.array([-1.0]), np.array([0.0]), np.array([0.1]))
        assert state.w[0] == pytest.approx(0.1, abs=1e-15)
        si_consolidate(state, np.array([0.1]))
        assert state.omega[0] == pytest.approx(0.9090909090909091, abs=1e-12)

    def test_negative_credit_clamped(self):
        state = SiState(xi=0.5)
        state.begin_task(np.array([0.0]))
        si_update(state, np.array([1.0]), np.array([0.0]), np.array([0.2]))  # w = -0.2
        si_consolidate(state, np.array([0.2]))
        assert state.omega[0] == 0.0

    def test_consolidate_before_updates_is_legal(self):
        state = SiState(xi=0.1)
        si_consolidate(state, np.array([1.0, 2.0]))
        assert np.array_equal(state.omega, np.zeros(2))

    def test_penalty_and_gradient_consistent(self):
        state = SiState(xi=0.1)
        state.begin_task(np.zeros(3))
        si_update(state, np.array([-1.0, -2.0, 0.5]), np.zeros(3), np.array([0.1, 0.2, -0.1]))
        si_consolidate(state, np.array([0.1, 0.2, -0.1]))
        theta = np.array([0.4, 0.1, 0.0])
        penalty = si_penalty(state, theta, lam=2.0)
        expected = 2.0 * np.sum(state.omega * (theta - state.theta_ref) ** 2)
        assert penalty == pytest.approx(expected, abs=1e-15)
        assert penalty > 0.0

    def test_incongruent_vectors_rejected(self):
        state = SiState()
        state.begin_task(np.zeros(2))
        with pytest.raises(ValueError):
            si_update(state, np.zeros(3), np.zeros(2), np.zeros(2))


class TestLwfKd:
    def test_identical_distributions_zero(self):
        logits = np.array([[1.0, -2.0, 0.5], [0.0, 0.0, 3.0]])
        assert lwf_kd_loss(logits, logits.copy(), tau=2.0, alpha=2.0) == 0.0

    def test_two_class_hand_value(self):
        # KL([.5,.5] || [.75,.25]) = 0.143841...
        teacher = np.array([[0.0, 0.0]])
        student = np.array([[np.log(3.0), 0.0]])
        assert lwf_kd_loss(teacher, student, tau=1.0, alpha=1.0) == pytest.approx(
            0.14384103622589034, abs=1e-12
        )

    def test_shift_invariance(self):
        rng = np.random.default_rng(0)
        teacher, student = rng.normal(size=(4, 5)), rng.normal(size=(4, 5))
        base = lwf_kd_loss(teacher, student, tau=2.0, alpha=1.5)
        shifted = lwf_kd_loss(teacher + 7.0, student - 3.0, tau=2.0, alpha=1.5)
        assert shifted == pytest.approx(base, abs=1e-10)

    def test_nonnegative_and_positive_off_identity(self):
        rng = np.random.default_rng(1)
        for _ in range(20):
            teacher, student = rng.normal(size=(3, 4)), rng.normal(size=(3, 4))
            assert lwf_kd_loss(teacher, student, tau=2.0, alpha=1.0) > 0.0

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ValueError):
            lwf_kd_loss(np.zeros((1, 2)), np.zeros((1, 3)), tau=1.0, alpha=1.0)

    def test_dlogits_matches_finite_difference(self):
        rng = np.random.default_rng(2)
        teacher, student = rng.normal(size=(2, 3)), rng.normal(size=(2, 3))
        grad = lwf_kd_dlogits(teacher, student, tau=2.0, alpha=1.5)
        h = 1e-6
        for r in range(2):
            for c in range(3):
                up, down = student.copy(), student.copy()
                up[r, c] += h
                down[r, c] -= h
                numeric = (
                    lwf_kd_loss(teacher, up, 2.0, 1.5) - lwf_kd_loss(teacher, down, 2.0, 1.5)
                ) / (2 * h)
                assert grad[r, c] == pytest.approx(numeric, abs=1e-7)


class TestReservoir:
    def test_under_capacity_keeps_everything(self):
        buf = MemoryBuffer(capacity=10, policy="reservoir")
        rng = np.random.default_rng(0)
        for i in range(7):
            reservoir_insert(buf, np.array([float(i)]), i % 2, 1, rng)
        assert len(buf) == 7
        assert [f[0] for f in buf.features] == [float(i) for i in range(7)]

    def test_zero_capacity_stays_empty(self):
        buf = MemoryBuffer(capacity=0, policy="reservoir")
        rng = np.random.default_rng(0)
        for i in range(50):
            reservoir_insert(buf, np.zeros(1), 0, 1, rng)
        assert len(buf) == 0
        assert buf.seen == 50

    def test_wrong_policy_rejected(self):
        buf = MemoryBuffer(capacity=4, policy="class-balanced-greedy")
        with pytest.raises(ValueError):
            reservoir_insert(buf, np.zeros(1), 0, 1, np.random.default_rng(0))

    def test_full_buffer_stays_at_capacity(self):
        buf = MemoryBuffer(capacity=5, policy="reservoir")
        rng = np.random.default_rng(1)
        for i in range(100):
            reservoir_insert(buf, np.array([float(i)]), 0, 1, rng)
        assert len(buf) == 5
        assert buf.seen == 100


class TestGdumbBuffer:
    def test_two_phase_stream_balances(self):
        buf = MemoryBuffer(capacity=4, policy="class-balanced-greedy")
        rng = np.random.default_rng(0)
        for _ in range(10):
            gdumb_insert_balanced(buf, np.zeros(1), 0, 1, rng)
        for _ in range(10):
            gdumb_insert_balanced(buf, np.zeros(1), 1, 2, rng)
        assert buf.class_counts() == {0: 2, 1: 2}

    def test_single_class_fills(self):
        buf = MemoryBuffer(capacity=3, policy="class-balanced-greedy")
        rng = np.random.default_rng(0)
        for _ in range(9):
            gdumb_insert_balanced(buf, np.zeros(1), 7, 1, rng)
        assert buf.class_counts() == {7: 3}

    def test_odd_capacity_differs_by_one(self):
        buf = MemoryBuffer(capacity=3, policy="class-balanced-greedy")
        rng = np.random.default_rng(0)
        for _ in range(10):
            gdumb_insert_balanced(buf, np.zeros(1), 0, 1, rng)
        for _ in range(10):
            gdumb_insert_balanced(buf, np.zeros(1), 1, 2, rng)
        counts = sorted(buf.class_counts().values())
        assert abs(counts[-1] - counts[0]) == 1

    @given(
        st.integers(1, 4),
        st.integers(5, 20),
        st.integers(0, 2**31 - 1),
    )
    @settings(max_examples=80, deadline=None)
    def test_balance_invariant_saturating_sequences(self, n_classes, capacity, seed):
        # the sampler fills greedily while there is room, so the <=1 balance
        # guarantee applies once every class has streamed past at least
        # `capacity` arrivals
        rng = np.random.default_rng(seed)
        labels = np.repeat(np.arange(n_classes), capacity)
        labels = labels[rng.permutation(labels.size)]
        buf = MemoryBuffer(capacity=capacity, policy="class-balanced-greedy")
        for i, label in enumerate(labels):
            gdumb_insert_balanced(buf, np.array([float(i)]), label, 1, rng)
            assert len(buf) <= capacity
        counts = buf.class_counts()
        assert len(buf) == capacity
        assert max(counts.values()) - min(counts.values()) <= 1


class TestAgemProject:
    def test_satisfied_constraint_unchanged(self):
        g = np.array([1.0, 1.0])
        out = agem_project(g, np.array([0.0, 1.0]))
        assert np.array_equal(out, g)

    def test_violating_gradient_projected(self):
        out = agem_project(np.array([2.0, -1.0]), np.array([0.0, 1.0]))
        assert np.array_equal(out, np.array([2.0, 0.0]))

    def test_antiparallel_zeroed(self):
        out = agem_project(np.array([1.0, 0.0]), np.array([-1.0, 0.0]))
        assert np.array_equal(out, np.array([0.0, 0.0]))

    def test_length_mismatch_rejected(self):
        with pytest.raises(ValueError):
            agem_project(np.zeros(2), np.zeros(3))

    @given(st.integers(0, 10_000))
    @settings(max_examples=100, deadline=None)
    def test_projection_properties(self, seed):
        rng = np.random.default_rng(seed)
        dim = int(rng.integers(2, 50))
        g, g_ref = rng.normal(size=dim), rng.normal(size=dim)
        out = agem_project(g, g_ref)
        assert out @ g_ref >= -1e-9
        assert np.allclose(agem_project(out, g_ref), out)  # idempotent


def cone_width_degrees(G):
    thetas = np.linspace(0, 2 * np.pi, 7200, endpoint=False)
    U = np.stack([np.cos(thetas), np.sin(thetas)], axis=1)
    return np.all(U @ G.T >= 0.0, axis=1).sum() * (360.0 / 7200)


def brute_force_projection_2d(g, G):
    """Independent oracle: enumerate feasible cone directions on a refined
    angular grid, projecting g onto each ray (the ray projection is the
    elementary r = max(0, u.g)), and keep the closest point.

    A cartesian point grid fails when a cone boundary nearly aligns with the
    grid axes: the best feasible grid point can sit far from the optimum
    along that boundary. Direction enumeration has no alignment pathology.
    """
    best = np.zeros(2)  # cone vertex, always feasible
    best_obj = float(np.linalg.norm(best - g))
    theta_lo, theta_hi = 0.0, 2.0 * np.pi
    for resolution in (20000, 2000, 2000):
        thetas = np.linspace(theta_lo, theta_hi, resolution)
        U = np.stack([np.cos(thetas), np.sin(thetas)], axis=1)
        feasible = np.all(U @ G.T >= 0.0, axis=1)
        if not feasible.any():
            break
        U, thetas = U[feasible], thetas[feasible]
        radii = np.maximum(0.0, U @ g)
        points = U * radii[:, None]
        obj = np.linalg.norm(points - g, axis=1)
        i = int(np.argmin(obj))
        if obj[i] < best_obj:
            best, best_obj = points[i], float(obj[i])
        step = (theta_hi - theta_lo) / (resolution - 1)
        theta_lo, theta_hi = thetas[i] - 3 * step, thetas[i] + 3 * step
    return best


class TestGemProject:
    def test_feasible_gradient_unchanged(self):
        g = np.array([1.0, 1.0])
        result = gem_project(g, np.array([[1.0, 0.0], [0.0, 1.0]]))
        assert not result.projected
        assert np.array_equal(result.grad, g)

    def test_single_halfspace_equals_closed_form(self):
        g = np.array([1.0, -1.0])
        result = gem_project(g, np.array([[0.0, 1.0]]))
        np.testing.assert_allclose(result.grad, [1.0, 0.0], atol=1e-9)

    def test_opposed_corner_goes_to_origin(self):
        result = gem_project(np.array([-1.0, -1.0]), np.array([[1.0, 0.0], [0.0, 1.0]]))
        np.testing.assert_allclose(result.grad, [0.0, 0.0], atol=1e-9)

    def test_matches_grid_oracle(self):
        rng = np.random.default_rng(0)
        checked = 0
        while checked < 10:
            g = rng.normal(size=2) * 2
            G = rng.normal(size=(int(rng.integers(1, 4)), 2))
            if cone_width_degrees(G) < 5.0:
                # (near-)empty cones exercise the flagged fallback path, where
                # the output is not the Euclidean projection by design
                continue
            checked += 1
            result = gem_project(g, G)
            oracle = brute_force_projection_2d(g, G)
            assert np.linalg.norm(result.grad - oracle) < 1e-3

    @given(st.integers(0, 10_000))
    @settings(max_examples=100, deadline=None)
    def test_feasibility_and_idempotence(self, seed):
        rng = np.random.default_rng(seed)
        dim = int(rng.integers(5, 60))
        k = int(rng.integers(1, 6))
        g = rng.normal(size=dim)
        G = rng.normal(size=(k, dim))
        result = gem_project(g, G)
        assert np.min(G @ result.grad) >= -1e-7
        again = gem_project(result.grad, G)
        assert not again.projected or np.allclose(again.grad, result.grad, atol=1e-6)

    def test_zero_tol_rejected(self):
        with pytest.raises(ValueError):
            gem_project(np.zeros(2), np.zeros((1, 2)), tol=0.0)


# ---------------------------------------------------------------------------
# Session lifecycle


def tiny_stream(n_tasks=2, seed=0):
    manifest = scenarios.synthetic_di_manifest(
        seed=seed, n_tasks=n_tasks, train_per_class=12, test_per_class=4, dim=4
    )
    return scenarios.build_stream(manifest)


def tiny_setup(kind="Naive", seed=3, n_tasks=2, **cfg_kw):
    stream = tiny_stream(n_tasks=n_tasks)
    spec = ModelSpec(input_dim=stream.feature_dim, hidden_dims=(6,), output_dim=stream.n_classes)
    strategy = make_strategy(StrategyConfig(kind, **cfg_kw), spec, master_seed=seed)
    model = Model(spec=spec, params=init_params(spec, strategy.rngs.init_rng()))
    cfg = TrainConfig(epochs=2, batch_size=4, learning_rate=1e-2)
    return stream, spec, strategy, model, cfg


class TestTrainTask:
    def test_out_of_order_session_rejected(self):
        stream, _, strategy, model, cfg = tiny_setup()
        with pytest.raises(SessionOrderError):
            train_task(strategy, model, stream, 2, cfg)
        model = train_task(strategy, model, stream, 1, cfg)
        with pytest.raises(SessionOrderError):
            train_task(strategy, model, stream, 1, cfg)

    def test_naive_equals_plain_fine_tuning(self):
        # re-derive the expected weights with a hand-rolled loop over task t only
        stream, spec, strategy, model, cfg = tiny_setup()
        out = train_task(strategy, model, stream, 1, cfg)

        params = init_params(spec, np.random.default_rng(np.random.SeedSequence([3, 0]))).copy()
        adam = AdamState.fresh(len(params), cfg.learning_rate)
        x, y = stream.tasks[0].train_x, stream.tasks[0].train_y
        for epoch in range(cfg.epochs):
            order = np.random.default_rng(np.random.SeedSequence([3, 1, 1, epoch])).permutation(len(y))
            for s in range(0, len(y), cfg.batch_size):
                idx = order[s : s + cfg.batch_size]
                grad = ndcore.backward(params, spec, x[idx], y[idx])
                params, adam = adam_step(adam, params, grad)
        assert np.array_equal(out.params.values, params.values)

    def test_naive_touches_only_current_task(self):
        stream, _, strategy, model, cfg = tiny_setup()
        access = StreamAccess.from_stream(stream)
        model = train_task(strategy, model, access, 1, cfg)
        train_task(strategy, model, access, 2, cfg)
        assert access.accessed_in(1) == {1}
        assert access.accessed_in(2) == {2}

    def test_cumulative_retrains_from_scratch_on_union(self):
        stream, spec, strategy, model, cfg = tiny_setup("Cumulative")
        model = train_task(strategy, model, stream, 1, cfg)
        out = train_task(strategy, model, stream, 2, cfg)

        params = init_params(spec, np.random.default_rng(np.random.SeedSequence([3, 0]))).copy()
        adam = AdamState.fresh(len(params), cfg.learning_rate)
        x = np.vstack([stream.tasks[0].train_x, stream.tasks[1].train_x])
        y = np.concatenate([stream.tasks[0].train_y, stream.tasks[1].train_y])
        for epoch in range(cfg.epochs):
            order = np.random.default_rng(np.random.SeedSequence([3, 1, 2, epoch])).permutation(len(y))
            for s in range(0, len(y), cfg.batch_size):
                idx = order[s : s + cfg.batch_size]
                grad = ndcore.backward(params, spec, x[idx], y[idx])
                params, adam = adam_step(adam, params, grad)
        assert np.array_equal(out.params.values, params.values)

    def test_rogue_access_is_violation(self):
        stream, _, strategy, model, cfg = tiny_setup()

        original = strategy.session_data

        def rogue(access, t):
            access.train(2)  # peeks at a future/other task
            return original(access, t)

        strategy.session_data = rogue
        with pytest.raises(AccessViolation):
            train_task(strategy, model, stream, 1, cfg)

    def test_cumulative_and_joint_are_allowed_unions(self):
        stream, _, strategy, model, cfg = tiny_setup("Cumulative")
        model = train_task(strategy, model, stream, 1, cfg)
        train_task(strategy, model, stream, 2, cfg)

        stream2, _, joint, model2, cfg2 = tiny_setup("Joint")
        train_task(joint, model2, stream2, 1, cfg2)

    @pytest.mark.parametrize("kind,kw", [
        ("Naive", {}),
        ("Cumulative", {}),
        ("EWC", {"lam": 0.5, "fisher_budget": 4}),
        ("LwF", {"alpha": 1.0}),
        ("SI", {"lam": 0.5}),
        ("Replay", {"memory_size": 6}),
        ("GDumb", {"memory_size": 6}),
        ("GEM", {"per_task_memory": 4}),
        ("AGEM", {"per_task_memory": 4}),
    ])
    def test_every_regime_stays_within_declared_tasks(self, kind, kw):
        stream, spec, strategy, model, cfg = tiny_setup(kind, n_tasks=3, **kw)
        access = StreamAccess.from_stream(stream)
        for t in (1, 2, 3):
            model = train_task(strategy, model, access, t, cfg)
            expected = set(range(1, t + 1)) if kind == "Cumulative" else {t}
            assert access.accessed_in(t) == expected

    def test_joint_accesses_all_tasks_once(self):
        stream, _, strategy, model, cfg = tiny_setup("Joint", n_tasks=3)
        access = StreamAccess.from_stream(stream)
        train_task(strategy, model, access, 1, cfg)
        assert access.accessed_in(1) == {1, 2, 3}


class TestDegeneracyToNaive:
    @pytest.mark.parametrize(
        "kind,kw",
        [
            ("EWC", {"lam": 0.0}),
            ("SI", {"lam": 0.0}),
            ("LwF", {"alpha": 0.0}),
            ("Replay", {"memory_size": 0}),
        ],
    )
    def test_disabled_extras_match_naive_bitwise(self, kind, kw):
        stream = tiny_stream(n_tasks=2)
        spec = ModelSpec(input_dim=stream.feature_dim, hidden_dims=(6,), output_dim=2)
        cfg = TrainConfig(epochs=2, batch_size=4, learning_rate=1e-2)

        def run(kind, kw):
            strategy = make_strategy(StrategyConfig(kind, **kw), spec, master_seed=11)
            model = Model(spec=spec, params=init_params(spec, strategy.rngs.init_rng()))
            for t in (1, 2):
                model = train_task(strategy, model, stream, t, cfg)
            return model.params.values

        assert np.array_equal(run(kind, kw), run("Naive", {}))


class TestGDumbDeterminism:
    def test_identical_buffer_and_seed_identical_model(self):
        # one strategy sees tasks A then B in two sessions; another sees the
        # same samples streamed in a single session. Buffers end identical,
        # so the retrained models must match bitwise.
        stream = tiny_stream(n_tasks=2)
        a, b = stream.tasks[0], stream.tasks[1]
        spec = ModelSpec(input_dim=stream.feature_dim, hidden_dims=(6,), output_dim=2)
        cfg = TrainConfig(epochs=2, batch_size=4, learning_rate=1e-2)

        two = make_strategy(StrategyConfig("GDumb", memory_size=10), spec, master_seed=5)
        model = Model(spec=spec, params=init_params(spec, two.rngs.init_rng()))
        model = train_task(two, model, StreamAccess([(a.train_x, a.train_y), (b.train_x, b.train_y)]), 1, cfg)
        model = train_task(two, model, StreamAccess([(a.train_x, a.train_y), (b.train_x, b.train_y)]), 2, cfg)

        merged_x = np.vstack([a.train_x, b.train_x])
        merged_y = np.concatenate([a.train_y, b.train_y])
        one = make_strategy(StrategyConfig("GDumb", memory_size=10), spec, master_seed=5)
        single = Model(spec=spec, params=init_params(spec, one.rngs.init_rng()))
        single = train_task(one, single, StreamAccess([(merged_x, merged_y)]), 1, cfg)

        assert one.buffer.labels == two.buffer.labels
        assert np.array_equal(
            np.asarray(one.buffer.features), np.asarray(two.buffer.features)
        )
        assert np.array_equal(single.params.values, model.params.values)


class TestEpisodicStrategies:
    def test_gem_ring_keeps_last_samples(self):
        stream, _, strategy, model, cfg = tiny_setup("GEM", per_task_memory=5)
        model = train_task(strategy, model, stream, 1, cfg)
        x, y = strategy.memories[1]
        assert x.shape[0] == 5
        assert np.array_equal(x, stream.tasks[0].train_x[-5:])

    def test_gem_projection_counter_advances(self):
        stream, _, strategy, model, cfg = tiny_setup("GEM", per_task_memory=8, n_tasks=3)
        for t in (1, 2, 3):
            model = train_task(strategy, model, stream, t, cfg)
        assert strategy.diagnostics.get("projections", 0) >= 0  # smoke: counters exist

    def test_agem_projects_against_memory(self):
        stream, _, strategy, model, cfg = tiny_setup("AGEM", per_task_memory=8, n_tasks=3)
        for t in (1, 2, 3):
            model = train_task(strategy, model, stream, t, cfg)
        assert len(strategy.memories) == 3


class TestStateSerialization:
    @pytest.mark.parametrize(
        "kind,kw",
        [
            ("EWC", {"lam": 0.5, "fisher_budget": 8}),
            ("SI", {"lam": 0.5}),
            ("LwF", {"alpha": 1.0, "tau": 2.0}),
            ("Replay", {"memory_size": 9}),
            ("GEM", {"per_task_memory": 4}),
        ],
    )
    def test_round_trip(self, tmp_path, kind, kw):
        stream, spec, strategy, model, cfg = tiny_setup(kind, **kw)
        model = train_task(strategy, model, stream, 1, cfg)
        path = tmp_path / "state.cls"
        save_strategy_state(strategy, path)

        clone = make_strategy(StrategyConfig(kind, **kw), spec, master_seed=3)
        load_strategy_state(clone, path)
        assert clone.completed == 1
        if kind == "EWC":
            assert len(clone.state.anchors) == 1
            np.testing.assert_array_equal(clone.state.anchors[0][1], strategy.state.anchors[0][1])
        elif kind == "SI":
            np.testing.assert_array_equal(clone.state.omega, strategy.state.omega)
        elif kind == "LwF":
            assert clone.teacher is None  # no teacher before task 2
        elif kind == "Replay":
            assert clone.buffer.labels == strategy.buffer.labels
            assert clone.buffer.seen == strategy.buffer.seen
        elif kind == "GEM":
            np.testing.assert_array_equal(clone.memories[1][0], strategy.memories[1][0])

    def test_lwf_teacher_snapshot_serialized_after_second_task(self, tmp_path):
        stream, spec, strategy, model, cfg = tiny_setup("LwF", alpha=1.0, tau=2.0)
        model = train_task(strategy, model, stream, 1, cfg)
        model = train_task(strategy, model, stream, 2, cfg)
        assert strategy.teacher is not None
        path = tmp_path / "state.cls"
        save_strategy_state(strategy, path)
        clone = make_strategy(StrategyConfig("LwF", alpha=1.0, tau=2.0), spec, master_seed=3)
        load_strategy_state(clone, path)
        np.testing.assert_array_equal(clone.teacher.params.values, strategy.teacher.params.values)


class TestStrategyConfig:
    def test_unknown_kind_rejected(self):
        with pytest.raises(ValueError, match="kind"):
            StrategyConfig("Foo")

    @pytest.mark.parametrize(
        "kw",
        [
            {"lam": -1.0},
            {"tau": 0.0},
            {"memory_size": -1},
            {"per_task_memory": -2},
            {"fisher_budget": 0},
            {"xi": 0.0},
        ],
    )
    def test_invalid_fields_rejected(self, kw):
        with pytest.raises(ValueError):
            StrategyConfig("EWC", **kw)

    def test_labels_are_descriptive(self):
        assert StrategyConfig("Replay", memory_size=500).label() == "Replay(mem=500)"
        assert StrategyConfig("Naive").label() == "Naive"
