import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mairl.approx import Mlp, Table, numeric_gradient, relative_error
from mairl.envs import GemsConfig, GemsEnv, MatrixGameConfig, MatrixGameEnv, random_matrix_game
from mairl.exact_solver import boltzmann, equilibrium_fixed_point, generate_expert_dataset, marginalize
from mairl.mamql import (
    ActionHead,
    Batch,
    Encoder,
    JointHead,
    MamqlConfig,
    MamqlTrainer,
    MarginalCritic,
    RewardModel,
    act,
    critic_loss,
    make_batch,
    opponent_tuples,
    phi,
    phi_grad,
    reward_estimate,
    reward_loss,
    train,
)
from mairl.markov_game import joint_from_index


def table_critic(table, lam=1.0, agent=0, tau=None):
    return MarginalCritic(ActionHead(Table.from_params([np.asarray(table, dtype=float)])), lam, agent, 1e-3, tau)


def table_reward(n_states, n_agents, n_actions, agent=0, init=0.0):
    return RewardModel(JointHead(Table(n_states, n_actions**n_agents, init), n_agents, n_actions), agent, 1e-2)


def random_batch(rng, S, A, B, n_agents=1, p_done=0.2):
    return Batch(rng.integers(S, size=B), rng.integers(S, size=B),
                 rng.integers(A, size=(B, n_agents)), rng.random(B) < p_done)


# --- phi ------------------------------------------------------------------------

class TestPhi:
    def test_examples(self):
        assert phi(0.0, "pearson") == 0.0
        assert phi(2.0, "pearson") == 1.0
        assert phi(-3.5, "linear") == -3.5

    def test_unknown(self):
        with pytest.raises(ValueError):
            phi(1.0, "kl")
        with pytest.raises(ValueError):
            MamqlConfig(phi="kl")

    @given(st.floats(-1e3, 1e3), st.floats(-1e3, 1e3), st.sampled_from(["linear", "pearson"]))
    def test_concave(self, x, y, kind):
        assert phi((x + y) / 2, kind) >= (phi(x, kind) + phi(y, kind)) / 2 - 1e-9 * (1 + x * x + y * y)

    @given(st.floats(-100, 100), st.sampled_from(["linear", "pearson"]))
    def test_derivative(self, x, kind):
        h = 1e-6
        fd = (phi(x + h, kind) - phi(x - h, kind)) / (2 * h)
        assert abs(fd - phi_grad(x, kind)) < 1e-5 * (1 + abs(x))


# --- reward_estimate ----------------------------------------------------------------

class TestRewardEstimate:
    def test_gamma_zero(self, rng):
        q = rng.normal(size=(6, 3))
        b = random_batch(rng, 6, 3, 10, p_done=0.0)
        assert np.array_equal(reward_estimate(table_critic(q), b, 0.0), q[b.s, b.actions[:, 0]])

    def test_terminal(self, rng):
        q = rng.normal(size=(6, 3))
        b = random_batch(rng, 6, 3, 10, p_done=1.1)
        assert np.array_equal(reward_estimate(table_critic(q), b, 0.9), q[b.s, b.actions[:, 0]])

    def test_matches_exact_marginal_reward(self, tiny_gems):
        # the implied reward of the exact marginal soft-Q function, with the
        # successor expectation enumerated, is the opponent-averaged reward
        model = tiny_gems.tabular_model()
        eq = equilibrium_fixed_point(model, lam=1.0, tol=1e-9, q_tol=1e-13, max_iter=2000)
        probs = eq.policies.probs
        n, S, A = probs.shape
        J, K = model.joint_count, model.next_states.shape[-1]
        for i in range(n):
            critic = table_critic(eq.critics[i].table, agent=i)
            s_ids = np.repeat(np.arange(S), J * K)
            j_ids = np.tile(np.repeat(np.arange(J), K), S)
            k_ids = np.tile(np.arange(K), S * J)
            done = model.done[s_ids, j_ids]
            nxt = np.where(done, s_ids, model.next_states[s_ids, j_ids, k_ids])
            joints = np.array([joint_from_index(j, n, A) for j in range(J)])[j_ids]
            est = reward_estimate(critic, Batch(s_ids, nxt, joints, done), model.gamma)
            w = model.next_probs[s_ids, j_ids, k_ids].copy()
            for k in range(n):
                if k != i:
                    w *= probs[k, s_ids, joints[:, k]]
            implied = np.zeros((S, A))
            np.add.at(implied, (s_ids, joints[:, i]), w * est)
            exact = marginalize(model.rewards[i], probs, i)
            assert np.max(np.abs(implied - exact)) < 1e-9


# --- critic_loss ---------------------------------------------------------------------

class TestCriticLoss:
    def test_gamma_zero_linear_substitution(self, rng):
        q = rng.normal(size=(5, 4))
        c = table_critic(q, lam=1.0)
        e, r = random_batch(rng, 5, 4, 7), random_batch(rng, 5, 4, 9)
        loss, _ = critic_loss(c, e, r, 0.0, "linear")
        v = np.log(np.sum(np.exp(q), axis=1))
        assert loss == pytest.approx(np.mean(v[r.s]) - np.mean(q[e.s, e.actions[:, 0]]), abs=1e-12)

    def test_offline_form(self, rng):
        q = rng.normal(size=(5, 4))
        c = table_critic(q)
        e = random_batch(rng, 5, 4, 7)
        init = rng.integers(5, size=6)
        loss, _ = critic_loss(c, e, None, 0.8, "linear", mode="offline", initial=init)
        v = np.log(np.sum(np.exp(q), axis=1))
        expert = np.mean(q[e.s, e.actions[:, 0]] - 0.8 * (~e.done) * v[e.s_next])
        assert loss == pytest.approx(0.2 * np.mean(v[init]) - expert, abs=1e-12)

    def test_empty_batches(self, rng):
        c = table_critic(np.zeros((3, 2)))
        b = random_batch(rng, 3, 2, 4)
        empty = random_batch(rng, 3, 2, 0)
        with pytest.raises(ValueError):
            critic_loss(c, empty, b, 0.9)
        with pytest.raises(ValueError):
            critic_loss(c, b, empty, 0.9)
        with pytest.raises(ValueError):
            critic_loss(c, b, None, 0.9, mode="offline")

    def test_stationary_at_expert_fixed_point(self):
        # expert and rollout transitions share one distribution and the critic
        # is the exact marginal soft-Q function whose Boltzmann policy is the
        # expert's: the expected gradient vanishes
        env = MatrixGameEnv(random_matrix_game(np.random.default_rng(4), n_states=2, n_agents=2,
                                               action_count=3, horizon=3))
        model = env.tabular_model()
        eq = equilibrium_fixed_point(model, lam=1.0, tol=1e-12, q_tol=1e-14, max_iter=5000)
        probs = eq.policies.probs
        n, S, A = probs.shape
        for i in range(n):
            critic = table_critic(eq.critics[i].table, agent=i)
            total = np.zeros((S, A))
            for s in range(S):
                for j in range(model.joint_count):
                    a = joint_from_index(j, n, A)
                    p_a = np.prod([probs[k, s, a[k]] for k in range(n)])
                    for k in range(model.next_states.shape[-1]):
                        w = p_a * model.next_probs[s, j, k] / S
                        if w == 0.0:
                            continue
                        done = bool(model.done[s, j])
                        nxt = s if done else int(model.next_states[s, j, k])
                        b = Batch(np.array([s]), np.array([nxt]), np.array([a]), np.array([done]))
                        _, g = critic_loss(critic, b, b, model.gamma, "linear")
                        total += w * np.asarray(g[0])
            assert np.linalg.norm(total) < 1e-6

    @pytest.mark.parametrize("backend", ["table", "mlp"])
    def test_finite_differences(self, backend):
        rng = np.random.default_rng(11)
        S, A = 5, 3
        for draw in range(20):
            tau = [None, 0.1][draw % 2]
            mode = ["online", "offline"][(draw // 2) % 2]
            kind = ["linear", "pearson"][(draw // 4) % 2]
            lam = float(rng.uniform(0.3, 2.0))
            if backend == "table":
                head = ActionHead(Table.from_params([rng.normal(size=(S, A))]))
                mk = lambda B: random_batch(rng, S, A, B)
                init = rng.integers(S, size=4)
            else:
                head = ActionHead(Mlp([4, 6, 6, A], rng))
                mk = lambda B: Batch(rng.normal(size=(B, 4)), rng.normal(size=(B, 4)),
                                     rng.integers(A, size=(B, 1)), rng.random(B) < 0.2)
                init = rng.normal(size=(4, 4))
            critic = MarginalCritic(head, lam, 0, 1e-3, tau)
            if critic.target is not None:
                for p in critic.target.params:
                    p += rng.normal(scale=0.3, size=p.shape)
            e, r = mk(6), mk(6)

            def loss():
                return critic_loss(critic, e, r, 0.9, kind, mode, init)[0]

            _, g = critic_loss(critic, e, r, 0.9, kind, mode, init)
            assert relative_error(g, numeric_gradient(loss, critic.head.params)) < 1e-4

    def _midpoint_trials(self, mode, kind, same_batches, trials=1000):
        # the minimized loss is convex in the critic table, i.e. the inverse
        # soft-Q objective (its negation) is concave
        rng = np.random.default_rng(5)
        S, A = 6, 3
        for _ in range(trials):
            e = random_batch(rng, S, A, 8)
            r = e if same_batches else random_batch(rng, S, A, 8)
            init = rng.integers(S, size=4)
            q1, q2 = rng.normal(scale=3.0, size=(2, S, A))

            def f(q):
                return critic_loss(table_critic(q), e, r, 0.9, kind, mode, init)[0]

            assert f((q1 + q2) / 2) <= (f(q1) + f(q2)) / 2 + 1e-10

    @pytest.mark.parametrize("kind", ["linear", "pearson"])
    def test_concave_objective_offline(self, kind):
        self._midpoint_trials("offline", kind, same_batches=False)

    def test_concave_objective_online_pearson(self):
        self._midpoint_trials("online", "pearson", same_batches=False)

    def test_concave_objective_online_linear_shared_batch(self):
        self._midpoint_trials("online", "linear", same_batches=True)


# --- reward_loss ------------------------------------------------------------------------

class TestRewardLoss:
    def test_constant_reward_zero_loss(self, rng):
        S, A = 4, 3
        critic = table_critic(np.full((S, A), 0.7))
        reward = table_reward(S, 2, A, init=0.7)
        b = random_batch(rng, S, A, 10, n_agents=2)
        opp = rng.dirichlet(np.ones(A), size=(2, 10))
        loss, _ = reward_loss(reward, critic, opp, b, gamma=0.0, beta=0.0)
        assert loss == pytest.approx(0.0, abs=1e-24)

    def test_deterministic_opponent(self, rng):
        S, A, B = 4, 3, 10
        critic = table_critic(rng.normal(size=(S, A)))
        reward = table_reward(S, 2, A)
        reward.head.params[0][...] = rng.normal(size=(S, A * A))
        b = random_batch(rng, S, A, B, n_agents=2)
        opp = np.zeros((2, B, A))
        opp[:, :, 2] = 1.0
        beta = 0.01
        loss, _ = reward_loss(reward, critic, opp, b, 0.9, beta)
        table = reward.head.params[0]
        pred = table[b.s, b.actions[:, 0] * A + 2]
        target = reward_estimate(critic, b, 0.9)
        actual = table[b.s, b.actions[:, 0] * A + b.actions[:, 1]]
        assert loss == pytest.approx(np.mean((target - pred) ** 2) + beta * np.mean(actual**2), rel=1e-12)

    def test_target_is_constant(self, rng):
        S, A = 4, 3
        critic = table_critic(rng.normal(size=(S, A)))
        before = critic.head.params[0].copy()
        reward = table_reward(S, 2, A)
        b = random_batch(rng, S, A, 8, n_agents=2)
        _, grads = reward_loss(reward, critic, rng.dirichlet(np.ones(A), size=(2, 8)), b, 0.9)
        assert len(grads) == len(reward.head.params)
        assert np.array_equal(critic.head.params[0], before)

    def test_empty(self, rng):
        with pytest.raises(ValueError):
            reward_loss(table_reward(3, 2, 2), table_critic(np.zeros((3, 2))), np.zeros((2, 0, 2)),
                        random_batch(rng, 3, 2, 0, n_agents=2), 0.9)

    def test_one_sample_unbiased(self, rng):
        A, n, draws = 3, 3, 100_000
        values = rng.normal(size=(1, A**n))
        p = rng.dirichlet(np.ones(A), size=n)
        opp = np.repeat(p[:, None, :], draws, axis=1)
        i, a_i = 1, 2
        joints, _ = opponent_tuples(n, A, i, opp, "one-sample", rng, 4096)
        joints[:, :, i] = a_i
        cols = (joints[:, 0, 0] * A + joints[:, 0, 1]) * A + joints[:, 0, 2]
        samples = values[0, cols]
        ejoints, w = opponent_tuples(n, A, i, opp[:, :1], "enumerate", rng, 4096)
        ejoints[:, :, i] = a_i
        ecols = (ejoints[0, :, 0] * A + ejoints[0, :, 1]) * A + ejoints[0, :, 2]
        exact = float(np.sum(w[0] * values[0, ecols]))
        sigma = samples.std() / np.sqrt(draws)
        assert abs(samples.mean() - exact) < 3 * sigma

    def test_cap_falls_back_to_one_sample(self, rng):
        S, A = 3, 3
        critic = table_critic(rng.normal(size=(S, A)))
        reward = table_reward(S, 3, A)
        b = random_batch(rng, S, A, 5, n_agents=3)
        opp = rng.dirichlet(np.ones(A), size=(3, 5))
        # 9 opponent tuples exceed a cap of 4; the loss must still evaluate
        loss, _ = reward_loss(reward, critic, opp, b, 0.9, cap=4, rng=np.random.default_rng(0))
        assert np.isfinite(loss)

    def test_end_to_end_recovery(self):
        rng = np.random.default_rng(8)
        env = MatrixGameEnv(random_matrix_game(rng, n_states=3, n_agents=2, action_count=2, horizon=4))
        S, A = env.n_states, 2
        critic = table_critic(rng.normal(size=(S, A)))
        reward = table_reward(S, 2, A)
        reward.opt.lr = 0.05
        opp_policy = rng.dirichlet(np.ones(A), size=(2, S))
        enc = Encoder(env, "table")
        trans, state = [], env.reset(rng)
        from mairl.markov_game import Transition
        for _ in range(200):
            a = tuple(int(rng.integers(A)) for _ in range(2))
            nxt, r, done = env.step(state, a, rng)
            trans.append(Transition(state, a, nxt, done, tuple(r)))
            state = env.reset(rng) if done else nxt
        b = make_batch(trans, enc, 0)
        opp = opp_policy[:, b.s]
        for _ in range(3000):
            _, g = reward_loss(reward, critic, opp, b, env.spec.gamma, beta=0.0)
            reward.apply(g)
        # one-sample successor targets differ between visits of the same
        # (s, a_i); the regression recovers their average there
        target = reward_estimate(critic, b, env.spec.gamma)
        key = b.s * A + b.actions[:, 0]
        sums = np.bincount(key, weights=target, minlength=S * A)
        counts = np.bincount(key, minlength=S * A)
        table = reward.head.params[0].reshape(S, A, A)
        pred = np.einsum("bk,bk->b", opp[1], table[b.s, b.actions[:, 0]])
        assert np.max(np.abs(pred - sums[key] / counts[key])) < 1e-2


# --- act --------------------------------------------------------------------------------

class TestAct:
    def _frequencies(self, q, lam, draws, seed):
        critic = table_critic(q[None, :], lam)
        rng = np.random.default_rng(seed)
        counts = np.zeros(len(q))
        for _ in range(draws):
            counts[act([critic], [np.array(0)], rng)[0]] += 1
        return counts

    def test_constant_q_uniform(self):
        draws = 100_000
        counts = self._frequencies(np.zeros(5), 1.0, draws, 0)
        sigma = np.sqrt(draws * 0.2 * 0.8)
        assert np.all(np.abs(counts - draws * 0.2) < 3 * sigma)

    def test_boltzmann_chi_square(self):
        draws = 100_000
        q = np.array([0.3, -1.0, 1.2, 0.0, 0.5])
        counts = self._frequencies(q, 1.5, draws, 1)
        expected = draws * boltzmann(q, 1.5)
        chi2 = np.sum((counts - expected) ** 2 / expected)
        assert chi2 < 18.467  # 99.9% quantile of chi^2 with 4 degrees of freedom

    def test_high_lambda_argmax(self):
        counts = self._frequencies(np.array([0.0, 0.5, 1.0, 0.2, 0.1]), 100.0, 10_000, 2)
        assert counts[2] / counts.sum() >= 0.999

    def test_reproducible(self):
        crit = [table_critic(np.random.default_rng(3).normal(size=(4, 5)), agent=k) for k in range(2)]

        def seq(seed):
            rng = np.random.default_rng(seed)
            return [act(crit, [np.array(s), np.array(s)], rng) for s in [0, 1, 2, 3] * 5]

        assert seq(9) == seq(9)

    def test_joint_action_shape(self):
        crit = [table_critic(np.zeros((2, 3)), agent=k) for k in range(3)]
        a = act(crit, [np.array(1)] * 3, np.random.default_rng(0))
        assert len(a) == 3 and all(0 <= x < 3 for x in a)


# --- training ----------------------------------------------------------------------------

@pytest.fixture(scope="module")
def gems_setup():
    env = GemsEnv(GemsConfig(layout=["1RP", "2B."], horizon=4, gamma=0.9))
    eq = equilibrium_fixed_point(env.tabular_model(), lam=1.0)
    return env, generate_expert_dataset(env, eq, 200, seed=0)


def small_cfg(**kw):
    base = dict(batch_size=16, max_episodes=30, eval_interval=10, eval_episodes=5, alpha=0.05, seed=3)
    base.update(kw)
    return MamqlConfig(**base)


class TestTrain:
    def test_zero_episodes(self, gems_setup):
        env, data = gems_setup
        res = train(env, data, small_cfg(max_episodes=0))
        assert res.records == []
        assert len(res.critics) == 2 and len(res.reward_models) == 2
        assert all(np.all(c.head.params[0] == 0.0) for c in res.critics)

    def test_empty_dataset(self, gems_setup):
        with pytest.raises(ValueError):
            train(gems_setup[0], [], small_cfg())

    def test_capacity_default(self, gems_setup):
        tr = MamqlTrainer(gems_setup[0], gems_setup[1], small_cfg())
        assert tr.buffer.capacity == 400 * 4

    def test_records_and_buffer(self, gems_setup):
        env, data = gems_setup
        res = train(env, data, small_cfg())
        assert [r.episode for r in res.records] == [0, 10, 20, 30]
        tr = res.trainer
        assert tr.env_steps == 30 * 4 and len(tr.buffer) == 120
        assert all(np.isfinite(r.total_return) for r in res.records)

    @pytest.mark.parametrize("backend", ["table", "mlp"])
    def test_deterministic(self, gems_setup, backend):
        env, data = gems_setup
        a = train(env, data, small_cfg(backend=backend, hidden=8, depth=2))
        b = train(env, data, small_cfg(backend=backend, hidden=8, depth=2))
        assert [r.metric_key() for r in a.records] == [r.metric_key() for r in b.records]
        assert a.trainer.losses == b.trainer.losses
        for na, nb in zip(a.trainer.nets().values(), b.trainer.nets().values()):
            assert all(np.array_equal(p, q) for p, q in zip(na.params, nb.params))

    @pytest.mark.parametrize("backend", ["table", "mlp"])
    def test_checkpoint_resume_bit_exact(self, gems_setup, tmp_path, backend):
        env, data = gems_setup
        cfg = small_cfg(backend=backend, hidden=8, depth=2)
        full = MamqlTrainer(env, data, cfg)
        full.run()
        first = MamqlTrainer(env, data, cfg)
        first.run(stop_after=13)
        first.save(tmp_path / "ck")
        resumed = MamqlTrainer(env, data, cfg)
        resumed.load(tmp_path / "ck")
        assert resumed.episode == 13
        resumed.run()
        assert [r.metric_key() for r in resumed.records] == [r.metric_key() for r in full.records]
        assert resumed.losses == full.losses
        for na, nb in zip(full.nets().values(), resumed.nets().values()):
            assert all(np.array_equal(p, q) for p, q in zip(na.params, nb.params))

    def test_offline_and_one_sample_modes_run(self, gems_setup):
        env, data = gems_setup
        res = train(env, data, small_cfg(loss_mode="offline", opponent_mode="one-sample", max_episodes=10))
        assert len(res.records) == 2

    def test_constant_reward_geometric_series(self):
        # one state, one agent, one action, constant reward R, long horizon so
        # the start-state value is R / (1 - gamma) to within gamma^H
        R, gamma, H = 1.0, 0.9, 200
        env = MatrixGameEnv(MatrixGameConfig(payoffs=[[[R]]], n_agents=1, action_count=1,
                                             gamma=gamma, horizon=H))
        eq = equilibrium_fixed_point(env.tabular_model())
        data = generate_expert_dataset(env, eq, 2 * H, seed=0)
        cfg = MamqlConfig(batch_size=64, alpha=0.05, max_episodes=300, eval_interval=300,
                          eval_episodes=1, seed=0)
        res = train(env, data, cfg)
        q0 = res.critics[0].q(np.array([env.state_id(env.reset(np.random.default_rng(0)))]))[0, 0]
        assert q0 == pytest.approx(R / (1 - gamma), abs=1e-2)

    def test_constant_reward_implied_series(self):
        # the learned critic is a geometric sum of its own implied reward
        R, gamma, H = 1.0, 0.9, 200
        env = MatrixGameEnv(MatrixGameConfig(payoffs=[[[R]]], n_agents=1, action_count=1,
                                             gamma=gamma, horizon=H))
        eq = equilibrium_fixed_point(env.tabular_model())
        data = generate_expert_dataset(env, eq, 2 * H, seed=0)
        cfg = MamqlConfig(batch_size=64, alpha=0.05, max_episodes=300, eval_interval=300,
                          eval_episodes=1, seed=0)
        res = train(env, data, cfg)
        critic = res.critics[0]
        q = critic.head.params[0][:, 0]
        b = make_batch(data[:H], res.trainer.encoder, 0)
        r_bar = reward_estimate(critic, b, gamma)
        series = np.array([np.sum(r_bar[t:] * gamma ** np.arange(H - t)) for t in range(H)])
        assert np.max(np.abs(q[b.s] - series)) < 1e-9
