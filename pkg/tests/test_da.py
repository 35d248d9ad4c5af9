import numpy as np
import pytest

from coaltask.config import ModelConfig
from coaltask.da import (
    DaParams,
    InputModel,
    discrete_transition,
    em_fit_da,
    input_summary_message,
    leaf_messages_with_inputs,
    mstep_lambda,
    sample_da,
    sample_da_params,
    sample_task_data,
)
from coaltask.errors import InvalidArgumentError
from coaltask.glm import TaskDataset, WeightPosterior
from coaltask.tree import (
    GaussianMessage,
    bp_upward,
    greedy_rate1_build,
    sample_coalescent,
    star_tree,
)

from oracles import random_messages


class TestDiscreteTransition:
    def test_zero_duration_identity(self):
        q = np.array([0.2, 0.3, 0.5])
        np.testing.assert_allclose(discrete_transition(q, 2.0, 0.0), np.eye(3))

    def test_long_duration_equilibrium(self):
        q = np.array([0.1, 0.9])
        p = discrete_transition(q, 1.0, 60.0)
        np.testing.assert_allclose(p, np.tile(q, (2, 1)), atol=1e-8)

    def test_rows_stochastic(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            q = rng.dirichlet(np.ones(4))
            p = discrete_transition(q, rng.uniform(0, 3), rng.uniform(0, 10))
            np.testing.assert_allclose(p.sum(axis=1), np.ones(4), atol=1e-12)
            assert np.all(p >= 0)

    def test_rejects_bad_distribution(self):
        with pytest.raises(InvalidArgumentError):
            discrete_transition(np.array([0.5, 0.6]), 1.0, 1.0)


class TestMstepLambda:
    def test_zero_differences_give_identity_mode(self):
        # identical sibling means: Sigma = I, mode = I / (2D + K + 2)
        k, d = 4, 3
        tree = sample_coalescent(k, 0)
        msgs = [GaussianMessage(np.ones(d), 0.1 * np.eye(d)) for _ in range(k)]
        with_bp = bp_upward(tree, msgs, np.eye(d))
        lam = mstep_lambda(with_bp, np.eye(d))
        np.testing.assert_allclose(lam, np.eye(d) / (2 * d + k + 2), atol=1e-12)

    def test_diagonal_mode_matches_full_on_diagonal_inputs(self):
        k, d = 5, 3
        rng = np.random.default_rng(1)
        tree = sample_coalescent(k, 2)
        msgs_diag = random_messages(rng, k, d, diagonal=True)
        msgs_full = [GaussianMessage(m.mean, np.diag(m.var)) for m in msgs_diag]
        lam_d = mstep_lambda(bp_upward(tree, msgs_diag, np.ones(d)), np.ones(d))
        lam_f = mstep_lambda(bp_upward(tree, msgs_full, np.eye(d)), np.eye(d))
        np.testing.assert_allclose(np.diag(lam_f), lam_d, atol=1e-10)

    def test_output_psd_random(self):
        rng = np.random.default_rng(5)
        for trial in range(1000):
            k = int(rng.integers(2, 6))
            d = int(rng.integers(1, 4))
            tree = sample_coalescent(k, int(rng.integers(0, 10**6)))
            msgs = random_messages(rng, k, d)
            a = rng.standard_normal((d, d))
            lam0 = a @ a.T / d + 0.2 * np.eye(d)
            lam = mstep_lambda(bp_upward(tree, msgs, lam0), lam0)
            assert np.linalg.eigvalsh(lam).min() > -1e-12

    def test_larger_differences_increase_trace(self):
        k, d = 4, 2
        tree = sample_coalescent(k, 3)
        rng = np.random.default_rng(7)
        base = random_messages(rng, k, d)
        doubled = [GaussianMessage(2.0 * m.mean, m.var) for m in base]
        lam0 = np.eye(d)
        t1 = np.trace(mstep_lambda(bp_upward(tree, base, lam0), lam0))
        t2 = np.trace(mstep_lambda(bp_upward(tree, doubled, lam0), lam0))
        assert t2 > t1

    def test_requires_messages(self):
        tree = sample_coalescent(3, 0)
        with pytest.raises(InvalidArgumentError):
            mstep_lambda(tree, np.eye(2))


class TestInputSummaries:
    def test_continuous_mean_and_scaled_variance(self):
        x = np.array([[1.0, 0.0], [3.0, 0.0], [5.0, 0.0], [7.0, 0.0]])
        task = TaskDataset("t", x, np.zeros(4), "regression")
        msg = input_summary_message(task)
        assert msg.mean[0] == pytest.approx(4.0)
        assert msg.var[0] == pytest.approx(np.var(x[:, 0]) / 4)

    def test_variance_shrinks_with_n(self):
        rng = np.random.default_rng(0)
        small = TaskDataset("s", rng.standard_normal((20, 3)), np.zeros(20), "regression")
        big = TaskDataset("b", rng.standard_normal((20000, 3)), np.zeros(20000), "regression")
        assert input_summary_message(big).var.max() < input_summary_message(small).var.min()

    def test_discrete_frequencies(self):
        x = np.array([[0.0], [1.0], [1.0], [2.0]])
        task = TaskDataset("t", x, np.zeros(4), "regression")
        model = InputModel.infer([task], ["discrete"])
        msg = input_summary_message(task, model)
        np.testing.assert_allclose(msg.mean, [0.25, 0.5, 0.25])

    def test_joint_message_dimension(self):
        rng = np.random.default_rng(1)
        tasks = [TaskDataset(f"t{k}", rng.standard_normal((10, 4)), np.zeros(10), "regression")
                 for k in range(3)]
        posts = [WeightPosterior(rng.standard_normal(4), np.eye(4)) for _ in range(3)]
        msgs = leaf_messages_with_inputs(tasks, posts, None, "full+x")
        assert msgs[0].dim == 8
        assert msgs[0].var.shape == (8, 8)
        msgs_diag = leaf_messages_with_inputs(tasks, posts, None, "diag+x")
        assert msgs_diag[0].var.shape == (8,)

    def test_rejects_plain_variant(self):
        with pytest.raises(InvalidArgumentError):
            leaf_messages_with_inputs([], [], None, "full")

    def test_identical_inputs_merge_first_in_data_variant(self):
        rng = np.random.default_rng(2)
        shared = rng.standard_normal((50, 3))
        tasks = [
            TaskDataset("a", shared, np.zeros(50), "regression"),
            TaskDataset("b", shared.copy(), np.zeros(50), "regression"),
            TaskDataset("c", shared + 4.0, np.zeros(50), "regression"),
        ]
        msgs = leaf_messages_with_inputs(tasks, [], None, "data")
        np.testing.assert_allclose(msgs[0].mean, msgs[1].mean)
        tree = greedy_rate1_build(msgs, np.ones(3))
        assert set(tree.nodes[3].child_ids) == {0, 1}


class TestSampleDa:
    def test_zero_lambda_shares_one_weight(self):
        cfg = ModelConfig(model="da", task_kind="regression")
        truth = sample_da_params(cfg, 5, 3, 0, lam=np.zeros((3, 3)))
        for w in truth.weights[1:]:
            np.testing.assert_allclose(w, truth.weights[0])

    def test_regression_residual_variance(self):
        cfg = ModelConfig(model="da", task_kind="regression", rho2=0.5)
        w = [np.array([1.0, -2.0])]
        tasks = sample_task_data(w, 10000, "regression", 0.5, 0)
        resid = tasks[0].labels - tasks[0].inputs @ w[0]
        assert np.var(resid) == pytest.approx(0.5, rel=0.05)

    def test_small_sigma2_shrinks_root(self):
        cfg = ModelConfig(model="da", sigma2=1e-10, task_kind="regression")
        truth = sample_da_params(cfg, 4, 3, 0)
        root_state = truth.tree.node(truth.tree.root_id).state
        assert np.max(np.abs(root_state)) < 1e-3

    def test_classification_labels(self):
        cfg = ModelConfig(model="da", task_kind="classification")
        truth, tasks = sample_da(cfg, 3, 2, 40, 0)
        for t in tasks:
            assert set(np.unique(t.labels)) <= {-1.0, 1.0}

    def test_deterministic(self):
        cfg = ModelConfig(model="da", task_kind="regression")
        t1, d1 = sample_da(cfg, 3, 2, 10, 99)
        t2, d2 = sample_da(cfg, 3, 2, 10, 99)
        np.testing.assert_array_equal(d1[0].inputs, d2[0].inputs)
        np.testing.assert_allclose(t1.weights[0], t2.weights[0])


class TestEmFitDa:
    def test_rejects_single_task(self):
        cfg = ModelConfig(model="da")
        task = TaskDataset("t", np.ones((5, 2)), np.ones(5), "classification")
        with pytest.raises(InvalidArgumentError):
            em_fit_da([task], cfg)

    def test_identical_tasks_symmetric(self):
        rng = np.random.default_rng(4)
        x = rng.standard_normal((40, 3))
        y = np.sign(x @ np.array([1.0, -1.0, 0.5]) + 0.2 * rng.standard_normal(40))
        y[y == 0] = 1.0
        a = TaskDataset("a", x, y, "classification")
        b = TaskDataset("b", x.copy(), y.copy(), "classification")
        cfg = ModelConfig(model="da", variant="full", em_iters=5, holdout_fraction=0.0, seed=0)
        fit = em_fit_da([a, b], cfg)
        diff = np.max(np.abs(fit.leaf_posteriors[0].mean - fit.leaf_posteriors[1].mean))
        assert diff < 1e-3

    @pytest.mark.parametrize("variant", ["full", "diag", "full+x", "diag+x", "data"])
    def test_variants_run_and_select(self, variant):
        cfg = ModelConfig(model="da", variant=variant, em_iters=3, holdout_fraction=0.1,
                          seed=0, task_kind="regression")
        truth, tasks = sample_da(cfg, 4, 3, 60, 0)
        fit = em_fit_da(tasks, cfg)
        assert fit.selected_iter == int(np.argmax(fit.holdout_curve))
        assert fit.holdout_curve[fit.selected_iter] >= fit.holdout_curve[0]
        assert len(fit.leaf_posteriors) == 4
        assert fit.tree.n_leaves == 4
        if variant.startswith("full") :
            assert fit.leaf_posteriors[0].cov.shape == (3, 3)

    def test_holdout_selection_beats_init_on_synthetic(self):
        ok = 0
        for seed in range(6):
            cfg = ModelConfig(model="da", variant="full", em_iters=8, holdout_fraction=0.1,
                              seed=seed, task_kind="regression")
            truth, tasks = sample_da(cfg, 4, 3, 60, seed)
            fit = em_fit_da(tasks, cfg)
            assert max(fit.holdout_curve) == fit.holdout_curve[fit.selected_iter]
            ok += fit.holdout_curve[fit.selected_iter] >= fit.holdout_curve[0]
        assert ok == 6

    def test_near_zero_diffusion_pools_weights(self):
        rng = np.random.default_rng(11)
        w = np.array([1.0, -0.5])
        tasks = sample_task_data([w + 0.3 * rng.standard_normal(2) for _ in range(4)],
                                 80, "regression", 0.3, rng)
        cfg = ModelConfig(model="da", variant="full", em_iters=6, holdout_fraction=0.0,
                          seed=0, task_kind="regression", rho2=0.3)
        fit = em_fit_da(tasks, cfg, fixed_lambda=1e-6 * np.eye(2))
        means = [p.mean for p in fit.leaf_posteriors]
        spread = max(np.linalg.norm(a - b) for a in means for b in means)
        assert spread < 1e-2

    def test_fixed_star_tree_matches_shared_prior_oracle(self):
        # shared-ancestor reduction: joint MAP over (root, leaf weights) is the
        # dense-Gaussian oracle for regression
        rng = np.random.default_rng(3)
        k, d, n = 3, 2, 250
        sigma2 = rho2 = t_r = 1.0
        tasks = sample_task_data([rng.standard_normal(d) for _ in range(k)],
                                 n, "regression", rho2, rng)
        size = (k + 1) * d
        prec = np.zeros((size, size))
        rhs = np.zeros(size)
        prec[:d, :d] = np.eye(d) / sigma2 + k * np.eye(d) / t_r
        for i, task in enumerate(tasks):
            s = (i + 1) * d
            prec[:d, s:s + d] = prec[s:s + d, :d] = -np.eye(d) / t_r
            prec[s:s + d, s:s + d] = np.eye(d) / t_r + task.inputs.T @ task.inputs / rho2
            rhs[s:s + d] = task.inputs.T @ task.labels / rho2
        sol = np.linalg.solve(prec, rhs)
        cfg = ModelConfig(model="da", variant="full", em_iters=25, holdout_fraction=0.0,
                          seed=0, task_kind="regression", sigma2=sigma2, rho2=rho2)
        fit = em_fit_da(tasks, cfg, fixed_tree=star_tree(k, t_r), fixed_lambda=np.eye(d))
        for i in range(k):
            want = sol[(i + 1) * d:(i + 2) * d]
            np.testing.assert_allclose(fit.leaf_posteriors[i].mean, want, atol=1e-4)

    def test_explicit_holdout_data(self):
        cfg = ModelConfig(model="da", variant="full", em_iters=3, seed=0,
                          task_kind="regression")
        truth, tasks = sample_da(cfg, 3, 2, 50, 1)
        _, held = sample_da(cfg, 3, 2, 10, 2)
        fit = em_fit_da(tasks, cfg, holdout_data=held)
        assert len(fit.holdout_curve) == 4  # init + 3 iterations

    def test_too_small_task_for_holdout(self):
        cfg = ModelConfig(model="da", holdout_fraction=0.1)
        tasks = [TaskDataset(f"t{k}", np.ones((3, 2)), np.ones(3), "classification")
                 for k in range(2)]
        with pytest.raises(InvalidArgumentError):
            em_fit_da(tasks, cfg)
