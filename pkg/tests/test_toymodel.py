import numpy as np
import pytest

from mtnas.archdist import ArchDistribution, all_masks, prob
from mtnas.costmodel import CostPenalty, CostTable
from mtnas.supergrid import BlockSpec, build_grid, uniform_grid
from mtnas.toymodel import (
    PassCounter,
    TaskSpec,
    ToyNet,
    additive_table,
    analytic_grad_a,
    brute_force_best,
    data_loss,
    enumerate_expected_loss,
    enumerate_grad_pi,
    format_table,
    load_table,
    make_synthetic_dataset,
    parse_table,
    path_widths,
    task_loss,
)

B2_TABLE = [4.0, 1.0, 3.0, 2.0]  # 00, 01, 10, 11


def _loss_and_grads(net, mask, w, x, y):
    preds, cache = net.forward(mask, w, x)
    gp = 2.0 * (preds - y) / preds.size
    gw, ga = net.backward(cache, gp)
    return float(np.mean((preds - y) ** 2)), gw, ga


def _fd_check(net, mask, w, x, y, rng, n_w=25, h=1e-5):
    _, gw, ga = _loss_and_grads(net, mask, w, x, y)

    def loss_at(mask_, data):
        w2 = w.copy()
        w2.data[:] = data
        preds, _ = net.forward(mask_, w2, x)
        return float(np.mean((preds - y) ** 2))

    worst = 0.0
    for i in rng.choice(w.data.size, size=min(n_w, w.data.size), replace=False):
        e = np.zeros_like(w.data)
        e[i] = h
        fd = (loss_at(mask, w.data + e) - loss_at(mask, w.data - e)) / (2 * h)
        worst = max(worst, abs(fd - gw.data[i]) / max(abs(fd), abs(gw.data[i]), 1e-6))
    for b in range(len(mask)):
        e = np.zeros(len(mask))
        e[b] = h
        fd = (loss_at(mask + e, w.data) - loss_at(mask - e, w.data)) / (2 * h)
        worst = max(worst, abs(fd - ga[b]) / max(abs(fd), abs(ga[b]), 1e-6))
    return worst


class TestTasks:
    def test_table_lookup(self):
        task = TaskSpec(0, table=B2_TABLE)
        assert [task.lookup(m) for m in ([0, 0], [0, 1], [1, 0], [1, 1])] == B2_TABLE

    def test_sum_table_at_zero(self):
        task = TaskSpec(0, table=additive_table([1, 1, 1]))
        penalty = CostPenalty(CostTable([1, 1, 1]), 2.0, 0.5)
        assert task_loss(task, [0, 0, 0], penalty) == 0

    def test_penalty_added(self):
        task = TaskSpec(0, table=additive_table([1, 1, 1]))
        penalty = CostPenalty(CostTable([1, 1, 1]), 3.0, 0.0)
        assert task_loss(task, [1, 1, 1], penalty) == pytest.approx(3 + 3)

    def test_differentiable_zero_when_exact(self):
        task = TaskSpec(0, "differentiable", read_path=0)
        y = np.arange(5.0)
        assert task_loss(task, y, target=y) == 0.0

    def test_wrong_width(self):
        with pytest.raises(ValueError):
            TaskSpec(0, table=B2_TABLE).lookup([1, 0, 1])

    def test_bad_table(self):
        with pytest.raises(ValueError):
            TaskSpec(0, table=[1.0, 2.0, 3.0])

    def test_table_text_roundtrip(self, tmp_path):
        table = np.random.default_rng(0).normal(size=16)
        (tmp_path / "t.txt").write_text("# header\n" + format_table(table))
        np.testing.assert_array_equal(load_table(tmp_path / "t.txt"), table)

    @pytest.mark.parametrize("text", ["00 1\n01 2\n10 3\n", "0 1\n1 2\n00 3\n", "0a 1\n"])
    def test_table_text_malformed(self, text):
        with pytest.raises(ValueError):
            parse_table(text)

    def test_additive_pairwise(self):
        t = additive_table([1.0, 2.0], 0.5, {(0, 1): 10.0})
        np.testing.assert_allclose(t, [0.5, 2.5, 1.5, 13.5])


class TestEnumerationOracles:
    def test_midpoint(self):
        task = TaskSpec(0, table=[0.0, 2.0])
        assert enumerate_expected_loss(ArchDistribution([0.5]), task) == pytest.approx(1.0)

    def test_deterministic_distribution(self):
        task = TaskSpec(0, table=B2_TABLE)
        d = ArchDistribution([0.0, 1.0], eps=1e-300)
        assert enumerate_expected_loss(d, task) == pytest.approx(1.0)

    @pytest.mark.parametrize("p", [0.1, 0.5, 0.93])
    def test_linear_gradient(self, p):
        task = TaskSpec(0, table=[0.0, 2.0])
        assert enumerate_grad_pi(ArchDistribution([p]), task)[0] == pytest.approx(2.0)

    def test_constant_table(self):
        task = TaskSpec(0, table=np.full(32, 3.3))
        np.testing.assert_allclose(enumerate_grad_pi(ArchDistribution.uniform(5), task), 0, atol=1e-14)

    def test_gradient_matches_finite_difference(self):
        rng = np.random.default_rng(1)
        task = TaskSpec(0, table=rng.normal(size=64))
        penalty = CostPenalty(CostTable(rng.uniform(0.5, 2, 6)), 1.5, 0.4)
        pi = rng.uniform(0.2, 0.8, 6)
        h = 1e-6
        fd = [
            (
                enumerate_expected_loss(ArchDistribution(pi + h * e), task, penalty)
                - enumerate_expected_loss(ArchDistribution(pi - h * e), task, penalty)
            )
            / (2 * h)
            for e in np.eye(6)
        ]
        np.testing.assert_allclose(enumerate_grad_pi(ArchDistribution(pi), task, penalty), fd, rtol=1e-6)

    def test_multilinear_ste_is_unbiased(self):
        # E_p[d loss / d a] equals the enumerated gradient for analytic tasks
        rng = np.random.default_rng(2)
        task = TaskSpec(0, table=rng.normal(size=32))
        d = ArchDistribution(rng.uniform(0.1, 0.9, 5))
        masks = all_masks(5)
        ste = prob(d, masks) @ np.stack([analytic_grad_a(task, m) for m in masks])
        np.testing.assert_allclose(ste, enumerate_grad_pi(d, task), atol=1e-12)


class TestBruteForce:
    def test_unlimited_budget(self):
        best = brute_force_best(TaskSpec(0, table=B2_TABLE), CostTable([1, 1]), budget=2)
        np.testing.assert_array_equal(best, [0, 1])

    def test_zero_budget(self):
        best = brute_force_best(TaskSpec(0, table=B2_TABLE), CostTable([1, 1]), budget=0)
        np.testing.assert_array_equal(best, [0, 0])

    def test_budget_excludes_optimum(self):
        table = additive_table([-1.0, -2.0, -3.0])
        best = brute_force_best(TaskSpec(0, table=table), CostTable([1, 1, 1]), budget=1)
        np.testing.assert_array_equal(best, [0, 0, 1])

    def test_tie_break_lexicographic(self):
        best = brute_force_best(TaskSpec(0, table=[1.0, 0.0, 0.0, 0.0]), CostTable([1, 1]), budget=2)
        np.testing.assert_array_equal(best, [0, 1])

    def test_infeasible(self):
        with pytest.raises(ValueError):
            brute_force_best(TaskSpec(0, table=B2_TABLE), CostTable([1, 1]), budget=-1)


class TestToyNet:
    def setup_method(self):
        self.grid = uniform_grid(3, 3)
        self.net = ToyNet(self.grid, read_paths=[0, 2], width=6)
        rng = np.random.default_rng(0)
        self.w = self.net.init_weights(rng)
        self.x = rng.standard_normal((7, self.net.input_width))

    def test_widths(self):
        assert path_widths(self.grid, 6) == (2, 4, 6)
        assert path_widths(self.grid, 24) == (8, 16, 24)

    def test_zero_mask_is_stage0_computation(self):
        mask = self.grid.full_mask(np.zeros(self.grid.num_searchable))
        preds, cache = self.net.forward(mask, self.w, self.x)
        # identity blocks on every later stage: the last stage reproduces stage 0
        for p in range(3):
            np.testing.assert_allclose(cache.outputs[6 + p], cache.outputs[p], rtol=1e-15)
        np.testing.assert_allclose(preds[:, 0], cache.outputs[0] @ self.w.head(0))

    def test_all_ones_differs_from_zeros(self):
        ones = np.ones(self.grid.num_blocks)
        zeros = self.grid.full_mask(np.zeros(self.grid.num_searchable))
        a, _ = self.net.forward(ones, self.w, self.x)
        b, _ = self.net.forward(zeros, self.w, self.x)
        assert not np.allclose(a, b)

    def test_single_block_zero_weights(self):
        grid = build_grid(1, 1, [BlockSpec(0, 0, 8, 4)])
        net = ToyNet(grid, [0], width=4)
        w = net.init_weights(np.random.default_rng(1))
        w.data[:] = 0.0
        w.head(0)[...] = 1.0
        _, cache = net.forward([1], w, np.ones((3, 4)))
        np.testing.assert_array_equal(cache.outputs[0], 0.0)

    def test_counter(self):
        c = PassCounter()
        preds, cache = self.net.forward(np.ones(9), self.w, self.x, c)
        self.net.backward(cache, np.ones_like(preds), c)
        assert (c.forwards, c.backwards) == (1, 1)

    @pytest.mark.parametrize("prune", [True, False])
    def test_matches_graph_walk(self, prune):
        net = ToyNet(self.grid, [0, 2], width=6, prune=prune)
        rng = np.random.default_rng(3)
        for _ in range(10):
            mask = self.grid.full_mask(rng.integers(0, 2, self.grid.num_searchable))
            preds, _ = net.forward(mask, self.w, self.x)
            np.testing.assert_allclose(preds, net.reference_forward(mask, self.w, self.x), rtol=1e-13, atol=1e-14)

    @pytest.mark.parametrize("prune", [True, False])
    def test_gradients_finite_difference(self, prune):
        net = ToyNet(self.grid, [0, 2], width=6, prune=prune)
        rng = np.random.default_rng(4)
        y = rng.standard_normal((7, 2))
        for _ in range(3):
            mask = self.grid.full_mask(rng.integers(0, 2, self.grid.num_searchable)).astype(float)
            assert _fd_check(net, mask, self.w, self.x, y, rng) < 1e-4

    def test_identity_block_has_zero_a_gradient(self):
        # with W = 0 and b = 0 the block computes tanh(0) = 0; choose input 0 too
        grid = build_grid(1, 1, [BlockSpec(0, 0, 8, 4)])
        net = ToyNet(grid, [0], width=4)
        w = net.init_weights(np.random.default_rng(1))
        w.W(0)[...] = 0.0
        w.bias(0)[...] = 0.0
        preds, cache = net.forward([1], w, np.zeros((2, 4)))
        _, ga = net.backward(cache, np.ones_like(preds))
        assert ga[0] == 0.0

    def test_unpruned_a_gradient_is_inner_product(self):
        net = ToyNet(self.grid, [0, 2], width=6, prune=False)
        mask = np.ones(9)
        preds, cache = net.forward(mask, self.w, self.x)
        gw, ga = net.backward(cache, np.ones_like(preds))
        # last-stage blocks feed only their head, so dL/dy_b is known in closed form
        for t, r in enumerate([0, 2]):
            b = 6 + r
            dy = np.outer(np.ones(7), self.w.head(t))
            expect = np.sum(dy * (cache.acts[b] - cache.inputs[b]))
            assert ga[b] == pytest.approx(expect, rel=1e-12)

    def test_bad_shapes(self):
        with pytest.raises(ValueError):
            self.net.forward(np.ones(8), self.w, self.x)
        with pytest.raises(ValueError):
            self.net.forward(np.ones(9), self.w, np.ones((3, 5)))
        with pytest.raises(ValueError):
            self.net.backward(None, np.ones((7, 2)))


def test_synthetic_dataset_reproducible():
    grid = uniform_grid(2, 3)
    net = ToyNet(grid, [0, 1], width=4)
    tasks = [
        TaskSpec(0, "differentiable", read_path=0, teacher_mask=np.array([1, 0, 1, 0])),
        TaskSpec(1, "differentiable", read_path=1, teacher_mask=np.array([0, 1, 0, 1])),
    ]
    a = make_synthetic_dataset(net, tasks, seed=5, size=64)
    b = make_synthetic_dataset(net, tasks, seed=5, size=64)
    np.testing.assert_array_equal(a.targets, b.targets)
    assert data_loss(a.targets[:, 0], a.targets[:, 1]) > 0
