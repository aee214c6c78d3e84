"""
Tests for the federated averaging engine.
"""
import os
import unittest
from unittest.mock import patch

import numpy as np
import pytest
from scipy.stats import chisquare

from fedsim.config import (
    CentralConfig,
    FederationConfig,
    ModelSpec,
    OptimizerConfig,
    SynthTaskSpec,
)
from fedsim.data import ClientDataset, synth_federated_task
from fedsim.errors import EmptyDatasetError, InvalidInputError, UnknownClientError
from fedsim.experiment import train_central
from fedsim.federation import (
    ClientUpdate,
    evaluate,
    fedavg_aggregate,
    init_stale_cache,
    local_update,
    run_federation,
    select_clients_hybrid,
    select_clients_proportional,
    select_clients_uniform,
    stale_aggregate,
    train_epochs,
)
from fedsim.model import LabeledBatch, ParameterVector, init_params, loss_and_grad
from fedsim.optim import SGDOptimizer
from fedsim.seeding import client_rng, derive_rng, round_rng

SGD = OptimizerConfig(name="sgd", lr=0.1)


def _vec(*values: float) -> ParameterVector:
    return ParameterVector.from_tensors([("w", np.array(values, dtype=float))])


def _update(client_id: str, n_k: int, *values: float) -> ClientUpdate:
    return ClientUpdate(client_id=client_id, params=_vec(*values), n_k=n_k)


def _task(num_clients=6, seed=0, **kwargs):
    spec = SynthTaskSpec(
        num_clients=num_clients,
        num_classes=4,
        input_dim=6,
        min_size=10,
        max_size=60,
        seed=seed,
        **kwargs,
    )
    task = synth_federated_task(spec)
    model = ModelSpec(kind="linear", input_dim=6, num_classes=4)
    return task, model


class TestSamplers(unittest.TestCase):
    """Test client selection."""

    def test_uniform_cohort(self):
        """Test cohort sizes and full participation."""
        self.assertEqual(list(range(10)), select_clients_uniform(10, 1.0, round_rng(0, 1)))
        cohort = select_clients_uniform(57, 0.1, round_rng(0, 1))
        self.assertEqual(6, len(cohort))
        self.assertEqual(sorted(set(cohort)), cohort)

    def test_uniform_deterministic(self):
        """Test that the same round generator gives the same cohort."""
        first = select_clients_uniform(100, 0.3, round_rng(5, 7))
        self.assertEqual(first, select_clients_uniform(100, 0.3, round_rng(5, 7)))

    def test_proportional_equal_sizes_is_uniform(self):
        """Test equal sizes against the uniform distribution."""
        counts = np.zeros(5)
        for trial in range(10_000):
            (chosen,) = select_clients_proportional([7] * 5, 0.2, derive_rng(3, 1, trial))
            counts[chosen] += 1
        self.assertGreater(chisquare(counts).pvalue, 0.01)

    def test_proportional_follows_size(self):
        """Test that a dominant client is nearly always chosen."""
        hits = sum(
            select_clients_proportional([1, 1_000_000], 0.5, derive_rng(4, 1, trial)) == [1]
            for trial in range(10_000)
        )
        self.assertGreater(hits / 10_000, 0.999)

    def test_proportional_full_participation(self):
        """Test that C=1 selects everyone."""
        self.assertEqual(
            [0, 1, 2, 3], select_clients_proportional([5, 1, 900, 2], 1.0, round_rng(0, 1))
        )

    def test_hybrid_keeps_largest(self):
        """Test that the guaranteed clients are always present."""
        sizes = [10, 500, 30, 400, 20, 50, 60, 70, 80, 90]
        for t in range(1, 30):
            cohort = select_clients_hybrid(sizes, 0.4, 2, round_rng(0, t))
            self.assertEqual(4, len(cohort))
            self.assertIn(1, cohort)
            self.assertIn(3, cohort)
        self.assertEqual([1, 3], select_clients_hybrid(sizes, 0.2, 5, round_rng(0, 1)))

    def test_invalid(self):
        """Test rejected sampler inputs."""
        with self.assertRaises(InvalidInputError):
            select_clients_uniform(0, 0.5, round_rng(0, 1))
        with self.assertRaises(InvalidInputError):
            select_clients_proportional([3, 0], 0.5, round_rng(0, 1))


class TestLocalUpdate(unittest.TestCase):
    """Test client-side training."""

    def setUp(self):
        self.task, self.spec = _task()
        self.client = self.task.clients[0]
        self.init = init_params(self.spec, 0)

    def test_zero_epochs(self):
        """Test that E=0 returns the global parameters."""
        update = local_update(self.init, self.client, 0, 8, SGD, client_rng(0, 1, 0), self.spec)
        np.testing.assert_array_equal(self.init.values, update.params.values)
        self.assertEqual(self.client.n_k, update.n_k)

    def test_full_batch_step(self):
        """Test that E=1 with B >= n_k is one gradient step."""
        _, grad = loss_and_grad(self.spec, self.init, self.client.batch)
        update = local_update(
            self.init, self.client, 1, 10_000, SGD, client_rng(0, 1, 0), self.spec
        )
        np.testing.assert_allclose(
            self.init.values - 0.1 * grad.values, update.params.values, rtol=0, atol=1e-12
        )

    def test_empty_client(self):
        """Test that a client without rows is rejected."""
        client = ClientDataset(client_id="c", clip_ids=("a",))
        with self.assertRaises(EmptyDatasetError):
            local_update(self.init, client, 1, 8, SGD, client_rng(0, 1, 0), self.spec)

    def test_short_final_batch_is_trained(self):
        """Test that the rows after the last full batch form their own step."""
        batch = self.client.batch.take(np.arange(3))
        trained, _ = train_epochs(
            self.spec, self.init, batch, 1, 2, SGDOptimizer(0.1), derive_rng(0, 9)
        )
        order = derive_rng(0, 9).permutation(3)
        expected = self.init
        for rows in (order[:2], order[2:]):
            _, grad = loss_and_grad(self.spec, expected, batch.take(rows))
            expected = expected.with_values(expected.values - 0.1 * grad.values)
        np.testing.assert_array_equal(expected.values, trained.values)


class TestAggregation(unittest.TestCase):
    """Test FedAvg and stale aggregation."""

    def test_hand_examples(self):
        """Test the weighted mean on small cases."""
        self.assertEqual(3.0, fedavg_aggregate([_update("a", 1, 0.0), _update("b", 3, 4.0)]).values[0])
        single = _update("a", 5, 1.5, -2.0)
        np.testing.assert_array_equal(single.params.values, fedavg_aggregate([single]).values)
        same = [_update(c, n, 0.7, -1.3) for c, n in (("a", 1), ("b", 5), ("c", 9))]
        np.testing.assert_allclose(np.array([0.7, -1.3]), fedavg_aggregate(same).values, atol=1e-12)

    def test_oracle_and_properties(self):
        """Test 1,000 random update sets against an independent weighted mean."""
        rng = np.random.default_rng(0)
        for _ in range(1000):
            k = int(rng.integers(1, 8))
            dim = int(rng.integers(1, 6))
            values = rng.normal(size=(k, dim))
            sizes = rng.integers(1, 1000, size=k)
            updates = [_update(f"c{i}", int(n), *row) for i, (n, row) in enumerate(zip(sizes, values))]
            result = fedavg_aggregate(updates).values
            expected = (sizes[:, None] * values).sum(axis=0) / sizes.sum()
            np.testing.assert_allclose(expected, result, rtol=0, atol=1e-12)
            self.assertTrue(np.all(result >= values.min(axis=0) - 1e-12))
            self.assertTrue(np.all(result <= values.max(axis=0) + 1e-12))
            scaled = [_update(u.client_id, u.n_k * 7, *u.params.values) for u in updates]
            np.testing.assert_allclose(result, fedavg_aggregate(scaled).values, rtol=0, atol=1e-12)
            shuffled = [updates[i] for i in rng.permutation(k)]
            np.testing.assert_array_equal(result, fedavg_aggregate(shuffled).values)

    def test_empty_and_mismatched(self):
        """Test rejected aggregation inputs."""
        with self.assertRaises(EmptyDatasetError):
            fedavg_aggregate([])
        with self.assertRaises(InvalidInputError):
            fedavg_aggregate([_update("a", 1, 0.0), _update("b", 1, 0.0, 1.0)])
        with self.assertRaises(InvalidInputError):
            _update("a", 0, 1.0)

    def test_stale_single_client(self):
        """Test that one fresh update from the only client is the result."""
        init = _vec(0.0, 0.0)
        cache = {"a": (init, 4)}
        result, updated = stale_aggregate(cache, [_update("a", 4, 2.0, -1.0)], init)
        np.testing.assert_array_equal(np.array([2.0, -1.0]), result.values)
        self.assertEqual(1, len(updated))

    def test_stale_mean_with_cache(self):
        """Test three equal clients where only one reports."""
        init = _vec(0.0)
        cache = {c: (init, 10) for c in ("a", "b", "c")}
        result, cache = stale_aggregate(cache, [_update("a", 10, 9.0)], init)
        self.assertAlmostEqual(3.0, result.values[0], places=12)
        again, _ = stale_aggregate(cache, [], init)
        np.testing.assert_array_equal(result.values, again.values)

    def test_stale_unknown_client(self):
        """Test that an update from an unknown client is rejected."""
        init = _vec(0.0)
        with self.assertRaises(UnknownClientError):
            stale_aggregate({"a": (init, 1)}, [_update("z", 1, 1.0)], init)

    def test_init_stale_cache(self):
        """Test that the cache starts at the initial parameters."""
        task, spec = _task(num_clients=3)
        init = init_params(spec, 0)
        cache = init_stale_cache(task.clients, init)
        self.assertEqual({c.client_id for c in task.clients}, set(cache))
        for client in task.clients:
            self.assertIs(init, cache[client.client_id][0])
            self.assertEqual(client.n_k, cache[client.client_id][1])


class TestRunFederation(unittest.TestCase):
    """Test the round loop."""

    def setUp(self):
        self.task, self.spec = _task()

    def _config(self, **kwargs) -> FederationConfig:
        values = dict(C=0.5, E=2, B=16, rounds=4, seed=3, optimizer=OptimizerConfig(lr=0.01))
        values.update(kwargs)
        return FederationConfig(**values)

    def test_records(self):
        """Test the per-round records."""
        result = run_federation(self._config(), self.task.clients, self.task.eval_set, self.spec)
        self.assertEqual([1, 2, 3, 4], [r.t for r in result.records])
        sizes = {c.client_id: c.n_k for c in self.task.clients}
        for record in result.records:
            self.assertEqual(3, len(record.selected))
            self.assertEqual(sorted(record.selected), list(record.selected))
            self.assertEqual(sum(sizes[c] for c in record.selected), record.mu_t)
            self.assertTrue(0.0 <= record.eval_metrics["pr_auc"] <= 1.0)
            self.assertIn("loss", record.eval_metrics)

    def test_deterministic(self):
        """Test that identical configs give identical runs."""
        config = self._config(sampler="proportional", aggregator="stale")
        a = run_federation(config, self.task.clients, self.task.eval_set, self.spec)
        b = run_federation(config, self.task.clients, self.task.eval_set, self.spec)
        self.assertEqual(a.records, b.records)
        np.testing.assert_array_equal(a.params.values, b.params.values)

    def test_thread_count_does_not_matter(self):
        """Test that FSIM_THREADS leaves results unchanged."""
        config = self._config(C=1.0)
        serial = run_federation(config, self.task.clients, self.task.eval_set, self.spec)
        with patch.dict(os.environ, {"FSIM_THREADS": "4"}):
            threaded = run_federation(config, self.task.clients, self.task.eval_set, self.spec)
        self.assertEqual(serial.records, threaded.records)
        np.testing.assert_array_equal(serial.params.values, threaded.params.values)

    def test_client_order_does_not_matter(self):
        """Test that the client list order is irrelevant."""
        config = self._config()
        a = run_federation(config, self.task.clients, self.task.eval_set, self.spec)
        b = run_federation(config, self.task.clients[::-1], self.task.eval_set, self.spec)
        self.assertEqual(a.records, b.records)

    def test_single_client_is_centralized(self):
        """Test that one client holding all data equals one centralized epoch."""
        pooled = LabeledBatch.concat([c.batch for c in self.task.clients])
        client = ClientDataset(client_id="all", clip_ids=("x",), batch=pooled)
        config = self._config(C=1.0, E=1, rounds=1, optimizer=SGD)
        result = run_federation(config, [client], self.task.eval_set, self.spec)
        central = train_central(
            CentralConfig(epochs=1, batch_size=config.B, seed=config.seed, optimizer=SGD),
            self.task.clients,
            self.task.eval_set,
            self.spec,
        )
        self.assertEqual(1, central.best_epoch)
        np.testing.assert_array_equal(central.best_params.values, result.params.values)

    def test_full_batch_matches_pooled_gradient_descent(self):
        """Test C=1, E=1, full-batch SGD against pooled gradient descent."""
        config = self._config(C=1.0, E=1, B=10_000, rounds=10, optimizer=SGD)
        history = []
        run_federation(
            config,
            self.task.clients,
            self.task.eval_set,
            self.spec,
            on_round=lambda record, params: history.append(params.values.copy()),
        )
        pooled = LabeledBatch.concat([c.batch for c in self.task.clients])
        w = init_params(self.spec, config.seed)
        for values in history:
            _, grad = loss_and_grad(self.spec, w, pooled)
            w = w.with_values(w.values - SGD.lr * grad.values)
            np.testing.assert_allclose(w.values, values, rtol=0, atol=1e-10)

    def test_invalid_inputs(self):
        """Test empty and duplicate client lists."""
        with self.assertRaises(EmptyDatasetError):
            run_federation(self._config(), [], self.task.eval_set, self.spec)
        duplicate = [self.task.clients[0], self.task.clients[0]]
        with self.assertRaises(InvalidInputError):
            run_federation(self._config(), duplicate, self.task.eval_set, self.spec)

    def test_evaluate_groups(self):
        """Test that grouped rows are scored per clip."""
        eval_set = self.task.eval_set
        params = init_params(self.spec, 0)
        grouped = LabeledBatch(
            np.repeat(eval_set.inputs, 2, axis=0),
            np.repeat(eval_set.targets, 2, axis=0),
            np.repeat(np.arange(len(eval_set)), 2),
        )
        self.assertAlmostEqual(
            evaluate(self.spec, params, eval_set)["pr_auc"],
            evaluate(self.spec, params, grouped)["pr_auc"],
            places=12,
        )


@pytest.mark.slow
class TestNoiseTrend(unittest.TestCase):
    """Test that larger cohorts give smoother PR-AUC curves."""

    def test_noise_decreases_with_C(self):
        """Test std over rounds 20-50 for C=0.1 against C=0.7."""
        task = synth_federated_task(SynthTaskSpec(num_clients=20, concentration=0.1, seed=0))
        spec = ModelSpec(kind="linear", input_dim=20, num_classes=10)
        # E=5 at lr 0.05 has converged by round 20
        optimizer = OptimizerConfig(name="adam", lr=0.05)
        noise = {}
        for C in (0.1, 0.7):
            stds = []
            for seed in range(5):
                config = FederationConfig(
                    C=C, E=5, B=64, rounds=50, seed=seed, optimizer=optimizer
                )
                result = run_federation(config, task.clients, task.eval_set, spec)
                scores = [r.eval_metrics["pr_auc"] for r in result.records[19:]]
                stds.append(np.std(scores))
            noise[C] = float(np.mean(stds))
        self.assertGreater(noise[0.1], noise[0.7])


if __name__ == "__main__":
    unittest.main()
