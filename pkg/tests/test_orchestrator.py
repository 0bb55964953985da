import math

import numpy as np
import pytest

from fedltp.config import ExperimentConfig, with_overrides
from fedltp.data import make_blobs
from fedltp.errors import InvalidInputError
from fedltp.metrics import comm_cost_bits, read_metrics
from fedltp.model import MaskedModel, clip_gradient, loss_and_grad, mlp_layers
from fedltp.orchestrator import (
    RoundRecord,
    Snapshot,
    client_update,
    initialize,
    run_experiment,
    run_round,
    select_final_model,
    validate_global,
)
from fedltp.pruning import aggregate
from fedltp.rng import stream


@pytest.fixture
def small():
    return ExperimentConfig(
        scheme="fed-one-shot", seed=3, rounds=3, clients=4, sample_ratio=0.5,
        local_steps=5, batch_size=8, lr=0.05, clip=1.0, sigma=0.5, lambda_val=2.0,
        tickets=2, lth_iterations=20, lth_lr=0.05, prune_degree=0.5, hidden=(8,),
        blob_classes=3, blob_dim=5, blob_size=400,
    ).validate()


def blob_shard(seed, n=120):
    ds = make_blobs(4, 6, 4.0, n, np.random.default_rng(seed))
    return ds.features, ds.labels


class TestInitialize:
    def test_baseline_is_dense(self, small):
        state = initialize(with_overrides(small, scheme="dp-fed-baseline"))
        assert state.global_model.mask.all()
        assert len(state.specs) == 1 and state.nominal_p == 1.0
        assert state.ticket_index is None

    def test_one_shot_retention(self, small):
        state = initialize(with_overrides(small, prune_degree=0.6))
        layers = sum(1 for l in state.layers if l.kind == "dense")
        assert abs(state.global_model.retention - 0.4) <= layers / state.d

    def test_iterative_specs_nested(self, small):
        state = initialize(with_overrides(small, scheme="fed-iterative"))
        assert len(state.specs) == small.sampled_clients
        assert np.array_equal(state.global_model.mask, state.specs[0].mask)
        assert not np.any(state.specs[0].mask & ~state.ticket_mask)

    def test_deterministic(self, small):
        a, b = initialize(small), initialize(small)
        assert a.global_model.params.tobytes() == b.global_model.params.tobytes()
        assert a.ticket_scores == b.ticket_scores
        assert all(np.array_equal(x.shards.val, y.shards.val) for x, y in zip(a.clients, b.clients))

    def test_cached_tickets_are_used(self, small, tmp_path):
        from fedltp.lth import save_tickets, generate_winning_tickets
        state = initialize(small)
        tickets = generate_winning_tickets(state.public.features, state.public.labels, state.layers,
                                           2, 20, 0.5, small.seed, lr=0.05)
        path = tmp_path / "t.json"
        save_tickets(path, tickets, state.layers)
        cached = initialize(with_overrides(small, tickets_file=str(path)))
        assert cached.global_model.params.tobytes() == state.global_model.params.tobytes()


class TestClientUpdate:
    def test_one_noiseless_step(self, rng):
        X, y = blob_shard(0, 40)
        model = MaskedModel.create(mlp_layers([6, 5, 4]), rng)
        cfg = ExperimentConfig(local_steps=1, batch_size=40, sigma=0.0, momentum=0.0, clip=0.5)
        delta = client_update(model, X, y, cfg, 0.1, rng)
        _, g = loss_and_grad(model, X, y)
        np.testing.assert_allclose(delta, -0.1 * clip_gradient(g, 0.5), rtol=1e-9, atol=1e-15)

    def test_delta_respects_mask(self, rng):
        X, y = blob_shard(1)
        model = MaskedModel.create(mlp_layers([6, 5, 4]), rng)
        model = model.with_mask(rng.random(model.d) < 0.5)
        cfg = ExperimentConfig(local_steps=20, sigma=1.4, clip=1.0)
        delta = client_update(model, X, y, cfg, 0.05, rng)
        assert np.all(delta[~model.mask] == 0.0)

    def test_batch_clamped_to_shard(self, rng):
        X, y = blob_shard(2, 10)
        model = MaskedModel.create(mlp_layers([6, 4]), rng)
        cfg = ExperimentConfig(local_steps=3, batch_size=50, sigma=0.0)
        assert np.all(np.isfinite(client_update(model, X, y, cfg, 0.1, rng)))

    def test_empty_shard(self, rng):
        model = MaskedModel.create(mlp_layers([6, 4]), rng)
        with pytest.raises(InvalidInputError):
            client_update(model, np.zeros((0, 6)), np.zeros(0, int), ExperimentConfig(), 0.1, rng)

    def test_reference_step_count_lowers_loss(self):
        # tau = 300, B = 15, sigma = 1.4 on blobs; small clip keeps the noise in check
        cfg = ExperimentConfig(local_steps=300, batch_size=15, sigma=1.4, clip=0.1)
        wins = 0
        for seed in range(20):
            r = np.random.default_rng(seed)
            ds = make_blobs(10, 20, 4.0, 200, r)
            model = MaskedModel.create(mlp_layers([20, 32, 10]), r)
            before, _ = loss_and_grad(model, ds.features, ds.labels)
            delta = client_update(model, ds.features, ds.labels, cfg, 0.01, r)
            after, _ = loss_and_grad(model.with_params(model.params + delta), ds.features, ds.labels)
            wins += after < before
        assert wins >= 18

    def test_identical_clients_round_trip(self, rng):
        X, y = blob_shard(3, 30)
        model = MaskedModel.create(mlp_layers([6, 5, 4]), rng)
        cfg = ExperimentConfig(local_steps=1, batch_size=30, sigma=0.0)
        deltas = [client_update(model, X, y, cfg, 0.1, np.random.default_rng(s)) for s in range(3)]
        out = aggregate(model, deltas, [model.mask] * 3)
        np.testing.assert_allclose(out.params, model.params + deltas[0], rtol=0, atol=1e-14)


def fedavg_reference(config, state, t):
    """Plain FedAvg round written out step by step for comparison."""
    theta = state.global_model.params.copy()
    mask = state.global_model.mask
    lr = config.lr * config.lr_decay ** t
    chosen = sorted(stream(config.seed, "sample", t).choice(config.clients, config.sampled_clients,
                                                            replace=False))
    deltas = []
    for cid in chosen:
        tr = state.clients[cid].shards.train
        X, y = state.private.features[tr], state.private.labels[tr]
        rng = stream(config.seed, "client", int(cid), t)
        w, buf = theta.copy(), np.zeros_like(theta)
        b = min(config.batch_size, len(y))
        order, pos = rng.permutation(len(y)), 0
        for _ in range(config.local_steps):
            if pos + b > len(y):
                order, pos = rng.permutation(len(y)), 0
            idx = order[pos:pos + b]
            pos += b
            _, g = loss_and_grad(MaskedModel(w, mask, state.layers), X[idx], y[idx])
            norm = np.linalg.norm(g)
            if norm > config.clip:
                g = g * (config.clip / norm)
            buf = config.momentum * buf + g * mask
            w = (w - lr * buf) * mask
        deltas.append(w - theta)
    return (theta + np.mean(deltas, axis=0)) * mask


class TestRunRound:
    def test_matches_plain_fedavg(self, small):
        cfg = with_overrides(small, sigma=0.0, lambda_val=math.inf)
        state = initialize(cfg)
        for t in range(2):
            want = fedavg_reference(cfg, state, t)
            run_round(state)
            np.testing.assert_allclose(state.global_model.params, want, rtol=0, atol=1e-12)

    def test_noiseless_validation_is_true_total(self, small):
        cfg = with_overrides(small, lambda_val=math.inf)
        state = run_round(initialize(cfg))
        rec = state.records[0]
        s, _, true = validate_global(state.global_model, state.clients, state.private,
                                     math.inf, cfg.seed, 0)
        assert rec.noisy_val_score == s == sum(true)

    def test_single_client(self, small):
        cfg = with_overrides(small, clients=1, sample_ratio=1.0)
        state = run_round(initialize(cfg))
        assert state.records[0].selected == [0]

    def test_bit_identical_records(self, small):
        def trace():
            s = initialize(small)
            for _ in range(2):
                run_round(s)
            return [(r.noisy_val_score, r.test_accuracy, r.epsilon, r.selected,
                     r.snapshot.values.tobytes()) for r in s.records]
        assert trace() == trace()

    def test_ledger_consistency(self, small):
        state = initialize(small)
        for t in range(1, 4):
            run_round(state)
            assert state.ledger.rounds_completed == t
            assert state.ledger.releases == t
            assert state.ledger.steps == t * small.local_steps
        eps = [r.epsilon for r in state.records]
        assert eps == sorted(eps)

    def test_sticky_assignment_in_iterative(self, small):
        cfg = with_overrides(small, scheme="fed-iterative", rounds=6)
        state = initialize(cfg)
        first = {}
        for _ in range(6):
            run_round(state)
            for cid, spec in state.records[-1].assignment.items():
                assert first.setdefault(cid, spec) == spec

    def test_global_respects_mask(self, small):
        state = initialize(with_overrides(small, scheme="fed-iterative"))
        run_round(state)
        assert np.all(state.global_model.params[~state.global_model.mask] == 0)


class TestValidation:
    def test_laplace_sum_statistics(self, small):
        state = initialize(small)
        model = state.global_model
        lam = 3.0
        totals = np.array([validate_global(model, state.clients, state.private, lam, seed, 0)[0]
                           for seed in range(1000)])
        _, _, true = validate_global(model, state.clients, state.private, math.inf, 0, 0)
        u = len(state.clients)
        se = math.sqrt(u * 2 * lam ** 2 / 1000)
        assert abs(totals.mean() - sum(true)) < 3 * se
        assert abs(totals.var() / (u * 2 * lam ** 2) - 1) < 0.1


def _record(t, score):
    snap = Snapshot(t, np.ones(1, bool), np.array([float(t)]))
    return RoundRecord(t, snap, score, [], 0.0, 0.0, None, 0.0, 1.0, [], {}, 0.1)


class TestSelectFinal:
    def test_argmax(self):
        assert select_final_model([_record(i, s) for i, s in enumerate([5, 9, 7])]).round == 1

    def test_single(self):
        assert select_final_model([_record(0, -3.0)]).round == 0

    def test_tie_goes_to_earliest(self):
        assert select_final_model([_record(i, s) for i, s in enumerate([2, 8, 8])]).round == 1

    def test_lower_score_does_not_change_choice(self):
        recs = [_record(i, s) for i, s in enumerate([5, 9, 7])]
        assert select_final_model(recs + [_record(3, 4)]).round == 1

    def test_empty(self):
        with pytest.raises(InvalidInputError):
            select_final_model([])

    def test_spilled_snapshot(self, tmp_path, rng):
        model = MaskedModel.create(mlp_layers([3, 2]), rng)
        snap = Snapshot.take(4, model, str(tmp_path))
        assert snap.values is None
        assert snap.restore(model.layers).params.tobytes() == model.params.tobytes()


class TestRunExperiment:
    def test_zero_rounds(self, small, tmp_path):
        res = run_experiment(with_overrides(small, rounds=0), tmp_path)
        assert res.final_round is None
        assert res.stop_reason == "rounds"
        assert (tmp_path / "metrics.csv").read_text().count("\n") == 1
        init = res.state.init_snapshot.restore(res.state.layers)
        assert res.final_model.params.tobytes() == init.params.tobytes()
        assert res.summary["initialization"]["round"] == -1

    def test_tiny_budget(self, small):
        res = run_experiment(with_overrides(small, epsilon_budget=1e-3))
        assert res.stop_reason == "budget"
        assert res.state.records == []

    def test_budget_safety(self, small):
        res = run_experiment(with_overrides(small, rounds=10, epsilon_budget=40.0))
        assert all(r.epsilon <= 40.0 for r in res.state.records)

    def test_one_shot_communication_formula(self, small):
        cfg = with_overrides(small, rounds=4, comm_direction_factor=2)
        res = run_experiment(cfg)
        st = res.state
        want = comm_cost_bits(st.global_model.retention, st.d, cfg.rounds, cfg.sample_ratio, 2)
        assert st.comm_bits == pytest.approx(want * cfg.clients, rel=1e-12)
        base = run_experiment(with_overrides(cfg, scheme="dp-fed-baseline"))
        assert st.comm_bits < base.state.comm_bits

    def test_metrics_match_records(self, small, tmp_path):
        res = run_experiment(small, tmp_path, fmt="json")
        rows = read_metrics(tmp_path / "metrics.json")
        assert [r.round for r in rows] == [0, 1, 2]
        assert [r.epsilon for r in rows] == [r.epsilon for r in res.state.records]
        assert (tmp_path / "summary.json").is_file()

    def test_partial_metrics_flushed_on_error(self, small, tmp_path, monkeypatch):
        from fedltp import orchestrator

        calls = {"n": 0}
        real = orchestrator.run_round

        def flaky(state):
            calls["n"] += 1
            if calls["n"] == 3:
                raise RuntimeError("boom")
            return real(state)

        monkeypatch.setattr(orchestrator, "run_round", flaky)
        with pytest.raises(RuntimeError):
            run_experiment(small, tmp_path)
        assert len(read_metrics(tmp_path / "metrics.csv")) == 2
