import dataclasses

import numpy as np
import pytest

from fedfoa.config import RunConfig
from fedfoa.correlation import CorrelationRecord, extract_correlation, packed_size
from fedfoa.data import partition_iid
from fedfoa.federation import (
    BANK_CROSSING_TYPES,
    MemoryBank,
    TrainingError,
    build_datasets,
    client_local_round,
    comm_cost,
    fedavg_aggregate,
    fedfoa_loss_terms,
    history_from_ndjson,
    history_to_csv,
    history_to_ndjson,
    init_clients,
    run_training,
)
from fedfoa.ssl import build_encoder, forward
from oracles import random_orthonormal_columns


def small_cfg(**kw):
    base = dict(num_clients=3, archs=("mlp-32", "mlp-24-16", "mlp-20"), rounds=4, batches_per_round=3,
                batch_size=16, projection_dim=4, num_classes=4, input_dim=8, samples_per_class=20,
                test_per_class=5, t_warm=1, lam=0.05, seed=3, lr=0.05)
    base.update(kw)
    return RunConfig(**base).validate()


def _record(cid, rnd, scale=1.0, n=4):
    return CorrelationRecord(cid, rnd, scale * np.eye(n))


def _clients(cfg):
    train, _ = build_datasets(cfg)
    return init_clients(cfg, partition_iid(train.unlabeled(), cfg.num_clients, cfg.seed))


def _params_equal(a, b):
    return all(np.array_equal(x, y) for x, y in zip(a.parameters(), b.parameters()))


# --- memory bank --------------------------------------------------------------

def test_bank_latest_only_and_strictly_increasing_rounds():
    bank = MemoryBank()
    bank.commit([_record(0, 1), _record(1, 1)])
    bank.commit([_record(0, 2, 2.0)])
    assert len(bank) == 2 and bank.get(0).round == 2
    assert [r.round for r in bank.log] == [1, 1, 2]
    with pytest.raises(ValueError):
        bank.commit([_record(0, 2)])
    with pytest.raises(ValueError):
        bank.commit([_record(1, 5), _record(1, 6)])


def test_bank_view_hides_current_round():
    bank = MemoryBank()
    bank.commit([_record(0, 1), _record(1, 1)])
    bank.commit([_record(0, 2)])
    view = bank.view(2)
    assert set(view) == {1}
    assert set(bank.view(3)) == {0, 1}


def test_bank_only_accepts_correlation_records():
    bank = MemoryBank()
    with pytest.raises(TypeError):
        bank.commit([np.eye(4)])
    with pytest.raises(TypeError):
        bank.commit([build_encoder("mlp-4", 3, 2, np.random.default_rng(0))])
    assert BANK_CROSSING_TYPES == (CorrelationRecord,)
    fields = {f.name for f in dataclasses.fields(CorrelationRecord)}
    assert fields == {"client_id", "round", "r_bar", "batches_averaged", "trace"}


# --- loss terms -----------------------------------------------------------------

def test_loss_terms_empty_bank():
    z = np.random.default_rng(0).normal(size=(10, 4))
    terms = fedfoa_loss_terms(z, extract_correlation(z), {}, 0, 0.01)
    assert terms.loss == 0.0 and terms.peers_used == 0
    assert np.all(terms.grad == 0)


def test_loss_terms_gate_closed():
    z = np.random.default_rng(1).normal(size=(10, 4))
    r = extract_correlation(z)
    weak = CorrelationRecord(1, 1, 0.5 * r)
    terms = fedfoa_loss_terms(z, r, {1: weak}, 0, 0.01)
    assert terms.loss == 0.0 and np.all(terms.grad == 0)
    equal = CorrelationRecord(1, 1, r)
    assert fedfoa_loss_terms(z, r, {1: equal}, 0, 0.01).peers_used == 0


def test_loss_terms_exact_generator_contributes_nothing():
    rng = np.random.default_rng(2)
    r_peer = np.triu(rng.normal(size=(4, 4)))
    r_peer[np.diag_indices(4)] = np.abs(np.diag(r_peer)) + 2.0
    z = random_orthonormal_columns(rng, 1, 12, 4)[0] @ r_peer
    r_own = 0.5 * extract_correlation(z)  # batch trace below the peer's
    bank = {1: CorrelationRecord(1, 1, r_peer), 2: CorrelationRecord(2, 1, 0.1 * r_peer)}
    terms = fedfoa_loss_terms(z, r_own, bank, 0, 0.01)
    assert terms.peers_used == 1
    assert terms.loss == pytest.approx(0.0, abs=1e-18)
    np.testing.assert_allclose(terms.grad, 0.0, atol=1e-10)


def test_loss_terms_lambda_per_peer():
    rng = np.random.default_rng(3)
    z = rng.normal(size=(10, 4))
    r = extract_correlation(z)
    bank = {1: CorrelationRecord(1, 1, 2 * np.eye(4) + np.trace(r) * np.eye(4)),
            2: CorrelationRecord(2, 1, 3 * np.eye(4) + np.trace(r) * np.eye(4))}
    one = fedfoa_loss_terms(z, r, {1: bank[1]}, 0, 0.1)
    two = fedfoa_loss_terms(z, r, {2: bank[2]}, 0, 0.1)
    both = fedfoa_loss_terms(z, r, bank, 0, 0.1)
    assert both.peers_used == 2
    assert both.loss == pytest.approx(one.loss + two.loss)
    assert both.loss == pytest.approx(0.1 * both.regularizer)
    np.testing.assert_allclose(both.grad, one.grad + two.grad)


def test_loss_terms_skip_self_and_reject_dim_mismatch():
    z = np.random.default_rng(4).normal(size=(10, 4))
    r = extract_correlation(z)
    assert fedfoa_loss_terms(z, r, {0: _record(0, 1, 100.0)}, 0, 0.1).peers_used == 0
    with pytest.raises(ValueError):
        fedfoa_loss_terms(z, r, {1: _record(1, 1, 100.0, n=3)}, 0, 0.1)


def test_loss_terms_peer_sampling():
    z = np.random.default_rng(5).normal(size=(10, 4))
    r = extract_correlation(z)
    bank = {k: _record(k, 1, 50.0 + k) for k in range(1, 4)}
    terms = fedfoa_loss_terms(z, r, bank, 0, 0.1, peers_per_batch=1, rng=np.random.default_rng(0))
    assert terms.peers_used == 1


# --- client round ---------------------------------------------------------------

def test_warmup_rounds_have_no_regularizer():
    cfg = small_cfg(t_warm=3)
    clients = _clients(cfg)
    bank = {1: _record(1, 1, 1e3), 2: _record(2, 1, 1e3)}
    for t in (1, 2, 3):
        _, rec, stats = client_local_round(clients[0], bank, cfg, t)
        assert stats.loss_reg == 0.0 and stats.bytes_down == 0
        assert rec.round == t and rec.batches_averaged == cfg.batches_per_round
        assert len(clients[0].batch_rs) == cfg.batches_per_round


def test_regularizer_active_after_warmup_with_stronger_peer():
    cfg = small_cfg(num_clients=2, archs=("mlp-32", "mlp-24-16"), t_warm=1)
    clients = _clients(cfg)
    bank = {1: _record(1, 1, 1e3)}
    _, _, stats = client_local_round(clients[0], bank, cfg, 2)
    assert stats.loss_reg > 0
    assert stats.loss_total == pytest.approx(stats.loss_contrastive + cfg.lam * stats.loss_reg)
    assert stats.bytes_down == packed_size(cfg.projection_dim)


def test_single_client_matches_local_only():
    a = run_training(small_cfg(num_clients=1, mode="fedfoa"))
    b = run_training(small_cfg(num_clients=1, mode="local-only"))
    assert _params_equal(a.models[0], b.models[0])
    assert all(c.loss_reg == 0 for rep in a.history for c in rep.clients)


def test_two_client_run_activates_regularizer():
    cfg = small_cfg(num_clients=2, archs=("mlp-32", "mlp-24-16"), rounds=3, t_warm=1)
    run = run_training(cfg)
    assert all(c.loss_reg == 0 for c in run.history[0].clients)
    later = [c for rep in run.history[1:] for c in rep.clients]
    assert any(c.loss_reg > 0 for c in later)
    assert all(c.bytes_up == packed_size(4) for c in later)


# --- orchestration invariants ---------------------------------------------------

def test_zero_rounds_gives_empty_history():
    assert run_training(small_cfg(rounds=0)).history == []


def test_lambda_zero_is_bit_identical_to_local_only():
    a = run_training(small_cfg(mode="local-only"))
    b = run_training(small_cfg(mode="fedfoa", lam=0.0))
    for x, y in zip(a.models, b.models):
        assert _params_equal(x, y)
    assert history_to_csv(a.history) == history_to_csv(b.history)


def test_replay_is_deterministic():
    a = run_training(small_cfg())
    b = run_training(small_cfg())
    assert history_to_ndjson(a.history) == history_to_ndjson(b.history)
    for x, y in zip(a.models, b.models):
        assert _params_equal(x, y)


def test_parallel_workers_match_sequential():
    a = run_training(small_cfg())
    b = run_training(small_cfg(workers=3))
    assert history_to_ndjson(a.history) == history_to_ndjson(b.history)


def test_staleness_one_ignores_current_round_sentinels():
    cfg = small_cfg()
    t = cfg.t_warm + 2
    earlier = [_record(k, t - 1, 0.01) for k in range(3)]
    base = MemoryBank()
    base.commit(earlier)
    poisoned = MemoryBank()
    poisoned.commit(earlier)
    # Sentinels from a client that published during the current round (or later).
    poisoned.commit([_record(7, t, 1e4)])
    poisoned.commit([_record(8, t + 5, 1e4)])
    assert base.view(t) == poisoned.view(t)

    c1, c2 = _clients(cfg)[0], _clients(cfg)[0]
    _, _, s1 = client_local_round(c1, base.view(t), cfg, t)
    _, _, s2 = client_local_round(c2, poisoned.view(t), cfg, t)
    assert s1 == s2
    assert _params_equal(c1.model, c2.model)


def test_gate_soundness_low_trace_record_is_a_noop():
    cfg = small_cfg()
    t = cfg.t_warm + 1
    c1, c2 = _clients(cfg)[0], _clients(cfg)[0]
    _, _, s1 = client_local_round(c1, {}, cfg, t)
    _, _, s2 = client_local_round(c2, {1: _record(1, t - 1, 1e-6)}, cfg, t)
    assert _params_equal(c1.model, c2.model)
    assert (s1.loss_contrastive, s1.loss_reg) == (s2.loss_contrastive, s2.loss_reg)


def test_client_failure_reports_round_and_client():
    cfg = small_cfg(lr=1e6, rounds=5, lam=1.0)
    with np.errstate(all="ignore"), pytest.raises(TrainingError) as info:
        run_training(cfg)
    assert info.value.round_index >= 1
    assert "client" in str(info.value)


def test_records_and_bank_log():
    run = run_training(small_cfg())
    assert sorted(run.records) == [1, 2, 3, 4]
    assert all(len(v) == 3 for v in run.records.values())
    assert len(run.bank.log) == 12
    for rep in run.history:
        for c, rec in zip(rep.clients, run.records[rep.round]):
            assert c.trace_rbar == rec.trace


def test_history_exports():
    run = run_training(small_cfg(rounds=2))
    csv = history_to_csv(run.history).splitlines()
    assert csv[0] == "round,client_id,arch_id,loss_contrastive,loss_reg,trace_rbar,bytes_up,bytes_down"
    assert len(csv) == 1 + 2 * 3
    back = history_from_ndjson(history_to_ndjson(run.history))
    assert [r.to_dict(False) for r in back] == [r.to_dict(False) for r in run.history]


# --- fedavg and comm accounting -------------------------------------------------

def test_fedavg_aggregate():
    rng = np.random.default_rng(0)
    a = build_encoder("mlp-5", 3, 2, rng)
    b = build_encoder("mlp-5", 3, 2, rng)
    assert _params_equal(fedavg_aggregate([a, a.copy()], [0.5, 0.5]), a)
    assert _params_equal(fedavg_aggregate([a, b], [1.0, 0.0]), a)
    mid = fedavg_aggregate([a, b], [0.5, 0.5])
    for p, x, y in zip(mid.parameters(), a.parameters(), b.parameters()):
        np.testing.assert_allclose(p.ravel(), [(u + v) / 2 for u, v in zip(x.ravel(), y.ravel())], rtol=1e-15)
    with pytest.raises(ValueError):
        fedavg_aggregate([a, build_encoder("mlp-6", 3, 2, rng)], [0.5, 0.5])
    with pytest.raises(ValueError):
        fedavg_aggregate([a, b], [0.7, 0.7])


def test_fedavg_mode_runs_homogeneous_and_rejects_heterogeneous():
    run = run_training(small_cfg(mode="fedavg", archs=("mlp-32",)))
    first = run.models[0]
    assert all(_params_equal(first, m) for m in run.models[1:])
    assert run.history[0].clients[0].bytes_up == 8 * first.num_parameters()
    with pytest.raises(ValueError):
        run_training(small_cfg(mode="fedavg"))


def test_comm_cost():
    cfg = RunConfig(projection_dim=16, batches_per_round=10)
    assert comm_cost(cfg, "round-wise") == packed_size(16) == 28 + 8 * 136
    assert comm_cost(cfg, "batch-wise") == 10 * comm_cost(cfg, "round-wise")
    one = cfg.replace(batches_per_round=1)
    assert comm_cost(one, "batch-wise") == comm_cost(one, "round-wise")
    big = RunConfig(projection_dim=256, batch_size=500, batches_per_round=100)
    assert comm_cost(big, "batch-wise") == 100 * comm_cost(big, "round-wise")
    with pytest.raises(ValueError):
        comm_cost(cfg, "epoch-wise")


def test_forward_output_dim_is_shared_across_zoo():
    cfg = small_cfg()
    for c in _clients(cfg):
        z, _ = forward(c.model, c.data.samples[:5])
        assert z.shape == (5, cfg.projection_dim)
