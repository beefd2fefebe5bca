"""Training procedures: freeze contracts, policy rules, memory discipline,
method reductions (each method collapses to its base when its mechanism is off)."""
import logging

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cladapt.autodiff import Tensor, backward
from cladapt.decoding import Decoder
from cladapt.model import Model, ModelConfig, Utterance
from cladapt.taskgen import TaskSpec, generate_task, interference_suite
from cladapt.training import (
    SGD,
    DecaySelection,
    FreezeViolationError,
    ParameterStore,
    RehearsalMemory,
    TrainPolicy,
    bank_group,
    decay_candidate_passes,
    mean_distill_kl,
    mean_hybrid_loss,
    pick_decay_exponent,
    select_weight_decay,
    train_a_cft,
    train_a_freeze,
    train_er,
    train_fine_tune,
    train_initial,
    train_kd,
    train_lwf,
    train_separate,
    weight_decay_term,
)

CFG = ModelConfig(vocab_size=10, feature_dim=4, num_encoder_layers=2,
                  num_decoder_layers=1, attention_dim=8, feedforward_dim=16, num_heads=2)


def tiny_suite(n_tasks=2):
    return interference_suite(
        n_tasks, vocab_size=10, feature_dim=4, n_train=24, n_dev=6, n_test=6,
        min_tokens=2, max_tokens=4)


def tiny_policy(method="fine_tune", **kw):
    defaults = dict(method=method, epochs_initial=1, epochs_adapt=1, epochs_stage2=1,
                    batch_size=8, seed=0, adapter_dim=4, lr_initial=1e-3)
    return TrainPolicy(**{**defaults, **kw})


def fresh_store(use_adapters, seed=0, adapter_dim=4):
    return ParameterStore(Model(CFG, seed=seed), use_adapters=use_adapters,
                          adapter_dim=adapter_dim)


@pytest.fixture(scope="module")
def datasets():
    return [generate_task(s) for s in tiny_suite(3)]


# ---------------------------------------------------------------- policy rules

def test_lr_rules_resolve_by_division():
    p = tiny_policy(lr_initial=1e-2)
    assert p.resolved_lr_ft == pytest.approx(1e-3)
    assert p.resolved_cautious_lr == pytest.approx(1e-4)


def test_lr_override_is_honored_but_logged(caplog):
    with caplog.at_level(logging.WARNING, logger="cladapt.training"):
        p = tiny_policy(lr_initial=1e-2, lr_ft=5e-3)
    assert p.resolved_lr_ft == 5e-3
    assert p.resolved_cautious_lr == pytest.approx(5e-4)
    assert any("overrides" in r.message for r in caplog.records)


def test_weight_decay_lambda_from_exponent():
    assert tiny_policy(weight_decay_exponent=-5).weight_decay_lambda == pytest.approx(1e-5)
    assert tiny_policy(weight_decay_exponent=None).weight_decay_lambda == 0.0
    with pytest.raises(ValueError, match="negative"):
        tiny_policy(weight_decay_exponent=1.0)


def test_policy_rejects_unknown_method():
    with pytest.raises(ValueError, match="unknown method"):
        tiny_policy(method="edge_of_tomorrow")


def test_policy_roundtrip():
    p = tiny_policy(method="er", memory_capacity=12)
    assert TrainPolicy.from_dict(p.to_dict()) == p


# ---------------------------------------------------------------- store groups

def test_store_groups_partition_every_scalar(datasets):
    store = fresh_store(use_adapters=True)
    train_initial(datasets[0], store, tiny_policy("adapter_freeze"))
    names = [n for n, _ in store.all_named_tensors()]
    assert len(names) == len(set(names))
    total = sum(t.data.size for _, t in store.all_named_tensors())
    assert total == store.model.parameter_count() + store.registry.get(1).parameter_count()


def test_store_configure_rejects_unknown_group():
    store = fresh_store(use_adapters=False)
    with pytest.raises(ValueError, match="unknown parameter groups"):
        store.configure({"encoder-attention", "bank_7"})


# ---------------------------------------------------------------- weight decay

def test_decay_step_closed_form_with_sgd():
    # loss = lam * theta^2, one SGD step: theta -> theta * (1 - 2 lr lam)
    theta = Tensor(np.array([3.0]), requires_grad=True)
    lam, lr = 0.01, 0.1
    loss = weight_decay_term([("theta", theta)], lam)
    backward(loss)
    SGD([("theta", theta)], lr).step()
    assert theta.data[0] == pytest.approx(3.0 * (1 - 2 * lr * lam), rel=1e-12)


def test_zero_decay_equals_no_decay_trajectory(datasets):
    runs = []
    for exponent in (None, None):
        store = fresh_store(use_adapters=True)
        train_initial(datasets[0], store, tiny_policy("adapter_freeze",
                                                      weight_decay_exponent=exponent))
        runs.append(store.shared_fingerprint())
    assert runs[0] == runs[1]
    # and a nonzero decay changes the trajectory
    store = fresh_store(use_adapters=True)
    train_initial(datasets[0], store, tiny_policy("adapter_freeze",
                                                  weight_decay_exponent=-1.0))
    assert store.shared_fingerprint() != runs[0]


def test_initial_decay_excludes_adapters(datasets):
    store = fresh_store(use_adapters=True)
    policy = tiny_policy("adapter_freeze", weight_decay_exponent=-1.0)
    train_initial(datasets[0], store, policy)
    decayed = {g for g, f in store.flags.items() if f.decayed}
    assert bank_group(1) not in decayed


def test_train_initial_requires_empty_registry(datasets):
    store = fresh_store(use_adapters=True)
    train_initial(datasets[0], store, tiny_policy("adapter_freeze"))
    with pytest.raises(ValueError, match="empty bank registry"):
        train_initial(datasets[0], store, tiny_policy("adapter_freeze"))


# ---------------------------------------------------------------- freeze contracts

def test_a_freeze_keeps_shared_and_previous_banks_bit_identical(datasets):
    store = fresh_store(use_adapters=True)
    policy = tiny_policy("adapter_freeze")
    train_initial(datasets[0], store, policy)
    shared_before = store.shared_fingerprint()
    bank1_before = store.registry.get(1).fingerprint()
    run = train_a_freeze(datasets[1], store, policy)
    assert store.shared_fingerprint() == shared_before
    assert store.registry.get(1).fingerprint() == bank1_before
    assert store.registry.get(2).fingerprint() != bank1_before  # bank 2 trained
    assert run.fingerprints_before[bank_group(1)] == run.fingerprints_after[bank_group(1)]


def test_a_freeze_requires_initialized_registry(datasets):
    store = fresh_store(use_adapters=True)
    with pytest.raises(ValueError, match="registry"):
        train_a_freeze(datasets[1], store, tiny_policy("adapter_freeze"))


def test_freeze_violation_is_detected(datasets, monkeypatch):
    store = fresh_store(use_adapters=True)
    policy = tiny_policy("adapter_freeze")
    train_initial(datasets[0], store, policy)

    from cladapt import training as tr
    original = tr._run_stage

    def sabotage(store_, *args, **kwargs):
        out = original(store_, *args, **kwargs)
        store_.model.params["enc_in.w"].data[0, 0] += 1.0  # drift that must be caught
        return out

    monkeypatch.setattr(tr, "_run_stage", sabotage)
    with pytest.raises(FreezeViolationError, match="frozen"):
        train_a_freeze(datasets[1], store, policy)


def test_a_cft_runs_two_stages_and_freezes_old_banks(datasets):
    store = fresh_store(use_adapters=True)
    policy = tiny_policy("adapter_cautious")
    train_initial(datasets[0], store, policy)
    bank1_before = store.registry.get(1).fingerprint()
    shared_before = store.shared_fingerprint()
    run = train_a_cft(datasets[1], store, policy)
    assert [s.stage for s in run.stages] == ["adapt_frozen", "adapt_cautious"]
    assert run.stages[0].lr == policy.resolved_lr_ft
    assert run.stages[1].lr == pytest.approx(policy.lr_initial / 100.0)
    assert store.registry.get(1).fingerprint() == bank1_before
    assert store.shared_fingerprint() != shared_before  # stage 2 moved shared params


def test_a_cft_with_zero_stage2_equals_a_freeze(datasets):
    stores = [fresh_store(use_adapters=True) for _ in range(2)]
    for store, fn, method in zip(
            stores, (train_a_freeze, train_a_cft), ("adapter_freeze", "adapter_cautious")):
        policy = tiny_policy(method, epochs_stage2=0)
        train_initial(datasets[0], store, policy)
        fn(datasets[1], store, policy)
    assert stores[0].fingerprints() == stores[1].fingerprints()


def test_separate_scopes_freeze_documented_groups(datasets):
    for scope, frozen_groups in (("encoder", {"decoder"}),
                                 ("encoder_ff", {"decoder", "encoder-attention",
                                                 "embeddings", "heads"})):
        store = fresh_store(use_adapters=False)
        policy = tiny_policy("sep_model")
        train_initial(datasets[0], store, policy)
        before = store.fingerprints()
        train_separate(datasets[1], store, policy, scope=scope)
        after = store.fingerprints()
        for g in frozen_groups:
            assert before[g] == after[g], (scope, g)
        assert before["encoder-feedforward"] != after["encoder-feedforward"]


def test_separate_rejects_unknown_scope(datasets):
    store = fresh_store(use_adapters=False)
    with pytest.raises(ValueError, match="scope"):
        train_separate(datasets[0], store, tiny_policy("sep_model"), scope="everything")


# ---------------------------------------------------------------- reductions

def test_lwf_with_zero_distill_weight_matches_fine_tuning(datasets):
    results = []
    for fn, method, kw in ((train_fine_tune, "fine_tune", {}),
                           (train_lwf, "lwf", {"distill_weight": 0.0})):
        store = fresh_store(use_adapters=False)
        train_initial(datasets[0], store, tiny_policy(method, **kw))
        fn(datasets[1], store, tiny_policy(method, **kw))
        results.append(store.shared_fingerprint())
    assert results[0] == results[1]


def test_distill_term_zero_when_teacher_equals_student(datasets):
    store = fresh_store(use_adapters=False)
    train_initial(datasets[0], store, tiny_policy())
    teacher = store.model.clone()
    batch = datasets[1].dev
    kl = mean_distill_kl(store.model, teacher, batch)
    assert float(kl.data) == pytest.approx(0.0, abs=1e-12)


def test_distill_pull_shrinks_drift_monotonically(datasets):
    # stronger distillation keeps the model closer to the pre-task teacher
    drifts = []
    for lam in (0.0, 2.0, 20.0):
        store = fresh_store(use_adapters=False)
        policy = tiny_policy("lwf", distill_weight=lam, epochs_adapt=2)
        train_initial(datasets[0], store, policy)
        ref = {n: t.data.copy() for n, t in store.model.named_parameters()}
        train_lwf(datasets[1], store, policy)
        drift = np.sqrt(sum(((t.data - ref[n]) ** 2).sum()
                            for n, t in store.model.named_parameters()))
        drifts.append(drift)
    assert drifts[0] > drifts[1] > drifts[2]


def test_kd_with_zero_weight_matches_er_free_fine_tune(datasets):
    # KD's distinguishing term off -> same trajectory as fine-tuning
    mem = RehearsalMemory(capacity=8)
    mem.rebalance(1, datasets[0].dev, seed=0)
    store_kd = fresh_store(use_adapters=False)
    policy = tiny_policy("kd", distill_weight=0.0)
    train_initial(datasets[0], store_kd, policy)
    train_kd(datasets[1], store_kd, mem, policy)
    store_ft = fresh_store(use_adapters=False)
    policy_ft = tiny_policy("fine_tune")
    train_initial(datasets[0], store_ft, policy_ft)
    train_fine_tune(datasets[1], store_ft, policy_ft)
    assert store_kd.shared_fingerprint() == store_ft.shared_fingerprint()


def test_er_requires_new_data_and_nonempty_memory(datasets):
    store = fresh_store(use_adapters=False)
    policy = tiny_policy("er", memory_capacity=8)
    train_initial(datasets[0], store, policy)
    with pytest.raises(ValueError, match="empty rehearsal memory"):
        train_er(datasets[1], store, RehearsalMemory(capacity=8), policy)


def test_er_trains_and_rebalances(datasets):
    store = fresh_store(use_adapters=False)
    policy = tiny_policy("er", memory_capacity=8)
    train_initial(datasets[0], store, policy)
    mem = RehearsalMemory(capacity=8)
    mem.rebalance(1, datasets[0].dev, seed=policy.seed)
    train_er(datasets[1], store, mem, policy)
    counts = mem.task_counts()
    assert counts == {1: 4, 2: 4}


# ---------------------------------------------------------------- memory

def test_memory_never_exceeds_capacity_and_quotas_differ_by_one():
    mem = RehearsalMemory(capacity=10)
    pools = {t: generate_task(tiny_suite(3)[t - 1])._train for t in (1, 2, 3)}
    for t in (1, 2, 3):
        mem.rebalance(t, pools[t], seed=0)
        assert len(mem) <= 10
        counts = mem.task_counts()
        assert max(counts.values()) - min(counts.values()) <= 1
    assert sorted(mem.task_counts()) == [1, 2, 3]


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 40), st.integers(1, 5))
def test_memory_quota_arithmetic(capacity, tasks):
    mem = RehearsalMemory(capacity=capacity)
    frames = np.zeros((2, 3))
    for t in range(1, tasks + 1):
        pool = [Utterance(frames=frames, tokens=(2,), task_id=t, utt_id=f"{t}-{i}")
                for i in range(capacity + 5)]
        mem.rebalance(t, pool, seed=1)
        assert len(mem) <= capacity
        counts = mem.task_counts()
        assert max(counts.values()) - min(counts.values()) <= 1


def test_memory_sampling_is_seeded_and_errors_when_empty():
    mem = RehearsalMemory(capacity=4)
    with pytest.raises(ValueError, match="empty"):
        mem.sample(2, np.random.default_rng(0))
    frames = np.zeros((2, 3))
    mem.rebalance(1, [Utterance(frames=frames, tokens=(2,), task_id=1, utt_id=str(i))
                      for i in range(10)], seed=0)
    a = [u.utt_id for u in mem.sample(4, np.random.default_rng(7))]
    b = [u.utt_id for u in mem.sample(4, np.random.default_rng(7))]
    assert a == b


# ---------------------------------------------------------------- reproducibility

def test_training_is_bit_reproducible(datasets):
    fps = []
    for _ in range(2):
        store = fresh_store(use_adapters=True)
        policy = tiny_policy("adapter_cautious")
        train_initial(datasets[0], store, policy)
        train_a_cft(datasets[1], store, policy)
        fps.append(store.fingerprints())
    assert fps[0] == fps[1]


def test_mean_hybrid_loss_handles_mixed_lengths(datasets):
    store = fresh_store(use_adapters=False)
    batch = datasets[0].dev  # mixed token lengths by construction
    loss = mean_hybrid_loss(store.model, batch)
    per_utt = [float(store.model.hybrid_loss(u).data) for u in batch]
    assert float(loss.data) == pytest.approx(np.mean(per_utt), rel=1e-10)


# ---------------------------------------------------------------- decay selection

def test_decay_pass_rule_arithmetic():
    assert decay_candidate_passes(20.1, 20.0)        # 20.1 <= 20.2
    assert not decay_candidate_passes(20.3, 20.0)


def test_pick_exponent_prefers_largest_passing():
    table = [(-1.0, 25.0), (-2.0, 20.15), (-3.0, 20.05)]
    assert pick_decay_exponent(table, reference_wer=20.0) == -2.0


def test_pick_exponent_sentinel_when_all_fail():
    assert pick_decay_exponent([(-1.0, 30.0), (-2.0, 29.0)], 20.0) is None


def test_select_weight_decay_on_tiny_task(datasets):
    policy = tiny_policy("adapter_freeze", epochs_initial=1)
    selection = select_weight_decay(
        datasets[0], lambda: fresh_store(use_adapters=True), policy,
        candidates=[-1.0, -6.0], beam_width=1)
    assert isinstance(selection, DecaySelection)
    assert selection.reference_wer >= 0.0
    assert selection.evaluated  # at least one candidate trained
    if selection.selected_exponent is not None:
        assert selection.selected_exponent in (-1.0, -6.0)
