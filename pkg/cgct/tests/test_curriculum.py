import functools
import math
import os
import warnings
from dataclasses import fields, replace

import numpy as np
import pytest
import torch
import torch.nn.functional as F
from dotenv import load_dotenv

from cgct import curriculum
from cgct.curriculum import (
    FINETUNE,
    PRETRAIN,
    CurriculumState,
    Optimizers,
    PseudoLabelRecord,
    TrainingContext,
    adaptation_stage,
    domain_entropy,
    edge_teacher_probs,
    pseudo_label_stage,
    run_variant,
    select_confident,
    select_next_domain,
    supervised_phase,
    update_source_set,
)
from cgct.data import DomainDataset, Sample, SyntheticSpec, generate_synthetic_task
from cgct.errors import ConfigurationError, ContractViolation, DatasetError, TrainingDivergedError
from cgct.evaluation import embeddings_frame, evaluate, scatter_ratio
from cgct.models import (
    ArchitectureConfig,
    ModelBundle,
    architecture_for_inputs,
    classifier_forward,
    gcn_classifier_forward,
    inference_mode,
    predict,
)
from cgct.variants import Direction, Head, OptimConfig, PseudoLabelRouting, Variant, VariantConfig

load_dotenv()


def requires_slow_runs(test_function):
    """Decorator to mark full training experiments that take minutes."""

    @functools.wraps(test_function)
    def wrapper(*args, **kwargs):
        if os.environ.get("CGCT_RUN_SLOW") != "1":
            pytest.skip("Slow training experiment, set CGCT_RUN_SLOW=1 to run it")
        return test_function(*args, **kwargs)

    return wrapper


def small_task(seed=0, shifts=(0.2, 0.6, 1.2)):
    return generate_synthetic_task(
        SyntheticSpec(
            n_c=3, d=6, samples_per_class_per_domain=10, eval_samples_per_class=5,
            shift_magnitudes=shifts, seed=seed,
        )
    )


def quick_config(variant=Variant.D_CGCT, **overrides):
    settings = dict(
        variant=variant, batch_size=8, K=4, K_finetune=3,
        pretrain_max_iterations=20, pretrain_eval_every=5, pretrain_patience=10,
    )
    settings.update(overrides)
    return VariantConfig(**settings)


def context_for(bundle, config=None, **kwargs):
    return TrainingContext.create(bundle, config or quick_config(), **kwargs)


def labeled_pool(n, domain_id=0, prefix="s", n_c=2, d=4):
    return [
        Sample(np.full(d, i, dtype=np.float32), i % n_c, domain_id, f"{prefix}{i}") for i in range(n)
    ]


def scripted_state(n_source=100, per_target=100, n_targets=3):
    source = tuple(labeled_pool(n_source))
    targets = {}
    for d in range(1, n_targets + 1):
        for i in range(per_target):
            sample = Sample(np.zeros(4, dtype=np.float32), None, d, f"t{d}:{i}")
            targets[sample.uid] = sample
    return CurriculumState(
        q=0,
        source=source,
        pseudo_source=source,
        remaining_targets=tuple(range(1, n_targets + 1)),
        active_target_pool=tuple(targets.values()),
        target_samples=targets,
    )


def records_for(domain_id, count, step=1, label=1):
    return [PseudoLabelRecord(f"t{domain_id}:{i}", label, 0.9, step, domain_id) for i in range(count)]


def test_select_next_domain():
    entropies = {1: 1.2, 2: 0.4, 3: 0.9}
    assert select_next_domain(entropies, Direction.EASIEST_FIRST) == 2
    assert select_next_domain(entropies, Direction.HARDEST_FIRST) == 1
    assert select_next_domain({1: 0.5, 2: 0.5}) == 1
    assert select_next_domain({1: 0.5, 2: 0.5}, Direction.HARDEST_FIRST) == 1
    with pytest.raises(ContractViolation):
        select_next_domain({})


def test_domain_entropy_uniform_and_confident():
    torch.manual_seed(0)
    bundle = ModelBundle(ArchitectureConfig(n_c=10, input_dim=4))
    domain = DomainDataset("t", 1, labeled_pool(12, domain_id=1, prefix="t"))
    with torch.no_grad():
        bundle.mlp_head.weight.zero_()
        bundle.mlp_head.bias.zero_()
    assert domain_entropy(bundle, domain) == pytest.approx(math.log(10), rel=1e-6)

    with torch.no_grad():
        bundle.mlp_head.bias[0] = 100.0
    assert domain_entropy(bundle, domain) == pytest.approx(0.0, abs=1e-6)
    with pytest.raises(DatasetError):
        domain_entropy(bundle, [])


def test_domain_entropy_matches_loop():
    torch.manual_seed(1)
    bundle = ModelBundle(ArchitectureConfig(n_c=4, input_dim=6))
    task = small_task()
    target = task.targets[0]
    _, probs = predict(bundle, np.stack([s.features for s in target]))
    per_sample = []
    for row in probs.double().tolist():
        per_sample.append(-sum(p * math.log(p) for p in row if p > 0))
    assert domain_entropy(bundle, target) == pytest.approx(sum(per_sample) / len(per_sample), rel=1e-9)


def test_select_confident_rule():
    probs = torch.tensor([[0.8, 0.1, 0.1], [0.4, 0.35, 0.25], [0.05, 0.05, 0.9]])
    records = select_confident(probs, ["a", "b", "c"], [1, 1, 2], tau=0.7, step=2)
    assert [(r.uid, r.assigned_label, r.step, r.domain_id) for r in records] == [("a", 0, 2, 1), ("c", 2, 2, 2)]
    assert all(r.confidence > 0.7 for r in records)
    assert select_confident(probs, ["a", "b", "c"], [1, 1, 2], tau=1.0, step=2) == []
    # strictly greater than tau
    assert select_confident(torch.tensor([[0.75, 0.25]]), ["a"], [1], tau=0.75, step=1) == []


@pytest.mark.parametrize("label_source", [Head.MLP, Head.GCN])
def test_pseudo_label_counts_monotone_in_tau(label_source):
    torch.manual_seed(2)
    task = small_task()
    bundle = ModelBundle(ArchitectureConfig(n_c=3, input_dim=6))
    pool = task.targets[1].samples
    counts = []
    for tau in (0.0, 0.3, 0.7, 0.9):
        records = pseudo_label_stage(
            bundle, pool, tau, label_source,
            step=1, batch_size=8, context_pool=task.source.samples, rng=np.random.default_rng(0),
        )
        counts.append(len(records))
        assert all(r.confidence > tau for r in records)
        assert all(0 <= r.assigned_label < 3 for r in records)
    assert counts == sorted(counts, reverse=True)
    assert counts[0] == len(pool)
    assert pseudo_label_stage(bundle, pool, 1.0, label_source, context_pool=task.source.samples) == []


def test_gcn_pseudo_labeling_leaves_parameters_untouched():
    torch.manual_seed(3)
    task = small_task()
    bundle = ModelBundle(ArchitectureConfig(n_c=3, input_dim=6))
    bundle.train()
    before = {k: v.clone() for k, v in bundle.state_dict().items()}
    # 25 targets in chunks of 8 without anchors: the single leftover target joins the last chunk
    pseudo_label_stage(bundle, task.targets[0].samples[:25], 0.0, Head.GCN, batch_size=8, pl_context="none")
    pseudo_label_stage(bundle, task.targets[0].samples[:1], 0.0, Head.GCN, batch_size=8, pl_context="none")
    pseudo_label_stage(
        bundle, task.targets[0].samples, 0.0, Head.GCN,
        batch_size=8, context_pool=task.source.samples, rng=np.random.default_rng(0),
    )
    assert bundle.training
    for key, value in bundle.state_dict().items():
        assert torch.equal(value, before[key]), key
    assert pseudo_label_stage(bundle, [], 0.5, Head.GCN) == []


def test_cgct_update_rebuilds_from_source():
    state = scripted_state()
    state = update_source_set(state, records_for(1, 40), "cgct")
    assert len(state.pseudo_source) == 140
    state = update_source_set(state, records_for(2, 55, step=2), "cgct")
    assert len(state.pseudo_source) == 155
    assert state.q == 2
    uids = {s.uid for s in state.pseudo_source}
    assert not any(uid.startswith("t1:") for uid in uids)
    assert state.remaining_targets == (1, 2, 3)


def test_dcl_update_accumulates_and_consumes():
    state = scripted_state()
    state = update_source_set(state, records_for(1, 30), "dcl", consumed_domain=1)
    state = update_source_set(state, records_for(2, 20, step=2), "dcl", consumed_domain=2)
    assert len(state.pseudo_source) == 150
    assert state.remaining_targets == (3,)
    state = update_source_set(state, [], "dcl", consumed_domain=3)
    assert state.remaining_targets == ()
    with pytest.raises(ContractViolation):
        update_source_set(state, [], "dcl", consumed_domain=3)


def test_update_keeps_ground_truth_labels():
    state = scripted_state(n_source=4)
    clash = PseudoLabelRecord("s1", 0, 0.95, 1, 0)
    state = update_source_set(state, [clash] + records_for(1, 2, label=1), "cgct")
    by_uid = {s.uid: s for s in state.pseudo_source}
    assert by_uid["s1"].label == 1
    assert len(state.pseudo_source) == 6
    assert by_uid["t1:0"].label == 1 and by_uid["t1:0"].domain_id == 1
    with pytest.raises(ContractViolation):
        update_source_set(state, [PseudoLabelRecord("unknown", 0, 0.9, 1, 1)], "cgct")


def test_supervised_phase_learns_separable_source():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(200, 4)).astype(np.float32)
    x[:, 0] = np.sign(x[:, 0]) * (1.0 + np.abs(x[:, 0]))
    pool = [Sample(x[i], int(x[i, 0] > 0), 0, f"s{i}") for i in range(200)]
    torch.manual_seed(0)
    bundle = ModelBundle(ArchitectureConfig(n_c=2, input_dim=4))
    config = quick_config(batch_size=16, optim=OptimConfig(lr=0.05, lr_decay=1.0))
    ctx = context_for(bundle, config)
    supervised_phase(ctx, pool, 500, FINETUNE)
    assert len(ctx.loss_log) == 500

    _, probs = predict(bundle, x)
    accuracy = float(np.mean(probs.argmax(dim=1).numpy() == np.array([s.label for s in pool])))
    assert accuracy > 0.95


def test_supervised_phase_edge_cases():
    torch.manual_seed(0)
    bundle = ModelBundle(ArchitectureConfig(n_c=2, input_dim=4))
    ctx = context_for(bundle)
    before = {k: v.clone() for k, v in bundle.state_dict().items()}
    supervised_phase(ctx, labeled_pool(10), 0, PRETRAIN)
    assert all(torch.equal(v, before[k]) for k, v in bundle.state_dict().items())
    with pytest.raises(ConfigurationError):
        supervised_phase(ctx, [], 10, FINETUNE)


def test_pretrain_stops_after_patience_without_improvement():
    torch.manual_seed(0)
    bundle = ModelBundle(ArchitectureConfig(n_c=2, input_dim=4))
    config = quick_config(
        pretrain_max_iterations=2000, pretrain_eval_every=10, pretrain_patience=50,
        optim=OptimConfig(lr=1e-9),
    )
    ctx = context_for(bundle, config)
    supervised_phase(ctx, labeled_pool(40), config.pretrain_max_iterations, PRETRAIN)
    # the first evaluation sets the reference, five more without 1% improvement stop the phase
    assert len(ctx.loss_log) == 60


def test_finetune_only_touches_classifier():
    torch.manual_seed(0)
    task = small_task()
    bundle = ModelBundle(ArchitectureConfig(n_c=3, input_dim=6))
    ctx = context_for(bundle)
    frozen = ("edge_net", "node_net", "discriminator")
    before = {k: v.clone() for k, v in bundle.state_dict().items()}
    supervised_phase(ctx, task.source.samples, 15, FINETUNE)
    after = bundle.state_dict()
    for key, value in before.items():
        if key.startswith(frozen):
            assert torch.equal(after[key], value), key
    assert not torch.equal(after["mlp_head.weight"], before["mlp_head.weight"])


def test_adaptation_stage_logs_every_iteration():
    torch.manual_seed(0)
    task = small_task()
    bundle = ModelBundle(ArchitectureConfig(n_c=3, input_dim=6))
    ctx = context_for(bundle, quick_config(Variant.CGCT))
    state = CurriculumState.initial(task, combined_pool=True)

    before = {k: v.clone() for k, v in bundle.state_dict().items()}
    adaptation_stage(ctx, state, 0)
    assert all(torch.equal(v, before[k]) for k, v in bundle.state_dict().items())

    adaptation_stage(ctx, state, 6)
    assert [e["iteration"] for e in ctx.loss_log] == list(range(6))
    assert all(np.isfinite(e["total"]) for e in ctx.loss_log)
    assert any(e["edge_bce"] > 0 for e in ctx.loss_log)
    assert ctx.global_iteration == 6
    assert not torch.equal(bundle.state_dict()["discriminator.net.0.weight"], before["discriminator.net.0.weight"])


def test_adaptation_stage_aborts_on_non_finite_loss(tmp_path):
    torch.manual_seed(0)
    task = small_task()
    bundle = ModelBundle(ArchitectureConfig(n_c=3, input_dim=6))
    ctx = context_for(bundle, quick_config(Variant.D_CGCT), dump_dir=str(tmp_path))
    state = CurriculumState.initial(task, combined_pool=True)
    with torch.no_grad():
        bundle.feature_extractor.net[0].weight.fill_(float("nan"))
    with pytest.raises(TrainingDivergedError) as error:
        adaptation_stage(ctx, state, 3)
    assert error.value.dump_path is not None
    assert os.path.exists(error.value.dump_path)


def test_d_cgct_consumes_every_domain_once():
    task = small_task()
    result = run_variant(task, quick_config(Variant.D_CGCT))
    history = result.state.selection_history
    assert sorted(history) == [1, 2, 3]
    assert result.state.remaining_targets == ()
    assert len(result.state_log) == 3
    sizes = [entry["pseudo_source_size"] for entry in result.state_log]
    assert sizes == sorted(sizes)
    assert [h["stage"] for h in result.history] == ["pretrain", "step", "step", "step", "final"]
    assert 0.0 <= result.history[-1]["average"] <= 1.0


def test_cgct_rebuilds_from_original_source():
    task = small_task()
    result = run_variant(task, quick_config(Variant.CGCT, Q=2, batch_size=4), step_callback=None)
    state = result.state
    assert state.q == 2
    source_labels = {s.uid: s.label for s in task.source}
    by_uid = {s.uid: s for s in state.pseudo_source}
    assert all(by_uid[uid].label == label for uid, label in source_labels.items())
    pseudo = {uid for uid in by_uid if uid not in source_labels}
    assert pseudo == {r.uid for r in state.records}
    assert all(r.step == 2 for r in state.records)


def test_baselines_skip_pseudo_labels():
    task = small_task()
    baseline = run_variant(task, quick_config(Variant.CDAN_BASELINE))
    assert len(baseline.state_log) == 3
    assert all(entry["pseudo_labels"] == 0 for entry in baseline.state_log)
    assert len(baseline.state.pseudo_source) == len(task.source)

    source_only = run_variant(task, quick_config(Variant.SOURCE_ONLY))
    assert source_only.state_log == []
    assert [h["stage"] for h in source_only.history] == ["pretrain", "final"]


def test_step_callback_and_entropy_from_source_model():
    task = small_task()
    seen = []
    result = run_variant(
        task,
        quick_config(Variant.CDAN_DCL, entropy_model="source", direction=Direction.HARDEST_FIRST),
        step_callback=lambda step, bundle, record: seen.append((step, record["selected_domain"])),
    )
    assert [step for step, _ in seen] == [1, 2, 3]
    first = result.state_log[0]["entropies"]
    assert seen[0][1] == max(first, key=first.get)


def test_run_variant_is_deterministic():
    task = small_task()
    config = quick_config(Variant.M3)
    first = run_variant(task, config)
    second = run_variant(task, config)
    assert first.history == second.history
    assert first.state_log == second.state_log
    for key, value in first.bundle.state_dict().items():
        assert torch.equal(second.bundle.state_dict()[key], value)


def test_domain_curriculum_rejects_mismatched_steps():
    with pytest.raises(ConfigurationError):
        run_variant(small_task(), quick_config(Variant.D_CGCT, Q=2))




@pytest.mark.parametrize(
    "variant, harvest",
    [
        (Variant.CDAN_BASELINE, None),
        (Variant.CDAN_PL, Head.MLP),
        (Variant.CGCT, Head.GCN),
        (Variant.D_CGCT, Head.GCN),
        (Variant.M1, Head.MLP),
        (Variant.M2, Head.GCN),
        (Variant.M3, Head.MLP),
        (Variant.CDAN_DOMAIN, None),
        (Variant.GCN_HEAD, None),
        (Variant.GCN_HEAD_PL, Head.GCN),
    ],
)
def test_pseudo_labels_come_from_the_harvesting_head(monkeypatch, variant, harvest):
    seen = []
    original = curriculum.pseudo_label_stage

    def recording_stage(bundle, target_pool, tau, label_source, **kwargs):
        seen.append(Head(label_source))
        return original(bundle, target_pool, tau, label_source, **kwargs)

    monkeypatch.setattr(curriculum, "pseudo_label_stage", recording_stage)
    run_variant(small_task(), quick_config(variant, K=2, K_finetune=2))
    assert seen == ([] if harvest is None else [harvest] * 3)
    assert [f.name for f in fields(PseudoLabelRouting)] == ["mlp_ce", "edge"]


def test_gcn_edge_teacher_runs_an_eval_forward_without_gradient():
    torch.manual_seed(0)
    bundle = ModelBundle(ArchitectureConfig(n_c=3, input_dim=6))
    bundle.train()
    x = torch.randn(8, 6)
    _, mlp_logits = classifier_forward(x, bundle)
    mlp_probs = F.softmax(mlp_logits, dim=1)
    before = {k: v.clone() for k, v in bundle.state_dict().items()}

    probs = edge_teacher_probs(bundle, x, mlp_probs, 4, Head.GCN)
    assert bundle.training
    assert not probs.requires_grad
    for key, value in bundle.state_dict().items():
        assert torch.equal(value, before[key]), key
    with inference_mode(bundle):
        _, eval_logits = gcn_classifier_forward(x, bundle)
    assert torch.allclose(probs, F.softmax(eval_logits[4:], dim=1))
    # a train-mode forward normalizes with batch statistics instead
    _, train_logits = gcn_classifier_forward(x, bundle)
    assert not torch.allclose(probs, F.softmax(train_logits[4:], dim=1).detach())

    from_mlp = edge_teacher_probs(bundle, x, mlp_probs, 4, Head.MLP)
    assert not from_mlp.requires_grad
    assert torch.equal(from_mlp, mlp_probs[4:].detach())


def scheduler_warnings(caught):
    return [w for w in caught if "lr_scheduler.step()" in str(w.message)]


def learning_rates(ctx):
    return {name: getattr(ctx.optimizers, name).param_groups[0]["lr"] for name in Optimizers.GROUPS}


def test_only_stepped_optimizers_decay():
    torch.manual_seed(0)
    task = small_task()
    bundle = ModelBundle(ArchitectureConfig(n_c=3, input_dim=6))
    ctx = context_for(bundle, quick_config(Variant.CDAN_BASELINE, optim=OptimConfig(lr=0.1, lr_decay=0.5)))
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        supervised_phase(ctx, task.source.samples, 3, FINETUNE)
        assert learning_rates(ctx) == pytest.approx({"discriminator": 0.1, "classifier": 0.0125, "graph": 0.1})
        adaptation_stage(ctx, CurriculumState.initial(task, combined_pool=True), 2)
    assert learning_rates(ctx) == pytest.approx({"discriminator": 0.025, "classifier": 0.003125, "graph": 0.1})
    assert scheduler_warnings(caught) == []
    with pytest.raises(ConfigurationError):
        ctx.optimizers.step("edge_net")


def test_graph_classifier_pretraining_steps_the_graph_optimizer():
    torch.manual_seed(0)
    task = small_task()
    bundle = ModelBundle(ArchitectureConfig(n_c=3, input_dim=6))
    ctx = context_for(bundle, quick_config(Variant.GCN_HEAD, optim=OptimConfig(lr=0.1, lr_decay=0.5)))
    head_before = bundle.mlp_head.weight.clone()
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        supervised_phase(ctx, task.source.samples, 2, FINETUNE)
    assert scheduler_warnings(caught) == []
    assert learning_rates(ctx) == pytest.approx({"discriminator": 0.1, "classifier": 0.025, "graph": 0.025})
    assert torch.equal(bundle.mlp_head.weight, head_before)
    assert all(set(e) >= {"node_ce", "edge_bce"} and "mlp_ce" not in e for e in ctx.loss_log)


def test_gcn_head_variant_never_trains_the_mlp_head():
    task = small_task()
    result = run_variant(task, quick_config(Variant.GCN_HEAD_PL))
    torch.manual_seed(0)
    initial = ModelBundle(architecture_for_inputs((6,), 3, disc_outputs=4))
    assert result.bundle.discriminator.outputs == 4
    assert torch.equal(result.bundle.mlp_head.weight, initial.mlp_head.weight)
    assert not torch.equal(result.bundle.node_net.net[0].weight, initial.node_net.net[0].weight)
    assert [h["stage"] for h in result.history] == ["pretrain", "step", "step", "step", "final"]
    assert 0.0 <= result.history[-1]["average"] <= 1.0


def test_domain_label_variants_need_one_discriminator_output_per_domain():
    task = small_task()
    result = run_variant(task, quick_config(Variant.CDAN_DOMAIN))
    assert result.bundle.discriminator.outputs == 4
    assert all(entry["pseudo_labels"] == 0 for entry in result.state_log)
    assert all(np.isfinite(entry["losses"]["adv"]) for entry in result.state_log)

    torch.manual_seed(0)
    bundle = ModelBundle(ArchitectureConfig(n_c=3, input_dim=6))
    ctx = context_for(bundle, quick_config(Variant.CDAN_DOMAIN), domain_ids=(0, 1, 2, 3))
    with pytest.raises(ConfigurationError, match="one discriminator output per domain"):
        adaptation_stage(ctx, CurriculumState.initial(task, combined_pool=True), 2)


def test_source_only_model_prefers_the_smaller_shift():
    accuracies = []
    for seed in range(5):
        task = generate_synthetic_task(SyntheticSpec(shift_magnitudes=(0.2, 1.0), seed=seed))
        result = run_variant(task, VariantConfig(variant=Variant.SOURCE_ONLY, pretrain_max_iterations=500, seed=seed))
        metrics = evaluate(result.bundle, task)
        accuracies.append([metrics.per_domain_accuracy["target_0"], metrics.per_domain_accuracy["target_1"]])
    near, far = np.mean(accuracies, axis=0)
    assert near > far


# Default generator settings: four classes, shifts of 0.2, 0.6 and 0.9 radians
CALIBRATED = SyntheticSpec(n_c=4, d=16, shift_magnitudes=(0.2, 0.6, 0.9))
SEEDS = range(5)


@functools.lru_cache(maxsize=None)
def _trained(variant, seed, shifts=CALIBRATED.shift_magnitudes):
    task = generate_synthetic_task(replace(CALIBRATED, shift_magnitudes=shifts, seed=seed))
    return task, run_variant(task, VariantConfig(variant=variant, seed=seed))


def result_head(variant):
    return VariantConfig(variant=variant).profile.classifier


def _average_accuracy(variant):
    values = []
    for seed in SEEDS:
        task, result = _trained(variant, seed)
        values.append(evaluate(result.bundle, task, head=result_head(variant)).average)
    return float(np.mean(values))


@requires_slow_runs
def test_first_selected_domain_is_the_least_shifted():
    hits = 0
    for seed in SEEDS:
        task = generate_synthetic_task(replace(CALIBRATED, shift_magnitudes=(0.2, 0.6, 1.2), seed=seed))
        torch.manual_seed(seed)
        bundle = ModelBundle(ArchitectureConfig(n_c=task.n_c, input_dim=16))
        ctx = context_for(bundle, VariantConfig(seed=seed))
        supervised_phase(ctx, task.source.samples, 2000, PRETRAIN)
        entropies = {d: domain_entropy(bundle, task.target(d)) for d in task.target_ids}
        hits += select_next_domain(entropies) == 1
    assert hits >= 4


@requires_slow_runs
def test_adaptation_beats_source_only():
    source_only = _average_accuracy(Variant.SOURCE_ONLY)
    assert 0.55 <= source_only <= 0.75
    d_cgct = _average_accuracy(Variant.D_CGCT)
    cgct = _average_accuracy(Variant.CGCT)
    baseline = _average_accuracy(Variant.CDAN_BASELINE)
    print(f"source-only {source_only:.4f}, CDAN {baseline:.4f}, CGCT {cgct:.4f}, D-CGCT {d_cgct:.4f}")
    assert d_cgct >= source_only + 0.10
    assert d_cgct >= baseline - 0.01
    assert cgct >= source_only + 0.05


@requires_slow_runs
def test_easy_to_hard_order_beats_reverse():
    forward = _average_accuracy(Variant.CDAN_DCL)
    reverse = _average_accuracy(Variant.REV_DCL)
    print(f"easiest-first {forward:.4f} vs hardest-first {reverse:.4f} (gap {forward - reverse:+.4f})")
    assert forward >= reverse


def _target_frame(bundle, task):
    frame = embeddings_frame(bundle, task)
    return frame[frame["domain_id"] != task.source.domain_id]


@requires_slow_runs
def test_adapted_target_features_form_tighter_classes():
    ratios = {Variant.SOURCE_ONLY: [], Variant.D_CGCT: []}
    for variant, values in ratios.items():
        for seed in SEEDS:
            task, result = _trained(variant, seed)
            values.append(scatter_ratio(_target_frame(result.bundle, task)))
    assert np.mean(ratios[Variant.D_CGCT]) > np.mean(ratios[Variant.SOURCE_ONLY])


def _domain_classifier_accuracy(bundle, task):
    """Accuracy of a fresh linear source-vs-target classifier on frozen features."""
    frame = embeddings_frame(bundle, task)
    x = torch.tensor(frame[[c for c in frame.columns if c.startswith("f_")]].to_numpy(), dtype=torch.float32)
    x = (x - x.mean(dim=0)) / (x.std(dim=0) + 1e-6)
    y = torch.tensor((frame["domain_id"] != task.source.domain_id).to_numpy(), dtype=torch.float32)
    torch.manual_seed(0)
    domain_head = torch.nn.Linear(x.shape[1], 1)
    optimizer = torch.optim.Adam(domain_head.parameters(), lr=0.05)
    weight = torch.where(y > 0, 1.0 / y.sum(), 1.0 / (1 - y).sum())
    for _ in range(300):
        optimizer.zero_grad()
        F.binary_cross_entropy_with_logits(domain_head(x).squeeze(1), y, weight=weight).backward()
        optimizer.step()
    with torch.no_grad():
        predicted = (domain_head(x).squeeze(1) > 0).float()
    # balanced accuracy, 0.5 means the domains are indistinguishable
    return float(((predicted == y).float() * weight).sum() / 2)


@requires_slow_runs
def test_adaptation_makes_domains_harder_to_tell_apart():
    before, after = [], []
    for seed in SEEDS:
        task, source_only = _trained(Variant.SOURCE_ONLY, seed)
        before.append(_domain_classifier_accuracy(source_only.bundle, task))
        _, adapted = _trained(Variant.D_CGCT, seed)
        after.append(_domain_classifier_accuracy(adapted.bundle, task))
    assert np.mean(after) < np.mean(before)
