import json
import logging
import os
import time
from dataclasses import dataclass, field, replace
from typing import Any, Callable, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn.functional as F

from .data import SOURCE_DOMAIN_ID, EpochSampler, MTDATask, PairedBatchSampler, Sample, stack_features
from .errors import ConfigurationError, ContractViolation, DatasetError, TrainingDivergedError
from .evaluation import evaluate
from .graph_head import RAW_PLUS_IDENTITY, build_target_affinity, co_teaching_node_labels
from .models import (
    ArchitectureConfig,
    GRLCoefficient,
    ModelBundle,
    architecture_for_inputs,
    classifier_forward,
    discriminator_forward,
    gcn_classifier_forward,
    gcn_head_forward,
    gcn_predict,
    inference_mode,
    predict,
)
from .objectives import EPS, BatchOutputs, LossWeights, ce_loss, edge_bce_loss, total_objective
from .variants import Curriculum, Direction, Head, OptimConfig, VariantConfig

logger = logging.getLogger(__name__)

PRETRAIN = "pretrain"
FINETUNE = "finetune"
CGCT_UPDATE = "cgct"
DCL_UPDATE = "dcl"


@dataclass(frozen=True)
class PseudoLabelRecord:
    """A target sample accepted into the pseudo-source set with the label it was given."""

    uid: str
    assigned_label: int
    confidence: float
    step: int
    domain_id: int

    def __post_init__(self):
        if self.assigned_label < 0:
            raise ContractViolation(f"Pseudo-label of {self.uid} must be a class id")


@dataclass(frozen=True)
class CurriculumState:
    """
    Sets of one curriculum run at step q.

    Args:
        q (int): Number of completed curriculum steps.
        source (tuple): The original labeled source samples.
        pseudo_source (tuple): Ŝ^q, source plus accepted pseudo-labeled targets.
        remaining_targets (tuple): Target domain ids not consumed yet (domain curricula).
        active_target_pool (tuple): Target samples the current step adapts to.
        selection_history (tuple): Domain ids in the order they were selected.
        target_samples (dict): uid → unlabeled target sample, used to attach pseudo-labels.
        iteration (int): Iterations run in the current stage.
        records (tuple): Pseudo-labels harvested at the last step.
    """

    q: int
    source: Tuple[Sample, ...]
    pseudo_source: Tuple[Sample, ...]
    remaining_targets: Tuple[int, ...]
    active_target_pool: Tuple[Sample, ...]
    selection_history: Tuple[int, ...] = ()
    target_samples: Mapping[str, Sample] = field(default_factory=dict)
    iteration: int = 0
    records: Tuple[PseudoLabelRecord, ...] = ()

    @classmethod
    def initial(cls, task: MTDATask, combined_pool: bool) -> "CurriculumState":
        targets = {s.uid: s for t in task.targets for s in t}
        pool = tuple(s for t in task.targets for s in t) if combined_pool else ()
        return cls(
            q=0,
            source=task.source.samples,
            pseudo_source=task.source.samples,
            remaining_targets=task.target_ids,
            active_target_pool=pool,
            target_samples=targets,
        )


@dataclass
class Optimizers:
    """
    One SGD optimizer per parameter group with exponential learning rate decay.

    Each group's learning rate decays with the number of updates that group has
    taken, so a group idle during pre-training starts adaptation at the base rate.
    """

    discriminator: torch.optim.Optimizer
    classifier: torch.optim.Optimizer
    graph: torch.optim.Optimizer
    schedulers: Dict[str, torch.optim.lr_scheduler.ExponentialLR]

    GROUPS = ("discriminator", "classifier", "graph")

    def all(self) -> Tuple[torch.optim.Optimizer, ...]:
        return (self.discriminator, self.classifier, self.graph)

    def zero_grad(self) -> None:
        for optimizer in self.all():
            optimizer.zero_grad(set_to_none=True)

    def step(self, *groups: str) -> None:
        """Steps the named optimizers, then their learning rate schedules."""
        for name in groups:
            if name not in self.GROUPS:
                raise ConfigurationError(f"Unknown optimizer group {name!r}")
            getattr(self, name).step()
            self.schedulers[name].step()


def build_optimizers(bundle: ModelBundle, optim: OptimConfig) -> Optimizers:
    def sgd(params):
        return torch.optim.SGD(
            params, lr=optim.lr, momentum=optim.momentum, weight_decay=optim.weight_decay
        )

    discriminator = sgd(bundle.parameters_of("discriminator"))
    classifier = sgd(bundle.parameters_of("feature_extractor", "mlp_head"))
    graph = sgd(bundle.parameters_of("edge_net", "node_net"))
    schedulers = {
        name: torch.optim.lr_scheduler.ExponentialLR(o, gamma=optim.lr_decay)
        for name, o in zip(Optimizers.GROUPS, (discriminator, classifier, graph))
    }
    return Optimizers(discriminator, classifier, graph, schedulers)


@dataclass
class TrainingContext:
    """Everything the training stages share during one run."""

    bundle: ModelBundle
    config: VariantConfig
    weights: LossWeights
    optimizers: Optimizers
    rng: np.random.Generator
    degree_of: str = RAW_PLUS_IDENTITY
    loss_log: List[Dict[str, Any]] = field(default_factory=list)
    global_iteration: int = 0
    dump_dir: Optional[str] = None
    source_domain_id: int = SOURCE_DOMAIN_ID
    domain_ids: Tuple[int, ...] = ()
    step: int = 0

    @classmethod
    def create(
        cls,
        bundle: ModelBundle,
        config: VariantConfig,
        weights: Optional[LossWeights] = None,
        rng: Optional[np.random.Generator] = None,
        **kwargs,
    ) -> "TrainingContext":
        return cls(
            bundle=bundle,
            config=config,
            weights=weights or LossWeights(),
            optimizers=build_optimizers(bundle, config.optim),
            rng=rng if rng is not None else np.random.default_rng(config.seed),
            **kwargs,
        )


def _as_tensor(samples: Sequence[Sample], bundle: ModelBundle) -> torch.Tensor:
    dtype = next(bundle.parameters()).dtype
    return torch.as_tensor(stack_features(samples), dtype=dtype)


def _labels(samples: Sequence[Sample]) -> torch.Tensor:
    return torch.tensor([s.label for s in samples], dtype=torch.long)


def _write_divergence_dump(
    ctx: TrainingContext, stage: str, iteration: int, uids: Sequence[str], losses: Dict[str, float]
) -> str:
    directory = ctx.dump_dir or os.getcwd()
    os.makedirs(directory, exist_ok=True)
    path = os.path.join(directory, f"diverged_{stage}_step{ctx.step}_iter{iteration}.json")
    with open(path, "w", encoding="utf-8") as f:
        json.dump(
            {
                "stage": stage,
                "step": ctx.step,
                "iteration": iteration,
                "global_iteration": ctx.global_iteration,
                "batch_uids": list(uids),
                "losses": {k: repr(v) for k, v in losses.items()},
            },
            f,
            indent=2,
            sort_keys=True,
        )
    return path


def _abort_if_diverged(
    ctx: TrainingContext, stage: str, iteration: int, uids: Sequence[str], losses: Dict[str, float]
) -> None:
    if all(np.isfinite(v) for v in losses.values()):
        return
    path = _write_divergence_dump(ctx, stage, iteration, uids, losses)
    logger.error("Non-finite loss in %s at iteration %d, batch written to %s", stage, iteration, path)
    raise TrainingDivergedError(
        f"Loss diverged in {stage} (step {ctx.step}, iteration {iteration}): {losses}",
        dump_path=path,
    )


def _log_iteration(ctx: TrainingContext, stage: str, iteration: int, losses: Dict[str, float]) -> None:
    ctx.loss_log.append({"stage": stage, "step": ctx.step, "iteration": iteration, **losses})
    logger.debug(
        "%s step=%d iter=%d %s",
        stage, ctx.step, iteration, " ".join(f"{k}={v:.4f}" for k, v in losses.items()),
    )


def _heldout_loss(
    bundle: ModelBundle, samples: Sequence[Sample], graph_classifier: bool, degree_of: str
) -> float:
    labels = _labels(samples)
    if graph_classifier:
        # the whole held-out set forms one graph
        probs = gcn_predict(bundle, stack_features(samples), max(2, len(samples)), degree_of=degree_of)
        return float(F.nll_loss(torch.log(probs.clamp_min(EPS)), labels))
    with inference_mode(bundle):
        _, logits = classifier_forward(_as_tensor(samples, bundle), bundle)
        return float(ce_loss(logits, labels))


def _supervised_loss(
    ctx: TrainingContext, batch: Sequence[Sample], graph_classifier: bool
) -> Tuple[torch.Tensor, Dict[str, float]]:
    bundle = ctx.bundle
    x = _as_tensor(batch, bundle)
    labels = _labels(batch)
    if not graph_classifier:
        _, logits = classifier_forward(x, bundle)
        loss = ce_loss(logits, labels)
        return loss, {"mlp_ce": float(loss.detach())}

    affinity, logits = gcn_classifier_forward(x, bundle, ctx.degree_of)
    node = ce_loss(logits, labels)
    ground_truth = torch.full((len(batch),), float("inf"))
    edge = edge_bce_loss(affinity.raw, build_target_affinity(labels, ground_truth, ctx.weights.tau))
    loss = node + ctx.weights.lambda_edge * edge
    return loss, {"edge_bce": float(edge.detach()), "node_ce": float(node.detach())}


def supervised_phase(
    ctx: TrainingContext, labeled_pool: Sequence[Sample], iterations: int, mode: str = FINETUNE
) -> ModelBundle:
    """
    Trains F and the variant's classifying head with cross-entropy on a labeled pool.

    Fine-tuning runs exactly `iterations` iterations. Pre-training holds out part
    of the pool and stops early once the held-out loss has not improved by the
    configured relative margin for `pretrain_patience` iterations; `iterations`
    is then the cap. With the MLP head only the classifier optimizer steps, so
    the edge network, node network and discriminator are left untouched. With
    the GCN head the graph is supervised with ground-truth affinities and the
    graph optimizer steps too.

    Args:
        ctx (TrainingContext): Shared training state.
        labeled_pool (list): Labeled samples (ground truth or pseudo-labels).
        iterations (int): Exact count (finetune) or cap (pretrain).
        mode (str): "pretrain" or "finetune".

    Returns:
        ModelBundle: The trained bundle, updated in place.
    """
    if mode not in (PRETRAIN, FINETUNE):
        raise ConfigurationError(f"Unknown supervised mode {mode!r}")
    if not labeled_pool:
        raise ConfigurationError(f"Cannot {mode} on an empty labeled pool")
    if not all(s.is_labeled for s in labeled_pool):
        raise ConfigurationError(f"Every sample of the {mode} pool must carry a label")
    bundle = ctx.bundle
    if iterations == 0:
        return bundle

    config = ctx.config
    graph_classifier = config.profile.classifier is Head.GCN
    groups = ("classifier", "graph") if graph_classifier else ("classifier",)
    pool = list(labeled_pool)
    heldout: List[Sample] = []
    if mode == PRETRAIN and config.pretrain_holdout > 0 and len(pool) > 1:
        order = ctx.rng.permutation(len(pool))
        n_heldout = min(len(pool) - 1, max(1, int(round(len(pool) * config.pretrain_holdout))))
        heldout = [pool[i] for i in order[:n_heldout]]
        pool = [pool[i] for i in order[n_heldout:]]

    sampler = EpochSampler(pool, ctx.rng, f"{mode} pool")
    best = float("inf")
    stale = 0
    completed = 0
    bundle.train()
    for iteration in range(iterations):
        batch = sampler.draw(config.batch_size)
        loss, losses = _supervised_loss(ctx, batch, graph_classifier)
        _abort_if_diverged(ctx, mode, iteration, [s.uid for s in batch], losses)

        ctx.optimizers.zero_grad()
        loss.backward()
        ctx.optimizers.step(*groups)
        ctx.global_iteration += 1
        completed = iteration + 1
        _log_iteration(ctx, mode, iteration, losses)

        if heldout and completed % config.pretrain_eval_every == 0:
            current = _heldout_loss(bundle, heldout, graph_classifier, ctx.degree_of)
            if current < best * (1.0 - config.pretrain_min_improvement):
                best = current
                stale = 0
            else:
                stale += config.pretrain_eval_every
            if stale >= config.pretrain_patience:
                logger.info("Pre-training converged after %d iterations (held-out loss %.4f)", completed, best)
                break

    logger.info("%s finished after %d iterations on %d samples", mode, completed, len(labeled_pool))
    return bundle


def edge_teacher_probs(
    bundle: ModelBundle,
    x: torch.Tensor,
    mlp_probs: torch.Tensor,
    half: int,
    head: Head,
    degree_of: str = RAW_PLUS_IDENTITY,
) -> torch.Tensor:
    """
    Probabilities that label the target half of a batch for the edge loss.

    The MLP head reuses the batch's own probabilities; the GCN head runs a
    separate eval-mode forward of the batch. Neither carries a gradient and
    normalization statistics are not updated.

    Args:
        bundle (ModelBundle): The networks.
        x (torch.Tensor): The [source half; target half] inputs.
        mlp_probs (torch.Tensor): MLP-head probabilities of the batch.
        half (int): Size of the source half.
        head (Head): Teaching head.
        degree_of (str): Degree source of the affinity normalization.

    Returns:
        torch.Tensor: (n - half, n_c) probabilities of the target rows.
    """
    if Head(head) is Head.MLP:
        return mlp_probs[half:].detach()
    with inference_mode(bundle):
        _, logits = gcn_classifier_forward(x, bundle, degree_of)
    return F.softmax(logits[half:], dim=1)


def adaptation_stage(ctx: TrainingContext, state: CurriculumState, iterations: int) -> ModelBundle:
    """
    Adversarial adaptation of the pseudo-source set to the active target pool.

    Each iteration pairs B pseudo-source samples with B target samples, runs both
    heads and the discriminator, and updates the parameter groups the variant
    trains from one backward pass. The reversal coefficient ramps with progress
    k / iterations.
    """
    if iterations == 0:
        return ctx.bundle
    if not state.pseudo_source or not state.active_target_pool:
        raise ConfigurationError("Adaptation needs a pseudo-source set and an active target pool")

    bundle, config, weights = ctx.bundle, ctx.config, ctx.weights
    profile = config.profile
    graph_classifier = profile.classifier is Head.GCN
    if graph_classifier:
        # the node head is the only classifier, its cross-entropy takes the MLP head's weight
        weights = replace(weights, lambda_node=1.0)
    domain_index = {d: i for i, d in enumerate(ctx.domain_ids)}
    if profile.adapts and profile.domain_labels and bundle.discriminator.outputs != len(domain_index):
        raise ConfigurationError(
            f"{config.variant.value} needs one discriminator output per domain: "
            f"{bundle.discriminator.outputs} outputs for {len(domain_index)} domains"
        )
    groups = ["classifier"]
    if profile.adapts:
        groups.insert(0, "discriminator")
    if profile.uses_graph_head:
        groups.append("graph")

    sampler = PairedBatchSampler(
        state.pseudo_source,
        state.active_target_pool,
        config.batch_size,
        ctx.rng,
        stratify_targets=config.stratify_targets,
    )
    bundle.train()
    for k in range(iterations):
        batch = sampler.sample_minibatch()
        samples = batch.samples
        b = batch.size
        x = _as_tensor(samples, bundle)
        source_labels = _labels(batch.source_half)

        features, mlp_logits = classifier_forward(x, bundle)
        if not bool(torch.isfinite(features).all()):
            _abort_if_diverged(ctx, "adapt", k, [s.uid for s in samples], {"features": float("nan")})
        mlp_probs = F.softmax(mlp_logits, dim=1)
        outputs = BatchOutputs(
            mlp_logits=None if graph_classifier else mlp_logits, source_labels=source_labels
        )
        if profile.uses_graph_head:
            outputs.affinity, outputs.gcn_logits = gcn_head_forward(features, bundle, ctx.degree_of)

        if profile.adapts:
            class_probs = F.softmax(outputs.gcn_logits, dim=1) if graph_classifier else mlp_probs
            grl = GRLCoefficient(1.0, progress=k / iterations, schedule=config.grl_schedule)
            outputs.domain_logits = discriminator_forward(features, class_probs, grl, bundle)
            if profile.domain_labels:
                outputs.domain_ids = torch.tensor([domain_index[s.domain_id] for s in samples])
            else:
                outputs.is_target = torch.tensor([s.domain_id != ctx.source_domain_id for s in samples])

        if profile.uses_graph_head:
            teacher_probs = edge_teacher_probs(bundle, x, mlp_probs, b, profile.routing.edge, ctx.degree_of)
            node_labels, confidences = co_teaching_node_labels(source_labels, teacher_probs)
            outputs.target_affinity = build_target_affinity(node_labels, confidences, weights.tau)

        objective = total_objective(outputs, weights)
        losses = objective.as_floats()
        _abort_if_diverged(ctx, "adapt", k, [s.uid for s in samples], losses)

        ctx.optimizers.zero_grad()
        objective.backward_loss.backward()
        ctx.optimizers.step(*groups)
        ctx.global_iteration += 1
        _log_iteration(ctx, "adapt", k, losses)

    return bundle


def select_confident(
    probs: torch.Tensor,
    uids: Sequence[str],
    domain_ids: Sequence[int],
    tau: float,
    step: int,
) -> List[PseudoLabelRecord]:
    """Keeps every row whose max probability strictly exceeds tau, labeled with its argmax."""
    confidence, predicted = probs.max(dim=1)
    records = []
    for i in torch.nonzero(confidence > tau).reshape(-1).tolist():
        records.append(
            PseudoLabelRecord(
                uid=uids[i],
                assigned_label=int(predicted[i]),
                confidence=float(confidence[i]),
                step=step,
                domain_id=int(domain_ids[i]),
            )
        )
    return records


def pseudo_label_stage(
    bundle: ModelBundle,
    target_pool: Sequence[Sample],
    tau: float,
    label_source: Head = Head.GCN,
    *,
    step: int = 0,
    batch_size: int = 16,
    context_pool: Sequence[Sample] = (),
    rng: Optional[np.random.Generator] = None,
    pl_context: str = "source",
    degree_of: str = RAW_PLUS_IDENTITY,
) -> List[PseudoLabelRecord]:
    """
    Harvests confident pseudo-labels for a target pool in eval mode.

    The GCN head needs batch context: the pool is walked in chunks of
    `batch_size` targets, each joined by `batch_size` random labeled samples
    from `context_pool` when pl_context is "source". Parameters and
    normalization statistics are not modified.

    Args:
        bundle (ModelBundle): Current networks.
        target_pool (list): Target samples to label.
        tau (float): Confidence threshold, a sample is kept when max p > tau.
        label_source (Head): Head producing the probabilities.
        step (int): Curriculum step stored in every record.
        batch_size (int): Targets per GCN batch.
        context_pool (list): Labeled anchors for GCN batches.
        rng (np.random.Generator, optional): Stream used to draw anchors.
        pl_context (str): "source" or "none".
        degree_of (str): Degree source of the affinity normalization.

    Returns:
        list: PseudoLabelRecord per accepted sample, in pool order.
    """
    if not target_pool:
        return []
    label_source = Head(label_source)
    if label_source is Head.MLP:
        _, probs = predict(bundle, stack_features(target_pool))
    else:
        context = stack_features(context_pool) if pl_context == "source" and context_pool else None
        probs = gcn_predict(
            bundle, stack_features(target_pool), batch_size, context,
            rng if rng is not None else np.random.default_rng(step), degree_of,
        )
    records = select_confident(
        probs, [s.uid for s in target_pool], [s.domain_id for s in target_pool], tau, step
    )
    logger.info(
        "Step %d: %d of %d target samples pseudo-labeled by %s (tau=%.2f)",
        step, len(records), len(target_pool), label_source.value, tau,
    )
    return records


def update_source_set(
    state: CurriculumState,
    records: Sequence[PseudoLabelRecord],
    mode: str = CGCT_UPDATE,
    consumed_domain: Optional[int] = None,
) -> CurriculumState:
    """
    Builds the next pseudo-source set.

    "cgct" rebuilds it from the original source plus this step's records, so
    earlier pseudo-labels are replaced. "dcl" adds the records to the current
    set and removes `consumed_domain` from the remaining targets. Ground-truth
    source labels are never overwritten.

    Returns:
        CurriculumState: The state of step q + 1.
    """
    if mode not in (CGCT_UPDATE, DCL_UPDATE):
        raise ConfigurationError(f"Unknown update mode {mode!r}")
    source_uids = {s.uid for s in state.source}
    base = state.source if mode == CGCT_UPDATE else state.pseudo_source
    taken = {s.uid for s in base}
    added: List[Sample] = []
    for record in records:
        if record.uid in source_uids or record.uid in taken:
            continue
        sample = state.target_samples.get(record.uid)
        if sample is None:
            raise ContractViolation(f"Pseudo-label for unknown target sample {record.uid}")
        added.append(sample.with_label(record.assigned_label))
        taken.add(record.uid)

    remaining = state.remaining_targets
    if mode == DCL_UPDATE:
        if consumed_domain not in remaining:
            raise ContractViolation(f"Domain {consumed_domain} is not among the remaining targets")
        remaining = tuple(d for d in remaining if d != consumed_domain)

    return replace(
        state,
        q=state.q + 1,
        pseudo_source=tuple(base) + tuple(added),
        remaining_targets=remaining,
        iteration=0,
        records=tuple(records),
    )


def domain_entropy(bundle: ModelBundle, target_domain: Sequence[Sample]) -> float:
    """Mean prediction entropy of the MLP head over a domain, in nats."""
    samples = list(target_domain)
    if not samples:
        raise DatasetError("Cannot score the entropy of an empty domain")
    _, probs = predict(bundle, stack_features(samples))
    return float(torch.special.entr(probs.double()).sum(dim=1).mean())


def select_next_domain(entropies: Mapping[int, float], direction: Direction = Direction.EASIEST_FIRST) -> int:
    """Lowest (easiest first) or highest (hardest first) entropy; ties go to the lowest id."""
    if not entropies:
        raise ContractViolation("No domain left to select")
    direction = Direction(direction)
    best_id: Optional[int] = None
    for domain_id in sorted(entropies):
        value = entropies[domain_id]
        if best_id is None:
            best_id = domain_id
        elif direction is Direction.EASIEST_FIRST and value < entropies[best_id]:
            best_id = domain_id
        elif direction is Direction.HARDEST_FIRST and value > entropies[best_id]:
            best_id = domain_id
    return best_id


@dataclass
class RunResult:
    bundle: ModelBundle
    history: List[Dict[str, Any]]
    state_log: List[Dict[str, Any]]
    state: CurriculumState


StepCallback = Callable[[int, ModelBundle, Dict[str, Any]], None]


def _can_evaluate(task: MTDATask) -> bool:
    return all(d in task.held_out_eval for d in task.target_ids)


def _evaluation_record(
    bundle: ModelBundle, task: MTDATask, step: int, stage: str, head: Head, degree_of: str
) -> Dict[str, Any]:
    record: Dict[str, Any] = {"step": step, "stage": stage}
    if _can_evaluate(task):
        metrics = evaluate(bundle, task, head=head, degree_of=degree_of)
        record.update(
            accuracy=metrics.per_domain_accuracy,
            average=metrics.average,
            source_accuracy=metrics.source_accuracy,
        )
    return record


def _mean_losses(entries: Sequence[Dict[str, Any]]) -> Dict[str, float]:
    keys = [k for k in ("mlp_ce", "edge_bce", "node_ce", "adv", "total") if entries and k in entries[0]]
    return {k: float(np.mean([e[k] for e in entries])) for k in keys}


def run_variant(
    task: MTDATask,
    config: VariantConfig,
    weights: Optional[LossWeights] = None,
    *,
    architecture: Optional[ArchitectureConfig] = None,
    degree_of: str = RAW_PLUS_IDENTITY,
    step_callback: Optional[StepCallback] = None,
    dump_dir: Optional[str] = None,
) -> RunResult:
    """
    Runs one variant end to end: pre-training, Q curriculum steps and fine-tuning.

    Each step selects a target domain (domain curricula only), adapts, harvests
    pseudo-labels with the variant's labeling head and updates the pseudo-source
    set. Fine-tuning on the final pseudo-source set only happens for variants
    that harvest pseudo-labels.

    Args:
        task (MTDATask): Source, targets and evaluation splits.
        config (VariantConfig): Variant, schedule and seed.
        weights (LossWeights, optional): Loss weights and tau.
        architecture (ArchitectureConfig, optional): Derived from the inputs when omitted.
        degree_of (str): Degree source of the affinity normalization.
        step_callback (callable, optional): Called with (step, bundle, state record)
            after each curriculum step.
        dump_dir (str, optional): Where divergence dumps are written.

    Returns:
        RunResult: Final bundle, evaluation history, state log and final state.
    """
    weights = weights or LossWeights()
    profile = config.profile
    n_steps = config.resolve_steps(len(task.targets))
    domain_curriculum = profile.curriculum is Curriculum.DOMAIN
    if domain_curriculum and len(task.targets) < 2:
        logger.warning("%s with a single target domain has no ordering to learn", config.variant.value)

    torch.manual_seed(config.seed)
    rng = np.random.default_rng(config.seed)
    if architecture is None:
        architecture = architecture_for_inputs(task.source.samples[0].features.shape, task.n_c)
    if architecture.n_c != task.n_c:
        raise ConfigurationError(f"Architecture has {architecture.n_c} classes, task has {task.n_c}")
    if profile.domain_labels:
        architecture = replace(architecture, disc_outputs=len(task.targets) + 1)
    bundle = ModelBundle(architecture)
    ctx = TrainingContext.create(
        bundle, config, weights, rng,
        degree_of=degree_of, dump_dir=dump_dir, source_domain_id=task.source.domain_id,
        domain_ids=(task.source.domain_id, *task.target_ids),
    )
    state = CurriculumState.initial(task, combined_pool=not domain_curriculum)
    history: List[Dict[str, Any]] = []
    state_log: List[Dict[str, Any]] = []

    started = time.monotonic()
    supervised_phase(ctx, task.source.samples, config.pretrain_max_iterations, PRETRAIN)
    history.append(_evaluation_record(bundle, task, 0, PRETRAIN, profile.classifier, degree_of))

    source_entropies: Dict[int, float] = {}
    if domain_curriculum and config.entropy_model == "source":
        source_entropies = {d: domain_entropy(bundle, task.target(d)) for d in task.target_ids}

    harvest_head = profile.routing.harvest_head
    for q in range(1, n_steps + 1):
        ctx.step = q
        selected: Optional[int] = None
        entropies: Dict[int, float] = {}
        if domain_curriculum:
            if source_entropies:
                entropies = {d: source_entropies[d] for d in state.remaining_targets}
            else:
                entropies = {d: domain_entropy(bundle, task.target(d)) for d in state.remaining_targets}
            selected = select_next_domain(entropies, config.curriculum_direction)
            state = replace(
                state,
                active_target_pool=task.target(selected).samples,
                selection_history=state.selection_history + (selected,),
            )
            logger.info(
                "Step %d: selected %s (entropy %.4f)", q, task.domain_name(selected), entropies[selected]
            )

        log_start = len(ctx.loss_log)
        if profile.adapts:
            adaptation_stage(ctx, state, config.K)
            state = replace(state, iteration=config.K)

        records: List[PseudoLabelRecord] = []
        if harvest_head is not None:
            records = pseudo_label_stage(
                bundle,
                state.active_target_pool,
                weights.tau,
                harvest_head,
                step=q,
                batch_size=config.batch_size,
                context_pool=state.source,
                rng=rng,
                pl_context=config.pl_context,
                degree_of=degree_of,
            )
        state = update_source_set(
            state, records, DCL_UPDATE if domain_curriculum else CGCT_UPDATE, consumed_domain=selected
        )

        evaluation = _evaluation_record(bundle, task, q, "step", profile.classifier, degree_of)
        history.append(evaluation)
        record: Dict[str, Any] = {
            "step": q,
            "selected_domain": task.domain_name(selected) if selected is not None else None,
            "entropies": {task.domain_name(d): v for d, v in sorted(entropies.items())},
            "pseudo_labels": len(records),
            "mean_confidence": float(np.mean([r.confidence for r in records])) if records else None,
            "pseudo_source_size": len(state.pseudo_source),
            "losses": _mean_losses(ctx.loss_log[log_start:]),
            "average": evaluation.get("average"),
        }
        state_log.append(record)
        if step_callback is not None:
            step_callback(q, bundle, record)

    if harvest_head is not None and n_steps > 0:
        ctx.step = n_steps + 1
        supervised_phase(ctx, state.pseudo_source, config.K_finetune, FINETUNE)
    final = _evaluation_record(bundle, task, n_steps, "final", profile.classifier, degree_of)
    history.append(final)
    logger.info(
        "%s seed %d done in %.1fs, average target accuracy %s",
        config.variant.value, config.seed, time.monotonic() - started, final.get("average"),
    )
    return RunResult(bundle=bundle, history=history, state_log=state_log, state=state)
