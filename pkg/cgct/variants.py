"""Training variants and how each one routes pseudo-labels between the two heads."""
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, Optional

from .errors import ConfigurationError


class Variant(str, Enum):
    SOURCE_ONLY = "source-only"
    CDAN_BASELINE = "CDAN-baseline"
    CDAN_PL = "CDAN+PL"
    CDAN_DCL = "CDAN+DCL"
    REV_DCL = "Rev-DCL"
    CGCT = "CGCT"
    D_CGCT = "D-CGCT"
    M1 = "M1"
    M2 = "M2"
    M3 = "M3"
    CDAN_DOMAIN = "CDAN-domain"
    GCN_HEAD = "CDAN-domain+GCN"
    GCN_HEAD_PL = "CDAN-domain+GCN+PL"


class Head(str, Enum):
    MLP = "mlp_head"
    GCN = "gcn_head"


class Curriculum(str, Enum):
    NONE = "none"
    COMBINED = "combined"
    DOMAIN = "domain"


class Direction(str, Enum):
    EASIEST_FIRST = "easiest_first"
    HARDEST_FIRST = "hardest_first"


PL_CONTEXTS = ("source", "none")
ENTROPY_MODELS = ("current", "source")


@dataclass(frozen=True)
class PseudoLabelRouting:
    """
    Which head labels target samples for each consumer.

    Both heads train on the one pseudo-source set, so the head harvesting it
    also decides the labels f_node sees.

    Args:
        mlp_ce (Head, optional): Head harvesting the pseudo-source labels after
            each curriculum step; None disables harvesting.
        edge (Head): Head labeling the target half of each batch for f_edge.
    """

    mlp_ce: Optional[Head]
    edge: Head = Head.MLP

    @property
    def harvest_head(self) -> Optional[Head]:
        return self.mlp_ce


@dataclass(frozen=True)
class VariantProfile:
    """
    How a variant trains.

    Args:
        uses_graph_head (bool): Train the edge and node networks.
        adapts (bool): Run adversarial adaptation steps.
        curriculum (Curriculum): Combined pool, one domain per step, or none.
        direction (Direction): Default domain order of a domain curriculum.
        routing (PseudoLabelRouting): Pseudo-label sources.
        domain_labels (bool): The discriminator tells every domain apart
            ((N + 1)-way) instead of source against the merged targets.
        classifier (Head): Head that is trained with cross-entropy, conditions
            the discriminator and is scored at evaluation. With the GCN head the
            MLP head is never trained.
    """

    uses_graph_head: bool
    adapts: bool
    curriculum: Curriculum
    direction: Direction
    routing: PseudoLabelRouting
    domain_labels: bool = False
    classifier: Head = Head.MLP


_NO_LABELS = PseudoLabelRouting(mlp_ce=None)
_SINGLE_HEAD = PseudoLabelRouting(mlp_ce=Head.MLP)
_CO_TEACHING = PseudoLabelRouting(mlp_ce=Head.GCN, edge=Head.MLP)
_GCN_ONLY = PseudoLabelRouting(mlp_ce=None, edge=Head.GCN)

PROFILES: Dict[Variant, VariantProfile] = {
    Variant.SOURCE_ONLY: VariantProfile(False, False, Curriculum.NONE, Direction.EASIEST_FIRST, _NO_LABELS),
    Variant.CDAN_BASELINE: VariantProfile(False, True, Curriculum.COMBINED, Direction.EASIEST_FIRST, _NO_LABELS),
    Variant.CDAN_PL: VariantProfile(False, True, Curriculum.COMBINED, Direction.EASIEST_FIRST, _SINGLE_HEAD),
    Variant.CDAN_DCL: VariantProfile(False, True, Curriculum.DOMAIN, Direction.EASIEST_FIRST, _SINGLE_HEAD),
    Variant.REV_DCL: VariantProfile(False, True, Curriculum.DOMAIN, Direction.HARDEST_FIRST, _SINGLE_HEAD),
    Variant.CGCT: VariantProfile(True, True, Curriculum.COMBINED, Direction.EASIEST_FIRST, _CO_TEACHING),
    Variant.D_CGCT: VariantProfile(True, True, Curriculum.DOMAIN, Direction.EASIEST_FIRST, _CO_TEACHING),
    Variant.M1: VariantProfile(
        True, True, Curriculum.DOMAIN, Direction.EASIEST_FIRST,
        PseudoLabelRouting(mlp_ce=Head.MLP, edge=Head.MLP),
    ),
    Variant.M2: VariantProfile(
        True, True, Curriculum.DOMAIN, Direction.EASIEST_FIRST,
        PseudoLabelRouting(mlp_ce=Head.GCN, edge=Head.GCN),
    ),
    Variant.M3: VariantProfile(
        True, True, Curriculum.DOMAIN, Direction.EASIEST_FIRST,
        PseudoLabelRouting(mlp_ce=Head.MLP, edge=Head.GCN),
    ),
    Variant.CDAN_DOMAIN: VariantProfile(
        False, True, Curriculum.COMBINED, Direction.EASIEST_FIRST, _NO_LABELS, domain_labels=True,
    ),
    Variant.GCN_HEAD: VariantProfile(
        True, True, Curriculum.COMBINED, Direction.EASIEST_FIRST, _GCN_ONLY,
        domain_labels=True, classifier=Head.GCN,
    ),
    Variant.GCN_HEAD_PL: VariantProfile(
        True, True, Curriculum.COMBINED, Direction.EASIEST_FIRST,
        PseudoLabelRouting(mlp_ce=Head.GCN, edge=Head.GCN),
        domain_labels=True, classifier=Head.GCN,
    ),
}


@dataclass(frozen=True)
class OptimConfig:
    """SGD settings shared by the three optimizers; lr_k = lr * lr_decay ** k after k steps of an optimizer."""

    lr: float = 1e-3
    momentum: float = 0.9
    weight_decay: float = 5e-4
    lr_decay: float = 0.999

    def __post_init__(self):
        if self.lr <= 0 or not 0 < self.lr_decay <= 1:
            raise ConfigurationError("lr must be > 0 and lr_decay in (0, 1]")
        if self.momentum < 0 or self.weight_decay < 0:
            raise ConfigurationError("momentum and weight_decay must be >= 0")


@dataclass(frozen=True)
class VariantConfig:
    """
    Everything that defines one training run apart from the task and loss weights.

    Args:
        variant (Variant): Which method to run.
        batch_size (int): B, the size of each mini-batch half.
        K (int): Adaptation iterations per curriculum step.
        K_finetune (int): Fine-tuning iterations on the final pseudo-source set.
        Q (int, optional): Curriculum steps of the combined-pool variants,
            defaults to the number of target domains. Domain curricula always
            take one step per target domain.
        direction (Direction, optional): Overrides the variant's domain order.
        stratify_targets (bool): Fill target halves round-robin over domains.
        pl_context (str): "source" mixes labeled source anchors into GCN
            pseudo-labeling batches, "none" uses pure target batches.
        entropy_model (str): "current" re-scores domains with the adapting model
            at every step, "source" scores them once after pre-training.
        grl_schedule (str): "ramp" or "constant" gradient reversal coefficient.
        pretrain_max_iterations (int): Cap of the pre-training phase.
        pretrain_patience (int): Iterations without improvement before stopping.
        pretrain_min_improvement (float): Relative held-out loss improvement that resets patience.
        pretrain_holdout (float): Share of the source held out to judge convergence.
        pretrain_eval_every (int): Iterations between held-out evaluations.
        optim (OptimConfig): Optimizer settings.
        seed (int): Seed of every random stream of the run.
    """

    variant: Variant = Variant.D_CGCT
    batch_size: int = 16
    K: int = 300
    K_finetune: int = 200
    Q: Optional[int] = None
    direction: Optional[Direction] = None
    stratify_targets: bool = False
    pl_context: str = "source"
    entropy_model: str = "current"
    grl_schedule: str = "ramp"
    pretrain_max_iterations: int = 2000
    pretrain_patience: int = 50
    pretrain_min_improvement: float = 0.01
    pretrain_holdout: float = 0.1
    pretrain_eval_every: int = 10
    optim: OptimConfig = field(default_factory=OptimConfig)
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "variant", Variant(self.variant))
        if self.direction is not None:
            object.__setattr__(self, "direction", Direction(self.direction))
        if self.batch_size < 2:
            raise ConfigurationError(f"batch_size must be >= 2, got {self.batch_size}")
        if min(self.K, self.K_finetune, self.pretrain_max_iterations) < 0:
            raise ConfigurationError("Iteration counts must be >= 0")
        if self.Q is not None and self.Q < 0:
            raise ConfigurationError(f"Q must be >= 0, got {self.Q}")
        if self.pl_context not in PL_CONTEXTS:
            raise ConfigurationError(f"pl_context must be one of {PL_CONTEXTS}")
        if self.entropy_model not in ENTROPY_MODELS:
            raise ConfigurationError(f"entropy_model must be one of {ENTROPY_MODELS}")
        if not 0 <= self.pretrain_holdout < 1:
            raise ConfigurationError("pretrain_holdout must be in [0, 1)")
        if self.pretrain_patience < 1 or self.pretrain_eval_every < 1:
            raise ConfigurationError("pretrain_patience and pretrain_eval_every must be >= 1")

    @property
    def profile(self) -> VariantProfile:
        return PROFILES[self.variant]

    @property
    def curriculum_direction(self) -> Direction:
        return self.direction or self.profile.direction

    def resolve_steps(self, n_targets: int) -> int:
        """Number of curriculum steps for a task with `n_targets` target domains."""
        profile = self.profile
        if profile.curriculum is Curriculum.NONE:
            return 0
        if profile.curriculum is Curriculum.DOMAIN:
            if self.Q is not None and self.Q != n_targets:
                raise ConfigurationError(
                    f"{self.variant.value} takes one step per target domain: "
                    f"Q={self.Q} but the task has {n_targets} targets"
                )
            return n_targets
        return n_targets if self.Q is None else self.Q
