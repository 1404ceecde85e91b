import logging
from dataclasses import dataclass
from typing import Dict, Optional, Tuple

import torch
import torch.nn.functional as F

from .errors import ConfigurationError, ContractViolation
from .graph_head import AffinityMatrix, TargetAffinity

logger = logging.getLogger(__name__)

# Probabilities are clamped to [EPS, 1 - EPS] before every log
EPS = 1e-7

# Which networks each loss group trains; F appears in two groups and receives
# the sum of both gradients in a single update.
GROUP_NETWORKS: Dict[str, Tuple[str, ...]] = {
    "discriminator": ("discriminator",),
    "classifier": ("feature_extractor", "mlp_head"),
    "graph": ("feature_extractor", "edge_net", "node_net"),
}


@dataclass(frozen=True)
class LossWeights:
    """Weights of the combined objective and the pseudo-label confidence threshold."""

    lambda_edge: float = 1.0
    lambda_node: float = 0.3
    lambda_adv: float = 1.0
    tau: float = 0.7

    def __post_init__(self):
        for name in ("lambda_edge", "lambda_node", "lambda_adv", "tau"):
            if getattr(self, name) < 0:
                raise ConfigurationError(f"{name} must be >= 0, got {getattr(self, name)}")


def ce_loss(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """
    Mean cross-entropy over the batch.

    Args:
        logits (torch.Tensor): (B, n_c) logits.
        labels (torch.Tensor): (B,) class ids in [0, n_c).

    Returns:
        torch.Tensor: Scalar loss.
    """
    labels = labels.long()
    n_c = logits.shape[1]
    if labels.numel() and (labels.min() < 0 or labels.max() >= n_c):
        raise ContractViolation(f"Labels must be in [0, {n_c}), got {labels.tolist()}")
    return F.cross_entropy(logits, labels)


def edge_bce_loss(raw_scores: torch.Tensor, target: TargetAffinity) -> torch.Tensor:
    """
    Binary cross-entropy between edge scores and the target affinity, averaged over unmasked pairs.

    Returns a zero that is still connected to `raw_scores` when no pair is
    unmasked, so the edge network receives an exactly zero gradient.
    """
    mask = target.mask
    if not bool(mask.any()):
        return raw_scores.sum() * 0.0
    p = raw_scores[mask].clamp(EPS, 1.0 - EPS)
    y = target.values[mask].to(p.dtype)
    return -(y * torch.log(p) + (1.0 - y) * torch.log(1.0 - p)).mean()


def adversarial_loss(domain_logits: torch.Tensor, is_target: torch.Tensor) -> torch.Tensor:
    """
    Domain classification loss: -mean_src log D - mean_tgt log (1 - D).

    Args:
        domain_logits (torch.Tensor): (n, 1) pre-sigmoid logits, D = probability of source.
        is_target (torch.Tensor): (n,) boolean domain flag per row.

    Returns:
        torch.Tensor: Scalar loss; when one domain is missing only the available half is used.
    """
    probs = torch.sigmoid(domain_logits.reshape(-1)).clamp(EPS, 1.0 - EPS)
    is_target = is_target.reshape(-1).bool()
    if probs.numel() == 0:
        raise ContractViolation("Adversarial loss needs at least one row")
    terms = []
    if bool((~is_target).any()):
        terms.append(-torch.log(probs[~is_target]).mean())
    if bool(is_target.any()):
        terms.append(-torch.log(1.0 - probs[is_target]).mean())
    if len(terms) < 2:
        logger.warning("Adversarial batch holds a single domain, using the available half only")
    return sum(terms[1:], terms[0])


def domain_adversarial_loss(domain_logits: torch.Tensor, domain_ids: torch.Tensor) -> torch.Tensor:
    """
    Domain classification loss of a discriminator with one logit per domain.

    Args:
        domain_logits (torch.Tensor): (n, n_domains) logits.
        domain_ids (torch.Tensor): (n,) domain index of each row in [0, n_domains).

    Returns:
        torch.Tensor: Mean cross-entropy over the rows.
    """
    if domain_logits.shape[0] == 0:
        raise ContractViolation("Adversarial loss needs at least one row")
    n_domains = domain_logits.shape[1]
    domain_ids = domain_ids.reshape(-1).long()
    if domain_ids.min() < 0 or domain_ids.max() >= n_domains:
        raise ContractViolation(f"Domain ids must be in [0, {n_domains}), got {domain_ids.tolist()}")
    return F.cross_entropy(domain_logits, domain_ids)


@dataclass
class BatchOutputs:
    """
    Everything the objective needs from one [source half; target half] forward pass.

    Args:
        mlp_logits (torch.Tensor, optional): (2B, n_c) MLP-head logits, None when
            the MLP head is not trained.
        source_labels (torch.Tensor): (B,) labels of the source half.
        domain_logits (torch.Tensor, optional): (2B, 1) or (2B, n_domains) discriminator logits.
        is_target (torch.Tensor, optional): (2B,) domain flags of a single-logit discriminator.
        gcn_logits (torch.Tensor, optional): (2B, n_c) GCN-head logits.
        affinity (AffinityMatrix, optional): Edge scores of the batch.
        target_affinity (TargetAffinity, optional): Edge supervision.
        domain_ids (torch.Tensor, optional): (2B,) domain indices of a per-domain discriminator.
    """

    mlp_logits: Optional[torch.Tensor]
    source_labels: torch.Tensor
    domain_logits: Optional[torch.Tensor] = None
    is_target: Optional[torch.Tensor] = None
    gcn_logits: Optional[torch.Tensor] = None
    affinity: Optional[AffinityMatrix] = None
    target_affinity: Optional[TargetAffinity] = None
    domain_ids: Optional[torch.Tensor] = None

    @property
    def half(self) -> int:
        return self.source_labels.shape[0]


@dataclass
class Objective:
    """Component losses of one batch and their weighted combinations."""

    mlp_ce: torch.Tensor
    edge_bce: torch.Tensor
    node_ce: torch.Tensor
    adv: torch.Tensor
    weights: LossWeights

    @property
    def value(self) -> torch.Tensor:
        """l_mlp + lambda_edge l_edge + lambda_node l_node - lambda_adv l_adv."""
        w = self.weights
        return (
            self.mlp_ce + w.lambda_edge * self.edge_bce + w.lambda_node * self.node_ce
            - w.lambda_adv * self.adv
        )

    @property
    def backward_loss(self) -> torch.Tensor:
        """
        The scalar to backpropagate when D's input passes through the gradient reversal.

        D descends lambda_adv * l_adv directly while F and G_mlp see the reversed
        gradient, which realizes all three group updates in one backward pass.
        """
        w = self.weights
        return (
            self.mlp_ce + w.lambda_edge * self.edge_bce + w.lambda_node * self.node_ce
            + w.lambda_adv * self.adv
        )

    def group_losses(self) -> Dict[str, torch.Tensor]:
        """The loss each parameter group minimizes, keyed like GROUP_NETWORKS."""
        w = self.weights
        return {
            "discriminator": w.lambda_adv * self.adv,
            "classifier": self.mlp_ce - w.lambda_adv * self.adv,
            "graph": w.lambda_edge * self.edge_bce + w.lambda_node * self.node_ce,
        }

    def is_finite(self) -> bool:
        return all(
            bool(torch.isfinite(t).all()) for t in (self.mlp_ce, self.edge_bce, self.node_ce, self.adv)
        )

    def as_floats(self) -> Dict[str, float]:
        return {
            "mlp_ce": float(self.mlp_ce.detach()),
            "edge_bce": float(self.edge_bce.detach()),
            "node_ce": float(self.node_ce.detach()),
            "adv": float(self.adv.detach()),
            "total": float(self.value.detach()),
        }


def total_objective(outputs: BatchOutputs, weights: LossWeights) -> Objective:
    """
    Computes every component loss of a batch.

    Cross-entropies use the source half only (ground truth or pseudo-labels);
    terms whose inputs are missing (no MLP head, no graph head, no discriminator)
    are zero. The discriminator loss is per-domain cross-entropy when domain ids
    are given and source-vs-target otherwise.

    Args:
        outputs (BatchOutputs): Forward results of one mini-batch.
        weights (LossWeights): Loss weights.

    Returns:
        Objective: Component losses with weighted combinations and group routing.
    """
    b = outputs.half
    reference = outputs.mlp_logits if outputs.mlp_logits is not None else outputs.gcn_logits
    if reference is None:
        raise ContractViolation("A batch needs the logits of at least one head")
    zero = reference.sum() * 0.0
    if outputs.mlp_logits is not None:
        mlp = ce_loss(outputs.mlp_logits[:b], outputs.source_labels)
    else:
        mlp = zero

    if outputs.gcn_logits is not None:
        node = ce_loss(outputs.gcn_logits[:b], outputs.source_labels)
    else:
        node = zero
    if outputs.affinity is not None and outputs.target_affinity is not None:
        edge = edge_bce_loss(outputs.affinity.raw, outputs.target_affinity)
    else:
        edge = zero
    if outputs.domain_logits is not None and outputs.domain_ids is not None:
        adv = domain_adversarial_loss(outputs.domain_logits, outputs.domain_ids)
    elif outputs.domain_logits is not None and outputs.is_target is not None:
        adv = adversarial_loss(outputs.domain_logits, outputs.is_target)
    else:
        adv = zero
    return Objective(mlp_ce=mlp, edge_bce=edge, node_ce=node, adv=adv, weights=weights)
