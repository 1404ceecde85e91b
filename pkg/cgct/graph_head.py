from dataclasses import dataclass
from typing import Sequence, Tuple

import torch
import torch.nn as nn

from .errors import ContractViolation, GraphHeadError

RAW_PLUS_IDENTITY = "raw_plus_identity"
RAW = "raw"
DEGREE_SOURCES = (RAW_PLUS_IDENTITY, RAW)


@dataclass(frozen=True)
class AffinityMatrix:
    """
    Pairwise similarities of one mini-batch.

    Args:
        raw (torch.Tensor): (n, n) post-sigmoid edge scores with the self-pairs zeroed.
        normalized (torch.Tensor): (n, n) M^-1/2 (raw + I) M^-1/2.
        degree (torch.Tensor): (n,) diagonal of M.
    """

    raw: torch.Tensor
    normalized: torch.Tensor
    degree: torch.Tensor


@dataclass(frozen=True)
class TargetAffinity:
    """Supervision for the edge network: 0/1 same-class values and the trained-pair mask."""

    values: torch.Tensor
    mask: torch.Tensor


class EdgeNetwork(nn.Module):
    """
    Scores every node pair from |v_i - v_j| with 1x1 convolutions.

    The pair grid is laid out as a (1, d, n, n) image so each conv acts on one
    pair at a time. Hidden layers are followed by batch norm and ReLU, the last
    layer outputs a single logit channel.
    """

    def __init__(self, in_dim: int, hidden: Sequence[int] = (64, 32)):
        super().__init__()
        layers = []
        width = in_dim
        for h in hidden:
            layers += [nn.Conv2d(width, h, kernel_size=1), nn.BatchNorm2d(h), nn.ReLU()]
            width = h
        layers.append(nn.Conv2d(width, 1, kernel_size=1))
        self.net = nn.Sequential(*layers)
        self.in_dim = in_dim

    @property
    def output_layer(self) -> nn.Conv2d:
        return self.net[-1]

    def forward(self, pair_features: torch.Tensor) -> torch.Tensor:
        grid = pair_features.permute(2, 0, 1).unsqueeze(0)
        return self.net(grid)[0, 0]


class NodeNetwork(nn.Module):
    """Classifies each node from its features concatenated with its aggregated context."""

    def __init__(self, in_dim: int, n_c: int, hidden: int = 64):
        super().__init__()
        self.net = nn.Sequential(
            nn.Conv1d(2 * in_dim, hidden, kernel_size=1),
            nn.BatchNorm1d(hidden),
            nn.ReLU(),
            nn.Conv1d(hidden, n_c, kernel_size=1),
        )
        self.in_dim = in_dim

    def forward(self, node_inputs: torch.Tensor) -> torch.Tensor:
        return self.net(node_inputs.t().unsqueeze(0))[0].t()


def edge_scores(node_features: torch.Tensor, edge_net: EdgeNetwork) -> torch.Tensor:
    """
    Computes sigmoid(f_edge(|v_i - v_j|)) for every pair of nodes.

    Args:
        node_features (torch.Tensor): (n, d) node features, n >= 2.
        edge_net (EdgeNetwork): The edge network.

    Returns:
        torch.Tensor: (n, n) symmetric scores in [0, 1], diagonal included.
    """
    if node_features.dim() != 2 or node_features.shape[0] < 2:
        raise GraphHeadError(
            f"The graph head needs at least 2 nodes, got shape {tuple(node_features.shape)}"
        )
    pairs = (node_features.unsqueeze(1) - node_features.unsqueeze(0)).abs()
    scores = torch.sigmoid(edge_net(pairs))
    # |v_i - v_j| is symmetric, averaging with the transpose removes rounding noise
    return (scores + scores.t()) / 2


def drop_self_loops(raw: torch.Tensor) -> torch.Tensor:
    """Zeroes the diagonal; the normalization adds the self-loops back as I."""
    eye = torch.eye(raw.shape[0], dtype=torch.bool, device=raw.device)
    return raw.masked_fill(eye, 0.0)


def affinity_degree(raw: torch.Tensor, degree_of: str = RAW_PLUS_IDENTITY) -> torch.Tensor:
    if degree_of == RAW_PLUS_IDENTITY:
        degree = raw.sum(dim=1) + 1.0
    elif degree_of == RAW:
        degree = raw.sum(dim=1)
    else:
        raise ContractViolation(f"degree_of must be one of {DEGREE_SOURCES}, got {degree_of!r}")
    if (degree <= 0).any():
        raise GraphHeadError("Every node needs a strictly positive degree")
    return degree


def normalize_affinity(raw: torch.Tensor, degree_of: str = RAW_PLUS_IDENTITY) -> torch.Tensor:
    """
    Symmetric normalization with self-loops: A = M^-1/2 (raw + I) M^-1/2.

    Args:
        raw (torch.Tensor): (n, n) symmetric non-negative scores.
        degree_of (str): "raw_plus_identity" (default) takes M from raw + I,
            "raw" takes it from raw alone.

    Returns:
        torch.Tensor: (n, n) symmetric normalized affinity.
    """
    if raw.dim() != 2 or raw.shape[0] != raw.shape[1]:
        raise ContractViolation(f"Affinity must be square, got shape {tuple(raw.shape)}")
    if not torch.allclose(raw, raw.t(), rtol=0.0, atol=1e-9):
        raise ContractViolation("Affinity must be symmetric")
    if (raw < 0).any():
        raise ContractViolation("Affinity entries must be non-negative")
    inv_sqrt = affinity_degree(raw, degree_of).rsqrt()
    with_loops = raw + torch.eye(raw.shape[0], dtype=raw.dtype, device=raw.device)
    normalized = inv_sqrt.unsqueeze(1) * with_loops * inv_sqrt.unsqueeze(0)
    return (normalized + normalized.t()) / 2


def build_affinity(raw: torch.Tensor, degree_of: str = RAW_PLUS_IDENTITY) -> AffinityMatrix:
    return AffinityMatrix(
        raw=raw,
        normalized=normalize_affinity(raw, degree_of),
        degree=affinity_degree(raw, degree_of),
    )


def propagate_nodes(
    node_features: torch.Tensor, normalized: torch.Tensor, node_net: NodeNetwork
) -> torch.Tensor:
    """
    One propagation round: context_i = sum_j A[i, j] v_j, logits = f_node([v_i, context_i]).

    Args:
        node_features (torch.Tensor): (n, d) node features.
        normalized (torch.Tensor): (n, n) normalized affinity.
        node_net (NodeNetwork): The node classifier.

    Returns:
        torch.Tensor: (n, n_c) node logits.
    """
    n = node_features.shape[0]
    if normalized.shape != (n, n):
        raise ContractViolation(
            f"Affinity shape {tuple(normalized.shape)} does not match {n} nodes"
        )
    if node_features.shape[1] != node_net.in_dim:
        raise ContractViolation(
            f"Node features have width {node_features.shape[1]}, expected {node_net.in_dim}"
        )
    context = normalized @ node_features
    return node_net(torch.cat([node_features, context], dim=1))


def co_teaching_node_labels(
    source_labels: torch.Tensor, target_probs: torch.Tensor
) -> Tuple[torch.Tensor, torch.Tensor]:
    """
    Per-node labels and confidences for a [source half; target half] batch.

    Source nodes keep their labels with confidence +inf, target nodes take the
    argmax of the teaching head's probabilities with its max probability.
    """
    confidence, predicted = target_probs.max(dim=1)
    labels = torch.cat([source_labels.long(), predicted])
    confidences = torch.cat(
        [torch.full_like(source_labels, float("inf"), dtype=target_probs.dtype), confidence]
    )
    return labels, confidences


def build_target_affinity(
    labels: torch.Tensor, confidences: torch.Tensor, tau: float
) -> TargetAffinity:
    """
    Builds the edge network's supervision.

    A node is definitively labeled when its label is >= 0 and its confidence
    exceeds tau (ground-truth nodes carry +inf). values[i, j] is 1 for two
    definitively labeled nodes of the same class and 0 otherwise; the mask keeps
    only pairs of two definitively labeled, distinct nodes.

    Args:
        labels (torch.Tensor): (n,) class ids, -1 for nodes without a label.
        confidences (torch.Tensor): (n,) confidence of each node's label.
        tau (float): Confidence threshold.

    Returns:
        TargetAffinity: values and mask, both (n, n).
    """
    labels = labels.long()
    definitive = (labels >= 0) & (confidences > tau)
    eye = torch.eye(labels.shape[0], dtype=torch.bool, device=labels.device)
    mask = definitive.unsqueeze(1) & definitive.unsqueeze(0) & ~eye
    same_class = labels.unsqueeze(1) == labels.unsqueeze(0)
    values = (same_class & mask).float()
    return TargetAffinity(values=values, mask=mask)
