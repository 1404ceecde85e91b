import math
from contextlib import contextmanager
from dataclasses import asdict, dataclass
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from torch.autograd import Function

from .errors import ConfigurationError
from .graph_head import (
    RAW_PLUS_IDENTITY,
    AffinityMatrix,
    EdgeNetwork,
    NodeNetwork,
    build_affinity,
    drop_self_loops,
    edge_scores,
    propagate_nodes,
)

BACKBONES = ("mlp", "smallconv")
ACTIVATIONS = {"relu": nn.ReLU, "tanh": nn.Tanh}
GRL_SCHEDULES = ("ramp", "constant")


@dataclass(frozen=True)
class ArchitectureConfig:
    """
    Shapes of the five networks.

    backbone "mlp" takes (B, input_dim) vectors through two fully-connected
    layers; "smallconv" takes (B, in_channels, image_size, image_size) images
    through two conv blocks and two fc blocks.
    """

    n_c: int
    backbone: str = "mlp"
    input_dim: int = 16
    in_channels: int = 3
    image_size: int = 28
    feature_dim: int = 32
    hidden_dim: int = 64
    activation: str = "relu"
    backbone_dropout: float = 0.0
    edge_hidden: Tuple[int, ...] = (64, 32)
    node_hidden: int = 64
    disc_hidden: int = 100
    disc_dropout: float = 0.5
    disc_outputs: int = 1

    def __post_init__(self):
        object.__setattr__(self, "edge_hidden", tuple(self.edge_hidden))
        if self.disc_outputs < 1:
            raise ConfigurationError(f"disc_outputs must be >= 1, got {self.disc_outputs}")
        if self.backbone not in BACKBONES:
            raise ConfigurationError(f"backbone must be one of {BACKBONES}, got {self.backbone!r}")
        if self.activation not in ACTIVATIONS:
            raise ConfigurationError(
                f"activation must be one of {sorted(ACTIVATIONS)}, got {self.activation!r}"
            )
        if self.n_c < 2 or self.feature_dim < 1 or self.input_dim < 1:
            raise ConfigurationError("n_c must be >= 2 and every width >= 1")
        if self.backbone == "smallconv" and _conv_output_side(self.image_size) < 1:
            raise ConfigurationError(f"image_size {self.image_size} is too small for smallconv")

    def to_dict(self) -> Dict:
        data = asdict(self)
        data["edge_hidden"] = list(self.edge_hidden)
        return data

    @classmethod
    def from_dict(cls, data: Dict) -> "ArchitectureConfig":
        return cls(**{**data, "edge_hidden": tuple(data.get("edge_hidden", (64, 32)))})

    @property
    def input_shape(self) -> Tuple[int, ...]:
        if self.backbone == "mlp":
            return (self.input_dim,)
        return (self.in_channels, self.image_size, self.image_size)


def _conv_output_side(image_size: int) -> int:
    return ((image_size - 4) // 2 - 4) // 2


class MLPBackbone(nn.Module):
    def __init__(self, config: ArchitectureConfig):
        super().__init__()
        act = ACTIVATIONS[config.activation]
        self.net = nn.Sequential(
            nn.Linear(config.input_dim, config.hidden_dim),
            act(),
            nn.Dropout(config.backbone_dropout),
            nn.Linear(config.hidden_dim, config.feature_dim),
            act(),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.net(x)


class SmallConvBackbone(nn.Module):
    """Two 5x5 conv blocks with max pooling, then two fc blocks (digits-scale network)."""

    def __init__(self, config: ArchitectureConfig, dropout: float = 0.2):
        super().__init__()
        side = _conv_output_side(config.image_size)
        self.net = nn.Sequential(
            nn.Conv2d(config.in_channels, 32, kernel_size=5),
            nn.BatchNorm2d(32),
            nn.ReLU(),
            nn.Dropout(dropout),
            nn.MaxPool2d(2),
            nn.Conv2d(32, 64, kernel_size=5),
            nn.BatchNorm2d(64),
            nn.ReLU(),
            nn.Dropout(dropout),
            nn.MaxPool2d(2),
            nn.Flatten(),
            nn.Linear(64 * side * side, 100),
            nn.BatchNorm1d(100),
            nn.ReLU(),
            nn.Dropout(dropout),
            nn.Linear(100, config.feature_dim),
            nn.BatchNorm1d(config.feature_dim),
            nn.ReLU(),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.net(x)


class DomainDiscriminator(nn.Module):
    """
    Three fully-connected layers.

    With one output the logit is pre-sigmoid source vs target; with more, one
    logit per domain id.
    """

    def __init__(self, in_dim: int, hidden: int = 100, dropout: float = 0.5, outputs: int = 1):
        super().__init__()
        self.net = nn.Sequential(
            nn.Linear(in_dim, hidden),
            nn.ReLU(),
            nn.Dropout(dropout),
            nn.Linear(hidden, hidden),
            nn.ReLU(),
            nn.Dropout(dropout),
            nn.Linear(hidden, outputs),
        )
        self.in_dim = in_dim
        self.outputs = outputs

    def forward(self, h: torch.Tensor) -> torch.Tensor:
        return self.net(h)


class ModelBundle(nn.Module):
    """
    Feature extractor F, MLP head G_mlp, edge network, node network and discriminator D.

    Args:
        config (ArchitectureConfig): Shapes of every network.
    """

    def __init__(self, config: ArchitectureConfig):
        super().__init__()
        self.config = config
        if config.backbone == "mlp":
            self.feature_extractor = MLPBackbone(config)
        else:
            self.feature_extractor = SmallConvBackbone(config)
        self.mlp_head = nn.Linear(config.feature_dim, config.n_c)
        self.edge_net = EdgeNetwork(config.feature_dim, config.edge_hidden)
        self.node_net = NodeNetwork(config.feature_dim, config.n_c, config.node_hidden)
        self.discriminator = DomainDiscriminator(
            config.feature_dim * config.n_c, config.disc_hidden, config.disc_dropout, config.disc_outputs
        )

    GROUPS = ("feature_extractor", "mlp_head", "edge_net", "node_net", "discriminator")

    def parameter_groups(self) -> Dict[str, List[nn.Parameter]]:
        return {name: list(getattr(self, name).parameters()) for name in self.GROUPS}

    def parameters_of(self, *groups: str) -> List[nn.Parameter]:
        params: List[nn.Parameter] = []
        for name in groups:
            params.extend(getattr(self, name).parameters())
        return params


@contextmanager
def inference_mode(bundle: ModelBundle) -> Iterator[ModelBundle]:
    """Eval mode without autograd; the previous train/eval mode is restored on exit."""
    was_training = bundle.training
    bundle.eval()
    try:
        with torch.no_grad():
            yield bundle
    finally:
        bundle.train(was_training)


@dataclass(frozen=True)
class GRLCoefficient:
    """
    Scale of the reversed gradient.

    With the "ramp" schedule the effective value is
    lambda_adv_weight * (2 / (1 + exp(-10 p)) - 1) for progress p in [0, 1];
    "constant" uses lambda_adv_weight throughout.
    """

    lambda_adv_weight: float = 1.0
    progress: float = 0.0
    schedule: str = "ramp"

    def __post_init__(self):
        if self.lambda_adv_weight < 0:
            raise ConfigurationError("lambda_adv_weight must be >= 0")
        if not 0.0 <= self.progress <= 1.0:
            raise ConfigurationError(f"GRL progress must be in [0, 1], got {self.progress}")
        if self.schedule not in GRL_SCHEDULES:
            raise ConfigurationError(f"GRL schedule must be one of {GRL_SCHEDULES}")

    @property
    def value(self) -> float:
        if self.schedule == "constant":
            return self.lambda_adv_weight
        return self.lambda_adv_weight * (2.0 / (1.0 + math.exp(-10.0 * self.progress)) - 1.0)


class GradientReversal(Function):
    """Identity on the way forward, multiplies the incoming gradient by -coeff on the way back."""

    @staticmethod
    def forward(ctx, x, coeff):
        ctx.coeff = coeff
        return x.view_as(x)

    @staticmethod
    def backward(ctx, grad_output):
        return grad_output.neg() * ctx.coeff, None


def grad_reverse(x: torch.Tensor, coeff: float) -> torch.Tensor:
    return GradientReversal.apply(x, coeff)


def _check_input(x: torch.Tensor, config: ArchitectureConfig) -> None:
    expected = config.input_shape
    if x.dim() != len(expected) + 1 or tuple(x.shape[1:]) != expected:
        raise ConfigurationError(
            f"Input shape {tuple(x.shape)} does not match backbone "
            f"{config.backbone!r} expecting (B, {', '.join(map(str, expected))})"
        )


def classifier_forward(x: torch.Tensor, bundle: ModelBundle) -> Tuple[torch.Tensor, torch.Tensor]:
    """
    Runs F then G_mlp.

    Args:
        x (torch.Tensor): Input batch matching the backbone.
        bundle (ModelBundle): The networks.

    Returns:
        tuple: (features f of shape (B, d), MLP logits of shape (B, n_c)).
    """
    _check_input(x, bundle.config)
    features = bundle.feature_extractor(x)
    return features, bundle.mlp_head(features)


def gcn_head_forward(
    features: torch.Tensor, bundle: ModelBundle, degree_of: str = RAW_PLUS_IDENTITY
) -> Tuple[AffinityMatrix, torch.Tensor]:
    """Edge scores, self-loop normalization and one propagation round on given features."""
    raw = drop_self_loops(edge_scores(features, bundle.edge_net))
    affinity = build_affinity(raw, degree_of)
    return affinity, propagate_nodes(features, affinity.normalized, bundle.node_net)


def gcn_classifier_forward(
    x: torch.Tensor, bundle: ModelBundle, degree_of: str = RAW_PLUS_IDENTITY
) -> Tuple[AffinityMatrix, torch.Tensor]:
    """
    Runs F then the graph head on a mixed source/target batch.

    Returns:
        tuple: (AffinityMatrix for the edge loss, GCN logits of shape (2B, n_c)).
    """
    _check_input(x, bundle.config)
    return gcn_head_forward(bundle.feature_extractor(x), bundle, degree_of)


def multilinear_map(features: torch.Tensor, probs: torch.Tensor) -> torch.Tensor:
    """Flattened outer product: block k of the (d * n_c) output holds probs[:, k] * features."""
    outer = torch.bmm(probs.unsqueeze(2), features.unsqueeze(1))
    return outer.reshape(features.shape[0], -1)


def discriminator_forward(
    features: torch.Tensor,
    class_probs: torch.Tensor,
    grl: Optional[GRLCoefficient],
    bundle: ModelBundle,
) -> torch.Tensor:
    """
    Conditions D on the joint (f, g) through the multilinear map.

    Args:
        features (torch.Tensor): (B, d) features from F.
        class_probs (torch.Tensor): (B, n_c) post-softmax probabilities of the classifying head.
        grl (GRLCoefficient, optional): Gradient reversal applied to D's input;
            None leaves the gradient untouched.
        bundle (ModelBundle): The networks.

    Returns:
        torch.Tensor: (B, disc_outputs) domain logits.
    """
    if features.shape[0] != class_probs.shape[0]:
        raise ConfigurationError("Features and probabilities must have the same batch size")
    h = multilinear_map(features, class_probs)
    if h.shape[1] != bundle.discriminator.in_dim:
        raise ConfigurationError(
            f"Discriminator expects width {bundle.discriminator.in_dim}, got {h.shape[1]}"
        )
    if grl is not None:
        h = grad_reverse(h, grl.value)
    return bundle.discriminator(h)


def predict(
    bundle: ModelBundle, inputs: np.ndarray, batch_size: int = 256
) -> Tuple[torch.Tensor, torch.Tensor]:
    """
    Eval-mode features and MLP-head probabilities for a stack of inputs.

    Returns:
        tuple: (features (n, d), probabilities (n, n_c)) in input order.
    """
    features: List[torch.Tensor] = []
    probs: List[torch.Tensor] = []
    dtype = next(bundle.parameters()).dtype
    with inference_mode(bundle):
        for start in range(0, len(inputs), batch_size):
            x = torch.as_tensor(inputs[start:start + batch_size], dtype=dtype)
            f, logits = classifier_forward(x, bundle)
            features.append(f)
            probs.append(F.softmax(logits, dim=1))
    return torch.cat(features), torch.cat(probs)


def _chunks(n: int, size: int, min_size: int) -> List[Tuple[int, int]]:
    bounds = [(start, min(start + size, n)) for start in range(0, n, size)]
    if len(bounds) > 1 and bounds[-1][1] - bounds[-1][0] < min_size:
        last_start = bounds[-2][0]
        bounds = bounds[:-2] + [(last_start, n)]
    return bounds


def gcn_predict(
    bundle: ModelBundle,
    inputs: np.ndarray,
    batch_size: int = 16,
    context: Optional[np.ndarray] = None,
    rng: Optional[np.random.Generator] = None,
    degree_of: str = RAW_PLUS_IDENTITY,
) -> torch.Tensor:
    """
    Eval-mode GCN-head probabilities for a stack of inputs.

    The GCN head classifies a node from its batch neighbours, so the inputs are
    walked in chunks of `batch_size`, each joined by `batch_size` rows drawn
    from `context` when one is given. A chunk is never a single node: a short
    tail joins the previous chunk and a lone input is duplicated.

    Args:
        bundle (ModelBundle): The networks.
        inputs (np.ndarray): (n, ...) inputs matching the backbone.
        batch_size (int): Inputs per graph.
        context (np.ndarray, optional): Anchor inputs mixed into every graph.
        rng (np.random.Generator, optional): Stream the anchors are drawn from.
        degree_of (str): Degree source of the affinity normalization.

    Returns:
        torch.Tensor: (n, n_c) probabilities in input order.
    """
    if len(inputs) == 0:
        return torch.zeros((0, bundle.config.n_c))
    n_context = batch_size if context is not None and len(context) else 0
    if rng is None:
        rng = np.random.default_rng(0)
    dtype = next(bundle.parameters()).dtype
    bounds = _chunks(len(inputs), batch_size, 2 - min(n_context, 1))
    probs: List[torch.Tensor] = []
    with inference_mode(bundle):
        for start, end in bounds:
            nodes = inputs[start:end]
            n_anchors = 0
            if n_context:
                picks = rng.choice(len(context), size=n_context, replace=len(context) < n_context)
                nodes = np.concatenate([context[picks], nodes])
                n_anchors = n_context
            if len(nodes) < 2:
                nodes = np.concatenate([nodes, nodes])
            x = torch.as_tensor(nodes, dtype=dtype)
            _, logits = gcn_classifier_forward(x, bundle, degree_of)
            probs.append(F.softmax(logits[n_anchors:n_anchors + end - start], dim=1))
    return torch.cat(probs)


def architecture_for_inputs(
    sample_shape: Sequence[int], n_c: int, **overrides
) -> ArchitectureConfig:
    """Derives the backbone kind and input shape from one sample's feature shape."""
    if len(sample_shape) == 1:
        return ArchitectureConfig(
            n_c=n_c, **{**overrides, "backbone": "mlp", "input_dim": sample_shape[0]}
        )
    if len(sample_shape) == 3:
        channels, height, width = sample_shape
        if height != width:
            raise ConfigurationError(f"smallconv needs square images, got {height}x{width}")
        return ArchitectureConfig(
            n_c=n_c,
            **{**overrides, "backbone": "smallconv", "in_channels": channels, "image_size": height},
        )
    raise ConfigurationError(f"Unsupported sample shape {tuple(sample_shape)}")
