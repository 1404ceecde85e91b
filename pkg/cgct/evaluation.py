import logging
import os
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional

import numpy as np
import pandas as pd

from .data import MTDATask, stack_features
from .errors import DatasetError
from .graph_head import RAW_PLUS_IDENTITY
from .models import ModelBundle, gcn_predict, predict
from .variants import Head

logger = logging.getLogger(__name__)


@dataclass
class Metrics:
    """
    Accuracy of the classifying head on every target's evaluation split.

    Args:
        per_domain_accuracy (dict): Target domain name → accuracy in [0, 1].
        average (float): Arithmetic mean of the per-target accuracies.
        source_accuracy (float, optional): Accuracy on the source evaluation split.
        step_losses (list): Mean losses of every training stage.
        pseudo_label_counts (list): Pseudo-labels harvested at each curriculum step.
    """

    per_domain_accuracy: Dict[str, float]
    average: float
    source_accuracy: Optional[float] = None
    step_losses: List[Dict[str, Any]] = field(default_factory=list)
    pseudo_label_counts: List[int] = field(default_factory=list)

    def to_record(self) -> Dict[str, Any]:
        return {
            "accuracy": dict(self.per_domain_accuracy),
            "average": self.average,
            "source_accuracy": self.source_accuracy,
            "losses": list(self.step_losses),
            "pseudo_label_counts": list(self.pseudo_label_counts),
        }


def _accuracy(
    bundle: ModelBundle,
    samples,
    head: Head = Head.MLP,
    context: Optional[np.ndarray] = None,
    degree_of: str = RAW_PLUS_IDENTITY,
    batch_size: int = 16,
) -> float:
    inputs = stack_features(samples)
    if head is Head.GCN:
        probs = gcn_predict(bundle, inputs, batch_size, context, np.random.default_rng(0), degree_of)
    else:
        _, probs = predict(bundle, inputs)
    labels = np.array([s.label for s in samples])
    return float(np.mean(probs.argmax(dim=1).numpy() == labels))


def evaluate(
    bundle: ModelBundle,
    task: MTDATask,
    head: Head = Head.MLP,
    degree_of: str = RAW_PLUS_IDENTITY,
    batch_size: int = 16,
) -> Metrics:
    """
    Scores the classifying head in eval mode on each target's held-out labeled split.

    The MLP head is scored on its own and the discriminator is never used. The
    GCN head, used only by variants without a trained MLP head, classifies the
    split in graphs of `batch_size` samples, each joined by `batch_size` labeled
    source training samples drawn from a fixed stream.

    Args:
        bundle (ModelBundle): Trained networks.
        task (MTDATask): Task with evaluation splits.
        head (Head): Head whose predictions are scored.
        degree_of (str): Degree source of the affinity normalization (GCN head).
        batch_size (int): Evaluation samples per graph (GCN head).

    Returns:
        Metrics: Per-target accuracies and their average.
    """
    head = Head(head)
    context = stack_features(task.source.samples) if head is Head.GCN else None

    def accuracy(samples) -> float:
        return _accuracy(bundle, samples, head, context, degree_of, batch_size)

    per_domain = {}
    for target in task.targets:
        split = task.held_out_eval.get(target.domain_id)
        if split is None:
            raise DatasetError(f"Target domain '{target.name}' has no evaluation split")
        per_domain[target.name] = accuracy(split.samples)
    source_split = task.held_out_eval.get(task.source.domain_id)
    source_accuracy = accuracy(source_split.samples) if source_split else None
    average = float(np.mean(list(per_domain.values())))
    return Metrics(per_domain_accuracy=per_domain, average=average, source_accuracy=source_accuracy)


def embeddings_frame(bundle: ModelBundle, task: MTDATask) -> pd.DataFrame:
    """One row per evaluation sample: uid, domain id, true label and the d features of F."""
    frames = []
    for domain_id in sorted(task.held_out_eval):
        split = task.held_out_eval[domain_id]
        features, _ = predict(bundle, stack_features(split.samples))
        frame = pd.DataFrame(
            features.numpy(), columns=[f"f_{i}" for i in range(features.shape[1])]
        )
        frame.insert(0, "label", [s.label for s in split.samples])
        frame.insert(0, "domain_id", [s.domain_id for s in split.samples])
        frame.insert(0, "uid", [s.uid for s in split.samples])
        frames.append(frame)
    if not frames:
        raise DatasetError("The task has no evaluation samples to embed")
    return pd.concat(frames, ignore_index=True)


def export_embeddings(bundle: ModelBundle, task: MTDATask, output_path: str) -> str:
    """
    Writes eval-mode features of every evaluation sample as CSV with a header.

    Args:
        bundle (ModelBundle): Trained networks.
        task (MTDATask): Task whose evaluation splits are embedded.
        output_path (str): CSV path, parent directories are created.

    Returns:
        str: The path written.
    """
    frame = embeddings_frame(bundle, task)
    os.makedirs(os.path.dirname(os.path.abspath(output_path)), exist_ok=True)
    frame.to_csv(output_path, index=False)
    logger.info("Wrote %d embeddings to %s", len(frame), output_path)
    return output_path


def scatter_ratio(frame: pd.DataFrame) -> float:
    """
    Between-class over within-class scatter of exported embeddings.

    Higher means tighter, better separated classes.
    """
    features = frame[[c for c in frame.columns if c.startswith("f_")]].to_numpy(dtype=np.float64)
    labels = frame["label"].to_numpy()
    overall = features.mean(axis=0)
    between = within = 0.0
    for label in np.unique(labels):
        members = features[labels == label]
        centroid = members.mean(axis=0)
        between += len(members) * float(np.sum((centroid - overall) ** 2))
        within += float(np.sum((members - centroid) ** 2))
    return between / within if within > 0 else float("inf")
