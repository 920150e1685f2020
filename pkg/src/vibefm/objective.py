"""Pre-training objective: contrastive alignment of the shared subspace,
view-invariance of the private subspaces, and an orthogonality penalty
keeping the subspaces factorized.

All terms operate on :class:`~vibefm.datamodel.EmbeddingBundle` pairs built
from two augmented views of the same batch.  Rows at the same index across
bundles are views/modalities of the same underlying sample.
"""

from __future__ import annotations

from dataclasses import dataclass
from itertools import combinations

import torch
import torch.nn.functional as F

from .datamodel import EmbeddingBundle, TrainConfig
from .errors import DimMismatch, NonFinite, ZeroVector

NORM_EPS = 1e-12


def _unit_rows(x: torch.Tensor, what: str) -> torch.Tensor:
    norms = x.norm(dim=-1)
    if bool((norms < NORM_EPS).any()):
        raise ZeroVector(f"{what}: zero-norm row cannot be direction-normalized")
    return x / norms.unsqueeze(-1)


def info_nce(
    anchors: torch.Tensor, positives: torch.Tensor, temperature: float
) -> torch.Tensor:
    """Softmax contrastive loss over cosine similarities.

    Row ``i`` of ``positives`` is the positive for row ``i`` of ``anchors``;
    every other row acts as a negative.  With a single pair there are no
    negatives and the loss is exactly zero.
    """
    if anchors.shape != positives.shape:
        raise DimMismatch(f"{tuple(anchors.shape)} vs {tuple(positives.shape)}")
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    a = _unit_rows(anchors, "anchors")
    p = _unit_rows(positives, "positives")
    logits = a @ p.T / temperature
    targets = torch.arange(len(a), device=logits.device)
    return F.cross_entropy(logits, targets)


def shared_space_loss(
    view1: EmbeddingBundle, view2: EmbeddingBundle, temperature: float
) -> torch.Tensor:
    """Cross-modal alignment of shared coordinates within each view.

    For each view and each ordered modality pair, the shared embedding of
    one modality must select the same sample's shared embedding in the
    other modality.  Averaged over views and ordered pairs.
    """
    terms = []
    for bundle in (view1, view2):
        mods = bundle.modalities
        if len(mods) < 2:
            raise DimMismatch("shared alignment needs at least two modalities")
        for a, b in combinations(mods, 2):
            terms.append(info_nce(bundle.shared(a), bundle.shared(b), temperature))
            terms.append(info_nce(bundle.shared(b), bundle.shared(a), temperature))
    return torch.stack(terms).mean()


def private_space_loss(
    view1: EmbeddingBundle, view2: EmbeddingBundle, temperature: float
) -> torch.Tensor:
    """Augmentation-invariance of each modality's private coordinates.

    The private embedding of a sample under one view must select the same
    sample under the other view, within the same modality.  Averaged over
    modalities and directions.
    """
    if view1.modalities != view2.modalities:
        raise DimMismatch("views disagree on modalities")
    terms = []
    for m in view1.modalities:
        terms.append(info_nce(view1.private(m), view2.private(m), temperature))
        terms.append(info_nce(view2.private(m), view1.private(m), temperature))
    return torch.stack(terms).mean()


def orthogonality_penalty(bundle: EmbeddingBundle) -> torch.Tensor:
    """Mean squared cosine between constrained subspace pairs.

    Per sample, the constrained pairs are every pair of distinct private
    embeddings plus each modality's (private, shared) pair.  Requires the
    shared and private splits to have equal width so the cosines are
    defined; the result lies in [0, 1].
    """
    if bundle.shared_dim != bundle.private_dim:
        raise DimMismatch(
            f"shared width {bundle.shared_dim} != private width {bundle.private_dim}"
        )
    mods = bundle.modalities
    units: dict[str, tuple[torch.Tensor, torch.Tensor]] = {}
    for m in mods:
        units[m] = (
            _unit_rows(bundle.shared(m), f"{m} shared"),
            _unit_rows(bundle.private(m), f"{m} private"),
        )
    terms = []
    for a, b in combinations(mods, 2):
        terms.append(((units[a][1] * units[b][1]).sum(-1) ** 2))
    for m in mods:
        terms.append(((units[m][1] * units[m][0]).sum(-1) ** 2))
    return torch.stack(terms).mean()


@dataclass
class LossBreakdown:
    """Weighted total plus the three raw terms, kept on the autograd graph."""

    total: torch.Tensor
    shared: torch.Tensor
    private: torch.Tensor
    orthogonality: torch.Tensor

    def detached(self) -> dict[str, float]:
        return {
            "total": float(self.total.detach()),
            "shared": float(self.shared.detach()),
            "private": float(self.private.detach()),
            "orthogonality": float(self.orthogonality.detach()),
        }


def focal_loss(
    view1: EmbeddingBundle, view2: EmbeddingBundle, config: TrainConfig
) -> LossBreakdown:
    """Full pre-training objective over two augmented views of a batch."""
    shared = shared_space_loss(view1, view2, config.temperature)
    private = private_space_loss(view1, view2, config.temperature)
    orth = 0.5 * (orthogonality_penalty(view1) + orthogonality_penalty(view2))
    w = config.loss_weights
    total = w.shared * shared + w.private * private + w.orthogonality * orth
    if not bool(torch.isfinite(total)):
        raise NonFinite("objective evaluated to NaN or Inf")
    return LossBreakdown(total=total, shared=shared, private=private, orthogonality=orth)
