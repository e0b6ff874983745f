"""Chamfer reconstruction loss, domain contrastive loss and their weighted sum."""

from __future__ import annotations

from dataclasses import dataclass, field

import torch

NORM_FLOOR = 1e-12


@dataclass
class LossConfig:
    w1: float = 100.0
    w2: float = 0.001
    margin: float = 0.0
    pair_reduction: str = "sum"

    def __post_init__(self):
        if self.w1 < 0 or self.w2 < 0:
            raise ValueError("loss weights must be nonnegative")
        if not -1.0 <= self.margin <= 1.0:
            raise ValueError(f"margin must lie in [-1, 1], got {self.margin}")
        if self.pair_reduction not in ("sum", "mean"):
            raise ValueError(f"pair_reduction must be 'sum' or 'mean', got {self.pair_reduction!r}")


@dataclass
class LossReport:
    l_rec: float
    l_con: float
    l_total: float
    per_patch: list[float] = field(default_factory=list)
    per_pair: list[list[float]] = field(default_factory=list)
    clamped_norms: int = 0

    def as_dict(self) -> dict:
        return {"l_rec": self.l_rec, "l_con": self.l_con, "l_total": self.l_total}


def chamfer_batch(pred: torch.Tensor, gt: torch.Tensor) -> torch.Tensor:
    """Per-set chamfer distance for stacked point sets (..., n, 3) and (..., m, 3)."""
    d = ((pred.unsqueeze(-2) - gt.unsqueeze(-3)) ** 2).sum(-1)
    return d.min(dim=-1).values.mean(-1) + d.min(dim=-2).values.mean(-1)


def recon_loss(pred: torch.Tensor, gt: torch.Tensor, return_per_patch: bool = False):
    """Mean chamfer distance over masked patches; inputs (..., k, 3) with matching leading dims."""
    if pred.shape[:-2] != gt.shape[:-2]:
        raise ValueError(f"prediction/target patch counts differ: {tuple(pred.shape)} vs {tuple(gt.shape)}")
    per = chamfer_batch(pred, gt)
    loss = per.mean()
    return (loss, per) if return_per_patch else loss


def cosine_matrix(d_feats: torch.Tensor) -> tuple[torch.Tensor, int]:
    norms = d_feats.norm(dim=-1)
    clamped = int((norms < NORM_FLOOR).sum())
    unit = d_feats / norms.clamp_min(NORM_FLOOR).unsqueeze(-1)
    return unit @ unit.T, clamped


def contrastive_terms(d_feats: torch.Tensor, labels, margin: float = 0.0):
    """Matrix of per-ordered-pair terms (diagonal zero) and the clamped-norm count."""
    b = d_feats.shape[0]
    if b < 2:
        raise ValueError(f"contrastive loss needs a batch of at least 2, got {b}")
    lab = torch.as_tensor([int(x) for x in labels])
    if lab.numel() != b:
        raise ValueError("one domain label per feature vector is required")
    cos, clamped = cosine_matrix(d_feats)
    same = lab[:, None] == lab[None, :]
    terms = torch.where(same, 1.0 - cos, torch.clamp(cos - margin, min=0.0))
    off_diag = ~torch.eye(b, dtype=torch.bool)
    return terms * off_diag, clamped


def contrastive_loss(d_feats: torch.Tensor, labels, cfg: LossConfig | None = None, return_report: bool = False):
    cfg = cfg or LossConfig()
    terms, clamped = contrastive_terms(d_feats, labels, cfg.margin)
    loss = terms.sum()
    if cfg.pair_reduction == "mean":
        b = d_feats.shape[0]
        loss = loss / (b * (b - 1))
    if return_report:
        return loss, terms.detach(), clamped
    return loss


def total_loss(l_rec, l_con, cfg: LossConfig | None = None):
    cfg = cfg or LossConfig()
    return cfg.w1 * l_rec + cfg.w2 * l_con
