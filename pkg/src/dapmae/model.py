"""The composite network: backbone + domain adapter + DFG + classification head."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import TrainConfig
from .dfg import DFG, pool_features
from .geometry import DomainId, MaskSpec, mask_split, patchify
from .hda import ADAPTATION, FUSION, HDA, SharedAdapter
from .losses import LossReport, contrastive_loss, recon_loss, total_loss
from .network import Backbone

DTYPES = {"float32": torch.float32, "float64": torch.float64}


@dataclass
class Prepared:
    """Patch tensors for a batch; masked/visible index rows are sorted by patch index."""

    patches: torch.Tensor  # (B, G, k, 3)
    centers: torch.Tensor  # (B, G, 3)
    vis_idx: torch.Tensor | None  # (B, Nv)
    mask_idx: torch.Tensor | None  # (B, Nm)
    domains: list[DomainId]
    labels: torch.Tensor | None = None


def mask_seed(*parts: int) -> int:
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1, dtype=np.uint64)[0])


def prepare(points: np.ndarray, domains, cfg: TrainConfig, mask_seeds=None, labels=None, dtype=torch.float32) -> Prepared:
    """Patchify each cloud in ``points`` (B, N, 3); mask when ``mask_seeds`` is given."""
    pc = cfg.patch
    sets = [patchify(p, pc.g, pc.k, pc.fps_start) for p in points]
    vis_idx = mask_idx = None
    if mask_seeds is not None:
        sets = [mask_split(ps, MaskSpec(pc.mask_ratio, s)) for ps, s in zip(sets, mask_seeds)]
        vis_idx = torch.as_tensor(np.stack([np.flatnonzero(ps.vis_mask) for ps in sets]))
        mask_idx = torch.as_tensor(np.stack([np.flatnonzero(~ps.vis_mask) for ps in sets]))
    patches = torch.as_tensor(np.stack([ps.patches for ps in sets]), dtype=dtype)
    centers = torch.as_tensor(np.stack([ps.centers for ps in sets]), dtype=dtype)
    lab = torch.as_tensor(labels, dtype=torch.long) if labels is not None else None
    return Prepared(patches, centers, vis_idx, mask_idx, [DomainId.parse(d) for d in domains], lab)


def gather_rows(x: torch.Tensor, idx: torch.Tensor) -> torch.Tensor:
    """x: (B, G, ...), idx: (B, n) -> (B, n, ...)."""
    view = idx.reshape(idx.shape + (1,) * (x.ndim - 2)).expand(idx.shape + x.shape[2:])
    return torch.gather(x, 1, view)


class ClassificationHead(nn.Module):
    def __init__(self, d_in: int, hidden: int, n_classes: int):
        super().__init__()
        self.fc1 = nn.Linear(d_in, hidden)
        self.fc2 = nn.Linear(hidden, n_classes)
        for fc in (self.fc1, self.fc2):
            nn.init.normal_(fc.weight, 0.0, 0.02)
            nn.init.zeros_(fc.bias)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.fc2(F.relu(self.fc1(x)))


class DapMae(Backbone):
    def __init__(self, cfg: TrainConfig):
        m = cfg.model
        super().__init__(
            dim=m.dim, d_in=m.token_in, enc_depth=m.enc_depth, dec_depth=m.dec_depth, heads=m.heads,
            k=cfg.patch.k, drop_path=m.drop_path, embed_hidden=m.embed_hidden, pos_hidden=m.pos_hidden,
        )
        self.use_hda = cfg.use_hda
        self.use_dfg = cfg.use_dfg
        if cfg.use_hda:
            self.hda = HDA(m.token_in, m.adapter_hidden, m.dim, m.coef_hidden)
        else:
            self.adapter = SharedAdapter(m.token_in, m.adapter_hidden, m.dim)
        if cfg.use_dfg:
            self.dfg = DFG(m.dim, m.dfg_heads)
        self.head: ClassificationHead | None = None
        self.n_classes: int | None = None

    # -- structure ----------------------------------------------------------------------

    @property
    def adapter_module(self):
        return self.hda if self.use_hda else self.adapter

    @property
    def hda_mode(self) -> str:
        return self.hda.mode if self.use_hda else "none"

    @property
    def head_width(self) -> int:
        d = self.encoder.norm.normalized_shape[0]
        return 4 * d if self.use_dfg else 2 * d

    def add_head(self, n_classes: int, hidden: int) -> None:
        ref = next(self.parameters())
        self.head = ClassificationHead(self.head_width, hidden, n_classes).to(ref.dtype)
        self.n_classes = n_classes

    def set_mode(self, mode: str, freeze: bool = True) -> None:
        if not self.use_hda:
            return
        self.hda.set_mode(mode)
        if mode == FUSION and not freeze:
            for p in self.hda.branch_parameters():
                p.requires_grad_(True)
            self.hda.require_frozen = False

    # -- pre-training -------------------------------------------------------------------

    def encode_visible(self, prep: Prepared):
        vis_patches = gather_rows(prep.patches, prep.vis_idx)
        tokens0 = self.patch_embed(vis_patches)
        if self.use_hda:
            tokens = self.hda.adapt(tokens0, prep.domains)
        else:
            tokens = self.adapter(tokens0)
        pos = self.pos_mlp(prep.centers)
        pos_vis = gather_rows(pos, prep.vis_idx)
        pos_mask = gather_rows(pos, prep.mask_idx)
        f_vis = self.encoder(tokens, pos_vis)
        return f_vis, pos_vis, pos_mask

    def pretrain_forward(self, prep: Prepared, loss_cfg, with_report: bool = False):
        """Returns (l_total, l_rec, l_con[, LossReport])."""
        f_vis, pos_vis, pos_mask = self.encode_visible(prep)
        pred = self.decoder(f_vis, pos_vis, pos_mask)
        gt = gather_rows(prep.patches, prep.mask_idx)
        l_rec, per_patch = recon_loss(pred, gt, return_per_patch=True)
        l_con = l_rec.new_zeros(())
        terms, clamped = None, 0
        if self.use_dfg and len(prep.domains) >= 2:
            _, d = self.dfg(f_vis, prep.domains)
            cfg = loss_cfg
            l_con, terms, clamped = contrastive_loss(d, prep.domains, cfg, return_report=True)
        l_total = total_loss(l_rec, l_con, loss_cfg)
        if not with_report:
            return l_total, l_rec, l_con
        report = LossReport(
            l_rec=float(l_rec), l_con=float(l_con), l_total=float(l_total),
            per_patch=per_patch.detach().flatten().tolist(),
            per_pair=terms.tolist() if terms is not None else [],
            clamped_norms=clamped,
        )
        return l_total, l_rec, l_con, report

    def pretrain_domain_features(self, prep: Prepared) -> torch.Tensor:
        f_vis, _, _ = self.encode_visible(prep)
        return self.dfg(f_vis, prep.domains)[1]

    # -- fine-tuning --------------------------------------------------------------------

    def encode_full(self, prep: Prepared, task_domain) -> torch.Tensor:
        tokens0 = self.patch_embed(prep.patches)
        if self.use_hda:
            if self.hda.mode == FUSION:
                tokens, _ = self.hda.fuse(tokens0, task_domain)
            else:
                tokens = self.hda.adapt(tokens0, prep.domains)
        else:
            tokens = self.adapter(tokens0)
        return self.encoder(tokens, self.pos_mlp(prep.centers))

    def head_input(self, prep: Prepared, task_domain) -> torch.Tensor:
        f = self.encode_full(prep, task_domain)
        pooled = pool_features(f)
        if not self.use_dfg:
            return pooled
        c, d = self.dfg(f, prep.domains)
        return torch.cat([c, d, pooled], dim=-1)

    def logits(self, prep: Prepared, task_domain) -> torch.Tensor:
        if self.head is None:
            raise RuntimeError("model has no classification head")
        return self.head(self.head_input(prep, task_domain))

    def finetune_forward(self, prep: Prepared, task_domain):
        logits = self.logits(prep, task_domain)
        return F.cross_entropy(logits, prep.labels), logits


def build_model(cfg: TrainConfig) -> DapMae:
    model = DapMae(cfg)
    return model.to(DTYPES[cfg.precision])


__all__ = ["DapMae", "Prepared", "prepare", "build_model", "gather_rows", "mask_seed", "ADAPTATION", "FUSION"]
