"""Backbone: mini-PointNet patch embedding, positional MLP, pre-norm transformer encoder
and decoder with a shared learnable mask token and a linear reconstruction head."""

from __future__ import annotations

import math
from typing import Callable

import torch
import torch.nn as nn
import torch.nn.functional as F

LN_EPS = 1e-5


class TrainingDivergence(RuntimeError):
    def __init__(self, message: str, step: int | None = None, context: dict | None = None):
        super().__init__(message)
        self.step = step
        self.context = context or {}


def init_weights(module: nn.Module) -> None:
    """normal(0, 0.02) for projections, zero biases, unit LayerNorm scales."""
    for m in module.modules():
        if isinstance(m, nn.Linear):
            nn.init.normal_(m.weight, 0.0, 0.02)
            if m.bias is not None:
                nn.init.zeros_(m.bias)
        elif isinstance(m, nn.LayerNorm):
            nn.init.ones_(m.weight)
            nn.init.zeros_(m.bias)


def init_coordinate_mlp(module: nn.Module) -> None:
    """Fan-in scaled normal init for MLPs that read raw coordinates.

    A 0.02 std chained through these layers shrinks tokens to ~1e-3, far below the
    BN epsilon downstream, so shape information never reaches the encoder.
    """
    for m in module.modules():
        if isinstance(m, nn.Linear):
            nn.init.normal_(m.weight, 0.0, m.in_features ** -0.5)
            nn.init.zeros_(m.bias)


class PatchEmbed(nn.Module):
    """Shared per-point map, max over the patch, then an output map."""

    def __init__(self, d_in: int, hidden: int = 64):
        super().__init__()
        self.d_in = d_in
        self.point_fc1 = nn.Linear(3, hidden)
        self.point_fc2 = nn.Linear(hidden, d_in)
        self.out = nn.Linear(d_in, d_in)

    def forward(self, patches: torch.Tensor) -> torch.Tensor:
        # patches: (..., k, 3) -> (..., d_in)
        if patches.shape[-1] != 3:
            raise ValueError(f"patch points must be 3-vectors, got trailing dim {patches.shape[-1]}")
        h = self.point_fc2(F.gelu(self.point_fc1(patches)))
        return self.out(h.max(dim=-2).values)


class PosMLP(nn.Module):
    def __init__(self, dim: int, hidden: int = 128):
        super().__init__()
        self.fc1 = nn.Linear(3, hidden)
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, centers: torch.Tensor) -> torch.Tensor:
        return self.fc2(F.gelu(self.fc1(centers)))


class DropPath(nn.Module):
    def __init__(self, p: float = 0.0):
        super().__init__()
        self.p = p

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if self.p == 0.0 or not self.training:
            return x
        keep = 1.0 - self.p
        mask = x.new_empty((x.shape[0],) + (1,) * (x.ndim - 1)).bernoulli_(keep)
        return x * mask / keep


class SelfAttention(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        if dim % heads:
            raise ValueError(f"width {dim} is not divisible by {heads} heads")
        self.heads = heads
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)
        self.last_weights: torch.Tensor | None = None
        self.keep_weights = False

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, n, d = x.shape
        dh = d // self.heads
        q, k, v = self.qkv(x).reshape(b, n, 3, self.heads, dh).permute(2, 0, 3, 1, 4)
        attn = torch.softmax(q @ k.transpose(-2, -1) / math.sqrt(dh), dim=-1)
        if self.keep_weights:
            self.last_weights = attn.detach()
        out = (attn @ v).transpose(1, 2).reshape(b, n, d)
        return self.proj(out)


class Block(nn.Module):
    def __init__(self, dim: int, heads: int, mlp_ratio: int = 4, drop_path: float = 0.0):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim, eps=LN_EPS)
        self.attn = SelfAttention(dim, heads)
        self.norm2 = nn.LayerNorm(dim, eps=LN_EPS)
        self.fc1 = nn.Linear(dim, mlp_ratio * dim)
        self.fc2 = nn.Linear(mlp_ratio * dim, dim)
        self.drop_path = DropPath(drop_path)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = x + self.drop_path(self.attn(self.norm1(x)))
        return x + self.drop_path(self.fc2(F.gelu(self.fc1(self.norm2(x)))))


class TransformerStack(nn.Module):
    """Blocks with the positional rows added at every block input, then a final norm."""

    def __init__(self, dim: int, depth: int, heads: int, drop_path: float = 0.0):
        super().__init__()
        rates = [drop_path * i / max(depth - 1, 1) for i in range(depth)]
        self.blocks = nn.ModuleList(Block(dim, heads, drop_path=r) for r in rates)
        self.norm = nn.LayerNorm(dim, eps=LN_EPS)

    def forward(self, x: torch.Tensor, pos: torch.Tensor) -> torch.Tensor:
        for blk in self.blocks:
            x = blk(x + pos)
        return self.norm(x)


class Encoder(TransformerStack):
    def forward(self, tokens: torch.Tensor, pos: torch.Tensor) -> torch.Tensor:
        if tokens.shape[-2] == 0:
            raise ValueError("encoder needs at least one visible token")
        return super().forward(tokens, pos)


class Decoder(nn.Module):
    def __init__(self, dim: int, depth: int, heads: int, k: int, drop_path: float = 0.0):
        super().__init__()
        self.k = k
        self.mask_token = nn.Parameter(torch.zeros(1, 1, dim))
        self.stack = TransformerStack(dim, depth, heads, drop_path)
        self.recon_head = nn.Linear(dim, 3 * k)

    def forward(self, f_vis: torch.Tensor, pos_vis: torch.Tensor, pos_mask: torch.Tensor) -> torch.Tensor:
        """(B, Nv, D), (B, Nv, D), (B, Nm, D) -> (B, Nm, k, 3) center-relative predictions."""
        if f_vis.shape[-2] != pos_vis.shape[-2]:
            raise ValueError("visible features and positional rows disagree in count")
        b, n_mask, d = pos_mask.shape
        if n_mask == 0:
            raise ValueError("decoder needs at least one masked patch")
        x = torch.cat([f_vis, self.mask_token.expand(b, n_mask, d)], dim=1)
        pos = torch.cat([pos_vis, pos_mask], dim=1)
        x = self.stack(x, pos)[:, -n_mask:]
        return self.recon_head(x).reshape(b, n_mask, self.k, 3)


class Backbone(nn.Module):
    def __init__(
        self,
        dim: int,
        d_in: int,
        enc_depth: int,
        dec_depth: int,
        heads: int,
        k: int,
        drop_path: float = 0.0,
        embed_hidden: int = 64,
        pos_hidden: int = 128,
    ):
        super().__init__()
        self.patch_embed = PatchEmbed(d_in, embed_hidden)
        self.pos_mlp = PosMLP(dim, pos_hidden)
        self.encoder = Encoder(dim, enc_depth, heads, drop_path)
        self.decoder = Decoder(dim, dec_depth, heads, k)
        init_weights(self)
        init_coordinate_mlp(self.patch_embed)
        init_coordinate_mlp(self.pos_mlp)
        nn.init.normal_(self.decoder.mask_token, 0.0, 0.02)


def forward_backward(
    loss_fn: Callable[[], torch.Tensor], module: nn.Module, step: int | None = None
) -> tuple[torch.Tensor, dict[str, torch.Tensor]]:
    """Evaluate ``loss_fn`` and return ``(loss, {path: grad})`` over trainable parameters.

    Frozen parameters have no entry. Trainable parameters the loss does not reach get
    an explicit zero tensor.
    """
    module.zero_grad(set_to_none=True)
    loss = loss_fn()
    if not torch.isfinite(loss).all():
        raise TrainingDivergence(f"non-finite loss {loss.item()!r}", step=step)
    loss.backward()
    grads = {}
    for name, p in module.named_parameters():
        if not p.requires_grad:
            continue
        grads[name] = p.grad.detach().clone() if p.grad is not None else torch.zeros_like(p)
    return loss.detach(), grads
