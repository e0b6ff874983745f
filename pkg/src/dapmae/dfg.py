"""Domain feature generator and feature pooling."""

from __future__ import annotations

import math

import torch
import torch.nn as nn

from .geometry import DomainId


class DFG(nn.Module):
    """A class token and one token per domain, queried against encoder features.

    Queries are ``[class_token, domain_tokens[d]]``; one multi-head cross-attention
    application yields the class feature ``c`` (row 0) and domain feature ``d`` (row 1).
    """

    def __init__(self, dim: int, heads: int):
        super().__init__()
        if dim % heads:
            raise ValueError(f"width {dim} is not divisible by {heads} heads")
        self.heads = heads
        self.class_token = nn.Parameter(torch.zeros(dim))
        self.domain_tokens = nn.Parameter(torch.zeros(len(DomainId), dim))
        self.fc_q = nn.Linear(dim, dim)
        self.fc_k = nn.Linear(dim, dim)
        self.fc_v = nn.Linear(dim, dim)
        for p in (self.class_token, self.domain_tokens):
            nn.init.normal_(p, 0.0, 0.02)
        for fc in (self.fc_q, self.fc_k, self.fc_v):
            nn.init.normal_(fc.weight, 0.0, 0.02)
            nn.init.zeros_(fc.bias)
        self.last_weights: torch.Tensor | None = None

    def forward(self, features: torch.Tensor, domains) -> tuple[torch.Tensor, torch.Tensor]:
        """features: (B, N, D); domains: one label per cloud. Returns c, d of shape (B, D)."""
        b, n, dim = features.shape
        if n == 0:
            raise ValueError("domain feature generator needs at least one feature row")
        idx = torch.as_tensor([int(DomainId.parse(x)) for x in domains])
        if idx.numel() != b:
            raise ValueError(f"got {idx.numel()} domain labels for a batch of {b}")
        queries = torch.stack([self.class_token.expand(b, dim), self.domain_tokens[idx]], dim=1)

        h, dk = self.heads, dim // self.heads
        q = self.fc_q(queries).reshape(b, 2, h, dk).transpose(1, 2)
        k = self.fc_k(features).reshape(b, n, h, dk).transpose(1, 2)
        v = self.fc_v(features).reshape(b, n, h, dk).transpose(1, 2)
        attn = torch.softmax(q @ k.transpose(-2, -1) / math.sqrt(dk), dim=-1)
        self.last_weights = attn.detach()
        out = (attn @ v).transpose(1, 2).reshape(b, 2, dim)
        return out[:, 0], out[:, 1]


def pool_features(features: torch.Tensor) -> torch.Tensor:
    """Mean-pool concatenated with coordinate-wise max-pool over the row axis."""
    if features.shape[-2] == 0:
        raise ValueError("cannot pool an empty feature set")
    return torch.cat([features.mean(dim=-2), features.max(dim=-2).values], dim=-1)
