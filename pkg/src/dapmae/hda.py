"""Heterogeneous domain adapter.

Three parallel FC -> BN -> ReLU -> FC branches, one per domain. In adaptation mode a
token is routed through its own domain's branch. In fusion mode the branches are frozen
and their outputs are combined per token with nonnegative coefficients produced by two
small trainable MLPs, once after the first FC and once after the second.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .geometry import DomainId

ADAPTATION = "adaptation"
FUSION = "fusion"
BN_MOMENTUM = 0.1
BN_EPS = 1e-5


class AdapterStateError(RuntimeError):
    pass


class Branch(nn.Module):
    def __init__(self, d_in: int, hidden: int, d_out: int):
        super().__init__()
        self.fc1 = nn.Linear(d_in, hidden)
        self.bn = nn.BatchNorm1d(hidden, eps=BN_EPS, momentum=BN_MOMENTUM)
        self.fc2 = nn.Linear(hidden, d_out)

    def norm(self, x: torch.Tensor, training: bool) -> torch.Tensor:
        # rows are (batch x patches); token width is the channel axis
        return F.batch_norm(
            x, self.bn.running_mean, self.bn.running_var, self.bn.weight, self.bn.bias,
            training=training, momentum=BN_MOMENTUM, eps=BN_EPS,
        )

    def forward(self, x: torch.Tensor, training: bool) -> torch.Tensor:
        return self.fc2(F.relu(self.norm(self.fc1(x), training)))


class CoefficientMLP(nn.Module):
    """linear -> ReLU -> linear -> ReLU, two nonnegative coefficients per token."""

    def __init__(self, d_in: int, hidden: int):
        super().__init__()
        self.fc1 = nn.Linear(d_in, hidden)
        self.fc2 = nn.Linear(hidden, 2)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return F.relu(self.fc2(F.relu(self.fc1(x))))


@dataclass
class FusionTrace:
    stage1_branches: dict[DomainId, torch.Tensor]
    stage1_coef: torch.Tensor
    stage1: torch.Tensor
    stage2_branches: dict[DomainId, torch.Tensor]
    stage2_coef: torch.Tensor
    output: torch.Tensor
    aux_domains: tuple[DomainId, DomainId]


def aux_domains(task: DomainId) -> tuple[DomainId, DomainId]:
    a, b = (d for d in DomainId if d != task)
    return a, b


class HDA(nn.Module):
    def __init__(self, d_in: int, hidden: int, d_out: int, coef_hidden: int = 64):
        super().__init__()
        self.branches = nn.ModuleDict({d.slug: Branch(d_in, hidden, d_out) for d in DomainId})
        self.mlp1 = CoefficientMLP(d_in, coef_hidden)
        self.mlp2 = CoefficientMLP(hidden, coef_hidden)
        self.mode = ADAPTATION
        self.require_frozen = True
        for m in self.modules():
            if isinstance(m, nn.Linear):
                nn.init.normal_(m.weight, 0.0, 0.02)
                nn.init.zeros_(m.bias)

    def branch(self, domain) -> Branch:
        return self.branches[DomainId.parse(domain).slug]

    def branch_parameters(self):
        for b in self.branches.values():
            yield from b.parameters()

    def set_mode(self, mode: str) -> None:
        if mode == FUSION:
            for p in self.branch_parameters():
                p.requires_grad_(False)
        elif mode == ADAPTATION:
            for p in self.branch_parameters():
                p.requires_grad_(True)
            self.require_frozen = True
        else:
            raise ValueError(f"unknown adapter mode {mode!r}")
        self.mode = mode

    def adapt(self, tokens: torch.Tensor, domains, training: bool | None = None) -> torch.Tensor:
        """Route ``tokens`` of shape (B, N, D_in) through the branch of each cloud's domain.

        BN statistics are computed over each routed sub-batch separately.
        """
        if self.mode != ADAPTATION:
            raise AdapterStateError(f"adapt called in {self.mode} mode")
        if training is None:
            training = self.training
        b, n, _ = tokens.shape
        dom = torch.as_tensor([int(d) for d in _domain_list(domains, b)])
        out = None
        for d in DomainId:
            sel = (dom == int(d)).nonzero().flatten()
            if sel.numel() == 0:
                continue
            rows = tokens[sel].reshape(sel.numel() * n, -1)
            y = self.branch(d)(rows, training).reshape(sel.numel(), n, -1)
            if out is None:
                out = tokens.new_zeros(b, n, y.shape[-1])
            out = out.index_copy(0, sel, y)
        return out

    def fuse(self, tokens: torch.Tensor, task_domain) -> tuple[torch.Tensor, FusionTrace]:
        if self.mode != FUSION:
            raise AdapterStateError(f"fuse called in {self.mode} mode")
        if self.require_frozen and any(p.requires_grad for p in self.branch_parameters()):
            raise AdapterStateError("fusion mode requires frozen branch FC/BN parameters")
        task = DomainId.parse(task_domain)
        aux = aux_domains(task)

        s1 = {d: self.branch(d).fc1(tokens) for d in DomainId}
        a1 = self.mlp1(tokens)
        to1 = s1[task] + a1[..., 0:1] * s1[aux[0]] + a1[..., 1:2] * s1[aux[1]]

        shape = to1.shape
        u = self.branch(task).norm(to1.reshape(-1, shape[-1]), training=False)
        u = F.relu(u).reshape(shape)
        s2 = {d: self.branch(d).fc2(u) for d in DomainId}
        a2 = self.mlp2(to1)
        out = s2[task] + a2[..., 0:1] * s2[aux[0]] + a2[..., 1:2] * s2[aux[1]]
        return out, FusionTrace(s1, a1, to1, s2, a2, out, aux)

    def forward(self, tokens: torch.Tensor, domains, task_domain=None) -> torch.Tensor:
        if self.mode == ADAPTATION:
            return self.adapt(tokens, domains)
        return self.fuse(tokens, task_domain if task_domain is not None else _domain_list(domains, 1)[0])[0]


class SharedAdapter(nn.Module):
    """Single branch of identical shape for ablations without domain routing."""

    def __init__(self, d_in: int, hidden: int, d_out: int):
        super().__init__()
        self.shared = Branch(d_in, hidden, d_out)
        nn.init.normal_(self.shared.fc1.weight, 0.0, 0.02)
        nn.init.zeros_(self.shared.fc1.bias)
        nn.init.normal_(self.shared.fc2.weight, 0.0, 0.02)
        nn.init.zeros_(self.shared.fc2.bias)
        self.mode = "shared"

    def set_mode(self, mode: str) -> None:
        pass

    def forward(self, tokens: torch.Tensor, domains=None, task_domain=None) -> torch.Tensor:
        b, n, _ = tokens.shape
        return self.shared(tokens.reshape(b * n, -1), self.training).reshape(b, n, -1)


def _domain_list(domains, b: int) -> list[DomainId]:
    if isinstance(domains, (int, DomainId, str)):
        return [DomainId.parse(domains)] * b
    out = [DomainId.parse(d) for d in domains]
    if len(out) != b:
        raise ValueError(f"got {len(out)} domain labels for a batch of {b}")
    return out
