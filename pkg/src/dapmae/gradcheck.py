"""Central finite differences against reverse-mode gradients, block by block.

Two losses are probed: the pre-training loss (adaptation mode, masked reconstruction plus
domain contrastive term over one cloud per domain) and the fine-tuning loss (fusion mode,
cross-entropy through the classification head). Together they reach every trainable block.
"""

from __future__ import annotations

import copy
import fnmatch
import json
from dataclasses import asdict, dataclass, field
from typing import Callable, Iterable

import numpy as np
import torch

from .config import TrainConfig, tiny_config
from .data import gen_synthetic
from .geometry import DomainId, normalize_cloud
from .hda import FUSION
from .losses import cosine_matrix
from .model import DapMae, build_model, gather_rows, mask_seed, prepare

LOSSES = ("pretrain", "finetune")
OK, FAIL, NO_GRADIENT, UNREACHED = "ok", "fail", "no gradient", "unreached"


@dataclass
class BlockResult:
    loss: str
    block: str
    n_params: int
    status: str
    max_rel_err: float | None = None
    max_abs_grad: float | None = None


@dataclass
class GradcheckReport:
    tolerance: float
    step: float
    results: list[BlockResult] = field(default_factory=list)

    @property
    def failures(self) -> list[BlockResult]:
        return [r for r in self.results if r.status == FAIL]

    @property
    def passed(self) -> bool:
        return not self.failures

    @property
    def max_rel_err(self) -> float:
        errs = [r.max_rel_err for r in self.results if r.max_rel_err is not None]
        return max(errs) if errs else 0.0

    def status_of(self, block: str, loss: str | None = None) -> list[str]:
        return [r.status for r in self.results if r.block == block and (loss is None or r.loss == loss)]

    def to_dict(self) -> dict:
        return {
            "passed": self.passed, "tolerance": self.tolerance, "step": self.step,
            "max_rel_err": self.max_rel_err, "failures": [r.block for r in self.failures],
            "blocks": [asdict(r) for r in self.results],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def to_text(self) -> str:
        lines = []
        for r in self.results:
            err = "-" if r.max_rel_err is None else f"{r.max_rel_err:.3e}"
            lines.append(f"{r.loss:9s} {r.block:40s} {r.n_params:6d} {err:>10s}  {r.status}")
        verdict = "PASS" if self.passed else "FAIL " + ", ".join(r.block for r in self.failures)
        lines.append(f"max relative error {self.max_rel_err:.3e} (tolerance {self.tolerance:g}): {verdict}")
        return "\n".join(lines)


def block_of(path: str) -> str:
    head, _, last = path.rpartition(".")
    return head if last in ("weight", "bias") and head else path


def _selected(path: str, patterns: Iterable[str] | None) -> bool:
    if not patterns:
        return True
    block = block_of(path)
    for pat in patterns:
        if path == pat or block == pat or path.startswith(pat + ".") or fnmatch.fnmatch(block, pat):
            return True
    return False


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-10) -> float:
    """Block-wise infinity-norm relative error."""
    scale = max(float(np.abs(analytic).max(initial=0.0)), float(np.abs(numeric).max(initial=0.0)), floor)
    return float(np.abs(analytic - numeric).max(initial=0.0)) / scale


def _randomize(model: torch.nn.Module, seed: int, scale: float) -> None:
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for name, p in model.named_parameters():
            if name.endswith("bn.weight") or name.endswith("norm1.weight") or name.endswith("norm2.weight") \
                    or name.endswith("norm.weight"):
                p.copy_(1.0 + scale * torch.randn(p.shape, generator=g, dtype=p.dtype))
            else:
                p.copy_(scale * torch.randn(p.shape, generator=g, dtype=p.dtype))


def _probe_points(cfg: TrainConfig, domains, seed: int) -> np.ndarray:
    return np.stack([
        normalize_cloud(gen_synthetic(d, seed + i, cfg.patch.n_points)).points for i, d in enumerate(domains)
    ])


def _top2_gap(x: torch.Tensor, dim: int) -> float:
    if x.shape[dim] < 2:
        return float("inf")
    s = x.sort(dim=dim).values
    top, second = s.select(dim, -1), s.select(dim, -2)
    return float((top - second).min())


@torch.no_grad()
def kink_margin(model: DapMae, prep, finetune: bool, task=None, loss_cfg=None) -> float:
    """Smallest distance from the evaluation point to a max/min switch or a hinge.

    Covers the patch-embedding max over points, pooled max over tokens, chamfer
    nearest-neighbour choices, the rectifiers of the adapter and coefficient MLPs, and
    the contrastive hinge.
    """
    pe = model.patch_embed
    x = prep.patches if finetune else gather_rows(prep.patches, prep.vis_idx)
    feats = pe.point_fc2(torch.nn.functional.gelu(pe.point_fc1(x)))
    margins = [_top2_gap(feats, -2)]
    tokens0 = pe(x)
    if finetune:
        hda = model.hda
        margins.append(float(hda.mlp1.fc1(tokens0).abs().min()))
        margins.append(float(hda.mlp1.fc2(torch.relu(hda.mlp1.fc1(tokens0))).abs().min()))
        _, tr = hda.fuse(tokens0, task)
        pre_u = hda.branch(task).norm(tr.stage1.reshape(-1, tr.stage1.shape[-1]), training=False)
        margins.append(float(pre_u.abs().min()))
        margins.append(float(hda.mlp2.fc1(tr.stage1).abs().min()))
        margins.append(float(hda.mlp2.fc2(torch.relu(hda.mlp2.fc1(tr.stage1))).abs().min()))
        f = model.encode_full(prep, task)
        margins.append(_top2_gap(f, -2))
        hin = model.head_input(prep, task)
        margins.append(float(model.head.fc1(hin).abs().min()))
    else:
        for d in DomainId:
            sel = [i for i, v in enumerate(prep.domains) if v == d]
            if sel:
                br = model.hda.branch(d)
                rows = tokens0[sel].reshape(-1, tokens0.shape[-1])
                margins.append(float(br.norm(br.fc1(rows), training=True).abs().min()))
        f_vis, pos_vis, pos_mask = model.encode_visible(prep)
        pred = model.decoder(f_vis, pos_vis, pos_mask)
        gt = gather_rows(prep.patches, prep.mask_idx)
        dist = ((pred.unsqueeze(-2) - gt.unsqueeze(-3)) ** 2).sum(-1)
        margins.append(_top2_gap(-dist, -1))
        margins.append(_top2_gap(-dist, -2))
        _, dfeat = model.dfg(f_vis, prep.domains)
        cos, _ = cosine_matrix(dfeat)
        lab = torch.as_tensor([int(v) for v in prep.domains])
        cross = lab[:, None] != lab[None, :]
        if cross.any():
            margins.append(float((cos - loss_cfg.margin)[cross].abs().min()))
    return min(margins)


def build_problems(cfg: TrainConfig, seed: int = 0, scale: float = 0.3, min_margin: float = 1e-3,
                   max_tries: int = 200) -> dict[str, tuple[DapMae, Callable]]:
    """Models and zero-argument loss closures for both losses.

    Probe clouds are drawn from successive seeds until the evaluation point sits at least
    ``min_margin`` away from every non-differentiable switch, so that central
    differences measure a derivative rather than a kink.
    """
    b = cfg.batch_size
    base = build_model(cfg)
    base.add_head(cfg.n_classes, cfg.model.head_hidden)
    _randomize(base, seed, scale)
    if base.use_hda:
        with torch.no_grad():
            for mlp in (base.hda.mlp1, base.hda.mlp2):
                # keep the rectified coefficients mostly active
                mlp.fc1.bias.abs_().add_(0.5)
                mlp.fc2.bias.fill_(1.0)
    base.train()
    problems = {}

    pre = copy.deepcopy(base)
    doms = [list(DomainId)[i % 3] for i in range(b)]
    for j in range(max_tries):
        prep = prepare(_probe_points(cfg, doms, seed + 1000 * j), doms, cfg,
                       [mask_seed(seed, j, i) for i in range(b)], dtype=torch.float64)
        if kink_margin(pre, prep, False, loss_cfg=cfg.loss) >= min_margin:
            break
    else:
        raise RuntimeError("no smooth pre-training probe found")
    problems["pretrain"] = (pre, lambda: pre.pretrain_forward(prep, cfg.loss)[0])

    fin = copy.deepcopy(base)
    fin.set_mode(FUSION, freeze=cfg.freeze_hda)
    task = DomainId.parse(cfg.task_domain or "object")
    labels = [i % cfg.n_classes for i in range(b)]
    for j in range(max_tries):
        fprep = prepare(_probe_points(cfg, [task] * b, seed + 1000 * j + 500), [task] * b, cfg,
                        labels=labels, dtype=torch.float64)
        if kink_margin(fin, fprep, True, task=task) >= min_margin:
            break
    else:
        raise RuntimeError("no smooth fine-tuning probe found")
    problems["finetune"] = (fin, lambda: fin.finetune_forward(fprep, task)[0])
    return problems


def check_module(
    loss_name: str,
    model: torch.nn.Module,
    loss_fn: Callable[[], torch.Tensor],
    components: Iterable[str] | None = None,
    step: float = 1e-4,
    tolerance: float = 1e-5,
) -> list[BlockResult]:
    named = [(n, p) for n, p in model.named_parameters() if _selected(n, components)]
    trainable = [(n, p) for n, p in named if p.requires_grad]
    params = [p for _, p in trainable]
    loss = loss_fn()
    grads = torch.autograd.grad(loss, params, allow_unused=True) if params else []
    analytic = {n: g for (n, _), g in zip(trainable, grads)}

    per_block: dict[str, dict] = {}
    for n, p in named:
        blk = per_block.setdefault(block_of(n), {"n": 0, "frozen": 0, "reached": 0, "a": [], "num": []})
        blk["n"] += p.numel()
        if not p.requires_grad:
            blk["frozen"] += 1
            continue
        g = analytic[n]
        if g is None:
            continue
        blk["reached"] += 1
        flat = p.data.view(-1)
        numeric = np.empty(flat.numel())
        with torch.no_grad():
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + step
                up = loss_fn().item()
                flat[i] = orig - step
                down = loss_fn().item()
                flat[i] = orig
                numeric[i] = (up - down) / (2 * step)
        blk["a"].append(g.detach().reshape(-1).numpy())
        blk["num"].append(numeric)

    results = []
    for name, blk in per_block.items():
        if blk["frozen"] and not blk["reached"]:
            results.append(BlockResult(loss_name, name, blk["n"], NO_GRADIENT))
        elif not blk["reached"]:
            results.append(BlockResult(loss_name, name, blk["n"], UNREACHED))
        else:
            a, num = np.concatenate(blk["a"]), np.concatenate(blk["num"])
            err = relative_error(a, num)
            status = OK if err <= tolerance else FAIL
            results.append(BlockResult(loss_name, name, blk["n"], status, err, float(np.abs(a).max())))
    return results


def grad_check(
    cfg: TrainConfig | None = None,
    components: Iterable[str] | None = None,
    losses: Iterable[str] = LOSSES,
    step: float = 1e-4,
    tolerance: float = 1e-5,
    seed: int = 0,
    instrument: Callable[[str, DapMae], None] | None = None,
) -> GradcheckReport:
    """Finite-difference check of every selected block under each requested loss.

    ``instrument(loss_name, model)`` runs after the models are built; tests use it to
    corrupt a gradient or freeze a block.
    """
    cfg = (cfg or tiny_config()).copy(precision="float64")
    cfg.model.drop_path = 0.0
    unknown = set(losses) - set(LOSSES)
    if unknown:
        raise ValueError(f"unknown loss {sorted(unknown)[0]!r}; expected one of {LOSSES}")
    report = GradcheckReport(tolerance=tolerance, step=step)
    problems = build_problems(cfg, seed)
    for name in losses:
        model, fn = problems[name]
        if instrument is not None:
            instrument(name, model)
        report.results.extend(check_module(name, model, fn, components, step, tolerance))
    return report
