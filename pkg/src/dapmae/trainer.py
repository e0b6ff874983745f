"""Pre-training, fine-tuning, evaluation and the domain linear probe."""

from __future__ import annotations

import json
import logging
import math
from pathlib import Path
from typing import Callable

import numpy as np
import torch

from . import checkpoint as ckpt_io
from .checkpoint import Checkpoint, ModeError
from .config import ConfigError, TrainConfig
from .data import Corpus, make_batches
from .geometry import DomainId
from .hda import ADAPTATION, FUSION
from .model import DTYPES, DapMae, build_model, mask_seed, prepare
from .network import TrainingDivergence

log = logging.getLogger(__name__)


def lr_at(step: int, total_steps: int, warmup_steps: int, peak: float) -> float:
    """Linear warm-up from 0 to ``peak`` over ``warmup_steps``, then cosine decay to 0."""
    if warmup_steps > 0 and step < warmup_steps:
        return peak * step / warmup_steps
    span = max(total_steps - warmup_steps, 1)
    t = min(step - warmup_steps, span) / span
    return 0.5 * peak * (1.0 + math.cos(math.pi * t))


def make_optimizer(model: torch.nn.Module, cfg: TrainConfig) -> torch.optim.AdamW:
    decay, no_decay = [], []
    for name, p in model.named_parameters():
        if not p.requires_grad:
            continue
        is_token = "token" in name.rsplit(".", 1)[-1]
        (decay if p.ndim >= 2 and not is_token else no_decay).append(p)
    groups = [{"params": decay, "weight_decay": cfg.optimizer.weight_decay},
              {"params": no_decay, "weight_decay": 0.0}]
    return torch.optim.AdamW(groups, lr=cfg.optimizer.lr, betas=tuple(cfg.optimizer.betas))


def _metrics_writer(path):
    if path is None:
        return lambda rec: None
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("")

    def write(rec):
        with path.open("a") as fh:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    return write


def _mean(xs):
    return float(np.mean(xs)) if xs else 0.0


def _steps_per_epoch(n: int, batch_size: int) -> int:
    nb = math.ceil(n / batch_size)
    if nb > 1 and n % batch_size == 1:
        nb -= 1
    return nb


def _set_seed(seed: int):
    torch.manual_seed(seed)


def fresh_checkpoint(cfg: TrainConfig) -> Checkpoint:
    """Random-initialized pre-training checkpoint for ``cfg``."""
    cfg = cfg.copy(phase="pretrain")
    _set_seed(cfg.seed)
    model = build_model(cfg)
    return ckpt_io.from_model(model, cfg, "pretrain", 0)


# -- pre-training ---------------------------------------------------------------------

@torch.no_grad()
def recon_eval(model: DapMae, corpus: Corpus, cfg: TrainConfig, batch_size: int | None = None) -> float:
    """Mean reconstruction loss over ``corpus`` with fixed masks, BN in inference mode."""
    was_training = model.training
    model.eval()
    dtype = next(model.parameters()).dtype
    values, weights = [], []
    for bi, batch in enumerate(make_batches(corpus, batch_size or cfg.batch_size, cfg.patch.n_points, cfg.eval_seed)):
        seeds = [mask_seed(cfg.eval_seed, bi, i) for i in range(len(batch))]
        prep = prepare(batch.points, batch.domains, cfg, seeds, dtype=dtype)
        _, l_rec, _ = model.pretrain_forward(prep, cfg.loss)
        values.append(float(l_rec))
        weights.append(len(batch))
    model.train(was_training)
    return float(np.average(values, weights=weights))


def pretrain(
    cfg: TrainConfig,
    corpus: Corpus,
    val_corpus: Corpus | None = None,
    init: Checkpoint | None = None,
    metrics_path=None,
    on_epoch: Callable[[dict], None] | None = None,
) -> tuple[Checkpoint, list[dict]]:
    cfg = cfg.copy(phase="pretrain").validate()
    if len(corpus) == 0:
        raise ConfigError("pre-training corpus is empty", "paths.corpus")
    if len(corpus.domains) < 2:
        log.warning("single-domain corpus: contrastive loss only sees same-domain pairs")
    _set_seed(cfg.seed)
    if init is not None:
        if init.hda_mode == FUSION:
            raise ModeError("refusing to pre-train from a fusion-mode checkpoint")
        model = ckpt_io.restore_model(init, cfg)
        start_epoch = init.epoch
    else:
        model = build_model(cfg)
        start_epoch = 0
    model.train()
    opt = make_optimizer(model, cfg)
    dtype = DTYPES[cfg.precision]

    spe = _steps_per_epoch(len(corpus), cfg.batch_size)
    total = spe * cfg.schedule.epochs
    warm = spe * cfg.schedule.warmup_epochs
    write = _metrics_writer(metrics_path)
    history: list[dict] = []
    step = start_epoch * spe
    for epoch in range(start_epoch, start_epoch + cfg.schedule.epochs):
        rec, con, tot, lr = [], [], [], 0.0
        for bi, batch in enumerate(make_batches(corpus, cfg.batch_size, cfg.patch.n_points, mask_seed(cfg.seed, epoch))):
            seeds = [mask_seed(cfg.seed, epoch, bi, i) for i in range(len(batch))]
            prep = prepare(batch.points, batch.domains, cfg, seeds, dtype=dtype)
            lr = lr_at(step - start_epoch * spe, total, warm, cfg.optimizer.lr)
            for group in opt.param_groups:
                group["lr"] = lr
            opt.zero_grad(set_to_none=True)
            l_total, l_rec, l_con = model.pretrain_forward(prep, cfg.loss)
            if not torch.isfinite(l_total):
                raise TrainingDivergence(
                    f"non-finite pre-training loss at epoch {epoch + 1}, step {step}", step=step,
                    context={"epoch": epoch + 1, "l_rec": float(l_rec.detach()), "l_con": float(l_con.detach())},
                )
            l_total.backward()
            opt.step()
            rec.append(float(l_rec.detach()))
            con.append(float(l_con.detach()))
            tot.append(float(l_total.detach()))
            step += 1
        record = {"epoch": epoch + 1, "l_rec": _mean(rec), "l_con": _mean(con), "l_total": _mean(tot), "lr": lr}
        if val_corpus is not None:
            record["val_l_rec"] = recon_eval(model, val_corpus, cfg)
        history.append(record)
        write(record)
        if on_epoch:
            on_epoch(record)
        log.info("pretrain %s", record)
    return ckpt_io.from_model(model, cfg, "pretrain", start_epoch + cfg.schedule.epochs, history), history


# -- fine-tuning ----------------------------------------------------------------------

def _check_labels(corpus: Corpus, n_classes: int, key: str) -> None:
    if corpus.labels is None:
        raise ConfigError("fine-tuning corpus carries no class labels", key)
    bad = [lab for lab in corpus.labels if not 0 <= lab < n_classes]
    if bad:
        raise ConfigError(f"label {bad[0]} outside [0, {n_classes}) for n_classes={n_classes}", "n_classes")


@torch.no_grad()
def classify(model: DapMae, corpus: Corpus, cfg: TrainConfig, task) -> tuple[float, float]:
    """(accuracy, mean cross-entropy) over ``corpus`` without augmentation."""
    was_training = model.training
    model.eval()
    dtype = next(model.parameters()).dtype
    correct, losses, n = 0, [], 0
    for batch in make_batches(corpus, cfg.batch_size, cfg.patch.n_points, cfg.eval_seed):
        prep = prepare(batch.points, batch.domains, cfg, labels=batch.labels, dtype=dtype)
        loss, logits = model.finetune_forward(prep, task)
        correct += int((logits.argmax(-1) == prep.labels).sum())
        losses.append(float(loss) * len(batch))
        n += len(batch)
    model.train(was_training)
    return correct / n, sum(losses) / n


def finetune(
    cfg: TrainConfig,
    source: Checkpoint,
    corpus: Corpus,
    val_corpus: Corpus | None = None,
    metrics_path=None,
    max_steps: int | None = None,
    on_epoch: Callable[[dict], None] | None = None,
) -> tuple[Checkpoint, list[dict]]:
    cfg = cfg.copy(phase="finetune").validate()
    task = DomainId.parse(cfg.task_domain)
    if source.hda_mode == FUSION and not cfg.allow_fusion_checkpoint:
        raise ModeError("source checkpoint is already in fusion mode; set allow_fusion_checkpoint to override")
    if source.n_classes is not None and not cfg.allow_fusion_checkpoint:
        raise ModeError("source checkpoint is already fine-tuned")
    _check_labels(corpus, cfg.n_classes, "paths.corpus")
    if val_corpus is not None:
        _check_labels(val_corpus, cfg.n_classes, "paths.val_corpus")
    if any(c.domain != task for c in corpus.clouds):
        raise ConfigError(f"fine-tuning corpus contains clouds outside task domain {task.slug}", "task_domain")

    _set_seed(cfg.seed)
    model = ckpt_io.restore_model(source, cfg)
    if model.head is None or model.n_classes != cfg.n_classes:
        model.add_head(cfg.n_classes, cfg.model.head_hidden)
    if model.use_hda and model.hda.mode != FUSION:
        model.set_mode(FUSION, freeze=cfg.freeze_hda)
    model.train()
    opt = make_optimizer(model, cfg)
    dtype = DTYPES[cfg.precision]

    spe = _steps_per_epoch(len(corpus), cfg.batch_size)
    total = spe * cfg.schedule.epochs
    warm = spe * cfg.schedule.warmup_epochs
    write = _metrics_writer(metrics_path)
    history: list[dict] = []
    step = 0
    for epoch in range(cfg.schedule.epochs):
        losses, correct, seen, lr = [], 0, 0, 0.0
        batches = make_batches(corpus, cfg.batch_size, cfg.patch.n_points, mask_seed(cfg.seed, epoch), augment_points=cfg.augment)
        for batch in batches:
            if max_steps is not None and step >= max_steps:
                break
            prep = prepare(batch.points, batch.domains, cfg, labels=batch.labels, dtype=dtype)
            lr = lr_at(step, total, warm, cfg.optimizer.lr)
            for group in opt.param_groups:
                group["lr"] = lr
            opt.zero_grad(set_to_none=True)
            loss, logits = model.finetune_forward(prep, task)
            if not torch.isfinite(loss):
                raise TrainingDivergence(f"non-finite fine-tuning loss at epoch {epoch + 1}, step {step}",
                                         step=step, context={"epoch": epoch + 1})
            loss.backward()
            opt.step()
            losses.append(float(loss.detach()) * len(batch))
            correct += int((logits.argmax(-1) == prep.labels).sum())
            seen += len(batch)
            step += 1
        if seen == 0:
            break
        record = {"epoch": epoch + 1, "loss": sum(losses) / seen, "accuracy": correct / seen, "lr": lr}
        if val_corpus is not None:
            record["val_accuracy"], record["val_loss"] = classify(model, val_corpus, cfg, task)
        history.append(record)
        write(record)
        if on_epoch:
            on_epoch(record)
        log.info("finetune %s", record)
    return ckpt_io.from_model(model, cfg, "finetune", len(history), history), history


# -- evaluation -----------------------------------------------------------------------

@torch.no_grad()
def domain_features(model: DapMae, corpus: Corpus, cfg: TrainConfig) -> tuple[np.ndarray, np.ndarray]:
    """DFG domain features (one row per cloud) and integer domain labels.

    Adaptation-mode checkpoints use the pre-training path (visible patches under a fixed
    mask); fine-tuned checkpoints use the full-token fine-tuning path.
    """
    if not model.use_dfg:
        raise ConfigError("model has no domain feature generator", "use_dfg")
    was_training = model.training
    model.eval()
    dtype = next(model.parameters()).dtype
    feats, labels = [], []
    for bi, batch in enumerate(make_batches(corpus, cfg.batch_size, cfg.patch.n_points, cfg.eval_seed)):
        if model.hda_mode == FUSION:
            prep = prepare(batch.points, batch.domains, cfg, dtype=dtype)
            f = model.encode_full(prep, cfg.task_domain)
            d = model.dfg(f, prep.domains)[1]
        else:
            seeds = [mask_seed(cfg.eval_seed, bi, i) for i in range(len(batch))]
            prep = prepare(batch.points, batch.domains, cfg, seeds, dtype=dtype)
            d = model.pretrain_domain_features(prep)
        feats.append(d.double().numpy())
        labels.extend(int(x) for x in batch.domains)
    model.train(was_training)
    return np.concatenate(feats), np.asarray(labels)


def fit_linear_probe(x: np.ndarray, y: np.ndarray, n_classes: int = 3) -> np.ndarray:
    """Closed-form least-squares one-vs-all linear classifier; returns weights incl. bias row."""
    xb = np.hstack([x, np.ones((x.shape[0], 1))])
    target = np.eye(n_classes)[y]
    w, *_ = np.linalg.lstsq(xb, target, rcond=None)
    return w


def probe_predict(w: np.ndarray, x: np.ndarray) -> np.ndarray:
    return (np.hstack([x, np.ones((x.shape[0], 1))]) @ w).argmax(axis=1)


def domain_probe(model: DapMae, train: Corpus, test: Corpus, cfg: TrainConfig) -> float:
    xtr, ytr = domain_features(model, train, cfg)
    xte, yte = domain_features(model, test, cfg)
    w = fit_linear_probe(xtr, ytr, len(DomainId))
    return float((probe_predict(w, xte) == yte).mean())


def evaluate(
    ckpt: Checkpoint,
    corpus: Corpus,
    probe_train: Corpus | None = None,
    want_accuracy: bool | None = None,
    cfg: TrainConfig | None = None,
) -> dict:
    """Deterministic metrics for ``ckpt`` on ``corpus``.

    Reports ``accuracy`` for fine-tuned checkpoints, ``l_rec`` for adaptation-mode ones,
    and ``probe_accuracy`` when the model has a DFG and the corpus spans several domains.
    Without ``probe_train`` the corpus is split in half (even/odd positions per domain).
    """
    cfg = cfg or ckpt.train_config
    model = ckpt_io.restore_model(ckpt, cfg)
    model.eval()
    metrics: dict = {"phase": ckpt.phase, "hda_mode": ckpt.hda_mode, "n": len(corpus)}
    if want_accuracy is None:
        want_accuracy = ckpt.n_classes is not None
    if want_accuracy:
        if corpus.labels is None:
            raise ConfigError("accuracy requested but the corpus has no labels", "paths.corpus")
        if ckpt.n_classes is None:
            raise ConfigError("accuracy requested but the checkpoint has no classification head", "paths.checkpoint_in")
        task = cfg.task_domain or DomainId(corpus.clouds[0].domain).slug
        metrics["accuracy"], metrics["loss"] = classify(model, corpus, cfg, task)
    if model.hda_mode != FUSION:
        metrics["l_rec"] = recon_eval(model, corpus, cfg)
    if model.use_dfg and (probe_train is not None or len(corpus.domains) >= 2):
        if probe_train is None:
            probe_train, corpus = split_alternate(corpus)
        metrics["probe_accuracy"] = domain_probe(model, probe_train, corpus, cfg)
    return metrics


def split_alternate(corpus: Corpus) -> tuple[Corpus, Corpus]:
    a = [i for i in range(len(corpus)) if i % 2 == 0]
    b = [i for i in range(len(corpus)) if i % 2 == 1]

    def pick(idx):
        labels = [corpus.labels[i] for i in idx] if corpus.labels is not None else None
        return Corpus([corpus.clouds[i] for i in idx], labels)
    return pick(a), pick(b)
