"""Training loop for the retention classifier.

Adam (beta1=0.9, beta2=0.999, eps=1e-8) with cosine learning-rate decay
lr(t) = lr0 * (1 + cos(pi * t / T)) / 2 over the total step count. Density
weights are recomputed every step from the current batch (optionally per
sample) and frozen for that step's gradient. The checkpoint returned is the
one with the lowest validation total loss; validation is a 10% split chosen
by a stable hash of the sample id.
"""

from __future__ import annotations

import csv
import math
import random
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from evocomp.core import DataError, LabelRecord, Sample
from evocomp.compressor.model import (
    CompressorConfig,
    CompressorParams,
    adapt_dim,
    backward_tokens,
    forward_tokens,
    init_params,
)
from evocomp.hashing import split_bucket
from evocomp.losses import (
    GhmConfig,
    GhmState,
    LossBatch,
    bce_elementwise,
    cs_grad_reps,
    cs_loss,
    focal_grad_probs,
    focal_loss,
    ghm_weights,
    gradient_norms,
)

ADAM_B1 = 0.9
ADAM_B2 = 0.999
ADAM_EPS = 1e-8

BASE_LOSSES = ("ghm", "ce", "focal")


@dataclass
class StepRow:
    epoch: int
    step: int
    ghm: float
    cs: float
    total: float
    lr: float


@dataclass
class TrainResult:
    params: CompressorParams
    history: list[StepRow]
    val_history: list[tuple[int, float]]
    best_epoch: int
    train_ids: list[str] = field(default_factory=list)
    val_ids: list[str] = field(default_factory=list)


@dataclass
class _Item:
    sample_id: str
    visual: np.ndarray
    text: np.ndarray
    labels: np.ndarray


def _prepare(
    samples: list[Sample],
    labels: list[LabelRecord] | dict[str, LabelRecord],
    cfg: CompressorConfig,
    no_text: bool,
) -> list[_Item]:
    by_id = labels if isinstance(labels, dict) else {r.sample_id: r for r in labels}
    items = []
    for sample in samples:
        record = by_id.get(sample.id)
        if record is None:
            raise DataError(f"no label for sample {sample.id!r}")
        if record.mask.n != sample.n:
            raise DataError(
                f"label mask length {record.mask.n} != token count {sample.n} for {sample.id!r}"
            )
        visual = np.asarray(sample.visual, dtype=np.float64)
        text = np.asarray(sample.text, dtype=np.float64)
        if visual.shape[1] != cfg.d_model:
            visual = adapt_dim(visual, cfg.d_model)
            text = adapt_dim(text, cfg.d_model) if text.shape[0] else np.zeros((0, cfg.d_model))
        if no_text:
            text = np.zeros((0, cfg.d_model))
        items.append(
            _Item(
                sample_id=sample.id,
                visual=visual,
                text=text,
                labels=np.asarray(record.mask.bits, dtype=np.float64),
            )
        )
    return items


def _base_grad_probs_scaled(
    probs: np.ndarray,
    labels: np.ndarray,
    beta: np.ndarray | None,
    base_loss: str,
    n_total: int,
    focal_gamma: float,
    focal_alpha: float,
) -> np.ndarray:
    """d(base loss)/d(logits) for one sample's tokens, already divided by the
    pooled token count."""
    if base_loss == "ghm":
        return beta * (probs - labels) / n_total
    if base_loss == "ce":
        return (probs - labels) / n_total
    batch = LossBatch(probs=probs, labels=labels)
    d_probs = focal_grad_probs(batch, gamma=focal_gamma, alpha_f=focal_alpha) * batch.n / n_total
    return d_probs * probs * (1.0 - probs)


def _base_value(
    probs: np.ndarray,
    labels: np.ndarray,
    beta: np.ndarray | None,
    base_loss: str,
    focal_gamma: float,
    focal_alpha: float,
) -> float:
    if base_loss == "ghm":
        return float(np.mean(beta * bce_elementwise(probs, labels)))
    batch = LossBatch(probs=probs, labels=labels)
    if base_loss == "ce":
        return float(np.mean(bce_elementwise(batch.probs, batch.labels)))
    return focal_loss(batch, gamma=focal_gamma, alpha_f=focal_alpha)


def _objective(
    items: list[_Item],
    params: CompressorParams,
    cfg: CompressorConfig,
    base_loss: str,
    use_cs: bool,
    focal_gamma: float,
    focal_alpha: float,
) -> float:
    """Evaluation-time objective over a set of samples (pooled density)."""
    probs_parts, label_parts, cs_values = [], [], []
    for item in items:
        out = forward_tokens(item.visual, item.text, params, cfg)
        probs_parts.append(out.probs)
        label_parts.append(item.labels)
        if use_cs and cfg.alpha != 0.0:
            cs_values.append(
                cs_loss(LossBatch(probs=out.probs, labels=item.labels, reps=out.visual_reps))
            )
    probs = np.concatenate(probs_parts)
    labels = np.concatenate(label_parts)
    beta = None
    if base_loss == "ghm":
        beta = ghm_weights(gradient_norms(probs, labels), cfg.ghm)
    value = _base_value(probs, labels, beta, base_loss, focal_gamma, focal_alpha)
    if cs_values:
        value += cfg.alpha * float(np.mean(cs_values))
    return value


def train(
    samples: list[Sample],
    labels: list[LabelRecord] | dict[str, LabelRecord],
    cfg: CompressorConfig,
    base_loss: str = "ghm",
    use_cs: bool = True,
    focal_gamma: float = 2.0,
    focal_alpha: float = 0.25,
    density_scope: str = "batch",
    donor: str | Path | CompressorParams | None = None,
    no_text: bool = False,
    log_fn=None,
) -> TrainResult:
    if base_loss not in BASE_LOSSES:
        raise DataError(f"unknown base loss {base_loss!r}")
    if density_scope not in ("batch", "sample"):
        raise DataError(f"unknown density scope {density_scope!r}")
    items = _prepare(samples, labels, cfg, no_text)

    val_items = [it for it in items if split_bucket(it.sample_id) == 0]
    train_items = [it for it in items if split_bucket(it.sample_id) != 0]
    if not train_items:
        raise DataError("validation split consumed every sample; need more data")
    if not val_items:
        val_items = train_items  # tiny datasets: select on training loss

    shuffle_rng = random.Random(cfg.seed)
    params = init_params(cfg, donor=donor, rng=np.random.default_rng(cfg.seed))
    adam_m = params.zero_like()
    adam_v = params.zero_like()
    ghm_state = GhmState() if cfg.ghm.momentum > 0.0 else None

    n_batches = math.ceil(len(train_items) / cfg.batch_size)
    total_steps = cfg.epochs * n_batches
    history: list[StepRow] = []
    val_history: list[tuple[int, float]] = []
    best_val = math.inf
    best_epoch = -1
    best_params = params.copy()
    step = 0
    adam_t = 0

    for epoch in range(cfg.epochs):
        order = list(range(len(train_items)))
        shuffle_rng.shuffle(order)
        for start in range(0, len(order), cfg.batch_size):
            batch = [train_items[i] for i in order[start : start + cfg.batch_size]]
            lr = cfg.lr0 * 0.5 * (1.0 + math.cos(math.pi * step / total_steps))

            forwards = []
            for item in batch:
                out, cache = forward_tokens(item.visual, item.text, params, cfg, with_cache=True)
                forwards.append((item, out, cache))
            pooled_probs = np.concatenate([o.probs for _, o, _ in forwards])
            pooled_labels = np.concatenate([it.labels for it, _, _ in forwards])
            n_total = pooled_probs.shape[0]

            betas: list[np.ndarray | None] = [None] * len(forwards)
            if base_loss == "ghm":
                if density_scope == "batch":
                    beta_all = ghm_weights(
                        gradient_norms(pooled_probs, pooled_labels), cfg.ghm, state=ghm_state
                    )
                    offset = 0
                    for i, (item, _, _) in enumerate(forwards):
                        betas[i] = beta_all[offset : offset + item.labels.shape[0]]
                        offset += item.labels.shape[0]
                else:
                    for i, (item, out, _) in enumerate(forwards):
                        betas[i] = ghm_weights(gradient_norms(out.probs, item.labels), cfg.ghm)

            grads = params.zero_like()
            cs_values = []
            base_values = []
            for i, (item, out, cache) in enumerate(forwards):
                n_norm = n_total if density_scope == "batch" else item.labels.shape[0] * len(forwards)
                d_logits = _base_grad_probs_scaled(
                    out.probs, item.labels, betas[i], base_loss, n_norm, focal_gamma, focal_alpha
                )
                d_reps = np.zeros_like(cache["out"])
                if use_cs and cfg.alpha != 0.0:
                    lb = LossBatch(probs=out.probs, labels=item.labels, reps=out.visual_reps)
                    cs_values.append(cs_loss(lb))
                    d_reps[: item.labels.shape[0]] = (
                        cfg.alpha / len(forwards)
                    ) * cs_grad_reps(lb)
                sample_grads = backward_tokens(params, cfg, cache, d_reps, d_logits)
                for name, g in sample_grads.items():
                    grads[name] += g

            if density_scope == "batch":
                base_value = _base_value(
                    pooled_probs,
                    pooled_labels,
                    np.concatenate(betas) if base_loss == "ghm" else None,
                    base_loss,
                    focal_gamma,
                    focal_alpha,
                )
            else:
                base_value = float(
                    np.mean(
                        [
                            _base_value(o.probs, it.labels, betas[i], base_loss, focal_gamma, focal_alpha)
                            for i, (it, o, _) in enumerate(forwards)
                        ]
                    )
                )
            cs_value = float(np.mean(cs_values)) if cs_values else 0.0
            total = base_value + (cfg.alpha * cs_value if use_cs else 0.0)
            if not math.isfinite(total):
                raise DataError(f"non-finite loss at epoch {epoch} step {step}")

            adam_t += 1
            pd = params.as_dict()
            for name, g in grads.items():
                adam_m[name] = ADAM_B1 * adam_m[name] + (1.0 - ADAM_B1) * g
                adam_v[name] = ADAM_B2 * adam_v[name] + (1.0 - ADAM_B2) * g * g
                m_hat = adam_m[name] / (1.0 - ADAM_B1**adam_t)
                v_hat = adam_v[name] / (1.0 - ADAM_B2**adam_t)
                pd[name] -= lr * m_hat / (np.sqrt(v_hat) + ADAM_EPS)

            history.append(StepRow(epoch=epoch, step=step, ghm=base_value, cs=cs_value, total=total, lr=lr))
            step += 1

        val_total = _objective(val_items, params, cfg, base_loss, use_cs, focal_gamma, focal_alpha)
        val_history.append((epoch, val_total))
        if val_total < best_val:
            best_val = val_total
            best_epoch = epoch
            best_params = params.copy()
        if log_fn:
            log_fn(epoch, history[-1].total, val_total)

    return TrainResult(
        params=best_params,
        history=history,
        val_history=val_history,
        best_epoch=best_epoch,
        train_ids=[it.sample_id for it in train_items],
        val_ids=[it.sample_id for it in val_items],
    )


def write_history_csv(path: str | Path, rows: list[StepRow]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "step", "ghm", "cs", "total", "lr"])
        for row in rows:
            writer.writerow([row.epoch, row.step, repr(row.ghm), repr(row.cs), repr(row.total), repr(row.lr)])
