"""Regularizers and loss-assembly helpers for the MML and DG objectives.

All functions taking tensors build differentiable graphs when their inputs
are taped, so the same code computes values and training gradients.
"""

from __future__ import annotations

import logging
from typing import Sequence

import numpy as np

from .. import numerics as nx
from ..numerics import Tensor

log = logging.getLogger(__name__)


def onehot(labels, classes: int = 2) -> np.ndarray:
    y = np.asarray(labels, dtype=np.intp).reshape(-1)
    out = np.zeros((y.shape[0], classes))
    out[np.arange(y.shape[0]), y] = 1.0
    return out


def irm_scale_gradient(logits: Tensor, labels) -> Tensor:
    """d/dw CE(w * logits, labels) at w = 1, as a differentiable function of the logits.

    For softmax cross-entropy this derivative is the batch mean of
    ``sum_c (softmax(logits) - onehot)_c * logits_c``.
    """
    resid = nx.sub(nx.softmax(logits), onehot(labels))
    return nx.mean(nx.row_sums(nx.mul(resid, logits)))


def irm_penalty(env_logits: Sequence[Tensor], env_labels: Sequence) -> Tensor:
    """Sum over environments of the squared dummy-scale gradient."""
    terms = []
    for logits, labels in zip(env_logits, env_labels):
        if logits.shape[0] == 0:
            log.warning("irm_penalty: skipping empty environment")
            continue
        g = irm_scale_gradient(logits, labels)
        terms.append(nx.mul(g, g))
    if not terms:
        return Tensor(0.0)
    out = terms[0]
    for t in terms[1:]:
        out = nx.add(out, t)
    return out


def dummy_scale_gradient(logits, labels) -> float:
    """The same derivative obtained by differentiating through a taped dummy scalar.

    Independent of :func:`irm_scale_gradient`; used to cross-check it.
    """
    tape = nx.Tape()
    w = tape.param(1.0)
    z = tape.constant(logits.data if isinstance(logits, Tensor) else logits)
    scaled = nx.mul(z, w)
    loss = nx.softmax_cross_entropy(scaled, labels)
    tape.backward(loss)
    return float(tape.grad(w)[0, 0])


def ib_penalty(features: Tensor) -> Tensor:
    """Mean over coordinates of the population variance across rows."""
    n = features.shape[0]
    if n < 2:
        log.warning("ib_penalty: fewer than two rows, returning 0")
        return nx.scale(nx.mean(features), 0.0) if features.tape is not None else Tensor(0.0)
    centered = nx.sub(features, nx.col_means(features))
    return nx.mean(nx.square(centered))


def eqrm_quantile_risk(env_risks: Sequence[Tensor], q: float) -> Tensor:
    if len(env_risks) == 0:
        raise ValueError("eqrm_quantile_risk needs at least one risk")
    return nx.quantile(nx.concat_cols(list(env_risks)), q)


def urm_penalty(env_risks: Sequence[Tensor]) -> Tensor:
    """Population variance of the per-environment risks."""
    if len(env_risks) < 2:
        return Tensor(0.0)
    row = nx.concat_cols(list(env_risks))
    return nx.mean(nx.square(nx.sub(row, nx.mean(row))))


def mixup_combine(batch_a: np.ndarray, batch_b: np.ndarray, lam: float):
    """Interpolated features plus the (weight_a, weight_b) applied to the two label sets."""
    a = np.asarray(batch_a, dtype=np.float64)
    b = np.asarray(batch_b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"mixup batches differ in shape: {a.shape} vs {b.shape}")
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"mixup weight must lie in [0, 1], got {lam}")
    return lam * a + (1.0 - lam) * b, (lam, 1.0 - lam)


def ogm_coefficients(scores, alpha: float) -> np.ndarray:
    """Per-modality gradient multipliers damping modalities that dominate the batch.

    ``rho_m = score_m / mean(other scores)``; modalities with ``rho_m > 1`` get
    ``1 - tanh(alpha * (rho_m - 1))``, the rest keep 1.
    """
    s = np.asarray(scores, dtype=np.float64).copy()
    if (s <= 0).any():
        log.warning("ogm_coefficients: clamping nonpositive contribution scores to 1e-6")
        s = np.maximum(s, 1e-6)
    k = s.shape[0]
    if k < 2:
        return np.ones(k)
    others = (s.sum() - s) / (k - 1)
    rho = s / others
    return np.where(rho > 1.0, 1.0 - np.tanh(alpha * (rho - 1.0)), 1.0)


def fusion_init(num_modalities: int, dim: int) -> np.ndarray:
    """Block-averaged projection: fusing K identical rows returns the row."""
    return np.vstack([np.eye(dim) / num_modalities] * num_modalities)


def mml_fuse(rows: Sequence, projection, mode: str = "concat_project") -> Tensor:
    """Fuse per-modality feature rows through a ``K*D -> D`` projection.

    ``concat_project`` concatenates aligned rows from each training modality;
    ``test_replicate`` takes a single modality's rows and repeats them K times.
    """
    proj = projection if isinstance(projection, Tensor) else Tensor(projection)
    if mode == "concat_project":
        parts = [r if isinstance(r, Tensor) else Tensor(r) for r in rows]
    elif mode == "test_replicate":
        (single,) = rows
        single = single if isinstance(single, Tensor) else Tensor(single)
        k = proj.shape[0] // single.shape[1]
        parts = [single] * k
    else:
        raise ValueError(f"unknown fusion mode {mode!r}")
    stacked = parts[0] if len(parts) == 1 else nx.concat_cols(parts)
    if stacked.shape[1] != proj.shape[0]:
        raise ValueError(f"fused width {stacked.shape[1]} does not match projection {proj.shape}")
    return nx.matmul(stacked, proj)
