"""The shared training loop and the per-algorithm loss assembly.

Every algorithm runs the same outer loop (:func:`_fit`): draw one batch per
training modality, build the loss on a fresh tape, back-propagate, apply the
optimizer, and evaluate every ``eval_cadence`` steps and at the last step.
Algorithms differ only in :meth:`Algorithm.loss` and a few optional hooks.
"""

from __future__ import annotations

import json
import logging
import time
import zlib
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .. import numerics as nx
from ..audit import AccessAudit
from ..detector import ForwardResult, LAYER_ORDER, forward_tensors, glorot_uniform, init_detector
from ..metrics import auc
from ..numerics import NonFiniteError, Tensor
from ..synthworld import SyntheticWorld
from . import hparams as hp
from . import objectives as obj
from .optim import Adam, SGDMomentum

log = logging.getLogger(__name__)

EVAL_CADENCE = 100
DEFAULT_STEPS = 1500
SETTINGS = {"semantic": "weak", "isolated": "strong", "random_init": "random_init"}
RUN_PROTOCOLS = ("tm", "loo", "oracle")

# stream tags mixed into the run seed
_INIT, _BATCH, _MIX, _DISC = 1, 2, 3, 4


# ---------------------------------------------------------------------------
# records


@dataclass(frozen=True)
class AlgorithmSpec:
    name: str
    hparams: dict

    @property
    def family(self) -> str:
        return hp.family(self.name)

    @property
    def lam(self) -> float | None:
        return self.hparams.get("lambda")

    @classmethod
    def create(cls, name: str, overrides: dict | None = None, check_bounds: bool = True) -> "AlgorithmSpec":
        """Defaults for ``name`` with ``overrides`` applied and validated.

        Values must equal the default or lie inside the search interval;
        ``check_bounds=False`` admits out-of-interval values such as a zero
        lambda for reduction experiments.
        """
        if name not in hp.IMPLEMENTED:
            raise hp.ConfigError(f"algorithm {name!r} is not implemented; choose from {hp.IMPLEMENTED}")
        entries = hp.space(name)
        values = {k: v[0] for k, v in entries.items()}
        for key, value in (overrides or {}).items():
            if key not in entries:
                raise hp.ConfigError(f"{name} has no hyperparameter {key!r}")
            values[key] = value
        spec = cls(name, dict(sorted(values.items())))
        if check_bounds:
            spec.check_bounds()
        return spec

    def check_bounds(self) -> None:
        for key, (default, dist) in hp.space(self.name).items():
            value = self.hparams[key]
            if value == default:
                continue
            lo, hi = dist.bounds()
            if dist.kind == "choice":
                ok = value in dist.options
            else:
                slack = 1e-9 * max(abs(lo), abs(hi), 1.0)
                ok = lo - slack <= value <= hi + slack
            if not ok:
                raise hp.ConfigError(f"{self.name}.{key}={value} outside its search interval [{lo}, {hi}]")


@dataclass
class Checkpoint:
    step: int
    tm_val_auc: float | None = None
    loo_val_auc: float | None = None
    oracle_val_auc: float | None = None

    def to_dict(self, include_loo: bool) -> dict:
        out = {"step": self.step, "tm_val_auc": self.tm_val_auc}
        if include_loo:
            out["loo_val_auc"] = self.loo_val_auc
        out["oracle_val_auc"] = self.oracle_val_auc
        return out


@dataclass
class RunRecord:
    run_id: str
    setting: str
    algorithm: str
    family: str
    protocol: str
    seed: int
    trial: int
    test_modality: int
    hparams: dict
    checkpoints: list[Checkpoint]
    final_test_auc: float | None
    selected: bool = False
    wall_ms: int | None = None
    fold: int | None = None
    status: str = "ok"
    notes: list[str] = field(default_factory=list)
    eval_step: int | None = None
    audit: AccessAudit | None = field(default=None, repr=False, compare=False)

    def to_dict(self) -> dict:
        return {
            "run_id": self.run_id,
            "setting": self.setting,
            "algorithm": self.algorithm,
            "family": self.family,
            "protocol": self.protocol,
            "seed": self.seed,
            "trial": self.trial,
            "test_modality": self.test_modality,
            "hparams": {k: self.hparams[k] for k in sorted(self.hparams)},
            "checkpoints": [c.to_dict(self.fold is not None) for c in self.checkpoints],
            "final_test_auc": self.final_test_auc,
            "selected": self.selected,
            "wall_ms": self.wall_ms,
            "fold": self.fold,
            "eval_step": self.eval_step,
            "status": self.status,
            "notes": list(self.notes),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), ensure_ascii=False, allow_nan=False)

    @classmethod
    def from_dict(cls, d: dict) -> "RunRecord":
        cps = [Checkpoint(c["step"], c.get("tm_val_auc"), c.get("loo_val_auc"), c.get("oracle_val_auc"))
               for c in d["checkpoints"]]
        return cls(d["run_id"], d["setting"], d["algorithm"], d["family"], d["protocol"], d["seed"],
                   d["trial"], d["test_modality"], dict(d["hparams"]), cps, d["final_test_auc"],
                   d.get("selected", False), d.get("wall_ms"), d.get("fold"), d.get("status", "ok"),
                   list(d.get("notes", [])), d.get("eval_step"))

    def checkpoint_at(self, step: int) -> Checkpoint:
        for c in self.checkpoints:
            if c.step == step:
                return c
        raise KeyError(step)

    @property
    def final_checkpoint(self) -> Checkpoint | None:
        return self.checkpoints[-1] if self.checkpoints else None


@dataclass
class TrainState:
    params: dict[str, np.ndarray]
    optimizer: Adam | SGDMomentum
    rng: np.random.Generator
    seed_key: list[int]
    step: int = 0
    ema: dict[str, np.ndarray] | None = None
    disc: dict[str, np.ndarray] | None = None
    disc_optimizer: Adam | None = None
    checkpoints: list[Checkpoint] = field(default_factory=list)


@dataclass
class Batch:
    """One step's data: per-environment features and labels."""

    x: list[np.ndarray]
    y: list[np.ndarray]


@dataclass
class Context:
    """Run-wide read-only facts handed to the algorithm hooks."""

    num_envs: int
    dim: int
    steps: int
    architecture: str
    aux_rng: np.random.Generator


# ---------------------------------------------------------------------------
# model helpers


def init_params(dim: int, seed, architecture: str = "mlp", num_fused: int = 0) -> dict[str, np.ndarray]:
    """Detector weights (``mlp``) or a bare linear head (``linear``), plus a fusion projection for MML."""
    if architecture == "mlp":
        params = init_detector(dim, seed).weights
    elif architecture == "linear":
        rng = np.random.default_rng(seed)
        params = {"Wh": glorot_uniform(rng, dim, 2), "bh": np.zeros((1, 2))}
    else:
        raise hp.ConfigError(f"unknown architecture {architecture!r}")
    if num_fused:
        params["Wp"] = obj.fusion_init(num_fused, dim)
    return params


def model_forward(w: dict, x: Tensor, architecture: str) -> ForwardResult:
    """Detector (or linear head) on already fused inputs."""
    if architecture == "linear":
        return ForwardResult(nx.affine(x, w["Wh"], w["bh"]), x, [])
    return forward_tensors(w, x)


def _plain(params: dict[str, np.ndarray]) -> dict[str, Tensor]:
    return {k: Tensor(v) for k, v in params.items()}


def collapse_fusion(params: dict[str, np.ndarray]) -> np.ndarray | None:
    """Replicate-at-test: fusing K copies of ``z`` equals ``z @ sum_k Wp_k``."""
    if "Wp" not in params:
        return None
    wp = params["Wp"]
    d = wp.shape[1]
    return wp.reshape(-1, d, d).sum(axis=0)


def _numpy_forward(params: dict[str, np.ndarray], x: np.ndarray, architecture: str):
    """Untaped forward pass: (logits, per-layer post-ReLU activations)."""
    with np.errstate(all="raise", under="ignore"):
        if architecture == "linear":
            return x @ params["Wh"] + params["bh"], [x]
        hidden = []
        h = x
        for i in range(1, 5):
            h = np.maximum(h @ params[f"W{i}"] + params[f"b{i}"], 0.0)
            hidden.append(h)
        return h @ params["Wh"] + params["bh"], hidden


def _fused_input(params: dict[str, np.ndarray], feats) -> np.ndarray:
    x = np.asarray(feats, dtype=np.float64)
    proj = collapse_fusion(params)
    return x if proj is None else x @ proj


def score_features(params: dict[str, np.ndarray], feats: np.ndarray, architecture: str = "mlp") -> np.ndarray:
    """P(fake) for single-modality rows, replicating them through the fusion layer when present."""
    logits, _ = _numpy_forward(params, _fused_input(params, feats), architecture)
    d = logits[:, 1] - logits[:, 0]
    return 0.5 * (1.0 + np.tanh(0.5 * d))


def forensic_features(params: dict[str, np.ndarray], feats: np.ndarray, architecture: str = "mlp",
                      layer: int = 4) -> np.ndarray:
    """Post-ReLU activations of hidden ``layer`` (1-4); layer 4 is the forensic space."""
    if layer not in (1, 2, 3, 4):
        raise hp.ConfigError(f"layer must be 1-4, got {layer}")
    _, hidden = _numpy_forward(params, _fused_input(params, feats), architecture)
    return hidden[-1] if architecture == "linear" else hidden[layer - 1]


def _sum(terms: Sequence[Tensor]) -> Tensor:
    out = terms[0]
    for t in terms[1:]:
        out = nx.add(out, t)
    return out


def _split_rows(t: Tensor, sizes: Sequence[int]) -> list[Tensor]:
    bounds = np.cumsum([0, *sizes])
    return [nx.take_rows(t, slice(int(bounds[i]), int(bounds[i + 1]))) for i in range(len(sizes))]


def class_ce(logits: Tensor, labels, classes: int) -> Tensor:
    """Mean cross-entropy for ``classes``-way logits."""
    return nx.scale(nx.mean(nx.row_sums(nx.mul(nx.log_softmax(logits), obj.onehot(labels, classes)))), -1.0)


# ---------------------------------------------------------------------------
# algorithms


class Algorithm:
    """Loss assembly for one objective.  Subclasses override :meth:`loss`."""

    name = "erm"
    use_ema = False

    def __init__(self, spec: AlgorithmSpec):
        self.spec = spec
        self.h = spec.hparams

    # hooks -----------------------------------------------------------------
    def total_steps(self, steps: int) -> int:
        return steps

    def make_optimizer(self):
        return Adam(self.h["lr"], beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=self.h["weight_decay"])

    def setup(self, state: TrainState, ctx: Context) -> None:
        pass

    def before_step(self, state: TrainState, ctx: Context, batch: Batch) -> None:
        pass

    def adjust_grads(self, state: TrainState, ctx: Context, batch: Batch, grads: dict) -> None:
        pass

    # loss --------------------------------------------------------------------
    def env_outputs(self, w: dict, batch: Batch, ctx: Context):
        """One forward over the concatenated environment batches, split back per environment."""
        sizes = [x.shape[0] for x in batch.x]
        out = model_forward(w, Tensor(np.concatenate(batch.x)), ctx.architecture)
        return _split_rows(out.logits, sizes), _split_rows(out.forensic_features, sizes)

    def risks(self, logits: Sequence[Tensor], batch: Batch) -> list[Tensor]:
        return [nx.softmax_cross_entropy(lg, y) for lg, y in zip(logits, batch.y)]

    def loss(self, w: dict, batch: Batch, state: TrainState, ctx: Context) -> Tensor:
        logits, _ = self.env_outputs(w, batch, ctx)
        return _sum(self.risks(logits, batch))


class ERM(Algorithm):
    name = "erm"


class ERMPlusPlus(Algorithm):
    """ERM scored through an exponential moving average of the weights."""

    name = "erm++"
    use_ema = True


class _Annealed(Algorithm):
    """Penalty weight min(1, lambda) until ``penalty_anneal_iters``, lambda afterwards.

    After the switch the loss is divided by ``1 + lambda`` when lambda > 1, and
    the optimizer moments are reset if the weight actually changed.
    """

    def weight(self, step: int) -> float:
        lam = float(self.h["lambda"])
        return lam if step > self.h["penalty_anneal_iters"] else min(1.0, lam)

    def before_step(self, state, ctx, batch):
        step = state.step + 1
        if step == self.h["penalty_anneal_iters"] + 1 and self.weight(step) != self.weight(step - 1):
            state.optimizer.reset()

    def penalty(self, logits, feats, batch) -> Tensor:
        raise NotImplementedError

    def loss(self, w, batch, state, ctx):
        logits, feats = self.env_outputs(w, batch, ctx)
        total = _sum(self.risks(logits, batch))
        step = state.step + 1
        weight = self.weight(step)
        if weight == 0.0:
            return total
        total = nx.add(total, nx.scale(self.penalty(logits, feats, batch), weight))
        if step > self.h["penalty_anneal_iters"] and weight > 1.0:
            total = nx.scale(total, 1.0 / (1.0 + weight))
        return total


class IRM(_Annealed):
    name = "irm"

    def penalty(self, logits, feats, batch):
        return obj.irm_penalty(logits, batch.y)


class IBERM(_Annealed):
    """IRM penalty plus the feature-variance bottleneck, under one lambda."""

    name = "ib_erm"

    def penalty(self, logits, feats, batch):
        return nx.add(obj.irm_penalty(logits, batch.y), _sum([obj.ib_penalty(f) for f in feats]))


class EQRM(Algorithm):
    """Mean risk at the DG learning rate during burn-in, then the q-quantile risk at ``eqrm_lr``."""

    name = "eqrm"

    def total_steps(self, steps):
        return max(steps, int(self.h["burnin_iters"]) + 500)

    def before_step(self, state, ctx, batch):
        if state.step + 1 == self.h["burnin_iters"] + 1:
            state.optimizer.reset()
            state.optimizer.lr = self.h["eqrm_lr"]

    def loss(self, w, batch, state, ctx):
        logits, _ = self.env_outputs(w, batch, ctx)
        risks = self.risks(logits, batch)
        if state.step + 1 <= self.h["burnin_iters"]:
            return nx.scale(_sum(risks), 1.0 / len(risks))
        return obj.eqrm_quantile_risk(risks, self.h["quantile"])


class URM(Algorithm):
    name = "urm"

    def loss(self, w, batch, state, ctx):
        logits, _ = self.env_outputs(w, batch, ctx)
        risks = self.risks(logits, batch)
        total = _sum(risks)
        if self.h["lambda"] == 0.0:
            return total
        return nx.add(total, nx.scale(obj.urm_penalty(risks), self.h["lambda"]))


class Mixup(Algorithm):
    """Environments paired cyclically along a random permutation; Beta(alpha, alpha) weights."""

    name = "mixup"

    def loss(self, w, batch, state, ctx):
        k = len(batch.x)
        perm = ctx.aux_rng.permutation(k)
        terms = []
        for i in range(k):
            a, b = int(perm[i]), int(perm[(i + 1) % k])
            lam = float(ctx.aux_rng.beta(self.h["alpha"], self.h["alpha"]))
            n = min(batch.x[a].shape[0], batch.x[b].shape[0])
            mixed, (wa, wb) = obj.mixup_combine(batch.x[a][:n], batch.x[b][:n], lam)
            logits = model_forward(w, Tensor(mixed), ctx.architecture).logits
            terms.append(nx.add(nx.scale(nx.softmax_cross_entropy(logits, batch.y[a][:n]), wa),
                                nx.scale(nx.softmax_cross_entropy(logits, batch.y[b][:n]), wb)))
        return _sum(terms)


class CDANN(Algorithm):
    """Class-conditional adversarial alignment of the forensic features.

    A two-layer discriminator reads ``features ⊕ onehot(label)`` and predicts
    the environment.  Each step it takes ``d_steps`` Adam updates (with the
    sampled beta1) on its cross-entropy plus a gradient penalty, then the
    detector takes one update on ``L_cls - lambda * disc_CE``.
    """

    name = "cdann"

    def setup(self, state, ctx):
        rng = np.random.default_rng([*state.seed_key, _DISC])
        d_in, width = ctx.dim + 2, ctx.dim
        state.disc = {
            "Wd1": glorot_uniform(rng, d_in, width), "bd1": np.zeros((1, width)),
            "Wd2": glorot_uniform(rng, width, ctx.num_envs), "bd2": np.zeros((1, ctx.num_envs)),
        }
        state.disc_optimizer = Adam(self.h["lr"], beta1=self.h["beta1"], weight_decay=self.h["disc_weight_decay"])

    @staticmethod
    def disc_inputs(feats: np.ndarray | Tensor, labels: np.ndarray):
        return nx.concat_cols([feats if isinstance(feats, Tensor) else Tensor(feats), Tensor(obj.onehot(labels))])

    @staticmethod
    def disc_logits(d: dict, inputs: Tensor) -> tuple[Tensor, Tensor]:
        hidden = nx.relu(nx.affine(inputs, d["Wd1"], d["bd1"]))
        return nx.affine(hidden, d["Wd2"], d["bd2"]), hidden

    @staticmethod
    def feature_grad_penalty(d: dict, logits: Tensor, hidden: Tensor, domains: np.ndarray, dim: int) -> Tensor:
        """Mean squared norm of d(summed disc CE)/d(features), built from first-order ops.

        The ReLU mask enters as a constant, which is exact wherever the
        activations are away from the kink.
        """
        k = logits.shape[1]
        resid = nx.sub(nx.softmax(logits), obj.onehot(domains, k))
        mask = (hidden.data > 0).astype(np.float64)
        dh = nx.mul(nx.matmul(resid, nx.transpose(d["Wd2"])), mask)
        w_feat = nx.take_rows(d["Wd1"], slice(0, dim))
        g = nx.matmul(dh, nx.transpose(w_feat))
        return nx.mean(nx.row_sums(nx.square(g)))

    def disc_loss(self, d: dict, feats: np.ndarray, labels: np.ndarray, domains: np.ndarray, dim: int) -> Tensor:
        logits, hidden = self.disc_logits(d, self.disc_inputs(feats, labels))
        loss = class_ce(logits, domains, logits.shape[1])
        if self.h["grad_penalty"]:
            pen = self.feature_grad_penalty(d, logits, hidden, domains, dim)
            loss = nx.add(loss, nx.scale(pen, self.h["grad_penalty"]))
        return loss

    def before_step(self, state, ctx, batch):
        feats = forensic_features(state.params, np.concatenate(batch.x), ctx.architecture)
        labels = np.concatenate(batch.y)
        domains = np.concatenate([np.full(len(y), e) for e, y in enumerate(batch.y)])
        for _ in range(int(self.h["d_steps"])):
            _, grads = self.disc_grads(state.disc, feats, labels, domains, ctx.dim, self.h["grad_penalty"])
            state.disc_optimizer.step(state.disc, grads)

    @staticmethod
    def disc_grads(d: dict, feats: np.ndarray, labels: np.ndarray, domains: np.ndarray, dim: int,
                   penalty: float) -> tuple[float, dict[str, np.ndarray]]:
        """Discriminator loss and its gradients in closed form (same quantity as :meth:`disc_loss`).

        The taped version costs a few dozen recorded ops per update; this one is
        a handful of matrix products, which matters with several updates per step.
        """
        with np.errstate(all="raise", under="ignore"):
            x = np.hstack([feats, obj.onehot(labels)])
            n = x.shape[0]
            pre = x @ d["Wd1"] + d["bd1"]
            mask = (pre > 0).astype(np.float64)
            hidden = pre * mask
            logits = hidden @ d["Wd2"] + d["bd2"]
            shifted = logits - logits.max(axis=1, keepdims=True)
            logp = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
            p = np.exp(logp)
            onehot = obj.onehot(domains, logits.shape[1])
            loss = -float((logp * onehot).sum()) / n
            resid = p - onehot
            d_logits = resid / n
            g_w1 = np.zeros_like(d["Wd1"])
            g_w2 = np.zeros_like(d["Wd2"])
            if penalty:
                a = (resid @ d["Wd2"].T) * mask
                w_feat = d["Wd1"][:dim]
                g = a @ w_feat.T
                loss += penalty * float((g * g).sum()) / n
                gg = penalty * 2.0 * g / n
                g_w1[:dim] += gg.T @ a
                d_b = (gg @ w_feat) * mask
                d_resid = d_b @ d["Wd2"]
                g_w2 += d_b.T @ resid
                d_logits = d_logits + p * (d_resid - (d_resid * p).sum(axis=1, keepdims=True))
            g_w2 += hidden.T @ d_logits
            d_pre = (d_logits @ d["Wd2"].T) * mask
            g_w1 += x.T @ d_pre
            grads = {"Wd1": g_w1, "bd1": d_pre.sum(axis=0, keepdims=True),
                     "Wd2": g_w2, "bd2": d_logits.sum(axis=0, keepdims=True)}
        return loss, grads

    def loss(self, w, batch, state, ctx):
        logits, feats = self.env_outputs(w, batch, ctx)
        total = _sum(self.risks(logits, batch))
        if self.h["lambda"] == 0.0:
            return total
        domains = np.concatenate([np.full(len(y), e) for e, y in enumerate(batch.y)])
        d_logits, _ = self.disc_logits(_plain(state.disc), self.disc_inputs(nx.concat_rows(feats),
                                                                            np.concatenate(batch.y)))
        adv = class_ce(d_logits, domains, ctx.num_envs)
        return nx.sub(total, nx.scale(adv, self.h["lambda"]))


class Concat(Algorithm):
    """Concatenate aligned per-modality rows, project K*D -> D, then the shared detector."""

    name = "concat"

    def make_optimizer(self):
        return SGDMomentum(self.h["lr"], momentum=self.h["momentum"], weight_decay=self.h["weight_decay"])

    def loss(self, w, batch, state, ctx):
        fused = obj.mml_fuse([Tensor(x) for x in batch.x], w["Wp"], "concat_project")
        logits = model_forward(w, fused, ctx.architecture).logits
        return nx.softmax_cross_entropy(logits, batch.y[0])


class OGM(Concat):
    """Concat with on-the-fly gradient modulation of each modality's projection block."""

    name = "ogm"

    def adjust_grads(self, state, ctx, batch, grads):
        k, d = ctx.num_envs, ctx.dim
        wp = state.params["Wp"]
        w = _plain(state.params)
        scores = []
        for m in range(k):
            x = k * batch.x[m] @ wp[m * d:(m + 1) * d]
            probs = nx.softmax(model_forward(w, Tensor(x), ctx.architecture).logits).data
            scores.append(float(probs[np.arange(len(batch.y[0])), batch.y[0]].mean()))
        coeff = obj.ogm_coefficients(scores, self.h["alpha"])
        g = grads["Wp"].copy()
        for m in range(k):
            g[m * d:(m + 1) * d] *= coeff[m]
        grads["Wp"] = g


ALGORITHMS: dict[str, type[Algorithm]] = {
    cls.name: cls for cls in (ERM, ERMPlusPlus, IRM, IBERM, EQRM, URM, Mixup, CDANN, Concat, OGM)
}


def make_algorithm(spec: AlgorithmSpec) -> Algorithm:
    try:
        return ALGORITHMS[spec.name](spec)
    except KeyError:
        raise hp.ConfigError(f"algorithm {spec.name!r} is not implemented") from None


# ---------------------------------------------------------------------------
# data plumbing


def algorithm_id(name: str) -> int:
    return zlib.crc32(name.encode("utf-8")) & 0x7FFFFFFF


class BatchSampler:
    """Per-modality batches drawn with replacement from the train split.

    MML fusion needs rows of the same instance from every modality.  Aligned
    worlds share instances, so one index vector serves all modalities.
    Unaligned worlds pair rows at random within class.
    """

    def __init__(self, feats: list[np.ndarray], labels: list[np.ndarray], batch_size: int, paired: bool,
                 aligned: bool):
        self.feats, self.labels = feats, labels
        self.batch_size = int(batch_size)
        self.paired = paired
        self.aligned = aligned
        if paired and aligned and len({len(y) for y in labels}) != 1:
            raise ValueError("aligned modalities must share their train rows")
        self.by_class = [[np.flatnonzero(y == c) for c in (0, 1)] for y in labels]

    def draw(self, rng: np.random.Generator) -> Batch:
        b = self.batch_size
        if not self.paired:
            idx = [rng.integers(0, len(y), size=b) for y in self.labels]
            return Batch([f[i] for f, i in zip(self.feats, idx)], [y[i] for y, i in zip(self.labels, idx)])
        anchor = rng.integers(0, len(self.labels[0]), size=b)
        y0 = self.labels[0][anchor]
        xs = [self.feats[0][anchor]]
        for m in range(1, len(self.feats)):
            if self.aligned:
                rows = anchor
            else:
                rows = np.empty(b, dtype=np.intp)
                for c in (0, 1):
                    sel = y0 == c
                    pool = self.by_class[m][c]
                    rows[sel] = pool[rng.integers(0, len(pool), size=int(sel.sum()))]
            xs.append(self.feats[m][rows])
        return Batch(xs, [y0] * len(xs))


def run_identifier(setting: str, algorithm: str, protocol: str, trial: int, seed: int, test_modality: int,
                   fold: int | None = None) -> str:
    rid = f"{setting}-{algorithm}-{protocol}-t{trial}-s{seed}-m{test_modality}"
    return rid if fold is None else f"{rid}-f{fold}"


# ---------------------------------------------------------------------------
# the loop


@dataclass
class FitResult:
    checkpoints: list[Checkpoint]
    final_params: dict[str, np.ndarray]
    best_tm_params: dict[str, np.ndarray] | None
    best_tm_step: int | None
    tm_stop_step: int | None
    status: str
    notes: list[str]


def _fit(algo: Algorithm, train_data, batch_size: int, steps: int, seed_key: list[int], dim: int,
         architecture: str, aligned: bool, evaluate, patience: int | None) -> FitResult:
    """Shared outer loop.  ``evaluate(params) -> Checkpoint`` is called every cadence step."""
    num_envs = len(train_data)
    paired = algo.spec.family == "MML"
    params = init_params(dim, [*seed_key, _INIT], architecture, num_envs if paired else 0)
    state = TrainState(params, algo.make_optimizer(), np.random.default_rng([*seed_key, _BATCH]), seed_key)
    total = algo.total_steps(steps)
    ctx = Context(num_envs, dim, total, architecture, np.random.default_rng([*seed_key, _MIX]))
    sampler = BatchSampler([d[0] for d in train_data], [d[1] for d in train_data], batch_size, paired, aligned)
    notes: list[str] = []
    if paired and not aligned:
        notes.append("unaligned world: MML rows paired at random within class")
    if paired:
        notes.append("MML test-time input: unseen modality replicated across fusion slots")
    if algo.name == "mixup" and num_envs == 1:
        notes.append("mixup with one environment mixes the modality with itself")
    keys = [k for k in (*LAYER_ORDER, "Wp") if k in state.params]
    # every parameter is a view into one flat buffer so the optimizer runs a single vector update
    flat = np.concatenate([state.params[k].ravel() for k in keys])
    offsets = np.cumsum([0] + [state.params[k].size for k in keys])
    shapes = [state.params[k].shape for k in keys]

    def views(buf):
        return {k: buf[offsets[i]:offsets[i + 1]].reshape(shapes[i]) for i, k in enumerate(keys)}

    state.params = views(flat)
    ema_flat = None
    algo.setup(state, ctx)
    best_tm, best_params, best_step, stop_step = -np.inf, None, None, None
    status = "ok"
    try:
        with np.errstate(all="raise", under="ignore"):
            for step in range(1, total + 1):
                batch = sampler.draw(state.rng)
                algo.before_step(state, ctx, batch)
                tape = nx.Tape()
                w = {k: tape.param(state.params[k]) for k in keys}
                loss = algo.loss(w, batch, state, ctx)
                tape.backward(loss)
                grads = {k: tape.grad(w[k]) for k in keys}
                algo.adjust_grads(state, ctx, batch, grads)
                state.optimizer.step({"flat": flat}, {"flat": np.concatenate([grads[k].ravel() for k in keys])})
                state.step = step
                if algo.use_ema:
                    if ema_flat is None:
                        ema_flat = flat.copy()
                        state.ema = views(ema_flat)
                    else:
                        ema_flat *= hp.ERMPP_EMA_DECAY
                        ema_flat += (1.0 - hp.ERMPP_EMA_DECAY) * flat
                if step % EVAL_CADENCE == 0 or step == total:
                    scored = state.ema if algo.use_ema else state.params
                    cp = evaluate(scored)
                    cp.step = step
                    state.checkpoints.append(cp)
                    if stop_step is None and cp.tm_val_auc is not None:
                        if cp.tm_val_auc > best_tm:
                            best_tm, best_step = cp.tm_val_auc, step
                            best_params = {k: v.copy() for k, v in scored.items()}
                        elif patience is not None and step - best_step >= patience:
                            stop_step = step
    except (NonFiniteError, FloatingPointError) as exc:
        status = "failed"
        notes.append(f"non-finite value at step {state.step + 1}: {exc}")
        log.warning("run %s failed: %s", seed_key, exc)
    final = state.ema if algo.use_ema else state.params
    return FitResult(state.checkpoints, {k: v.copy() for k, v in final.items()}, best_params, best_step,
                     stop_step, status, notes)


def _val_auc(params, ds, architecture) -> float:
    v = ds.subset("val")
    return auc(score_features(params, v.features, architecture), v.labels)


def train_protocols(world: SyntheticWorld, train_modalities: Sequence[int], test_modality: int,
                    spec: AlgorithmSpec, perceptor_mode: str, seed: int, steps: int = DEFAULT_STEPS,
                    protocols: Sequence[str] = ("oracle",), trial: int = 0, seed_key: Sequence[int] | None = None,
                    pseudo_held_out: int | None = None, architecture: str = "mlp",
                    record_wall: bool = False) -> dict[str, RunRecord]:
    """Train once and emit one :class:`RunRecord` per requested protocol.

    With ``pseudo_held_out`` set the fit is a LOO fold: it records the fold
    modality's validation AUC and never touches the held-out modality.
    """
    t0 = time.perf_counter()
    train_modalities = [int(m) for m in train_modalities]
    if test_modality in train_modalities:
        raise ValueError("test modality must not be a training modality")
    if pseudo_held_out is not None and (pseudo_held_out in train_modalities or pseudo_held_out == test_modality):
        raise ValueError("LOO fold modality must be a held-back training modality")
    for p in protocols:
        if p not in RUN_PROTOCOLS:
            raise hp.ConfigError(f"unknown protocol {p!r}; expected one of {RUN_PROTOCOLS}")
    if not train_modalities:
        raise ValueError("need at least one training modality")
    algo = make_algorithm(spec)
    setting = SETTINGS[perceptor_mode]
    key = list(seed_key) if seed_key is not None else [int(seed)]
    audits = {p: AccessAudit(test_modality) for p in protocols}

    def record(modality, split, purpose, only=None):
        for p, a in audits.items():
            if only is None or p == only:
                a.record(modality, split, purpose, p)

    if perceptor_mode == "isolated":
        for m in {*train_modalities, test_modality, *([pseudo_held_out] if pseudo_held_out is not None else [])}:
            record(m, "train", "perceptor_fit")
    data = {m: world.dataset(perceptor_mode, m, test_modality) for m in train_modalities}
    train_data = []
    for m in train_modalities:
        tr = data[m].subset("train")
        record(m, "train", "train")
        train_data.append((tr.features, tr.labels))
    fold_ds = world.dataset(perceptor_mode, pseudo_held_out, test_modality) if pseudo_held_out is not None else None
    want_oracle = "oracle" in protocols and pseudo_held_out is None
    target = world.dataset(perceptor_mode, test_modality, test_modality) if pseudo_held_out is None else None
    dim = data[train_modalities[0]].features.shape[1]

    def evaluate(params) -> Checkpoint:
        cp = Checkpoint(0)
        for m in train_modalities:
            record(m, "val", "tm_val")
        cp.tm_val_auc = float(np.mean([_val_auc(params, data[m], architecture) for m in train_modalities]))
        if fold_ds is not None:
            record(pseudo_held_out, "val", "loo_val")
            cp.loo_val_auc = _val_auc(params, fold_ds, architecture)
        if want_oracle:
            record(test_modality, "val", "oracle_val", only="oracle")
            cp.oracle_val_auc = _val_auc(params, target, architecture)
        return cp

    patience = int(spec.hparams["patience"]) if spec.family == "MML" and "tm" in protocols else None
    fit = _fit(algo, train_data, spec.hparams["batch_size"], steps, key, dim, architecture, world.config.aligned,
               evaluate, patience)

    out = {}
    for p in protocols:
        audit = audits[p]
        cps = [Checkpoint(c.step, c.tm_val_auc, c.loo_val_auc, c.oracle_val_auc if p == "oracle" else None)
               for c in fit.checkpoints]
        test_auc, eval_step = None, None
        notes = list(fit.notes)
        if fit.status == "ok" and pseudo_held_out is None:
            if p == "tm":
                params, eval_step = fit.best_tm_params, fit.best_tm_step
                if fit.tm_stop_step is not None:
                    notes.append(f"TM early stopping triggered at step {fit.tm_stop_step}")
            else:
                params, eval_step = fit.final_params, cps[-1].step
            audit.enter_final()
            audit.record(test_modality, "test", "final_test", p)
            t = target.subset("test")
            test_auc = auc(score_features(params, t.features, architecture), t.labels)
        rec = RunRecord(
            run_identifier(setting, spec.name, p, trial, seed, test_modality, pseudo_held_out),
            setting, spec.name, spec.family, p, int(seed), int(trial), int(test_modality), dict(spec.hparams),
            cps, test_auc, fold=pseudo_held_out, status=fit.status, notes=notes, eval_step=eval_step,
            audit=audit)
        if record_wall:
            rec.wall_ms = int(round(1000 * (time.perf_counter() - t0)))
        out[p] = rec
    return out


def train_run(world: SyntheticWorld, train_modalities: Sequence[int], test_modality: int, spec: AlgorithmSpec,
              perceptor_mode: str, seed: int, steps: int = DEFAULT_STEPS, protocol: str = "oracle",
              **kwargs) -> RunRecord:
    """Single-protocol convenience wrapper around :func:`train_protocols`."""
    return train_protocols(world, train_modalities, test_modality, spec, perceptor_mode, seed, steps,
                           (protocol,), **kwargs)[protocol]


def train_params(world: SyntheticWorld, train_modalities: Sequence[int], test_modality: int, spec: AlgorithmSpec,
                 perceptor_mode: str, seed, steps: int = DEFAULT_STEPS, architecture: str = "mlp"):
    """Train without any evaluation and return the final scored parameters (for feature analysis)."""
    algo = make_algorithm(spec)
    data = []
    for m in train_modalities:
        tr = world.dataset(perceptor_mode, m, test_modality).subset("train")
        data.append((tr.features, tr.labels))
    dim = data[0][0].shape[1]
    fit = _fit(algo, data, spec.hparams["batch_size"], steps, [int(v) for v in np.atleast_1d(seed)], dim,
               architecture, world.config.aligned, lambda p: Checkpoint(0), None)
    if fit.status != "ok":
        raise NonFiniteError("; ".join(fit.notes))
    return fit.final_params
