"""Feature-space diagnostics: cross-modal Gaussian KL, PCA k95, co-activation cores,
style/essence variance explained and a 2-D PCA projection.

A :class:`FeatureBundle` holds feature matrices keyed by ``(space, modality, label)``
where ``space`` is ``semantic`` (perceptor output) or ``forensic`` (detector
hidden layer).
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .algorithms.training import forensic_features
from .synthworld import SyntheticWorld

log = logging.getLogger(__name__)

SPACES = ("semantic", "forensic")
DEFAULT_SHRINKAGE = 0.1


class AnalysisError(ValueError):
    pass


# ---------------------------------------------------------------------------
# Gaussian KL


def gaussian_kl_moments(mean_a, cov_a, mean_b, cov_b) -> float:
    """KL(N(mean_a, cov_a) || N(mean_b, cov_b)) in closed form."""
    mean_a = np.atleast_1d(np.asarray(mean_a, dtype=np.float64))
    mean_b = np.atleast_1d(np.asarray(mean_b, dtype=np.float64))
    cov_a = np.atleast_2d(np.asarray(cov_a, dtype=np.float64))
    cov_b = np.atleast_2d(np.asarray(cov_b, dtype=np.float64))
    d = mean_a.shape[0]
    try:
        chol_b = np.linalg.cholesky(cov_b)
        np.linalg.cholesky(cov_a)
    except np.linalg.LinAlgError:
        raise AnalysisError("covariance is not positive definite") from None
    solve = lambda m: np.linalg.solve(chol_b.T, np.linalg.solve(chol_b, m))  # noqa: E731
    diff = mean_b - mean_a
    trace_term = float(np.trace(solve(cov_a)))
    maha = float(diff @ solve(diff))
    _, logdet_a = np.linalg.slogdet(cov_a)
    logdet_b = 2.0 * float(np.log(np.diag(chol_b)).sum())
    return 0.5 * (trace_term + maha - d + logdet_b - logdet_a)


def shrunk_moments(features, shrinkage: float = DEFAULT_SHRINKAGE) -> tuple[np.ndarray, np.ndarray]:
    """Sample mean and shrunk covariance ``(1 - g) S + g tr(S)/d I``."""
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 2:
        raise AnalysisError("need at least two rows to fit a Gaussian")
    if not 0.0 <= shrinkage <= 1.0:
        raise AnalysisError(f"shrinkage must lie in [0, 1], got {shrinkage}")
    mean = x.mean(axis=0)
    cov = np.cov(x, rowvar=False, ddof=1).reshape(x.shape[1], x.shape[1])
    tr = float(np.trace(cov))
    if tr <= 0.0:
        raise AnalysisError("features have zero variance; covariance is identically zero")
    d = cov.shape[0]
    return mean, (1.0 - shrinkage) * cov + shrinkage * (tr / d) * np.eye(d)


def gaussian_kl(features_a, features_b, shrinkage: float = DEFAULT_SHRINKAGE) -> float:
    ma, ca = shrunk_moments(features_a, shrinkage)
    mb, cb = shrunk_moments(features_b, shrinkage)
    if ma.shape != mb.shape:
        raise AnalysisError("feature groups differ in width")
    return gaussian_kl_moments(ma, ca, mb, cb)


# ---------------------------------------------------------------------------
# bundles


@dataclass
class FeatureBundle:
    groups: dict[tuple[str, int, int], np.ndarray] = field(default_factory=dict)

    def add(self, space: str, modality: int, label: int, features) -> None:
        x = np.asarray(features, dtype=np.float64)
        if x.ndim != 2 or x.shape[0] < 2:
            raise AnalysisError(f"group ({space}, {modality}, {label}) needs >= 2 rows")
        for (s, _, _), other in self.groups.items():
            if s == space and other.shape[1] != x.shape[1]:
                raise AnalysisError(f"{space} groups must share a column count")
        self.groups[(space, int(modality), int(label))] = x

    def modalities(self, space: str, label: int | None = None) -> list[int]:
        return sorted({m for (s, m, y) in self.groups if s == space and (label is None or y == label)})

    def get(self, space: str, modality: int, label: int) -> np.ndarray:
        return self.groups[(space, modality, label)]

    def pooled(self, space: str) -> np.ndarray:
        keys = sorted(k for k in self.groups if k[0] == space)
        return np.vstack([self.groups[k] for k in keys])


def kl_matrix(bundle: FeatureBundle, space: str, label: int, shrinkage: float = DEFAULT_SHRINKAGE) -> np.ndarray:
    mods = bundle.modalities(space, label)
    if len(mods) < 2:
        raise AnalysisError("kl_matrix needs at least two modalities")
    moments = [shrunk_moments(bundle.get(space, m, label), shrinkage) for m in mods]
    out = np.zeros((len(mods), len(mods)))
    for i, j in np.ndindex(out.shape):
        if i != j:
            out[i, j] = gaussian_kl_moments(*moments[i], *moments[j])
    return out


def mean_off_diagonal(matrix: np.ndarray) -> float:
    k = matrix.shape[0]
    return float((matrix.sum() - np.trace(matrix)) / (k * (k - 1)))


# ---------------------------------------------------------------------------
# Jacobi eigenvalues and k95


def jacobi_eigh(sym, tol: float = 1e-12, max_sweeps: int = 100) -> tuple[np.ndarray, np.ndarray]:
    """Eigenvalues (descending) and eigenvectors of a symmetric matrix by cyclic Jacobi rotations.

    Sweeps stop once the off-diagonal Frobenius norm falls below ``tol``
    (scaled by the matrix norm when that exceeds 1).
    """
    a = np.array(sym, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise AnalysisError("jacobi_eigh needs a square matrix")
    a = 0.5 * (a + a.T)
    n = a.shape[0]
    v = np.eye(n)
    scale = max(1.0, float(np.linalg.norm(a)))
    offdiag = ~np.eye(n, dtype=bool)
    for _ in range(max_sweeps):
        off = float(np.linalg.norm(a[offdiag]))
        if off < tol * scale:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                if abs(apq) < 1e-300:
                    continue
                theta = (a[q, q] - a[p, p]) / (2.0 * apq)
                t = np.sign(theta) / (abs(theta) + np.hypot(theta, 1.0)) if theta != 0 else 1.0
                c = 1.0 / np.sqrt(t * t + 1.0)
                s = t * c
                ap, aq = a[:, p].copy(), a[:, q].copy()
                a[:, p] = c * ap - s * aq
                a[:, q] = s * ap + c * aq
                rp, rq = a[p, :].copy(), a[q, :].copy()
                a[p, :] = c * rp - s * rq
                a[q, :] = s * rp + c * rq
                vp, vq = v[:, p].copy(), v[:, q].copy()
                v[:, p] = c * vp - s * vq
                v[:, q] = s * vp + c * vq
    else:
        log.warning("jacobi_eigh: reached %d sweeps without converging", max_sweeps)
    w = np.diag(a).copy()
    order = np.argsort(-w, kind="stable")
    return w[order], v[:, order]


def k95_from_eigenvalues(eigenvalues, level: float = 0.95) -> int:
    lam = np.sort(np.clip(np.asarray(eigenvalues, dtype=np.float64), 0.0, None))[::-1]
    total = lam.sum()
    if total <= 0.0:
        return 0
    cum = np.cumsum(lam)
    return int(np.searchsorted(cum, level * total * (1.0 - 1e-12)) + 1)


def pca_k95(features, level: float = 0.95) -> int:
    """Smallest number of principal components holding ``level`` of the total variance."""
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 2:
        raise AnalysisError("pca_k95 needs at least two rows")
    cov = np.cov(x, rowvar=False, ddof=1).reshape(x.shape[1], x.shape[1])
    if np.trace(cov) <= 0.0:
        return 0
    eig, _ = jacobi_eigh(cov)
    return k95_from_eigenvalues(eig, level)


# ---------------------------------------------------------------------------
# co-activation and variance explained


def coactivation_core(activations: dict[int, np.ndarray], top_n: int) -> tuple[dict[int, list[int]], list[int]]:
    """Per modality, the ``top_n`` neurons by mean activation; the core is their intersection."""
    if not activations:
        raise AnalysisError("no activations supplied")
    widths = {a.shape[1] for a in activations.values()}
    if len(widths) != 1:
        raise AnalysisError("activations must come from the same layer")
    width = widths.pop()
    if not 1 <= top_n <= width:
        raise AnalysisError(f"top_n={top_n} must lie in [1, layer width {width}]")
    tops = {}
    for m in sorted(activations):
        means = np.asarray(activations[m], dtype=np.float64).mean(axis=0)
        tops[m] = sorted(int(i) for i in np.argsort(-means, kind="stable")[:top_n])
    core = set(tops[next(iter(tops))])
    for t in tops.values():
        core &= set(t)
    return tops, sorted(core)


def variance_explained(features, covariates, ridge: float = 1e-8) -> float:
    """Variance-weighted R^2 of a least-squares fit of every feature column on the covariates."""
    y = np.asarray(features, dtype=np.float64)
    x = np.asarray(covariates, dtype=np.float64)
    if y.ndim == 1:
        y = y[:, None]
    if x.ndim == 1:
        x = x[:, None]
    n = y.shape[0]
    if x.shape[0] != n:
        raise AnalysisError("features and covariates must be row aligned")
    if x.shape[1] >= n:
        raise AnalysisError("need more rows than covariate columns")
    yc = y - y.mean(axis=0)
    xc = x - x.mean(axis=0)
    total = float((yc ** 2).sum())
    if total <= 0.0:
        log.warning("variance_explained: features have zero variance, returning 0")
        return 0.0
    if np.linalg.matrix_rank(xc) < xc.shape[1]:
        log.warning("variance_explained: rank-deficient covariates, using ridge %.0e", ridge)
        beta = np.linalg.solve(xc.T @ xc + ridge * np.eye(xc.shape[1]), xc.T @ yc)
    else:
        beta, *_ = np.linalg.lstsq(xc, yc, rcond=None)
    resid = float(((yc - xc @ beta) ** 2).sum())
    return float(np.clip(1.0 - resid / total, 0.0, 1.0))


# ---------------------------------------------------------------------------
# 2-D projection


@dataclass
class Projection:
    coords: np.ndarray
    components: np.ndarray
    eigenvalues: np.ndarray
    mean: np.ndarray


def pca_project_2d(features) -> Projection:
    """Coordinates on the top two principal components; each component's largest loading is positive."""
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 3:
        raise AnalysisError("pca_project_2d needs at least three rows")
    mean = x.mean(axis=0)
    xc = x - mean
    cov = xc.T @ xc / (x.shape[0] - 1)
    w, v = np.linalg.eigh(cov)
    order = np.argsort(-w, kind="stable")
    w, v = w[order], v[:, order]
    comps = v[:, :2].copy()
    if comps.shape[1] < 2:
        comps = np.hstack([comps, np.zeros((comps.shape[0], 2 - comps.shape[1]))])
    for j in range(comps.shape[1]):
        if comps[np.argmax(np.abs(comps[:, j])), j] < 0:
            comps[:, j] = -comps[:, j]
    return Projection(xc @ comps, comps, np.clip(w, 0.0, None), mean)


# ---------------------------------------------------------------------------
# run-level report


@dataclass
class AnalysisReport:
    kl: dict[str, dict[int, list[list[float]]]]
    kl_mean_offdiag: dict[str, dict[int, float]]
    k95: dict[str, dict[int, dict[int, int]]]
    core_size: int
    core: list[int]
    top_sets: dict[int, list[int]]
    top_n: int
    r2: dict[str, dict[str, float]]
    projection: dict[str, list[list[float]]]
    projection_tags: list[list[int]]
    modalities: list[int]
    shrinkage: float = DEFAULT_SHRINKAGE
    layer: int = 4

    def to_dict(self) -> dict:
        return {
            "shrinkage": self.shrinkage,
            "layer": self.layer,
            "modalities": self.modalities,
            "kl": {s: {str(y): m for y, m in v.items()} for s, v in self.kl.items()},
            "kl_mean_offdiag": {s: {str(y): m for y, m in v.items()} for s, v in self.kl_mean_offdiag.items()},
            "k95": {s: {str(y): {str(m): k for m, k in d.items()} for y, d in v.items()}
                    for s, v in self.k95.items()},
            "coactivation": {"top_n": self.top_n, "core_size": self.core_size, "core": self.core,
                             "top_sets": {str(m): t for m, t in self.top_sets.items()}},
            "r2": self.r2,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=False, allow_nan=False) + "\n"

    def kl_csv(self) -> str:
        lines = ["space,label,from_modality,to_modality,kl"]
        for s in SPACES:
            for y in sorted(self.kl.get(s, {})):
                mat = self.kl[s][y]
                for i, a in enumerate(self.modalities):
                    for j, b in enumerate(self.modalities):
                        lines.append(f"{s},{y},{a},{b},{mat[i][j]:.9g}")
        return "\n".join(lines) + "\n"

    def projection_csv(self) -> str:
        lines = ["space,modality,label,x,y"]
        for s in SPACES:
            for (m, y), (px, py) in zip(self.projection_tags, self.projection.get(s, [])):
                lines.append(f"{s},{m},{y},{px:.9g},{py:.9g}")
        return "\n".join(lines) + "\n"


def build_bundle(world: SyntheticWorld, params: dict, perceptor_mode: str, designated: int,
                 split: str = "test", layer: int = 4, architecture: str = "mlp"):
    """Semantic (perceptor output) and forensic (detector layer) features of every modality's split.

    Returns the bundle plus per-modality ground-truth essence/style rows for R^2 work.
    """
    bundle = FeatureBundle()
    truth = {}
    for m in range(world.config.num_modalities):
        ds = world.dataset(perceptor_mode, m, designated).subset(split)
        hidden = forensic_features(params, ds.features, architecture, layer)
        for y in (0, 1):
            rows = ds.labels == y
            bundle.add("semantic", m, y, ds.features[rows])
            bundle.add("forensic", m, y, hidden[rows])
        truth[m] = (ds.features, hidden, ds.labels, ds.essence, ds.style)
    return bundle, truth


def analyze(world: SyntheticWorld, params: dict, perceptor_mode: str = "semantic", designated: int = 0,
            split: str = "test", layer: int = 4, shrinkage: float = DEFAULT_SHRINKAGE,
            top_n: int | None = None, architecture: str = "mlp") -> AnalysisReport:
    bundle, truth = build_bundle(world, params, perceptor_mode, designated, split, layer, architecture)
    mods = bundle.modalities("semantic")
    kl, kl_off, k95 = {}, {}, {}
    for s in SPACES:
        kl[s], kl_off[s], k95[s] = {}, {}, {}
        for y in (0, 1):
            mat = kl_matrix(bundle, s, y, shrinkage)
            kl[s][y] = mat.tolist()
            kl_off[s][y] = mean_off_diagonal(mat)
            k95[s][y] = {m: pca_k95(bundle.get(s, m, y)) for m in mods}
    fake_acts = {m: bundle.get("forensic", m, 1) for m in mods}
    width = next(iter(fake_acts.values())).shape[1]
    top_n = max(1, width // 4) if top_n is None else top_n
    tops, core = coactivation_core(fake_acts, top_n)
    r2 = {}
    for s, idx in (("semantic", 0), ("forensic", 1)):
        feats = np.vstack([truth[m][idx] for m in mods])
        ess = np.vstack([truth[m][3] for m in mods])
        sty = np.vstack([truth[m][4] for m in mods])
        r2[s] = {"style": variance_explained(feats, sty), "essence": variance_explained(feats, ess),
                 "joint": variance_explained(feats, np.hstack([ess, sty]))}
    proj, tags = {}, []
    for s in SPACES:
        keys = sorted(k for k in bundle.groups if k[0] == s)
        proj[s] = pca_project_2d(np.vstack([bundle.groups[k] for k in keys])).coords.tolist()
        if s == "semantic":
            tags = [[k[1], k[2]] for k in keys for _ in range(bundle.groups[k].shape[0])]
    return AnalysisReport(kl, kl_off, k95, len(core), core, tops, top_n, r2, proj, tags, mods, shrinkage, layer)


def style_r2_of(features: np.ndarray, style: np.ndarray) -> float:
    return variance_explained(features, style)


def summarize(report: AnalysisReport) -> dict:
    return {
        "kl_semantic": float(np.mean(list(report.kl_mean_offdiag["semantic"].values()))),
        "kl_forensic": float(np.mean(list(report.kl_mean_offdiag["forensic"].values()))),
        "core_size": report.core_size,
        "r2": report.r2,
    }


def as_rows(matrix: Sequence[Sequence[float]]) -> list[list[float]]:
    return [[float(v) for v in row] for row in matrix]
