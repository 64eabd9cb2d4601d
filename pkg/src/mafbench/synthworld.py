"""Synthetic multimodal world with ground-truth forgery essence and modality style.

Every sample of modality ``k`` is generated as::

    y      ~ balanced binary labels
    eps    ~ N(0, I_e)                      (real)
           ~ N(delta * u, sigma_f^2 I_e)    (fake)
    s      ~ N(mu_k + beta_k * y * v_k, I_s)
    x      = A_k eps + B_k s + sigma_n * noise

with ``[A_k | B_k]`` orthonormal, so essence and style occupy orthogonal raw
subspaces.  ``beta_k`` is the reversed leak ``beta_test`` for the modality
currently designated as the test modality and ``beta_train`` otherwise.

Perceptors map raw signals to ``D``-dimensional features:

* ``semantic``   shared coordinate frame; low essence gain, high style gain.
* ``isolated``   PCA whitening fit per modality on its own unlabeled data.
* ``random_init`` a fixed random Gaussian projection per modality.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field, fields
from functools import cached_property

import numpy as np

from .metrics import auc

log = logging.getLogger(__name__)

PERCEPTOR_MODES = ("semantic", "isolated", "random_init")
SPLITS = ("train", "val", "test")

# perceptor constants not exposed in WorldConfig
SEMANTIC_ESSENCE_NOISE = 0.05
FILLER_STD = 0.1
# share of each leak direction common to all modalities (the rest is modality-specific)
LEAK_SHARING = 0.0
# spread of the per-modality style means and semantic offsets
STYLE_MEAN_SCALE = 1.0
SEMANTIC_OFFSET_SCALE = 1.0

# independent stream tags, combined with the world seed
_STRUCTURE, _LATENT, _STYLE, _OBS, _SEM_NOISE, _FILLER, _SPLIT, _RANDOM_PROJ, _MC = (
    100, 200, 300, 400, 500, 510, 600, 700, 800)


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class WorldConfig:
    num_modalities: int = 3
    essence_dim: int = 8
    style_dim: int = 24
    raw_dim: int = 96
    perceptor_dim: int = 64
    samples_per_modality: int = 3000
    fake_mean_shift: float = 1.0
    fake_variance_inflation: float = 1.5
    style_leak_train: float = 0.8
    style_leak_test: float = -0.8
    semantic_essence_gain: float = 0.5
    semantic_style_gain: float = 2.0
    observation_noise: float = 0.1
    aligned: bool = True
    seed: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        for name in ("num_modalities", "essence_dim", "style_dim", "raw_dim", "perceptor_dim",
                     "samples_per_modality"):
            if int(getattr(self, name)) <= 0:
                raise ConfigError(f"{name} must be positive")
        if self.essence_dim + self.style_dim > self.raw_dim:
            raise ConfigError("essence_dim + style_dim must not exceed raw_dim")
        if self.essence_dim > self.perceptor_dim:
            raise ConfigError("essence_dim must not exceed perceptor_dim")
        if self.fake_variance_inflation < 1.0:
            raise ConfigError("fake_variance_inflation must be >= 1")
        if self.observation_noise < 0.0:
            raise ConfigError("observation_noise must be >= 0")
        if self.samples_per_modality < 10:
            raise ConfigError("samples_per_modality must be >= 10")

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, data: dict) -> "WorldConfig":
        known = {f.name: f for f in fields(cls)}
        for key in data:
            if key not in known:
                raise ConfigError(f"unknown world config key: {key!r}")
        kwargs = {}
        for key, value in data.items():
            default = known[key].default
            if isinstance(default, bool):
                if not isinstance(value, bool):
                    raise ConfigError(f"{key}: expected boolean, got {type(value).__name__}")
            elif isinstance(default, int):
                if isinstance(value, bool) or not isinstance(value, int):
                    raise ConfigError(f"{key}: expected integer, got {type(value).__name__}")
            elif isinstance(default, float):
                if isinstance(value, bool) or not isinstance(value, (int, float)):
                    raise ConfigError(f"{key}: expected number, got {type(value).__name__}")
                value = float(value)
            kwargs[key] = value
        return cls(**kwargs)


@dataclass
class ModalityDataset:
    modality: int
    features: np.ndarray
    labels: np.ndarray
    split: np.ndarray
    perceptor_mode: str
    essence: np.ndarray | None = None
    style: np.ndarray | None = None

    def __len__(self) -> int:
        return self.labels.shape[0]

    def subset(self, which: str) -> "ModalityDataset":
        mask = self.split == which
        return ModalityDataset(
            self.modality, self.features[mask], self.labels[mask], self.split[mask],
            self.perceptor_mode,
            None if self.essence is None else self.essence[mask],
            None if self.style is None else self.style[mask],
        )

    def to_csv_rows(self) -> list[str]:
        rows = []
        for i in range(len(self)):
            vals = ",".join(repr(float(v)) for v in self.features[i])
            rows.append(f"{self.modality},{i},{self.split[i]},{int(self.labels[i])},{vals}")
        return rows


def csv_header(dim: int) -> str:
    return "modality,row,split,label," + ",".join(f"f{j}" for j in range(dim))


def write_datasets_csv(datasets: list[ModalityDataset], path) -> None:
    dim = datasets[0].features.shape[1]
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(csv_header(dim) + "\n")
        for ds in datasets:
            for row in ds.to_csv_rows():
                fh.write(row + "\n")


def _rng(seed, *tags: int) -> np.random.Generator:
    head = [int(v) for v in np.atleast_1d(seed)]
    return np.random.default_rng([*head, *tags])


def _unit(v: np.ndarray) -> np.ndarray:
    return v / np.linalg.norm(v)


def split_dataset(labels, seed) -> np.ndarray:
    """Stratified 60/20/20 split tags, a function of ``(labels, seed)`` only."""
    labels = np.asarray(labels)
    n = labels.shape[0]
    if n < 10:
        raise ConfigError("need at least 10 rows to split")
    rng = _rng(seed, _SPLIT)
    tags = np.empty(n, dtype="<U5")
    for cls in (0, 1):
        idx = np.flatnonzero(labels == cls)
        idx = idx[rng.permutation(idx.shape[0])]
        n_train = int(round(0.6 * idx.shape[0]))
        n_val = int(round(0.2 * idx.shape[0]))
        tags[idx[:n_train]] = "train"
        tags[idx[n_train:n_train + n_val]] = "val"
        tags[idx[n_train + n_val:]] = "test"
    return tags


@dataclass
class IsolatedPerceptor:
    """Affine whitening map ``z = (x - mean) @ projection`` padded to ``dim`` columns."""

    mean: np.ndarray
    projection: np.ndarray
    rank: int

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return (x - self.mean) @ self.projection


def fit_isolated_perceptor(raw: np.ndarray, dim: int, tol: float = 1e-10) -> IsolatedPerceptor:
    """PCA whitening of unlabeled raw samples onto the top ``min(dim, d)`` components.

    Components are ordered by decreasing eigenvalue; each eigenvector's sign is
    fixed so that its largest-magnitude loading is positive.  Unit variance
    uses the ``n - 1`` convention.
    """
    raw = np.asarray(raw, dtype=np.float64)
    n, d = raw.shape
    if n < dim:
        raise ConfigError(f"need at least {dim} samples to fit an isolated perceptor, got {n}")
    mean = raw.mean(axis=0, keepdims=True)
    centered = raw - mean
    cov = centered.T @ centered / (n - 1)
    evals, evecs = np.linalg.eigh(cov)
    order = np.argsort(-evals, kind="stable")
    evals, evecs = evals[order], evecs[:, order]
    pivot = np.argmax(np.abs(evecs), axis=0)
    evecs = evecs * np.sign(evecs[pivot, np.arange(d)])
    k = min(dim, d)
    keep = evals[:k] > tol * max(evals[0], 1e-300)
    rank = int(keep.sum())
    if rank < dim:
        log.warning("isolated perceptor: only %d usable components for %d outputs; padding with zeros",
                    rank, dim)
    projection = np.zeros((d, dim))
    projection[:, :rank] = evecs[:, :rank] / np.sqrt(evals[:rank])
    return IsolatedPerceptor(mean, projection, rank)


class SyntheticWorld:
    """Generative model regenerated entirely from its :class:`WorldConfig`."""

    def __init__(self, config: WorldConfig):
        config.validate()
        self.config = config
        c = config
        rng = _rng(c.seed, _STRUCTURE)
        self.mixing = []
        for _ in range(c.num_modalities):
            q, r = np.linalg.qr(rng.standard_normal((c.raw_dim, c.essence_dim + c.style_dim)))
            q = q * np.sign(np.diag(r))
            self.mixing.append(q)
        self.style_means = STYLE_MEAN_SCALE * rng.standard_normal((c.num_modalities, c.style_dim))
        self.semantic_offsets = SEMANTIC_OFFSET_SCALE * rng.standard_normal((c.num_modalities, c.style_dim))
        shared = _unit(rng.standard_normal(c.style_dim))
        self.leak_dirs = np.empty((c.num_modalities, c.style_dim))
        basis = [shared]
        for k in range(c.num_modalities):
            own = rng.standard_normal(c.style_dim)
            # modality-specific parts are mutually orthogonal while the style space has room
            for b in basis[: c.style_dim - 1]:
                own = own - (own @ b) * b
            own = _unit(own)
            basis.append(own)
            self.leak_dirs[k] = _unit(np.sqrt(LEAK_SHARING) * shared + np.sqrt(1.0 - LEAK_SHARING) * own)
        self.shift_dir = _unit(rng.standard_normal(c.essence_dim))
        self._raw_cache: dict = {}
        self._dataset_cache: dict = {}
        self._latent_cache: dict = {}

    # -- structure --------------------------------------------------------
    def essence_basis(self, k: int) -> np.ndarray:
        return self.mixing[k][:, : self.config.essence_dim]

    def style_basis(self, k: int) -> np.ndarray:
        return self.mixing[k][:, self.config.essence_dim:]

    def leak(self, k: int, designated: int | None) -> float:
        c = self.config
        return c.style_leak_test if k == designated else c.style_leak_train

    @cached_property
    def split_tags(self) -> list[np.ndarray]:
        return [split_dataset(self._latents(k)[0], self._split_seed(k)) for k in range(self.config.num_modalities)]

    def _split_seed(self, k: int) -> list[int]:
        c = self.config
        return [c.seed] if c.aligned else [c.seed, k]

    def _check_modality(self, k: int) -> None:
        if not 0 <= k < self.config.num_modalities:
            raise ValueError(f"modality {k} out of range 0..{self.config.num_modalities - 1}")

    # -- sampling ---------------------------------------------------------
    def _latents(self, k: int) -> tuple[np.ndarray, np.ndarray]:
        """Labels and essence; shared by all modalities in aligned worlds."""
        c = self.config
        key = 0 if c.aligned else k + 1
        if key not in self._latent_cache:
            rng = _rng(c.seed, _LATENT, key)
            n = c.samples_per_modality
            y = np.zeros(n, dtype=np.int64)
            y[: n // 2] = 1
            y = y[rng.permutation(n)]
            z = _rng(c.seed, _LATENT, key, 1).standard_normal((n, c.essence_dim))
            eps = np.where(y[:, None] == 1,
                           c.fake_mean_shift * self.shift_dir + c.fake_variance_inflation * z, z)
            self._latent_cache[key] = (y, eps)
        return self._latent_cache[key]

    def raw(self, k: int, designated: int | None = None) -> dict[str, np.ndarray]:
        """Raw signals of modality ``k`` with ``designated`` as the test modality."""
        self._check_modality(k)
        key = (k, designated == k)
        if key not in self._raw_cache:
            c = self.config
            y, eps = self._latents(k)
            n = c.samples_per_modality
            noise_s = _rng(c.seed, _STYLE, k).standard_normal((n, c.style_dim))
            style = self.style_means[k] + self.leak(k, designated) * y[:, None] * self.leak_dirs[k] + noise_s
            noise_x = _rng(c.seed, _OBS, k).standard_normal((n, c.raw_dim))
            x = eps @ self.essence_basis(k).T + style @ self.style_basis(k).T + c.observation_noise * noise_x
            self._raw_cache[key] = {"x": x, "y": y, "essence": eps, "style": style}
        return self._raw_cache[key]

    # -- perceptors -------------------------------------------------------
    def semantic_map(self, k: int) -> tuple[np.ndarray, np.ndarray]:
        """Linear part ``(M, offset)`` of the semantic perceptor: ``z = x @ M + offset + noise``."""
        c = self.config
        D, e = c.perceptor_dim, c.essence_dim
        s_used = min(c.style_dim, D - e)
        M = np.zeros((c.raw_dim, D))
        M[:, :e] = c.semantic_essence_gain * self.essence_basis(k)
        M[:, e:e + s_used] = c.semantic_style_gain * self.style_basis(k)[:, :s_used]
        offset = np.zeros(D)
        offset[e:e + s_used] = self.semantic_offsets[k, :s_used]
        return M, offset

    def semantic_noise_std(self) -> np.ndarray:
        c = self.config
        std = np.zeros(c.perceptor_dim)
        std[: c.essence_dim] = SEMANTIC_ESSENCE_NOISE
        std[c.essence_dim + min(c.style_dim, c.perceptor_dim - c.essence_dim):] = FILLER_STD
        return std

    def perceive_semantic(self, k: int, x: np.ndarray, rows=None) -> np.ndarray:
        """Semantic features of raw rows ``x``; ``rows`` are their sample indices (noise is per sample)."""
        self._check_modality(k)
        c = self.config
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        if x.shape[1] != c.raw_dim:
            raise ValueError(f"raw rows have {x.shape[1]} columns, modality {k} emits {c.raw_dim}")
        rows = np.arange(x.shape[0]) if rows is None else np.asarray(rows)
        M, offset = self.semantic_map(k)
        n = c.samples_per_modality
        noise = _rng(c.seed, _SEM_NOISE, k).standard_normal((n, c.perceptor_dim))[rows]
        return x @ M + offset + noise * self.semantic_noise_std()

    def random_projection(self, k: int) -> np.ndarray:
        c = self.config
        return _rng(c.seed, _RANDOM_PROJ, k).normal(0.0, 1.0 / np.sqrt(c.raw_dim), (c.raw_dim, c.perceptor_dim))

    def isolated_perceptor(self, k: int, designated: int | None = None) -> IsolatedPerceptor:
        key = ("iso", k, designated == k)
        if key not in self._dataset_cache:
            raw = self.raw(k, designated)
            unlabeled = raw["x"][self.split_tags[k] == "train"]
            self._dataset_cache[key] = fit_isolated_perceptor(unlabeled, self.config.perceptor_dim)
        return self._dataset_cache[key]

    def feature_map(self, mode: str, k: int, designated: int | None = None):
        """Affine map ``(M, offset, noise_std)`` of a perceptor, for exact density work."""
        c = self.config
        if mode == "semantic":
            M, offset = self.semantic_map(k)
            return M, offset, self.semantic_noise_std()
        if mode == "isolated":
            p = self.isolated_perceptor(k, designated)
            return p.projection, -(p.mean @ p.projection)[0], np.zeros(c.perceptor_dim)
        if mode == "random_init":
            return self.random_projection(k), np.zeros(c.perceptor_dim), np.zeros(c.perceptor_dim)
        raise ConfigError(f"unknown perceptor mode {mode!r}; expected one of {PERCEPTOR_MODES}")

    def dataset(self, mode: str, k: int, designated: int | None = None) -> ModalityDataset:
        if mode not in PERCEPTOR_MODES:
            raise ConfigError(f"unknown perceptor mode {mode!r}; expected one of {PERCEPTOR_MODES}")
        self._check_modality(k)
        key = (mode, k, designated == k)
        if key not in self._dataset_cache:
            raw = self.raw(k, designated)
            if mode == "semantic":
                feats = self.perceive_semantic(k, raw["x"])
            elif mode == "isolated":
                feats = self.isolated_perceptor(k, designated)(raw["x"])
            else:
                feats = raw["x"] @ self.random_projection(k)
            feats.setflags(write=False)
            self._dataset_cache[key] = ModalityDataset(
                k, feats, raw["y"], self.split_tags[k], mode, raw["essence"], raw["style"])
        return self._dataset_cache[key]

    # -- exact densities --------------------------------------------------
    def class_gaussians(self, mode: str, k: int, designated: int | None = None):
        """Exact feature mean and covariance for (real, fake) under a perceptor."""
        c = self.config
        A, B = self.essence_basis(k), self.style_basis(k)
        M, offset, noise_std = self.feature_map(mode, k, designated)
        beta = self.leak(k, designated)
        out = []
        for y in (0, 1):
            m_eps = c.fake_mean_shift * self.shift_dir * y
            v_eps = c.fake_variance_inflation ** 2 if y else 1.0
            m_s = self.style_means[k] + beta * y * self.leak_dirs[k]
            mean_x = A @ m_eps + B @ m_s
            cov_x = v_eps * A @ A.T + B @ B.T + c.observation_noise ** 2 * np.eye(c.raw_dim)
            mean_z = mean_x @ M + offset
            cov_z = M.T @ cov_x @ M + np.diag(noise_std ** 2)
            out.append((mean_z, cov_z))
        return out


def generate_world(config: WorldConfig | None = None) -> SyntheticWorld:
    return SyntheticWorld(config or WorldConfig())


def apply_perceptor(mode: str, world: SyntheticWorld, modality: int, split: str | None = None,
                    designated: int | None = None) -> ModalityDataset:
    """Materialize a modality's dataset under a perceptor; ``split`` selects one partition."""
    ds = world.dataset(mode, modality, designated)
    if split is None:
        return ds
    if split not in SPLITS:
        raise ConfigError(f"unknown split {split!r}")
    return ds.subset(split)


def _gaussian_logpdf(x: np.ndarray, mean: np.ndarray, cov: np.ndarray) -> np.ndarray:
    L = np.linalg.cholesky(cov)
    sol = np.linalg.solve(L, (x - mean).T)
    return -0.5 * (sol ** 2).sum(axis=0) - np.log(np.diag(L)).sum() - 0.5 * mean.shape[0] * np.log(2 * np.pi)


def bayes_auc_oracle(world: SyntheticWorld, modality: int, mode: str = "semantic", n_mc: int = 20000,
                     coords=None, designated: int | None = None, seed: int = 0) -> float:
    """Monte Carlo AUC of the exact likelihood ratio ``p(z | fake) / p(z | real)``.

    ``coords`` restricts the features to a subset of columns (e.g. the
    essence block of the semantic space).  Padded (constant) coordinates of
    rank-deficient isolated perceptors are dropped automatically.
    """
    if n_mc < 100:
        raise ConfigError("n_mc must be at least 100")
    (m0, c0), (m1, c1) = world.class_gaussians(mode, modality, designated)
    idx = np.arange(m0.shape[0]) if coords is None else np.arange(m0.shape[0])[coords]
    live = idx[(np.diag(c0)[idx] > 0) | (np.diag(c1)[idx] > 0)]
    m0, m1 = m0[live], m1[live]
    c0, c1 = c0[np.ix_(live, live)], c1[np.ix_(live, live)]
    rng = _rng(world.config.seed, _MC, modality, seed)
    half = n_mc // 2
    x0 = rng.multivariate_normal(m0, c0, size=half, method="cholesky")
    x1 = rng.multivariate_normal(m1, c1, size=n_mc - half, method="cholesky")
    x = np.vstack([x0, x1])
    labels = np.r_[np.zeros(half, dtype=int), np.ones(n_mc - half, dtype=int)]
    llr = _gaussian_logpdf(x, m1, c1) - _gaussian_logpdf(x, m0, c0)
    return auc(llr, labels)


def world_to_json(world: SyntheticWorld) -> str:
    return world.config.to_json()


def world_from_json(text: str) -> SyntheticWorld:
    return SyntheticWorld(WorldConfig.from_dict(json.loads(text)))
