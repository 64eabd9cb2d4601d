"""Random-search hyperparameter spaces with their default values."""

from __future__ import annotations

import zlib
from dataclasses import dataclass

import numpy as np

MML_ALGORITHMS = ("concat", "ogm")
DG_ALGORITHMS = ("erm", "irm", "mixup", "ib_erm", "eqrm", "erm++", "urm", "cdann")
IMPLEMENTED = MML_ALGORITHMS + DG_ALGORITHMS
# spaces kept so the algorithms can be plugged in later
NOT_IMPLEMENTED = ("dlmg", "sagnet", "condcad")

DISPLAY_NAMES = {
    "concat": "Concat", "ogm": "OGM", "dlmg": "DLMG", "erm": "ERM", "irm": "IRM", "mixup": "Mixup",
    "ib_erm": "IB_ERM", "eqrm": "EQRM", "erm++": "ERM++", "urm": "URM", "cdann": "CDANN",
    "sagnet": "SagNet", "condcad": "CondCAD",
}

ERMPP_EMA_DECAY = 0.999


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class Dist:
    """``kind`` is one of log_uniform (10^U(a,b)), uniform, pow2_uniform (2^U(a,b)), choice."""

    kind: str
    a: float = 0.0
    b: float = 0.0
    options: tuple = ()
    integer: bool = False

    def sample(self, rng: np.random.Generator):
        if self.kind == "choice":
            value = self.options[int(rng.integers(len(self.options)))]
        elif self.kind == "uniform":
            value = rng.uniform(self.a, self.b)
        elif self.kind == "log_uniform":
            value = 10.0 ** rng.uniform(self.a, self.b)
        elif self.kind == "pow2_uniform":
            value = 2.0 ** rng.uniform(self.a, self.b)
        else:
            raise ConfigError(f"unknown distribution {self.kind}")
        return int(value) if self.integer else float(value)

    def bounds(self) -> tuple[float, float]:
        if self.kind == "choice":
            return min(self.options), max(self.options)
        if self.kind == "uniform":
            lo, hi = self.a, self.b
        elif self.kind == "log_uniform":
            lo, hi = 10.0 ** self.a, 10.0 ** self.b
        else:
            lo, hi = 2.0 ** self.a, 2.0 ** self.b
        if self.integer:
            lo, hi = int(lo), int(hi)
        return lo, hi


def log_u(a, b, integer=False):
    return Dist("log_uniform", a, b, integer=integer)


def uni(a, b, integer=False):
    return Dist("uniform", a, b, integer=integer)


def pow2_u(a, b, integer=False):
    return Dist("pow2_uniform", a, b, integer=integer)


def choice(*options):
    return Dist("choice", options=tuple(options))


# (default, distribution)
BATCH = {"batch_size": (32, pow2_u(3, 5.5, integer=True))}

MML_COMMON = {
    "lr": (1e-3, log_u(-4, -2)),
    "momentum": (0.9, uni(0.85, 0.95)),
    "weight_decay": (1e-4, log_u(-6, -2)),
    "patience": (70, uni(60, 80, integer=True)),
}

DG_COMMON = {
    "lr": (5e-5, log_u(-5, -3.5)),
    "weight_decay": (0.0, log_u(-6, -2)),
}

SPECIFIC = {
    "concat": {},
    "ogm": {"alpha": (0.1, uni(0.1, 0.3))},
    "dlmg": {},
    "erm": {},
    "irm": {"lambda": (100.0, log_u(-1, 5)),
            "penalty_anneal_iters": (500, log_u(0, 4, integer=True))},
    "mixup": {"alpha": (0.2, log_u(-1, 1))},
    "cdann": {"lambda": (1.0, log_u(-2, -2)),
              "disc_weight_decay": (0.0, log_u(-6, -2)),
              "d_steps": (1, pow2_u(0, 3, integer=True)),
              "grad_penalty": (0.0, log_u(-2, 1)),
              "beta1": (0.5, choice(0.0, 0.5))},
    "sagnet": {"adv_weight": (0.1, log_u(-2, 1))},
    "ib_erm": {"lambda": (100.0, log_u(-1, 5)),
               "penalty_anneal_iters": (500, log_u(0, 4, integer=True))},
    "condcad": {"lambda": (0.1, choice(1e-4, 1e-3, 1e-2, 1e-1, 1.0, 10.0, 100.0)),
                "temperature": (0.1, choice(0.05, 0.1))},
    "eqrm": {"eqrm_lr": (1e-6, log_u(-7, -5)),
             "quantile": (0.75, uni(0.5, 0.99)),
             "burnin_iters": (2500, log_u(2.5, 3.5, integer=True))},
    "erm++": {"lr": (5e-5, log_u(-5, -3.5))},
    "urm": {"lambda": (0.1, uni(0.0, 0.2))},
}


def family(name: str) -> str:
    if name in MML_ALGORITHMS or name == "dlmg":
        return "MML"
    if name in SPECIFIC:
        return "DG"
    raise ConfigError(f"unknown algorithm {name!r}")


def space(name: str) -> dict[str, tuple]:
    """Full hyperparameter space of an algorithm: name -> (default, Dist)."""
    fam = family(name)
    out = dict(BATCH)
    out.update(MML_COMMON if fam == "MML" else DG_COMMON)
    out.update(SPECIFIC[name])
    return out


def default_or_sample_hparams(name: str, mode: str = "default", rng: np.random.Generator | None = None) -> dict:
    entries = space(name)
    if mode == "default":
        return {k: v[0] for k, v in entries.items()}
    if mode != "sample":
        raise ConfigError(f"mode must be 'default' or 'sample', got {mode!r}")
    if rng is None:
        raise ConfigError("sampling needs an rng")
    # sorted order keeps draws stable when entries are added
    return {k: entries[k][1].sample(rng) for k in sorted(entries)}


def trial_hparams(name: str, trial: int, global_seed: int) -> dict:
    """Trial 0 uses the defaults; later trials are random-search draws."""
    if trial == 0:
        return default_or_sample_hparams(name, "default")
    rng = np.random.default_rng([int(global_seed), _stable_id(name), int(trial), 17])
    return default_or_sample_hparams(name, "sample", rng)


def _stable_id(name: str) -> int:
    return zlib.crc32(name.encode("utf-8"))
