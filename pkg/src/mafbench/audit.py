"""Data-access audit: every dataset read made by training, selection or evaluation is logged here.

A read is ``(modality, split, purpose, protocol)``.  Purposes:

* ``train``        mini-batches for the optimizer
* ``tm_val``       validation split of a training modality (TM selection signal)
* ``loo_val``      validation split of the pseudo-held-out modality of a LOO fold
* ``oracle_val``   validation split of the held-out modality (Oracle selection signal)
* ``final_test``   the held-out modality's test split, read once at final evaluation
* ``perceptor_fit`` unlabeled train rows used to fit an isolated perceptor (exempt)

Rules are checked at read time; a violation raises :class:`AuditViolation`.
"""

from __future__ import annotations

from dataclasses import dataclass, field

PROTOCOLS = ("tm", "loo", "oracle")
PURPOSES = ("train", "tm_val", "loo_val", "oracle_val", "final_test", "perceptor_fit")


class AuditViolation(RuntimeError):
    """A read broke the protocol's data-access rules."""


@dataclass(frozen=True)
class Read:
    modality: int
    split: str
    purpose: str
    protocol: str
    phase: str

    def as_tuple(self) -> tuple:
        return (self.modality, self.split, self.purpose, self.protocol, self.phase)


@dataclass
class AccessAudit:
    """Per-run audit log bound to one held-out modality."""

    held_out: int
    reads: list[Read] = field(default_factory=list)
    phase: str = "train"

    def enter_final(self) -> None:
        self.phase = "final"

    def record(self, modality: int, split: str, purpose: str, protocol: str = "any") -> None:
        if purpose not in PURPOSES:
            raise ValueError(f"unknown read purpose {purpose!r}")
        read = Read(int(modality), split, purpose, protocol, self.phase)
        problem = check_read(read, self.held_out)
        if problem:
            raise AuditViolation(f"{problem}: {read}")
        self.reads.append(read)

    def violations(self) -> list[str]:
        return [msg for msg in (check_read(r, self.held_out) for r in self.reads) if msg]

    def counts(self) -> dict[str, int]:
        out: dict[str, int] = {}
        for r in self.reads:
            key = f"{r.purpose}:{r.protocol}"
            out[key] = out.get(key, 0) + 1
        return dict(sorted(out.items()))


def check_read(read: Read, held_out: int) -> str:
    """Empty string when the read is allowed, otherwise the reason it is not."""
    if read.purpose == "perceptor_fit":
        return "" if read.split == "train" else "perceptor fit outside the train split"
    on_held_out = read.modality == held_out
    if read.split == "test":
        if not on_held_out:
            return "test split of a training modality read"
        if read.purpose != "final_test" or read.phase != "final":
            return "held-out test split read before final evaluation"
        return ""
    if not on_held_out:
        if read.purpose == "oracle_val":
            return "oracle read pointed at a training modality"
        return ""
    # held-out modality, train or val split
    if read.purpose == "train":
        return "training batch drawn from the held-out modality"
    if read.protocol in ("tm", "loo"):
        return f"{read.protocol.upper()} protocol read held-out data"
    if read.purpose != "oracle_val" or read.split != "val":
        return "held-out read other than the oracle validation split"
    return ""
