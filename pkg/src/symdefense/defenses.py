"""Symmetry defenses.

``flip`` and ``invert`` counter adversaries unaware of the defense by
classifying a single symmetric view; ``subgroup`` classifies all four views of
the Klein four-group and votes.  Every pipeline treats clean and adversarial
inputs identically: there is no detection step.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .group import A, B, ELEMENTS, apply
from .nn import Network, argmax_lowest, forward_batch

KINDS = ("none", "flip", "invert", "subgroup")


@dataclass(frozen=True)
class Verdict:
    label: int
    mode: str  # "direct", "pair-agreement" or "fallback"
    per_symmetry_labels: tuple[int, ...] | None = None


@dataclass
class DefenseKind:
    kind: str
    models: tuple[Network, ...]

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"defense must be one of {KINDS}, got {self.kind!r}")
        self.models = tuple(self.models)
        want = 2 if self.kind == "invert" else 1
        if len(self.models) != want:
            raise ValueError(f"{self.kind} defense takes {want} model(s), got {len(self.models)}")
        if want == 2:
            m0, m1 = self.models
            if (m0.input_shape, m0.layers, m0.num_classes) != (m1.input_shape, m1.layers, m1.num_classes):
                raise ValueError("M-Orig and M-Invert must share one architecture")

    @property
    def attacked_model(self) -> Network:
        """The model an adversary unaware of the defense attacks (M-Orig for invert)."""
        return self.models[0]


def vote(labels: Sequence[int], logits: np.ndarray) -> Verdict:
    """Agreement vote over the four symmetric views.

    The most frequent label wins when it occurs at least twice.  A two-two tie
    goes to the candidate with the larger summed logit across the four views
    (lower label on exact equality).  Without any agreeing pair the label is
    the argmax of the summed logit vectors.
    """
    labels = tuple(int(v) for v in labels)
    summed = np.asarray(logits, dtype=np.float64).sum(axis=0)
    counts = Counter(labels)
    top = max(counts.values())
    if top < 2:
        return Verdict(int(argmax_lowest(summed)), "fallback", labels)
    candidates = sorted(lbl for lbl, n in counts.items() if n == top)
    best = max(candidates, key=lambda lbl: (summed[lbl], -lbl))
    return Verdict(best, "pair-agreement", labels)


def classify_flip(net: Network, x: np.ndarray) -> Verdict:
    return classify_flip_batch(net, np.asarray(x)[None])[0]


def classify_invert(m_orig: Network, m_invert: Network, x: np.ndarray) -> Verdict:
    return classify_invert_batch(m_orig, m_invert, np.asarray(x)[None])[0]


def classify_subgroup(net: Network, x: np.ndarray) -> Verdict:
    return classify_subgroup_batch(net, np.asarray(x)[None])[0]


def classify_none(net: Network, x: np.ndarray) -> Verdict:
    return classify_none_batch(net, np.asarray(x)[None])[0]


def classify_none_batch(net: Network, x: np.ndarray) -> list[Verdict]:
    return [Verdict(int(v), "direct") for v in argmax_lowest(forward_batch(net, x))]


def classify_flip_batch(net: Network, x: np.ndarray) -> list[Verdict]:
    return classify_none_batch(net, apply(A, x))


def classify_invert_batch(m_orig: Network, m_invert: Network, x: np.ndarray) -> list[Verdict]:
    # m_orig is the surface the adversary sees; the defense never queries it
    return classify_none_batch(m_invert, apply(B, x))


def subgroup_logits(net: Network, x: np.ndarray) -> np.ndarray:
    """Logits of the four views, shape ``(N, 4, num_classes)`` in (e, a, b, c) order."""
    x = np.asarray(x)
    views = np.concatenate([apply(g, x) for g in ELEMENTS])
    logits = forward_batch(net, views)
    return logits.reshape(len(ELEMENTS), len(x), -1).transpose(1, 0, 2)


def classify_subgroup_batch(net: Network, x: np.ndarray) -> list[Verdict]:
    logits = subgroup_logits(net, x)
    return [vote(argmax_lowest(lg), lg) for lg in logits]


def defend_batch(defense: DefenseKind, x: np.ndarray, chunk: int = 250) -> list[Verdict]:
    x = np.asarray(x)
    out: list[Verdict] = []
    for i in range(0, len(x), chunk):
        part = x[i:i + chunk]
        if defense.kind == "none":
            out += classify_none_batch(defense.models[0], part)
        elif defense.kind == "flip":
            out += classify_flip_batch(defense.models[0], part)
        elif defense.kind == "invert":
            out += classify_invert_batch(*defense.models, part)
        else:
            out += classify_subgroup_batch(defense.models[0], part)
    return out
