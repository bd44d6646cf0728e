"""Equal-weight prediction ensembles and the named member settings."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import PredictionSet
from .errors import ValidationError

FIVE_FOLD_AVERAGE = "five_fold_average"
BEST_OF_FIVE_FOLD = "best_of_five_fold"
STANDARD_TRAINING = "standard_training"
SOURCES = (FIVE_FOLD_AVERAGE, BEST_OF_FIVE_FOLD, STANDARD_TRAINING)


@dataclass(frozen=True)
class EnsembleSpec:
    name: str
    members: tuple[tuple[str, str], ...]  # (variant, source)

    def __post_init__(self):
        if not self.members:
            raise ValidationError(f"ensemble {self.name!r} has no members")
        for variant, source in self.members:
            if source not in SOURCES:
                raise ValidationError(f"unknown prediction source {source!r}")


def _all(source):
    return tuple((v, source) for v in ("M1", "M2", "M3"))


SETTINGS = {
    "setting1": EnsembleSpec("setting1", (("M1", FIVE_FOLD_AVERAGE), ("M2", STANDARD_TRAINING),
                                          ("M3", STANDARD_TRAINING))),
    "setting2": EnsembleSpec("setting2", _all(FIVE_FOLD_AVERAGE)),
    "setting3": EnsembleSpec("setting3", _all(STANDARD_TRAINING)),
    "setting4": EnsembleSpec("setting4", _all(BEST_OF_FIVE_FOLD)),
    "highratemos": EnsembleSpec("highratemos", (("M1", BEST_OF_FIVE_FOLD), ("M2", STANDARD_TRAINING),
                                                ("M3", STANDARD_TRAINING))),
}


def average(sets: list[PredictionSet]) -> PredictionSet:
    """Per-utterance arithmetic mean of scores; every set must cover the same ids."""
    if not sets:
        raise ValidationError("nothing to average")
    ids = set(sets[0].entries)
    for other in sets[1:]:
        if set(other.entries) != ids:
            diff = sorted(ids ^ set(other.entries))
            raise ValidationError(f"prediction sets cover different utterances: {', '.join(diff[:10])}")
    order = list(sets[0].entries)
    scores = np.array([[s.entries[u] for u in order] for s in sets])
    system_of = {}
    for s in reversed(sets):
        system_of.update({u: sys for u, sys in s.system_of.items() if sys})
    return PredictionSet(dict(zip(order, scores.mean(axis=0).tolist())), {u: system_of.get(u, "") for u in order})


@dataclass
class FoldOutputs:
    """One variant's k fold-models scored on a common target set."""

    sets: list[PredictionSet]
    dev_scores: list[float]

    def average(self) -> PredictionSet:
        return average(self.sets)

    def best(self) -> PredictionSet:
        return self.sets[int(np.argmax(self.dev_scores))]


def resolve(variant: str, source: str, cv_outputs: dict[str, FoldOutputs],
            standard_outputs: dict[str, PredictionSet]) -> PredictionSet:
    if source == STANDARD_TRAINING:
        if variant not in standard_outputs:
            raise ValidationError(f"missing source ({variant}, {source})")
        return standard_outputs[variant]
    if variant not in cv_outputs:
        raise ValidationError(f"missing source ({variant}, {source})")
    folds = cv_outputs[variant]
    return folds.average() if source == FIVE_FOLD_AVERAGE else folds.best()


def build(spec_name: str, cv_outputs: dict[str, FoldOutputs] | None = None,
          standard_outputs: dict[str, PredictionSet] | None = None) -> PredictionSet:
    try:
        spec = SETTINGS[spec_name]
    except KeyError:
        raise ValidationError(f"unknown ensemble {spec_name!r}; choose from {', '.join(SETTINGS)}") from None
    cv_outputs = cv_outputs or {}
    standard_outputs = standard_outputs or {}
    return average([resolve(v, s, cv_outputs, standard_outputs) for v, s in spec.members])
