import numpy as np
import pytest

from highratemos import ensemble as ens
from highratemos.data import PredictionSet
from highratemos.errors import ValidationError

IDS = [f"u{i}" for i in range(6)]


def pset(values):
    return PredictionSet(dict(zip(IDS, map(float, values))), {u: "s" for u in IDS})


def test_average_of_identical_sets_is_identity():
    p = pset(np.linspace(1, 5, 6))
    assert ens.average([p, p, p]).entries == p.entries


def test_average_is_elementwise_mean():
    a, b = pset([1, 2, 3, 4, 5, 6]), pset([3, 2, 1, 0, 1, 2])
    assert list(ens.average([a, b]).entries.values()) == [2, 2, 2, 2, 3, 4]


def test_average_bounded_by_members():
    rng = np.random.default_rng(0)
    sets = [pset(rng.uniform(1, 5, 6)) for _ in range(4)]
    stack = np.array([list(s.entries.values()) for s in sets])
    out = np.array(list(ens.average(sets).entries.values()))
    assert np.all(out >= stack.min(axis=0) - 1e-12) and np.all(out <= stack.max(axis=0) + 1e-12)


def test_mismatched_ids_listed():
    a = pset(range(6))
    b = PredictionSet({u: 1.0 for u in IDS[:5] + ["zz"]})
    with pytest.raises(ValidationError, match="u5.*zz|zz.*u5"):
        ens.average([a, b])
    with pytest.raises(ValidationError):
        ens.average([])


def test_setting_members():
    assert ens.SETTINGS["setting1"].members == (("M1", "five_fold_average"), ("M2", "standard_training"),
                                                ("M3", "standard_training"))
    assert ens.SETTINGS["highratemos"].members == (("M1", "best_of_five_fold"), ("M2", "standard_training"),
                                                   ("M3", "standard_training"))
    for name, source in (("setting2", "five_fold_average"), ("setting3", "standard_training"),
                         ("setting4", "best_of_five_fold")):
        assert ens.SETTINGS[name].members == tuple((v, source) for v in ("M1", "M2", "M3"))


def fixture_outputs():
    rng = np.random.default_rng(1)
    cv = {v: ens.FoldOutputs([pset(rng.uniform(1, 5, 6)) for _ in range(5)], list(rng.uniform(0, 1, 5)))
          for v in ("M1", "M2", "M3")}
    std = {v: pset(rng.uniform(1, 5, 6)) for v in ("M1", "M2", "M3")}
    return cv, std


def test_build_follows_members():
    cv, std = fixture_outputs()
    for name, spec in ens.SETTINGS.items():
        expected = np.zeros(6)
        for variant, source in spec.members:
            if source == "standard_training":
                member = std[variant]
            elif source == "five_fold_average":
                member = pset(np.mean([list(s.entries.values()) for s in cv[variant].sets], axis=0))
            else:
                member = cv[variant].sets[int(np.argmax(cv[variant].dev_scores))]
            expected += np.array(list(member.entries.values())) / len(spec.members)
        got = np.array(list(ens.build(name, cv, std).entries.values()))
        np.testing.assert_allclose(got, expected, rtol=0, atol=1e-12)


def test_best_fold_ties_go_to_lowest_index():
    sets = [pset([i] * 6) for i in range(3)]
    assert ens.FoldOutputs(sets, [0.5, 0.9, 0.9]).best() is sets[1]


def test_build_errors():
    cv, std = fixture_outputs()
    with pytest.raises(ValidationError):
        ens.build("setting9", cv, std)
    with pytest.raises(ValidationError, match="M2"):
        ens.build("setting3", cv, {"M1": std["M1"]})
    with pytest.raises(ValidationError):
        ens.EnsembleSpec("x", (("M1", "bogus"),))
