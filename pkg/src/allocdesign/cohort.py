"""Unit-level cohorts, synthetic score generators and the simulated outcome model.

A :class:`Cohort` is stored column-wise (numpy arrays) because every
downstream computation is vectorised over individuals; :class:`Individual`
is the row view used by the per-arrival assignment API.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Mapping, NamedTuple

import numpy as np
from scipy import optimize, special

from .errors import ConfigError, ParseError, ValidationError

TRAIN = "train"
EVAL = "eval"

# Settings mirroring the two county datasets: base rate of the adverse
# outcome and the fraction of rows used for design (the rest is evaluation).
PRESETS = {
    "housing": {"base_rate": 0.54, "train_fraction": 0.4},
    "reentry": {"base_rate": 0.39, "train_fraction": 0.6},
}

DEFAULT_CONCENTRATION = 2.0
DEFAULT_LOGISTIC_SCALE = 1.5

DEFAULT_SCHEMA = {"id": "id", "u": "u", "mu0": "mu0", "group": "group", "split": "split"}


@dataclass(frozen=True)
class Individual:
    """One unit: targeting utility ``u``, baseline risk ``mu0``, optional group."""

    id: str
    u: float
    mu0: float
    group: str | None = None

    def __post_init__(self):
        if not 0.0 <= self.u <= 1.0:
            raise ValidationError(f"u={self.u} outside [0, 1] for individual {self.id!r}")
        if not 0.0 <= self.mu0 <= 1.0:
            raise ValidationError(f"mu0={self.mu0} outside [0, 1] for individual {self.id!r}")


class Cohort:
    """An ordered, column-oriented collection of individuals with split tags.

    Parameters
    ----------
    ids : sequence of str
        Unique identifiers, in row order.
    u, mu0 : array_like
        Targeting utility and baseline adverse-outcome probability, both in [0, 1].
    group : sequence of str or None, optional
        Group labels; ``None`` entries mean "no label".
    split : sequence of {"train", "eval"}, optional
        Partition tags. Defaults to every row being ``"train"``.
    """

    def __init__(self, ids, u, mu0=None, group=None, split=None):
        u = np.asarray(u, dtype=float)
        mu0 = u.copy() if mu0 is None else np.asarray(mu0, dtype=float)
        ids = np.asarray([str(i) for i in ids], dtype=object)
        n = len(ids)
        if n == 0:
            raise ValidationError("cohort must be nonempty")
        if u.shape != (n,) or mu0.shape != (n,):
            raise ValidationError("ids, u and mu0 must have the same length")
        if len(set(ids.tolist())) != n:
            raise ValidationError("ids must be unique within a cohort")
        for name, arr in (("u", u), ("mu0", mu0)):
            bad = np.flatnonzero(~((arr >= 0.0) & (arr <= 1.0)))
            if bad.size:
                raise ValidationError(
                    f"{name}={arr[bad[0]]} outside [0, 1] in row {bad[0] + 1}", row=int(bad[0]) + 1
                )
        if group is not None:
            group = np.asarray([None if g is None else str(g) for g in group], dtype=object)
            if group.shape != (n,):
                raise ValidationError("group must have one label per individual")
        if split is None:
            split = np.full(n, TRAIN, dtype=object)
        else:
            split = np.asarray(list(split), dtype=object)
            if split.shape != (n,):
                raise ValidationError("split must have one tag per individual")
            unknown = set(split.tolist()) - {TRAIN, EVAL}
            if unknown:
                raise ValidationError(f"unknown split tags {sorted(unknown)}")
        self.ids = ids
        self.u = u
        self.mu0 = mu0
        self.group = group
        self.split = split

    def __len__(self):
        return len(self.ids)

    def __getitem__(self, i) -> Individual:
        g = None if self.group is None else self.group[i]
        return Individual(self.ids[i], float(self.u[i]), float(self.mu0[i]), g)

    def __iter__(self) -> Iterator[Individual]:
        for i in range(len(self)):
            yield self[i]

    def __eq__(self, other):
        if not isinstance(other, Cohort):
            return NotImplemented
        same_group = (self.group is None and other.group is None) or (
            self.group is not None
            and other.group is not None
            and self.group.tolist() == other.group.tolist()
        )
        return (
            self.ids.tolist() == other.ids.tolist()
            and np.array_equal(self.u, other.u)
            and np.array_equal(self.mu0, other.mu0)
            and same_group
            and self.split.tolist() == other.split.tolist()
        )

    def __repr__(self):
        return f"Cohort(n={len(self)}, train={self.n_train}, eval={self.n_eval})"

    @property
    def n_train(self):
        return int(np.sum(self.split == TRAIN))

    @property
    def n_eval(self):
        return int(np.sum(self.split == EVAL))

    def subset(self, mask) -> "Cohort":
        mask = np.asarray(mask)
        return Cohort(
            self.ids[mask],
            self.u[mask],
            self.mu0[mask],
            None if self.group is None else self.group[mask],
            self.split[mask],
        )

    def part(self, which: str) -> "Cohort":
        """Rows tagged ``which`` ("train" or "eval")."""
        mask = self.split == which
        if not mask.any():
            raise ValidationError(f"cohort has no {which!r} rows")
        return self.subset(mask)

    def train(self) -> "Cohort":
        return self.part(TRAIN)

    def evaluation(self) -> "Cohort":
        return self.part(EVAL)

    def with_split(self, train_fraction: float, seed=None) -> "Cohort":
        """Return a copy with a fresh random train/eval partition."""
        if not 0.0 < train_fraction < 1.0:
            raise ConfigError("train_fraction must lie in (0, 1)")
        n = len(self)
        rng = np.random.default_rng(seed)
        n_train = int(round(train_fraction * n))
        split = np.full(n, EVAL, dtype=object)
        split[rng.permutation(n)[:n_train]] = TRAIN
        return Cohort(self.ids, self.u, self.mu0, self.group, split)

    def group_probability(self, label: str) -> float:
        if self.group is None:
            return 0.0
        return float(np.mean(self.group == label))


@dataclass(frozen=True)
class OutcomeModel:
    """Binary outcomes with a treatment effect proportional to baseline risk.

    ``Y(0) ~ Bernoulli(mu0)`` and ``Y(1) ~ Bernoulli(mu0 - beta * mu0)``.
    """

    beta: float

    def __post_init__(self):
        if not 0.0 <= self.beta < 1.0:
            raise ConfigError(f"beta must lie in [0, 1), got {self.beta}")

    def cate(self, mu0):
        return self.beta * np.asarray(mu0, dtype=float)

    def mu1(self, mu0):
        mu0 = np.asarray(mu0, dtype=float)
        return mu0 - self.cate(mu0)

    def ate(self, cohort: Cohort) -> float:
        return float(np.mean(self.cate(cohort.mu0)))


class PotentialOutcomes(NamedTuple):
    ids: np.ndarray
    y0: np.ndarray
    y1: np.ndarray


def draw_potential_outcomes(cohort: Cohort, model: OutcomeModel, seed=None) -> PotentialOutcomes:
    """Draw ``(Y0, Y1)`` per individual from one shared uniform each.

    Sharing the uniform keeps both marginals exact while guaranteeing
    ``Y1 <= Y0`` (and ``Y1 == Y0`` when ``beta == 0``).
    """
    rng = np.random.default_rng(seed)
    v = rng.random(len(cohort))
    y0 = (v < cohort.mu0).astype(np.int8)
    y1 = (v < model.mu1(cohort.mu0)).astype(np.int8)
    return PotentialOutcomes(cohort.ids, y0, y1)


def _logistic_intercept(base_rate, scale):
    # E[sigmoid(b + scale * Z)] for Z ~ N(0, 1) by Gauss-Hermite quadrature.
    nodes, weights = np.polynomial.hermite_e.hermegauss(80)
    weights = weights / weights.sum()

    def mean_risk(b):
        return float(np.dot(weights, special.expit(b + scale * nodes))) - base_rate

    return optimize.brentq(mean_risk, -50.0, 50.0, xtol=1e-14)


def _beta_scores(rng, n, base_rate, concentration=DEFAULT_CONCENTRATION, **_):
    if concentration <= 0:
        raise ConfigError("concentration must be positive")
    return rng.beta(base_rate * concentration, (1.0 - base_rate) * concentration, size=n)


def _logistic_scores(rng, n, base_rate, scale=DEFAULT_LOGISTIC_SCALE, n_features=5, **_):
    weights = np.full(n_features, scale / np.sqrt(n_features))
    x = rng.standard_normal((n, n_features))
    return special.expit(_logistic_intercept(base_rate, scale) + x @ weights)


GENERATORS = {"beta": _beta_scores, "logistic": _logistic_scores}


def beta_law(base_rate, concentration=DEFAULT_CONCENTRATION):
    """The frozen scipy law used by the ``"beta"`` generator."""
    from scipy import stats

    return stats.beta(base_rate * concentration, (1.0 - base_rate) * concentration)


def synthesize_cohort(
    n: int,
    base_rate: float,
    score_dgp: str = "beta",
    seed=None,
    *,
    train_fraction: float = 0.4,
    groups: Mapping[str, float] | None = None,
    **dgp_params,
) -> Cohort:
    """Draw a synthetic cohort whose baseline risk has mean ``base_rate``.

    ``u`` is set equal to ``mu0``. ``groups`` maps labels to probabilities;
    labels are drawn independently of the scores.
    """
    if n < 1:
        raise ConfigError("n must be at least 1")
    if not 0.0 < base_rate < 1.0:
        raise ConfigError("base_rate must lie in (0, 1)")
    try:
        generator = GENERATORS[score_dgp]
    except KeyError:
        raise ConfigError(f"unknown score generator {score_dgp!r}; choose from {sorted(GENERATORS)}") from None
    rng = np.random.default_rng(seed)
    mu0 = np.clip(generator(rng, n, base_rate, **dgp_params), 0.0, 1.0)
    group = None
    if groups:
        labels = list(groups)
        probs = np.asarray([groups[k] for k in labels], dtype=float)
        group = np.asarray(labels, dtype=object)[rng.choice(len(labels), size=n, p=probs / probs.sum())]
    split = np.full(n, EVAL, dtype=object)
    split[rng.permutation(n)[: int(round(train_fraction * n))]] = TRAIN
    width = len(str(n - 1))
    ids = [f"s{i:0{width}d}" for i in range(n)]
    return Cohort(ids, mu0, mu0.copy(), group, split)


def _parse_unit(text, name, row):
    try:
        value = float(text)
    except (TypeError, ValueError):
        raise ParseError(f"row {row}: cannot parse {name}={text!r}", row=row) from None
    if not 0.0 <= value <= 1.0:
        raise ValidationError(f"row {row}: {name}={value} outside [0, 1]", row=row)
    return value


def iter_rows(path, schema: Mapping[str, str] | None = None, delimiter=","):
    """Yield ``(row_number, Individual, split_tag)`` from a delimited file.

    ``schema`` maps logical fields (id, u, mu0, group, split) to column
    names. When ``mu0`` has no column it is copied from ``u``.
    """
    cols = dict(DEFAULT_SCHEMA)
    if schema:
        cols.update(schema)
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.DictReader(fh, delimiter=delimiter)
        header = reader.fieldnames or []
        for required in ("id", "u"):
            if cols[required] not in header:
                raise ParseError(f"missing required column {cols[required]!r}")
        mu0_col = cols["mu0"] if cols["mu0"] in header else cols["u"]
        group_col = cols["group"] if cols["group"] in header else None
        split_col = cols["split"] if cols["split"] in header else None
        for row, rec in enumerate(reader, start=1):
            if None in rec or any(rec.get(c) is None for c in header):
                raise ParseError(f"row {row}: wrong number of fields", row=row)
            ident = rec[cols["id"]]
            if ident is None or ident == "":
                raise ParseError(f"row {row}: missing id", row=row)
            u = _parse_unit(rec[cols["u"]], "u", row)
            mu0 = _parse_unit(rec[mu0_col], "mu0", row)
            group = rec[group_col] if group_col and rec[group_col] != "" else None
            tag = rec[split_col] if split_col else None
            if tag not in (None, TRAIN, EVAL):
                raise ValidationError(f"row {row}: unknown split tag {tag!r}", row=row)
            yield row, Individual(ident, u, mu0, group), tag


def load_cohort(path, schema: Mapping[str, str] | None = None, delimiter=",") -> Cohort:
    """Read a cohort from a delimited file, preserving row order.

    Rows without a split column are tagged ``"train"``.
    """
    ids, u, mu0, group, split = [], [], [], [], []
    for _, ind, tag in iter_rows(path, schema, delimiter):
        ids.append(ind.id)
        u.append(ind.u)
        mu0.append(ind.mu0)
        group.append(ind.group)
        split.append(tag or TRAIN)
    if not ids:
        raise ValidationError("cohort file has no rows")
    has_group = any(g is not None for g in group)
    return Cohort(ids, u, mu0, group if has_group else None, split)


def write_cohort(cohort: Cohort, path, delimiter=","):
    """Write a cohort in the same format :func:`load_cohort` reads."""
    fields = ["id", "u", "mu0"] + (["group"] if cohort.group is not None else []) + ["split"]
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, delimiter=delimiter, lineterminator="\n")
        w.writerow(fields)
        for i in range(len(cohort)):
            row = [cohort.ids[i], repr(float(cohort.u[i])), repr(float(cohort.mu0[i]))]
            if cohort.group is not None:
                row.append("" if cohort.group[i] is None else cohort.group[i])
            row.append(cohort.split[i])
            w.writerow(row)
