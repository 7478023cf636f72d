"""Frozen assignment policies.

A policy is the dual price vector plus the constraint coefficient rules it
was solved against. Assigning an arrival needs nothing but that arrival's
own record, so probabilities can be computed one at a time as people show
up, in any order.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping, NamedTuple, Sequence

import numpy as np

from .cohort import Cohort, Individual
from .constraints import ATE, ConstraintSpec, DesignProblem, Estimand
from .dual import DualSolution, inner_solve
from .errors import ConfigError, PolicyFileError, PolicyVersionError

POLICY_FORMAT = "allocdesign.policy"
POLICY_VERSION = 1

TREATED = "treated"
CONTROL = "control"


@dataclass(frozen=True)
class Policy:
    """``p(X) = argmin_p w(X) f(p) + (sum_j lam_j coef_j(X)) p`` on ``[gamma, 1-gamma]``.

    ``target_probability`` is the design-sample share of the GATE target set,
    used to weight the variance term for members of that set.
    """

    lam: np.ndarray
    constraints: tuple[ConstraintSpec, ...]
    gamma: float
    estimand: Estimand = ATE
    target_probability: float = 1.0
    provenance: Mapping[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        lam = np.asarray(self.lam, dtype=float).reshape(-1)
        if lam.size != len(self.constraints):
            raise ConfigError("one dual price per constraint is required")
        if np.any(lam < 0):
            raise ConfigError("dual prices must be nonnegative")
        object.__setattr__(self, "lam", lam)
        object.__setattr__(self, "constraints", tuple(self.constraints))

    @classmethod
    def from_solution(cls, problem: DesignProblem, solution: DualSolution) -> "Policy":
        provenance = {
            "problem_hash": problem.fingerprint(),
            "kkt_residual": solution.kkt_residual,
            "iterations": solution.iterations,
            "converged": solution.converged,
            "objective": solution.objective,
            "n_design": problem.n,
        }
        return cls(solution.lam, problem.constraints, problem.gamma, problem.estimand, problem.target_probability, provenance)

    @property
    def needs_group(self) -> bool:
        return any(c.needs_group for c in self.constraints) or bool(self.estimand.groups)

    def aggregated_coef(self, u, group=None) -> np.ndarray:
        u = np.asarray(u, dtype=float)
        a = np.zeros_like(u)
        for lam_j, spec in zip(self.lam, self.constraints):
            if lam_j != 0.0:
                a = a + lam_j * spec.coef(u, group)
        return a

    def objective_weight(self, u, group=None) -> np.ndarray:
        return self.estimand.mask(u, group) / self.target_probability

    def probabilities(self, u, group=None) -> np.ndarray:
        """Vectorised assignment probabilities for columns ``u`` and ``group``."""
        u = np.asarray(u, dtype=float)
        if self.needs_group:
            if group is None or any(g is None for g in np.atleast_1d(np.asarray(group, dtype=object))):
                raise ConfigError("this policy needs a group label for every individual")
        return inner_solve(self.aggregated_coef(u, group), self.gamma, self.objective_weight(u, group))

    def on_cohort(self, cohort: Cohort) -> np.ndarray:
        return self.probabilities(cohort.u, cohort.group)

    def to_dict(self):
        return {
            "format": POLICY_FORMAT,
            "version": POLICY_VERSION,
            "lambda": [float(x) for x in self.lam],
            "gamma": self.gamma,
            "constraints": [c.to_dict() for c in self.constraints],
            "estimand": self.estimand.to_dict(),
            "target_probability": self.target_probability,
            "provenance": dict(self.provenance),
        }

    @classmethod
    def from_dict(cls, d):
        if d.get("format") != POLICY_FORMAT:
            raise PolicyFileError("not a policy document")
        if d.get("version") != POLICY_VERSION:
            raise PolicyVersionError(f"unsupported policy version {d.get('version')!r}")
        try:
            return cls(
                np.asarray(d["lambda"], dtype=float),
                tuple(ConstraintSpec.from_dict(c) for c in d["constraints"]),
                float(d["gamma"]),
                Estimand.from_dict(d["estimand"]),
                float(d["target_probability"]),
                d.get("provenance", {}),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise PolicyFileError(f"malformed policy document: {exc}") from exc


def assign_probability(policy: Policy, individual: Individual) -> float:
    """Assignment probability for a single arrival."""
    return float(policy.probabilities(np.array([individual.u]), np.array([individual.group], dtype=object))[0])


def unit_uniform(seed, ident) -> float:
    digest = hashlib.blake2b(f"{seed}\x1f{ident}".encode(), digest_size=8).digest()
    return int.from_bytes(digest, "big") / 2.0**64


class Assignment(NamedTuple):
    id: str
    p: float
    arm: str
    seed: int


def draw_assignment(policy: Policy, individual: Individual, seed: int) -> Assignment:
    """Bernoulli(p(X)) draw, reproducible from ``(seed, id)`` alone."""
    p = assign_probability(policy, individual)
    arm = TREATED if unit_uniform(seed, individual.id) < p else CONTROL
    return Assignment(individual.id, p, arm, seed)


def draw_assignments(ids: Sequence[str], p, seed: int) -> np.ndarray:
    """Vectorised companion of :func:`draw_assignment`; returns a 0/1 array."""
    v = np.fromiter((unit_uniform(seed, i) for i in ids), dtype=float, count=len(ids))
    return (v < np.asarray(p)).astype(np.int8)


def export_policy(policy: Policy, path):
    Path(path).write_text(json.dumps(policy.to_dict(), indent=2, sort_keys=True))


def import_policy(path) -> Policy:
    text = Path(path).read_text()
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise PolicyFileError(f"corrupt policy file {path}: {exc}") from exc
    if not isinstance(doc, dict):
        raise PolicyFileError(f"corrupt policy file {path}")
    return Policy.from_dict(doc)
