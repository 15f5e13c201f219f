"""Shared fixtures: experiment runs are cached per session, they are reused
across acceptance criteria and the driver tests."""

from __future__ import annotations

import numpy as np
import pytest

import nested_bddc as nb
from nested_bddc.nested_driver import NestedSolver


class SolveCache:
    def __init__(self):
        self._solvers = {}
        self._results = {}

    def solver(self, spec: nb.ExperimentSpec) -> NestedSolver:
        if spec not in self._solvers:
            self._solvers[spec] = NestedSolver(spec)
        return self._solvers[spec]

    def result(self, spec: nb.ExperimentSpec):
        if spec not in self._results:
            self._results[spec] = self.solver(spec).solve()
        return self._results[spec]


@pytest.fixture(scope="session")
def runs() -> SolveCache:
    return SolveCache()


@pytest.fixture(scope="session")
def rng() -> np.random.Generator:
    return np.random.default_rng(20240817)
