"""Small bundled scenario fixtures."""
from __future__ import annotations

from importlib import resources

from introplan.domain import Scenario, load_scenarios

FIXTURES = ("showcase", "train3")


def fixture_path(name: str):
    if name not in FIXTURES:
        raise KeyError(f"unknown fixture {name!r}; available: {FIXTURES}")
    return resources.files("introplan.data").joinpath(f"{name}.jsonl")


def load_fixture(name: str) -> list[Scenario]:
    with resources.as_file(fixture_path(name)) as path:
        return load_scenarios(path)[0]
