from nrslam.objectives import OBJECTIVES
from nrslam.priors import PROVIDERS, PriorProvider
from nrslam.objectives.base import BaseObjective


def test_objective_registry():
    for key, cls in OBJECTIVES.items():
        objective = cls()
        assert isinstance(objective, BaseObjective)
        assert objective.name == key, f"OBJECTIVES key {key!r} builds objective named {objective.name!r}"


def test_provider_registry():
    for key, cls in PROVIDERS.items():
        assert issubclass(cls, PriorProvider)
        assert cls.name == key, f"PROVIDERS key {key!r} registers provider named {cls.name!r}"
    assert set(PROVIDERS) == {"files", "oracle"}, f"Unexpected providers: {set(PROVIDERS)}"
