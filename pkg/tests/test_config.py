import pytest
from hypothesis import given
from hypothesis import strategies as st

from hatsim.config import (
    PRESETS,
    ExperimentConfig,
    StrategySpec,
    dumps,
    load,
    loads,
    parse_strategy,
    validate,
)
from hatsim.errors import ConfigError, InvalidInputError


def test_defaults():
    cfg = ExperimentConfig()
    assert cfg.selection.eta == 0.25 and cfg.selection.omega == 0.75 and cfg.selection.n_p == 3
    assert cfg.training.m == 2.0 and cfg.training.b is None
    assert cfg.mrse.layout == (8, 4, 4, 4, 4)
    assert cfg.strategy == PRESETS["hat"]


def test_loads_overrides_and_keeps_defaults():
    cfg = loads("""
[run]
seed = 7

[selection]
eta = 0.5   # inline comment
n_p = 2

[training]
b = auto

[fleet]
library = 16x8, 32
""")
    assert cfg.seed == 7
    assert cfg.selection.eta == 0.5 and cfg.selection.n_p == 2
    assert cfg.selection.omega == 0.75
    assert cfg.training.b is None
    assert cfg.fleet.library == ((16, 8), (32,))


def test_round_trip_through_text():
    cfg = ExperimentConfig().replace(**{
        "seed": 3, "selection.eta": 0.1, "training.b": 0.45, "selection.per_class_entropy": True,
        "mrse.layout": (4, 1, 1), "strategy": PRESETS["equal_distill"]})
    assert loads(dumps(cfg)) == cfg
    assert loads(dumps(ExperimentConfig())) == ExperimentConfig()


@given(st.floats(0.01, 1.0), st.integers(1, 20), st.floats(0.01, 1.0), st.integers(0, 10**6))
def test_round_trip_property(eta, n_p, gamma, seed):
    cfg = ExperimentConfig().replace(**{"seed": seed, "selection.eta": eta, "selection.n_p": n_p,
                                        "target.gamma": gamma})
    assert loads(dumps(cfg)) == cfg


@pytest.mark.parametrize("text, line, fragment", [
    ("[task]\nnum_classes = 5\n\n[bogus]\nx = 1\n", 4, "unknown section"),
    ("[task]\nnum_classes = 5\nbogus = 1\n", 3, "unknown key 'bogus'"),
    ("[selection]\neta = 0.2\nn_p = three\n", 3, "n_p"),
    ("[selection]\neta = 1.5\n", 2, "selection.eta"),
    ("[training]\nkd_full_refresh = maybe\n", 2, "boolean"),
    ("[strategy]\nfusion = soup\n", 1, "unknown fusion"),
    ("[run]\nseed = 1\nverbose = 2\n", 3, "unknown key"),
])
def test_errors_carry_line_numbers(text, line, fragment):
    with pytest.raises(ConfigError) as exc:
        loads(text)
    assert exc.value.line == line
    assert str(exc.value).startswith(f"line {line}: ")
    assert fragment in str(exc.value)


def test_unparseable_text():
    with pytest.raises(ConfigError) as exc:
        loads("no section header\n")
    assert exc.value.line == 1


def test_load_from_file(tmp_path):
    p = tmp_path / "c.ini"
    p.write_text("[target]\ngamma = 0.3\n")
    assert load(p).target.gamma == 0.3


def test_parse_strategy():
    assert parse_strategy("supervised") == StrategySpec("hat", "hat_mixer", "none")
    assert parse_strategy("all/equal/fixed_alpha") == StrategySpec("all", "equal", "fixed_alpha")
    assert parse_strategy("all/equal/fixed_alpha").name == "all/equal/fixed_alpha"
    assert parse_strategy("no_coarse").name == "no_coarse"
    for bad in ("unknown", "a/b", "hat/hat_mixer/bogus"):
        with pytest.raises(InvalidInputError):
            parse_strategy(bad)


def test_every_preset_names_itself():
    for name, spec in PRESETS.items():
        assert spec.name == name


def test_validate_catches_programmatic_overrides():
    with pytest.raises(ConfigError):
        validate(ExperimentConfig().replace(**{"selection.n_p": 0}))
    with pytest.raises(ConfigError):
        validate(ExperimentConfig().replace(**{"mrse.layout": (8,)}))
    with pytest.raises(ConfigError):
        validate(ExperimentConfig().replace(**{"fleet.source_labels": 9}))
    validate(ExperimentConfig())
