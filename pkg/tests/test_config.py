import copy
import math

import pytest
import yaml

from deepmartnet.config import PRESETS, RunConfig, dump_config, load_config, parse_config, preset, to_dict
from deepmartnet.errors import InvalidInput


def test_every_preset_validates():
    for name in PRESETS:
        cfg = preset(name)
        assert isinstance(cfg, RunConfig) and cfg.name == name


@pytest.mark.parametrize("name", list(PRESETS))
def test_round_trip(name, tmp_path):
    cfg = preset(name)
    path = tmp_path / "c.yaml"
    path.write_text(dump_config(cfg))
    assert load_config(path) == cfg
    assert parse_config(yaml.safe_load(yaml.safe_dump(to_dict(cfg)))) == cfg


# (preset, dotted field, expected value) taken from the published run listings
FIDELITY = [
    ("pbe-cube-d20", "problem.params.d", 20),
    ("pbe-cube-d20", "sde.M", 100_000),
    ("pbe-cube-d20", "sde.dt", 0.01),
    ("pbe-cube-d20", "sde.T", 9.0),
    ("pbe-cube-d20", "train.batch_size", 1000),
    ("pbe-cube-d20", "network.layers", [20, 64, 32, 1]),
    ("pbe-cube-d20", "network.activations", ["tanh", "gelu_tanh"]),
    ("pbe-cube-d20", "train.weights.alpha_bdry", 1000.0),
    ("pbe-cube-d20", "train.weights.alpha_fk", 10.0),
    ("pbe-3x0", "sde.counts", [40_000, 40_000, 40_000]),
    ("pbe-3x0", "sde.T", 9.0),
    ("pbe-ball-d100", "problem.params.d", 100),
    ("pbe-ball-d100", "sde.dt", 0.005),
    ("pbe-ball-d100", "sde.T", 0.25),
    ("pbe-ball-d100", "network.layers", [100, 128, 32, 1]),
    ("pbe-sinh-d10", "problem.params.d", 10),
    ("pbe-sinh-d10", "train.epochs", 3000),
    ("laplace-eig-d10", "problem.params.d", 10),
    ("laplace-eig-d10", "sde.M", 100_000),
    ("laplace-eig-d10", "sde.T", 0.6),
    ("laplace-eig-d10", "train.batch_size", 1000),
    ("laplace-eig-d10", "train.weights.alpha_bdry", 1000.0),
    ("laplace-eig-d10", "train.weights.alpha_normal", 10.0),
    ("laplace-eig-d10", "train.weights.alpha_eig", 2.5e-8),
    ("laplace-eig-d10", "train.schedule.initial", 0.02),
    ("laplace-eig-d10", "train.schedule.decay_factor", 0.995),
    ("laplace-eig-d10", "train.schedule.decay_every", 100),
    ("fp-eig-d5", "sde.M", 9000),
    ("fp-eig-d5", "sde.N", 1350),
    ("fp-eig-d5", "sde.T", 9.0),
    ("fp-eig-d5", "train.k", 3),
    ("fp-eig-d5", "train.epochs", 10_000),
    ("fp-eig-d5", "train.m1", 200.0),
    ("fp-eig-d5", "train.m2", 25.0),
    ("fp-eig-d5", "train.schedule.initial", 1 / 150),
    ("fp-eig-d5", "train.schedule.decay_factor", 0.5),
    ("fp-eig-d5", "train.schedule.decay_every", 500),
    ("fp-eig-d5", "train.weights.alpha_normal", 50.0),
    ("fp-eig-d5", "train.weights.c_norm", 30.0),
    ("fp-eig-d5", "train.weights.p", 0.375),
    ("fp-eig-d5", "train.weights.q", 1.0),
    ("fp-eig-d5", "train.weights.r", 0.75),
    ("fp-eig-d5", "network.layers", [5, 30, 15, 1]),
    ("fp-eig-d200", "sde.M", 24_000),
    ("fp-eig-d200", "sde.N", 1300),
    ("fp-eig-d200", "sde.T", 9.0),
]


def lookup(obj, dotted):
    for part in dotted.split("."):
        obj = obj[part] if isinstance(obj, dict) else getattr(obj, part)
    return obj


@pytest.mark.parametrize("name,field,expected", FIDELITY)
def test_preset_fidelity(name, field, expected):
    got = lookup(preset(name), field)
    if isinstance(expected, float):
        assert got == pytest.approx(expected, rel=1e-12)
    else:
        assert got == expected


def test_three_start_preset_shares_x0_per_ensemble():
    cfg = preset("pbe-3x0")
    starts, counts = cfg.sde.start_points(20)
    assert [s[0] for s in starts] == [0.1, 0.3, 0.7]
    assert sum(counts) == 120_000


def broken(name, mutate):
    data = copy.deepcopy(PRESETS[name])
    mutate(data)
    return data


@pytest.mark.parametrize(
    "mutate,field",
    [
        (lambda d: d["sde"].update(T=8.0), "sde.T"),
        (lambda d: d["network"].update(layers=[19, 64, 32, 1]), "network.layers"),
        (lambda d: d["network"].update(activations=["tanh", "swish"]), "network.activations[1]"),
        (lambda d: d["sde"].update(M="many"), "sde.M"),
        (lambda d: d["train"].update(epochs=-5), "train"),
        (lambda d: d["train"]["weights"].update(alpha_bdry=-1.0), "train.weights"),
        (lambda d: d["train"].update(colour="red"), "train.colour"),
        (lambda d: d["problem"].update(name="heat"), "problem.name"),
        (lambda d: d["sde"].update(x0=[0.0] * 3), "sde.x0"),
        (lambda d: d["train"].update(batch_size=10**6), "train.batch_size"),
        (lambda d: d.pop("sde"), "sde"),
    ],
)
def test_validation_names_field(mutate, field):
    with pytest.raises(InvalidInput) as info:
        parse_config(broken("pbe-cube-d20", mutate))
    assert str(info.value).startswith(field)


def test_multi_start_validation():
    data = broken("pbe-3x0", lambda d: d["sde"].update(counts=[1, 2]))
    with pytest.raises(InvalidInput, match="sde.counts"):
        parse_config(data)
    data = broken("pbe-3x0", lambda d: d["sde"]["starts"][0].__setitem__(0, 1.5))
    with pytest.raises(InvalidInput, match="not inside"):
        parse_config(data)


def test_unknown_preset_and_bad_yaml(tmp_path):
    with pytest.raises(InvalidInput, match="unknown preset"):
        preset("pbe-cube-d21")
    bad = tmp_path / "bad.yaml"
    bad.write_text("name: [unclosed\n")
    with pytest.raises(InvalidInput, match="YAML"):
        load_config(bad)


def test_fp_preset_time_grid():
    for name in ("fp-eig-d5", "fp-eig-d20", "fp-eig-d200"):
        s = preset(name).sde
        assert math.isclose(s.N * s.dt, s.T, rel_tol=1e-12)
