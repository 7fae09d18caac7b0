import pytest

from regiohydro.config import load_config, parse_config
from regiohydro.errors import ConfigError


def test_defaults_without_sections():
    cfg = parse_config("")
    assert cfg.optimizer.max_iter == 100
    assert cfg.bayes_size == 512
    assert cfg.methods[0] == "uniform_local"


def test_values_are_typed(tmp_path):
    text = """
[data]
drainage = fd.asc
descriptors = a.asc, b.asc
forcing = f.bin
gauges = g.csv
observed = q.csv

[experiment]
methods = ur, annr
donors = G1, G2
ungauged = G3
p1 = 0:100
p2 = 100:200
seed = 9

[optimizer]
mlp_hidden = 16, 8
adam_lr = 0.01

[synthetic]
truth_spread = 0.5, 0.5, 0.1, 0.5
"""
    path = tmp_path / "exp.ini"
    path.write_text(text)
    cfg = load_config(path)
    assert cfg.data["descriptors"] == (tmp_path / "a.asc", tmp_path / "b.asc")
    assert cfg.methods == ("ur", "annr")
    assert cfg.periods == {"P1": (0, 100), "P2": (100, 200)}
    assert cfg.optimizer.mlp_hidden == (16, 8) and cfg.optimizer.seed == 9
    assert cfg.synthetic.truth_spread == (0.5, 0.5, 0.1, 0.5)
    assert len(cfg.digest) == 64


@pytest.mark.parametrize("text,fragment", [
    ("[optimizer]\nmax_itr = 3\n", "max_itr"),
    ("[optimiser]\n", "optimiser"),
    ("[optimizer]\nmax_iter = lots\n", "max_iter"),
    ("[experiment]\nmethods = ur, magic\n", "magic"),
    ("[experiment]\ndonors = A\nungauged = A\n", "A"),
    ("[experiment]\np1 = 0:10\np2 = 5:20\n", "overlap"),
    ("[experiment]\np1 = 0:10\n", "p2"),
])
def test_config_errors(text, fragment):
    with pytest.raises(ConfigError, match=fragment):
        parse_config(text)


def test_missing_file(tmp_path):
    with pytest.raises(ConfigError, match="missing.ini"):
        load_config(tmp_path / "missing.ini")
