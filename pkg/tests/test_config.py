import json

import pytest

from photorefine.config import PipelineConfig, SynthConfig, load_config
from photorefine.errors import ValidationError


def test_defaults_are_the_published_constants():
    cfg = PipelineConfig()
    m = cfg.match
    assert (m.patch_radius, m.search_radius, m.thres_S, m.thres_delta, m.lattice_spacing, m.lam) == (5, 10, 0.75, 0.05, 16, 10.0)
    e = cfg.em
    assert (e.alpha0, e.sigma0, e.C, e.max_iters, e.angle_tol_deg, e.rho_rel_tol) == (0.75, 0.05, 1.0, 50, 0.05, 1e-4)
    assert cfg.integration.tol == 1e-8 and cfg.integration.max_iters == 2000
    assert cfg.seed == 0 and cfg.threads == 1


def test_toml_and_json_agree(tmp_path):
    (tmp_path / "c.toml").write_text("seed = 7\nthreads = 2\n[match]\nlam = 3.0\n[synth]\nsize = 64\n")
    (tmp_path / "c.json").write_text(json.dumps({"seed": 7, "threads": 2, "match": {"lam": 3.0}, "synth": {"size": 64}}))
    a = load_config(tmp_path / "c.toml")
    b = load_config(tmp_path / "c.json")
    assert a == b
    assert a.match.lam == 3.0 and a.synth.size == 64 and a.seed == 7


def test_round_trip_through_dict():
    cfg = PipelineConfig(seed=3).replace(synth=SynthConfig(size=64))
    assert PipelineConfig.from_dict(cfg.to_dict()) == cfg


@pytest.mark.parametrize(
    "data",
    [
        {"bogus": 1},
        {"match": {"patch": 3}},
        {"match": 5},
        {"seed": "7"},
        {"seed": True},
        {"threads": 0},
        {"match": {"thres_S": 2.0}},
        {"synth": {"motion": "spin"}},
        {"synth": {"corrupt_frames": 20}},
    ],
)
def test_invalid_configs(data):
    with pytest.raises(ValidationError):
        PipelineConfig.from_dict(data)


def test_load_errors(tmp_path):
    with pytest.raises(ValidationError):
        load_config(tmp_path / "missing.toml")
    (tmp_path / "bad.toml").write_text("seed = = 1")
    with pytest.raises(ValidationError):
        load_config(tmp_path / "bad.toml")
