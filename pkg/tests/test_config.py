import json

import pytest

from pgvl.config import ConfigFileError, RunConfig, config_from_dict, parse_config


def test_defaults_follow_the_reference_configuration():
    cfg = RunConfig()
    assert cfg.fusion.G == (2, 2, 2) and cfg.fusion.D == (512,)
    assert cfg.variant_spec().graphs()[0].spec.channels(0) == 64


def test_empty_document_gives_defaults():
    assert parse_config("") == RunConfig()
    assert parse_config("{}") == RunConfig()


def test_nested_override():
    cfg = parse_config(json.dumps({"fusion": {"G": [2, 2], "D": [64]}, "train": {"epochs": 3}}))
    assert cfg.fusion.G == (2, 2) and cfg.train.epochs == 3 and cfg.train.batch_size == 16


def test_roundtrip_through_dict():
    cfg = parse_config(json.dumps({"seed": 4, "loss": {"lambda_vlml": 0.5}}))
    assert config_from_dict(cfg.to_dict()) == cfg


def test_unknown_key_reports_its_line():
    text = '{\n  "train": {\n    "epochs": 2,\n    "epochz": 3\n  }\n}'
    with pytest.raises(ConfigFileError) as err:
        parse_config(text)
    assert err.value.line == 4 and "train.epochz" in str(err.value)


def test_wrong_type_reports_its_line():
    with pytest.raises(ConfigFileError) as err:
        parse_config('{\n"seed": "seven"\n}')
    assert err.value.line == 2


def test_indivisible_decomposition_is_rejected():
    with pytest.raises(ConfigFileError, match="divisible"):
        parse_config('{"fusion": {"G": [3], "D": [512]}}')


def test_bad_json_reports_its_line():
    with pytest.raises(ConfigFileError) as err:
        parse_config('{\n"seed": 1,\n}')
    assert err.value.line is not None


def test_unknown_architecture():
    with pytest.raises(ConfigFileError):
        parse_config('{"architecture": "huge"}')
