import pytest

from mflab.cli import build_run_config
from mflab.config import ConfigParseError, apply_override, parse_yaml
from mflab.experiments import REGISTRY


@pytest.mark.parametrize("name", sorted(REGISTRY))
def test_resolved_config_round_trips(name):
    run = build_run_config({"experiment": name, "seed": 3})
    again = build_run_config(parse_yaml(run.dump()))
    assert again.to_dict() == run.to_dict()


def test_unknown_top_level_key_rejected():
    with pytest.raises(ConfigParseError, match="colour"):
        build_run_config({"experiment": "exp_factorization", "colour": 1})


def test_unknown_parameter_is_named():
    with pytest.raises(ConfigParseError, match="params.Nn"):
        build_run_config({"experiment": "exp_factorization", "params": {"Nn": 3}})


def test_unknown_experiment_rejected():
    with pytest.raises(ConfigParseError, match="experiment"):
        build_run_config({"experiment": "exp_nothing"})


def test_missing_kernel_parameter_names_the_key():
    data = {"experiment": "exp_chaos_scaling",
            "params": {"kernel": {"name": "hegselmann_krause"}}}
    with pytest.raises(ConfigParseError, match=r"params\.kernel\.r"):
        build_run_config(data)
    data["params"]["kernel"] = {"name": "barre", "r": 0.3}
    with pytest.raises(ConfigParseError, match=r"params\.kernel\.ell"):
        build_run_config(data)


def test_switching_kernel_drops_default_parameters():
    run = build_run_config({"experiment": "exp_chaos_scaling",
                            "params": {"kernel": {"name": "zero"}}})
    assert run.params.kernel == {"name": "zero"}


def test_wrong_type_names_the_key():
    with pytest.raises(ConfigParseError, match="params.N"):
        build_run_config({"experiment": "exp_factorization", "params": {"N": "many"}})


def test_yaml_error_reports_line():
    with pytest.raises(ConfigParseError, match="line 2"):
        parse_yaml("experiment: x\nseed: 1: 2\nparams: {}\n")


def test_overrides_route_to_params_or_run_level():
    data = apply_override({"experiment": "exp_chaos_scaling"}, "N_sweep=[32,64]")
    data = apply_override(data, "seed=7")
    data = apply_override(data, "kernel.r=0.1")
    assert data["seed"] == 7
    assert data["params"] == {"N_sweep": [32, 64], "kernel": {"r": 0.1}}
    run = build_run_config(data)
    assert run.params.N_sweep == [32, 64] and run.params.kernel == {"name": "hegselmann_krause",
                                                                     "r": 0.1}


def test_malformed_override():
    with pytest.raises(ConfigParseError):
        apply_override({}, "no_equals_sign")


def test_thread_count_from_environment(monkeypatch):
    monkeypatch.setenv("MFLAB_THREADS", "3")
    assert build_run_config({"experiment": "exp_factorization"}).threads == 3
    assert build_run_config({"experiment": "exp_factorization", "threads": 2}).threads == 2
    monkeypatch.setenv("MFLAB_THREADS", "x")
    with pytest.raises(ConfigParseError):
        build_run_config({"experiment": "exp_factorization"})


def test_resource_limits_validated():
    with pytest.raises(ConfigParseError, match="memory_cap_mb"):
        build_run_config({"experiment": "exp_factorization", "memory_cap_mb": 1})
    with pytest.raises(ConfigParseError, match="threads"):
        build_run_config({"experiment": "exp_factorization", "threads": 0})
