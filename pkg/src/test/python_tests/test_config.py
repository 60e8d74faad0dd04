"""
Tests for loading and validating simulation configs.
"""
import json

import pytest
from hamcrest import assert_that, contains_string, is_

import coco_config as config_lib
import coco_utils as utils

from .sim_test_client import defaults
from .sim_test_client.constants import CONFIG_ROOT, TEST_DATA
from .sim_test_client.utils import write_config


def test_empty_document_gives_defaults():
    """An empty object yields the MoG defaults."""
    config = config_lib.structure_config({})
    assert_that(config.environment.name, is_("mog"))
    assert_that(config.policy, is_("npm_ts"))
    assert_that(config.grid.n_points, is_(80_000))
    assert_that(config.truncation, is_(80))
    assert_that(config.smc.n_particles, is_(200))
    assert_that(config.smc.langevin_step, is_(0.05))
    assert_that(config.noise.sigma, is_(0.1))
    assert_that(config.n_users, is_(150))
    assert_that(config.update_every, is_(1))


def test_tiny_document():
    """The test fixture config structures into the expected small run."""
    config = config_lib.structure_config(defaults.tiny_document())
    assert_that(config.grid.n_points, is_(192))
    assert_that(config.n_users, is_(4))
    assert_that(config.smc.mcmc_steps, is_(2))


def test_invalid_field_names_the_field():
    """A nested validator failure reports its dotted field."""
    with pytest.raises(utils.ConfigurationError) as info:
        config_lib.load_config(TEST_DATA / "bad.json")
    assert_that(info.value.field, is_("smc.n_particles"))
    assert_that(str(info.value), contains_string("n_particles"))


def test_unknown_key_is_rejected():
    """Keys the schema does not know are errors at every level."""
    with pytest.raises(utils.ConfigurationError) as info:
        config_lib.load_config(TEST_DATA / "unknown_key.json")
    assert_that(str(info.value), contains_string("particle_count"))


def test_unknown_policy_is_rejected():
    """Policies outside the known set are rejected."""
    with pytest.raises(utils.ConfigurationError) as info:
        config_lib.load_config(TEST_DATA / "bad_policy.json")
    assert_that(info.value.field, is_("policy"))
    assert_that(str(info.value), contains_string("ucb"))


def test_wrong_type_names_the_path():
    """Values of the wrong type report where they were found."""
    with pytest.raises(utils.ConfigurationError) as info:
        config_lib.structure_config({"user_horizon": "five"})
    assert_that(info.value.field, contains_string("user_horizon"))


def test_truncation_above_grid_size():
    """M may not exceed the number of grid points."""
    with pytest.raises(utils.ConfigurationError) as info:
        config_lib.structure_config(defaults.tiny_document(truncation=193))
    assert_that(info.value.field, is_("truncation"))


def test_document_must_be_an_object():
    """A JSON array is not a config."""
    with pytest.raises(utils.ConfigurationError):
        config_lib.structure_config([1, 2, 3])


def test_unreadable_and_malformed_files(tmp_path):
    """Missing files and broken JSON are reported against --config."""
    with pytest.raises(utils.ConfigurationError) as info:
        config_lib.load_config(tmp_path / "missing.json")
    assert_that(info.value.field, is_("--config"))
    broken = tmp_path / "broken.json"
    broken.write_text("{\"policy\": ", encoding="utf-8")
    with pytest.raises(utils.ConfigurationError) as info:
        config_lib.load_config(broken)
    assert_that(info.value.field, is_("--config"))
    assert_that(str(info.value), contains_string("line 1"))


def test_shipped_configs_validate():
    """Every config under configs/ loads."""
    paths = sorted(CONFIG_ROOT.glob("*.json"))
    assert_that(len(paths), is_(5))
    for path in paths:
        config = config_lib.load_config(path)
        assert_that(config.policy in config_lib.POLICIES, is_(True))


def test_unstructure_round_trip(tmp_path):
    """A dumped config loads back to the same document."""
    config = config_lib.structure_config(defaults.tiny_document(policy="gids"))
    document = config_lib.config_to_dict(config)
    path = write_config(tmp_path, json.loads(json.dumps(document)))
    again = config_lib.load_config(path)
    assert_that(config_lib.config_to_dict(again), is_(document))


def test_apply_overrides():
    """CLI overrides replace only the named fields."""
    config = config_lib.structure_config(defaults.tiny_document())
    changed = config_lib.apply_overrides(config, policy="ind_ts", update_every=3, seed=9)
    assert_that(changed.policy, is_("ind_ts"))
    assert_that(changed.update_every, is_(3))
    assert_that(changed.seed, is_(9))
    assert_that(changed.grid, is_(config.grid))
    assert_that(config_lib.apply_overrides(config), is_(config))
    with pytest.raises(utils.ConfigurationError):
        config_lib.apply_overrides(config, update_every=0)


def test_grid_context_must_match_environment():
    """A grid without the environment's context axis is rejected up front."""
    document = defaults.tiny_document()
    document["grid"]["context_ranges"] = []
    document["grid"]["context_points_per_dim"] = []
    with pytest.raises(utils.ConfigurationError) as info:
        config_lib.structure_config(document)
    assert_that(info.value.field, is_("grid.context_ranges"))
    assert_that(str(info.value), contains_string("observes 1"))


def test_recruitment_preset_fills_schedule():
    """A named preset fills the schedule; explicit keys win; `auto` follows the environment."""
    document = defaults.tiny_document(recruitment="lmm_misaligned")
    for key in ("recruitment_rounds", "batch_size", "user_horizon"):
        document.pop(key)
    config = config_lib.structure_config(document)
    assert_that(
        (config.recruitment_rounds, config.batch_size, config.user_horizon), is_((20, 5, 5))
    )

    document = defaults.tiny_document(recruitment="auto", environment={"name": "lmm"})
    document.pop("batch_size")
    document.pop("recruitment_rounds")
    config = config_lib.structure_config(document)
    assert_that((config.recruitment_rounds, config.batch_size), is_((1, 50)))
    assert_that(config.user_horizon, is_(2))


def test_unknown_recruitment_preset():
    """An unknown preset names the recruitment field."""
    with pytest.raises(utils.ConfigurationError) as info:
        config_lib.structure_config(defaults.tiny_document(recruitment="weekly"))
    assert_that(info.value.field, is_("recruitment"))
