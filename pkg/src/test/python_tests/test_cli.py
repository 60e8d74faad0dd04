"""
Test for the command line surface, run in a subprocess.
"""
import json

from hamcrest import assert_that, contains_string, has_key, is_

from .sim_test_client import constants, defaults, session, utils

COLUMNS = {"COLUMNS": "200"}


def test_help():
    """--help lists the subcommands and exits cleanly."""
    with session.CliSession() as cli:
        result = cli.run("--help")
    assert_that(result.returncode, is_(0))
    assert_that(result.stdout, contains_string("validate"))


def test_validate_ok(tmp_path):
    """A good config validates with exit code 0."""
    config = utils.write_config(tmp_path)
    with session.CliSession(env=COLUMNS) as cli:
        result = cli.run("validate", "--config", config)
    assert_that(result.returncode, is_(0))
    assert_that(result.stdout + result.stderr, contains_string("OK"))


def test_validate_bad_field():
    """An invalid value exits with 2 and names the field."""
    with session.CliSession(env=COLUMNS) as cli:
        result = cli.run("validate", "--config", constants.TEST_DATA / "bad.json")
    assert_that(result.returncode, is_(2))
    assert_that(result.stderr, contains_string("smc.n_particles"))


def test_missing_config():
    """A missing config file is a usage error."""
    with session.CliSession(env=COLUMNS) as cli:
        result = cli.run("run", "--config", constants.TEST_DATA / "absent.json")
    assert_that(result.returncode, is_(2))
    assert_that(result.stderr, contains_string("--config"))


def test_bad_arguments():
    """argparse rejects unknown policies and malformed seed ranges."""
    with session.CliSession(env=COLUMNS) as cli:
        unknown = cli.run("run", "--config", constants.TEST_DATA / "bad.json", "--policy", "ucb")
        seeds = cli.run(
            "run", "--config", constants.CONFIG_ROOT / "mog_desk.json", "--seeds", "3..1"
        )
    assert_that(unknown.returncode, is_(2))
    assert_that(seeds.returncode, is_(2))
    assert_that(seeds.stderr, contains_string("--seeds"))


def test_run_writes_outputs(tmp_path):
    """run writes per-seed CSVs and a summary."""
    config = utils.write_config(tmp_path)
    out = tmp_path / "out"
    with session.CliSession() as cli:
        result = cli.run(
            "run", "--config", config, "--seeds", "0..1", "--out", out, "--policy", "gids"
        )
    assert_that(result.returncode, is_(0))
    for seed in (0, 1):
        header, rows = utils.read_csv(out / f"seed_{seed}" / "trajectory.csv")
        assert_that(header[0], is_("t"))
        assert_that(len(rows), is_(8))
        header, rows = utils.read_csv(out / f"seed_{seed}" / "eval.csv")
        assert_that(header, is_(["round", "avg_cum_bayes_regret"]))
    summary = json.loads((out / "summary.json").read_text(encoding="utf-8"))
    assert_that(summary["seeds"], is_([0, 1]))
    assert_that(summary["policies"], has_key("gids"))
    assert_that(summary["config"]["policy"], is_("gids"))


def test_thread_count_does_not_change_outputs(tmp_path):
    """Outputs are byte-identical with one worker or eight."""
    config = utils.write_config(tmp_path)
    outputs = {}
    for threads in ("1", "8"):
        out = tmp_path / f"threads_{threads}"
        with session.CliSession(env={"COCO_THREADS": threads}) as cli:
            result = cli.run("run", "--config", config, "--seeds", "0..3", "--out", out)
        assert_that(result.returncode, is_(0))
        outputs[threads] = out
    for seed in range(4):
        for name in ("trajectory.csv", "eval.csv"):
            first = (outputs["1"] / f"seed_{seed}" / name).read_bytes()
            second = (outputs["8"] / f"seed_{seed}" / name).read_bytes()
            assert_that(first, is_(second))


def test_evaluate_runs_every_policy(tmp_path):
    """evaluate writes one directory per policy and compares them to Ind-TS."""
    config = utils.write_config(tmp_path, defaults.tiny_document(recruitment_rounds=1))
    out = tmp_path / "out"
    with session.CliSession() as cli:
        result = cli.run("evaluate", "--config", config, "--seeds", "0..1", "--out", out)
    assert_that(result.returncode, is_(0))
    summary = json.loads((out / "summary.json").read_text(encoding="utf-8"))
    for policy in ("npm_ts", "gids", "ind_ts", "oracle_ts"):
        assert_that((out / policy / "seed_1" / "trajectory.csv").exists(), is_(True))
        assert_that(summary["policies"], has_key(policy))
    assert_that(summary["policies"]["gids"], has_key("p_mtr_below_ind_ts"))


def test_update_every_override(tmp_path):
    """--update-every is echoed in the summary."""
    config = utils.write_config(tmp_path)
    out = tmp_path / "out"
    with session.CliSession() as cli:
        result = cli.run("run", "--config", config, "--out", out, "--update-every", "4")
    assert_that(result.returncode, is_(0))
    summary = json.loads((out / "summary.json").read_text(encoding="utf-8"))
    assert_that(summary["update_every"], is_(4))
    assert_that(summary["seeds"], is_([0]))


def test_validate_rejects_context_mismatch(tmp_path):
    """A grid without a context axis fails validation and run before any step."""
    document = defaults.tiny_document()
    document["grid"]["context_ranges"] = []
    document["grid"]["context_points_per_dim"] = []
    config = utils.write_config(tmp_path, document)
    with session.CliSession(env=COLUMNS) as cli:
        validated = cli.run("validate", "--config", config)
        ran = cli.run("run", "--config", config, "--out", tmp_path / "out")
    for result in (validated, ran):
        assert_that(result.returncode, is_(2))
        assert_that(result.stderr, contains_string("grid.context_ranges"))
    assert_that((tmp_path / "out" / "seed_0").exists(), is_(False))
