import argparse

import pytest
from loguru import logger

from nrslam.utils.config import add_args, add_simulate_args, check_config, config, load_config_file, load_run_config, save_config, validate
from nrslam.utils.exceptions import ConfigError
from nrslam.utils.misc import frame_rng, timed


def parser():
    p = argparse.ArgumentParser()
    add_args(p)
    return p


def test_defaults_are_nested():
    cfg = config([])
    assert cfg.tracking.refine_iters == 40
    assert cfg.get("mapping.window") == 7
    assert cfg.get("mapping.missing", "fallback") == "fallback"
    assert cfg.to_dict()["keyframe"]["interval"] == 20


def test_dump_channels_alias():
    cfg = config(["--dump-channels", "rgb", "depth"])
    assert cfg.output.dump_channels == ["rgb", "depth"]


def test_boolean_flags_accept_words():
    cfg = config(["--geometric.enabled", "false", "--tracking.full_update"])
    assert cfg.geometric.enabled is False
    assert cfg.tracking.full_update is True


def test_config_file_is_overridden_by_command_line(tmp_path):
    path = tmp_path / "run.txt"
    path.write_text("# fast run\ntracking.refine_iters = 5\nmapping.window = 4  # small window\n")
    cfg = config(["--config", str(path), "--mapping.window", "3"])
    assert cfg.tracking.refine_iters == 5
    assert cfg.mapping.window == 3


@pytest.mark.parametrize(
    "content",
    [
        "tracking.unknown_option = 3\n",
        "tracking.refine_iters 3\n",
        "tracking.refine_iters = many\n",
        "config = other.txt\n",
    ],
)
def test_bad_config_files(tmp_path, content):
    path = tmp_path / "bad.txt"
    path.write_text(content)
    with pytest.raises(ConfigError):
        load_config_file(str(path), parser())


def test_missing_config_file(tmp_path):
    with pytest.raises(ConfigError):
        load_config_file(str(tmp_path / "nope.txt"), parser())


@pytest.mark.parametrize(
    "argv",
    [
        ["--mapping.window", "1"],
        ["--masks.delta", "0.5"],
        ["--keyframe.covis_ratio", "1.5"],
        ["--mapping.lr_means", "0"],
        ["--dataset.provider", "camera"],
    ],
)
def test_validate_rejects_out_of_range_values(argv):
    with pytest.raises(ConfigError):
        validate(config(argv))


def test_defaults_validate():
    validate(config([]))


def test_saved_config_round_trips(tmp_path):
    cfg = config(["--mapping.window", "5", "--dump-channels", "rgb", "depth", "--geometric.robust", "false"])
    save_config(cfg, str(tmp_path / "config.txt"))
    loaded = load_run_config(str(tmp_path))
    assert loaded.mapping.window == 5
    assert loaded.output.dump_channels == ["rgb", "depth"]
    assert loaded.geometric.robust is False
    assert loaded.to_dict()["management"] == cfg.to_dict()["management"]


def test_simulate_options_are_separate():
    cfg = config(["--out", "data/scene"], add_simulate_args)
    assert cfg.out == "data/scene"
    assert cfg.get("mapping") is None


def test_check_config_creates_run_dir_and_events_level(tmp_path):
    cfg = config(["--logging.dont_save_events", "true"])
    full_path = tmp_path / "run"
    check_config(cfg, str(full_path))
    assert full_path.is_dir()
    assert cfg.full_path == str(full_path)
    assert "EVENTS" in logger._core.levels


def test_frame_rng_is_keyed_not_ordered():
    a = frame_rng(3, 10, 2).normal(size=4)
    frame_rng(3, 11, 2).normal(size=4)
    b = frame_rng(3, 10, 2).normal(size=4)
    assert (a == b).all()
    assert not (frame_rng(4, 10, 2).normal(size=4) == a).all()


def test_timed_keeps_the_result_and_records_duration():
    @timed
    def add(a, b=1):
        return a + b

    assert add.last_duration == 0.0
    assert add(2, b=3) == 5
    assert add.__name__ == "add"
    assert add.last_duration >= 0.0
