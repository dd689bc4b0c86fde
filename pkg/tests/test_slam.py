import csv
import math
import os

import pytest

from nrslam.cli import main
from nrslam.evaluation import evaluate_run
from nrslam.gaussians import load_snapshot
from nrslam.priors import FilePriorProvider, SequenceDataset
from nrslam.priors.files import read_trajectory
from nrslam.simulator import generate
from nrslam.slam import SlamSystem, build_provider
from nrslam.utils.exceptions import DatasetNotFound

from .fixtures.scenes import FAST_RUN, make_config, tiny_spec


@pytest.fixture
def scene(tmp_path):
    root = str(tmp_path / "scene")
    generate(tiny_spec(), root)
    return root


def run_once(root: str, run_dir: str, **overrides):
    cfg = make_config(run_dir, {"dataset.path": root, **overrides})
    os.makedirs(run_dir, exist_ok=True)
    store = SlamSystem(cfg).run()
    return cfg, store


def test_run_writes_every_artifact(scene, tmp_path):
    run_dir = str(tmp_path / "run")
    cfg, store = run_once(scene, run_dir, **{"output.dump_channels": ["rgb", "depth"]})

    assert len(store) == 8
    assert [s.index for s in store.keyframes()][:3] == [0, 1, 2], "the initialization frames are keyframes"
    for name in ("config.txt", "trajectory.txt", "tracking_log.csv", "ba_trace.csv", os.path.join("map", "final.txt")):
        assert os.path.exists(os.path.join(run_dir, name)), f"{name} is missing"
    assert len(os.listdir(os.path.join(run_dir, "residuals"))) == 8
    assert sorted(os.listdir(os.path.join(run_dir, "channels"))) == ["depth", "rgb"]

    timestamps, poses = read_trajectory(os.path.join(run_dir, "trajectory.txt"))
    assert timestamps == [float(i) for i in range(8)]
    assert all(math.isfinite(float(p.translation.abs().max())) for p in poses)

    with open(os.path.join(run_dir, "tracking_log.csv")) as f:
        rows = list(csv.DictReader(f))
    assert [int(r["frame"]) for r in rows] == list(range(8))
    assert {r["pnp_status"] for r in rows[:3]} == {"init"}

    gmap = load_snapshot(os.path.join(run_dir, "map", "final.txt"))
    assert len(gmap) > 0
    assert bool(((gmap.def_probs >= 0) & (gmap.def_probs <= 1)).all())


def test_runs_are_deterministic(scene, tmp_path):
    first, second = str(tmp_path / "a"), str(tmp_path / "b")
    run_once(scene, first)
    run_once(scene, second)
    for name in ("trajectory.txt", os.path.join("map", "final.txt")):
        with open(os.path.join(first, name)) as a, open(os.path.join(second, name)) as b:
            assert a.read() == b.read(), f"{name} differs between identical runs"


def test_evaluation_of_a_run(scene, tmp_path):
    run_dir = str(tmp_path / "run")
    run_once(scene, run_dir)
    metrics = evaluate_run(run_dir, scene, "similarity")

    assert metrics.frames == 8
    assert math.isfinite(metrics.ate_rmse) and metrics.ate_rmse >= 0
    assert 0 < metrics.psnr <= 99
    assert -1 <= metrics.ssim <= 1
    assert math.isnan(metrics.label_auc) or 0 <= metrics.label_auc <= 1
    for name in ("metrics.csv", "ate_error.png", "photometric.png"):
        assert os.path.exists(os.path.join(run_dir, name)), f"{name} is missing"


def test_oracle_provider_needs_a_simulated_dataset(scene, tmp_path):
    dataset = SequenceDataset(scene)
    assert build_provider(make_config(str(tmp_path), {"dataset.provider": "oracle"}), dataset).name == "oracle"
    assert isinstance(build_provider(make_config(str(tmp_path)), dataset), FilePriorProvider)

    os.remove(os.path.join(scene, "spec.txt"))
    with pytest.raises(DatasetNotFound):
        build_provider(make_config(str(tmp_path), {"dataset.provider": "oracle"}), dataset)


def test_cli_usage_and_errors(tmp_path):
    assert main([]) == 2
    assert main(["train"]) == 2
    assert main(["run", "--output.dir", str(tmp_path / "run")]) == 1, "a run without a dataset fails cleanly"
    assert main(["eval", "--run", str(tmp_path / "missing")]) == 1


def test_cli_simulate_run_eval_render(tmp_path):
    spec_path = str(tmp_path / "spec.txt")
    tiny_spec().to_file(spec_path)
    config_path = tmp_path / "fast.txt"
    config_path.write_text("".join(f"{key} = {str(value).lower() if isinstance(value, bool) else value}\n" for key, value in FAST_RUN.items()))
    root, run_dir = str(tmp_path / "scene"), str(tmp_path / "run")

    assert main(["simulate", "--spec", spec_path, "--out", root]) == 0
    assert os.path.exists(os.path.join(root, "gt_traj.txt"))
    assert main(["run", "--config", str(config_path), "--dataset.path", root, "--output.dir", run_dir]) == 0
    assert main(["eval", "--run", run_dir, "--eval.render", "false"]) == 0
    assert os.path.exists(os.path.join(run_dir, "metrics.csv"))
    assert main(["render", "--run", run_dir, "--frame", "5"]) == 0
    assert os.path.exists(os.path.join(run_dir, "render", "rgb", "000005.png"))
    assert os.path.exists(os.path.join(run_dir, "render", "depth", "000005.png"))
