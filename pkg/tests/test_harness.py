import json
import shutil

import numpy as np
import pytest

from rnbguide import cli
from rnbguide.config import GuidanceConfig
from rnbguide.errors import MissingRun, ParseError, ValidationError
from rnbguide.harness import runner
from rnbguide.harness.io import dump_pgm, fmt, pgm_bytes, read_pgm, write_json
from rnbguide.harness.metrics import miou_metric, steps_to_iou, suite_miou, trajectory_miou
from rnbguide.harness.scene import dump_scene, load_scene, parse_scene
from rnbguide.sim import StepReport

from .conftest import SUITE_DIR, hand_maps, rect

MINIMAL = {
    "seed": 1,
    "n_tokens": 3,
    "dim": 4,
    "base_resolution": [8, 8],
    "concepts": [{"name": "cat", "tokens": [1], "box": [0.1, 0.2, 0.6, 0.9]}],
}


def _with(**changes):
    data = json.loads(json.dumps(MINIMAL))
    data.update(changes)
    return data


def _write(tmp_path, data, name="scene.json"):
    path = tmp_path / name
    path.write_text(json.dumps(data))
    return path


# -- scene files --------------------------------------------------------------------

def test_minimal_scene_gets_published_defaults():
    sf = parse_scene(MINIMAL)
    assert (sf.config.lam, sf.config.lambda_s, sf.config.lambda_a) == (0.4, 1.5, 1.0)
    assert (sf.config.total_steps, sf.config.guidance_steps) == (50, 10)
    assert sf.layer_factors == (1, 2) and sf.agg_resolution == (8, 8)


def test_scene_round_trips_through_json(tmp_path):
    sf = parse_scene(_with(config={"eta_g": 123.0, "grad_clip_norm": None}), name="x")
    path = tmp_path / "x.json"
    path.write_text(dump_scene(sf))
    again = load_scene(path)
    assert again.to_dict() == sf.to_dict() and again.name == "x"


@pytest.mark.parametrize(
    "data",
    [
        _with(concepts=[{"name": "a", "tokens": [1, 2], "box": [0, 0, 0.5, 0.5]},
                        {"name": "b", "tokens": [2], "box": [0.5, 0.5, 1, 1]}]),
        _with(concepts=[{"name": "a", "tokens": [1], "box": [0.2, 0.2, 0.1, 0.9]}]),
        _with(concepts=[{"name": "a", "tokens": [7], "box": [0, 0, 1, 1]}]),
        _with(concepts=[{"name": "a", "tokens": [1], "box": [0, 0, 0.05, 0.05]}]),
        _with(concepts=[]),
        _with(base_resolution=[12, 12]),
        _with(base_resolution=[4, 4]),
        _with(layer_factors=[1, 3]),
        _with(extra=1),
        _with(config={"lambda": 1.5}),
        _with(config={"guidance_steps": 60}),
        _with(config={"eta_g": -1}),
        _with(config={"total_steps": 2.5}),
        _with(config={"unknown": 1}),
        _with(seed="7"),
    ],
)
def test_invalid_scenes_are_rejected(data):
    with pytest.raises(ValidationError):
        parse_scene(data)


def test_missing_required_key():
    data = dict(MINIMAL)
    del data["dim"]
    with pytest.raises(ValidationError, match="dim"):
        parse_scene(data)


def test_malformed_json_reports_position(tmp_path):
    path = tmp_path / "bad.json"
    path.write_text('{\n  "seed": 1,\n  "dim": ,\n}')
    with pytest.raises(ParseError, match="line 3"):
        load_scene(path)


# -- metrics ------------------------------------------------------------------------

def test_miou_examples():
    gt = rect((4, 4), 1, 2, 1, 2)
    perfect = hand_maps(gt, gt)[1]
    partial = hand_maps(rect((4, 4), 0, 1, 0, 1), gt)[1]
    assert miou_metric([perfect, perfect]) == 1.0
    assert abs(miou_metric([partial, perfect]) - 4 / 7) < 1e-15
    with pytest.raises(MissingRun):
        miou_metric([])
    with pytest.raises(MissingRun):
        trajectory_miou([])
    with pytest.raises(MissingRun):
        suite_miou([])


def test_steps_to_iou():
    rows = [StepReport(t, 0.0, 0.0, 0.0, [v, v], [0.5, 0.5]) for t, v in enumerate([0.1, 0.4, 0.6, 0.9])]
    assert steps_to_iou(rows, 0.5) == 2
    assert steps_to_iou(rows, 0.95) is None
    assert trajectory_miou(rows) == 0.9


# -- file output -----------------------------------------------------------------------

def test_pgm_exact_bytes():
    assert pgm_bytes(np.array([[0.0, 1.0], [1.0, 0.0]])) == b"P5\n2 2\n255\n" + bytes([0, 255, 255, 0])


def test_pgm_constant_field_is_black():
    assert pgm_bytes(np.full((3, 2), 4.2)).endswith(bytes(6))


def test_pgm_round_trip(tmp_path):
    f = np.random.default_rng(0).random((5, 7))
    dump_pgm(f, tmp_path / "m.pgm")
    expected = np.rint((f - f.min()) / (f.max() - f.min()) * 255).astype(np.uint8)
    assert np.array_equal(read_pgm(tmp_path / "m.pgm"), expected)


def test_fmt_round_trips():
    for x in (0.1, 1 / 3, 1e-300, 7000.0):
        assert float(fmt(x)) == x


def test_write_json_leaves_no_temp_files(tmp_path):
    write_json(tmp_path / "a" / "r.json", {"b": 1, "a": 2})
    assert [p.name for p in (tmp_path / "a").iterdir()] == ["r.json"]
    assert (tmp_path / "a" / "r.json").read_text() == '{\n  "a": 2,\n  "b": 1\n}\n'


# -- runs, sweeps, suites ----------------------------------------------------------------

@pytest.fixture(scope="module")
def fixture_scene():
    return SUITE_DIR / "fixture_03.json"


def test_run_writes_one_row_per_step(tmp_path, fixture_scene):
    rep = runner.run_experiment(fixture_scene, tmp_path / "out")
    lines = (tmp_path / "out" / "metrics.csv").read_text().splitlines()
    assert lines[0] == "step,g,lr,lb,iou_c0,tau_c0,iou_c1,tau_c1"
    assert len(lines) - 1 == 51 == len(rep.rows)
    summary = json.loads((tmp_path / "out" / "report.json").read_text())
    assert summary["variant"] == "rnb" and summary["rows"] == 51
    assert "wall_time_s" in json.loads((tmp_path / "out" / "timing.json").read_text())


def test_rerun_is_byte_identical(tmp_path, fixture_scene):
    runner.run_experiment(fixture_scene, tmp_path / "a")
    runner.run_experiment(fixture_scene, tmp_path / "b")
    for name in ("metrics.csv", "report.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_ablation_tag_is_recorded(tmp_path, fixture_scene):
    runner.run_experiment(fixture_scene, tmp_path / "abl", variant="no_ste")
    assert json.loads((tmp_path / "abl" / "report.json").read_text())["variant"] == "no_ste"


def test_map_dumps(tmp_path, fixture_scene):
    sf = load_scene(fixture_scene)
    sf.config = sf.config.with_(total_steps=3, guidance_steps=2)
    small = tmp_path / "small.json"
    small.write_text(dump_scene(sf))
    runner.run_experiment(small, tmp_path / "o", dump_maps=True)
    names = sorted(p.name for p in (tmp_path / "o" / "maps").iterdir())
    # 4 rows x 2 concepts x (attention, rectangle)
    assert len(names) == 16
    assert names[0] == "step000_c0_attn.pgm"
    assert read_pgm(tmp_path / "o" / "maps" / "step003_c1_mbr.pgm").shape == (16, 16)


def test_degenerate_sweep_matches_single_run(tmp_path, fixture_scene):
    sf = load_scene(fixture_scene)
    rep = runner.run_experiment(fixture_scene, tmp_path / "r")
    assert runner.sweep(sf, "eta_g", [sf.config.eta_g]) == [(sf.config.eta_g, rep.final_miou)]


def test_lambda_sweep_is_finite_and_deterministic():
    sf = runner.random_scene(11, total_steps=4, guidance_steps=4)
    a = runner.sweep(sf, "lambda", [0.0, 0.4, 1.0])
    assert a == runner.sweep(sf, "lambda", [0.0, 0.4, 1.0])
    assert all(np.isfinite(m) for _, m in a)
    assert runner.sweep_csv("lambda", a).splitlines()[0] == "lambda,final_miou"


def test_sweep_parameter_checks():
    sf = runner.random_scene(1)
    with pytest.raises(KeyError):
        runner.sweep(sf, "beta", [1.0])
    with pytest.raises(ValueError):
        runner.sweep(sf, "total_steps", [2.5])


def test_suite_layout(tmp_path):
    scenes = tmp_path / "scenes"
    scenes.mkdir()
    for name in ("fixture_00.json", "fixture_01.json"):
        sf = load_scene(SUITE_DIR / name)
        sf.config = sf.config.with_(total_steps=2, guidance_steps=2)
        (scenes / name).write_text(dump_scene(sf))
    summary = runner.run_suite(scenes, tmp_path / "out", ["rnb", "zest"])
    assert summary["scenes"] == ["fixture_00", "fixture_01"]
    assert set(summary["mean_final_miou"]) == {"rnb", "zest"}
    assert (tmp_path / "out" / "fixture_01" / "zest" / "metrics.csv").exists()
    assert len((tmp_path / "out" / "suite.csv").read_text().splitlines()) == 5


def test_variant_combination_rules():
    assert GuidanceConfig(variant="no_region+no_boundary").uses_region is False
    with pytest.raises(ValueError):
        GuidanceConfig(variant="zest+no_ste")
    with pytest.raises(ValueError):
        GuidanceConfig(variant="bogus")


def test_gradcheck_scene_report():
    rep = runner.gradcheck_scene(0, probes=16)
    assert rep.num_probed == 16 and rep.max_rel_error <= 1e-3


# -- command line -----------------------------------------------------------------------

def test_cli_run_and_rerun(tmp_path, fixture_scene, capsys):
    assert cli.main(["run", "--scene", str(fixture_scene), "--out", str(tmp_path / "a")]) == 0
    assert cli.main(["run", "--scene", str(fixture_scene), "--out", str(tmp_path / "b")]) == 0
    assert (tmp_path / "a" / "metrics.csv").read_bytes() == (tmp_path / "b" / "metrics.csv").read_bytes()
    assert "final mIoU" in capsys.readouterr().out


def test_cli_invalid_scene_writes_nothing(tmp_path):
    bad = _write(tmp_path, _with(concepts=[{"name": "a", "tokens": [1], "box": [0.2, 0.2, 0.1, 0.9]}]))
    out = tmp_path / "out"
    assert cli.main(["run", "--scene", str(bad), "--out", str(out)]) == cli.EXIT_INVALID
    assert not out.exists()


def test_cli_parse_error_exit_code(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text("{")
    assert cli.main(["run", "--scene", str(bad), "--out", str(tmp_path / "o")]) == cli.EXIT_INVALID


def test_cli_missing_file_is_io_error(tmp_path):
    assert cli.main(["run", "--scene", str(tmp_path / "nope.json"), "--out", str(tmp_path / "o")]) == cli.EXIT_IO


def test_cli_numeric_failure(tmp_path, fixture_scene, monkeypatch):
    from rnbguide import sim

    real = sim.evaluate

    def poisoned(*args, **kwargs):
        ev = real(*args, **kwargs)
        if ev.grad is not None:
            ev.grad = ev.grad * np.nan
        return ev

    monkeypatch.setattr(sim, "evaluate", poisoned)
    assert cli.main(["run", "--scene", str(fixture_scene), "--out", str(tmp_path / "o")]) == cli.EXIT_NUMERIC


def test_cli_gradcheck(capsys):
    assert cli.main(["gradcheck", "--seed", "2", "--probes", "12"]) == 0
    assert "PASS" in capsys.readouterr().out
    assert cli.main(["gradcheck", "--seed", "2", "--probes", "12", "--tol", "0"]) == cli.EXIT_CHECK_FAILED


def test_cli_sweep(tmp_path, capsys):
    sf = runner.random_scene(12, total_steps=3, guidance_steps=3)
    path = tmp_path / "s.json"
    path.write_text(dump_scene(sf))
    assert cli.main(["sweep", "--scene", str(path), "--param", "eta_g", "--values", "10,100", "--out", str(tmp_path)]) == 0
    text = (tmp_path / "sweep.csv").read_text()
    assert text == capsys.readouterr().out and len(text.splitlines()) == 3
    assert cli.main(["sweep", "--scene", str(path), "--param", "nope", "--values", "1"]) == cli.EXIT_INVALID


def test_cli_suite(tmp_path):
    scenes = tmp_path / "scenes"
    scenes.mkdir()
    sf = load_scene(SUITE_DIR / "fixture_02.json")
    sf.config = sf.config.with_(total_steps=1, guidance_steps=1)
    (scenes / "one.json").write_text(dump_scene(sf))
    assert cli.main(["suite", "--scenes", str(scenes), "--out", str(tmp_path / "o"), "--variants", "rnb,no_ste"]) == 0
    assert (tmp_path / "o" / "one" / "no_ste" / "report.json").exists()


def test_cli_rejects_unknown_variant(tmp_path, fixture_scene):
    with pytest.raises(SystemExit) as exc:
        cli.main(["run", "--scene", str(fixture_scene), "--out", str(tmp_path), "--ablate", "bogus"])
    assert exc.value.code == 2


def test_fixture_suite_is_present():
    assert len(list(SUITE_DIR.glob("*.json"))) == 20
    assert shutil.which("rnbguide") is not None
