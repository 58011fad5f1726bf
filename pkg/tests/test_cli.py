"""End-to-end command pipeline, config handling, and exit codes."""

import json

import numpy as np
import pytest

from ctcprune.cli import build_encoder_config, config_hash, main, parse_config
from ctcprune.errors import ConfigError

TINY_CFG = """\
# small everything so the suite stays fast
task.vocab = 5
task.d_in = 4
task.min_labels = 2
task.max_labels = 4
task.max_repeats = 2
task.noise = 0.05

data.train_size = 8
data.val_size = 4
data.test_size = 4
data.seed = 5

encoder.layers = 4
encoder.d_model = 8
encoder.d_ff = 12
encoder.heads = 2
encoder.keep_prob = 0.9

train.epochs = 2
train.batch_size = 4
train.peak_lr = 0.002
train.warmup_steps = 4
train.seed = 1
"""


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """One full pipeline run shared by the assertions below."""
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "tiny.cfg"
    cfg.write_text(TINY_CFG)
    data = root / "data"
    run = root / "run"
    assert main(["gen-data", "--config", str(cfg), "--out", str(data)]) == 0
    assert main([
        "train", "--config", str(cfg), "--data", str(data), "--out", str(run),
        "--mode", "pruning-aware",
    ]) == 0
    assert main([
        "analyze", "--config", str(cfg), "--model", str(run / "last.pctc"),
        "--data", str(data), "--out", str(root / "analysis"),
    ]) == 0
    assert main([
        "prune", "--config", str(cfg), "--model", str(run / "last.pctc"),
        "--data", str(data), "--out", str(root / "sched_int"),
        "--strategy", "intermediate", "--target-depth", "1",
    ]) == 0
    assert main([
        "prune", "--config", str(cfg), "--model", str(run / "last.pctc"),
        "--data", str(data), "--out", str(root / "sched_iter"),
        "--strategy", "iterative", "--target-depth", "1", "--jobs", "2",
        "--export-dir", str(root / "exports"),
    ]) == 0
    assert main([
        "eval", "--config", str(cfg), "--model", str(run / "last.pctc"),
        "--data", str(data), "--subset", "1,2",
        "--out", str(root / "evals" / "masked_d2.json"),
    ]) == 0
    assert main([
        "eval", "--config", str(cfg), "--model", str(run / "last.pctc"),
        "--data", str(data), "--schedule", str(root / "sched_iter" / "schedule.json"),
        "--depth", "2", "--out", str(root / "evals" / "sched_d2.json"),
    ]) == 0
    assert main([
        "bench", "--config", str(cfg), "--model", str(run / "last.pctc"),
        "--data", str(data), "--out", str(root / "bench"),
        "--reps", "3", "--warmup", "1",
    ]) == 0
    assert main([
        "report", "--evals", str(root / "evals"), "--out", str(root / "report"),
    ]) == 0
    return root


def test_pipeline_artifacts_exist(workspace):
    expected = [
        "data/train/manifest.json",
        "data/meta.json",
        "run/last.pctc",
        "run/loss_curve.csv",
        "run/loss_curve.png",
        "run/meta.json",
        "analysis/similarity.csv",
        "analysis/similarity.png",
        "analysis/dumps/layer0.pmat",
        "sched_int/schedule.json",
        "sched_int/schedule.png",
        "sched_iter/schedule.json",
        "exports/d4.pctc",
        "exports/d1.pctc",
        "evals/masked_d2.json",
        "bench/bench.csv",
        "bench/bench.png",
        "report/depth_curves.csv",
        "report/depth_curves.png",
    ]
    for rel in expected:
        target = workspace / rel
        assert target.exists() and target.stat().st_size > 0, rel


def test_meta_records_config_hash(workspace):
    cfg = parse_config(workspace / "tiny.cfg")
    want = config_hash(cfg)
    for rel in ("data", "run", "analysis", "sched_int", "bench"):
        meta = json.loads((workspace / rel / "meta.json").read_text())
        assert meta["config_hash"] == want, rel


def test_eval_payload_shape(workspace):
    payload = json.loads((workspace / "evals" / "masked_d2.json").read_text())
    assert payload["subset"] == [1, 2]
    assert payload["depth"] == 2
    assert 0.0 <= payload["ter"]
    assert payload["total_tokens"] > 0
    assert payload["n_utterances"] == 4
    sched = json.loads((workspace / "evals" / "sched_d2.json").read_text())
    assert sched["depth"] == 2 and len(sched["subset"]) == 2


def test_intermediate_schedule_is_prefixes(workspace):
    rows = json.loads((workspace / "sched_int" / "schedule.json").read_text())
    assert [r["depth"] for r in rows] == [4, 3, 2, 1]
    assert [r["subset"] for r in rows] == [[1, 2, 3, 4], [1, 2, 3], [1, 2], [1]]


def test_report_collects_curve_points(workspace):
    text = (workspace / "report" / "depth_curves.csv").read_text()
    lines = text.strip().split("\n")
    assert lines[0] == "curve,depth,ter,loss"
    names = {line.split(",")[0] for line in lines[1:]}
    assert names == {"masked", "sched"}


def test_similarity_matrix_size_matches_depth(workspace):
    lines = (workspace / "analysis" / "similarity.csv").read_text().strip().split("\n")
    assert lines[0] == "layer,0,1,2,3,4"
    assert len(lines) == 6
    diag = [float(lines[i + 1].split(",")[i + 1]) for i in range(5)]
    assert np.allclose(diag, 1.0, atol=1e-8)


def test_gen_data_refuses_to_clobber(workspace):
    assert main([
        "gen-data", "--config", str(workspace / "tiny.cfg"), "--out", str(workspace / "data"),
    ]) == 2


def test_exit_codes(tmp_path, workspace):
    cfg = str(workspace / "tiny.cfg")
    model = str(workspace / "run" / "last.pctc")
    data = str(workspace / "data")
    assert main(["train", "--config", str(tmp_path / "none.cfg"), "--data", data, "--out", str(tmp_path)]) == 2
    assert main(["train", "--config", cfg, "--data", str(tmp_path / "nodata"), "--out", str(tmp_path)]) == 3
    assert main([
        "eval", "--config", cfg, "--model", model, "--data", data,
        "--subset", "1", "--schedule", "x.json", "--out", str(tmp_path / "e.json"),
    ]) == 2
    assert main([
        "eval", "--config", cfg, "--model", model, "--data", data,
        "--subset", "1,zap", "--out", str(tmp_path / "e.json"),
    ]) == 2
    assert main([
        "eval", "--config", cfg, "--model", str(tmp_path / "missing.pctc"), "--data", data,
        "--out", str(tmp_path / "e.json"),
    ]) in (2, 3)  # surfaced as a data problem, not a crash
    assert main(["report", "--evals", str(tmp_path / "nothing"), "--out", str(tmp_path)]) == 3


def test_parse_config_rules(tmp_path):
    good = tmp_path / "a.cfg"
    good.write_text(TINY_CFG)
    cfg = parse_config(good)
    assert cfg["encoder.layers"] == 4
    assert cfg["train.clip_norm"] == 5.0  # default fills in
    assert cfg["encoder.inter_weight"] == pytest.approx(2.0 / 3.0)

    bad = tmp_path / "b.cfg"
    bad.write_text(TINY_CFG + "nonsense.option = 3\n")
    with pytest.raises(ConfigError, match="unknown config key"):
        parse_config(bad)
    bad.write_text(TINY_CFG + "task.vocab = 9\n")
    with pytest.raises(ConfigError, match="duplicate"):
        parse_config(bad)
    bad.write_text(TINY_CFG.replace("train.epochs = 2\n", ""))
    with pytest.raises(ConfigError, match="train.epochs.*required"):
        parse_config(bad)
    bad.write_text(TINY_CFG.replace("task.vocab = 5", "task.vocab = five"))
    with pytest.raises(ConfigError, match="needs a int"):
        parse_config(bad)
    bad.write_text(TINY_CFG + "just a line\n")
    with pytest.raises(ConfigError, match="key=value"):
        parse_config(bad)


def test_config_hash_tracks_values(tmp_path):
    a = tmp_path / "a.cfg"
    a.write_text(TINY_CFG)
    b = tmp_path / "b.cfg"
    b.write_text(TINY_CFG.replace("train.seed = 1", "train.seed = 2"))
    c = tmp_path / "c.cfg"
    c.write_text(TINY_CFG + "\n# trailing comment\n")
    ha, hb, hc = (config_hash(parse_config(p)) for p in (a, b, c))
    assert ha != hb
    assert ha == hc  # comments and layout do not matter, resolved values do


def test_mode_presets(tmp_path):
    p = tmp_path / "a.cfg"
    p.write_text(TINY_CFG)
    cfg = parse_config(p)

    aware = build_encoder_config(cfg, "pruning-aware", None, seed=3)
    assert aware.layers == 4
    assert aware.branch_positions == (1, 2)
    assert aware.inter_weight == pytest.approx(2.0 / 3.0)
    assert aware.keep_prob == pytest.approx(0.9)
    assert aware.seed == 3

    plain = build_encoder_config(cfg, "baseline-a", None, seed=3)
    assert plain.branch_positions == () and plain.inter_weight == 0.0 and plain.keep_prob == 1.0

    tapped = build_encoder_config(cfg, "baseline-b", 3, seed=3)
    assert tapped.layers == 3
    assert tapped.branch_positions == (1,)
    assert tapped.inter_weight == pytest.approx(0.3)

    with pytest.raises(ConfigError, match="at least 4 layers"):
        build_encoder_config(cfg, "pruning-aware", 3, seed=3)
    with pytest.raises(ConfigError, match="at least 2 layers"):
        build_encoder_config(cfg, "baseline-b", 1, seed=3)


def test_cli_train_is_deterministic_and_resumable(tmp_path):
    cfg = tmp_path / "t.cfg"
    cfg.write_text(TINY_CFG)
    data = tmp_path / "data"
    assert main(["gen-data", "--config", str(cfg), "--out", str(data)]) == 0

    a, b, c = (str(tmp_path / n) for n in ("a", "b", "c"))
    assert main(["train", "--config", str(cfg), "--data", str(data), "--out", a]) == 0
    assert main(["train", "--config", str(cfg), "--data", str(data), "--out", b]) == 0
    assert main([
        "train", "--config", str(cfg), "--data", str(data), "--out", c,
        "--stop-after-epoch", "1",
    ]) == 0
    assert main(["train", "--config", str(cfg), "--data", str(data), "--out", c, "--resume"]) == 0

    blob = (tmp_path / "a" / "last.pctc").read_bytes()
    assert blob == (tmp_path / "b" / "last.pctc").read_bytes()
    assert blob == (tmp_path / "c" / "last.pctc").read_bytes()
    curve = (tmp_path / "a" / "loss_curve.csv").read_bytes()
    assert curve == (tmp_path / "c" / "loss_curve.csv").read_bytes()

    seeded = str(tmp_path / "s")
    assert main([
        "train", "--config", str(cfg), "--data", str(data), "--out", seeded, "--seed", "9",
    ]) == 0
    assert (tmp_path / "s" / "last.pctc").read_bytes() != blob
    meta = json.loads((tmp_path / "s" / "meta.json").read_text())
    assert meta["seed"] == 9
