import logging

import pytest
import torch
from click.testing import CliRunner

import pipeline_service
from exceptions import CheckpointError, ConfigError, ContractError, RunRefusedError
from main import cli
from settings import get_settings
from models.run_config import DatasetConfig, DDPOConfig, EvalConfig, ModelConfig, RunConfig, SampleConfig, TrainConfig
from util.checkpoint import decode_checkpoint, encode_checkpoint, load_checkpoint
from util.convert_yaml import dump_run_config, parse_run_config
from util.digest import file_digest
from util.json_log import read_json, read_jsonl


def _config(**train) -> RunConfig:
    # enough objects per scene that every category lands in the train split
    return RunConfig(
        seed=5,
        dataset=DatasetConfig(num_objects_range=(3, 4), train_count=8, val_count=4),
        model=ModelConfig(base_width=8, channel_mult=(1, 2), blocks_per_level=1, groups=4, embedding_dim=8),
        train=TrainConfig(
            **{"batch_size": 4, "iterations": 3, "learning_rate": 1e-3, "timesteps": 20, "checkpoint_every": 2, **train}
        ),
        sample=SampleConfig(steps=4, batch_size=4),
        ddpo=DDPOConfig(k=2, batch_size=4, steps=3, updates=2, learning_rate=1e-4),
        eval=EvalConfig(permutations=10),
    )


@pytest.fixture(scope="module")
def data_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("pipeline") / "data"
    pipeline_service.cmd_gen_data(_config(), out)
    return out


@pytest.fixture(scope="module")
def trained(data_dir):
    out = data_dir.parent / "train"
    return pipeline_service.cmd_train(_config(), data_dir, out, progress=False)


def _params(path):
    arrays, _ = load_checkpoint(path)
    return {name: value for name, value in arrays.items() if name.startswith("model/")}


def test_checkpoint_encoding_is_stable():
    arrays = {"b": torch.arange(6, dtype=torch.float64).reshape(2, 3), "a": torch.tensor(3.5), "n": torch.tensor([1, 2])}
    data = encode_checkpoint(arrays, {"step": 4, "name": "x"})
    decoded, meta = decode_checkpoint(data)
    assert meta == {"step": 4, "name": "x"}
    assert torch.equal(decoded["b"], arrays["b"])
    assert decoded["a"].shape == ()
    assert encode_checkpoint(decoded, meta) == data
    with pytest.raises(CheckpointError, match="not an ofdiff checkpoint"):
        decode_checkpoint(b"PK\x03\x04" + data)


def test_config_errors_name_the_offending_key():
    with pytest.raises(ConfigError) as info:
        parse_run_config("train:\n  bogus: 1\n")
    assert "train.bogus" in info.value.path
    with pytest.raises(ConfigError):
        parse_run_config("- just\n- a list\n")
    assert parse_run_config("") == RunConfig()
    config = _config()
    assert parse_run_config(dump_run_config(config)) == config


def test_gen_data_is_reproducible_and_refuses_to_overwrite(data_dir, tmp_path):
    again = pipeline_service.cmd_gen_data(_config(), tmp_path / "again")
    for split in ("train", "val"):
        manifest = read_json(data_dir / split / "manifest.json")
        assert manifest["digest"] == again[split].digest
    assert again["train"].count == 8 and again["val"].count == 4
    with pytest.raises(RunRefusedError):
        pipeline_service.cmd_gen_data(_config(), tmp_path / "again")
    pipeline_service.cmd_gen_data(_config(), tmp_path / "again", force=True)
    assert [row["command"] for row in read_jsonl(tmp_path / "again" / "run_manifest.jsonl")] == ["gen-data"]


def test_training_writes_log_and_intermediate_checkpoints(trained):
    out = trained.parent
    rows = read_jsonl(out / pipeline_service.TRAIN_LOG)
    assert [row["n"] for row in rows] == [1, 2, 3]
    assert set(rows[0]) == {"n", "epoch", "l_s", "l_m", "l_c", "total"}
    assert (out / "checkpoints" / "step_000002.ckpt").exists()
    _, meta = load_checkpoint(trained)
    assert meta["state"]["n"] == 3
    assert read_jsonl(out / "run_manifest.jsonl")[-1]["command"] == "train"


def test_training_without_consistency_logs_two_terms(data_dir, tmp_path):
    path = pipeline_service.cmd_train(_config(dcloss=False, iterations=1), data_dir, tmp_path / "run", progress=False)
    rows = read_jsonl(path.parent / pipeline_service.TRAIN_LOG)
    assert set(rows[0]) == {"n", "epoch", "l_s", "l_m", "total"}


def test_zero_iterations_saves_the_initial_weights(data_dir, tmp_path):
    config = _config(iterations=0)
    path = pipeline_service.cmd_train(config, data_dir, tmp_path / "run", progress=False)
    initial = pipeline_service.build_model(config)
    params = _params(path)
    for name, p in initial.named_parameters():
        assert torch.equal(params[f"model/{name}"], p.detach())


def test_resumed_training_matches_the_straight_run(trained, data_dir, tmp_path):
    intermediate = trained.parent / "checkpoints" / "step_000002.ckpt"
    resumed = pipeline_service.cmd_train(_config(), data_dir, tmp_path / "resumed", resume=intermediate, progress=False)
    straight, again = _params(trained), _params(resumed)
    assert straight.keys() == again.keys()
    for name in straight:
        assert torch.equal(straight[name], again[name])

    with pytest.raises(RunRefusedError, match="config hash"):
        pipeline_service.cmd_train(
            _config(learning_rate=5e-4), data_dir, tmp_path / "other", resume=intermediate, progress=False
        )


def test_sampling_random_layouts(trained, data_dir, tmp_path):
    outputs = pipeline_service.cmd_sample(
        _config(), trained, tmp_path / "samples", random_layouts=3, data_dir=data_dir, progress=False
    )
    summary = read_json(tmp_path / "samples" / "samples.json")
    assert summary["rendered"] + len(summary["skipped"]) == 3
    assert len(list((tmp_path / "samples" / "images").iterdir())) == summary["rendered"] == len(outputs)
    assert len(list((tmp_path / "samples" / "conditions").iterdir())) == summary["rendered"]

    again = pipeline_service.cmd_sample(
        _config(), trained, tmp_path / "samples", random_layouts=3, data_dir=data_dir, force=True, progress=False
    )
    assert again == outputs


def test_sampling_needs_exactly_one_layout_source(trained, data_dir, tmp_path):
    with pytest.raises(ContractError):
        pipeline_service.cmd_sample(_config(), trained, tmp_path / "a", data_dir=data_dir, progress=False)
    with pytest.raises(ContractError):
        pipeline_service.cmd_sample(
            _config(),
            trained,
            tmp_path / "b",
            layouts_file=data_dir / "val" / "layouts.jsonl",
            random_layouts=2,
            data_dir=data_dir,
            progress=False,
        )


def test_sampling_held_out_layouts(trained, data_dir, tmp_path):
    layouts = data_dir / "val" / "layouts.jsonl"
    outputs = pipeline_service.cmd_sample(
        _config(), trained, tmp_path / "val", layouts_file=layouts, data_dir=data_dir, progress=False
    )
    summary = read_json(tmp_path / "val" / "samples.json")
    assert summary["rendered"] + len(summary["skipped"]) == 4
    assert all(key.startswith("images/val") for key in outputs)


def test_ddpo_without_updates_copies_the_checkpoint(trained, data_dir, tmp_path):
    config = _config().model_copy(update={"ddpo": DDPOConfig(k=2, batch_size=4, steps=3, updates=0)})
    path = pipeline_service.cmd_ddpo(config, trained, data_dir, tmp_path / "ddpo", progress=False)
    assert path.read_bytes() == trained.read_bytes()


def test_ddpo_updates_are_logged(trained, data_dir, tmp_path):
    path = pipeline_service.cmd_ddpo(_config(), trained, data_dir, tmp_path / "ddpo", progress=False)
    rows = read_jsonl(path.parent / pipeline_service.DDPO_LOG)
    assert [row["update"] for row in rows] == [0, 1]
    _, meta = load_checkpoint(path)
    assert meta["ddpo_updates"] == 2
    assert meta["ddpo"]["k"] == 2 and meta["ddpo"]["omega"] == 1.0 and meta["ddpo"]["clip_eps"] == 0.2
    assert meta["ddpo_reward"] == "knn_kl"
    assert meta["config_hash"] == load_checkpoint(trained)[1]["config_hash"]
    model, _, _, _ = pipeline_service.load_model(path)
    assert file_digest(path) != file_digest(trained)
    assert sum(p.numel() for p in model.parameters()) > 0


def test_eval_of_a_split_against_itself(data_dir, tmp_path):
    val = data_dir / "val"
    report = pipeline_service.cmd_eval(_config(), val, val, val / "layouts.jsonl", tmp_path / "eval")
    assert report.instance_count > 0
    assert report.overall.iou == 1.0
    assert report.mmd is not None and report.mmd <= 1e-12
    assert read_json(tmp_path / "eval" / "report.json")["instance_count"] == report.instance_count
    assert (tmp_path / "eval" / "report.txt").read_text().startswith("scope")


@pytest.fixture
def restore_logging():
    # the CLI points the root handler at the runner's stderr
    root = logging.getLogger()
    handlers, level = root.handlers[:], root.level
    yield
    root.handlers[:] = handlers
    root.setLevel(level)


@pytest.mark.usefixtures("restore_logging")
def test_cli_init_config_and_gen_data(tmp_path):
    runner = CliRunner()
    result = runner.invoke(cli, ["init-config"])
    assert result.exit_code == 0
    assert parse_run_config(result.output) == RunConfig()

    config_file = tmp_path / "run.yaml"
    config_file.write_text(dump_run_config(_config()))
    out = tmp_path / "data"
    result = runner.invoke(cli, ["gen-data", "--config", str(config_file), "--out", str(out)])
    assert result.exit_code == 0, result.output
    assert "train: 8 scenes" in result.output

    result = runner.invoke(cli, ["gen-data", "--config", str(config_file), "--out", str(out)])
    assert result.exit_code == 1
    assert "not empty" in result.output


@pytest.mark.usefixtures("restore_logging")
def test_cli_reports_config_errors(tmp_path):
    config_file = tmp_path / "bad.yaml"
    config_file.write_text("sample:\n  steps: 0\n")
    result = CliRunner().invoke(cli, ["gen-data", "--config", str(config_file), "--out", str(tmp_path / "out")])
    assert result.exit_code == 1
    assert "sample.steps" in result.output


def test_blank_environment_values_fall_back_to_defaults(monkeypatch):
    monkeypatch.setenv("OFDIFF_NUM_THREADS", "")
    monkeypatch.setenv("OFDIFF_LOG", "")
    settings = get_settings()
    assert settings.num_threads is None
    assert settings.log == "info"
    monkeypatch.setenv("OFDIFF_NUM_THREADS", "2")
    assert get_settings().num_threads == 2


@pytest.mark.usefixtures("restore_logging")
def test_cli_runs_with_a_blank_thread_count(monkeypatch, tmp_path):
    monkeypatch.setenv("OFDIFF_NUM_THREADS", "")
    config_file = tmp_path / "run.yaml"
    config_file.write_text(dump_run_config(_config()))
    result = CliRunner().invoke(cli, ["gen-data", "--config", str(config_file), "--out", str(tmp_path / "data")])
    assert result.exit_code == 0, result.output


def test_ablation_runs_the_ddpo_stage_when_enabled(data_dir, tmp_path):
    config = _config(iterations=1)
    config.ddpo.enabled = True
    config.ddpo.updates = 1
    rows = pipeline_service.cmd_ablate(config, data_dir, tmp_path / "ablate", progress=False)
    assert [row["variant"] for row in rows] == [name for name, _, _ in pipeline_service.ABLATION_GRID]
    assert all(row["ddpo"] for row in rows)
    assert read_json(tmp_path / "ablate" / "ablation.json") == rows

    config.ddpo.enabled = False
    rows = pipeline_service.cmd_ablate(config, data_dir, tmp_path / "plain", progress=False)
    assert not any(row["ddpo"] for row in rows)


def _ablation_config() -> RunConfig:
    return RunConfig(
        seed=0,
        dataset=DatasetConfig(num_objects_range=(1, 2), train_count=64, val_count=16),
        model=ModelConfig(base_width=16, channel_mult=(1, 2), blocks_per_level=1, groups=4, embedding_dim=16),
        train=TrainConfig(batch_size=16, iterations=400, learning_rate=1e-3, timesteps=100, checkpoint_every=400),
        sample=SampleConfig(steps=25, batch_size=16),
        eval=EvalConfig(permutations=50),
    )


@pytest.mark.slow
def test_ablation_orderings(tmp_path):
    # shape guidance lifts edge IoU; the consistency term does not hurt distribution match
    config = _ablation_config()
    pipeline_service.cmd_gen_data(config, tmp_path / "data")
    ablation = pipeline_service.cmd_ablate(config, tmp_path / "data", tmp_path / "ablate", progress=False)
    rows = {row["variant"]: row for row in ablation}
    assert rows["esgm"]["iou"] > rows["layout-only"]["iou"]
    assert rows["esgm+dcloss"]["iou"] > rows["layout-only"]["iou"]
    for on, off in (("dcloss", "layout-only"), ("esgm+dcloss", "esgm")):
        assert rows[on]["mmd"] <= rows[off]["mmd"] + 2.0 * rows[off]["mmd_stderr"]
