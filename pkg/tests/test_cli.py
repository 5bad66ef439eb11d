"""CLI tests: config parsing, file formats, commands, exit codes."""

import json

import numpy as np
import pytest

from nnsysid.benchmark_rlc import Dataset, GenConfig, gen_dataset
from nnsysid.cli import (
    SCHEMA,
    ConfigError,
    config_hash,
    effective_config,
    load_dataset,
    load_model,
    main,
    parse_config_file,
    save_dataset,
    save_model,
)
from nnsysid.metrics import evaluate
from nnsysid.model_structures import (
    LinearApprox,
    Scaler,
    build_io,
    build_state_space,
)


@pytest.fixture(autouse=True)
def isolated_outdir(monkeypatch):
    monkeypatch.delenv("NNSYSID_OUTDIR", raising=False)


def write_config(path, text):
    path.write_text(text)
    return str(path)


class TestConfigFile:
    def test_comments_blanks_and_values(self, tmp_path):
        cfg = write_config(tmp_path / "a.cfg", """
# a comment
seed = 7

ts = 0.5e-6   # inline comment
outputs = vc
""")
        entries = parse_config_file(cfg)
        assert entries == {"seed": 7, "ts": 0.5e-6, "outputs": "vc"}

    def test_unknown_key_reports_line(self, tmp_path):
        cfg = write_config(tmp_path / "a.cfg", "seed = 1\nwat = 2\n")
        with pytest.raises(ConfigError, match=r"a\.cfg:2.*wat"):
            parse_config_file(cfg)

    def test_bad_value_reports_line_and_type(self, tmp_path):
        cfg = write_config(tmp_path / "a.cfg", "\nseed = soon\n")
        with pytest.raises(ConfigError, match=r"a\.cfg:2.*int.*soon"):
            parse_config_file(cfg)

    def test_missing_equals_rejected(self, tmp_path):
        cfg = write_config(tmp_path / "a.cfg", "seed 1\n")
        with pytest.raises(ConfigError, match="key = value"):
            parse_config_file(cfg)

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError, match="cannot read"):
            parse_config_file(str(tmp_path / "nope.cfg"))


class FakeArgs:
    def __init__(self, config=None, **overrides):
        self.config = config
        for key in SCHEMA:
            setattr(self, key, None)
        for key, value in overrides.items():
            setattr(self, key, value)


class TestEffectiveConfig:
    def test_flag_beats_file_beats_default(self, tmp_path):
        cfg = write_config(tmp_path / "a.cfg", "seed = 7\nn = 100\n")
        merged = effective_config(FakeArgs(config=cfg, n="250"))
        assert merged["seed"] == 7        # from file
        assert merged["n"] == 250         # flag wins
        assert merged["ts"] == 0.5e-6     # default

    def test_flag_values_are_type_checked(self):
        with pytest.raises(ConfigError, match="--lr"):
            effective_config(FakeArgs(lr="fast"))

    def test_outdir_resolves_relative_paths(self, monkeypatch, tmp_path):
        monkeypatch.setenv("NNSYSID_OUTDIR", str(tmp_path / "runs"))
        merged = effective_config(FakeArgs(model_out="m.json",
                                           model="/abs/m.json"))
        assert merged["model_out"] == str(tmp_path / "runs" / "m.json")
        assert merged["model"] == "/abs/m.json"
        assert merged["val_out"] == ""    # empty stays empty

    def test_hash_tracks_content(self):
        a = effective_config(FakeArgs())
        b = effective_config(FakeArgs(seed="9"))
        assert config_hash(a) != config_hash(b)
        assert config_hash(a) == config_hash(effective_config(FakeArgs()))


class TestDatasetCSV:
    def test_roundtrip_is_bit_exact(self, tmp_path):
        ds = gen_dataset(GenConfig(n=50, seed=3, noise_std=(10.0, 1.0)))
        path = tmp_path / "d.csv"
        save_dataset(path, ds)
        back = load_dataset(path)
        assert np.array_equal(back.u, ds.u)
        assert np.array_equal(back.y, ds.y)
        assert np.array_equal(back.y_clean, ds.y_clean)
        assert back.ts == ds.ts
        assert back.input_names == ("v_in",)
        assert back.output_names == ("v_c", "i_l")

    def test_header_layout(self, tmp_path):
        ds = gen_dataset(GenConfig(n=10, seed=0))
        path = tmp_path / "d.csv"
        save_dataset(path, ds)
        header = path.read_text().splitlines()[0]
        assert header == "time,u_vin,y_vc,y_il,yo_vc,yo_il"

    def test_measured_only_dataset(self, tmp_path):
        ds = Dataset(u=np.arange(4.0), y=np.arange(4.0) + 1, ts=0.5)
        path = tmp_path / "d.csv"
        save_dataset(path, ds)
        back = load_dataset(path)
        assert back.y_clean is None
        assert back.ts == 0.5

    def test_malformed_rejected(self, tmp_path):
        path = tmp_path / "d.csv"
        path.write_text("time,q_bogus\n0,1\n1,2\n")
        with pytest.raises(ConfigError, match="q_bogus"):
            load_dataset(path)
        path.write_text("t,u_a,y_b\n0,1,2\n1,2,3\n")
        with pytest.raises(ConfigError, match="time"):
            load_dataset(path)


class TestModelFile:
    def assert_same_net(self, a, b):
        assert a.spec == b.spec
        for pa, pb in zip(a.parameters(), b.parameters()):
            assert np.array_equal(pa.value, pb.value)

    def test_io_roundtrip(self, tmp_path):
        model = build_io(n_y=2, n_u=1, n_a=3, n_b=2, hidden=8, seed=5)
        model.scaler_y = Scaler([1.0, 2.0], [3.0, 4.0])
        path = tmp_path / "m.json"
        save_model(path, model, {"seed": 5})
        back = load_model(path)
        assert (back.n_y, back.n_u, back.n_a, back.n_b) == (2, 1, 3, 2)
        self.assert_same_net(back.nn, model.nn)
        assert np.array_equal(back.scaler_y.mean, model.scaler_y.mean)
        assert np.array_equal(back.scaler_y.std, model.scaler_y.std)

    def test_state_space_roundtrip(self, tmp_path):
        lin = LinearApprox(a=[[0.9, 0.1], [0.0, 0.8]], b=[[1.0], [0.5]],
                           c=[[1.0, 0.0]])
        model = build_state_space("residual", n_x=2, n_u=1, n_y=1, hidden=8,
                                  seed=2, linear=lin)
        model.scaler_x = Scaler([0.5, -0.5], [2.0, 3.0])
        path = tmp_path / "m.json"
        save_model(path, model)
        back = load_model(path)
        assert back.variant == "residual"
        self.assert_same_net(back.nn_x, model.nn_x)
        self.assert_same_net(back.nn_y, model.nn_y)
        assert np.array_equal(back.linear.a, lin.a)
        assert np.array_equal(back.scaler_x.mean, model.scaler_x.mean)

    def test_mechanical_roundtrip(self, tmp_path):
        model = build_state_space("mechanical", n_x=4, n_u=1, hidden=8,
                                  seed=1, ts=0.01)
        path = tmp_path / "m.json"
        save_model(path, model)
        back = load_model(path)
        assert back.ts == 0.01
        assert len(back.nn_x) == 2
        for na, nb in zip(back.nn_x, model.nn_x):
            self.assert_same_net(na, nb)

    def test_version_mismatch_rejected(self, tmp_path):
        path = tmp_path / "m.json"
        save_model(path, build_io(1, 1, 1, 1, hidden=4, seed=0))
        doc = json.loads(path.read_text())
        doc["format_version"] = 99
        path.write_text(json.dumps(doc))
        with pytest.raises(ConfigError, match="version"):
            load_model(path)


class TestGenerateCommand:
    def test_default_recipe_writes_csv(self, tmp_path, capsys):
        out = str(tmp_path / "id.csv")
        code = main(["generate", "--n", "200", "--id-out", out])
        assert code == 0
        ds = load_dataset(out)
        assert ds.n == 200
        assert "N=200" in capsys.readouterr().out

    def test_zero_noise_flags_give_equal_columns(self, tmp_path):
        out = str(tmp_path / "id.csv")
        main(["generate", "--n", "120", "--noise-std-vc", "0",
              "--noise-std-il", "0", "--id-out", out])
        ds = load_dataset(out)
        assert np.array_equal(ds.y, ds.y_clean)

    def test_same_seed_same_bytes(self, tmp_path):
        a, b = str(tmp_path / "a.csv"), str(tmp_path / "b.csv")
        main(["generate", "--n", "150", "--seed", "5", "--id-out", a])
        main(["generate", "--n", "150", "--seed", "5", "--id-out", b])
        assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()

    def test_validation_set_with_own_recipe(self, tmp_path, capsys):
        code = main([
            "generate", "--n", "100", "--id-out", str(tmp_path / "id.csv"),
            "--val-out", str(tmp_path / "val.csv"), "--val-n", "80",
            "--val-bandwidth", "200e3", "--val-input-std", "60",
            "--noise-std-vc", "10", "--noise-std-il", "1",
        ])
        assert code == 0
        val = load_dataset(tmp_path / "val.csv")
        assert val.n == 80
        assert "SNR" in capsys.readouterr().out
        assert not np.array_equal(val.y, val.y_clean)


def generate_small(tmp_path, n=300, extra=()):
    out = str(tmp_path / "id.csv")
    assert main(["generate", "--n", str(n), "--id-out", out, *extra]) == 0
    return out


class TestTrainCommand:
    def test_one_step_pipeline(self, tmp_path, capsys):
        data = generate_small(tmp_path)
        model_out = str(tmp_path / "m.json")
        log_out = str(tmp_path / "loss.csv")
        code = main([
            "train", "--train-dataset", data, "--method", "one-step",
            "--structure", "fully-observed", "--hidden-width", "16",
            "--train-n", "5", "--lr", "1e-3",
            "--model-out", model_out, "--loss-log-out", log_out,
        ])
        assert code == 0
        assert len((tmp_path / "loss.csv").read_text().splitlines()) == 6
        doc = json.loads((tmp_path / "m.json").read_text())
        assert doc["kind"] == "state-space"
        assert doc["provenance"]["iterations"] == 5
        out = capsys.readouterr().out
        assert "wall time" in out and "method = one-step" in out

    def test_multistep_pipeline(self, tmp_path):
        data = generate_small(tmp_path)
        code = main([
            "train", "--train-dataset", data, "--method", "multistep",
            "--structure", "fully-observed", "--hidden-width", "16",
            "--train-n", "3", "--q", "2", "--m", "8", "--lr", "1e-3",
            "--model-out", str(tmp_path / "m.json"),
            "--loss-log-out", str(tmp_path / "loss.csv"),
        ])
        assert code == 0

    def test_zero_iterations_keeps_initialization(self, tmp_path):
        data = generate_small(tmp_path)
        model_out = str(tmp_path / "m.json")
        code = main([
            "train", "--train-dataset", data, "--method", "one-step",
            "--structure", "fully-observed", "--hidden-width", "8",
            "--train-n", "0", "--train-seed", "4",
            "--model-out", model_out,
            "--loss-log-out", str(tmp_path / "loss.csv"),
        ])
        assert code == 0
        assert (tmp_path / "loss.csv").read_text().splitlines() == [
            "iteration,total,fit,consistency,seconds"
        ]
        back = load_model(model_out)
        fresh = build_state_space("fully-observed", n_x=2, n_u=1, hidden=8,
                                  seed=4)
        for pa, pb in zip(back.parameters(), fresh.parameters()):
            assert np.array_equal(pa.value, pb.value)

    def test_io_structure_from_config_file(self, tmp_path):
        data = generate_small(tmp_path, extra=("--outputs", "vc"))
        cfg = write_config(tmp_path / "run.cfg", f"""
train_dataset = {data}
method = multistep
structure = io
n_a = 2
n_b = 2
hidden_width = 8
train_n = 2
q = 2
m = 8
lr = 1e-3
model_out = {tmp_path / 'm.json'}
loss_log_out = {tmp_path / 'loss.csv'}
""")
        assert main(["train", cfg]) == 0
        assert load_model(tmp_path / "m.json").n_a == 2

    def test_bad_method_exits_one(self, tmp_path, capsys):
        data = generate_small(tmp_path)
        code = main(["train", "--train-dataset", data,
                     "--method", "psychic",
                     "--model-out", str(tmp_path / "m.json"),
                     "--loss-log-out", str(tmp_path / "l.csv")])
        assert code == 1
        assert "psychic" in capsys.readouterr().err

    def test_missing_dataset_exits_one(self, tmp_path):
        assert main(["train", "--train-dataset",
                     str(tmp_path / "nope.csv")]) == 1

    def test_divergence_exits_two(self, tmp_path, capsys):
        data = generate_small(tmp_path)
        code = main([
            "train", "--train-dataset", data, "--method", "multistep",
            "--structure", "fully-observed", "--hidden-width", "8",
            "--train-n", "50", "--q", "2", "--m", "8", "--lr", "1e9",
            "--optimizer", "gradient-descent",
            "--model-out", str(tmp_path / "m.json"),
            "--loss-log-out", str(tmp_path / "l.csv"),
        ])
        assert code == 2
        assert "lower the learning rate" in capsys.readouterr().err

    def test_residual_structure_rejected(self, tmp_path):
        data = generate_small(tmp_path)
        assert main(["train", "--train-dataset", data,
                     "--structure", "residual",
                     "--model-out", str(tmp_path / "m.json"),
                     "--loss-log-out", str(tmp_path / "l.csv")]) == 1


class TestEvalCommand:
    def trained(self, tmp_path):
        data = generate_small(tmp_path)
        model_out = str(tmp_path / "m.json")
        main(["train", "--train-dataset", data, "--method", "one-step",
              "--structure", "fully-observed", "--hidden-width", "16",
              "--train-n", "30", "--lr", "1e-2",
              "--model-out", model_out,
              "--loss-log-out", str(tmp_path / "l.csv")])
        return data, model_out

    def test_eval_writes_report_and_trajectory(self, tmp_path, capsys):
        data, model_out = self.trained(tmp_path)
        report_out = str(tmp_path / "report.txt")
        sim_out = str(tmp_path / "sim.csv")
        code = main(["eval", "--model", model_out, "--eval-dataset", data,
                     "--report-out", report_out, "--sim-out", sim_out])
        assert code == 0
        report = (tmp_path / "report.txt").read_text()
        assert "r2_vc = " in report and "rmse_il = " in report
        header = (tmp_path / "sim.csv").read_text().splitlines()[0]
        assert header == "time,ref_vc,ref_il,sim_vc,sim_il"
        out = capsys.readouterr().out
        assert "channel" in out and "v_c" in out

    def test_saved_model_scores_like_in_memory(self, tmp_path):
        data, model_out = self.trained(tmp_path)
        ds = load_dataset(data)
        in_memory = evaluate(load_model(model_out), ds)
        again = evaluate(load_model(model_out), ds)
        assert in_memory.r2 == again.r2
        report_out = str(tmp_path / "report.txt")
        main(["eval", "--model", model_out, "--eval-dataset", data,
              "--report-out", report_out,
              "--sim-out", str(tmp_path / "sim.csv")])
        text = (tmp_path / "report.txt").read_text()
        assert f"r2_vc = {in_memory.r2[0]!r}" in text

    def test_zero_network_model_is_no_better_than_mean(self, tmp_path):
        data = generate_small(tmp_path)
        model = build_state_space("fully-observed", n_x=2, n_u=1, hidden=8,
                                  seed=0)
        for p in model.parameters():
            p.value[...] = 0.0
        model_out = str(tmp_path / "zero.json")
        save_model(model_out, model)
        main(["eval", "--model", model_out, "--eval-dataset", data,
              "--report-out", str(tmp_path / "r.txt"),
              "--sim-out", str(tmp_path / "s.csv")])
        report = evaluate(load_model(model_out), load_dataset(data))
        assert report.r2[0] <= 0

    def test_channel_mismatch_exits_one(self, tmp_path):
        _, model_out = self.trained(tmp_path)  # 2-channel model
        single = str(tmp_path / "single.csv")
        main(["generate", "--n", "300", "--outputs", "vc",
              "--id-out", single])
        assert main(["eval", "--model", model_out, "--eval-dataset", single,
                     "--report-out", str(tmp_path / "r.txt"),
                     "--sim-out", str(tmp_path / "s.csv")]) == 1


class TestUsageErrors:
    def test_no_command_exits_one(self):
        with pytest.raises(SystemExit) as info:
            main([])
        assert info.value.code == 1

    def test_unknown_flag_exits_one(self):
        with pytest.raises(SystemExit) as info:
            main(["generate", "--turbo"])
        assert info.value.code == 1
