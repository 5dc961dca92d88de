"""End-to-end command-line flows: exit codes, artifacts, reproducibility."""

import json
import re
from dataclasses import asdict

import numpy as np
import pytest

import mixformer as mx
from mixformer.cli import GenRun, TrainRun, _resolve, main
from mixformer.features import read_dataset, read_oracle, read_schema
from mixformer.trainer import ABLATION_NAMES, auc


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    """A tiny generated corpus shared by the read-only command tests."""
    out = tmp_path_factory.mktemp("corpus")
    rc = main([
        "gen", "--out", str(out), "--users", "60", "--items", "30",
        "--requests", "80", "--candidates", "3", "--seq-len", "6",
        "--seed", "5", "--no-tune-oracle",
    ])
    assert rc == 0
    return out


def read_log(path):
    lines = path.read_text().splitlines()
    assert lines[0].startswith("# ")
    embedded = json.loads(lines[0][2:])
    return embedded, lines[1], lines[2:]


# -------------------------------------------------------------- resolve


class TestConfigResolution:
    def test_serialize_parse_identity(self):
        for dc in (GenRun(), TrainRun(epochs=3, model={"n_heads": 2})):
            assert _resolve(type(dc)(), asdict(dc), {}) == dc

    def test_flags_beat_file_beats_defaults(self, tmp_path, corpus):
        cfg = tmp_path / "train.json"
        cfg.write_text(json.dumps({"epochs": 3, "batch_size": 7, "max_steps": 2}))
        out = tmp_path / "run"
        rc = main([
            "train", "--data", str(corpus), "--out", str(out),
            "--config", str(cfg), "--epochs", "1",
        ])
        assert rc == 0
        record = json.loads((out / "metrics.json").read_text())
        resolved = record["run_config"]
        assert resolved["epochs"] == 1  # flag wins
        assert resolved["batch_size"] == 7  # file beats default
        assert resolved["max_steps"] == 2
        assert resolved["preset"] == "desk-small"  # untouched default

    def test_unknown_file_key_is_config_error(self, tmp_path, corpus):
        cfg = tmp_path / "train.json"
        cfg.write_text(json.dumps({"epoch": 3}))
        rc = main([
            "train", "--data", str(corpus), "--out", str(tmp_path / "r"),
            "--config", str(cfg),
        ])
        assert rc == 2

    def test_malformed_config_file(self, tmp_path, corpus):
        cfg = tmp_path / "bad.json"
        cfg.write_text("{not json")
        rc = main([
            "train", "--data", str(corpus), "--out", str(tmp_path / "r"),
            "--config", str(cfg),
        ])
        assert rc == 2
        assert main([
            "train", "--data", str(corpus), "--out", str(tmp_path / "r"),
            "--config", str(tmp_path / "absent.json"),
        ]) == 2


# ------------------------------------------------------------------ gen


class TestGen:
    def test_writes_all_artifacts(self, corpus):
        for name in ("schema.txt", "dataset.bin", "oracle.csv", "gen_config.json"):
            assert (corpus / name).exists()
        record = json.loads((corpus / "gen_config.json").read_text())
        assert record["run_config"]["n_users"] == 60
        assert record["n_impressions"] == 80 * 3

    def test_printed_auc_matches_files(self, tmp_path, capsys):
        out = tmp_path / "c"
        rc = main([
            "gen", "--out", str(out), "--users", "200", "--items", "60",
            "--requests", "400", "--candidates", "4", "--seq-len", "8",
            "--seed", "9",
        ])
        assert rc == 0
        printed = re.search(r"oracle AUC (\d\.\d+)", capsys.readouterr().out)
        schema = read_schema(str(out / "schema.txt"))
        dataset = read_dataset(str(out / "dataset.bin"), schema)
        oracle = read_oracle(str(out / "oracle.csv"))
        scores = np.concatenate([m[:, 0] for m in oracle])
        labels = np.concatenate([r.labels[:, 0] for r in dataset.requests])
        recomputed = auc(scores, labels)
        assert printed.group(1) == f"{recomputed:.4f}"
        assert 0.84 <= recomputed <= 0.86  # default band, tuning on

    def test_same_flags_same_bytes(self, corpus, tmp_path):
        out = tmp_path / "again"
        rc = main([
            "gen", "--out", str(out), "--users", "60", "--items", "30",
            "--requests", "80", "--candidates", "3", "--seq-len", "6",
            "--seed", "5", "--no-tune-oracle",
        ])
        assert rc == 0
        assert (out / "dataset.bin").read_bytes() == (corpus / "dataset.bin").read_bytes()
        assert (out / "oracle.csv").read_bytes() == (corpus / "oracle.csv").read_bytes()

    def test_rerun_from_embedded_config(self, corpus, tmp_path):
        record = json.loads((corpus / "gen_config.json").read_text())
        cfg = tmp_path / "replay.json"
        cfg.write_text(json.dumps(record["run_config"]))
        out = tmp_path / "replayed"
        rc = main(["gen", "--out", str(out), "--config", str(cfg)])
        assert rc == 0
        assert (out / "dataset.bin").read_bytes() == (corpus / "dataset.bin").read_bytes()


# ---------------------------------------------------------------- train


class TestTrain:
    def test_artifacts_and_log_shape(self, corpus, tmp_path):
        out = tmp_path / "run"
        rc = main([
            "train", "--data", str(corpus), "--out", str(out),
            "--max-steps", "3", "--batch-size", "30", "--eval-every", "2",
        ])
        assert rc == 0
        embedded, header, rows = read_log(out / "train_log.csv")
        assert embedded["max_steps"] == 3
        assert header == "step,epoch,loss,holdout_auc0"
        assert len(rows) == 3
        cells = [r.split(",") for r in rows]
        assert [c[0] for c in cells] == ["1", "2", "3"]
        assert cells[1][3] != "" and cells[0][3] == ""  # eval_every=2
        assert (out / "checkpoint.bin").exists()
        record = json.loads((out / "metrics.json").read_text())
        assert record["steps"] == 3
        assert record["model_config"]["n_heads"] == 4

    def test_model_overrides_from_config_file(self, corpus, tmp_path):
        cfg = tmp_path / "t.json"
        cfg.write_text(json.dumps(
            {"model": {"n_heads": 2, "head_dim": 8, "n_blocks": 1},
             "max_steps": 2}
        ))
        out = tmp_path / "run"
        rc = main([
            "train", "--data", str(corpus), "--out", str(out),
            "--config", str(cfg),
        ])
        assert rc == 0
        record = json.loads((out / "metrics.json").read_text())
        assert record["model_config"]["n_heads"] == 2
        assert record["model_config"]["head_dim"] == 8
        bad = tmp_path / "bad.json"
        bad.write_text(json.dumps({"model": {"heads": 2}}))
        assert main([
            "train", "--data", str(corpus), "--out", str(tmp_path / "r2"),
            "--config", str(bad),
        ]) == 2

    def test_zero_lr_leaves_parameters_at_init(self, corpus, tmp_path):
        out = tmp_path / "frozen"
        rc = main([
            "train", "--data", str(corpus), "--out", str(out),
            "--max-steps", "3", "--lr-dense", "0", "--lr-sparse", "0",
            "--seed", "11",
        ])
        assert rc == 0
        loaded, _, _ = mx.load_checkpoint(str(out / "checkpoint.bin"))
        schema = read_schema(str(corpus / "schema.txt"))
        fresh = mx.init_parameters(schema, loaded.config, seed=11)
        for name, tensor in fresh.dense.items():
            np.testing.assert_array_equal(loaded.dense[name].data, tensor.data)
        for name, table in fresh.tables.items():
            np.testing.assert_array_equal(
                loaded.tables[name].weight.data, table.weight.data
            )

    def test_resume_matches_uninterrupted_run(self, corpus, tmp_path):
        args = ["--data", str(corpus), "--batch-size", "15", "--epochs", "1"]
        straight = tmp_path / "straight"
        rc = main(["train", *args, "--out", str(straight), "--max-steps", "6"])
        assert rc == 0
        part1 = tmp_path / "part1"
        rc = main(["train", *args, "--out", str(part1), "--max-steps", "3"])
        assert rc == 0
        part2 = tmp_path / "part2"
        rc = main([
            "train", *args, "--out", str(part2), "--max-steps", "3",
            "--resume", str(part1 / "checkpoint.bin"),
        ])
        assert rc == 0

        a, _, _ = mx.load_checkpoint(str(straight / "checkpoint.bin"))
        b, _, _ = mx.load_checkpoint(str(part2 / "checkpoint.bin"))
        for name in a.dense:
            np.testing.assert_array_equal(a.dense[name].data, b.dense[name].data)
        loss = lambda p: [r.split(",")[2] for r in read_log(p / "train_log.csv")[2]]
        resumed = loss(part1) + [
            r.split(",")[2]
            for r in (part2 / "train_log.csv").read_text().splitlines()
        ]
        assert loss(straight) == resumed

    def test_resume_needs_optimizer_state(self, corpus, tmp_path):
        out = tmp_path / "run"
        main(["train", "--data", str(corpus), "--out", str(out), "--max-steps", "1"])
        store, _, _ = mx.load_checkpoint(str(out / "checkpoint.bin"))
        bare = tmp_path / "bare.bin"
        mx.save_checkpoint(str(bare), store)
        rc = main([
            "train", "--data", str(corpus), "--out", str(tmp_path / "r2"),
            "--resume", str(bare),
        ])
        assert rc == 3

    def test_decouple_flag_threads_through(self, corpus, tmp_path):
        out = tmp_path / "dec"
        rc = main([
            "train", "--data", str(corpus), "--out", str(out),
            "--max-steps", "2", "--decouple",
        ])
        assert rc == 0
        record = json.loads((out / "metrics.json").read_text())
        dec = record["model_config"]["decoupling"]
        assert dec["enabled"] is True
        assert dec["n_user_heads"] + dec["n_item_heads"] == 4

    def test_exit_codes(self, corpus, tmp_path):
        out = str(tmp_path / "r")
        assert main([
            "train", "--data", str(tmp_path / "nowhere"), "--out", out,
        ]) == 3
        assert main([
            "train", "--data", str(corpus), "--out", out,
            "--preset", "small-reported",
        ]) == 2
        with np.errstate(all="ignore"):
            assert main([
                "train", "--data", str(corpus), "--out", out,
                "--epochs", "8", "--lr-dense", "1e200",
            ]) == 4

    def test_invalid_preset_message_names_alternative(self, corpus, tmp_path, capsys):
        main([
            "train", "--data", str(corpus), "--out", str(tmp_path / "r"),
            "--preset", "small-reported",
        ])
        err = capsys.readouterr().err
        assert "small-corrected" in err
        assert "386" in err


# ---------------------------------------------------------------- flops


class TestFlops:
    def test_default_report(self, capsys):
        assert main(["flops"]) == 0
        out = capsys.readouterr().out
        assert "params (dense):" in out
        assert "flops for 1 candidate(s):" in out

    def test_sequence_axis_affine_in_t(self, tmp_path):
        csv = tmp_path / "seq.csv"
        rc = main([
            "flops", "--axis", "sequence", "--points", "8,32,20,0",
            "--out", str(csv),
        ])
        assert rc == 0
        _, header, rows = read_log(csv)
        assert header == "head_dim,n_blocks,seq_len,params,flops"
        pts = {int(r.split(",")[2]): int(r.split(",")[4]) for r in rows}
        slope = (pts[32] - pts[8]) // (32 - 8)
        assert pts[20] == pts[8] + slope * (20 - 8)
        assert pts[0] == pts[8] - slope * 8

    def test_sequence_axis_default_points(self, capsys):
        assert main(["flops", "--axis", "sequence"]) == 0
        out = capsys.readouterr().out
        ts = [int(line.split(",")[2]) for line in out.splitlines()[1:]]
        assert ts == [512, 2048, 8192, 10000]

    def test_dense_axis(self, tmp_path, capsys):
        assert main(["flops", "--axis", "dense"]) == 2
        rc = main([
            "flops", "--preset", "small-corrected", "--axis", "dense",
            "--points", "384:4,768:4",
        ])
        assert rc == 0
        rows = capsys.readouterr().out.splitlines()
        small = [int(x) for x in rows[-2].split(",")]
        medium = [int(x) for x in rows[-1].split(",")]
        assert medium[0] == 2 * small[0]
        assert medium[3] > small[3] and medium[4] > small[4]

    def test_rlb_savings_printed(self, corpus, capsys):
        rc = main([
            "flops", "--schema", str(corpus / "schema.txt"),
            "--rlb", "--candidates", "8", "--seq-len", "6",
        ])
        assert rc == 0
        m = re.search(r"savings at K=8: (0\.\d+)", capsys.readouterr().out)
        assert m and 0.0 < float(m.group(1)) < 1.0

    def test_production_summary(self, capsys):
        assert main(["flops", "--production"]) == 0
        out = capsys.readouterr().out
        m = re.search(r"savings vs unbatched: (0\.\d+)", out)
        assert m and 0.25 <= float(m.group(1)) <= 0.45
        assert "request-shared-sequence" in out

    def test_invalid_preset(self):
        with pytest.raises(SystemExit):  # argparse rejects unknown choices
            main(["flops", "--preset", "nope"])


# ------------------------------------------------------------ bench-rlb


class TestBenchRlb:
    def test_equivalence_and_savings_columns(self, corpus, tmp_path, capsys):
        csv = tmp_path / "bench.csv"
        rc = main([
            "bench-rlb", "--data", str(corpus), "--candidates-list", "1,2",
            "--requests", "4", "--out", str(csv),
        ])
        assert rc == 0
        embedded, header, rows = read_log(csv)
        assert embedded["candidates_list"] == "1,2"
        assert header.startswith("k,wall_percand_s")
        assert len(rows) == 2
        k1 = rows[0].split(",")
        k2 = rows[1].split(",")
        assert float(k1[4]) < 1e-9 and float(k2[4]) < 1e-9  # max |diff|
        assert float(k1[5]) == 0.0  # no shared work to save at K=1
        assert float(k2[5]) > 0.0


# --------------------------------------------------------------- ablate


class TestAblate:
    def test_csv_has_base_plus_six_single_switches(self, corpus, tmp_path):
        out = tmp_path / "abl"
        rc = main([
            "ablate", "--data", str(corpus), "--out", str(out),
            "--max-steps", "2", "--batch-size", "30",
        ])
        assert rc == 0
        embedded, header, rows = read_log(out / "ablations.csv")
        assert embedded["max_steps"] == 2
        assert header == "name,changed_fields,params,flops,final_loss,auc0,delta_auc0"
        assert len(rows) == 7
        cells = [r.split(",") for r in rows]
        assert cells[0][0] == "base" and cells[0][1] == "0"
        assert [c[0] for c in cells[1:]] == list(ABLATION_NAMES)
        for c in cells[1:]:
            assert c[1] == "1"  # exactly one config switch
            assert np.isfinite(float(c[4])) and np.isfinite(float(c[5]))
