"""End-to-end command-line checks on a tiny synthetic corpus."""

import threading

import numpy as np
import pytest

from fedsearch import autoencoder as ae
from fedsearch import cli
from fedsearch import datasets as ds
from fedsearch import federation as fed
from fedsearch import modelio

MODEL_FLAGS = ["--image-size", "32", "--filters", "4,8", "--bottleneck", "16", "--seed", "3"]


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("corpus")
    code = cli.main([
        "synth", "--out", str(root), "--clients", "2", "--train", "6", "--val", "2",
        "--test", "2", "--image-size", "32", "--seed", "11",
    ])
    assert code == 0
    return root


def manifest_of(corpus, k):
    return str(corpus / f"client-{k}" / "manifest.csv")


class TestSynth:
    def test_writes_manifests_and_run_record(self, corpus):
        assert (corpus / "client-0" / "manifest.csv").exists()
        assert (corpus / "client-1" / "manifest.csv").exists()
        assert (corpus / "synth.run.json").exists()


class TestTrainLocal:
    def test_zero_epochs_equals_initialization(self, corpus, tmp_path):
        out = tmp_path / "m0.fcwb"
        code = cli.main(["train-local", "--manifest", manifest_of(corpus, 0),
                         "--out", str(out), "--epochs", "0", *MODEL_FLAGS])
        assert code == 0
        model = modelio.load_model(out)
        fresh = ae.build_model(model.config)
        np.testing.assert_array_equal(ae.flatten_weights(model), ae.flatten_weights(fresh))

    def test_loss_decreases_and_log_written(self, corpus, tmp_path):
        out = tmp_path / "m.fcwb"
        code = cli.main(["train-local", "--manifest", manifest_of(corpus, 0),
                         "--out", str(out), "--epochs", "8", "--batch", "4", *MODEL_FLAGS])
        assert code == 0
        lines = (tmp_path / "m.fcwb.losses.txt").read_text().splitlines()
        losses = [float(line.split()[1]) for line in lines]
        assert len(losses) == 8
        assert losses[-1] < losses[0]
        assert (tmp_path / "m.fcwb.run.json").exists()

    def test_rerun_is_byte_identical(self, corpus, tmp_path):
        outs = []
        for name in ("a.fcwb", "b.fcwb"):
            out = tmp_path / name
            code = cli.main(["train-local", "--manifest", manifest_of(corpus, 0),
                             "--out", str(out), "--epochs", "3", "--batch", "4", *MODEL_FLAGS])
            assert code == 0
            outs.append(out.read_bytes())
        assert outs[0] == outs[1]


class TestFedSim:
    def test_single_client_equals_local_training(self, corpus, tmp_path):
        # Full-batch SGD makes per-epoch shuffling irrelevant, so R rounds of
        # one local epoch equal R local epochs exactly.
        fed_out = tmp_path / "fed.fcwb"
        local_out = tmp_path / "local.fcwb"
        common = ["--optimizer", "sgd", "--lr", "0.05", "--batch", "64", *MODEL_FLAGS]
        assert cli.main(["fed-sim", "--manifest", manifest_of(corpus, 0),
                         "--out", str(fed_out), "--rounds", "4", "--local-epochs", "1",
                         *common]) == 0
        assert cli.main(["train-local", "--manifest", manifest_of(corpus, 0),
                         "--out", str(local_out), "--epochs", "4", *common]) == 0
        assert fed_out.read_bytes() == local_out.read_bytes()

    def test_round_log_written(self, corpus, tmp_path):
        out = tmp_path / "fed.fcwb"
        code = cli.main(["fed-sim", "--manifest", manifest_of(corpus, 0),
                         "--manifest", manifest_of(corpus, 1),
                         "--out", str(out), "--rounds", "2", *MODEL_FLAGS])
        assert code == 0
        lines = (tmp_path / "fed.fcwb.rounds.jsonl").read_text().splitlines()
        assert len(lines) == 2


class TestDualTransport:
    def test_wire_matches_simulation_bytes(self, corpus, tmp_path):
        sim_out = tmp_path / "sim.fcwb"
        wire_out = tmp_path / "wire.fcwb"
        common = ["--rounds", "2", "--lr", "0.01", "--batch", "8", *MODEL_FLAGS]
        assert cli.main(["fed-sim", "--manifest", manifest_of(corpus, 0),
                         "--manifest", manifest_of(corpus, 1),
                         "--out", str(sim_out), *common]) == 0

        import socket

        with socket.socket() as probe:
            probe.bind(("127.0.0.1", 0))
            port = probe.getsockname()[1]
        listen = f"127.0.0.1:{port}"
        codes = {}

        def server():
            codes["server"] = cli.main([
                "fed-server", "--listen", listen, "--roster", "client-0:6,client-1:6",
                "--out", str(wire_out), "--timeout", "30", *common])

        def client(k):
            codes[k] = cli.main([
                "fed-client", "--server", listen, "--client-id", f"client-{k}",
                "--manifest", manifest_of(corpus, k), "--timeout", "30", *common])

        threads = [threading.Thread(target=server, daemon=True)]
        threads += [threading.Thread(target=client, args=(k,), daemon=True) for k in (0, 1)]
        import time

        threads[0].start()
        time.sleep(0.3)  # let the server bind before clients connect
        for t in threads[1:]:
            t.start()
        for t in threads:
            t.join(timeout=120)
            assert not t.is_alive()
        assert codes == {"server": 0, 0: 0, 1: 0}
        assert wire_out.read_bytes() == sim_out.read_bytes()

    def test_missing_client_exits_with_round_error(self, corpus, tmp_path):
        code = cli.main([
            "fed-server", "--listen", "127.0.0.1:0", "--roster", "client-0:6,ghost:6",
            "--out", str(tmp_path / "x.fcwb"), "--rounds", "1", "--timeout", "0.5",
            *MODEL_FLAGS])
        assert code == 3


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory, corpus):
    root = tmp_path_factory.mktemp("pipeline")
    model = root / "model.fcwb"
    index = root / "index.fcix"
    assert cli.main(["train-local", "--manifest", manifest_of(corpus, 0),
                     "--out", str(model), "--epochs", "2", "--batch", "4", *MODEL_FLAGS]) == 0
    assert cli.main(["index", "--model", str(model), "--manifest", manifest_of(corpus, 0),
                     "--out", str(index)]) == 0
    return {"root": root, "model": model, "index": index}


class TestIndexQueryEval:
    def test_index_counts_train_and_validation(self, corpus, pipeline):
        from fedsearch import retrieval as rt

        index = rt.load_index(pipeline["index"])
        assert len(index) == 8  # 6 train + 2 validation

    def test_query_prints_k_hits(self, corpus, pipeline, capsys):
        manifest = ds.load_manifest(corpus / "client-0" / "manifest.csv")
        test_record = manifest.split_records("test")[0]
        code = cli.main(["query", "--model", str(pipeline["model"]),
                         "--index", str(pipeline["index"]), "--image", str(test_record.path),
                         "--k", "5", "--scenario", "sen1", "--magnification",
                         test_record.magnification, "--true-label", test_record.label])
        assert code == 0
        out = capsys.readouterr().out
        hit_lines = [l for l in out.splitlines() if l.lstrip()[:1].isdigit()]
        assert len(hit_lines) == 5
        assert all("[match]" in l or "[miss]" in l for l in hit_lines)

    def test_eval_report_self_consistent(self, corpus, pipeline, tmp_path):
        from fedsearch import evaluation as ev

        out = tmp_path / "report.txt"
        code = cli.main(["eval", "--model", str(pipeline["model"]),
                         "--index", str(pipeline["index"]),
                         "--manifest", manifest_of(corpus, 0),
                         "--out", str(out), "--k", "3"])
        assert code == 0
        lines = out.read_text().splitlines()
        fields = {}
        for line in lines[1:9]:
            key, value = line.split()
            fields[key] = float(value)
        cm = ev.ConfusionMatrix(tp=int(fields["tp"]), fp=int(fields["fp"]),
                                fn=int(fields["fn"]), tn=int(fields["tn"]))
        accuracy, precision, f1 = ev.metrics(cm)
        assert fields["accuracy"] == pytest.approx(accuracy, abs=1e-6)
        assert fields["precision"] == pytest.approx(precision, abs=1e-6)
        assert fields["f1"] == pytest.approx(f1, abs=1e-6)

    def test_eval_perfect_when_test_images_duplicate_train(self, corpus, pipeline, tmp_path):
        # Copy two indexed images under fresh test ids: with K=1 the nearest
        # hit is the identical twin, so every prediction is correct.
        manifest = ds.load_manifest(corpus / "client-0" / "manifest.csv")
        train = manifest.split_records("train")[:2]
        records = [
            ds.ImageRecord(id=f"twin-{i}", path=r.path, label=r.label,
                           magnification=r.magnification, center=r.center, split="test")
            for i, r in enumerate(train)
        ]
        twin_manifest = tmp_path / "twins.csv"
        ds.write_manifest(ds.DatasetManifest(records=records), twin_manifest,
                          relative_to=twin_manifest.parent)
        out = tmp_path / "perfect.txt"
        code = cli.main(["eval", "--model", str(pipeline["model"]),
                         "--index", str(pipeline["index"]), "--manifest", str(twin_manifest),
                         "--out", str(out), "--k", "1"])
        assert code == 0
        assert "accuracy 1.000000" in out.read_text()


class TestExitCodes:
    def test_data_error_is_4(self, tmp_path):
        missing = tmp_path / "nope.csv"
        code = cli.main(["train-local", "--manifest", str(missing),
                         "--out", str(tmp_path / "m.fcwb"), *MODEL_FLAGS])
        assert code == 4

    def test_config_error_is_2(self, corpus, tmp_path):
        # 30 is not divisible by the stride reduction factor.
        code = cli.main(["train-local", "--manifest", manifest_of(corpus, 0),
                         "--out", str(tmp_path / "m.fcwb"), "--epochs", "1",
                         "--image-size", "30", "--filters", "4,8", "--bottleneck", "8",
                         "--seed", "1"])
        assert code == 2

    def test_unknown_flag_exits_2(self):
        with pytest.raises(SystemExit) as exc:
            cli.main(["synth", "--nonsense"])
        assert exc.value.code == 2

    def test_corrupt_model_file_is_4(self, corpus, pipeline, tmp_path):
        bad = tmp_path / "bad.fcwb"
        data = bytearray(pipeline["model"].read_bytes())
        data[0] ^= 0xFF
        bad.write_bytes(bytes(data))
        import shutil

        shutil.copy(str(pipeline["model"]) + ".config.json", str(bad) + ".config.json")
        code = cli.main(["index", "--model", str(bad), "--manifest", manifest_of(corpus, 0),
                         "--out", str(tmp_path / "i.fcix")])
        assert code == 4
