import json
import os
import re

import pytest

from egn.cli import build_parser, main
from egn.data import load_bundle

TOY = [
    "--preset",
    "toy",
    "--set",
    "data.n_patients=4",
    "--set",
    "data.windows_per_patient=8",
    "--set",
    "data.n_folds=2",
    "--set",
    "extractor.epochs=1",
    "--set",
    "extractor.base_channels=2",
    "--set",
    "training.epochs=2",
    "--set",
    "training.batch_size=4",
]


@pytest.fixture
def out(tmp_path):
    return tmp_path / "out"


def _egn(out, *argv):
    return main([*argv, *TOY, "--set", f"output_dir={out}"])


class TestParser:
    def test_common_flags_after_command(self):
        args = build_parser().parse_args(["train", "--variant", "without_eb", "--seed", "3"])
        assert (args.command, args.variant, args.seed) == ("train", "without_eb", 3)

    def test_unknown_variant(self):
        with pytest.raises(SystemExit):
            build_parser().parse_args(["train", "--variant", "nope"])

    def test_retrieve_needs_window(self):
        with pytest.raises(SystemExit):
            build_parser().parse_args(["retrieve"])


class TestCommands:
    def test_pipeline(self, out, capsys):
        assert _egn(out, "gen-data", "--seed", "5") == 0
        assert json.loads((out / "config.json").read_text())["data"]["seed"] == 5
        assert (out / "data" / "manifest.json").exists()

        assert _egn(out, "train-extractor") == 0
        assert (out / "extractor" / "extractor.egnx").exists()
        assert (out / "extractor" / "loss_curve.csv").read_text().startswith("epoch,l1,")

        assert _egn(out, "build-index") == 0
        assert (out / "index" / "index.egni").exists()

        bundle = load_bundle(str(out / "data"))
        query_id, query_patient = int(bundle.window_ids[9]), int(bundle.patient_ids[9])
        capsys.readouterr()
        assert _egn(out, "retrieve", "--window-id", str(query_id)) == 0
        found = re.findall(r"window\s+(\d+)\s+patient\s+(\d+)\s+distance", capsys.readouterr().out)
        assert len(found) == 2
        assert all(int(p) != query_patient for _, p in found)

        assert _egn(out, "train", "--variant", "full") == 0
        run = out / "runs" / "full"
        for name in ("config.json", "model_fold0.egnm", "model_fold1.egnm", "loss_curve.csv"):
            assert (run / name).exists(), name
        folds = json.loads((run / "folds.json").read_text())
        assert sorted(folds["patient_fold"].values()) == [0, 0, 1, 1]
        assert [f["fold"] for f in folds["folds"]] == [0, 1]

        assert _egn(out, "eval", "--run-name", "full") == 0
        metrics = json.loads((run / "metrics.json").read_text())
        assert len(metrics["folds"]) == 2
        assert -1.0 <= metrics["pcc_at_m"] <= 1.0
        assert (run / "metrics.csv").read_text().splitlines()[-1].startswith("summary,")
        assert not (out / ".lock").exists()

    def test_missing_artifact(self, out, capsys):
        assert _egn(out, "train-extractor") == 2
        assert "egn gen-data" in capsys.readouterr().out

    def test_eval_before_train(self, out, capsys):
        assert _egn(out, "gen-data") == 0
        assert _egn(out, "eval", "--run-name", "nothing") == 2
        assert "egn train" in capsys.readouterr().out

    def test_bad_override(self, out, capsys):
        assert _egn(out, "gen-data", "--set", "model.bogus=1") == 2
        assert "model.bogus" in capsys.readouterr().out

    def test_locked_output(self, out):
        os.makedirs(out)
        (out / ".lock").write_text("1")
        assert _egn(out, "gen-data") == 2

    def test_gradcheck(self, out):
        assert _egn(out, "gradcheck") == 0
        report = json.loads((out / "gradcheck" / "report.json").read_text())
        assert report["passed"] is True
        assert all(g["checked"] + g["skipped"] >= 1 for g in report["groups"])
        assert report["checked"] == sum(g["checked"] for g in report["groups"])

    def test_same_seed_same_metrics(self, tmp_path):
        runs = []
        for name in ("first", "second"):
            out = tmp_path / name
            for command in ("gen-data", "train-extractor", "build-index", "train", "eval"):
                assert _egn(out, command, "--seed", "2") == 0, command
            runs.append((out / "runs" / "full" / "metrics.csv").read_bytes())
        assert runs[0] == runs[1]
