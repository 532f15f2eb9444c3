import json
import os
import subprocess
import sys

import numpy as np
import pytest

from langdet.harness import cli
from langdet.harness.train import TrainingDiverged
from langdet.matching import BACKEND

TINY = ["--images-per-dataset", "16", "--eval-images-per-dataset", "6", "--epochs", "1", "--seed", "1"]


@pytest.fixture(scope="module")
def run_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    assert cli.main(["train", *TINY, "--out", str(out)]) == 0
    return out


class TestCommands:
    def test_gen(self, tmp_path):
        assert cli.main(["gen", *TINY, "--out", str(tmp_path)]) == 0
        for name in ("labelspace.json", "embeddings.txt", "train.jsonl", "test.jsonl", "config.json"):
            assert (tmp_path / name).exists(), name
        assert len((tmp_path / "train.jsonl").read_text().splitlines()) == 32

    def test_train_outputs(self, run_dir):
        for name in ("model.ckpt", "report.json", "per_class.csv", "timing.json"):
            assert (run_dir / name).exists(), name
        rep = json.loads((run_dir / "report.json").read_text())
        assert rep["config"]["images_per_dataset"] == 16
        assert 0.0 <= rep["eval"]["multilabel_recall"] <= 1.0
        assert "train_seconds" not in rep

    def test_eval_no_cem(self, run_dir, tmp_path):
        out = tmp_path / "ev.json"
        assert cli.main(["eval", "--run", str(run_dir), "--no-cem", "--out", str(out)]) == 0
        ev = json.loads(out.read_text())
        assert ev["use_cem"] is False

    def test_detect_lines(self, run_dir, tmp_path):
        out = tmp_path / "d.jsonl"
        assert cli.main(["detect", "--run", str(run_dir), "--threshold", "0", "--out", str(out)]) == 0
        recs = [json.loads(l) for l in out.read_text().splitlines()]
        assert recs
        assert set(recs[0]) == {"image_id", "category", "score", "box"}
        assert all(len(r["box"]) == 4 for r in recs)

    def test_detect_named_categories(self, run_dir, tmp_path):
        first = (run_dir / "per_class.csv").read_text().splitlines()[1].split(",")[0]
        out = tmp_path / "d.jsonl"
        assert cli.main(["detect", "--run", str(run_dir), "--categories", first, "--threshold", "0",
                         "--out", str(out)]) == 0
        cats = {json.loads(l)["category"] for l in out.read_text().splitlines()}
        assert cats <= {first}

    def test_compare(self, tmp_path):
        assert cli.main(["compare", *TINY, "--out", str(tmp_path)]) == 0
        rep = json.loads((tmp_path / "report.json").read_text())
        assert set(rep["summary"]) == {"group", "standard_merged"}
        assert (tmp_path / "group.ckpt").exists() and (tmp_path / "standard_merged.ckpt").exists()
        assert np.isclose(rep["delta_mean_ap"],
                          rep["summary"]["group"]["mean_ap"] - rep["summary"]["standard_merged"]["mean_ap"])


class TestExitCodes:
    @pytest.mark.parametrize("flags", [
        ["--topk", "0"],
        ["--alias-fraction", "1.5"],
        ["--max-objects", "9", "--topk", "2"],
    ])
    def test_bad_config(self, tmp_path, flags, capsys):
        assert cli.main(["train", *TINY, *flags, "--out", str(tmp_path)]) == 2
        assert "config error" in capsys.readouterr().err

    def test_bad_choice_is_usage_error(self, tmp_path):
        with pytest.raises(SystemExit) as exc:
            cli.main(["train", *TINY, "--matching-mode", "bogus", "--out", str(tmp_path)])
        assert exc.value.code == 2

    def test_unknown_config_key(self, tmp_path):
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps({"lr": 0.01, "warmup": 3}))
        assert cli.main(["train", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 2

    def test_unknown_category(self, run_dir, capsys):
        assert cli.main(["detect", "--run", str(run_dir), "--categories", "no such thing"]) == 2

    def test_missing_run(self, tmp_path):
        assert cli.main(["eval", "--run", str(tmp_path / "nope")]) == 2

    def test_corrupt_checkpoint(self, run_dir, tmp_path):
        import shutil
        bad = tmp_path / "bad"
        shutil.copytree(run_dir, bad)
        (bad / "model.ckpt").write_bytes(b"garbage")
        assert cli.main(["eval", "--run", str(bad)]) == 2

    def test_divergence(self, tmp_path, monkeypatch, capsys):
        from langdet.model import Model

        def boom(cfg, bench=None, progress=None):
            raise TrainingDiverged("non-finite loss at step 4", Model.init(np.eye(16), seed=0), 4)

        monkeypatch.setattr(cli, "run_train", boom)
        assert cli.main(["train", *TINY, "--out", str(tmp_path)]) == 3
        assert (tmp_path / "last_good.ckpt").exists()
        assert "diverged" in capsys.readouterr().err


class TestBackends:
    def test_pure_python_fallback_selected(self):
        env = dict(os.environ, LANGDET_PURE_PYTHON="1")
        code = "from langdet.matching import BACKEND, hungarian; print(BACKEND, hungarian([[1, 0], [0, 1]]).pairs)"
        out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True, check=True)
        assert out.stdout.split()[0] == "python"
        assert "[(0, 1), (1, 0)]" in out.stdout

    def test_default_backend_compiled_when_built(self):
        try:
            import langdet._hungarian  # noqa: F401
        except ImportError:
            pytest.skip("extension not built")
        assert BACKEND == "compiled"
