import json
import shutil
from pathlib import Path

import numpy as np
import pytest

from crossmodal.cli import run

SMOKE = Path(__file__).resolve().parents[1] / "configs" / "smoke.json"
METHODS = ["bl-ind", "bl-shfinal", "bl-shall", "a-tune", "a-tune-free", "b-gauss", "b-gmm", "c"]


def pipeline(wd, config=SMOKE, seed=None):
    extra = ["--seed", str(seed)] if seed is not None else []
    base = ["--config", str(config), "--workdir", str(wd), *extra]
    steps = [["gen-data"], ["pretrain"], ["fit-stats"]]
    steps += [["train", "--method", m] for m in METHODS]
    steps += [["eval"], ["probe-units"], ["report"]]
    for s in steps:
        assert run([s[0], *base, *s[1:]]) == 0, s


def tree_bytes(root: Path) -> dict:
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


@pytest.fixture(scope="module")
def smoke_run(tmp_path_factory):
    wd = tmp_path_factory.mktemp("smoke")
    pipeline(wd)
    return wd


class TestPipeline:
    def test_artifacts(self, smoke_run):
        wd = smoke_run
        assert (wd / "data" / "dataset.xmd").read_bytes()[:4] == b"XMD1"
        assert (wd / "source.xmp").read_bytes()[:4] == b"XMP1"
        assert (wd / "stats.gmm.xms").read_bytes()[:4] == b"XMS1"
        for m in METHODS:
            assert (wd / "models" / f"{m}.xmp").exists()
            assert (wd / "eval" / f"{m}.shared2.json").exists()
            assert (wd / "probe" / f"{m}.join.summary.json").exists()

    def test_manifest_counts(self, smoke_run):
        man = json.loads((smoke_run / "data" / "manifest.json").read_text())
        assert man["num_classes"] == 4
        assert [m["train"] for m in man["modalities"]] == [52] * 3
        assert [m["val"] for m in man["modalities"]] == [16] * 3

    def test_report_shape(self, smoke_run):
        text = (smoke_run / "report.txt").read_text()
        assert "Mean mAP" in text
        for label in ("BL-Ind", "C:"):
            assert label in text
        rep = json.loads((smoke_run / "report.json").read_text())
        assert set(rep["cross_modal"]) == set(METHODS)
        assert set(rep["layers"]["bl-ind"]) == {"join", "shared1", "shared2"}

    def test_report_mean_is_off_diagonal(self, smoke_run):
        rep = json.loads((smoke_run / "report.json").read_text())
        for m, r in rep["cross_modal"].items():
            vals = [v for q, row in r["map"].items() for t, v in row.items() if q != t]
            assert len(vals) == 6
            assert abs(r["mean"] - np.mean(vals)) < 1e-9

    def test_training_log(self, smoke_run):
        lines = (smoke_run / "models" / "c.log.jsonl").read_text().splitlines()
        assert len(lines) == 40 * 3
        rec = json.loads(lines[-1])
        assert set(rec) == {"step", "modality", "ce", "reg_terms", "total"}

    def test_idempotent(self, smoke_run, tmp_path):
        wd = tmp_path / "again"
        pipeline(wd)
        assert tree_bytes(wd) == tree_bytes(smoke_run)

    def test_rerun_in_place(self, smoke_run, tmp_path):
        wd = tmp_path / "copy"
        shutil.copytree(smoke_run, wd)
        before = tree_bytes(wd)
        assert run(["gen-data", "--config", str(SMOKE), "--workdir", str(wd)]) == 0
        assert run(["eval", "--config", str(SMOKE), "--workdir", str(wd), "--method", "c"]) == 0
        assert run(["report", "--workdir", str(wd)]) == 0
        assert tree_bytes(wd) == before

    def test_seed_flag(self, smoke_run, tmp_path):
        wd = tmp_path / "s"
        assert run(["gen-data", "--config", str(SMOKE), "--workdir", str(wd), "--seed", "5"]) == 0
        other = (wd / "data" / "dataset.xmd").read_bytes()
        assert other != (smoke_run / "data" / "dataset.xmd").read_bytes()


class TestExitCodes:
    def test_missing_config(self, tmp_path, capsys):
        code = run(["gen-data", "--config", str(tmp_path / "absent.json"), "--workdir", str(tmp_path)])
        assert code == 2
        assert "absent.json" in capsys.readouterr().err

    def test_bad_config(self, tmp_path):
        cfg = tmp_path / "c.json"
        cfg.write_text('{"seed": 0, "train": {"nope": 1}}')
        assert run(["gen-data", "--config", str(cfg), "--workdir", str(tmp_path)]) == 2

    def test_missing_stats(self, tmp_path, capsys):
        base = ["--config", str(SMOKE), "--workdir", str(tmp_path)]
        assert run(["gen-data", *base]) == 0
        assert run(["pretrain", *base]) == 0
        assert run(["train", *base, "--method", "b-gmm"]) == 4
        assert "stats.gmm.xms" in capsys.readouterr().err

    def test_missing_dataset(self, tmp_path, capsys):
        assert run(["pretrain", "--config", str(SMOKE), "--workdir", str(tmp_path)]) == 4
        assert "dataset.xmd" in capsys.readouterr().err

    def test_report_without_eval(self, tmp_path):
        assert run(["report", "--workdir", str(tmp_path)]) == 4

    def test_corrupt_dataset(self, tmp_path):
        base = ["--config", str(SMOKE), "--workdir", str(tmp_path)]
        assert run(["gen-data", *base]) == 0
        (tmp_path / "data" / "dataset.xmd").write_bytes(b"JUNK")
        assert run(["pretrain", *base]) == 3

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_numeric_failure(self, tmp_path):
        cfg = json.loads(SMOKE.read_text())
        cfg["train"].update(lr=1e6, pretrain_lr=1e6, init_std=10.0)
        path = tmp_path / "hot.json"
        path.write_text(json.dumps(cfg))
        base = ["--config", str(path), "--workdir", str(tmp_path)]
        assert run(["gen-data", *base]) == 0
        assert run(["pretrain", *base]) == 5

    def test_no_workdir(self):
        assert run(["gen-data", "--config", str(SMOKE)]) == 2
