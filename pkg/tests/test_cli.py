import csv
import json
from pathlib import Path

import numpy as np
import pytest

from countem import cli
from countem.config import load_config
from countem.em import run_countem, single_labeling
from countem.events import EventTrack, WindowSpec, histograms_from_dict
from countem.grid import read_matrix
from countem.model import encode_checkpoint, load_checkpoint
from countem.pipeline import build_split, em_tracks

TINY = {
    "seed": 5,
    "corpus": {"pretrain_tracks": 2, "train_tracks": 2, "test_tracks": 2},
    "score": {"track_len_s": 4.0},
    "augment": {"copies": 1},
    "model": {"hidden": 16},
    "pretrain": {"steps": 30, "batch_frames": 64},
    "em": {"max_iterations": 2, "steps_per_m_step": 10, "batch_frames": 64},
}


def run(*args):
    return cli.main([str(a) for a in args])


def tree(root: Path, skip=()):
    return {p.relative_to(root).as_posix(): p.read_bytes()
            for p in sorted(root.rglob("*")) if p.is_file() and p.name not in skip}


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg_path = root / "tiny.json"
    cfg_path.write_text(json.dumps(TINY))
    c = ["--config", cfg_path]
    assert run(*c, "gen", root / "corpus") == 0
    assert run(*c, "histify", root / "corpus/manifest.json", "--out-dir", root / "hist") == 0
    assert run(*c, "pretrain", root / "corpus/manifest.json", "--out", root / "pre.ckpt") == 0
    assert run(*c, "train-em", root / "corpus/manifest.json", "--init", root / "pre.ckpt",
               "--hists", root / "hist", "--out-dir", root / "em") == 0
    assert run(*c, "predict", root / "em/model.ckpt", root / "corpus/manifest.json", "--out-dir", root / "pred") == 0
    assert run(*c, "eval", root / "corpus/manifest.json", "--pred-dir", root / "pred", "--out", root / "report") == 0
    return root, c


def test_gen_layout_and_disjoint_splits(work):
    root, _ = work
    manifest = json.loads((root / "corpus/manifest.json").read_text())
    ids = [t["track_id"] for t in manifest["tracks"]]
    assert len(ids) == len(set(ids)) == 6
    assert {t["split"]: t["timbre"] for t in manifest["tracks"]} == {"pretrain": "A", "train": "B", "test": "B"}
    assert len({t["seed"] for t in manifest["tracks"]}) == 6
    for t in manifest["tracks"]:
        assert (root / "corpus" / t["wav_path"]).exists()
        ev = EventTrack.from_dict(json.loads((root / "corpus" / t["events_path"]).read_text()))
        assert len(ev) == t["note_count"] > 0


def test_every_command_is_byte_reproducible(work, tmp_path):
    root, c = work
    m = root / "corpus/manifest.json"
    assert run(*c, "gen", tmp_path / "corpus") == 0
    assert tree(tmp_path / "corpus") == tree(root / "corpus")
    assert run(*c, "histify", m, "--out-dir", tmp_path / "hist") == 0
    assert tree(tmp_path / "hist") == tree(root / "hist")
    assert run(*c, "pretrain", m, "--out", tmp_path / "pre.ckpt") == 0
    assert (tmp_path / "pre.ckpt").read_bytes() == (root / "pre.ckpt").read_bytes()
    assert run(*c, "train-em", m, "--init", root / "pre.ckpt", "--hists", root / "hist",
               "--out-dir", tmp_path / "em") == 0
    assert tree(tmp_path / "em", skip={"timing.jsonl"}) == tree(root / "em", skip={"timing.jsonl"})
    assert run(*c, "predict", root / "em/model.ckpt", m, "--out-dir", tmp_path / "pred") == 0
    assert tree(tmp_path / "pred") == tree(root / "pred")
    assert run(*c, "eval", m, "--pred-dir", root / "pred", "--out", tmp_path / "report") == 0
    for ext in (".json", ".csv"):
        assert (tmp_path / f"report{ext}").read_bytes() == (root / f"report{ext}").read_bytes()


def test_histify_full_track_and_noise(work, tmp_path):
    root, c = work
    m = root / "corpus/manifest.json"
    doc = json.loads((root / "hist/train-0000.hist.json").read_text())
    hists, spec = histograms_from_dict(doc)
    ev = EventTrack.from_dict(json.loads((root / "corpus/train/train-0000.events.json").read_text()))
    assert spec.full_track and len(hists) == 1
    assert np.array_equal(hists[0].counts, ev.pitch_counts())

    assert run(*c, "histify", m, "--out-dir", tmp_path / "n0", "--noise", "0.0") == 0
    assert tree(tmp_path / "n0") == tree(root / "hist")
    assert run(*c, "histify", m, "--out-dir", tmp_path / "a", "--noise", "0.2", "--seed", "7") == 0
    assert run(*c, "histify", m, "--out-dir", tmp_path / "b", "--noise", "0.2", "--seed", "7") == 0
    assert tree(tmp_path / "a") == tree(tmp_path / "b")
    # counts here are 1-2 per pitch, which 20% noise cannot move after rounding
    assert run(*c, "histify", m, "--out-dir", tmp_path / "loud", "--noise", "0.9") == 0
    assert tree(tmp_path / "loud") != tree(root / "hist")

    assert run(*c, "histify", m, "--out-dir", tmp_path / "w", "--window", "2") == 0
    hists, spec = histograms_from_dict(json.loads((tmp_path / "w/train-0000.hist.json").read_text()))
    assert spec == WindowSpec(2.0) and len(hists) == 2


def test_train_em_outputs(work):
    root, _ = work
    rows = [json.loads(line) for line in (root / "em/report.jsonl").read_text().splitlines()]
    assert [r["iteration"] for r in rows] == [1, 2]
    assert all("wall_time_s" not in r and r["test_f"] is not None for r in rows)
    timing = [json.loads(line) for line in (root / "em/timing.jsonl").read_text().splitlines()]
    assert [t["iteration"] for t in timing] == [1, 2]
    y = read_matrix(root / "em/labels/train-0000.tpgm")
    assert y.values.dtype == np.uint8


def test_max_iterations_one_is_the_single_labeling_arm(work, tmp_path):
    root, c = work
    assert run(*c, "train-em", root / "corpus/manifest.json", "--init", root / "pre.ckpt",
               "--hists", root / "hist", "--out-dir", tmp_path / "one", "--max-iterations", 1, "--no-test") == 0
    cfg = load_config(root / "tiny.json")
    tracks = em_tracks(build_split(cfg, "train"), WindowSpec("full"))
    expected = run_countem(load_checkpoint(root / "pre.ckpt"), tracks, single_labeling(cfg.em_config()))
    assert expected.report[0].iteration == 1 and len(expected.loss_trace) == 20
    assert (tmp_path / "one/model.ckpt").read_bytes() == encode_checkpoint(expected.model)


def test_supervised_upper_bound(work, tmp_path):
    root, c = work
    assert run(*c, "train-em", root / "corpus/manifest.json", "--init", root / "pre.ckpt",
               "--supervised", "--out-dir", tmp_path / "sup") == 0
    assert (tmp_path / "sup/model.ckpt").exists()


def test_eval_reference_against_itself(work, tmp_path):
    root, c = work
    assert run(*c, "eval", root / "corpus/manifest.json", "--pred-dir", root / "corpus/test",
               "--out", tmp_path / "self") == 0
    rows = list(csv.DictReader((tmp_path / "self.csv").open()))
    assert [r["track_id"] for r in rows] == ["test-0000", "test-0001", "__corpus__"]
    assert all(r["f_score"] == "1.000000" and r["hist_f_score"] == "1.000000" for r in rows)
    doc = json.loads((tmp_path / "self.json").read_text())
    assert doc["corpus"]["f_score"] == 1.0


def test_predict_outputs_and_histogram_decoding(work, tmp_path):
    root, c = work
    z = read_matrix(root / "pred/test-0000.tpgm")
    assert z.values.dtype == np.float32 and z.grid.pitch_count == 88
    assert run(*c, "histify", root / "corpus/manifest.json", "--split", "test", "--out-dir", tmp_path / "h") == 0
    assert run(*c, "predict", root / "em/model.ckpt", root / "corpus/manifest.json", "--out-dir", tmp_path / "p",
               "--decode", "histogram", "--hists", tmp_path / "h") == 0
    assert run(*c, "eval", root / "corpus/manifest.json", "--pred-dir", tmp_path / "p", "--out", tmp_path / "r") == 0
    doc = json.loads((tmp_path / "r.json").read_text())
    # count-constrained decoding reproduces the reference histograms exactly
    assert doc["corpus"]["hist_f_score"] == 1.0


def test_usage_errors_exit_1(work, capsys):
    root, c = work
    assert run("gen", root / "x") == 1  # no seed anywhere
    with pytest.raises(SystemExit) as exc:
        run(*c, "frobnicate")
    assert exc.value.code == 1
    assert run(*c, "--set", "em.nope=1", "gen", root / "x") == 1
    assert run(*c, "predict", root / "em/model.ckpt", root / "corpus/manifest.json", "--out-dir", root / "x",
               "--decode", "histogram") == 1
    assert run(*c, "train-em", root / "corpus/manifest.json", "--init", root / "pre.ckpt",
               "--out-dir", root / "x") == 1
    err = capsys.readouterr().err
    assert "countem: error:" in err


def test_data_errors_exit_2(work, tmp_path, capsys):
    root, c = work
    m = root / "corpus/manifest.json"
    assert run(*c, "eval", m, "--pred-dir", tmp_path / "nothing", "--out", tmp_path / "r") == 2
    (tmp_path / "bad.ckpt").write_bytes(b"NOPE" + bytes(100))
    assert run(*c, "predict", tmp_path / "bad.ckpt", m, "--out-dir", tmp_path / "p") == 2
    # a model trained on 96 bands cannot read 64-band features
    assert run(*c, "--set", "features.n_bands=64", "predict", root / "em/model.ckpt", m,
               "--out-dir", tmp_path / "p") == 2
    (tmp_path / "manifest.json").write_text("[]")
    assert run(*c, "histify", tmp_path / "manifest.json", "--out-dir", tmp_path / "h") == 2
    assert run(*c, "train-em", m, "--init", root / "pre.ckpt", "--hists", tmp_path / "none",
               "--out-dir", tmp_path / "e") == 2
    lines = [line for line in capsys.readouterr().err.splitlines() if line]
    assert len(lines) == 5 and all(line.startswith("countem: error:") for line in lines)


def test_threads_flag(work, tmp_path):
    root, c = work
    assert run(*c, "--threads", 1, "eval", root / "corpus/manifest.json", "--pred-dir", root / "pred",
               "--out", tmp_path / "r") == 0
    assert (tmp_path / "r.json").read_bytes() == (root / "report.json").read_bytes()
