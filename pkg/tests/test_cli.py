import csv

import numpy as np
import pytest

from audiokd import complexity as cx
from audiokd.cli import main, parse_spec
from audiokd.distillation import TeacherLogitsStore, read_store, store_to_csv, write_store


@pytest.fixture(scope="module")
def toy(tmp_path_factory):
    root = tmp_path_factory.mktemp("toy")
    assert main(["make-toy", str(root), "--n-train", "24", "--n-eval", "12", "--seed", "1"]) == 0
    return root


def _rows(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


def _train(toy, out, *extra):
    return main(["train", "--config", str(toy / "toy.cfg"), "--set", f"paths.output_dir={out}",
                 "--set", "schedule.batch_size=8", *extra])


def test_train_two_epochs(toy, tmp_path):
    out = tmp_path / "run"
    assert _train(toy, out, "--epochs", "2") == 0
    rows = _rows(out / "metrics.csv")
    assert rows[0] == ["epoch", "lr", "train_loss", "eval_map"] and len(rows) == 3
    assert 0 <= float(rows[-1][3]) <= 1
    assert (out / "config.cfg").exists() and (out / "last.npz").exists() and (out / "best.npz").exists()


def test_snapshot_replays_run(toy, tmp_path):
    assert _train(toy, tmp_path / "a", "--epochs", "2") == 0
    snapshot = tmp_path / "a" / "config.cfg"
    assert main(["train", "--config", str(snapshot), "--set", f"paths.output_dir={tmp_path / 'b'}",
                 "--epochs", "2"]) == 0
    assert _rows(tmp_path / "a" / "metrics.csv") == _rows(tmp_path / "b" / "metrics.csv")


def test_invalid_config_exits_2_without_side_effects(toy, tmp_path, capsys):
    out = tmp_path / "never"
    assert _train(toy, out, "--set", "kd.lam=1.5") == 2
    assert "lambda" in capsys.readouterr().err
    assert _train(toy, out, "--set", "schedule.nonsense=1") == 2
    assert _train(toy, out, "--set", "network.alpha=abc") == 2
    assert main(["train", "--config", str(tmp_path / "missing.cfg")]) == 2
    assert not out.exists()


def test_missing_teacher_store_exits_3(toy, tmp_path, capsys):
    out = tmp_path / "run"
    missing = tmp_path / "nowhere.kdl"
    code = _train(toy, out, "--set", "kd.lam=0.1", "--set", f"paths.teacher_store={missing}")
    assert code == 3
    assert str(missing) in capsys.readouterr().err
    assert not out.exists()


def test_missing_manifest_exits_3(toy, tmp_path):
    assert _train(toy, tmp_path / "r", "--set", f"paths.train_manifest={tmp_path / 'x.csv'}") == 3


def test_train_with_teacher_store(toy, tmp_path):
    ids = [r[0] for r in _rows(toy / "train.csv")[1:]]
    rng = np.random.default_rng(0)
    store = tmp_path / "t.kdl"
    write_store(TeacherLogitsStore({c: rng.normal(size=10).astype(np.float32) for c in ids}, 10), store)
    assert _train(toy, tmp_path / "r", "--epochs", "1", "--set", "kd.lam=0.1",
                  "--set", f"paths.teacher_store={store}") == 0


def test_evaluate(toy, tmp_path, capsys):
    assert _train(toy, tmp_path / "r", "--epochs", "1") == 0
    capsys.readouterr()
    ck = str(tmp_path / "r" / "last.npz")
    args = ["evaluate", ck, str(toy / "eval.csv"), "--out", str(tmp_path / "ap.csv")]
    assert main(args) == 0
    first = capsys.readouterr().out
    assert 0 <= float(first.split()[1]) <= 1
    assert main(args) == 0
    assert capsys.readouterr().out == first
    assert len(_rows(tmp_path / "ap.csv")) == 11
    assert main(["evaluate", ck, str(toy / "eval.csv"), "--classes", "527"]) == 2
    assert main(["evaluate", str(tmp_path / "none.npz"), str(toy / "eval.csv")]) == 3


def test_evaluate_rejects_manifest_with_more_classes(toy, tmp_path):
    assert _train(toy, tmp_path / "r", "--epochs", "1", "--set", "network.n_classes=10") == 0
    wide = tmp_path / "wide.csv"
    rows = _rows(toy / "eval.csv")
    rows[1][2] = "12"
    with open(wide, "w", newline="") as fh:
        csv.writer(fh).writerows(rows)
    assert main(["evaluate", str(tmp_path / "r" / "last.npz"), str(wide)]) == 2


def test_memorized_checkpoint_scores_one(toy, tmp_path, capsys):
    out = tmp_path / "mem"
    assert main(["train", "--config", str(toy / "toy.cfg"), "--set", f"paths.output_dir={out}",
                 "--set", "augment.mixup=false", "--set", "schedule.batch_size=8",
                 "--set", "network.bn_momentum=0.3",
                 "--set", "schedule.max_lr=5e-3", "--set", "network.dropout=0",
                 "--set", "schedule.decay_start=66", "--set", "schedule.decay_end=100",
                 "--set", "schedule.total_epochs=100", "--set", "paths.eval_manifest=none"]) == 0
    capsys.readouterr()
    assert main(["evaluate", str(out / "last.npz"), str(toy / "train.csv")]) == 0
    assert float(capsys.readouterr().out.split()[1]) == 1.0


def _analyze_row(capsys, *flags):
    assert main(["analyze", "--csv", *flags]) == 0
    return cx.read_frontier_csv(capsys.readouterr().out)[0]


def test_analyze(capsys):
    base = _analyze_row(capsys, "--alpha", "1.0", "--se", "channel", "--head", "mlp")
    assert base.params == pytest.approx(4.88e6, rel=0.02)
    hop20 = _analyze_row(capsys, "--alpha", "1.0", "--hop", "20")
    assert hop20.macs / base.macs == pytest.approx(0.5, abs=0.02)
    assert _analyze_row(capsys, "--alpha", "0.5").params < base.params
    assert main(["analyze"]) == 0
    assert "total" in capsys.readouterr().out


@pytest.mark.parametrize("flags", [["--alpha", "0"], ["--head", "attn_3"], ["--mels", "16"],
                                   ["--duration", "0.001"], ["--se", "spatial"]])
def test_analyze_invalid(flags):
    assert main(["analyze", *flags]) == 2


def test_frontier(tmp_path, capsys):
    scores = tmp_path / "scores.csv"
    scores.write_text("label,score\nbig,0.45\nsmall,0.38\nmid,0.42\n")
    args = ["frontier", "mid:alpha=1.0", "big:alpha=2.0", "small:alpha=0.5", "--scores", str(scores)]
    assert main(args) == 0
    text = capsys.readouterr().out
    rows = cx.read_frontier_csv(text)
    assert [r.label for r in rows] == ["small", "mid", "big"]
    assert [r.score for r in rows] == [0.38, 0.42, 0.45]
    assert rows[0].params < rows[1].params < rows[2].params
    assert cx.write_frontier_csv(rows) == text
    assert main(["frontier", "a:alpha=1", "--scores", str(tmp_path / "missing.csv")]) == 3
    assert main(["frontier", "a:beta=1"]) == 2


def test_parse_spec():
    assert parse_spec("x:alpha=0.5,hop=20")[1]["hop"] == 20.0
    assert parse_spec("alpha=2")[0] == "mn2"


def _store(tmp_path, name, values):
    path = tmp_path / name
    write_store(TeacherLogitsStore(values, 3), path)
    return path


def test_teacher_average_single_is_identity(tmp_path):
    a = _store(tmp_path, "a.kdl", {"x": np.array([1.5, -2, 0.25], np.float32)})
    assert main(["teacher", "average", str(tmp_path / "avg.kdl"), str(a)]) == 0
    assert (tmp_path / "avg.kdl").read_bytes() == a.read_bytes()


def test_teacher_import_then_inspect(tmp_path, capsys):
    src = TeacherLogitsStore({f"c{i}": np.arange(3, dtype=np.float32) * i for i in range(7)}, 3)
    store_to_csv(src, tmp_path / "z.csv")
    assert main(["teacher", "import-csv", str(tmp_path / "z.csv"), str(tmp_path / "z.kdl")]) == 0
    assert read_store(tmp_path / "z.kdl") == src
    capsys.readouterr()
    assert main(["teacher", "inspect", str(tmp_path / "z.kdl")]) == 0
    assert "records 7" in capsys.readouterr().out


def test_teacher_average_of_negation_is_zero(tmp_path, capsys):
    rng = np.random.default_rng(0)
    z = {f"c{i}": rng.normal(size=3).astype(np.float32) for i in range(5)}
    a = _store(tmp_path, "a.kdl", z)
    b = _store(tmp_path, "b.kdl", {k: -v for k, v in z.items()})
    assert main(["teacher", "average", str(tmp_path / "m.kdl"), str(a), str(b)]) == 0
    capsys.readouterr()
    assert main(["teacher", "inspect", str(tmp_path / "m.kdl")]) == 0
    lines = capsys.readouterr().out.splitlines()
    stats = lines[lines.index("class,mean,std,min,max") + 1:]
    assert len(stats) == 3 and all(float(line.split(",")[1]) == 0 for line in stats)


def test_teacher_average_mismatch_lists_ids(tmp_path, capsys):
    a = _store(tmp_path, "a.kdl", {"x": np.zeros(3, np.float32), "y": np.zeros(3, np.float32)})
    b = _store(tmp_path, "b.kdl", {"x": np.zeros(3, np.float32)})
    assert main(["teacher", "average", str(tmp_path / "m.kdl"), str(a), str(b)]) == 3
    assert "y" in capsys.readouterr().err
    assert not (tmp_path / "m.kdl").exists()


def test_teacher_export_round_trip(toy, tmp_path):
    assert _train(toy, tmp_path / "r", "--epochs", "1") == 0
    csv_path = tmp_path / "logits.csv"
    assert main(["teacher", "export", str(tmp_path / "r" / "last.npz"), str(toy / "train.csv"),
                 str(csv_path)]) == 0
    assert main(["teacher", "import-csv", str(csv_path), str(tmp_path / "t.kdl")]) == 0
    store = read_store(tmp_path / "t.kdl")
    assert len(store) == 24 and store.class_count == 10


def test_usage_errors():
    assert main([]) == 2
    assert main(["teacher"]) == 2
    assert main(["train", "--epochs", "x"]) == 2
