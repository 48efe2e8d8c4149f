import numpy as np
import pytest

from ddunet import cli
from ddunet import data as D
from ddunet.config import TrainConfig
from ddunet.topology import TopologySpec, count_parameters_spec


def run(capsys, *argv):
    code = cli.main(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


def test_gen_synth_and_count_params(tmp_path, capsys):
    code, out, _ = run(capsys, "gen-synth", "--n", "2", "--seed", "7", "--shape", "16x16x16", "--out", str(tmp_path / "d"))
    assert code == 0 and "wrote 2" in out
    cases = D.list_cases(tmp_path / "d")
    assert [p.name for p in cases] == ["synth_0007", "synth_0008"]
    assert D.read_case(cases[0]).shape == (16, 16, 16)

    cfg = TrainConfig(topology=TopologySpec("skip_2", stages=4, base_channels=32))
    cfg.save(tmp_path / "c.cfg")
    code, out, _ = run(capsys, "count-params", "--config", str(tmp_path / "c.cfg"))
    assert code == 0 and int(out.strip()) == count_parameters_spec(cfg.topology)


def test_error_line_and_exit_code(tmp_path, capsys):
    code, _, err = run(capsys, "count-params", "--config", str(tmp_path / "missing.cfg"))
    assert code == 1
    assert err.startswith("error: FileNotFoundError:") and err.count("\n") == 1
    bad = tmp_path / "case"
    bad.mkdir()
    (bad / "header.txt").write_text("magic: NOPE\n")
    code, _, err = run(capsys, "postprocess", "--in", str(bad), "--out", str(tmp_path / "o"))
    assert code == 1 and err.startswith("error: MagicMismatch:")


def test_bad_shape_is_usage_error(tmp_path, capsys):
    with pytest.raises(SystemExit) as e:
        cli.main(["gen-synth", "--n", "1", "--shape", "16x16", "--out", str(tmp_path)])
    assert e.value.code == 2


def test_postprocess_command(tmp_path, capsys):
    probs = np.zeros((3, 8, 8, 8), np.float32)
    probs[:, 2:5, 2:5, 2:5] = 0.9
    probs[2, 7, 7, 7] = 0.9
    D.write_labels(tmp_path / "in" / "a", np.zeros((8, 8, 8), np.uint8), "a", probs=probs)
    D.write_labels(tmp_path / "in" / "b", np.zeros((8, 8, 8), np.uint8), "b", probs=probs)
    code, _, _ = run(capsys, "postprocess", "--in", str(tmp_path / "in"), "--out", str(tmp_path / "out"))
    assert code == 0
    labels, _ = D.read_labels(tmp_path / "out" / "a")
    # 27-voxel ET is below 300 voxels: relabelled to 1; the stray WT voxel is filtered
    assert np.count_nonzero(labels == 1) == 27 and labels[7, 7, 7] == 0


def test_grad_check_command(capsys):
    code, out, _ = run(capsys, "grad-check")
    assert code == 0 and "conv3d/input" in out and "FAIL" not in out


def test_train_predict_evaluate(tmp_path, capsys):
    run(capsys, "gen-synth", "--n", "2", "--seed", "1", "--shape", "16x16x16", "--out", str(tmp_path / "d"))
    cfg = TrainConfig(
        topology=TopologySpec("none", stages=2, base_channels=2),
        batch_size=2,
        max_steps=3,
        crop_shape=(16, 16, 16),
        patch_depth=8,
        patch_stride=8,
        data_dir=str(tmp_path / "d"),
        checkpoint_dir=str(tmp_path / "ck"),
    )
    cfg.save(tmp_path / "t.cfg")
    code, out, _ = run(capsys, "train", "--config", str(tmp_path / "t.cfg"), "--set", "max_steps=2")
    assert code == 0 and out.strip().endswith("latest.npz")
    assert len((tmp_path / "ck" / "loss_log.tsv").read_text().splitlines()) == 3
    ck = str(tmp_path / "ck" / "latest.npz")
    code, _, _ = run(capsys, "predict", "--ckpt", ck, "--case", str(tmp_path / "d" / "synth_0001"), "--out", str(tmp_path / "one"))
    assert code == 0 and D.read_labels(tmp_path / "one")[0].shape == (16, 16, 16)
    code, _, _ = run(capsys, "predict", "--ckpt", ck, "--case", str(tmp_path / "d"), "--out", str(tmp_path / "p"))
    assert code == 0
    code, out, _ = run(capsys, "evaluate", "--pred", str(tmp_path / "p"), "--gt", str(tmp_path / "d"))
    assert code == 0 and out.startswith("case\tDice_ET") and "synth_0002" in out
