import subprocess
import sys

import numpy as np
import pytest

from sgfnet.cli import main, rescale_filtered
from sgfnet.data import dilate, generate_edge_image, read_pgm, read_ppm, write_pgm
from sgfnet.spectral import high_pass

SMALL = ["stage_channels=8,16,16,32", "input_size=32,32", "batch_size=2"]


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    d = tmp_path_factory.mktemp("data") / "ds"
    assert main(["gen", "--out", str(d), "--n", "4", "--h", "32", "--w", "32", "--k", "4", "--seed", "5"]) == 0
    return d


@pytest.fixture(scope="module")
def trained(tmp_path_factory, dataset):
    out = tmp_path_factory.mktemp("run")
    assert main(["train", f"data={dataset}", "epochs=2", "--out", str(out), *SMALL]) == 0
    return out


def test_gen_layout(dataset):
    assert len(list(dataset.iterdir())) == 3 * 4 + 1
    assert (dataset / "meta.txt").read_text() == "n=4\nh=32\nw=32\nk=4\nseed=5\n"


def test_gen_is_deterministic(tmp_path, dataset):
    main(["gen", "--out", str(tmp_path), "--n", "4", "--h", "32", "--w", "32", "--k", "4", "--seed", "5"])
    for f in dataset.iterdir():
        assert (tmp_path / f.name).read_bytes() == f.read_bytes()


def test_gen_bad_size_is_usage_error(tmp_path):
    assert main(["gen", "--out", str(tmp_path), "--h", "30"]) == 1


def test_train_outputs(trained):
    assert (trained / "checkpoint" / "manifest.txt").is_file()
    config = (trained / "config.txt").read_text()
    assert "epochs = 2" in config and "stage_channels = 8,16,16,32" in config
    lines = (trained / "metrics.log").read_text().splitlines()
    assert len(lines) == 2
    for i, line in enumerate(lines, 1):
        keys = [part.split("=")[0] for part in line.split()]
        assert keys == ["epoch", "loss", "miou", "macc"] and line.startswith(f"epoch={i} ")
    assert len((trained / "losses.txt").read_text().split()) == 4


def test_train_from_config_file_and_resume(tmp_path, dataset, trained):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("# resumed run\n" + "\n".join(s.replace("=", " = ") for s in SMALL) + f"\ndata = {dataset}\n")
    out = tmp_path / "resumed"
    assert main(["train", "--config", str(cfg), "epochs=3", "--out", str(out),
                 "--resume", str(trained / "checkpoint")]) == 0
    assert (out / "metrics.log").read_text().startswith("epoch=3 ")
    full = tmp_path / "full"
    assert main(["train", "--config", str(cfg), "epochs=3", "--out", str(full)]) == 0
    tail = [float(v) for v in (full / "losses.txt").read_text().split()][4:]
    resumed = [float(v) for v in (out / "losses.txt").read_text().split()]
    np.testing.assert_allclose(resumed, tail, atol=1e-6)


def test_ablation_manifests_differ(tmp_path, dataset):
    manifests = []
    for flag in ("enable_sfe=false", "enable_gsa=false"):
        out = tmp_path / flag
        assert main(["train", f"data={dataset}", "epochs=1", flag, "--out", str(out), *SMALL]) == 0
        manifests.append({line for line in (out / "checkpoint" / "manifest.txt").read_text().splitlines()
                          if line.startswith("tensor")})
    assert manifests[0] != manifests[1]


@pytest.mark.parametrize("argv,code", [
    (["train", "bogus=1"], 1),
    (["train", "epochs=1"], 1),
    (["train", "data=/nonexistent/dir", "epochs=1"], 2),
    (["train", "--config", "/nonexistent.cfg"], 1),
    (["train", "notapair"], 1),
    (["eval", "--ckpt", "/nonexistent", "--data", "/nonexistent"], 2),
    (["hpf", "--in", "x.pgm", "--cutoff", "2", "--out", "y.pgm"], 1),
    (["frobnicate"], 1),
    (["gen"], 1),
])
def test_exit_codes(argv, code, capsys):
    if code == 1 and argv[0] in ("frobnicate", "gen"):
        with pytest.raises(SystemExit) as exc:
            main(argv)
        assert exc.value.code == 1
    else:
        assert main(argv) == code


def test_non_finite_training_exits_3(tmp_path, dataset):
    with np.errstate(all="ignore"):
        code = main(["train", f"data={dataset}", "epochs=2", "learning_rate=1e12", "momentum=0",
                     "--out", str(tmp_path), *SMALL])
    assert code == 3


def test_eval_table_is_stable(trained, dataset, capsys):
    assert main(["eval", "--ckpt", str(trained / "checkpoint"), "--data", str(dataset)]) == 0
    first = capsys.readouterr().out
    main(["eval", "--ckpt", str(trained / "checkpoint"), "--data", str(dataset)])
    assert capsys.readouterr().out == first
    lines = first.splitlines()
    assert lines[0].split() == ["class", "Acc", "IoU"]
    assert len(lines) == 1 + 4 + 1 and lines[-1].startswith("mAcc ")


def test_eval_rejects_dataset_with_more_classes(tmp_path, trained):
    main(["gen", "--out", str(tmp_path), "--n", "1", "--h", "32", "--w", "32", "--k", "6"])
    assert main(["eval", "--ckpt", str(trained / "checkpoint"), "--data", str(tmp_path)]) == 2


def test_infer_outputs(tmp_path, trained, dataset):
    out = tmp_path / "pred.pgm"
    argv = ["infer", "--ckpt", str(trained / "checkpoint"), "--rgb", str(dataset / "0001_rgb.ppm"),
            "--th", str(dataset / "0001_th.pgm"), "--out", str(out)]
    assert main(argv) == 0
    pred = read_pgm(out)
    assert pred.shape == (32, 32) and pred.max() < 4
    assert read_ppm(tmp_path / "pred_color.ppm").shape == (32, 32, 3)
    first = out.read_bytes()
    main(argv)
    assert out.read_bytes() == first


def test_infer_size_mismatch(tmp_path, trained, dataset):
    write_pgm(tmp_path / "th.pgm", np.zeros((16, 32), dtype=np.uint8))
    assert main(["infer", "--ckpt", str(trained / "checkpoint"), "--rgb", str(dataset / "0001_rgb.ppm"),
                 "--th", str(tmp_path / "th.pgm"), "--out", str(tmp_path / "o.pgm")]) == 2


def test_hpf_cutoff_zero_reproduces_input(tmp_path):
    img = np.random.default_rng(0).integers(0, 256, (24, 40)).astype(np.uint8)
    write_pgm(tmp_path / "in.pgm", img)
    assert main(["hpf", "--in", str(tmp_path / "in.pgm"), "--cutoff", "0", "--out", str(tmp_path / "o.pgm")]) == 0
    assert np.abs(read_pgm(tmp_path / "o.pgm").astype(int) - img).max() <= 1


def test_hpf_constant_image_is_mid_gray(tmp_path):
    write_pgm(tmp_path / "in.pgm", np.full((16, 16), 200, dtype=np.uint8))
    main(["hpf", "--in", str(tmp_path / "in.pgm"), "--cutoff", "0.2", "--out", str(tmp_path / "o.pgm")])
    assert np.all(read_pgm(tmp_path / "o.pgm") == 128)


def test_hpf_keeps_edge_energy():
    img, edges = generate_edge_image(np.random.default_rng(0))
    filtered = high_pass(np.round(img * 255), 0.1)
    near = dilate(edges, 2)
    assert (filtered[near] ** 2).sum() / (filtered ** 2).sum() > 0.5


def test_rescale_maps_zero_to_mid_gray():
    out = rescale_filtered(np.array([[-2.0, 0.0, 2.0]]), 0.1)
    assert out.tolist() == [[1, 128, 255]]


def test_gradcheck_command(capsys):
    assert main(["gradcheck", "--size", "4"]) == 0
    out = capsys.readouterr().out
    for name in ("add", "matmul", "conv2d_depthwise", "softmax", "cross_attention", "sgf_block"):
        assert f"{name} " in out


def test_gradcheck_detects_injected_fault(capsys):
    assert main(["gradcheck", "--size", "4", "--inject-fault", "conv2d_pointwise"]) == 3
    assert "FAIL" in capsys.readouterr().out


def test_console_entry_point_help():
    res = subprocess.run([sys.executable, "-m", "sgfnet.cli", "--help"], capture_output=True, text=True)
    assert res.returncode == 0
    for cmd in ("gen", "train", "eval", "infer", "hpf", "gradcheck"):
        assert cmd in res.stdout
    assert "inject" not in subprocess.run([sys.executable, "-m", "sgfnet.cli", "gradcheck", "--help"],
                                          capture_output=True, text=True).stdout
