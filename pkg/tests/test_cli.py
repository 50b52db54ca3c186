"""Command-line behaviour: exit codes, manifests, reports and attention images."""
import csv
import io

import numpy as np
import pytest

from stt import cli
from stt import model as M
from stt import trainer as R

FAST = ["--set", "preset=tiny", "--set", "model.num_classes=2", "--set", "data.train_size=48",
        "--set", "data.eval_size=32", "--set", "train.epochs=2", "--set", "train.warmup_epochs=1",
        "--set", "train.batch_size=16"]


def run(argv, capsys):
    code = cli.main(argv)
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    assert cli.main(["train", "--config", "synth-stm", *FAST, "--out", str(out)]) == 0
    return out


def read_pgm(path):
    raw = path.read_bytes()
    header, rest = raw.split(b"\n", 3)[:3], raw.split(b"\n", 3)[3]
    assert header[0] == b"P5" and header[2] == b"255"
    w, h = map(int, header[1].split())
    return np.frombuffer(rest, dtype=np.uint8).reshape(h, w)


class TestConfig:
    def test_kv_parsing(self):
        text = "# comment\npreset = tiny\nmodel.heads = 4  # trailing\n\n"
        assert cli.parse_kv_text(text) == {"preset": "tiny", "model.heads": "4"}

    def test_kv_syntax_error(self):
        with pytest.raises(cli.UsageError):
            cli.parse_kv_text("just words")

    def test_preset_manifests_differ_only_in_mixer(self, tmp_path):
        a = cli.manifest_text(cli.resolve_config("synth-stm", []), "train", "x").splitlines()
        b = cli.manifest_text(cli.resolve_config("synth-none", []), "train", "x").splitlines()
        diff = [(x, y) for x, y in zip(a, b) if x != y]
        assert diff == [("model.mixer = STM", "model.mixer = NONE")]

    def test_overrides_and_seed(self):
        spec = cli.resolve_config("synth-stm", ["model.depth=4", "train.hflip=false"], seed=7)
        assert spec.model.depth == 4 and spec.train.hflip is False and spec.train.seed == 7

    def test_config_file(self, tmp_path):
        path = tmp_path / "c.txt"
        path.write_text("preset = tiny\nmodel.mixer = conv3\ntrain.betas = 0.8, 0.9\n")
        spec = cli.resolve_config(str(path), [])
        assert spec.model.mixer == "CONV3" and spec.train.betas == (0.8, 0.9)

    def test_invalid_field_exit_2(self, capsys):
        code, _, err = run(["params", "--config", "desk", "--set", "model.heads=5"], capsys)
        assert code == 2 and "model.heads" not in err and "heads" in err
        code, _, err = run(["params", "--set", "model.nonsense=1"], capsys)
        assert code == 2 and "model.nonsense" in err

    def test_unknown_config(self, capsys):
        assert run(["params", "--config", "no-such-thing"], capsys)[0] == 2


class TestTrainEval:
    def test_artifacts(self, trained):
        for name in ("manifest.txt", "metrics.csv", "steps.csv", "best.sttc", "final.sttc"):
            assert (trained / name).is_file(), name
        manifest = cli.parse_kv_text((trained / "manifest.txt").read_text())
        assert manifest["command"] == "train" and manifest["model.mixer"] == "STM"
        assert manifest["seed"] == "0" and manifest["data"] == "synth"

    def test_eval_reproduces_best(self, trained, capsys):
        rows = list(csv.DictReader(io.StringIO((trained / "metrics.csv").read_text())))
        best = max(float(r["eval_acc"]) for r in rows)
        code, out, _ = run(["eval", "--checkpoint", str(trained / "best.sttc")], capsys)
        assert code == 0
        assert float(out.split()[1]) == best

    def test_missing_dataset_dir(self, tmp_path, capsys):
        missing = tmp_path / "nowhere"
        code, _, err = run(["train", "--config", "cifar", "--set", f"data.dir={missing}",
                            "--out", str(tmp_path / "o")], capsys)
        assert code == 2 and str(missing) in err

    def test_missing_checkpoint(self, tmp_path, capsys):
        assert run(["eval", "--checkpoint", str(tmp_path / "x.sttc")], capsys)[0] == 2

    def test_corrupt_checkpoint(self, trained, tmp_path, capsys):
        bad = tmp_path / "bad.sttc"
        bad.write_bytes((trained / "final.sttc").read_bytes()[:100])
        code, _, err = run(["eval", "--checkpoint", str(bad), "--config", "synth-stm", *FAST], capsys)
        assert code == 2 and "offset" in err


class TestReports:
    def test_complexity_files(self, tmp_path, capsys):
        code, out, _ = run(["complexity", "--config", "stt-s25", "--out", str(tmp_path)], capsys)
        assert code == 0 and "0.065" in out
        assert (tmp_path / "complexity.csv").read_text().startswith("component,macs,score_entries,params\n")
        assert (tmp_path / "manifest.txt").is_file()

    def test_complexity_none_vs_stm(self, tmp_path, capsys):
        run(["complexity", "--config", "desk", "--out", str(tmp_path / "a")], capsys)
        run(["complexity", "--config", "desk", "--set", "model.mixer=NONE", "--out", str(tmp_path / "b")], capsys)
        a = (tmp_path / "a" / "complexity.csv").read_text().splitlines()
        b = (tmp_path / "b" / "complexity.csv").read_text().splitlines()
        only_a = [r for r in a if r not in b]
        assert {r.split(",")[0].split(".")[0] for r in only_a} <= {"mixer", "total"}
        assert all(r in a for r in b if not r.startswith("total"))

    def test_params(self, capsys):
        code, out, _ = run(["params", "--config", "stt-s25"], capsys)
        assert code == 0 and "total" in out
        assert int(out.splitlines()[-1].split()[1].replace(",", "")) == 51_757_736

    def test_bench_single_repeat(self, tmp_path, capsys):
        code, out, _ = run(["bench", "--config", "tiny", "--repeats", "1", "--out", str(tmp_path)], capsys)
        assert code == 0 and "ratio" in out
        rows = list(csv.DictReader(io.StringIO((tmp_path / "bench.csv").read_text())))
        assert [r["model"] for r in rows] == ["stt", "baseline"]
        assert all(float(r["iqr_s"]) == 0.0 for r in rows)

    def test_bench_batch_monotone(self, tmp_path, capsys):
        medians = []
        for batch in (1, 8):
            out = tmp_path / str(batch)
            assert run(["bench", "--config", "desk", "--repeats", "5", "--batch", str(batch),
                        "--out", str(out)], capsys)[0] == 0
            rows = list(csv.DictReader(io.StringIO((out / "bench.csv").read_text())))
            medians.append(float(rows[0]["median_s"]))
        assert medians[1] > medians[0]

    def test_median_iqr(self):
        assert cli.median_iqr([3.0]) == (3.0, 0.0)
        assert cli.median_iqr([1.0, 2.0, 3.0, 4.0, 5.0]) == (3.0, 2.0)


class TestGradcheckCommand:
    def test_clean_ops(self, capsys):
        code, out, _ = run(["gradcheck", "--scope", "op"], capsys)
        assert code == 0
        for op in ("matmul", "softmax_lastdim", "layer_norm", "gelu", "conv2d"):
            assert op in out

    def test_fault_exit_1(self, capsys):
        code, out, _ = run(["gradcheck", "--scope", "op", "--fault", "gelu"], capsys)
        assert code == 1
        line = next(x for x in out.splitlines() if "gelu" in x)
        assert "FAIL" in line


class TestAttention:
    def test_files(self, trained, tmp_path, capsys):
        record = tmp_path / "img.bin"
        cli.D.save_records(cli.D.synth_crosswindow(3, 4, 2, seed=5), record)
        code, out, _ = run(["attn", "--checkpoint", str(trained / "final.sttc"), "--image", str(record),
                            "--index", "1", "--layer", "2", "--composite", "--out", str(tmp_path)], capsys)
        assert code == 0
        window = read_pgm(tmp_path / "img_1_L2_window.pgm")
        cls = read_pgm(tmp_path / "img_1_class.pgm")
        assert window.shape == cls.shape == (32, 32)
        assert (tmp_path / "img_1_L2_composite.pgm").is_file()
        # one value per window before upsampling
        assert len(np.unique(cls[::16, ::16])) <= 4
        blocks = cls.reshape(2, 16, 2, 16)
        assert (blocks == blocks[:, :1, :, :1]).all()
        assert window.min() == 0 and window.max() == 255

    def test_class_row_sums_to_one(self, trained):
        store, _ = R.load_checkpoint(trained / "final.sttc")
        spec = cli.resolve_config("synth-stm", FAST[1::2])
        img = cli.D.synth_crosswindow(1, 4, 2, seed=2).images
        _, trace = M.forward(img, store.astype(np.float64), spec.model, trace=True)
        wmap, cmap = cli.attention_maps(trace, spec.model, 1)
        row = trace["class.2"][0].mean(axis=0)[0]
        assert abs(row.sum() - 1) <= 1e-5
        np.testing.assert_array_equal(cmap.ravel(), row[1:])
        assert wmap.shape == (4, 4)

    def test_uniform_attention_gives_constant_images(self, trained, tmp_path, capsys):
        store, _ = R.load_checkpoint(trained / "final.sttc")
        for name, v in store.items():
            if name.endswith("attn.qkv.weight"):
                store[name] = np.zeros_like(v)
        ckpt_dir = tmp_path / "uniform"
        ckpt_dir.mkdir()
        R.save_checkpoint(ckpt_dir / "u.sttc", store)
        (ckpt_dir / "manifest.txt").write_text((trained / "manifest.txt").read_text())
        record = tmp_path / "one.bin"
        cli.D.save_records(cli.D.synth_crosswindow(1, 4, 2, seed=5), record)
        code, _, _ = run(["attn", "--checkpoint", str(ckpt_dir / "u.sttc"), "--image", str(record),
                          "--layer", "1", "--out", str(tmp_path)], capsys)
        assert code == 0
        for name in ("one_L1_window.pgm", "one_class.pgm"):
            img = read_pgm(tmp_path / name)
            assert len(np.unique(img)) == 1

    def test_ppm_input(self, trained, tmp_path, capsys):
        pix = cli.D.synth_crosswindow(1, 4, 2, seed=6).pixels[0]
        ppm = tmp_path / "pic.ppm"
        ppm.write_bytes(b"P6\n# made in a test\n32 32\n255\n" + pix.transpose(1, 2, 0).tobytes())
        back, stem = cli.read_image(ppm)
        np.testing.assert_array_equal(back, pix)
        assert stem == "pic"

    @pytest.mark.parametrize("layer", ["0", "4"])
    def test_layer_out_of_range(self, trained, tmp_path, capsys, layer):
        record = tmp_path / "img.bin"
        cli.D.save_records(cli.D.synth_crosswindow(1, 4, 2, seed=5), record)
        code, _, err = run(["attn", "--checkpoint", str(trained / "final.sttc"), "--image", str(record),
                            "--layer", layer, "--out", str(tmp_path)], capsys)
        assert code == 2 and "--layer" in err

    def test_to_gray(self):
        np.testing.assert_array_equal(cli.to_gray(np.full((2, 2), 0.3)), 0)
        np.testing.assert_array_equal(cli.to_gray(np.array([0.0, 0.5, 1.0])), [0, 128, 255])
