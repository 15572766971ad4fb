import csv
import io
import json
import subprocess
import sys
from pathlib import Path

import jsonschema
import numpy as np
import pytest

from invcodec import imageio, schemas
from invcodec.cli import main
from invcodec.codec import Bitstream
from invcodec.model import InvCompressModel, ModelConfig
from invcodec.weights import save_weights

FIXTURES = Path(__file__).parent / "fixtures"


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out = capsys.readouterr()
    return code, out.out, out.err


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    img = np.random.default_rng(0).uniform(0, 1, (3, 40, 24))
    imageio.write_image(d / "a.png", img)
    imageio.write_image(d / "a.ppm", img)
    save_weights(InvCompressModel(ModelConfig.toy(seed=0)), d / "w.wts")
    return d


class TestGolden:
    def test_encode_matches_committed(self, tmp_path, capsys):
        out = tmp_path / "g.bin"
        code, _, _ = run(capsys, "encode", FIXTURES / "golden.png", FIXTURES / "golden.wts", out)
        assert code == 0
        assert out.read_bytes() == (FIXTURES / "golden.bin").read_bytes()

    @pytest.mark.parametrize("flags", [[], ["-O"]])
    def test_fresh_interpreter(self, tmp_path, flags):
        out = tmp_path / "g.bin"
        cmd = [sys.executable, *flags, "-m", "invcodec", "encode", str(FIXTURES / "golden.png"),
               str(FIXTURES / "golden.wts"), str(out)]
        subprocess.run(cmd, check=True, capture_output=True)
        assert out.read_bytes() == (FIXTURES / "golden.bin").read_bytes()

    def test_committed_weights_are_seed_zero_toy(self):
        from invcodec.weights import load_weights, model_hash
        fresh = InvCompressModel(ModelConfig.toy(seed=0))
        assert model_hash(load_weights(FIXTURES / "golden.wts")) == model_hash(fresh)


class TestEncodeDecode:
    def test_roundtrip_dimensions(self, workdir, capsys):
        code, out, _ = run(capsys, "encode", workdir / "a.png", workdir / "w.wts",
                           workdir / "a.bin", "--format", "json")
        assert code == 0
        report = json.loads(out)
        jsonschema.validate(report, schemas.ENCODE)
        bs = Bitstream.from_bytes((workdir / "a.bin").read_bytes())
        assert report["bpp"] == 8 * bs.payload_bytes / (40 * 24)
        assert report["bytes"] == len(bs.to_bytes())
        code, _, _ = run(capsys, "decode", workdir / "a.bin", workdir / "w.wts", workdir / "b.png")
        assert code == 0
        assert imageio.read_image(workdir / "b.png").shape == (3, 40, 24)

    def test_ppm_io(self, workdir, capsys):
        assert run(capsys, "encode", workdir / "a.ppm", workdir / "w.wts", workdir / "p.bin")[0] == 0
        assert run(capsys, "decode", workdir / "p.bin", workdir / "w.wts", workdir / "p.ppm")[0] == 0
        assert imageio.read_image(workdir / "p.ppm").shape == (3, 40, 24)
        np.testing.assert_array_equal(imageio.read_image(workdir / "a.ppm"),
                                      imageio.read_image(workdir / "a.png"))

    def test_reproducible(self, workdir, capsys):
        run(capsys, "encode", workdir / "a.png", workdir / "w.wts", workdir / "r1.bin")
        run(capsys, "encode", workdir / "a.png", workdir / "w.wts", workdir / "r2.bin")
        assert (workdir / "r1.bin").read_bytes() == (workdir / "r2.bin").read_bytes()


class TestExitCodes:
    def test_missing_file_is_parse_error(self, workdir, capsys):
        with pytest.raises(SystemExit) as exc:
            main(["encode", str(workdir / "nope.png"), str(workdir / "w.wts"), "x.bin"])
        assert exc.value.code == 1
        assert "file not found" in capsys.readouterr().err

    def test_no_subcommand(self, capsys):
        with pytest.raises(SystemExit) as exc:
            main([])
        assert exc.value.code == 1

    def test_model_mismatch(self, workdir, capsys, tmp_path):
        run(capsys, "encode", workdir / "a.png", workdir / "w.wts", tmp_path / "a.bin")
        save_weights(InvCompressModel(ModelConfig.toy(seed=5)), tmp_path / "other.wts")
        code, _, err = run(capsys, "decode", tmp_path / "a.bin", tmp_path / "other.wts",
                           tmp_path / "o.png")
        assert code == 2 and "hash" in err

    def test_corrupt_weights(self, workdir, capsys, tmp_path):
        data = bytearray((workdir / "w.wts").read_bytes())
        data[100] ^= 1
        (tmp_path / "bad.wts").write_bytes(bytes(data))
        code, _, _ = run(capsys, "encode", workdir / "a.png", tmp_path / "bad.wts", tmp_path / "x.bin")
        assert code == 2

    @pytest.mark.parametrize("where", ["header", "payload", "truncate"])
    def test_corrupt_stream(self, workdir, capsys, tmp_path, where):
        run(capsys, "encode", workdir / "a.png", workdir / "w.wts", tmp_path / "a.bin")
        data = bytearray((tmp_path / "a.bin").read_bytes())
        if where == "header":
            data[14] ^= 0x40
        elif where == "payload":
            data = data[:-6]
        else:
            data = data[:20]
        (tmp_path / "c.bin").write_bytes(bytes(data))
        code, _, err = run(capsys, "decode", tmp_path / "c.bin", workdir / "w.wts", tmp_path / "c.png")
        assert code == 3 and "corrupt" in err


class TestReports:
    def test_inspect(self, capsys):
        code, out, _ = run(capsys, "inspect", FIXTURES / "golden.bin", "--format", "json")
        report = json.loads(out)
        jsonschema.validate(report, schemas.INSPECT)
        assert (report["height"], report["width"], report["alpha"]) == (64, 64, 6)

    def test_metrics_identical(self, workdir, capsys):
        code, out, _ = run(capsys, "metrics", workdir / "a.png", workdir / "a.png", "--format", "json")
        report = json.loads(out)
        jsonschema.validate(report, schemas.METRICS)
        assert report["psnr_db"] == "inf" and report["msssim"] == 1.0

    def test_metrics_text_and_csv(self, workdir, capsys):
        code, out, _ = run(capsys, "metrics", workdir / "a.png", workdir / "b.png", "--format", "csv")
        row = next(csv.DictReader(io.StringIO(out)))
        assert float(row["psnr_db"]) > 0
        code, out, _ = run(capsys, "metrics", workdir / "a.png", workdir / "b.png")
        assert out.startswith("psnr_db")

    def test_metrics_size_mismatch(self, workdir, capsys, tmp_path):
        imageio.write_image(tmp_path / "s.png", np.zeros((3, 8, 8)))
        code, _, _ = run(capsys, "metrics", workdir / "a.png", tmp_path / "s.png")
        assert code == 1

    def test_deviation_alpha_one(self, workdir, capsys, tmp_path):
        save_weights(InvCompressModel(ModelConfig(kernels=(3, 3), alpha=1)), tmp_path / "a1.wts")
        code, out, _ = run(capsys, "deviation", workdir / "a.png", tmp_path / "a1.wts",
                           "--map", tmp_path / "m.pgm", "--format", "json")
        report = json.loads(out)
        jsonschema.validate(report, schemas.DEVIATION)
        assert report["epsilon"] == 0.0
        pgm = (tmp_path / "m.pgm").read_bytes()
        header = b"P5\n6 10\n255\n"
        assert pgm.startswith(header) and not any(pgm[len(header):])

    def test_deviation_positive(self, workdir, capsys):
        code, out, _ = run(capsys, "deviation", workdir / "a.png", workdir / "w.wts", "--format", "json")
        report = json.loads(out)
        assert report["alpha"] == 6 and report["scaled_epsilon"] > 0

    def test_rd_three_points(self, workdir, capsys, tmp_path):
        imgs = tmp_path / "imgs"
        imgs.mkdir()
        for i in range(2):
            imageio.write_image(imgs / f"{i}.png", np.random.default_rng(i).uniform(0, 1, (3, 16, 16)))
        paths = []
        for n in (4, 8, 16):
            p = tmp_path / f"n{n}.wts"
            save_weights(InvCompressModel(ModelConfig.toy(latent_channels=n, seed=1)), p)
            paths.append(p)
        code, out, _ = run(capsys, "rd", imgs, *paths, "--csv", tmp_path / "rd.csv",
                           "--format", "json")
        assert code == 0
        report = json.loads(out)
        jsonschema.validate(report, schemas.RD)
        bpps = [p["bpp"] for p in report["points"]]
        assert len(bpps) == 3 and bpps == sorted(bpps)
        assert isinstance(report["auc"], float)
        rows = list(csv.DictReader(io.StringIO((tmp_path / "rd.csv").read_text())))
        assert len(rows) == 3

    def test_estimate(self, workdir, capsys):
        code, out, _ = run(capsys, "estimate", workdir / "a.png", workdir / "w.wts", "--format", "json")
        jsonschema.validate(json.loads(out), schemas.ESTIMATE)

    def test_init_and_train_toy(self, capsys, tmp_path):
        code, out, _ = run(capsys, "init-weights", tmp_path / "i.wts", "--seed", "3", "-N", "16",
                           "--format", "json")
        assert code == 0 and json.loads(out)["alpha"] == 3
        code, out, _ = run(capsys, "train-toy", tmp_path / "t.wts", "--quality", "q3", "--steps", "2",
                           "--num-images", "2", "--crop", "16", "--batch-size", "1",
                           "--history", tmp_path / "h.csv", "--format", "json")
        assert code == 0
        assert len((tmp_path / "h.csv").read_text().splitlines()) == 3
        code2, out2, _ = run(capsys, "train-toy", tmp_path / "t2.wts", "--quality", "q3", "--steps", "2",
                             "--num-images", "2", "--crop", "16", "--batch-size", "1",
                             "--format", "json")
        assert out2 == out
        assert (tmp_path / "t.wts").read_bytes() == (tmp_path / "t2.wts").read_bytes()

    def test_bad_latent_count(self, capsys, tmp_path):
        code, _, err = run(capsys, "init-weights", tmp_path / "i.wts", "-N", "7")
        assert code == 1 and "must divide" in err
