import csv

import numpy as np
import pytest

from srqh import cli, synthetic
from srqh.ply import read_ply, write_ply


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    (d / "run.cfg").write_text("corpus = synthetic:1\nval_corpus = synthetic:1\ngrid = 32\nepochs_first = 1\n"
                               "epochs_next = 1\nmax_epochs = 1\n")
    write_ply(synthetic.make_shape("sphere", 32, np.random.default_rng(9)), d / "in.ply")
    return d


@pytest.fixture(scope="module")
def trained(workdir):
    cfg = str(workdir / "run.cfg")
    base = str(workdir / "base.tnps")
    rq = str(workdir / "rq.tnps")
    assert cli.main(["train", "--config", cfg, "--output", base, "--log", str(workdir / "base.csv")]) == 0
    assert cli.main(["train-rqulpe", "--config", cfg, "--models", base, "--output", rq,
                     "--log", str(workdir / "rq.csv")]) == 0
    return base, rq


class TestCli:
    def test_help_mentions_sr(self, capsys):
        with pytest.raises(SystemExit):
            cli.main(["encode", "--help"])
        out = capsys.readouterr().out
        assert "NOT implemented" in out

    def test_training_logs(self, workdir, trained):
        rows = list(csv.DictReader(open(workdir / "base.csv")))
        assert [int(r["qp"]) for r in rows] == [5, 4, 3, 2, 1]
        assert len(list(csv.DictReader(open(workdir / "rq.csv")))) == 1

    def test_encode_decode_metrics(self, workdir, trained, capsys):
        base, rq = trained
        common = ["--models", base, "--rqulpe", rq]
        stream = str(workdir / "out.spcc")
        assert cli.main(["encode", str(workdir / "in.ply"), stream, "--chain", "4,2,F;3,1,T"] + common) == 0
        out = capsys.readouterr().out
        assert "layer 0 [4,2,F]" in out and "layer 1 [3,1,T]" in out
        read = []
        for t in (0, 1):
            dec = str(workdir / f"dec{t}.ply")
            assert cli.main(["decode", stream, dec, "--layer", str(t)] + common) == 0
            line = capsys.readouterr().out
            read.append(int(line.split("points, ")[1].split(" of")[0]))
            assert len(read_ply(dec)) > 0
        assert read[0] < read[1]
        assert cli.main(["decode", stream, str(workdir / "low.ply"), "--layer", "0", "--no-upscale", "--binary"]
                        + common) == 0
        assert read_ply(workdir / "low.ply").points.max() < 17
        rd = str(workdir / "rd.csv")
        for t in (0, 1):
            assert cli.main(["metrics", str(workdir / "in.ply"), str(workdir / f"dec{t}.ply"), "--stream", stream,
                             "--csv", rd, "--label", f"layer{t}"]) == 0
        rows = list(csv.DictReader(open(rd)))
        assert [r["config"] for r in rows] == ["layer0", "layer1"]
        assert float(rows[0]["psnr_d1"]) > 0

    def test_analyze(self, workdir, trained, capsys):
        base, _ = trained
        assert cli.main(["analyze", "--models", base, "--config", str(workdir / "run.cfg"),
                         "--out-dir", str(workdir / "sim")]) == 0
        assert (workdir / "sim" / "similarity_sequential_sf11.csv").exists()
        assert (workdir / "sim" / "similarity_sequential_sf21.csv").exists()

    def test_bench(self, workdir, trained):
        base, rq = trained
        out = workdir / "bench.csv"
        assert cli.main(["bench", str(workdir / "in.ply"), "--chain", "4,2,F;3,1,F", "--repeats", "1",
                         "--models", base, "--rqulpe", rq, "--csv", str(out)]) == 0
        rows = list(csv.DictReader(open(out)))
        assert [r["quantity"] for r in rows] == ["t_enc_extra", "t_dec_extra", "t_dec_extra"]

    def test_errors_return_2(self, workdir, trained, capsys):
        base, _ = trained
        assert cli.main(["encode", str(workdir / "in.ply"), str(workdir / "x"), "--chain", "3,4,F;3,1,F",
                         "--models", base]) == 2
        assert "error" in capsys.readouterr().err
        assert cli.main(["encode", str(workdir / "missing.ply"), str(workdir / "x"), "--chain", "3,1,F",
                         "--models", base]) == 2

    def test_load_corpus(self, workdir):
        assert len(cli.load_corpus("synthetic:3:1", 32)) == 3
        assert len(cli.load_corpus(str(workdir))) >= 1
        with pytest.raises(FileNotFoundError):
            cli.load_corpus(str(workdir / "nothing*.ply"))
