import numpy as np
import pytest

from rmnet_ir import cli
from rmnet_ir.graph import ADD, forward
from rmnet_ir.serialize import graph_hash, load, read_tensor, save, write_tensor


def run(*argv):
    return cli.main([str(a) for a in argv])


@pytest.fixture
def resnet(tmp_path):
    path = tmp_path / "r.json"
    assert run("build", "--family", "resnet", "--blocks", "2,2,2,2", "--width", "8", "--residual-bn",
               "--input-shape", "3,16,16", "-o", path) == 0
    return path


def test_build_convert_verify(resnet, tmp_path, capsys):
    out = tmp_path / "rm.json"
    assert run("convert", "-i", resnet, "-o", out) == 0
    g = load(out)
    assert g.is_plain() and not any(l.kind == ADD for l in g.layers)
    # saved weights are float32, so even the f64 check is bounded by storage rounding
    assert run("verify", "-a", resnet, "-b", out, "--f64", "--tol", "1e-6") == 0
    assert "PASS" in capsys.readouterr().out


def test_plain_model_is_copied(resnet, tmp_path, capsys):
    src = tmp_path / "plain.json"
    assert run("convert", "-i", resnet, "-o", src) == 0
    capsys.readouterr()
    dst = tmp_path / "copy.json"
    assert run("convert", "-i", src, "-o", dst) == 0
    assert "nothing to convert" in capsys.readouterr().out
    assert graph_hash(load(dst)) == graph_hash(load(src))


def test_failed_verification_writes_nothing(resnet, tmp_path):
    out = tmp_path / "never.json"
    assert run("convert", "-i", resnet, "-o", out, "--tol", "-1") == 2
    assert not out.exists()


def test_error_codes(resnet, tmp_path, capsys):
    other = tmp_path / "o.json"
    run("build", "--blocks", "1", "--width", "8", "--classes", "3", "--input-shape", "3,16,16", "-o", other)
    assert run("verify", "-a", resnet, "-b", other) == 1
    assert run("verify", "-a", tmp_path / "missing.json", "-b", other) == 3
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert run("stats", "-i", bad) == 3
    assert run("prune", "-i", other, "-o", tmp_path / "p.json", "--threshold", "0.1") == 1  # no skip BNs
    assert "error:" in capsys.readouterr().err


def test_prune_stats_run(resnet, tmp_path, capsys):
    pruned = tmp_path / "p.json"
    assert run("prune", "-i", resnet, "-o", pruned, "--threshold", "0") == 0
    assert "per-layer keep ratio" in capsys.readouterr().out
    assert run("stats", "-i", pruned) == 0
    assert capsys.readouterr().out.strip()
    x = np.random.default_rng(0).standard_normal((2, 3, 16, 16)).astype(np.float32)
    t = tmp_path / "x.bin"
    write_tensor(t, x)
    assert run("run", "-i", pruned, "--input", t) == 0
    y = read_tensor(tmp_path / "x.out.bin")
    np.testing.assert_allclose(y, forward(load(resnet), x), atol=1e-4)


def test_recalibrate(resnet, tmp_path):
    rm = tmp_path / "rm.json"
    run("convert", "-i", resnet, "-o", rm)
    data = tmp_path / "data"
    data.mkdir()
    r = np.random.default_rng(1)
    for i in range(2):
        write_tensor(data / f"{i}.bin", r.standard_normal((4, 3, 16, 16)).astype(np.float32))
    out = tmp_path / "re.json"
    assert run("recalibrate", "-i", rm, "--data", data, "-o", out) == 0
    assert run("verify", "-a", rm, "-b", out, "--tol", "1e-5") == 0
    empty = tmp_path / "empty"
    empty.mkdir()
    assert run("recalibrate", "-i", rm, "--data", empty, "-o", out) == 3


def test_build_rejects_bad_config(tmp_path):
    assert run("build", "--width", "0", "-o", tmp_path / "x.json") == 1
    with pytest.raises(SystemExit):
        run("build", "--family", "vit", "-o", tmp_path / "x.json")


def test_save_roundtrip_via_cli_stats(tmp_path, capsys):
    from rmnet_ir.builders import ArchConfig, build
    g = build(ArchConfig(blocks_per_stage=(1,), base_width=4))
    save(g, tmp_path / "g.json")
    assert run("stats", "-i", tmp_path / "g.json", "--input-shape", "3,64,64") == 0
    assert capsys.readouterr().out.strip()
