import hashlib

import numpy as np
import pytest

from incsr.cli import main
from incsr.datagen import ingest_samples
from incsr.imageops import decode_ppm

CONFIG = """\
epochs = 1
batch_size = 4
feature_width = 8
d_width_scale = 0.125
lr = 0.001
seed = 0
"""


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    cfg = d / "train.cfg"
    cfg.write_text(CONFIG)
    rc = main(["pretrain", "--config", str(cfg), "--out", str(d / "teacher.ckpt"),
               "--pool", "8"])
    assert rc == 0
    return d


def test_pretrain_outputs(workdir):
    assert (workdir / "teacher.ckpt").exists()
    log = (workdir / "teacher.ckpt.log.csv").read_text().splitlines()
    assert log[0].startswith("epoch,")
    assert len(log) == 2  # header + one epoch


def test_missing_config_names_path(tmp_path, capsys):
    rc = main(["pretrain", "--config", str(tmp_path / "absent.cfg"),
               "--out", str(tmp_path / "x.ckpt")])
    assert rc == 2
    assert "absent.cfg" in capsys.readouterr().err


def test_bad_config_key_exits_2(tmp_path, capsys):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("wibble = 3\n")
    rc = main(["pretrain", "--config", str(cfg), "--out", str(tmp_path / "x.ckpt")])
    assert rc == 2
    assert "wibble" in capsys.readouterr().err


def test_incremental_without_replay_logs_zero_kd(workdir, tmp_path):
    rc = main(["incremental", "--teacher", str(workdir / "teacher.ckpt"),
               "--config", str(workdir / "train.cfg"), "--mix", "0,4",
               "--out", str(tmp_path / "student.ckpt")])
    assert rc == 0
    lines = (tmp_path / "student.ckpt.log.csv").read_text().splitlines()
    header = lines[0].split(",")
    kd_idx = header.index("kd_response")
    for row in lines[1:]:
        assert float(row.split(",")[kd_idx]) == 0.0


def test_incremental_with_replay_logs_nonzero_kd_and_keeps_teacher(workdir, tmp_path):
    teacher = workdir / "teacher.ckpt"
    before = hashlib.sha256(teacher.read_bytes()).hexdigest()
    rc = main(["incremental", "--teacher", str(teacher),
               "--config", str(workdir / "train.cfg"), "--mix", "2,4",
               "--out", str(tmp_path / "student.ckpt")])
    assert rc == 0
    assert hashlib.sha256(teacher.read_bytes()).hexdigest() == before
    lines = (tmp_path / "student.ckpt.log.csv").read_text().splitlines()
    header = lines[0].split(",")
    kd_idx = header.index("kd_response")
    assert any(float(row.split(",")[kd_idx]) > 0.0 for row in lines[1:])


@pytest.mark.parametrize("mix", ["4", "a,b", "4,0", "-1,4"])
def test_incremental_bad_mix_exits_2(workdir, tmp_path, mix):
    rc = main(["incremental", "--teacher", str(workdir / "teacher.ckpt"),
               "--config", str(workdir / "train.cfg"), f"--mix={mix}",
               "--out", str(tmp_path / "s.ckpt")])
    assert rc == 2


def test_eval_writes_two_rows_and_grids(workdir, tmp_path):
    out = tmp_path / "report.csv"
    grids = tmp_path / "grids"
    rc = main(["eval", "--ckpt", str(workdir / "teacher.ckpt"),
               "--domains", "source,target", "--out", str(out),
               "--images", str(grids), "--n", "2"])
    assert rc == 0
    lines = out.read_text().splitlines()
    assert lines[0] == "experiment,test_domain,psnr,ssim,fid_proxy,n"
    assert len(lines) == 3
    assert lines[1].startswith("teacher,source,")
    img = decode_ppm((grids / "target_00.ppm").read_bytes())
    assert img.shape == (128, 3 * 128, 3)

    # rerun determinism: byte-identical CSV
    again = tmp_path / "report2.csv"
    rc = main(["eval", "--ckpt", str(workdir / "teacher.ckpt"),
               "--domains", "source,target", "--out", str(again), "--n", "2"])
    assert rc == 0
    assert again.read_bytes() == out.read_bytes()


def test_eval_unknown_domain_exits_2(workdir, tmp_path):
    rc = main(["eval", "--ckpt", str(workdir / "teacher.ckpt"),
               "--domains", "moon", "--out", str(tmp_path / "r.csv")])
    assert rc == 2


def test_eval_missing_checkpoint_exits_4(tmp_path):
    rc = main(["eval", "--ckpt", str(tmp_path / "none.ckpt"),
               "--out", str(tmp_path / "r.csv")])
    assert rc == 4


def test_eval_corrupt_checkpoint_exits_4(tmp_path):
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"not a checkpoint at all")
    rc = main(["eval", "--ckpt", str(bad), "--out", str(tmp_path / "r.csv")])
    assert rc == 4


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_diverging_training_exits_3(tmp_path, capsys):
    cfg = tmp_path / "explode.cfg"
    cfg.write_text(CONFIG.replace("lr = 0.001", "lr = 1e20"))
    rc = main(["pretrain", "--config", str(cfg), "--out", str(tmp_path / "x.ckpt"),
               "--pool", "8"])
    assert rc == 3
    assert "diverged" in capsys.readouterr().err


def test_grid_runs_one_setting(workdir, tmp_path):
    spec = tmp_path / "grid.cfg"
    spec.write_text(CONFIG + "\n".join([
        "pool_source = 8",
        "pool_target = 8",
        "eval_n = 2",
        "setting1.name = mix-2-4",
        "setting1.mix = 2,4",
        "setting1.weight_kd_response = 5",
        "",
    ]))
    out = tmp_path / "gridout"
    rc = main(["grid", "--spec", str(spec), "--out", str(out)])
    assert rc == 0
    lines = (out / "results.csv").read_text().splitlines()
    assert len(lines) == 3
    assert all(row.startswith("mix-2-4,") for row in lines[1:])
    assert (out / "mix-2-4.log.csv").exists()
    assert (out / "teacher.ckpt").exists()


def test_grid_without_settings_exits_2(tmp_path, capsys):
    spec = tmp_path / "empty.cfg"
    spec.write_text(CONFIG)
    rc = main(["grid", "--spec", str(spec), "--out", str(tmp_path / "o")])
    assert rc == 2
    assert "no settings" in capsys.readouterr().err


def test_gen_data_round_trips(tmp_path):
    out = tmp_path / "data"
    rc = main(["gen-data", "--out", str(out), "--n", "3", "--seed", "4",
               "--domain", "source,target"])
    assert rc == 0
    samples = ingest_samples(out)
    assert len(samples) == 6
    assert sum(s.domain == "source" for s in samples) == 3


def test_export_samples_writes_grids(workdir, tmp_path):
    out = tmp_path / "grids"
    rc = main(["export-samples", "--ckpt", str(workdir / "teacher.ckpt"),
               "--out", str(out), "--n", "2", "--domain", "target"])
    assert rc == 0
    files = sorted(p.name for p in out.iterdir())
    assert files == ["target_00.ppm", "target_01.ppm"]


def test_unknown_flag_exits_2(workdir):
    with pytest.raises(SystemExit) as info:
        main(["eval", "--ckpt", "x", "--out", "y", "--frobnicate"])
    assert info.value.code == 2


def test_unknown_subcommand_exits_2():
    with pytest.raises(SystemExit) as info:
        main(["transmogrify"])
    assert info.value.code == 2


@pytest.mark.parametrize("command", [
    [], ["pretrain"], ["incremental"], ["eval"], ["grid"],
])
def test_missing_required_args_exit_2(command):
    with pytest.raises(SystemExit) as info:
        main(command)
    assert info.value.code == 2


@pytest.mark.parametrize("sub", ["pretrain", "incremental", "eval", "grid",
                                 "gen-data", "export-samples"])
def test_every_subcommand_has_help(sub, capsys):
    with pytest.raises(SystemExit) as info:
        main([sub, "--help"])
    assert info.value.code == 0
    assert "--" in capsys.readouterr().out
