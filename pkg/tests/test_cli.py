"""CLI surface: exit codes, config handling, and the full pipeline."""

import os

import pytest

from volrep.cli import main
from volrep.config import build_config, parse_config_file

TINY = [
    "--vol_h=16", "--vol_w=16", "--vol_d=8",
    "--patch_h=8", "--patch_w=8", "--patch_d=4",
    "--embed_dim=16", "--proj_dim=8", "--heads=2", "--mlp_ratio=1",
    "--enc_layers_v=1", "--dec_layers_v=1", "--enc_layers_t=1",
    "--dec_layers_t=1", "--top_k=2", "--lesion_max=2",
]


class TestUsage:
    def test_no_args_exits_one(self, capsys):
        assert main([]) == 1
        assert "usage:" in capsys.readouterr().err

    def test_help_exits_zero(self, capsys):
        assert main(["--help"]) == 0
        assert "commands:" in capsys.readouterr().out

    def test_subcommand_help(self, capsys):
        assert main(["pretrain", "--help"]) == 0

    def test_unknown_command(self, capsys):
        assert main(["frobnicate"]) == 1
        assert "unknown command" in capsys.readouterr().err

    def test_unknown_key_rejected(self, capsys):
        assert main(["gen-data", "--not_a_key=3"]) == 1
        assert "unknown key" in capsys.readouterr().err

    def test_bad_value_rejected(self, capsys):
        assert main(["gen-data", "--seed=elephant"]) == 1

    def test_missing_required_key(self, capsys):
        assert main(["pretrain", "--data_dir="]) == 1

    def test_runtime_error_exits_two(self, tmp_path, capsys):
        assert main(["probe", f"--data_dir={tmp_path}/nope",
                     f"--checkpoint={tmp_path}/nope.ckpt",
                     f"--out_dir={tmp_path}"]) == 2


class TestConfigFile:
    def test_parse_and_override(self, tmp_path):
        path = tmp_path / "run.cfg"
        path.write_text("# comment\nseed=9\nsteps=12\nenable_sa=false\n")
        values = parse_config_file(path)
        assert values == {"seed": 9, "steps": 12, "enable_sa": False}
        cfg = build_config(path, ["steps=20"])
        assert cfg.seed == 9 and cfg.steps == 20 and cfg.enable_sa is False

    def test_unknown_key_in_file(self, tmp_path):
        path = tmp_path / "bad.cfg"
        path.write_text("nope=1\n")
        from volrep.config import ConfigError

        with pytest.raises(ConfigError, match="nope"):
            parse_config_file(path)

    def test_cli_reads_config_file(self, tmp_path, capsys):
        path = tmp_path / "gen.cfg"
        path.write_text("n=2\nseed=5\n" + "".join(
            f"{kv[2:].split('=')[0]}={kv.split('=')[1]}\n" for kv in TINY
        ))
        out = tmp_path / "corpus"
        assert main(["gen-data", "--config", str(path), f"--out_dir={out}"]) == 0
        assert len(os.listdir(out)) == 2 * 3 + 2


class TestGenData:
    def test_rerun_produces_identical_files(self, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        for out in (a, b):
            code = main(["gen-data", "--seed=7", "--n=4", f"--out_dir={out}"] + TINY)
            assert code == 0
        for name in sorted(os.listdir(a)):
            assert (a / name).read_bytes() == (b / name).read_bytes()


@pytest.mark.slow
class TestPipeline:
    def test_end_to_end(self, tmp_path, capsys):
        data = tmp_path / "data"
        out = tmp_path / "run"
        base = TINY + [f"--data_dir={data}", f"--out_dir={out}"]

        assert main(["gen-data", "--seed=3", "--n=6", f"--out_dir={data}"] + TINY) == 0
        assert main(["pretrain", "--steps=3", "--batch_size=2", "--seed=0"] + base) == 0
        assert (out / "loss.csv").exists()
        assert (out / "loss.png").exists()
        ckpt = out / "model.ckpt"
        assert ckpt.exists()

        assert main(["probe", f"--checkpoint={ckpt}", "--probe_iters=50"] + base) == 0
        assert (out / "probe.csv").exists()
        assert (out / "probe.png").exists()

        assert main(["visualize", f"--checkpoint={ckpt}", "--sample_id=1",
                     "--sentence_index=0"] + base) == 0
        pgms = list(out.glob("heatmap_s0001_sent0_z*.pgm"))
        assert len(pgms) == 2  # one per depth slice of the patch grid
        assert (out / "heatmap_s0001_sent0_topk.txt").exists()
        assert (out / "heatmap_s0001_sent0.png").exists()

    def test_resume_matches_direct_run(self, tmp_path):
        data = tmp_path / "data"
        assert main(["gen-data", "--seed=3", "--n=4", f"--out_dir={data}"] + TINY) == 0
        base = TINY + [f"--data_dir={data}", "--batch_size=2", "--seed=1"]

        full = tmp_path / "full"
        assert main(["pretrain", "--steps=4", "--save_every=2",
                     f"--out_dir={full}"] + base) == 0

        resumed = tmp_path / "resumed"
        mid = full / "model.ckpt.step000002"
        assert main(["pretrain", "--steps=4", f"--resume={mid}",
                     f"--out_dir={resumed}"] + base) == 0
        assert (full / "model.ckpt").read_bytes() == \
            (resumed / "model.ckpt").read_bytes()
