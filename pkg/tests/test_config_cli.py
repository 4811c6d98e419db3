import subprocess
import sys

import pytest

from pathforge.cli import main
from pathforge.config import ConfigError, PipelineConfig, build, load_config, parse_config
from pathforge.mil import TrainConfig

GOOD = """
# a full pipeline
[train]
epochs = 3
betas = 0.8, 0.99
max_tiles_per_bag = none

[plan]
n_splits = 2
stratified = yes

[run]
seed = 7
"""


class TestConfig:
    def test_parse_values(self):
        cfg = parse_config(GOOD)
        assert cfg.get("train", "epochs") == 3
        assert cfg.get("train", "betas") == (0.8, 0.99)
        assert cfg.get("train", "max_tiles_per_bag", "unset") is None
        assert cfg.get("plan", "stratified") is True
        assert cfg.get("run", "seed") == 7

    def test_render_round_trip(self):
        cfg = parse_config(GOOD)
        assert parse_config(cfg.render()).sections == cfg.sections

    def test_underscored_ints(self):
        assert parse_config("[schedule]\ntiles_per_epoch = 65_000_000\n").get("schedule", "tiles_per_epoch") == 65_000_000

    @pytest.mark.parametrize(
        "text,line",
        [
            ("[train]\nepochs = 3\nfoo = 1\n", 3),
            ("[nope]\n", 1),
            ("epochs = 3\n", 1),
            ("[train]\n\nepochs = three\n", 3),
            ("[train]\nepochs = 3\nepochs = 4\n", 3),
            ("[train\n", 1),
            ("[train]\njust text\n", 2),
            ("[plan]\nstratified = maybe\n", 2),
        ],
    )
    def test_errors_carry_line_numbers(self, text, line):
        with pytest.raises(ConfigError) as info:
            parse_config(text, "p.cfg")
        assert info.value.line == line
        assert f"p.cfg:{line}:" in str(info.value)

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError):
            load_config(tmp_path / "absent.cfg")

    def test_build_overrides(self):
        tc = build(TrainConfig, {"epochs": 3, "warmup_epochs": 1, "hidden": 8}, seed=5, epochs=None)
        assert (tc.epochs, tc.hidden, tc.seed) == (3, 8, 5)

    def test_set_unknown_key(self):
        with pytest.raises(ConfigError):
            PipelineConfig().set("train", "momentum", 0.9)


def run_cli(*argv):
    return main([str(a) for a in argv])


class TestCLI:
    def test_schedule_stats(self, tmp_path, capsys):
        code = run_cli("schedule-stats", "--tiles-per-epoch", 65_000_000, "--effective-batch", 1080,
                       "--out", tmp_path)
        out = capsys.readouterr().out
        assert code == 0
        assert "imagenet_epochs=50.73\n" in out
        assert "total_passes=10\n" in out
        assert "steps_per_epoch=60185\n" in out
        assert "optimization_steps=3009259\n" in out
        assert (tmp_path / "stats.txt").read_text() == out
        manifest = (tmp_path / "manifest.txt").read_text()
        assert "command=schedule-stats" in manifest and "tiles_per_epoch = 65000000" in manifest

    def test_schedule_stats_from_config(self, tmp_path, capsys):
        cfg = tmp_path / "s.cfg"
        cfg.write_text("[schedule]\ntiles_per_epoch = 65_000_000\nn_pseudo_epochs = 25\neffective_batch = 1080\n")
        assert run_cli("schedule-stats", "--config", cfg, "--out", tmp_path / "o") == 0
        assert "optimization_steps=1504629" in capsys.readouterr().out

    def test_slide_to_schedule(self, tmp_path, capsys):
        slides = []
        for i, organ in enumerate(["lung", "lung", "skin", "skin", "colon"]):
            d = tmp_path / f"slide{i}"
            assert run_cli("synth-slide", "--slide-id", f"s{i}", "--organ", organ, "--width", 700,
                           "--height", 700, "--coverage", 0.4, "--seed", i, "--out", d) == 0
            slides.append(d / f"s{i}.png")
        assert run_cli("tile", *slides, "--tile-px", 224,
                       "--out", tmp_path / "tiles") == 0
        corpus = (tmp_path / "tiles" / "corpus.tsv").read_text().splitlines()
        assert corpus[0] == "slide_id\torgan\tn_tiles" and len(corpus) == 6
        assert list((tmp_path / "tiles" / "tiles" / "s0").glob("*.jpg"))
        for run in ("a", "b"):
            assert run_cli("schedule", "--corpus", tmp_path / "tiles" / "corpus.tsv", "--tiles-per-epoch", 20,
                           "--n-pseudo-epochs", 5, "--n-folds", 5, "--seed", 3, "--out", tmp_path / run) == 0
        names = sorted(p.name for p in (tmp_path / "a" / "manifests").iterdir())
        assert names == [f"pseudo_epoch_{e:04d}.tsv" for e in range(5)]
        for name in names:
            a = (tmp_path / "a" / "manifests" / name).read_bytes()
            assert a == (tmp_path / "b" / "manifests" / name).read_bytes()

    def test_embed_plan_train_bench(self, tmp_path, capsys):
        emb = tmp_path / "emb"
        assert run_cli("synth-embed", "--n-slides", 20, "--min-tiles", 3, "--max-tiles", 6, "--dim", 4,
                       "--seed", 1, "--out", emb) == 0
        cfg = tmp_path / "t.cfg"
        cfg.write_text("[train]\nepochs = 2\nwarmup_epochs = 0\nhidden = 4\n[plan]\nstratified = true\n"
                       "bootstrap_iters = 50\n")
        assert run_cli("plan", "--embeddings", emb / "embeddings", "--n-splits", 2, "--replicas", 1,
                       "--config", cfg, "--out", tmp_path / "plan") == 0
        plan = tmp_path / "plan" / "plan.tsv"
        assert run_cli("train", "--embeddings", emb / "embeddings", "--plan", plan, "--config", cfg,
                       "--out", tmp_path / "train") == 0
        assert (tmp_path / "train" / "model.pgma").exists()
        assert (tmp_path / "train" / "epochs.csv").read_text().count("\n") == 3
        for run in ("b1", "b2"):
            assert run_cli("bench", "--embeddings", emb / "embeddings", "--plan", plan, "--config", cfg,
                           "--jobs", 1, "--out", tmp_path / run) == 0
        for name in ("summary.txt", "curve.csv", "finals.csv", "plan.tsv"):
            assert (tmp_path / "b1" / name).read_bytes() == (tmp_path / "b2" / name).read_bytes()
        manifest = (tmp_path / "b1" / "manifest.txt").read_text()
        assert "input.plan=" in manifest and "sha256=" in manifest and "epochs = 2" in manifest
        assert "final_auc=" in capsys.readouterr().out

    def test_sweep(self, tmp_path, capsys):
        for tag, effect in (("ep0", 0.0), ("ep9", 3.0)):
            assert run_cli("synth-embed", "--n-slides", 20, "--min-tiles", 3, "--max-tiles", 6, "--dim", 4,
                           "--effect-size", effect, "--checkpoint-tag", tag, "--out", tmp_path / tag) == 0
        cfg = tmp_path / "t.cfg"
        cfg.write_text("[train]\nepochs = 2\nwarmup_epochs = 0\nhidden = 4\n[plan]\nn_splits = 2\n"
                       "replicas = 1\nstratified = true\nbootstrap_iters = 20\n")
        assert run_cli("sweep", "--embeddings", tmp_path / "ep0" / "embeddings", tmp_path / "ep9" / "embeddings",
                       "--config", cfg, "--jobs", 1, "--out", tmp_path / "sw") == 0
        lines = (tmp_path / "sw" / "sweep.csv").read_text().splitlines()
        assert len(lines) == 5 and lines[1].startswith("ep0,0,")

    def test_config_error_exit_code(self, tmp_path, capsys):
        cfg = tmp_path / "bad.cfg"
        cfg.write_text("[train]\nlr = 1\n")
        assert run_cli("schedule-stats", "--config", cfg, "--out", tmp_path) == 2
        err = capsys.readouterr().err
        assert err.startswith("error: category=config message=") and "bad.cfg:2:" in err

    def test_missing_input_exit_code(self, tmp_path, capsys):
        code = run_cli("schedule", "--corpus", tmp_path / "absent.tsv", "--tiles-per-epoch", 10, "--out", tmp_path)
        assert code == 3
        assert "category=missing-input" in capsys.readouterr().err

    def test_format_error_exit_code(self, tmp_path, capsys):
        assert run_cli("synth-embed", "--n-slides", 6, "--min-tiles", 2, "--max-tiles", 3, "--dim", 4,
                       "--out", tmp_path / "e") == 0
        victim = sorted((tmp_path / "e" / "embeddings" / "slides").iterdir())[0]
        victim.write_bytes(b"JUNK" + victim.read_bytes()[4:])
        code = run_cli("bench", "--embeddings", tmp_path / "e" / "embeddings", "--out", tmp_path / "b")
        assert code == 4
        assert "category=format-magic" in capsys.readouterr().err

    def test_protocol_error_exit_code(self, tmp_path, capsys):
        assert run_cli("synth-embed", "--n-slides", 6, "--min-tiles", 2, "--max-tiles", 3, "--dim", 4,
                       "--out", tmp_path / "e") == 0
        labels = tmp_path / "e" / "embeddings" / "labels.tsv"
        rows = [line.split("\t")[0] for line in labels.read_text().splitlines()]
        # one positive: every validation split of size 2 that misses it has one class
        labels.write_text("".join(f"{s}\t{int(i == 0)}\n" for i, s in enumerate(rows)))
        cfg = tmp_path / "t.cfg"
        cfg.write_text("[train]\nepochs = 1\nwarmup_epochs = 0\nhidden = 2\n")
        code = run_cli("bench", "--embeddings", tmp_path / "e" / "embeddings", "--config", cfg, "--jobs", 1,
                       "--out", tmp_path / "b")
        assert code == 5
        err = capsys.readouterr().err
        assert "category=protocol" in err and "split=" in err

    def test_module_entry_point(self, tmp_path):
        proc = subprocess.run(
            [sys.executable, "-m", "pathforge", "schedule-stats", "--tiles-per-epoch", "65000000",
             "--effective-batch", "1440", "--out", str(tmp_path)],
            capture_output=True, text=True, check=True,
        )
        assert "optimization_steps=2256944" in proc.stdout
