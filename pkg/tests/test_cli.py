import numpy as np
import pytest

from nextvid.cli import main
from nextvid.config import RunConfig
from nextvid.dataio import read_manifest, read_ppm
from nextvid.trainer import read_metrics

MICRO = """\
preset: desk-small
shape: {T_raw: 4, H: 8, W: 8, C: 3, patch_h: 4, patch_w: 4, tubelet_size: 2}
encoder: {depth: 1, width: 16, heads: 2}
predictor: {depth: 1, width: 16, heads: 2}
decoder: {depth: 1, width: 16, heads: 2, time_freq_dim: 16}
schedule:
  - {name: warmup, steps: 2, start_lr: 1.0e-4, final_lr: 5.0e-4, k_tau: 4, frames: 4, batch_size: 4}
  - {name: cooldown, steps: 2, start_lr: 1.0e-4, final_lr: 1.0e-6, flow_lr: 3.0e-4, k_tau: 1, frames: 4, batch_size: 4}
corpus: {n_train: 16, n_val: 8}
probe: {epochs: 2, heads: 2}
"""


@pytest.fixture
def cfg_path(tmp_path, monkeypatch):
    monkeypatch.setenv("NXTV_OUT", str(tmp_path / "runs"))
    p = tmp_path / "micro.yaml"
    p.write_text(MICRO)
    return p


def run(*argv):
    return main([str(a) for a in argv] + ["--threads", "1"])


def test_gen_corpus_counts_and_force(cfg_path, tmp_path):
    out = tmp_path / "c"
    assert run("gen-corpus", "--config", cfg_path, "--out", out) == 0
    recs = read_manifest(out / "manifest.tsv")
    train = [r for r in recs if r.split == "train"]
    assert len(train) == 16 and len(recs) == 24
    assert np.bincount([r.class_id for r in train]).tolist() == [2] * 8
    assert len(list((out / "clips").glob("*.nxtv"))) == 24
    assert run("gen-corpus", "--config", cfg_path, "--out", out) == 2
    assert run("gen-corpus", "--config", cfg_path, "--out", out, "--force") == 0


def test_default_corpus_config_is_2048_512():
    cfg = RunConfig()
    assert (cfg.corpus.n_train, cfg.corpus.n_val) == (2048, 512)


def test_gen_corpus_reproducible_and_empty(cfg_path, tmp_path):
    run("gen-corpus", "--config", cfg_path, "--out", tmp_path / "a")
    run("gen-corpus", "--config", cfg_path, "--out", tmp_path / "b")
    assert (tmp_path / "a/manifest.tsv").read_bytes() == (tmp_path / "b/manifest.tsv").read_bytes()
    assert run("gen-corpus", "--config", cfg_path, "--out", tmp_path / "e", "--n-train", 0, "--n-val", 0) == 0
    assert read_manifest(tmp_path / "e/manifest.tsv") == []


def test_timestamped_run_dir_and_archived_config(cfg_path, tmp_path):
    assert run("gen-corpus", "--config", cfg_path, "--n-train", 8, "--n-val", 0) == 0
    dirs = list((tmp_path / "runs").iterdir())
    assert len(dirs) == 1 and dirs[0].name.startswith("corpus-")
    archived = RunConfig.load(dirs[0] / "config.yaml")
    assert archived.shape.H == 8 and archived.encoder.width == 16


def test_unknown_config_key(tmp_path):
    p = tmp_path / "bad.yaml"
    p.write_text("encoder: {depth: 1, widht: 16}\n")
    assert run("gen-corpus", "--config", p, "--out", tmp_path / "x") == 2


def test_pretrain_resume_probe_generate(cfg_path, tmp_path):
    full, part = tmp_path / "full", tmp_path / "part"
    assert run("pretrain", "--config", cfg_path, "--out", full) == 0
    assert run("pretrain", "--config", cfg_path, "--out", part, "--stop-at", 3) == 0
    assert run("pretrain", "--resume", part / "ckpt-step3.nxtp", "--out", part) == 0
    assert (full / "metrics.csv").read_bytes() == (part / "metrics.csv").read_bytes()
    assert len(read_metrics(full / "metrics.csv")) == 4

    assert run("probe", "--config", cfg_path, "--checkpoint", full / "ckpt-cooldown.nxtp", "--out", tmp_path / "p") == 0
    assert (tmp_path / "p/probe.csv").read_text().startswith("checkpoint,corpus,accuracy,epochs")

    g1, g2 = tmp_path / "g1", tmp_path / "g2"
    for g in (g1, g2):
        assert run("generate", "--config", cfg_path, "--checkpoint", full / "ckpt-cooldown.nxtp", "--clips", 0, "--out", g) == 0
    masked = read_ppm(g1 / "masked-val-000000.ppm")
    assert masked.shape[0] == 3 * (8 + 1) + 1  # three rows of 8-pixel frames
    roll = read_ppm(g1 / "rollout-val-000000.ppm")
    assert roll.shape[1] == 4 * (8 + 1) + 1  # T_raw frames per row
    for name in ("masked-val-000000.ppm", "rollout-val-000000.ppm"):
        assert (g1 / name).read_bytes() == (g2 / name).read_bytes()


def test_no_mask_flag(cfg_path, tmp_path, monkeypatch):
    import nextvid.trainer as trmod
    seen = []
    orig = trmod.make_batch

    def spy(cfg, step, shape, bs, use_mask=True):
        seen.append(use_mask)
        return orig(cfg, step, shape, bs, use_mask)

    monkeypatch.setattr(trmod, "make_batch", spy)
    assert run("pretrain", "--config", cfg_path, "--no-mask", "--out", tmp_path / "nm") == 0
    assert seen and not any(seen)
    assert RunConfig.load(tmp_path / "nm/config.yaml").train.use_mask is False


def test_latent_target_and_ktau(cfg_path, tmp_path):
    assert run("pretrain", "--config", cfg_path, "--target", "latent", "--ktau", 2, "--out", tmp_path / "l") == 0
    cfg = RunConfig.load(tmp_path / "l/config.yaml")
    assert cfg.train.target == "latent" and cfg.train.ktau_override == 2
    assert run("pretrain", "--config", cfg_path, "--ktau", 0, "--out", tmp_path / "k") == 2


def test_verify_exit_codes(capsys):
    assert run("verify") == 0
    report = capsys.readouterr().out
    assert "encoder      frame_wise_causality         PASS" in report
    assert run("verify", "--inject-full-attention") == 1
    assert "frame_wise_causality         FAIL" in capsys.readouterr().out
