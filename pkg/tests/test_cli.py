import configparser

import numpy as np
import pytest

from prefixmm import cli
from prefixmm.data import read_image
from prefixmm.training import load_model, read_log


def run(*argv):
    return cli.main([str(a) for a in argv])


@pytest.fixture(scope="module")
def bundle(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert run("gen-synthetic", "--out", root / "data", "--count", 6) == 0
    manifest = root / "data" / "manifest.tsv"
    assert run("build-vocab", "--manifest", manifest, "--out", root / "vocab.txt", "--size", 80) == 0
    assert run("train-vq", "--manifest", manifest, "--out", root / "vq", "--hidden", 8, "--steps", 5,
               "--batch-size", 4, "--codebook-size", 8) == 0
    common = ["--manifest", manifest, "--vocab", root / "vocab.txt", "--tokenizer", root / "vq" / "tokenizer.vq",
              "--d-model", 16, "--heads", 2, "--ffn", 32, "--enc-layers", 1, "--dec-layers", 1,
              "--stem-channels", 8, "--max-len", 96, "--batch-size", 2, "--steps", 4]
    assert run("train", *common, "--out", root / "run") == 0
    return root, manifest, common


def test_missing_manifest_is_usage_error(tmp_path, capsys):
    assert run("train-vq", "--manifest", tmp_path / "nope.tsv", "--out", tmp_path / "o") == 1
    err = capsys.readouterr().err
    assert "does not exist" in err and "--help" in err


def test_missing_required_flag_and_unknown_command(tmp_path):
    assert run("train-vq", "--out", tmp_path) == 1
    assert run("frobnicate") == 1
    assert run() == 1


def test_bad_thread_cap(monkeypatch, tmp_path):
    monkeypatch.setenv("PMM_THREADS", "zero")
    assert run("gen-synthetic", "--out", tmp_path, "--count", 1) == 1


def test_train_vq_is_deterministic(bundle, tmp_path):
    root, manifest, _ = bundle
    assert run("train-vq", "--manifest", manifest, "--out", tmp_path, "--hidden", 8, "--steps", 5,
               "--batch-size", 4, "--codebook-size", 8) == 0
    assert (tmp_path / "tokenizer.vq").read_bytes() == (root / "vq" / "tokenizer.vq").read_bytes()
    assert (tmp_path / "vq_log.tsv").read_text() == (root / "vq" / "vq_log.tsv").read_text()


def test_train_writes_frozen_config_and_log(bundle):
    root, _, _ = bundle
    cp = configparser.ConfigParser()
    cp.read(root / "run" / "config.ini")
    assert cp["run"]["command"] == "train"
    assert cp["train"]["objectives"] == "plm,pim"
    log = read_log(root / "run" / "metrics.tsv")
    assert [r["step"] for r in log] == [1, 2, 3, 4]
    _, sections = load_model(root / "run" / "model.ckpt")
    assert sections["meta"]["step"] == "4"


def test_frozen_config_alone_reproduces_run(bundle, tmp_path):
    root, _, _ = bundle
    cfg = (root / "run" / "config.ini").read_text().replace(str(root / "run"), str(tmp_path / "again"))
    (tmp_path / "c.ini").write_text(cfg)
    assert run("train", "--config", tmp_path / "c.ini") == 0
    assert (tmp_path / "again" / "metrics.tsv").read_text() == (root / "run" / "metrics.tsv").read_text()
    assert (tmp_path / "again" / "model.ckpt").read_bytes() == (root / "run" / "model.ckpt").read_bytes()


def test_config_for_another_command_is_rejected(bundle, tmp_path):
    root, _, _ = bundle
    assert run("train-vq", "--config", root / "run" / "config.ini") == 1


@pytest.mark.parametrize("flags, key, value", [
    (["--objectives", "plm"], "objectives", "plm"),
    (["--prefix-mode", "fixed:0.15"], "prefix_mode", "fixed:0.15"),
    (["--mask-strategy", "mim"], "mask_strategy", "mim"),
    (["--visual-embedder", "patch"], "visual_embedder", "patch"),
])
def test_ablation_flags_reach_the_trainer(bundle, tmp_path, flags, key, value):
    _, _, common = bundle
    assert run("train", *common, "--steps", 2, *flags, "--out", tmp_path) == 0
    model, sections = load_model(tmp_path / "model.ckpt")
    got = sections["model"][key] if key == "visual_embedder" else sections["train"][key]
    assert got == value
    if flags == ["--objectives", "plm"]:
        assert all(r["pim"] == 0.0 for r in read_log(tmp_path / "metrics.tsv"))


def test_conflicting_objective_rejected_before_compute(bundle, tmp_path):
    _, _, common = bundle
    assert run("train", *common, "--objectives", "plm,t2t", "--out", tmp_path / "o") == 1
    assert not (tmp_path / "o").exists()
    assert run("train", *common, "--objectives", "plm,xyz", "--out", tmp_path / "o") == 1


def test_caption_greedy_deterministic_and_topk_t0_is_greedy(bundle, capsys):
    root, _, _ = bundle
    image = sorted((root / "data" / "images").iterdir())[0]
    ckpt = root / "run" / "model.ckpt"
    outs = []
    for extra in ([], [], ["--top-k", 5, "--temperature", 0]):
        assert run("caption", "--checkpoint", ckpt, image, "--max-tokens", 12, *extra) == 0
        outs.append(capsys.readouterr().out)
    assert outs[0] == outs[1] == outs[2]


def test_caption_unreadable_image(bundle, tmp_path):
    root, _, _ = bundle
    bad = tmp_path / "x.png"
    bad.write_bytes(b"not an image")
    assert run("caption", "--checkpoint", root / "run" / "model.ckpt", bad) == 2


def test_paint_shape_and_determinism(bundle, tmp_path):
    root, _, _ = bundle
    ckpt = root / "run" / "model.ckpt"
    args = ["--checkpoint", ckpt, "--top-k", 3, "--temperature", 1.0, "--seed", 7]
    assert run("paint", "a red square", "--out", tmp_path / "a.png", *args) == 0
    assert run("paint", "a red square", "--out", tmp_path / "b.png", *args) == 0
    assert (tmp_path / "a.png").read_bytes() == (tmp_path / "b.png").read_bytes()
    assert read_image(tmp_path / "a.png").shape == (32, 32, 3)  # 3 channels, H = W = tokenizer size
    assert (tmp_path / "a.png.config.ini").is_file()


def test_paint_empty_caption(bundle, tmp_path):
    root, _, _ = bundle
    assert run("paint", "   ", "--checkpoint", root / "run" / "model.ckpt", "--out", tmp_path / "a.png") == 2


def test_eval_writes_metrics(bundle, tmp_path):
    root, manifest, _ = bundle
    assert run("eval", "--checkpoint", root / "run" / "model.ckpt", "--manifest", manifest, "--out", tmp_path) == 0
    keys = [l.split("\t")[0] for l in (tmp_path / "metrics.tsv").read_text().splitlines()]
    assert keys == ["text_ce", "text_acc", "image_ce", "image_acc", "text_perplexity", "bleu4"]


def test_selftest_passes_and_catches_injected_fault(tmp_path, capsys):
    assert run("selftest", "--grad-seeds", 1, "--out", tmp_path) == 0
    report = capsys.readouterr().out
    for name in ("gradcheck:gelu", "gradcheck:plm_loss", "causality", "degeneracy:pim=painting[conv]",
                 "masking-budget", "schedule-shape", "checkpoint-roundtrip"):
        assert name in report
    assert "FAIL" not in report
    assert run("selftest", "--grad-seeds", 1, "--inject-fault", "gelu-sign") == 3
    lines = {l.split()[0]: l.split()[1] for l in capsys.readouterr().out.splitlines() if ":" in l.split()[0]}
    assert lines["gradcheck:gelu"] == "FAIL"
    assert lines["gradcheck:add"] == "PASS"
