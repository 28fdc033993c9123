"""End-to-end CLI: exit codes, run directories, file formats, pipelines.

A tiny tokenizer and AR checkpoint are trained once per session; every
test drives main() in-process against them.
"""

import json
from types import SimpleNamespace

import pytest
import torch

from ordtok import cli, fsq
from ordtok import config as C


def _base(root):
    return ["--model.enc_depth", "1", "--model.dec_depth", "1",
            "--model.ar_depth", "1", "--model.k_max", "4",
            "--dataset.n", "4", "--dataset.size", "8",
            "--repa.feature_dim", "8", "--train.steps", "5",
            "--train.warmup_steps", "1", "--train.batch_size", "2",
            "--train.log_every", "0", "--sampler.steps", "2",
            "--out_dir", str(root)]


@pytest.fixture(scope="session")
def trained(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    base = _base(root)
    assert cli.main(["train-tokenizer", *base]) == 0
    tok = next(root.glob("train-tokenizer-*/tokenizer.pt"))
    assert cli.main(["train-ar", "--tokenizer", str(tok), *base]) == 0
    ar = next(root.glob("train-ar-*/ar.pt"))
    return SimpleNamespace(root=root, base=base, tok=tok, ar=ar)


def test_train_run_dir_contents(trained):
    run_dir = trained.tok.parent
    assert (run_dir / "config.json").exists()
    assert (run_dir / "losses.csv").read_text().splitlines()[0] == "step,loss"
    cfg = json.loads((run_dir / "config.json").read_text())
    assert cfg["stage"] == "tokenizer"
    assert cfg["model"]["k_max"] == 4
    assert cfg["model"]["enc_width"] == 64  # null resolved in the echo


def test_tokenize_detokenize_matches_reconstruct(trained):
    base = trained.base
    ck = str(trained.tok)
    assert cli.main(["tokenize", "--checkpoint", ck, "--index", "1", *base]) == 0
    tokens = next(trained.root.glob("tokenize-*/tokens.bin"))
    assert cli.main(["detokenize", "--checkpoint", ck,
                     "--tokens", str(tokens), *base]) == 0
    decoded = next(trained.root.glob("detokenize-*/decoded.png"))
    assert cli.main(["reconstruct", "--checkpoint", ck, "--index", "1", *base]) == 0
    recon = next(trained.root.glob("reconstruct-*/recon.png"))
    assert decoded.read_bytes() == recon.read_bytes()
    metrics = json.loads(next(trained.root.glob("reconstruct-*/metrics.json")).read_text())
    assert set(metrics) == {"mae", "psnr", "feature_distance"}


def test_generate_deterministic_and_stream_format(trained):
    args = ["generate", "--checkpoint", str(trained.ar), "--class", "3",
            "--k", "4", "--seed", "1", *trained.base]
    assert cli.main(args) == 0
    path = next(p for p in trained.root.glob("generate-*/tokens.bin"))
    first = path.read_bytes()
    assert cli.main(args) == 0
    assert path.read_bytes() == first
    with open(path, "rb") as fh:
        codes = fsq.read_token_stream(fh)
    assert codes.shape == (4,)
    assert (codes < 64000).all()
    # a generated stream feeds straight into detokenize
    assert cli.main(["detokenize", "--checkpoint", str(trained.tok),
                     "--tokens", str(path), *trained.base]) == 0


def test_generate_distinct_classes_distinct_dirs(trained):
    for cls in ("0", "7"):
        assert cli.main(["generate", "--checkpoint", str(trained.ar),
                         "--class", cls, "--k", "2", *trained.base]) == 0
    dirs = {p.parent.name for p in trained.root.glob("generate-*/tokens.bin")}
    assert len(dirs) >= 3  # class 3 from the earlier test plus these two


def test_sweep_rd_outputs(trained):
    assert cli.main(["sweep-rd", "--checkpoint", str(trained.tok),
                     *trained.base]) == 0
    run_dir = next(trained.root.glob("sweep-rd-*"))
    header = (run_dir / "rd.csv").read_text().splitlines()[0]
    assert header == "k_tokens,mae,psnr,feature_distance,n_images,seed"
    summary = json.loads((run_dir / "summary.json").read_text())
    assert summary["failures"] == []
    assert "monotonicity" in summary
    assert summary["config_hash"]


def test_sweep_guidance_outputs(trained):
    assert cli.main(["sweep-guidance", "--checkpoint", str(trained.tok),
                     "--scales", "1,3", *trained.base]) == 0
    run_dir = next(trained.root.glob("sweep-guidance-*"))
    lines = (run_dir / "guidance.csv").read_text().splitlines()
    assert lines[0] == "mode,scale,mae,psnr,feature_distance,bound_violations,n_images,seed"
    assert len(lines) == 3
    summary = json.loads((run_dir / "summary.json").read_text())
    assert summary["bound_violations"] == 0


def test_sweep_steps_outputs(trained):
    assert cli.main(["sweep-steps", "--checkpoint", str(trained.tok),
                     "--steps-list", "1,2", *trained.base]) == 0
    run_dir = next(trained.root.glob("sweep-steps-*"))
    lines = (run_dir / "steps.csv").read_text().splitlines()
    assert lines[0] == "steps,mae,psnr,feature_distance,n_images,seed"
    assert len(lines) == 3


def test_probe_outputs(trained):
    assert cli.main(["probe", "--checkpoint", str(trained.tok),
                     *trained.base, "--dataset.n", "8"]) == 0
    run_dir = next(trained.root.glob("probe-*"))
    lines = (run_dir / "probe.csv").read_text().splitlines()
    assert lines[0] == "k_tokens,accuracy"
    assert len(lines) == 4  # ks 1, 2, 4


def test_exit_code_usage():
    assert cli.main(["no-such-command"]) == 1
    assert cli.main(["tokenize", "--not-a-flag", "x"]) == 1
    assert cli.main([]) == 1


def test_exit_code_validation(tmp_path, trained):
    missing = cli.main(["reconstruct", "--checkpoint", str(tmp_path / "none.pt"),
                        *trained.base])
    assert missing == 2
    assert cli.main(["train-tokenizer", "--train.steps", "0",
                     "--out_dir", str(tmp_path)]) == 2
    assert cli.main(["train-tokenizer", "--model.enc_width", "300",
                     "--out_dir", str(tmp_path)]) == 2
    assert cli.main(["train-tokenizer", "--train.peek_lr", "1e-3",
                     "--out_dir", str(tmp_path)]) == 1  # unknown flag is usage


def test_exit_code_runtime_on_bad_checkpoint(tmp_path, trained):
    bad = tmp_path / "bad.pt"
    torch.save({"not": "a checkpoint"}, bad)
    assert cli.main(["reconstruct", "--checkpoint", str(bad), *trained.base]) == 3


def test_config_file_with_flag_override(tmp_path):
    cfg_file = tmp_path / "run.json"
    cfg_file.write_text(json.dumps({"train": {"steps": 3, "warmup_steps": 1,
                                              "batch_size": 2},
                                    "model": {"enc_depth": 1, "dec_depth": 1,
                                              "k_max": 2},
                                    "repa": {"feature_dim": 8},
                                    "dataset": {"n": 2, "size": 8}}))
    out = tmp_path / "runs"
    assert cli.main(["train-tokenizer", "--config", str(cfg_file),
                     "--seed", "9", "--out_dir", str(out)]) == 0
    echoed = json.loads(next(out.glob("train-tokenizer-*/config.json")).read_text())
    assert echoed["seed"] == 9
    assert echoed["train"]["steps"] == 3


def test_out_root_env_var(tmp_path, monkeypatch, trained):
    monkeypatch.setenv("ORDTOK_OUT", str(tmp_path / "envruns"))
    args = [a for a in trained.base]
    cut = args.index("--out_dir")
    del args[cut:cut + 2]  # drop out_dir so the env var decides
    assert cli.main(["tokenize", "--checkpoint", str(trained.tok), *args]) == 0
    assert list((tmp_path / "envruns").glob("tokenize-*/tokens.bin"))


def test_run_dir_reproducible(trained):
    cfg = C.parse_config(overrides=[f"out_dir={trained.root}"])
    d1 = cli._run_dir(cfg, "probe", {"checkpoint": "x"})
    d2 = cli._run_dir(cfg, "probe", {"checkpoint": "x"})
    d3 = cli._run_dir(cfg, "probe", {"checkpoint": "y"})
    assert d1 == d2
    assert d1 != d3
