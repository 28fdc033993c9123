"""Command-line entry points.

Every subcommand parses the same config tree (file via --config, then
dotted flags like --train.peak_lr), writes a run directory named from the
hash of the resolved config, and echoes that config into it, so the
directory is reproducible from config plus seed alone.

Exit codes: 0 success, 1 usage, 2 validation, 3 runtime failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import torch

from . import config as C
from . import evalsuite as ev
from . import fsq
from .data import load_image, save_image
from .errors import CheckpointError, NumericError, ValidationError
from .train import (Stage1Settings, Stage2Settings, check_compatible,
                    load_checkpoint, load_ema_weights, pretokenize,
                    save_checkpoint, stage1_token_rate, stage2_token_rate,
                    train_ar, train_tokenizer)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


_CONFIG_DEST = {key: "cfg__" + key.replace(".", "__") for key in C._VALID_KEYS}


def _add_config_flags(parser: argparse.ArgumentParser):
    parser.add_argument("--config", metavar="FILE", default=None,
                        help="JSON config file; flags override it")
    group = parser.add_argument_group("config overrides (dotted keys)")
    for key, dest in _CONFIG_DEST.items():
        group.add_argument(f"--{key}", dest=dest, metavar="V", default=None,
                           help=argparse.SUPPRESS)


def _config_from(ns, stage: str | None = None) -> C.RunConfig:
    overrides = []
    for key, dest in _CONFIG_DEST.items():
        value = getattr(ns, dest, None)
        if value is not None:
            overrides.append((key, C.coerce_value(value)))
    if stage is not None:
        overrides.append(("stage", stage))
    return C.parse_config(ns.config, dict(overrides))


def _run_dir(cfg: C.RunConfig, command: str, args: dict | None = None) -> Path:
    """Directory name hashes the resolved config plus the subcommand args,
    so distinct invocations never share a directory and rerunning one
    reproduces it exactly."""
    ident = {"config": cfg.to_dict(),
             "args": {k: str(v) for k, v in (args or {}).items() if v is not None}}
    run_dir = C.out_root(cfg) / f"{command}-{ev.config_hash(ident)[:8]}"
    run_dir.mkdir(parents=True, exist_ok=True)
    C.echo_config(cfg, run_dir)
    return run_dir


def _load_tokenizer(path):
    """Rebuild the tokenizer a checkpoint was trained with and load its
    EMA weights (evaluation always runs on the averaged weights)."""
    ckpt = load_checkpoint(path)
    if not ckpt.get("config"):
        raise CheckpointError(f"checkpoint {path} carries no config")
    cfg = C.RunConfig(ckpt["config"])
    model = C.build_tokenizer(cfg)
    load_checkpoint(path, model)  # manifest check against this architecture
    load_ema_weights(model, ckpt)
    model.eval()
    return model, cfg, ckpt


def _load_ar(path):
    ckpt = load_checkpoint(path)
    if not ckpt.get("config"):
        raise CheckpointError(f"checkpoint {path} carries no config")
    cfg = C.RunConfig(ckpt["config"])
    model = C.build_ar(cfg)
    load_checkpoint(path, model)
    load_ema_weights(model, ckpt)
    model.eval()
    return model, cfg, ckpt


def _eval_oracle(tok_cfg: C.RunConfig, model):
    # image-space feature oracle for reconstruction metrics; grid matches
    # the decoder's patch grid
    if not tok_cfg.tree["repa"]["enabled"]:
        return None
    if tok_cfg.tree["repa"]["oracle"] != "proj":
        return None
    return C.build_repa_oracle(tok_cfg, model.decoder.patch_hw[0])


def _one_image(ns, cfg: C.RunConfig):
    if ns.image is not None:
        return load_image(ns.image, size=cfg.tree["dataset"]["size"])
    images, _ = C.load_dataset(cfg)
    if not 0 <= ns.index < images.shape[0]:
        raise ValidationError(f"--index {ns.index} outside dataset of {images.shape[0]}")
    return images[ns.index]


def _write_losses(run_dir: Path, losses):
    with open(run_dir / "losses.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "loss"])
        w.writerows((i, loss) for i, loss in enumerate(losses))


def _float_list(text: str) -> list[float]:
    if not text.strip():
        return []
    return [float(x) for x in text.split(",")]


def _int_list(text: str) -> list[int]:
    if not text.strip():
        return []
    return [int(x) for x in text.split(",")]


# ---------------------------------------------------------- training

def _cmd_train_tokenizer(ns) -> int:
    cfg = _config_from(ns, stage="tokenizer")
    run_dir = _run_dir(cfg, "train-tokenizer",
                       {"resume": ns.resume, "stop_after": ns.stop_after})
    images, _ = C.load_dataset(cfg)
    codec = C.build_codec(cfg)
    latents = codec.encode(images)
    model = C.build_tokenizer(cfg)
    model.init_weights(torch.Generator().manual_seed(cfg.seed))
    feats = None
    repa_weight = 0.0
    if cfg.repa.enabled:
        oracle = C.build_repa_oracle(cfg, model.decoder.patch_hw[0])
        feats = torch.stack([oracle.features(images[i], index=i)
                             for i in range(images.shape[0])])
        repa_weight = cfg.repa.weight
    optim = C.build_optim(cfg, stage1_token_rate(model, cfg.train.batch_size))
    settings = Stage1Settings(
        schedule=C.build_schedule(cfg), optim=optim,
        batch_size=cfg.train.batch_size, noise_s=cfg.flow.noise_s,
        cond_dropout=cfg.cond_dropout, repa_weight=repa_weight,
        per_batch_k=cfg.schedule.per_batch, seed=cfg.seed,
        deterministic=cfg.deterministic, log_every=cfg.train.log_every)
    start = load_checkpoint(ns.resume) if ns.resume else None
    result = train_tokenizer(model, latents, settings, feats=feats,
                             start=start, stop_after=ns.stop_after,
                             config=cfg.to_dict())
    ckpt_path = run_dir / "tokenizer.pt"
    save_checkpoint(ckpt_path, result.checkpoint)
    _write_losses(run_dir, result.losses)
    print(f"step {result.checkpoint['step']}: loss {result.losses[-1]:.6f}")
    print(f"checkpoint: {ckpt_path}")
    return 0


def _cmd_train_ar(ns) -> int:
    cfg = _config_from(ns, stage="ar")
    run_dir = _run_dir(cfg, "train-ar", {"tokenizer": ns.tokenizer,
                                         "resume": ns.resume,
                                         "stop_after": ns.stop_after})
    tok_model, tok_cfg, _ = _load_tokenizer(ns.tokenizer)
    images, labels = C.load_dataset(cfg)
    codec = C.build_codec(tok_cfg)
    sequences = pretokenize(tok_model, codec.encode(images))
    model = C.build_ar(cfg)
    model.init_weights(torch.Generator().manual_seed(cfg.seed))
    check_compatible(tok_model, model)
    optim = C.build_optim(cfg, stage2_token_rate(cfg.train.batch_size,
                                                 sequences.shape[1]))
    settings = Stage2Settings(
        optim=optim, batch_size=cfg.train.batch_size,
        cond_dropout=cfg.cond_dropout, seed=cfg.seed,
        deterministic=cfg.deterministic, log_every=cfg.train.log_every)
    start = load_checkpoint(ns.resume) if ns.resume else None
    result = train_ar(model, sequences, labels, settings, start=start,
                      stop_after=ns.stop_after, config=cfg.to_dict())
    ckpt_path = run_dir / "ar.pt"
    save_checkpoint(ckpt_path, result.checkpoint)
    _write_losses(run_dir, result.losses)
    ev.write_summary(run_dir / "summary.json", cfg.to_dict(), cfg.seed,
                     extra={"tokenizer_checkpoint": str(ns.tokenizer)})
    print(f"step {result.checkpoint['step']}: loss {result.losses[-1]:.6f}")
    print(f"checkpoint: {ckpt_path}")
    return 0


# ------------------------------------------------------- token pipeline

def _cmd_tokenize(ns) -> int:
    cfg = _config_from(ns)
    run_dir = _run_dir(cfg, "tokenize", {"checkpoint": ns.checkpoint,
                                         "image": ns.image, "index": ns.index,
                                         "k": ns.k})
    model, tok_cfg, _ = _load_tokenizer(ns.checkpoint)
    image = _one_image(ns, tok_cfg)
    codec = C.build_codec(tok_cfg)
    k = ns.k if ns.k is not None else model.k_max
    codes = model.tokenize(codec.encode(image), k)
    out_path = run_dir / "tokens.bin"
    with open(out_path, "wb") as fh:
        fsq.write_token_stream(codes, fh)
    print(f"{k} tokens: {codes.tolist()}")
    print(f"token stream: {out_path}")
    return 0


def _cmd_detokenize(ns) -> int:
    cfg = _config_from(ns)
    run_dir = _run_dir(cfg, "detokenize", {"checkpoint": ns.checkpoint,
                                           "tokens": ns.tokens})
    model, tok_cfg, _ = _load_tokenizer(ns.checkpoint)
    with open(ns.tokens, "rb") as fh:
        codes = fsq.read_token_stream(fh)
    generator = torch.Generator().manual_seed(
        ev.eval_seed(cfg.seed, codes.numel(), 0))
    latents = model.decode_tokens(codes, steps=cfg.sampler.steps,
                                  guidance=C.build_guidance(cfg),
                                  generator=generator)
    image = C.build_codec(tok_cfg).decode(latents)
    out_path = run_dir / "decoded.png"
    save_image(out_path, image)
    print(f"decoded image: {out_path}")
    return 0


def _cmd_generate(ns) -> int:
    from .ar import GenerationRequest, generate
    cfg = _config_from(ns)
    run_dir = _run_dir(cfg, "generate", {"checkpoint": ns.checkpoint,
                                         "class": ns.class_id, "k": ns.k})
    model, _, _ = _load_ar(ns.checkpoint)
    scale = cfg.sampler.scale if cfg.sampler.guidance != "none" else 1.0
    req = GenerationRequest(class_id=ns.class_id, k_tokens=ns.k,
                            top_k=cfg.sampler.top_k,
                            temperature=cfg.sampler.temperature,
                            cfg_scale=scale, seed=cfg.seed)
    codes = generate(model, req)
    out_path = run_dir / "tokens.bin"
    with open(out_path, "wb") as fh:
        fsq.write_token_stream(codes, fh)
    print(f"{ns.k} tokens for class {ns.class_id}: {codes.tolist()}")
    print(f"token stream: {out_path}")
    return 0


def _cmd_reconstruct(ns) -> int:
    cfg = _config_from(ns)
    run_dir = _run_dir(cfg, "reconstruct", {"checkpoint": ns.checkpoint,
                                            "image": ns.image,
                                            "index": ns.index, "k": ns.k})
    model, tok_cfg, _ = _load_tokenizer(ns.checkpoint)
    image = _one_image(ns, tok_cfg)
    codec = C.build_codec(tok_cfg)
    k = ns.k if ns.k is not None else model.k_max
    out, metrics = ev.reconstruct(image, k, model, codec,
                                  steps=cfg.sampler.steps,
                                  guidance=C.build_guidance(cfg),
                                  oracle=_eval_oracle(tok_cfg, model),
                                  seed=cfg.seed, index=0)
    save_image(run_dir / "original.png", image)
    save_image(run_dir / "recon.png", out)
    (run_dir / "metrics.json").write_text(json.dumps(metrics, indent=2) + "\n")
    print(f"k={k}: " + ", ".join(f"{m}={v:.4f}" for m, v in metrics.items()))
    print(f"outputs: {run_dir}")
    return 0


# ------------------------------------------------------------- sweeps

def _sweep_common(ns):
    cfg = _config_from(ns)
    model, tok_cfg, _ = _load_tokenizer(ns.checkpoint)
    images, labels = C.load_dataset(cfg)
    codec = C.build_codec(tok_cfg)
    return cfg, model, tok_cfg, images, labels, codec


def _cmd_sweep_rd(ns) -> int:
    cfg, model, tok_cfg, images, _, codec = _sweep_common(ns)
    run_dir = _run_dir(cfg, "sweep-rd", {"checkpoint": ns.checkpoint,
                                          "ks": ns.ks})
    ks = _int_list(ns.ks) if ns.ks is not None else None
    rows, failures = ev.rate_distortion_sweep(
        images, model, codec, ks=ks, steps=cfg.sampler.steps,
        guidance=C.build_guidance(cfg), oracle=_eval_oracle(tok_cfg, model),
        seed=cfg.seed)
    ev.write_csv(run_dir / "rd.csv", rows)
    report = ev.monotonicity_report(rows)
    ev.write_summary(run_dir / "summary.json", cfg.to_dict(), cfg.seed,
                     extra={"failures": [list(f) for f in failures],
                            "monotonicity": report})
    for row in rows:
        print(f"k={row.k_tokens:4d}  mae={row.mae:.4f}  psnr={row.psnr:.2f}")
    for k, msg in failures:
        print(f"row k={k} failed: {msg}", file=sys.stderr)
    for line in report:
        print(f"note: {line}")
    print(f"outputs: {run_dir}")
    return 0


def _cmd_sweep_guidance(ns) -> int:
    cfg, model, tok_cfg, images, _, codec = _sweep_common(ns)
    run_dir = _run_dir(cfg, "sweep-guidance", {"checkpoint": ns.checkpoint,
                                                "scales": ns.scales, "k": ns.k})
    mode = cfg.sampler.guidance if cfg.sampler.guidance != "none" else "apg"
    rows = ev.guidance_sweep(images, model, codec, _float_list(ns.scales),
                             mode=mode, k=ns.k, steps=cfg.sampler.steps,
                             oracle=_eval_oracle(tok_cfg, model), seed=cfg.seed,
                             apg_r=cfg.sampler.apg_r, apg_eta=cfg.sampler.apg_eta,
                             apg_beta=cfg.sampler.apg_beta)
    ev.write_csv(run_dir / "guidance.csv", rows)
    violations = sum(r.bound_violations for r in rows)
    ev.write_summary(run_dir / "summary.json", cfg.to_dict(), cfg.seed,
                     extra={"bound_violations": violations})
    for row in rows:
        print(f"scale={row.scale:<5g}  mae={row.mae:.4f}  psnr={row.psnr:.2f}  "
              f"violations={row.bound_violations}")
    print(f"outputs: {run_dir}")
    return 0


def _cmd_sweep_steps(ns) -> int:
    cfg, model, tok_cfg, images, _, codec = _sweep_common(ns)
    run_dir = _run_dir(cfg, "sweep-steps", {"checkpoint": ns.checkpoint,
                                             "steps_list": ns.steps_list,
                                             "k": ns.k})
    rows = ev.steps_sweep(images, model, codec, _int_list(ns.steps_list),
                          k=ns.k, guidance=C.build_guidance(cfg),
                          oracle=_eval_oracle(tok_cfg, model), seed=cfg.seed)
    ev.write_csv(run_dir / "steps.csv", rows)
    ev.write_summary(run_dir / "summary.json", cfg.to_dict(), cfg.seed,
                     extra={"n_rows": len(rows)})
    for row in rows:
        print(f"steps={row.steps:3d}  mae={row.mae:.4f}  psnr={row.psnr:.2f}")
    print(f"outputs: {run_dir}")
    return 0


def _cmd_probe(ns) -> int:
    cfg, model, tok_cfg, images, labels, codec = _sweep_common(ns)
    run_dir = _run_dir(cfg, "probe", {"checkpoint": ns.checkpoint,
                                       "ks": ns.ks})
    latents = codec.encode(images)
    ks = _int_list(ns.ks) if ns.ks is not None else None
    pairs = ev.probe_sweep(model, latents, labels, ks=ks, seed=cfg.seed)
    with open(run_dir / "probe.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["k_tokens", "accuracy"])
        w.writerows(pairs)
    ev.write_summary(run_dir / "summary.json", cfg.to_dict(), cfg.seed,
                     extra={"accuracies": {str(k): acc for k, acc in pairs}})
    for k, acc in pairs:
        print(f"k={k:4d}  accuracy={acc:.4f}")
    print(f"outputs: {run_dir}")
    return 0


# ------------------------------------------------------------- parser

def build_parser() -> _Parser:
    parser = _Parser(prog="ordtok", description=__doc__,
                     formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", metavar="COMMAND",
                              parser_class=_Parser)

    def command(name, fn, help_text):
        p = sub.add_parser(name, help=help_text)
        _add_config_flags(p)
        p.set_defaults(func=fn)
        return p

    p = command("train-tokenizer", _cmd_train_tokenizer, "stage 1 training")
    p.add_argument("--resume", metavar="CKPT", default=None)
    p.add_argument("--stop-after", type=int, default=None, metavar="N",
                   help="checkpoint and exit after N steps")

    p = command("train-ar", _cmd_train_ar, "stage 2 training on frozen tokens")
    p.add_argument("--tokenizer", metavar="CKPT", required=True)
    p.add_argument("--resume", metavar="CKPT", default=None)
    p.add_argument("--stop-after", type=int, default=None, metavar="N")

    p = command("tokenize", _cmd_tokenize, "image -> token stream file")
    p.add_argument("--checkpoint", metavar="CKPT", required=True)
    p.add_argument("--image", metavar="FILE", default=None)
    p.add_argument("--index", type=int, default=0,
                   help="dataset image index when --image is not given")
    p.add_argument("--k", type=int, default=None)

    p = command("detokenize", _cmd_detokenize, "token stream file -> image")
    p.add_argument("--checkpoint", metavar="CKPT", required=True)
    p.add_argument("--tokens", metavar="FILE", required=True)

    p = command("generate", _cmd_generate, "sample a token sequence from the prior")
    p.add_argument("--checkpoint", metavar="CKPT", required=True)
    p.add_argument("--class", dest="class_id", type=int, default=None)
    p.add_argument("--k", type=int, required=True)

    p = command("reconstruct", _cmd_reconstruct, "round-trip one image through k tokens")
    p.add_argument("--checkpoint", metavar="CKPT", required=True)
    p.add_argument("--image", metavar="FILE", default=None)
    p.add_argument("--index", type=int, default=0)
    p.add_argument("--k", type=int, default=None)

    p = command("sweep-rd", _cmd_sweep_rd, "rate-distortion table over token counts")
    p.add_argument("--checkpoint", metavar="CKPT", required=True)
    p.add_argument("--ks", metavar="LIST", default=None,
                   help="comma-separated token counts; default powers of two")

    p = command("sweep-guidance", _cmd_sweep_guidance, "metrics per guidance scale")
    p.add_argument("--checkpoint", metavar="CKPT", required=True)
    p.add_argument("--scales", metavar="LIST", default="1,2.5,5,7.5,10")
    p.add_argument("--k", type=int, default=None)

    p = command("sweep-steps", _cmd_sweep_steps, "metrics per integration step count")
    p.add_argument("--checkpoint", metavar="CKPT", required=True)
    p.add_argument("--steps-list", metavar="LIST", default="1,2,4,8,16,25")
    p.add_argument("--k", type=int, default=None)

    p = command("probe", _cmd_probe, "linear probe accuracy per token count")
    p.add_argument("--checkpoint", metavar="CKPT", required=True)
    p.add_argument("--ks", metavar="LIST", default=None)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        ns = parser.parse_args(argv)
    except UsageError as exc:
        print(str(exc), file=sys.stderr)
        print("run 'ordtok --help' for usage", file=sys.stderr)
        return 1
    if getattr(ns, "func", None) is None:
        parser.print_help()
        return 1
    try:
        return ns.func(ns)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        missing = getattr(exc, "filename", None) or exc
        print(f"error: file not found: {missing}", file=sys.stderr)
        return 2
    except (CheckpointError, NumericError, RuntimeError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
