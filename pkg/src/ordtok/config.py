"""Run configuration: defaults table, file/override parsing, model builders.

The config is a nested key tree with a fixed vocabulary; files are JSON and
CLI overrides use dotted paths (train.peak_lr=2e-4). Unknown keys fail with
the nearest valid key named. A handful of values default to null and get
resolved per stage (peak_lr, betas, weight_decay, cond_dropout), because
the two training stages inherit different optimizer tables.

Defaults anyone can override, with their sources:
  schedule.kind pow2, flow.noise_s 0.25, model.levels [8,8,8,5,5,5],
  train.clip_norm 1.0, train.ema_decay 0.998, warmup floor 1e-6, final lr
  ratio 0.01, stage-1 betas (0.9, 0.99) with timescale-derived weight
  decay, stage-2 betas (0.9, 0.95) with weight decay 0.05 and peak lr
  0.768 / width, sampler 25 steps with projected guidance at scale 7.5.
"""

from __future__ import annotations

import copy
import difflib
import json
import os
from dataclasses import dataclass
from pathlib import Path

from .errors import ValidationError

DEFAULTS: dict = {
    "stage": "tokenizer",
    "seed": 0,
    "deterministic": True,
    "out_dir": None,
    "model": {
        "enc_depth": 4,
        "dec_depth": 4,
        "ar_depth": 4,
        "enc_width": None,
        "dec_width": None,
        "ar_width": None,
        "k_max": 64,
        "levels": [8, 8, 8, 5, 5, 5],
        "patch_size": 2,
        "num_classes": 12,
    },
    "schedule": {
        "kind": "pow2",
        "fixed_k": None,
        "per_batch": False,
    },
    "flow": {
        "noise_s": 0.25,
    },
    "repa": {
        "enabled": True,
        "weight": 1.0,
        "feature_dim": 64,
        "oracle": "proj",
        "oracle_seed": 0,
        "path": None,
        "layer": 1,
    },
    "train": {
        "steps": 2000,
        "warmup_steps": 100,
        "batch_size": 8,
        "peak_lr": None,
        "betas": None,
        "weight_decay": None,
        "clip_norm": 1.0,
        "ema_decay": 0.998,
        "warmup_floor": 1e-6,
        "final_ratio": 0.01,
        "cond_dropout": None,
        "log_every": 100,
    },
    "dataset": {
        "kind": "synth",
        "n": 16,
        "size": 32,
        "path": None,
        "hflip": False,
        "codec": "identity",
        "codec_factor": 2,
    },
    "sampler": {
        "steps": 25,
        "guidance": "apg",
        "scale": 7.5,
        "apg_r": 2.5,
        "apg_eta": 0.0,
        "apg_beta": -0.5,
        "top_k": 0,
        "temperature": 1.0,
    },
}

# stage-resolved values for keys whose default is null
_STAGE_FILL = {
    "tokenizer": {"train.betas": [0.9, 0.99], "train.cond_dropout": 0.2},
    "ar": {"train.betas": [0.9, 0.95], "train.cond_dropout": 0.1,
           "train.weight_decay": 0.05},
}
_STAGE1_PEAK_LR = 5.62e-4
_AR_LR_NUMERATOR = 0.768


def flatten(tree: dict, prefix: str = "") -> dict:
    out = {}
    for key, value in tree.items():
        path = f"{prefix}{key}"
        if isinstance(value, dict):
            out.update(flatten(value, path + "."))
        else:
            out[path] = value
    return out


_VALID_KEYS = sorted(flatten(DEFAULTS))


def _unknown_key(path: str) -> ValidationError:
    near = difflib.get_close_matches(path, _VALID_KEYS, n=1)
    hint = f"; closest match: {near[0]}" if near else ""
    return ValidationError(f"unknown config key {path!r}{hint}")


def _set_path(tree: dict, path: str, value):
    if path not in _VALID_KEYS:
        raise _unknown_key(path)
    node = tree
    parts = path.split(".")
    for part in parts[:-1]:
        node = node[part]
    node[parts[-1]] = value


def _merge_file(tree: dict, data: dict, prefix: str = ""):
    if not isinstance(data, dict):
        raise ValidationError("config file must hold a key-value tree")
    for key, value in data.items():
        path = f"{prefix}{key}"
        if isinstance(value, dict):
            if path in _VALID_KEYS:
                raise _unknown_key(path)  # scalar key given a subtree
            _merge_file(tree, value, path + ".")
        else:
            _set_path(tree, path, value)


def coerce_value(text: str):
    """CLI override values: JSON when it parses, bare string otherwise."""
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def parse_config(path=None, overrides=None) -> "RunConfig":
    """Defaults, then the file, then dotted overrides, last writer wins."""
    tree = copy.deepcopy(DEFAULTS)
    if path is not None:
        text = Path(path).read_text()
        if text.strip():
            try:
                data = json.loads(text)
            except json.JSONDecodeError as exc:
                raise ValidationError(f"config file {path} is not valid JSON: {exc}")
            _merge_file(tree, data)
    if overrides:
        items = overrides.items() if isinstance(overrides, dict) else None
        if items is None:
            pairs = []
            for entry in overrides:
                if "=" not in entry:
                    raise ValidationError(f"override {entry!r} is not key=value")
                key, _, value = entry.partition("=")
                pairs.append((key.strip(), coerce_value(value.strip())))
            items = pairs
        for key, value in items:
            _set_path(tree, key, value)
    return RunConfig(tree)


def _require(cond: bool, msg: str):
    if not cond:
        raise ValidationError(msg)


class _Group:
    """Attribute view over one level of the config tree."""

    def __init__(self, mapping: dict):
        self.__dict__.update(mapping)


@dataclass(frozen=True, eq=False)
class RunConfig:
    """Validated view over a full config tree.

    Groups are attributes (cfg.train.peak_lr); to_dict() returns the tree
    with stage-dependent nulls resolved to the values actually used.
    """

    tree: dict

    def __post_init__(self):
        self._validate()

    def __eq__(self, other):
        return isinstance(other, RunConfig) and self.tree == other.tree

    def __getattr__(self, name):
        tree = object.__getattribute__(self, "tree")
        if name in tree:
            value = tree[name]
            return _Group(value) if isinstance(value, dict) else value
        raise AttributeError(name)

    def _validate(self):
        t = self.tree
        _require(t["stage"] in ("tokenizer", "ar"),
                 f"stage must be tokenizer or ar, got {t['stage']!r}")
        m = t["model"]
        for role in ("enc", "dec", "ar"):
            depth = m[f"{role}_depth"]
            width = m[f"{role}_width"]
            _require(depth >= 1, f"model.{role}_depth must be positive")
            if width is not None and width != 64 * depth:
                raise ValidationError(
                    f"model.{role}_width={width} conflicts with "
                    f"model.{role}_depth={depth} (width must be 64*depth = {64 * depth})")
        _require(m["k_max"] >= 1, "model.k_max must be positive")
        _require(m["patch_size"] >= 1, "model.patch_size must be positive")
        _require(m["num_classes"] >= 1, "model.num_classes must be positive")
        levels = m["levels"]
        _require(isinstance(levels, list) and len(levels) > 0
                 and all(isinstance(x, int) and x >= 2 for x in levels),
                 "model.levels must be a list of integers >= 2")
        sched = t["schedule"]
        _require(sched["kind"] in ("uniform", "pow2", "unifpow2", "fixed"),
                 f"schedule.kind {sched['kind']!r} not one of uniform, pow2, unifpow2, fixed")
        if sched["kind"] == "fixed":
            if sched["fixed_k"] is None:
                raise ValidationError(
                    "schedule.kind=fixed requires schedule.fixed_k to be set")
            if not 1 <= sched["fixed_k"] <= m["k_max"]:
                raise ValidationError(
                    f"schedule.fixed_k={sched['fixed_k']} outside model.k_max={m['k_max']}")
        tr = t["train"]
        _require(tr["steps"] >= 1, "train.steps must be positive")
        if tr["warmup_steps"] > tr["steps"]:
            raise ValidationError(
                f"train.warmup_steps={tr['warmup_steps']} exceeds train.steps={tr['steps']}")
        _require(tr["batch_size"] >= 1, "train.batch_size must be positive")
        ds = t["dataset"]
        _require(ds["kind"] in ("synth", "folder"),
                 f"dataset.kind {ds['kind']!r} not one of synth, folder")
        if ds["kind"] == "folder" and ds["path"] is None:
            raise ValidationError("dataset.kind=folder requires dataset.path to be set")
        _require(ds["codec"] in ("identity", "trained_ae"),
                 f"dataset.codec {ds['codec']!r} not one of identity, trained_ae")
        if ds["size"] % ds["codec_factor"]:
            raise ValidationError(
                f"dataset.size={ds['size']} not divisible by dataset.codec_factor={ds['codec_factor']}")
        rp = t["repa"]
        _require(rp["oracle"] in ("proj", "file"),
                 f"repa.oracle {rp['oracle']!r} not one of proj, file")
        if rp["enabled"] and rp["oracle"] == "file" and rp["path"] is None:
            raise ValidationError("repa.oracle=file requires repa.path to be set")
        sp = t["sampler"]
        _require(sp["guidance"] in ("none", "cfg", "apg"),
                 f"sampler.guidance {sp['guidance']!r} not one of none, cfg, apg")
        _require(sp["steps"] >= 1, "sampler.steps must be positive")

    # -------------------------------------------------- resolved values

    @property
    def enc_width(self) -> int:
        return 64 * self.tree["model"]["enc_depth"]

    @property
    def dec_width(self) -> int:
        return 64 * self.tree["model"]["dec_depth"]

    @property
    def ar_width(self) -> int:
        return 64 * self.tree["model"]["ar_depth"]

    @property
    def peak_lr(self) -> float:
        lr = self.tree["train"]["peak_lr"]
        if lr is not None:
            return lr
        if self.tree["stage"] == "ar":
            return _AR_LR_NUMERATOR / self.ar_width
        return _STAGE1_PEAK_LR

    def _stage_value(self, key: str):
        explicit = self.tree["train"][key.split(".")[1]]
        if explicit is not None:
            return explicit
        return _STAGE_FILL[self.tree["stage"]].get(key)

    @property
    def betas(self) -> tuple[float, float]:
        return tuple(self._stage_value("train.betas"))

    @property
    def weight_decay(self):
        # tokenizer stage leaves None: the harness derives it from the
        # averaging-timescale rule
        return self._stage_value("train.weight_decay")

    @property
    def cond_dropout(self) -> float:
        return self._stage_value("train.cond_dropout")

    def to_dict(self) -> dict:
        out = copy.deepcopy(self.tree)
        out["model"]["enc_width"] = self.enc_width
        out["model"]["dec_width"] = self.dec_width
        out["model"]["ar_width"] = self.ar_width
        out["train"]["peak_lr"] = self.peak_lr
        out["train"]["betas"] = list(self.betas)
        out["train"]["weight_decay"] = self.weight_decay
        out["train"]["cond_dropout"] = self.cond_dropout
        return out


def out_root(cfg: RunConfig) -> Path:
    """Output root: config out_dir, else ORDTOK_OUT, else ./runs."""
    if cfg.tree["out_dir"] is not None:
        return Path(cfg.tree["out_dir"])
    return Path(os.environ.get("ORDTOK_OUT", "runs"))


def echo_config(cfg: RunConfig, run_dir) -> Path:
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    path = run_dir / "config.json"
    path.write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
    return path


# ------------------------------------------------------------- builders
# These are the only place config keys meet constructors, so the CLI and
# tests build identical objects from the same tree.

def build_levels(cfg: RunConfig):
    from .fsq import FsqLevels
    return FsqLevels(tuple(cfg.tree["model"]["levels"]))


def build_schedule(cfg: RunConfig):
    from .schedule import DropoutSchedule
    s = cfg.tree["schedule"]
    return DropoutSchedule(s["kind"], cfg.tree["model"]["k_max"],
                           fixed_k=s["fixed_k"])


def build_codec(cfg: RunConfig):
    from .codec import ConvAE, IdentityPatch, TrainedAE
    ds = cfg.tree["dataset"]
    if ds["codec"] == "identity":
        return IdentityPatch(ds["codec_factor"])
    return TrainedAE(ConvAE(factor=ds["codec_factor"]))


def build_tokenizer(cfg: RunConfig):
    from .encoder import EncoderConfig
    from .tokenizer import TokenizerModel
    m = cfg.tree["model"]
    ds = cfg.tree["dataset"]
    codec = build_codec(cfg)
    side = ds["size"] // ds["codec_factor"]
    enc_cfg = EncoderConfig(depth=m["enc_depth"], k_max=m["k_max"],
                            patch_size=m["patch_size"])
    feature_dim = cfg.tree["repa"]["feature_dim"] if cfg.tree["repa"]["enabled"] else None
    return TokenizerModel(codec.channels(), side, side, enc_cfg,
                          dec_depth=m["dec_depth"], dec_dim=cfg.dec_width,
                          levels=build_levels(cfg), feature_dim=feature_dim,
                          repa_layer=cfg.tree["repa"]["layer"])


def build_ar(cfg: RunConfig):
    from .ar import ArConfig, ARModel
    m = cfg.tree["model"]
    ar_cfg = ArConfig(depth=m["ar_depth"], k_max=m["k_max"],
                      num_classes=m["num_classes"],
                      vocab=build_levels(cfg).vocab_size,
                      cond_dropout=cfg.cond_dropout)
    return ARModel(ar_cfg)


def build_guidance(cfg: RunConfig):
    from .flow import GuidanceParams
    s = cfg.tree["sampler"]
    return GuidanceParams(mode=s["guidance"], scale=s["scale"], apg_r=s["apg_r"],
                          apg_eta=s["apg_eta"], apg_beta=s["apg_beta"])


def build_optim(cfg: RunConfig, tokens_per_step: int):
    from .train import OptimSettings
    tr = cfg.tree["train"]
    return OptimSettings.for_steps(
        cfg.peak_lr, tr["warmup_steps"], tr["steps"],
        tokens_per_step=tokens_per_step, betas=cfg.betas,
        weight_decay=cfg.weight_decay, clip_norm=tr["clip_norm"],
        ema_decay=tr["ema_decay"], warmup_floor=tr["warmup_floor"],
        final_ratio=tr["final_ratio"])


def load_dataset(cfg: RunConfig):
    from .data import load_folder, synth_dataset
    ds = cfg.tree["dataset"]
    if ds["kind"] == "synth":
        return synth_dataset(ds["n"], seed=cfg.tree["seed"], size=ds["size"])
    return load_folder(ds["path"], size=ds["size"])


def build_repa_oracle(cfg: RunConfig, grid_side: int):
    from .repa import FrozenRandomProjection, PrecomputedFeatures
    rp = cfg.tree["repa"]
    if not rp["enabled"]:
        return None
    if rp["oracle"] == "proj":
        return FrozenRandomProjection(rp["feature_dim"], grid_side,
                                      seed=rp["oracle_seed"])
    return PrecomputedFeatures(rp["path"])
