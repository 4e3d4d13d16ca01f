"""Run configuration: one JSON document, every key defaulted.

Unknown keys are rejected with the offending dotted path. The canonical
hash of the merged document is stamped into every artifact so outputs can
be traced back to their exact configuration.
"""

from __future__ import annotations

import copy
import hashlib
import json
from pathlib import Path

from .codecs import CodecConfig
from .denoiser import DenoiserConfig
from .schedules import NoiseSchedule, make_schedule
from .synapse import SynapsePlacement

DEFAULT_CONFIG: dict = {
    "schedule": {
        "kind": "linear",
        "T": 100,
        "beta_start": 1e-4,
        "beta_end": 0.02,
    },
    "codecs": {
        "e_slots": 64,
        "f_slots": 64,
        "window": 128,
        "hop": 64,
        "r": 4,
        "sample_rate": 16000,
        "codec_seed": 2024,
        "image_size": 64,
        "text_hash_size": 4096,
        "text_seed": 515,
        "log_compress": True,
        "music_latent_scale": 1.0,
        "image_latent_scale": 1.0,
    },
    "denoiser": {
        "widths": [16, 24, 32],
        "n_blocks": 3,
        "d_k": 16,
        "d_c": 16,
        "t_emb_width": 16,
        "text_tokens": 8,
        "norm_groups": 4,
        "init_seed": 100,
    },
    "synapse": {
        "enabled": True,
        "couple_encoder": False,
        "couple_decoder": True,
        "per_block": True,
        "init_raw": 0.0,
        "fixed_alpha": None,   # float freezes every gate at that value
    },
    "training": {
        "epochs": 4,
        "batch_size": 8,
        "lr_theta": 1e-4,
        "lr_alpha": 1e-5,
        "p_drop": 0.10,
        "seed": 0,
        "checkpoint_every": 1,
        "weight_decay": 0.01,
        "max_grad_norm": 10.0,
        "image_epochs": 4,
        "image_lr": 1e-3,
        "use_text": True,
        "use_image": True,
        "cache_dir": None,
    },
    "sampler": {
        "steps": 100,
        "guidance": 7.0,
        "eta": 0.0,
    },
    "corpus": {
        "n_items": 1500,
        "genres": 15,
        "split_fracs": [0.6, 0.2, 0.2],
        "seed": 7,
        "keep_waveform": True,
        "tempo_low": 2.0,
        "tempo_high": 6.0,
    },
    "metrics": {
        "imsm_sharpness": 10.0,
        "itc_tau": 0.2,
        "embed_dim": 16,
        "train_steps": 300,
        "seed": 0,
        "eval_items": None,    # cap on generated items during eval; None = all test
    },
}


class ConfigError(ValueError):
    pass


def _merge(defaults: dict, override: dict, path: str = "") -> dict:
    out = copy.deepcopy(defaults)
    for key, value in override.items():
        dotted = f"{path}.{key}" if path else key
        if key not in defaults:
            raise ConfigError(f"unknown config key: {dotted}")
        if isinstance(defaults[key], dict) and defaults[key]:
            if not isinstance(value, dict):
                raise ConfigError(f"config key {dotted} must be a section object")
            out[key] = _merge(defaults[key], value, dotted)
        else:
            out[key] = value
    return out


def load_config(path: str | Path | None = None, overrides: dict | None = None) -> dict:
    """Merge a JSON config file (and/or direct overrides) into the defaults."""
    merged = copy.deepcopy(DEFAULT_CONFIG)
    if path is not None:
        raw = json.loads(Path(path).read_text())
        if not isinstance(raw, dict):
            raise ConfigError("config file must hold a JSON object")
        merged = _merge(merged, raw)
    if overrides:
        merged = _merge(merged, overrides)
    validate_config(merged)
    return merged


def validate_config(cfg: dict) -> None:
    sch = cfg["schedule"]
    if sch["T"] < 1:
        raise ConfigError("schedule.T must be >= 1")
    if not 0 < sch["beta_start"] <= sch["beta_end"] < 1:
        raise ConfigError("schedule betas must satisfy 0 < start <= end < 1")
    fr = cfg["corpus"]["split_fracs"]
    if len(fr) != 3 or abs(sum(fr) - 1.0) > 1e-9:
        raise ConfigError("corpus.split_fracs must be three fractions summing to 1")
    if not cfg["synapse"]["couple_encoder"] and not cfg["synapse"]["couple_decoder"]:
        if cfg["synapse"]["enabled"]:
            raise ConfigError("synapse.enabled requires coupling encoder, decoder, or both")
    if cfg["sampler"]["guidance"] < 0:
        raise ConfigError("sampler.guidance must be >= 0")
    if cfg["sampler"]["steps"] < 1 or cfg["sampler"]["steps"] > sch["T"]:
        raise ConfigError("sampler.steps must be in 1..schedule.T")


def config_hash(cfg: dict) -> str:
    canonical = json.dumps(cfg, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()[:16]


# -- derived objects -----------------------------------------------------------


def schedule_from(cfg: dict) -> NoiseSchedule:
    s = cfg["schedule"]
    return make_schedule(s["kind"], s["T"], s["beta_start"], s["beta_end"])


def codec_config_from(cfg: dict) -> CodecConfig:
    c = cfg["codecs"]
    return CodecConfig(e_slots=c["e_slots"], f_slots=c["f_slots"], window=c["window"],
                       hop=c["hop"], r=c["r"], sample_rate=c["sample_rate"],
                       codec_seed=c["codec_seed"], log_compress=c["log_compress"],
                       music_latent_scale=c["music_latent_scale"],
                       image_latent_scale=c["image_latent_scale"])


def music_denoiser_config(cfg: dict) -> DenoiserConfig:
    cc = codec_config_from(cfg)
    d = cfg["denoiser"]
    ch, h, w = cc.latent_shape
    return DenoiserConfig(
        latent_channels=ch, grid=(h, w), widths=tuple(d["widths"]), n_blocks=d["n_blocks"],
        d_k=d["d_k"], d_c=d["d_c"], t_emb_width=d["t_emb_width"],
        text_tokens=d["text_tokens"], norm_groups=d["norm_groups"],
    )


def image_denoiser_config(cfg: dict) -> DenoiserConfig:
    c = cfg["codecs"]
    d = cfg["denoiser"]
    r = c["r"]
    if c["image_size"] % r:
        raise ConfigError(f"codecs.image_size must be divisible by r={r}")
    grid = c["image_size"] // r
    return DenoiserConfig(
        latent_channels=3 * r * r, grid=(grid, grid), widths=tuple(d["widths"]),
        n_blocks=d["n_blocks"], d_k=d["d_k"], d_c=d["d_c"],
        t_emb_width=d["t_emb_width"], text_tokens=d["text_tokens"],
        norm_groups=d["norm_groups"],
    )


def placement_from(cfg: dict) -> SynapsePlacement:
    s = cfg["synapse"]
    return SynapsePlacement(couple_encoder=s["couple_encoder"],
                            couple_decoder=s["couple_decoder"],
                            per_block=s["per_block"])
