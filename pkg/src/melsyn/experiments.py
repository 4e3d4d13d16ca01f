"""Orchestration: two-stage training, evaluation, ablation sweeps, and the
gradient-verification suite.

Everything here is driven by one run-config document and a corpus
manifest; every produced artifact embeds the config hash and seed.
"""

from __future__ import annotations

import csv
import io
import json
import os
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, no_grad
from .checkpoint import (load_image_model, load_music_model, save_image_model,
                         save_music_model)
from .codecs import Spectrogram, TextEmbedder
from .config import (codec_config_from, config_hash, image_denoiser_config,
                     load_config, music_denoiser_config, placement_from, schedule_from)
from .corpus import TripletRecord, load_manifest, split_records
from .denoiser import init_denoiser, predict_noise
from .engine import (Pipeline, SamplerConfig, cfg_predict, generate,
                     inversion_round_trip_error, sampling_grid)
from .melt import read_melt, write_melt
from .metrics import (ToyClassifier, ToyEmbedders, cosine_matrix, frechet_distance,
                      image_features, imsm, itc_loss, label_kl, normalize_rows,
                      text_features, toy_extractor, toy_extractor_fd)
from .numerics import GradCheckReport, finite_diff_check
from .rng import Rng
from .schedules import forward_sample
from .synapse import SynapseParams
from .training import (AdamW, ImageFeatureCache, MusicTrainState, TrainConfig,
                       diffusion_loss, eval_denoising_loss, iterate_epoch,
                       make_optimizer, train_image_model)

# Tiny geometry pinned by the gradient-suite contract:
# music latent 4x4x4, d_k 4, 2 text tokens, T 10.
TINY_OVERRIDES: dict = {
    "schedule": {"T": 10},
    "codecs": {"e_slots": 8, "f_slots": 8, "window": 16, "hop": 8, "r": 2, "image_size": 8},
    "denoiser": {"widths": [4, 4, 4], "d_k": 4, "d_c": 8, "t_emb_width": 8,
                 "text_tokens": 2, "norm_groups": 2},
    "sampler": {"steps": 10},
}

# Desk-scale budget for the directional modality experiment. The terminal
# signal fraction is pushed near zero (gamma_bar_T ~ 0.04) so late steps are
# genuinely noise-dominated and conditioning carries weight; latent scales
# bring the compressed spectrogram and image latents to unit variance.
EXPERIMENT_OVERRIDES: dict = {
    "schedule": {"T": 15, "beta_start": 0.02, "beta_end": 0.35},
    "codecs": {"e_slots": 32, "f_slots": 32, "window": 64, "hop": 32, "r": 4,
               "image_size": 16, "music_latent_scale": 1.57, "image_latent_scale": 2.5},
    "denoiser": {"widths": [8, 12, 16], "d_k": 8, "d_c": 12, "t_emb_width": 12,
                 "text_tokens": 6, "norm_groups": 4},
    "training": {"epochs": 4, "batch_size": 8, "lr_theta": 5e-3, "lr_alpha": 2e-2,
                 "p_drop": 0.0, "image_epochs": 4, "image_lr": 5e-3},
    "sampler": {"steps": 15},
    "corpus": {"n_items": 1500, "genres": 15},
}


def max_workers() -> int:
    cap = os.environ.get("MELSYN_THREADS")
    n = os.cpu_count() or 1
    if cap:
        n = min(n, max(1, int(cap)))
    return n


def train_config_from(cfg: dict) -> TrainConfig:
    t = cfg["training"]
    return TrainConfig(
        epochs=t["epochs"], batch_size=t["batch_size"], lr_theta=t["lr_theta"],
        lr_alpha=t["lr_alpha"], p_drop=t["p_drop"], seed=t["seed"],
        checkpoint_every=t["checkpoint_every"], weight_decay=t["weight_decay"],
        max_grad_norm=t["max_grad_norm"], image_epochs=t["image_epochs"],
        image_lr=t["image_lr"],
    )


def make_embedder(cfg: dict) -> TextEmbedder:
    return TextEmbedder(d_c=cfg["denoiser"]["d_c"], tokens=cfg["denoiser"]["text_tokens"],
                        vocab_hash_size=cfg["codecs"]["text_hash_size"],
                        seed=cfg["codecs"]["text_seed"])


def build_gates(cfg: dict) -> SynapseParams | None:
    s = cfg["synapse"]
    if not s["enabled"]:
        return None
    placement = placement_from(cfg)
    n = cfg["denoiser"]["n_blocks"]
    layers = placement.coupled_layers(n, n)
    if s["fixed_alpha"] is not None:
        alpha = float(s["fixed_alpha"])
        if alpha <= 0.0:
            raw = -30.0
        elif alpha >= 1.0:
            raw = 30.0
        else:
            raw = float(np.log(alpha / (1.0 - alpha)))
        return SynapseParams(layers, per_block=s["per_block"], init_raw=raw, trainable=False)
    return SynapseParams(layers, per_block=s["per_block"], init_raw=s["init_raw"])


# -- stage 1: image model ---------------------------------------------------------


def run_train_image(cfg: dict, manifest_path: str | Path, out_ckpt: str | Path) -> dict:
    records = load_manifest(manifest_path)
    splits = split_records(records)
    sched = schedule_from(cfg)
    codec = codec_config_from(cfg).make_codec()
    codec_cfg = codec_config_from(cfg)
    model = init_denoiser(image_denoiser_config(cfg), Rng(cfg["denoiser"]["init_seed"]).split(1))
    tc = train_config_from(cfg)
    losses = train_image_model(model, splits["train"], sched, codec_cfg, codec,
                               Path(manifest_path).parent, tc)
    save_image_model(out_ckpt, cfg, model, extra={"epoch_losses": losses})
    return {"epoch_losses": losses, "checkpoint": str(out_ckpt),
            "config_hash": config_hash(cfg), "seed": tc.seed}


# -- image feature cache -----------------------------------------------------------

_WORKER: dict = {}


def _cache_one(idx: int) -> str:
    rec = _WORKER["records"][idx]
    cache: ImageFeatureCache = _WORKER["cache"]
    if not cache.has(rec.id):
        cache.build_item(rec, _WORKER["model"], _WORKER["sched"], _WORKER["codec_cfg"],
                         _WORKER["codec"], _WORKER["root"])
    return rec.id


def build_feature_cache(
    cfg: dict,
    records: list[TripletRecord],
    image_model,
    manifest_path: str | Path,
    cache_dir: str | Path,
) -> ImageFeatureCache:
    """Precompute donated K/V features for every record (idempotent)."""
    placement = placement_from(cfg)
    n = cfg["denoiser"]["n_blocks"]
    layers = placement.coupled_layers(n, n)
    cache = ImageFeatureCache(cache_dir, layers, cfg["denoiser"]["text_tokens"])
    todo = [i for i, rec in enumerate(records) if not cache.has(rec.id)]
    if not todo:
        return cache
    sched = schedule_from(cfg)
    codec_cfg = codec_config_from(cfg)
    root = Path(manifest_path).parent
    _WORKER.update(records=records, cache=cache, model=image_model, sched=sched,
                   codec_cfg=codec_cfg, codec=codec_cfg.make_codec(), root=root)
    workers = min(max_workers(), len(todo))
    if workers > 1:
        import multiprocessing

        ctx = multiprocessing.get_context("fork")
        with ctx.Pool(workers) as pool:
            pool.map(_cache_one, todo, chunksize=8)
    else:
        for i in todo:
            _cache_one(i)
    _WORKER.clear()
    return cache


# -- stage 2: music model -----------------------------------------------------------


def build_music_state(
    cfg: dict,
    manifest_path: str | Path,
    image_ckpt: str | Path | None,
    cache_dir: str | Path | None = None,
) -> tuple[MusicTrainState, dict[str, list[TripletRecord]]]:
    records = load_manifest(manifest_path)
    splits = split_records(records)
    sched = schedule_from(cfg)
    codec_cfg = codec_config_from(cfg)
    codec = codec_cfg.make_codec()
    music = init_denoiser(music_denoiser_config(cfg), Rng(cfg["denoiser"]["init_seed"]).split(0))
    gates = build_gates(cfg)
    use_image = bool(cfg["training"]["use_image"]) and gates is not None
    image = None
    cache = None
    if use_image:
        if image_ckpt is None:
            raise ValueError("synapse training requires an image checkpoint")
        _, image = load_image_model(image_ckpt)
        cdir = Path(cache_dir) if cache_dir else Path(manifest_path).parent / (
            "feature_cache_" + config_hash(cfg))
        cache = build_feature_cache(cfg, records, image, manifest_path, cdir)
    else:
        gates = None
    tc = train_config_from(cfg)
    optimizer = make_optimizer(music, gates, tc)
    state = MusicTrainState(
        train_cfg=tc, sched=sched, music=music, gates=gates, image=image,
        optimizer=optimizer, codec=codec, codec_cfg=codec_cfg,
        embedder=make_embedder(cfg), cache=cache, asset_root=Path(manifest_path).parent,
        use_text=bool(cfg["training"]["use_text"]), use_image=use_image,
    )
    return state, splits


def run_train_music(
    cfg: dict,
    manifest_path: str | Path,
    image_ckpt: str | Path | None,
    out_ckpt: str | Path,
    log_path: str | Path | None = None,
) -> dict:
    state, splits = build_music_state(cfg, manifest_path, image_ckpt,
                                      cfg["training"]["cache_dir"])
    rng = Rng(state.train_cfg.seed).split(17)
    log_lines: list[str] = []
    epoch_losses = []
    for _ in range(state.train_cfg.epochs):
        records = iterate_epoch(state, splits["train"], rng, log_lines)
        epoch_losses.append(float(np.mean([r.loss for r in records])))
    val_loss = eval_denoising_loss(state, splits["val"]) if splits["val"] else float("nan")
    progress = {"epoch": state.epoch, "step": state.step}
    save_music_model(out_ckpt, cfg, state.music, state.gates,
                     optimizer_state=state.optimizer.state_arrays(),
                     train_progress=progress)
    if log_path is not None:
        Path(log_path).write_text("\n".join(log_lines) + "\n")
    return {
        "epoch_losses": epoch_losses,
        "val_loss": val_loss,
        "alphas": state.gates.alphas() if state.gates is not None else {},
        "checkpoint": str(out_ckpt),
        "config_hash": config_hash(cfg),
        "seed": state.train_cfg.seed,
        "image_ckpt": str(image_ckpt) if image_ckpt else None,
    }


# -- modality experiment --------------------------------------------------------------


def modality_experiment(
    cfg: dict,
    manifest_path: str | Path,
    image_ckpt: str | Path,
    eval_split: str = "val",
) -> dict:
    """Equal-budget text-only / image-only / both runs with a shared eval.

    Held-out loss uses frozen per-item corruption draws, so the three arms
    are compared on identical noise.
    """
    arms = {
        "text_only": {"use_text": True, "use_image": False},
        "image_only": {"use_text": False, "use_image": True},
        "both": {"use_text": True, "use_image": True},
    }
    results = {}
    for arm, flags in arms.items():
        arm_cfg = json.loads(json.dumps(cfg))
        arm_cfg["training"].update(flags)
        state, splits = build_music_state(arm_cfg, manifest_path,
                                          image_ckpt if flags["use_image"] else None,
                                          cfg["training"]["cache_dir"])
        rng = Rng(state.train_cfg.seed).split(17)
        for _ in range(state.train_cfg.epochs):
            iterate_epoch(state, splits["train"], rng)
        held = eval_denoising_loss(state, splits[eval_split])
        results[arm] = {
            "held_out_loss": held,
            "alphas": state.gates.alphas() if state.gates is not None else {},
        }
    results["config_hash"] = config_hash(cfg)
    results["seed"] = cfg["training"]["seed"]
    return results


# -- evaluation --------------------------------------------------------------------


def _spectrogram_from_melt(path: Path, codec_cfg) -> Spectrogram:
    return Spectrogram(values=read_melt(path), sample_rate=codec_cfg.sample_rate,
                       window=codec_cfg.window, hop=codec_cfg.hop)


def fit_metric_models(cfg: dict, train_recs: list[TripletRecord], root: Path,
                      codec_cfg) -> tuple[ToyClassifier, ToyEmbedders]:
    m = cfg["metrics"]
    feats = np.stack([toy_extractor(read_melt(root / r.spectrogram_path)) for r in train_recs])
    labels = np.array([r.genre - 1 for r in train_recs])
    clf = ToyClassifier(cfg["corpus"]["genres"], Rng(m["seed"]).split(5))
    clf.fit(feats, labels, steps=m["train_steps"])
    img = np.stack([image_features(read_melt(root / r.image_path)) for r in train_recs])
    txt = np.stack([text_features(r.caption) for r in train_recs])
    emb = ToyEmbedders(m["embed_dim"], Rng(m["seed"]).split(6), tau=m["itc_tau"])
    emb.fit(img, txt, feats, steps=m["train_steps"], seed=m["seed"])
    return clf, emb


def run_eval(
    cfg: dict,
    music_ckpt: str | Path,
    manifest_path: str | Path,
    out_json: str | Path,
    image_ckpt: str | Path | None = None,
) -> dict:
    """Generate for the test split and report FAD / FD / KL / IMSM."""
    pipeline = _pipeline_for(music_ckpt, image_ckpt)
    records = load_manifest(manifest_path)
    splits = split_records(records)
    root = Path(manifest_path).parent
    codec_cfg = pipeline.codec_cfg
    cap = cfg["metrics"]["eval_items"]
    test = splits["test"][:cap] if cap else splits["test"]
    if len(test) < 2:
        raise ValueError("need at least 2 test items to evaluate")

    sampler = SamplerConfig(steps=sampling_grid(pipeline.sched.T, cfg["sampler"]["steps"]),
                            w_cfg=cfg["sampler"]["guidance"])
    gen_specs = []
    for idx, rec in enumerate(test):
        image = read_melt(root / rec.image_path)
        spec, _, _ = generate(pipeline, image, rec.caption, sampler,
                              Rng(cfg["metrics"]["seed"]).split(1000 + idx))
        gen_specs.append(spec)

    real_specs = [_spectrogram_from_melt(root / r.spectrogram_path, codec_cfg) for r in test]
    real_a = np.stack([toy_extractor(s) for s in real_specs])
    gen_a = np.stack([toy_extractor(s) for s in gen_specs])
    real_b = np.stack([toy_extractor_fd(s) for s in real_specs])
    gen_b = np.stack([toy_extractor_fd(s) for s in gen_specs])

    clf, emb = fit_metric_models(cfg, splits["train"], root, codec_cfg)
    kl = label_kl(clf.predict_proba(real_a), clf.predict_proba(gen_a))

    img_feats = np.stack([image_features(read_melt(root / r.image_path)) for r in test])
    txt_feats = np.stack([text_features(r.caption) for r in test])
    a_clip = cosine_matrix(emb.embed_images(img_feats), emb.embed_texts(txt_feats))
    a_clap = cosine_matrix(emb.embed_music(gen_a), emb.embed_texts(txt_feats))
    imsm_matrix, imsm_score = imsm(a_clip, a_clap, cfg["metrics"]["imsm_sharpness"])

    report = {
        "fad": frechet_distance(real_a, gen_a),
        "fd": frechet_distance(real_b, gen_b),
        "kl": kl,
        "imsm_score": imsm_score,
        "n_items": len(test),
        "config_hash": config_hash(cfg),
        "seed": cfg["metrics"]["seed"],
    }
    out_json = Path(out_json)
    out_json.write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    write_melt(out_json.with_suffix(".imsm.melt"), imsm_matrix.astype(np.float64))
    return report


def _pipeline_for(music_ckpt: str | Path, image_ckpt: str | Path | None) -> Pipeline:
    from .checkpoint import load_pipeline

    if image_ckpt is None:
        header, _ = _read_header(music_ckpt)
        recorded = header.get("image_ckpt")
        if recorded and Path(recorded).exists():
            image_ckpt = recorded
    return load_pipeline(music_ckpt, image_ckpt)


def _read_header(path: str | Path) -> tuple[dict, None]:
    from .checkpoint import load_checkpoint

    header, _ = load_checkpoint(path)
    return header, None


# -- ablation sweeps -----------------------------------------------------------------

ABLATION_AXES = ("alpha-placement", "alpha-shared", "alpha-lr", "fixed-alpha",
                 "steps", "guidance", "modality")


def _csv_bytes(fieldnames: list[str], rows: list[dict]) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=fieldnames)
    writer.writeheader()
    for row in rows:
        writer.writerow(row)
    return buf.getvalue()


def ablate(
    axis: str,
    cfg: dict,
    manifest_path: str | Path,
    image_ckpt: str | Path | None,
    out_csv: str | Path,
    music_ckpt: str | Path | None = None,
) -> list[dict]:
    """One CSV row per setting of the requested axis."""
    if axis not in ABLATION_AXES:
        raise ValueError(f"unknown ablation axis {axis!r}; have {ABLATION_AXES}")
    chash = config_hash(cfg)
    seed = cfg["training"]["seed"]
    rows: list[dict] = []

    def train_arm(arm_cfg: dict) -> dict:
        state, splits = build_music_state(arm_cfg, manifest_path,
                                          image_ckpt if arm_cfg["training"]["use_image"]
                                          and arm_cfg["synapse"]["enabled"] else None,
                                          cfg["training"]["cache_dir"])
        rng = Rng(state.train_cfg.seed).split(17)
        for _ in range(state.train_cfg.epochs):
            iterate_epoch(state, splits["train"], rng)
        held = eval_denoising_loss(state, splits["val"] or splits["train"])
        alphas = state.gates.alphas() if state.gates is not None else {}
        return {"held_out_loss": held, "alphas": json.dumps(alphas, sort_keys=True)}

    def override(**sections) -> dict:
        arm = json.loads(json.dumps(cfg))
        for section, kv in sections.items():
            arm[section].update(kv)
        return arm

    if axis == "alpha-placement":
        for enc, dec in ((True, False), (False, True), (True, True)):
            for per_block in (True, False):
                arm = override(synapse={"couple_encoder": enc, "couple_decoder": dec,
                                        "per_block": per_block})
                res = train_arm(arm)
                rows.append({"encoder": enc, "decoder": dec, "per_block": per_block,
                             **res, "config_hash": chash, "seed": seed})
        fields = ["encoder", "decoder", "per_block", "held_out_loss", "alphas",
                  "config_hash", "seed"]
    elif axis == "alpha-shared":
        for per_block in (True, False):
            res = train_arm(override(synapse={"per_block": per_block}))
            rows.append({"per_block": per_block, **res, "config_hash": chash, "seed": seed})
        fields = ["per_block", "held_out_loss", "alphas", "config_hash", "seed"]
    elif axis == "alpha-lr":
        for lr in (0.5e-6, 1e-6, 1e-5, 0.5e-4):
            res = train_arm(override(training={"lr_alpha": lr}))
            rows.append({"lr_alpha": lr, **res, "config_hash": chash, "seed": seed})
        fields = ["lr_alpha", "held_out_loss", "alphas", "config_hash", "seed"]
    elif axis == "fixed-alpha":
        for fixed in (0.0, 0.1, 0.5, 0.9, 1.0, None):
            res = train_arm(override(synapse={"fixed_alpha": fixed}))
            rows.append({"fixed_alpha": "learnable" if fixed is None else fixed,
                         **res, "config_hash": chash, "seed": seed})
        fields = ["fixed_alpha", "held_out_loss", "alphas", "config_hash", "seed"]
    elif axis == "modality":
        res = modality_experiment(cfg, manifest_path, image_ckpt)
        for arm in ("text_only", "image_only", "both"):
            rows.append({"arm": arm, "held_out_loss": res[arm]["held_out_loss"],
                         "alphas": json.dumps(res[arm]["alphas"], sort_keys=True),
                         "config_hash": chash, "seed": seed})
        fields = ["arm", "held_out_loss", "alphas", "config_hash", "seed"]
    elif axis in ("steps", "guidance"):
        if music_ckpt is None:
            raise ValueError(f"ablation axis {axis!r} needs a trained music checkpoint")
        pipeline = _pipeline_for(music_ckpt, image_ckpt)
        records = load_manifest(manifest_path)
        splits = split_records(records)
        cap = cfg["metrics"]["eval_items"] or 4
        test = splits["test"][:cap]
        root = Path(manifest_path).parent
        real = np.stack([toy_extractor(read_melt(root / r.spectrogram_path)) for r in test])

        def sweep_row(n_steps: int, guidance: float) -> dict:
            sampler = SamplerConfig(steps=sampling_grid(pipeline.sched.T, n_steps),
                                    w_cfg=guidance)
            gen = []
            for idx, rec in enumerate(test):
                image = read_melt(root / rec.image_path)
                spec, _, _ = generate(pipeline, image, rec.caption, sampler,
                                      Rng(cfg["metrics"]["seed"]).split(2000 + idx))
                gen.append(toy_extractor(spec))
            return {"fad": frechet_distance(real, np.stack(gen))}

        if axis == "steps":
            T = pipeline.sched.T
            for n_steps in sorted({max(1, T // 8), max(1, T // 4), max(1, T // 2), T}):
                rows.append({"steps": n_steps, **sweep_row(n_steps, cfg["sampler"]["guidance"]),
                             "config_hash": chash, "seed": seed})
            fields = ["steps", "fad", "config_hash", "seed"]
        else:
            residuals = _cfg_identity_residuals(pipeline)
            for w in (0.0, 1.0, 2.0, 7.0, 20.0):
                row = {"guidance": w, **sweep_row(cfg["sampler"]["steps"], w),
                       "cfg_identity_residual": residuals.get(w, ""),
                       "config_hash": chash, "seed": seed}
                rows.append(row)
            fields = ["guidance", "fad", "cfg_identity_residual", "config_hash", "seed"]

    Path(out_csv).write_text(_csv_bytes(fields, rows))
    return rows


def _cfg_identity_residuals(pipeline: Pipeline) -> dict[float, float]:
    """Max |cfg(w) - reference| for the exact identities w=0 and w=1."""
    cfg_m = pipeline.music.config
    rng = Rng(424)
    z = Tensor(rng.split(0).normal((cfg_m.latent_channels, *cfg_m.grid)))
    c = Tensor(rng.split(1).normal((cfg_m.text_tokens, cfg_m.d_c)))
    t = pipeline.sched.T
    with no_grad():
        eps_c, _ = predict_noise(pipeline.music, z, c, t)
        eps_u, _ = predict_noise(pipeline.music, z, None, t)
        r0 = float(np.abs(cfg_predict(pipeline.music, z, c, t, 0.0).data - eps_u.data).max())
        r1 = float(np.abs(cfg_predict(pipeline.music, z, c, t, 1.0).data - eps_c.data).max())
    return {0.0: r0, 1.0: r1}


# -- gradient suite -------------------------------------------------------------------


def grad_check_suite(cfg: dict | None = None, epsilon: float = 5e-5) -> list[GradCheckReport]:
    """FD-verify the full gated training loss, a bare attention op, and the
    contrastive loss, on the pinned tiny geometry, in float64.

    The music model's zero-initialized output head is randomized first:
    at the exact zero-init point it blocks every upstream gradient, which
    would make the check vacuous.
    """
    cfg = cfg or load_config(overrides=TINY_OVERRIDES)
    mcfg = music_denoiser_config(cfg)
    icfg = image_denoiser_config(cfg)
    music = init_denoiser(mcfg, Rng(31).split(0), dtype=np.float64)
    image = init_denoiser(icfg, Rng(31).split(1), dtype=np.float64)
    head_rng = Rng(31).split(2)
    music.tensors["conv_out.w"].data = head_rng.normal(
        music.tensors["conv_out.w"].shape, np.float64) * 0.3
    image.tensors["conv_out.w"].data = Rng(31).split(3).normal(
        image.tensors["conv_out.w"].shape, np.float64) * 0.3
    image.freeze()

    gates = build_gates(cfg)
    layers = gates.layers
    sched = schedule_from(cfg)
    data_rng = Rng(32)
    z1 = data_rng.split(0).normal((mcfg.latent_channels, *mcfg.grid), np.float64)
    eps_true = data_rng.split(1).normal(z1.shape, np.float64)
    t = max(1, sched.T // 2)
    z_t = forward_sample(sched, z1, t, eps_true)
    c_data = data_rng.split(2).normal((mcfg.text_tokens, mcfg.d_c), np.float64)

    z_img = Tensor(data_rng.split(3).normal((icfg.latent_channels, *icfg.grid), np.float64))
    with no_grad():
        _, taps = predict_noise(image, z_img, None, t)
    from .attention import KVFeatures
    from .engine import collect_injection

    injected = {
        lid: KVFeatures(k=Tensor(kv.k.data), v=Tensor(kv.v.data), layer_id=lid, timestep=t)
        for lid, kv in collect_injection(taps, layers, mcfg.text_tokens, t).items()
    }

    named: dict[str, np.ndarray] = {f"theta.{n}": p.data for n, p in music.tensors.items()}
    named.update({n: p.data for n, p in gates.tensors().items()})

    from .denoiser import DenoiserParams

    def train_loss(p: dict[str, Tensor]) -> Tensor:
        mp = DenoiserParams(mcfg, {n[len("theta."):]: v for n, v in p.items()
                                   if n.startswith("theta.")})
        g = SynapseParams(layers, per_block=gates.per_block, dtype=np.float64)
        for i, lid in enumerate(g.layers if g.per_block else ["shared"]):
            key = f"synapse.raw.{lid}" if g.per_block else "synapse.raw.shared"
            g.raw[i] = p[key]
        eps_hat, _ = predict_noise(mp, Tensor(z_t.data), Tensor(c_data), t,
                                   injected=injected, gates=g)
        return diffusion_loss(Tensor(eps_true), eps_hat)

    reports = finite_diff_check(train_loss, named, epsilon=epsilon)

    # bare attention op
    att_rng = Rng(33)
    attn_named = {
        "q": att_rng.split(0).normal((5, cfg["denoiser"]["d_k"]), np.float64),
        "k": att_rng.split(1).normal((3, cfg["denoiser"]["d_k"]), np.float64),
        "v": att_rng.split(2).normal((3, cfg["denoiser"]["d_k"]), np.float64),
    }

    def attend_loss(p: dict[str, Tensor]) -> Tensor:
        from .attention import attend

        return ad.tmean(ad.square(attend(p["q"], p["k"], p["v"])))

    reports += [GradCheckReport(f"attend.{r.name}", r.analytic, r.numeric, r.max_rel_error)
                for r in finite_diff_check(attend_loss, attn_named, epsilon=epsilon)]

    # contrastive loss over raw (pre-normalization) embeddings
    itc_named = {
        "z_img": Rng(34).split(0).normal((4, 6), np.float64),
        "z_txt": Rng(34).split(1).normal((4, 6), np.float64),
    }

    def itc_probe(p: dict[str, Tensor]) -> Tensor:
        return itc_loss(normalize_rows(p["z_img"]), normalize_rows(p["z_txt"]), tau=0.5)

    reports += [GradCheckReport(f"itc.{r.name}", r.analytic, r.numeric, r.max_rel_error)
                for r in finite_diff_check(itc_probe, itc_named, epsilon=epsilon)]
    return reports


def inversion_sweep(image_model, sched, z_clean: np.ndarray,
                    step_counts=(10, 25, 50, 100)) -> dict[int, float]:
    """Round-trip inversion error of a trained model at several grid sizes."""
    out = {}
    for n in step_counts:
        grid = sampling_grid(sched.T, n)
        out[n] = inversion_round_trip_error(image_model, sched, z_clean, grid)
    return out
