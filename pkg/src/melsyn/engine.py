"""Deterministic DDIM sampling, DDIM inversion, classifier-free guidance,
and the lockstep dual-branch generation loop.

Step convention follows :mod:`melsyn.schedules`: step 0 is the clean
latent. A sampling grid is a strictly increasing subsequence of 1..T whose
last entry is T; sampling walks it downward (ending at 0), inversion walks
it upward starting from the clean latent.

Inversion is first order: each sub-step evaluates the model at the current
latent, using the timestep of the matching sampling sub-step, so a model
whose prediction does not depend on the latent retraces exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor, no_grad
from .attention import KVFeatures
from .codecs import (CodecConfig, PatchCodec, Spectrogram, TextEmbedder, griffin_lim,
                     image_to_latent, latent_to_spectrogram)
from .denoiser import DenoiserParams, predict_noise
from .rng import Rng
from .schedules import NoiseSchedule
from .synapse import SynapseParams, resample_tokens


@dataclass(frozen=True)
class SamplerConfig:
    steps: tuple[int, ...]
    w_cfg: float = 7.0
    eta: float = 0.0  # deterministic DDIM only

    def __post_init__(self):
        steps = tuple(int(s) for s in self.steps)
        if not steps or any(b <= a for a, b in zip(steps, steps[1:])):
            raise ValueError(f"steps must be strictly increasing, got {steps}")
        if steps[0] < 1:
            raise ValueError("steps must start at 1 or later")
        if self.w_cfg < 0:
            raise ValueError(f"guidance weight must be >= 0, got {self.w_cfg}")
        if self.eta != 0.0:
            raise ValueError("only eta = 0 (deterministic DDIM) is supported")
        object.__setattr__(self, "steps", steps)


def sampling_grid(T: int, n_steps: int) -> tuple[int, ...]:
    """n evenly spaced steps in 1..T, always ending at T."""
    if n_steps < 1 or n_steps > T:
        raise ValueError(f"need 1 <= n_steps <= T, got {n_steps} of {T}")
    grid = np.unique(np.round(np.linspace(T / n_steps, T, n_steps)).astype(int))
    grid = grid[grid >= 1]
    if grid[-1] != T:
        grid = np.append(grid, T)
    return tuple(int(t) for t in grid)


@dataclass
class DualState:
    z_music: np.ndarray
    z_image: np.ndarray | None
    t: int


def _as_data(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x)


def _jump(sched: NoiseSchedule, eps_hat: np.ndarray, z: np.ndarray, t_from: int, t_to: int) -> np.ndarray:
    """Shared DDIM update between two arbitrary grid points."""
    g_from = sched.gamma_bar_at(t_from)
    g_to = sched.gamma_bar_at(t_to)
    z1_hat = (z - np.sqrt(1.0 - g_from) * eps_hat) / np.sqrt(g_from)
    return np.sqrt(g_to) * z1_hat + np.sqrt(1.0 - g_to) * eps_hat


def ddim_step(sched: NoiseSchedule, eps_hat, z_t, t: int, t_prev: int) -> np.ndarray:
    """One deterministic denoising step from t down to t_prev (0 = clean)."""
    if not 0 <= t_prev <= t:
        raise ValueError(f"need t >= t_prev >= 0, got t={t}, t_prev={t_prev}")
    if t < 1:
        raise ValueError(f"need t >= 1, got {t}")
    e = _as_data(eps_hat)
    z = _as_data(z_t)
    if e.shape != z.shape:
        raise ValueError(f"eps shape {e.shape} != latent shape {z.shape}")
    return _jump(sched, e, z, t, t_prev)


def ddim_invert(
    model: DenoiserParams,
    sched: NoiseSchedule,
    z_clean,
    steps: tuple[int, ...],
) -> np.ndarray:
    """Map a clean latent to the terminal noisy latent along ``steps``.

    The conditioning is always the unconditional pathway (the image branch
    is inverted with the empty prompt).
    """
    return ddim_invert_trajectory(model, sched, z_clean, steps)[steps[-1]]


def ddim_invert_trajectory(
    model: DenoiserParams,
    sched: NoiseSchedule,
    z_clean,
    steps: tuple[int, ...],
) -> dict[int, np.ndarray]:
    """Inversion latents at every grid step, keyed by step (plus step 0)."""
    z = _as_data(z_clean).astype(np.float32, copy=True)
    out = {0: z.copy()}
    t_prev = 0
    with no_grad():
        for t in steps:
            eps, _ = predict_noise(model, Tensor(z), None, t)
            z = _jump(sched, eps.data, z, t_prev, t)
            out[t] = z.copy()
            t_prev = t
    return out


def reverse_trajectory(
    model: DenoiserParams,
    sched: NoiseSchedule,
    z_terminal,
    steps: tuple[int, ...],
) -> dict[int, np.ndarray]:
    """Unguided DDIM latents visited from the terminal step down, keyed by step."""
    z = _as_data(z_terminal).astype(np.float32, copy=True)
    out: dict[int, np.ndarray] = {}
    grid = list(steps)
    with no_grad():
        for i in range(len(grid) - 1, -1, -1):
            t = grid[i]
            t_prev = grid[i - 1] if i > 0 else 0
            out[t] = z.copy()
            eps, _ = predict_noise(model, Tensor(z), None, t)
            z = _jump(sched, eps.data, z, t, t_prev)
    out[0] = z.copy()
    return out


def cfg_predict(
    model: DenoiserParams,
    z: Tensor,
    c: Tensor | None,
    t: int,
    w_cfg: float,
    injected: dict[str, KVFeatures] | None = None,
    gates: SynapseParams | None = None,
) -> Tensor:
    """eps_uncond + w * (eps_cond - eps_uncond).

    w = 1 returns the conditional prediction bitwise; w = 0 the
    unconditional one. The unconditional pathway uses the learned null
    conditioning and no injected features.
    """
    if w_cfg < 0:
        raise ValueError(f"guidance weight must be >= 0, got {w_cfg}")
    if w_cfg == 1.0:
        eps, _ = predict_noise(model, z, c, t, injected, gates)
        return eps
    eps_u, _ = predict_noise(model, z, None, t)
    if w_cfg == 0.0:
        return eps_u
    eps_c, _ = predict_noise(model, z, c, t, injected, gates)
    return eps_u + Tensor(np.asarray(w_cfg, dtype=eps_u.dtype)) * (eps_c - eps_u)


def collect_injection(
    taps: dict[str, KVFeatures],
    layers: list[str],
    target_tokens: int,
    timestep: int,
) -> dict[str, KVFeatures]:
    """Resample tapped self-attention K/V to the conditioning length."""
    out = {}
    for lid in layers:
        kv = taps[lid]
        out[lid] = KVFeatures(
            k=resample_tokens(kv.k, target_tokens),
            v=resample_tokens(kv.v, target_tokens),
            layer_id=lid,
            timestep=timestep,
        )
    return out


@dataclass
class Pipeline:
    """Everything needed to turn (image, caption, seed) into audio."""

    music: DenoiserParams
    image: DenoiserParams | None
    gates: SynapseParams | None
    sched: NoiseSchedule
    codec_cfg: CodecConfig
    codec: PatchCodec
    embedder: TextEmbedder
    run_config: dict = field(default_factory=dict)

    @property
    def synapse_active(self) -> bool:
        return self.gates is not None and not self.gates.bypass and self.image is not None


def generate(
    pipeline: Pipeline,
    image: np.ndarray | None,
    caption: str,
    sampler: SamplerConfig,
    rng: Rng,
) -> tuple[Spectrogram, np.ndarray, dict]:
    """Run the dual-branch sampling loop and vocode the result.

    The image branch advances by plain unguided DDIM in lockstep with the
    guided music branch; its self-attention features are resampled and
    injected into the music decoder's cross-attention each step. With the
    synapse bypassed (or absent) the image branch is skipped entirely,
    which is the exact alpha -> 0 limit.
    """
    cfg_m = pipeline.music.config
    steps = sampler.steps
    if steps[-1] != pipeline.sched.T:
        raise ValueError(f"sampling grid must end at T={pipeline.sched.T}, got {steps[-1]}")
    c = pipeline.embedder.embed(caption)

    use_image = pipeline.synapse_active and image is not None
    z_image = None
    if use_image:
        z_img_clean = image_to_latent(pipeline.codec_cfg, pipeline.codec, image)
        z_image = ddim_invert(pipeline.image, pipeline.sched, z_img_clean, steps)

    z_music = rng.split(0).normal(
        (cfg_m.latent_channels, cfg_m.grid[0], cfg_m.grid[1]), dtype=np.float32
    )

    gate_layers = pipeline.gates.layers if use_image else []
    with no_grad():
        for i in range(len(steps) - 1, -1, -1):
            t = steps[i]
            t_prev = steps[i - 1] if i > 0 else 0
            injected = None
            eps_image = None
            if use_image:
                eps_image, taps = predict_noise(pipeline.image, Tensor(z_image), None, t)
                injected = collect_injection(taps, gate_layers, cfg_m.text_tokens, t)
            eps_music = cfg_predict(
                pipeline.music, Tensor(z_music), c, t, sampler.w_cfg,
                injected, pipeline.gates if use_image else None,
            )
            z_music = _jump(pipeline.sched, eps_music.data, z_music, t, t_prev)
            if use_image:
                z_image = _jump(pipeline.sched, eps_image.data, z_image, t, t_prev)

    spec = latent_to_spectrogram(pipeline.codec_cfg, pipeline.codec, z_music)
    waveform = griffin_lim(spec, iterations=60)
    info = {
        "seed": rng.seed,
        "steps": list(steps),
        "guidance": sampler.w_cfg,
        "alphas": pipeline.gates.alphas() if pipeline.gates is not None else {},
        "synapse_active": bool(use_image),
    }
    return spec, waveform, info


def inversion_round_trip_error(
    model: DenoiserParams,
    sched: NoiseSchedule,
    z_clean: np.ndarray,
    steps: tuple[int, ...],
) -> float:
    """Relative L2 error of invert-then-sample against the clean latent."""
    z_t = ddim_invert(model, sched, z_clean, steps)
    z = z_t
    with no_grad():
        for i in range(len(steps) - 1, -1, -1):
            t = steps[i]
            t_prev = steps[i - 1] if i > 0 else 0
            eps, _ = predict_noise(model, Tensor(z), None, t)
            z = _jump(sched, eps.data, z, t, t_prev)
    ref = np.linalg.norm(z_clean)
    return float(np.linalg.norm(z - z_clean) / max(ref, 1e-12))
