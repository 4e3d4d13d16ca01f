"""End-to-end optimization of the music model and its synapse gates.

Two stages: ``train_image_model`` fits a text-free denoiser on corpus
images (then frozen, standing in for a pretrained backbone), and
``train_music_model`` runs the gated training loop: per item, corrupt the
music latent to a uniformly drawn step, look up the frozen image branch's
self-attention features at that step (precomputed along its DDIM
trajectory and cached to disk), inject them through the gates, and take
one AdamW step on the noise-prediction MSE with split learning rates for
model weights and gate scalars.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, no_grad
from .attention import KVFeatures
from .codecs import (CodecConfig, PatchCodec, TextEmbedder, image_to_latent,
                     music_to_latent)
from .denoiser import DenoiserConfig, DenoiserParams, predict_noise
from .engine import _jump, collect_injection, ddim_invert_trajectory
from .melt import read_melt, write_melt
from .rng import Rng
from .schedules import NoiseSchedule, forward_sample
from .synapse import SynapseParams
from .corpus import TripletRecord


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 4
    batch_size: int = 8
    lr_theta: float = 1e-4
    lr_alpha: float = 1e-5      # gate learning rate; sweep axis of the lr ablation
    p_drop: float = 0.10        # text-conditioning dropout for guidance training
    seed: int = 0
    checkpoint_every: int = 1
    weight_decay: float = 0.01
    max_grad_norm: float = 10.0
    image_epochs: int = 4
    image_lr: float = 1e-3

    def __post_init__(self):
        if not 0.0 <= self.p_drop <= 1.0:
            raise ValueError(f"p_drop must be in [0, 1], got {self.p_drop}")
        if self.lr_theta <= 0 or self.lr_alpha <= 0:
            raise ValueError("learning rates must be positive")


@dataclass
class TrainStepRecord:
    epoch: int
    step: int
    loss: float
    alphas: dict[str, float]
    grad_norms: dict[str, float]

    def __post_init__(self):
        if not np.isfinite(self.loss):
            raise FloatingPointError(f"non-finite training loss at step {self.step}")

    def to_json(self) -> str:
        return json.dumps({
            "epoch": self.epoch, "step": self.step, "loss": self.loss,
            "alphas": self.alphas, "grad_norms": self.grad_norms,
        }, sort_keys=True)


def diffusion_loss(eps_true: Tensor, eps_pred: Tensor) -> Tensor:
    """Mean squared error over all elements (mean reduction)."""
    if eps_true.shape != eps_pred.shape:
        raise ValueError(f"shape mismatch: {eps_true.shape} vs {eps_pred.shape}")
    return ad.tmean(ad.square(eps_pred - eps_true))


def adamw_update(
    param: np.ndarray,
    grad: np.ndarray,
    moments: tuple[np.ndarray, np.ndarray, int],
    lr: float,
    betas: tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
    weight_decay: float = 0.0,
) -> tuple[np.ndarray, tuple[np.ndarray, np.ndarray, int]]:
    """One decoupled-weight-decay Adam step; returns (param, moments)."""
    m, v, step = moments
    b1, b2 = betas
    step += 1
    m = b1 * m + (1 - b1) * grad
    v = b2 * v + (1 - b2) * grad * grad
    m_hat = m / (1 - b1 ** step)
    v_hat = v / (1 - b2 ** step)
    new_param = param - lr * m_hat / (np.sqrt(v_hat) + eps) - lr * weight_decay * param
    return new_param.astype(param.dtype), (m, v, step)


class AdamW:
    """AdamW over named tensors with per-group learning rates.

    Normalization gains and gate raws carry no weight decay.
    """

    NO_DECAY_SUFFIXES = ("norm.g", "_norm.g")

    def __init__(self, groups: list[dict]):
        # each group: {"name": str, "params": {name: Tensor}, "lr": float,
        #             "weight_decay": float}
        self.groups = groups
        self.moments: dict[str, tuple[np.ndarray, np.ndarray, int]] = {}

    def _decay_for(self, group: dict, name: str) -> float:
        if name.startswith("synapse.raw") or name.endswith(self.NO_DECAY_SUFFIXES):
            return 0.0
        return group.get("weight_decay", 0.0)

    def grad_norm(self, group: dict) -> float:
        total = 0.0
        for t in group["params"].values():
            if t.grad is not None:
                total += float((t.grad.astype(np.float64) ** 2).sum())
        return float(np.sqrt(total))

    def clip_global_norm(self, max_norm: float | None) -> float:
        norms = [self.grad_norm(g) for g in self.groups]
        total = float(np.sqrt(sum(n * n for n in norms)))
        if max_norm is not None and total > max_norm > 0:
            scale = max_norm / total
            for g in self.groups:
                for t in g["params"].values():
                    if t.grad is not None:
                        t.grad *= scale
        return total

    def step(self) -> None:
        for group in self.groups:
            for name, tensor in group["params"].items():
                if tensor.grad is None:
                    continue
                mom = self.moments.get(name)
                if mom is None:
                    mom = (np.zeros_like(tensor.data, dtype=np.float64),
                           np.zeros_like(tensor.data, dtype=np.float64), 0)
                new_data, mom = adamw_update(
                    tensor.data.astype(np.float64), tensor.grad.astype(np.float64), mom,
                    lr=group["lr"], weight_decay=self._decay_for(group, name),
                )
                tensor.data = new_data.astype(tensor.data.dtype)
                self.moments[name] = mom

    def zero_grad(self) -> None:
        for group in self.groups:
            for tensor in group["params"].values():
                tensor.grad = None

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for name, (m, v, step) in self.moments.items():
            out[f"optim.m.{name}"] = m
            out[f"optim.v.{name}"] = v
            out[f"optim.step.{name}"] = np.asarray(float(step))
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        names = {k[len("optim.m."):] for k in arrays if k.startswith("optim.m.")}
        for name in names:
            self.moments[name] = (
                arrays[f"optim.m.{name}"].astype(np.float64),
                arrays[f"optim.v.{name}"].astype(np.float64),
                int(arrays[f"optim.step.{name}"]),
            )


class ImageFeatureCache:
    """Per-item disk cache of the frozen image branch's donated features.

    For each corpus item, the image latent is DDIM-inverted once over the
    full step grid and walked back down; the self-attention K/V tapped at
    every step are resampled to the conditioning length and stored as one
    MELT tensor of shape (T, n_layers, 2, tokens, d_k).
    """

    def __init__(self, cache_dir: str | Path, layers: list[str], tokens: int):
        self.dir = Path(cache_dir)
        self.dir.mkdir(parents=True, exist_ok=True)
        self.layers = list(layers)
        self.tokens = tokens
        self._memo: dict[str, np.ndarray] = {}

    def path_for(self, item_id: str) -> Path:
        return self.dir / f"{item_id}.melt"

    def has(self, item_id: str) -> bool:
        return self.path_for(item_id).exists()

    def build_item(
        self,
        record: TripletRecord,
        image_model: DenoiserParams,
        sched: NoiseSchedule,
        codec_cfg: CodecConfig,
        codec: PatchCodec,
        asset_root: Path,
    ) -> None:
        image = read_melt(asset_root / record.image_path)
        z_clean = image_to_latent(codec_cfg, codec, image)
        steps = tuple(range(1, sched.T + 1))
        traj = ddim_invert_trajectory(image_model, sched, z_clean, steps)
        z = traj[sched.T]
        d_k = image_model.config.d_k
        out = np.zeros((sched.T, len(self.layers), 2, self.tokens, d_k), dtype=np.float32)
        with no_grad():
            for i in range(sched.T, 0, -1):
                eps, taps = predict_noise(image_model, Tensor(z), None, i)
                inj = collect_injection(taps, self.layers, self.tokens, i)
                for li, lid in enumerate(self.layers):
                    out[i - 1, li, 0] = inj[lid].k.data
                    out[i - 1, li, 1] = inj[lid].v.data
                z = _jump(sched, eps.data, z, i, i - 1)
        write_melt(self.path_for(record.id), out)

    def load(self, item_id: str, t: int) -> dict[str, KVFeatures]:
        arr = self._memo.get(item_id)
        if arr is None:
            arr = read_melt(self.path_for(item_id))
            self._memo[item_id] = arr
        return {
            lid: KVFeatures(k=Tensor(arr[t - 1, li, 0]), v=Tensor(arr[t - 1, li, 1]),
                            layer_id=lid, timestep=t)
            for li, lid in enumerate(self.layers)
        }


@dataclass
class MusicTrainState:
    train_cfg: TrainConfig
    sched: NoiseSchedule
    music: DenoiserParams
    gates: SynapseParams | None
    image: DenoiserParams | None
    optimizer: AdamW
    codec: PatchCodec
    codec_cfg: CodecConfig
    embedder: TextEmbedder
    cache: ImageFeatureCache | None
    asset_root: Path
    use_text: bool = True
    use_image: bool = True
    epoch: int = 0
    step: int = 0

    @property
    def synapse_enabled(self) -> bool:
        return self.use_image and self.gates is not None and self.image is not None


def _music_latent(state: MusicTrainState, record: TripletRecord) -> np.ndarray:
    spec = read_melt(state.asset_root / record.spectrogram_path)
    return music_to_latent(state.codec_cfg, state.codec, spec).data


def train_step(state: MusicTrainState, batch: list[TripletRecord], rng: Rng) -> TrainStepRecord:
    """One optimization step over a batch of triplets (Eq.-7 style MSE)."""
    if not batch:
        raise ValueError("batch must be nonempty")
    losses = []
    for item_idx, record in enumerate(batch):
        item_rng = rng.split(item_idx)
        z1 = _music_latent(state, record)
        t = int(item_rng.split(0).integers(1, state.sched.T + 1))
        eps = item_rng.split(1).normal(z1.shape, dtype=z1.dtype)
        z_t = forward_sample(state.sched, z1, t, eps)

        injected = None
        if state.synapse_enabled:
            injected = state.cache.load(record.id, t)

        c = None
        if state.use_text:
            drop = state.train_cfg.p_drop > 0 and \
                float(item_rng.split(2).uniform()) < state.train_cfg.p_drop
            if not drop:
                c = state.embedder.embed(record.caption)

        eps_hat, _ = predict_noise(
            state.music, z_t, c, t,
            injected=injected, gates=state.gates if injected is not None else None,
        )
        losses.append(diffusion_loss(Tensor(eps), eps_hat))

    total = losses[0]
    for piece in losses[1:]:
        total = total + piece
    loss = total * Tensor(np.asarray(1.0 / len(losses), dtype=np.float32))

    state.optimizer.zero_grad()
    loss.backward()
    loss_value = float(loss.data)
    if not np.isfinite(loss_value):
        raise FloatingPointError(f"non-finite loss at epoch {state.epoch} step {state.step}")
    state.optimizer.clip_global_norm(state.train_cfg.max_grad_norm)
    grad_norms = {g["name"]: state.optimizer.grad_norm(g) for g in state.optimizer.groups}
    state.optimizer.step()
    state.step += 1

    alphas = state.gates.alphas() if state.gates is not None else {}
    return TrainStepRecord(epoch=state.epoch, step=state.step, loss=loss_value,
                           alphas=alphas, grad_norms=grad_norms)


def make_optimizer(music: DenoiserParams, gates: SynapseParams | None,
                   cfg: TrainConfig) -> AdamW:
    groups = [{
        "name": "theta",
        "params": music.trainable(),
        "lr": cfg.lr_theta,
        "weight_decay": cfg.weight_decay,
    }]
    if gates is not None:
        gate_params = {n: t for n, t in gates.tensors().items() if t.requires_grad}
        if gate_params:
            groups.append({
                "name": "alpha",
                "params": gate_params,
                "lr": cfg.lr_alpha,
                "weight_decay": 0.0,
            })
    return AdamW(groups)


def iterate_epoch(
    state: MusicTrainState,
    records: list[TripletRecord],
    rng: Rng,
    log_lines: list[str] | None = None,
) -> list[TrainStepRecord]:
    """Shuffle, batch, and step through one epoch deterministically."""
    order = rng.split(state.epoch).permutation(len(records))
    bs = state.train_cfg.batch_size
    out = []
    for bstart in range(0, len(records), bs):
        batch = [records[i] for i in order[bstart:bstart + bs]]
        step_rng = rng.split(state.epoch).split(1 + bstart)
        rec = train_step(state, batch, step_rng)
        out.append(rec)
        if log_lines is not None:
            log_lines.append(rec.to_json())
    state.epoch += 1
    return out


def eval_denoising_loss(
    state: MusicTrainState,
    records: list[TripletRecord],
    eval_seed: int = 1234,
) -> float:
    """Held-out noise-prediction loss, averaged over the full step grid.

    Every item is corrupted at every step 1..T with a noise draw that
    depends only on (eval_seed, item index, t), so ablation arms see
    identical corruption and are directly comparable with low variance.
    """
    if not records:
        raise ValueError("no records to evaluate")
    total = 0.0
    count = 0
    base = Rng(eval_seed)
    with no_grad():
        for idx, record in enumerate(records):
            item_rng = base.split(idx)
            z1 = _music_latent(state, record)
            c = state.embedder.embed(record.caption) if state.use_text else None
            for t in range(1, state.sched.T + 1):
                eps = item_rng.split(t).normal(z1.shape, dtype=z1.dtype)
                z_t = forward_sample(state.sched, z1, t, eps)
                injected = state.cache.load(record.id, t) if state.synapse_enabled else None
                eps_hat, _ = predict_noise(
                    state.music, z_t, c, t,
                    injected=injected, gates=state.gates if injected is not None else None,
                )
                total += float(diffusion_loss(Tensor(eps), eps_hat).data)
                count += 1
    return total / count


def train_image_model(
    image_model: DenoiserParams,
    records: list[TripletRecord],
    sched: NoiseSchedule,
    codec_cfg: CodecConfig,
    codec: PatchCodec,
    asset_root: Path,
    cfg: TrainConfig,
    log_lines: list[str] | None = None,
) -> list[float]:
    """Text-free denoising training for the image branch (then frozen)."""
    optimizer = AdamW([{
        "name": "psi",
        "params": image_model.trainable(),
        "lr": cfg.image_lr,
        "weight_decay": cfg.weight_decay,
    }])
    rng = Rng(cfg.seed).split(91)
    epoch_losses = []
    for epoch in range(cfg.image_epochs):
        order = rng.split(epoch).permutation(len(records))
        losses = []
        for bstart in range(0, len(records), cfg.batch_size):
            batch = [records[i] for i in order[bstart:bstart + cfg.batch_size]]
            step_rng = rng.split(epoch).split(1 + bstart)
            pieces = []
            for item_idx, record in enumerate(batch):
                item_rng = step_rng.split(item_idx)
                image = read_melt(asset_root / record.image_path)
                z1 = image_to_latent(codec_cfg, codec, image).data
                t = int(item_rng.split(0).integers(1, sched.T + 1))
                eps = item_rng.split(1).normal(z1.shape, dtype=z1.dtype)
                z_t = forward_sample(sched, z1, t, eps)
                eps_hat, _ = predict_noise(image_model, z_t, None, t)
                pieces.append(diffusion_loss(Tensor(eps), eps_hat))
            total = pieces[0]
            for piece in pieces[1:]:
                total = total + piece
            loss = total * Tensor(np.asarray(1.0 / len(pieces), dtype=np.float32))
            optimizer.zero_grad()
            loss.backward()
            optimizer.clip_global_norm(cfg.max_grad_norm)
            optimizer.step()
            losses.append(float(loss.data))
            if log_lines is not None:
                log_lines.append(json.dumps(
                    {"stage": "image", "epoch": epoch, "loss": losses[-1]}, sort_keys=True))
        epoch_losses.append(float(np.mean(losses)))
    return epoch_losses
