"""UNet-style noise predictor with attention taps and injection points.

Both diffusion branches (the frozen image model and the trainable music
model) share this architecture: a mirrored encoder/decoder of residual
convolution blocks, each carrying self-attention over flattened spatial
tokens and cross-attention over conditioning tokens, with a convolution
bottleneck in between. Every attention block's self-attention K/V matrices
are tapped on the way out; cross-attention K/V can be blended with donated
features through per-block gates.

The final 1x1 projection is zero-initialized, so a freshly built model
predicts exactly zero noise.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .attention import AttentionWeights, KVFeatures, cross_attention, init_attention, self_attention
from .rng import Rng
from .synapse import SynapseParams


@dataclass(frozen=True)
class DenoiserConfig:
    latent_channels: int = 16
    grid: tuple[int, int] = (16, 16)
    widths: tuple[int, ...] = (16, 24, 32)
    n_blocks: int = 3            # encoder depth == decoder depth
    d_k: int = 16
    d_c: int = 16
    t_emb_width: int = 16
    text_tokens: int = 8
    norm_groups: int = 4

    def __post_init__(self):
        if len(self.widths) != self.n_blocks:
            raise ValueError(f"need one width per block: {self.n_blocks} blocks, {len(self.widths)} widths")
        h, w = self.grid
        if h < 2 or w < 2 or h % 2 or w % 2:
            raise ValueError(f"grid {self.grid} must have even dims >= 2")
        for width in self.widths:
            if width % self.norm_groups:
                raise ValueError(f"width {width} not divisible by norm groups {self.norm_groups}")

    @property
    def encoder_layers(self) -> list[str]:
        return [f"encoder.{i}" for i in range(self.n_blocks)]

    @property
    def decoder_layers(self) -> list[str]:
        return [f"decoder.{i}" for i in range(self.n_blocks)]

    @property
    def attention_layers(self) -> list[str]:
        return self.encoder_layers + self.decoder_layers

    def to_dict(self) -> dict:
        return {
            "latent_channels": self.latent_channels,
            "grid": list(self.grid),
            "widths": list(self.widths),
            "n_blocks": self.n_blocks,
            "d_k": self.d_k,
            "d_c": self.d_c,
            "t_emb_width": self.t_emb_width,
            "text_tokens": self.text_tokens,
            "norm_groups": self.norm_groups,
        }

    @staticmethod
    def from_dict(d: dict) -> "DenoiserConfig":
        d = dict(d)
        d["grid"] = tuple(d["grid"])
        d["widths"] = tuple(d["widths"])
        return DenoiserConfig(**d)


class DenoiserParams:
    """Named trainable tensors for one denoiser, keyed hierarchically."""

    def __init__(self, config: DenoiserConfig, tensors: dict[str, Tensor]):
        self.config = config
        self.tensors = tensors

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def freeze(self) -> "DenoiserParams":
        for t in self.tensors.values():
            t.requires_grad = False
        return self

    def trainable(self) -> dict[str, Tensor]:
        return {n: t for n, t in self.tensors.items() if t.requires_grad}

    def clear_grads(self) -> None:
        for t in self.tensors.values():
            t.grad = None

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {n: t.data for n, t in self.tensors.items()}

    def n_parameters(self) -> int:
        return sum(t.size for t in self.tensors.values())

    def attention_weights(self, layer_id: str, kind: str) -> AttentionWeights:
        p = f"{layer_id}.{kind}"
        return AttentionWeights(
            wq=self.tensors[f"{p}.wq"], wk=self.tensors[f"{p}.wk"],
            wv=self.tensors[f"{p}.wv"], wo=self.tensors[f"{p}.wo"],
        )


def init_denoiser(config: DenoiserConfig, rng: Rng, dtype=np.float32) -> DenoiserParams:
    tensors: dict[str, Tensor] = {}
    streams = iter(range(10_000))

    def nrm(shape, scale):
        return Tensor((rng.split(next(streams)).normal(shape, dtype=np.float64) * scale).astype(dtype),
                      requires_grad=True)

    def zeros(shape):
        return Tensor(np.zeros(shape, dtype=dtype), requires_grad=True)

    def ones(shape):
        return Tensor(np.ones(shape, dtype=dtype), requires_grad=True)

    def conv(name, c_in, c_out):
        tensors[f"{name}.w"] = nrm((c_out, c_in, 3, 3), np.sqrt(1.0 / (9 * c_in)))
        tensors[f"{name}.b"] = zeros((c_out,))

    def norm(name, ch):
        tensors[f"{name}.g"] = ones((ch,))
        tensors[f"{name}.b"] = zeros((ch,))

    def attn(name, d_in, d_cond):
        w = init_attention(rng.split(next(streams)), d_in, d_cond, config.d_k, d_in, dtype=dtype)
        tensors[f"{name}.wq"] = w.wq
        tensors[f"{name}.wk"] = w.wk
        tensors[f"{name}.wv"] = w.wv
        tensors[f"{name}.wo"] = w.wo

    def block(prefix, c_in, c_out, attention: bool):
        norm(f"{prefix}.norm1", c_in)
        conv(f"{prefix}.conv1", c_in, c_out)
        tensors[f"{prefix}.temb.w"] = nrm((config.t_emb_width, c_out), np.sqrt(1.0 / config.t_emb_width))
        tensors[f"{prefix}.temb.b"] = zeros((c_out,))
        norm(f"{prefix}.norm2", c_out)
        conv(f"{prefix}.conv2", c_out, c_out)
        if c_in != c_out:
            tensors[f"{prefix}.skip.w"] = nrm((c_in, c_out), np.sqrt(1.0 / c_in))
            tensors[f"{prefix}.skip.b"] = zeros((c_out,))
        if attention:
            norm(f"{prefix}.self_norm", c_out)
            attn(f"{prefix}.self", c_out, c_out)
            norm(f"{prefix}.cross_norm", c_out)
            attn(f"{prefix}.cross", c_out, config.d_c)

    widths = config.widths
    conv("conv_in", config.latent_channels, widths[0])
    tensors["temb_mlp.w"] = nrm((config.t_emb_width, config.t_emb_width), np.sqrt(1.0 / config.t_emb_width))
    tensors["temb_mlp.b"] = zeros((config.t_emb_width,))

    c_prev = widths[0]
    for i in range(config.n_blocks):
        block(f"encoder.{i}", c_prev, widths[i], attention=True)
        c_prev = widths[i]
    block("bottleneck", widths[-1], widths[-1], attention=False)
    for i in range(config.n_blocks):
        enc_width = widths[config.n_blocks - 1 - i]
        out_width = enc_width
        c_in = c_prev + enc_width  # upsampled path concat mirror-level skip
        block(f"decoder.{i}", c_in, out_width, attention=True)
        c_prev = out_width

    norm("out_norm", widths[0])
    tensors["conv_out.w"] = zeros((widths[0], config.latent_channels))  # 1x1, zero-init
    tensors["conv_out.b"] = zeros((config.latent_channels,))
    tensors["null_cond"] = nrm((config.text_tokens, config.d_c), 0.2)
    return DenoiserParams(config, tensors)


def timestep_embedding(t: int, width: int, dtype=np.float32) -> Tensor:
    """Sinusoidal features of the integer step at geometric frequencies."""
    if t < 1:
        raise ValueError(f"timestep must be >= 1, got {t}")
    if width < 2:
        raise ValueError(f"embedding width must be >= 2, got {width}")
    half = width // 2
    denom = max(half - 1, 1)
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / denom)
    angles = t * freqs
    emb = np.concatenate([np.sin(angles), np.cos(angles)])
    if emb.size < width:
        emb = np.concatenate([emb, np.zeros(width - emb.size)])
    return Tensor(emb.astype(dtype))


def group_norm(x: Tensor, gain: Tensor, bias: Tensor, groups: int, eps: float = 1e-5) -> Tensor:
    ch, h, w = x.shape
    grouped = ad.reshape(x, (groups, (ch // groups) * h * w))
    mu = ad.tmean(grouped, axis=1, keepdims=True)
    centered = grouped - mu
    var = ad.tmean(ad.square(centered), axis=1, keepdims=True)
    normed = centered / ad.sqrt(var + Tensor(np.asarray(eps, dtype=x.dtype)))
    normed = ad.reshape(normed, (ch, h, w))
    return normed * ad.reshape(gain, (ch, 1, 1)) + ad.reshape(bias, (ch, 1, 1))


def conv1x1(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    ch, h, wid = x.shape
    mat = ad.transpose(ad.reshape(x, (ch, h * wid)))        # (HW, C)
    out = ad.matmul(mat, w) + b                             # (HW, C_out)
    return ad.reshape(ad.transpose(out), (w.shape[1], h, wid))


def _tokens(x: Tensor) -> Tensor:
    ch, h, w = x.shape
    return ad.transpose(ad.reshape(x, (ch, h * w)))         # (HW, C)


def _untokens(f: Tensor, h: int, w: int) -> Tensor:
    return ad.reshape(ad.transpose(f), (f.shape[1], h, w))


def _res_block(params: DenoiserParams, prefix: str, h: Tensor, temb: Tensor) -> Tensor:
    p = params.tensors
    g = params.config.norm_groups
    x = group_norm(h, p[f"{prefix}.norm1.g"], p[f"{prefix}.norm1.b"], g)
    x = ad.silu(x)
    x = ad.conv3x3(x, p[f"{prefix}.conv1.w"], p[f"{prefix}.conv1.b"])
    tproj = ad.matmul(ad.reshape(temb, (1, temb.size)), p[f"{prefix}.temb.w"]) + p[f"{prefix}.temb.b"]
    x = x + ad.reshape(tproj, (x.shape[0], 1, 1))
    x = group_norm(x, p[f"{prefix}.norm2.g"], p[f"{prefix}.norm2.b"], g)
    x = ad.silu(x)
    x = ad.conv3x3(x, p[f"{prefix}.conv2.w"], p[f"{prefix}.conv2.b"])
    if f"{prefix}.skip.w" in p:
        h = conv1x1(h, p[f"{prefix}.skip.w"], p[f"{prefix}.skip.b"])
    return h + x


def _attn_block(
    params: DenoiserParams,
    layer_id: str,
    h: Tensor,
    c: Tensor,
    t: int,
    injected: dict[str, KVFeatures] | None,
    gates: SynapseParams | None,
    taps: dict[str, KVFeatures],
    probe: dict[str, Tensor] | None,
) -> Tensor:
    p = params.tensors
    g = params.config.norm_groups
    _, height, width = h.shape

    f = _tokens(group_norm(h, p[f"{layer_id}.self_norm.g"], p[f"{layer_id}.self_norm.b"], g))
    if probe is not None:
        probe[layer_id] = f
    out, kv = self_attention(f, params.attention_weights(layer_id, "self"), layer_id, t)
    taps[layer_id] = kv
    h = h + _untokens(out, height, width)

    f = _tokens(group_norm(h, p[f"{layer_id}.cross_norm.g"], p[f"{layer_id}.cross_norm.b"], g))
    inj = None
    alpha = None
    if injected is not None and layer_id in injected and gates is not None and not gates.bypass:
        inj = injected[layer_id]
        alpha = gates.gate(layer_id)
    out = cross_attention(f, c, params.attention_weights(layer_id, "cross"), inj, alpha)
    return h + _untokens(out, height, width)


def predict_noise(
    params: DenoiserParams,
    z: Tensor,
    c: Tensor | None,
    t: int,
    injected: dict[str, KVFeatures] | None = None,
    gates: SynapseParams | None = None,
    probe: dict[str, Tensor] | None = None,
) -> tuple[Tensor, dict[str, KVFeatures]]:
    """Predict the injected noise for latent ``z`` at step ``t``.

    ``c = None`` selects the unconditional pathway (the learned null
    conditioning). Returns the prediction (same shape as ``z``) and the
    self-attention K/V tapped from every attention block, keyed by layer id.
    """
    cfg = params.config
    expected = (cfg.latent_channels, cfg.grid[0], cfg.grid[1])
    if tuple(z.shape) != expected:
        raise ValueError(f"latent shape {z.shape} does not match config {expected}")
    if injected:
        unknown = set(injected) - set(cfg.attention_layers)
        if unknown:
            raise ValueError(f"injected layer ids not in config: {sorted(unknown)}")
        if gates is None:
            raise ValueError("injected features require gates")
    if c is None:
        c = params["null_cond"]
    if c.shape != (cfg.text_tokens, cfg.d_c):
        raise ValueError(f"conditioning shape {c.shape} != {(cfg.text_tokens, cfg.d_c)}")

    p = params.tensors
    temb = timestep_embedding(t, cfg.t_emb_width, dtype=z.dtype)
    temb = ad.silu(ad.matmul(ad.reshape(temb, (1, cfg.t_emb_width)), p["temb_mlp.w"]) + p["temb_mlp.b"])
    temb = ad.reshape(temb, (cfg.t_emb_width,))

    taps: dict[str, KVFeatures] = {}
    h = ad.conv3x3(z, p["conv_in.w"], p["conv_in.b"])
    skips: list[Tensor] = []
    down_flags: list[bool] = []
    for i in range(cfg.n_blocks):
        lid = f"encoder.{i}"
        h = _res_block(params, lid, h, temb)
        h = _attn_block(params, lid, h, c, t, injected, gates, taps, probe)
        skips.append(h)
        if i < cfg.n_blocks - 1:
            # spatial floor of 2x2: a 1x1 level has vacuous attention and a
            # near-singular group norm
            down = (h.shape[1] > 2 and h.shape[2] > 2
                    and h.shape[1] % 2 == 0 and h.shape[2] % 2 == 0)
            down_flags.append(down)
            if down:
                h = ad.avg_pool2(h)

    h = _res_block(params, "bottleneck", h, temb)

    for i in range(cfg.n_blocks):
        lid = f"decoder.{i}"
        h = ad.concat([h, skips[cfg.n_blocks - 1 - i]], axis=0)
        h = _res_block(params, lid, h, temb)
        h = _attn_block(params, lid, h, c, t, injected, gates, taps, probe)
        if i < cfg.n_blocks - 1 and down_flags[cfg.n_blocks - 2 - i]:
            h = ad.upsample2(h)

    h = ad.silu(group_norm(h, p["out_norm.g"], p["out_norm.b"], cfg.norm_groups))
    eps_hat = conv1x1(h, p["conv_out.w"], p["conv_out.b"])
    return eps_hat, taps
