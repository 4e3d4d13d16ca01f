"""Deterministic codecs between waveforms, spectrograms, latents, and text.

Every pretrained encoder/decoder of the full-scale system is replaced here
by a deterministic, seeded stand-in:

* STFT magnitude spectrograms (Hann window) in both directions, with
  Griffin-Lim phase reconstruction as the vocoder;
* an orthonormal patch projection shared by music spectrograms and image
  channels, so encode/decode is exactly invertible;
* a hashed bag-of-tokens text embedder with positional offsets.
"""

from __future__ import annotations

import hashlib
import struct
import wave
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .autodiff import Tensor
from .rng import Rng


@dataclass
class Spectrogram:
    """Magnitude spectrogram: E time slots x F frequency slots."""

    values: np.ndarray
    sample_rate: int
    window: int
    hop: int

    def __post_init__(self):
        v = np.asarray(self.values)
        if v.ndim != 2:
            raise ValueError(f"spectrogram must be 2-D, got shape {v.shape}")
        if (v < 0).any():
            raise ValueError("spectrogram magnitudes must be nonnegative")
        self.values = v

    @property
    def e_slots(self) -> int:
        return self.values.shape[0]

    @property
    def f_slots(self) -> int:
        return self.values.shape[1]


def _hann(window: int, dtype=np.float64) -> np.ndarray:
    # Periodic Hann, the standard analysis window for overlap-add STFT.
    n = np.arange(window, dtype=dtype)
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * n / window)


def _frame(waveform: np.ndarray, window: int, hop: int) -> np.ndarray:
    n_frames = (len(waveform) - window) // hop + 1
    idx = np.arange(window)[None, :] + hop * np.arange(n_frames)[:, None]
    return waveform[idx]


def stft_complex(waveform: np.ndarray, window: int, hop: int) -> np.ndarray:
    frames = _frame(np.asarray(waveform, dtype=np.float64), window, hop)
    return np.fft.rfft(frames * _hann(window), axis=1)


def istft(spectrum: np.ndarray, window: int, hop: int) -> np.ndarray:
    """Weighted overlap-add inverse of :func:`stft_complex`."""
    frames = np.fft.irfft(spectrum, n=window, axis=1)
    win = _hann(window)
    n_frames = frames.shape[0]
    length = (n_frames - 1) * hop + window
    out = np.zeros(length)
    norm = np.zeros(length)
    for i in range(n_frames):
        lo = i * hop
        out[lo:lo + window] += frames[i] * win
        norm[lo:lo + window] += win ** 2
    return out / np.maximum(norm, 1e-12)


def stft_spectrogram(
    waveform: np.ndarray,
    window: int,
    hop: int,
    e_slots: int | None = None,
    f_slots: int | None = None,
    sample_rate: int = 16000,
) -> Spectrogram:
    """Hann-window magnitude spectrogram, cropped/padded to (e_slots, f_slots).

    The natural frame count is floor((len - window) / hop) + 1 and the
    natural bin count is window/2 + 1; cropping drops trailing frames/bins
    (the Nyquist bin first), padding appends zeros.
    """
    if window < 2 or (window & (window - 1)) != 0:
        raise ValueError(f"window must be a power of two, got {window}")
    if hop > window or hop < 1:
        raise ValueError(f"hop must be in 1..window, got {hop}")
    waveform = np.asarray(waveform, dtype=np.float64).ravel()
    if len(waveform) < window:
        raise ValueError(f"waveform length {len(waveform)} shorter than window {window}")
    mag = np.abs(stft_complex(waveform, window, hop))
    if e_slots is not None:
        mag = mag[:e_slots]
        if mag.shape[0] < e_slots:
            mag = np.pad(mag, ((0, e_slots - mag.shape[0]), (0, 0)))
    if f_slots is not None:
        mag = mag[:, :f_slots]
        if mag.shape[1] < f_slots:
            mag = np.pad(mag, ((0, 0), (0, f_slots - mag.shape[1])))
    return Spectrogram(values=mag, sample_rate=sample_rate, window=window, hop=hop)


def griffin_lim(s: Spectrogram, iterations: int = 60) -> np.ndarray:
    """Iterative phase reconstruction from a magnitude spectrogram.

    Starts from zero phase; each iteration re-imposes the target magnitude
    on the STFT of the current waveform estimate.
    """
    if iterations < 1:
        raise ValueError(f"iterations must be >= 1, got {iterations}")
    window, hop = s.window, s.hop
    f_full = window // 2 + 1
    target = np.zeros((s.e_slots, f_full))
    cols = min(s.f_slots, f_full)
    target[:, :cols] = s.values[:, :cols]
    phase = np.zeros_like(target)
    x = istft(target * np.exp(1j * phase), window, hop)
    for _ in range(iterations - 1):
        spec = stft_complex(x, window, hop)[: s.e_slots]
        phase = np.angle(spec)
        x = istft(target * np.exp(1j * phase), window, hop)
    return x


def griffin_lim_residuals(s: Spectrogram, iterations: int) -> list[float]:
    """Magnitude-consistency error per iteration (diagnostic companion)."""
    window, hop = s.window, s.hop
    f_full = window // 2 + 1
    target = np.zeros((s.e_slots, f_full))
    cols = min(s.f_slots, f_full)
    target[:, :cols] = s.values[:, :cols]
    phase = np.zeros_like(target)
    errors = []
    x = istft(target * np.exp(1j * phase), window, hop)
    for _ in range(iterations):
        spec = stft_complex(x, window, hop)[: s.e_slots]
        errors.append(float(np.linalg.norm(np.abs(spec) - target)))
        phase = np.angle(spec)
        x = istft(target * np.exp(1j * phase), window, hop)
    return errors


class PatchCodec:
    """Orthonormal projection of non-overlapping r x r patches.

    The basis is the Q factor of a seeded Gaussian matrix, so encoding is an
    isometry and decode(encode(x)) reproduces x exactly (up to roundoff).
    Latent layout: (r*r channels, E/r, F/r).
    """

    def __init__(self, r: int, seed: int = 2024):
        if r < 1:
            raise ValueError(f"compression level must be >= 1, got {r}")
        self.r = r
        self.seed = seed
        raw = Rng(seed).split(0).normal((r * r, r * r), dtype=np.float64)
        q, _ = np.linalg.qr(raw)
        self.basis = q  # columns orthonormal: basis.T @ basis = I

    @property
    def channels(self) -> int:
        return self.r * self.r

    def _check_dims(self, e: int, f: int) -> None:
        if e % self.r or f % self.r:
            raise ValueError(f"grid {e}x{f} not divisible by compression level r={self.r}")

    def encode_plane(self, plane: np.ndarray) -> np.ndarray:
        e, f = plane.shape
        self._check_dims(e, f)
        r = self.r
        patches = plane.reshape(e // r, r, f // r, r).transpose(0, 2, 1, 3).reshape(-1, r * r)
        coeffs = patches @ self.basis  # (n_patches, r*r)
        return np.ascontiguousarray(coeffs.reshape(e // r, f // r, r * r).transpose(2, 0, 1))

    def decode_plane(self, latent: np.ndarray) -> np.ndarray:
        c, eh, fw = latent.shape
        if c != self.channels:
            raise ValueError(f"latent has {c} channels, codec expects {self.channels}")
        r = self.r
        coeffs = latent.transpose(1, 2, 0).reshape(-1, r * r)
        patches = coeffs @ self.basis.T
        return np.ascontiguousarray(
            patches.reshape(eh, fw, r, r).transpose(0, 2, 1, 3).reshape(eh * r, fw * r)
        )


def encode_latent(codec: PatchCodec, s: Spectrogram | np.ndarray) -> Tensor:
    plane = s.values if isinstance(s, Spectrogram) else np.asarray(s)
    return Tensor(codec.encode_plane(plane.astype(np.float64)).astype(np.float32))


def decode_latent(codec: PatchCodec, latent: Tensor | np.ndarray,
                  sample_rate: int = 16000, window: int = 128, hop: int = 64) -> Spectrogram:
    arr = latent.data if isinstance(latent, Tensor) else np.asarray(latent)
    plane = codec.decode_plane(arr.astype(np.float64))
    # A generated latent may decode to slightly negative magnitudes; clamp.
    return Spectrogram(values=np.maximum(plane, 0.0), sample_rate=sample_rate,
                       window=window, hop=hop)


def encode_image(codec: PatchCodec, image: Tensor | np.ndarray) -> Tensor:
    """Encode an H x W x ch image, per channel: (ch * r^2, H/r, W/r)."""
    arr = image.data if isinstance(image, Tensor) else np.asarray(image)
    if arr.ndim != 3:
        raise ValueError(f"image must be H x W x ch, got shape {arr.shape}")
    planes = [codec.encode_plane(arr[:, :, ch].astype(np.float64)) for ch in range(arr.shape[2])]
    return Tensor(np.concatenate(planes, axis=0).astype(np.float32))


def decode_image(codec: PatchCodec, latent: Tensor | np.ndarray, n_channels: int = 3) -> np.ndarray:
    arr = latent.data if isinstance(latent, Tensor) else np.asarray(latent)
    per = codec.channels
    if arr.shape[0] != per * n_channels:
        raise ValueError(f"latent has {arr.shape[0]} channels, expected {per * n_channels}")
    planes = [codec.decode_plane(arr[ch * per:(ch + 1) * per].astype(np.float64))
              for ch in range(n_channels)]
    return np.stack(planes, axis=2)


def _stable_hash(token: str) -> int:
    return int.from_bytes(hashlib.sha1(token.encode("utf-8")).digest()[:8], "little")


def tokenize(caption: str) -> list[str]:
    out = []
    word = []
    for ch in caption.lower():
        if ch.isalnum():
            word.append(ch)
        elif word:
            out.append("".join(word))
            word = []
    if word:
        out.append("".join(word))
    return out


class TextEmbedder:
    """Frozen hashed-token embedder: token -> table row, plus positional offsets."""

    def __init__(self, d_c: int, tokens: int, vocab_hash_size: int = 4096, seed: int = 515):
        self.d_c = d_c
        self.tokens = tokens
        self.vocab_hash_size = vocab_hash_size
        r = Rng(seed)
        self.table = r.split(0).normal((vocab_hash_size, d_c), dtype=np.float64) / np.sqrt(d_c)
        self.positions = r.split(1).normal((tokens, d_c), dtype=np.float64) * 0.1

    def embed(self, caption: str) -> Tensor:
        toks = tokenize(caption)
        if not toks:
            raise ValueError("caption is empty after tokenization")
        rows = np.zeros((self.tokens, self.d_c))
        for i, tok in enumerate(toks[: self.tokens]):
            rows[i] = self.table[_stable_hash(tok) % self.vocab_hash_size]
        return Tensor((rows + self.positions).astype(np.float32))


def embed_text(embedder: TextEmbedder, caption: str) -> Tensor:
    return embedder.embed(caption)


def write_wav(path: str | Path, waveform: np.ndarray, sample_rate: int = 16000) -> None:
    """PCM 16-bit little-endian mono; values are clipped to [-1, 1]."""
    samples = np.clip(np.asarray(waveform, dtype=np.float64), -1.0, 1.0)
    pcm = (samples * 32767.0).round().astype("<i2")
    with wave.open(str(path), "wb") as fh:
        fh.setnchannels(1)
        fh.setsampwidth(2)
        fh.setframerate(sample_rate)
        fh.writeframes(pcm.tobytes())


def read_wav(path: str | Path) -> tuple[np.ndarray, int]:
    with wave.open(str(path), "rb") as fh:
        if fh.getnchannels() != 1 or fh.getsampwidth() != 2:
            raise ValueError(f"{path}: expected 16-bit mono PCM")
        rate = fh.getframerate()
        raw = fh.readframes(fh.getnframes())
    pcm = np.frombuffer(raw, dtype="<i2")
    return pcm.astype(np.float64) / 32767.0, rate


@dataclass(frozen=True)
class CodecConfig:
    """Spectrogram/latent geometry and scaling shared across the pipeline.

    Training operates on log-compressed magnitudes (log1p) scaled to
    roughly unit variance; both constants are fixed configuration, and the
    mapping is inverted exactly on decode.
    """

    e_slots: int = 64
    f_slots: int = 64
    window: int = 128
    hop: int = 64
    r: int = 4
    sample_rate: int = 16000
    codec_seed: int = 2024
    log_compress: bool = True
    music_latent_scale: float = 1.0
    image_latent_scale: float = 1.0

    def __post_init__(self):
        if self.e_slots % self.r or self.f_slots % self.r:
            raise ValueError(f"E={self.e_slots}, F={self.f_slots} must be divisible by r={self.r}")

    @property
    def channels(self) -> int:
        return self.r * self.r

    @property
    def latent_shape(self) -> tuple[int, int, int]:
        return (self.channels, self.e_slots // self.r, self.f_slots // self.r)

    @property
    def n_samples(self) -> int:
        return (self.e_slots - 1) * self.hop + self.window

    def make_codec(self) -> PatchCodec:
        return PatchCodec(self.r, seed=self.codec_seed)

    def spectrogram_of(self, waveform: np.ndarray) -> Spectrogram:
        return stft_spectrogram(waveform, self.window, self.hop,
                                e_slots=self.e_slots, f_slots=self.f_slots,
                                sample_rate=self.sample_rate)


def music_to_latent(cfg: CodecConfig, codec: PatchCodec,
                    spec: Spectrogram | np.ndarray) -> Tensor:
    """Spectrogram -> working latent (compress, project, scale)."""
    values = spec.values if isinstance(spec, Spectrogram) else np.asarray(spec)
    if cfg.log_compress:
        values = np.log1p(values)
    z = codec.encode_plane(values.astype(np.float64)) * cfg.music_latent_scale
    return Tensor(z.astype(np.float32))


def latent_to_spectrogram(cfg: CodecConfig, codec: PatchCodec,
                          latent: Tensor | np.ndarray) -> Spectrogram:
    """Inverse of :func:`music_to_latent`, clamped to valid magnitudes."""
    arr = latent.data if isinstance(latent, Tensor) else np.asarray(latent)
    plane = codec.decode_plane(arr.astype(np.float64) / cfg.music_latent_scale)
    if cfg.log_compress:
        plane = np.expm1(np.maximum(plane, 0.0))
    return Spectrogram(values=np.maximum(plane, 0.0), sample_rate=cfg.sample_rate,
                       window=cfg.window, hop=cfg.hop)


def image_to_latent(cfg: CodecConfig, codec: PatchCodec,
                    image: Tensor | np.ndarray) -> Tensor:
    """Image -> scaled working latent for the frozen branch."""
    z = encode_image(codec, image)
    return Tensor((z.data * cfg.image_latent_scale).astype(np.float32))
