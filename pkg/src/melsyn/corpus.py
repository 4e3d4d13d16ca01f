"""Synthetic triplet corpus with controlled shared factors.

Each item is generated from three latent factors:

* genre  g   -> fundamental frequency of the harmonic stack (250 * g Hz,
               bin-centered for power-of-two analysis windows at 16 kHz)
               and the image's hue band;
* tempo  tau -> amplitude-modulation rate of the tonal part and the
               caption's tempo word;
* brightness b -> balance between a fixed low band and a fixed high band
               of the signal (spectral tilt) and the image's luminance.

Captions are a deterministic function of (genre, tempo) ONLY, so
brightness is information the model can obtain exclusively from the
image. This asymmetry is what makes the modality ablation meaningful.

Images are stored as MELT tensors (H x W x 3 in [0, 1]), audio as 16-bit
WAV, spectrograms as MELT; the manifest is JSON Lines, one record per
line.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .codecs import CodecConfig, stft_spectrogram, write_wav
from .melt import read_melt, write_melt
from .rng import Rng

GENRE_WORDS = [
    "ambient", "blues", "classical", "country", "disco", "electronic",
    "folk", "funk", "hiphop", "jazz", "latin", "metal", "pop", "reggae", "rock",
]

TEMPO_WORDS = [(2.8, "slow"), (3.6, "easy"), (4.4, "moderate"), (5.2, "brisk"), (np.inf, "fast")]

# Fixed color bands (fractions of the sample rate) carrying the tilt.
# Their amplitudes swing hard with brightness so the image-only factor owns
# a large slice of the spectrogram's variance.
LOW_BAND_FRAC = 0.04
HIGH_BAND_FRAC = 0.22
TILT_LOW_AMP = (0.88, -0.80)   # amplitude = 0.88 - 0.80 * b
TILT_HIGH_AMP = (0.08, 0.80)   # amplitude = 0.08 + 0.80 * b
TONE_MIX = 0.35
COLOR_MIX = 0.62

GENRE_BASE_HZ = 250.0


@dataclass(frozen=True)
class LatentFactors:
    genre: int          # 1..G
    tempo: float        # beats per second
    brightness: float   # in [0, 1]

    def __post_init__(self):
        if self.genre < 1:
            raise ValueError(f"genre must be >= 1, got {self.genre}")
        if not 0.0 <= self.brightness <= 1.0:
            raise ValueError(f"brightness must be in [0, 1], got {self.brightness}")
        if self.tempo <= 0:
            raise ValueError(f"tempo must be positive, got {self.tempo}")


@dataclass
class TripletRecord:
    id: str
    genre: int
    caption: str
    image_path: str
    spectrogram_path: str
    waveform_path: str | None
    split: str
    factors: LatentFactors | None = None

    def to_json(self) -> str:
        d = {
            "id": self.id, "genre": self.genre, "caption": self.caption,
            "image_path": self.image_path, "spectrogram_path": self.spectrogram_path,
            "waveform_path": self.waveform_path, "split": self.split,
        }
        if self.factors is not None:
            d["factors"] = {
                "genre": self.factors.genre,
                "tempo": self.factors.tempo,
                "brightness": self.factors.brightness,
            }
        return json.dumps(d, sort_keys=True)


def caption_for(factors: LatentFactors) -> str:
    """Template caption from (genre, tempo) only; brightness never appears."""
    genre_word = GENRE_WORDS[(factors.genre - 1) % len(GENRE_WORDS)]
    for upper, word in TEMPO_WORDS:
        if factors.tempo < upper:
            return f"a {genre_word} piece at {word} tempo"
    raise AssertionError("unreachable")


def fundamental_hz(genre: int) -> float:
    return GENRE_BASE_HZ * genre


def render_waveform(factors: LatentFactors, rng: Rng, n_samples: int,
                    sample_rate: int) -> np.ndarray:
    """Harmonic tone (genre) with AM beats (tempo) plus tilted color bands."""
    t = np.arange(n_samples) / sample_rate
    f0 = fundamental_hz(factors.genre)
    envelope = 0.65 + 0.35 * np.cos(2 * np.pi * factors.tempo * t)
    tone = np.sin(2 * np.pi * f0 * t) + 0.35 * np.sin(2 * np.pi * 2 * f0 * t)
    tone *= envelope

    def band(center_frac: float, stream: Rng) -> np.ndarray:
        # Narrowband component: three seeded-phase sinusoids around the center.
        center = center_frac * sample_rate
        phases = stream.uniform(0, 2 * np.pi, (3,))
        offsets = np.array([-40.0, 0.0, 40.0])
        return sum(np.sin(2 * np.pi * (center + off) * t + ph)
                   for off, ph in zip(offsets, phases)) / 3.0

    low_amp = TILT_LOW_AMP[0] + TILT_LOW_AMP[1] * factors.brightness
    high_amp = TILT_HIGH_AMP[0] + TILT_HIGH_AMP[1] * factors.brightness
    color = low_amp * band(LOW_BAND_FRAC, rng.split(0)) + high_amp * band(HIGH_BAND_FRAC, rng.split(1))
    noise = 0.01 * rng.split(2).normal((n_samples,), dtype=np.float64)
    signal = TONE_MIX * tone + COLOR_MIX * color + noise
    peak = np.abs(signal).max()
    if peak > 0.95:
        signal *= 0.95 / peak
    return signal


def render_image(factors: LatentFactors, rng: Rng, size: int, n_genres: int) -> np.ndarray:
    """Procedural H x W x 3 image: hue from genre, luminance from brightness."""
    hue = ((factors.genre - 1) / max(n_genres, 1)) * 6.0  # HSV hue sector
    value = 0.25 + 0.6 * factors.brightness
    sat = 0.8
    c = value * sat
    x = c * (1 - abs(hue % 2 - 1))
    sector = int(hue) % 6
    rgb_base = [(c, x, 0), (x, c, 0), (0, c, x), (0, x, c), (x, 0, c), (c, 0, x)][sector]
    m = value - c
    base = np.array(rgb_base) + m
    img = np.broadcast_to(base, (size, size, 3)).copy()
    yy = np.linspace(-0.5, 0.5, size)[:, None, None]
    img = img * (1.0 + 0.15 * yy)  # vertical shading keyed to nothing but looks organic
    img += 0.04 * rng.normal((size, size, 3), dtype=np.float64)
    return np.clip(img, 0.0, 1.0)


def generate_triplet(
    factors: LatentFactors,
    rng: Rng,
    out_dir: Path,
    codec_cfg: CodecConfig,
    item_id: str,
    split: str,
    image_size: int = 64,
    n_genres: int = 15,
    keep_waveform: bool = True,
) -> TripletRecord:
    """Render and persist one item's assets; returns its manifest record."""
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    (out_dir / "specs").mkdir(parents=True, exist_ok=True)
    (out_dir / "audio").mkdir(parents=True, exist_ok=True)

    waveform = render_waveform(factors, rng.split(0), codec_cfg.n_samples, codec_cfg.sample_rate)
    spec = codec_cfg.spectrogram_of(waveform)
    image = render_image(factors, rng.split(1), image_size, n_genres)

    image_path = f"images/{item_id}.melt"
    spec_path = f"specs/{item_id}.melt"
    wav_path = f"audio/{item_id}.wav" if keep_waveform else None
    write_melt(out_dir / image_path, image.astype(np.float32))
    write_melt(out_dir / spec_path, spec.values.astype(np.float32))
    if wav_path:
        write_wav(out_dir / wav_path, waveform, codec_cfg.sample_rate)

    return TripletRecord(
        id=item_id, genre=factors.genre, caption=caption_for(factors),
        image_path=image_path, spectrogram_path=spec_path, waveform_path=wav_path,
        split=split, factors=factors,
    )


def plan_factors(n_items: int, n_genres: int, seed: int,
                 tempo_range: tuple[float, float] = (2.0, 6.0)) -> list[LatentFactors]:
    """Factor draws with uniform genre coverage (counts within +-1)."""
    rng = Rng(seed).split(0)
    factors = []
    for i in range(n_items):
        genre = (i % n_genres) + 1
        tempo = float(rng.uniform(*tempo_range))
        brightness = float(rng.uniform(0.0, 1.0))
        factors.append(LatentFactors(genre=genre, tempo=tempo, brightness=brightness))
    return factors


def split_assignments(factors: list[LatentFactors], split_fracs: tuple[float, float, float],
                      seed: int) -> list[str]:
    """Stratified-by-genre train/val/test labels with exact global counts."""
    if abs(sum(split_fracs) - 1.0) > 1e-9:
        raise ValueError(f"split fractions must sum to 1, got {split_fracs}")
    n = len(factors)
    n_train = int(round(split_fracs[0] * n))
    n_val = int(round(split_fracs[1] * n))
    n_test = n - n_train - n_val
    if min(n_train, n_val, n_test) < 0:
        raise ValueError(f"split fractions {split_fracs} produce negative counts")
    rng = Rng(seed).split(1)
    by_genre: dict[int, list[int]] = {}
    for i, f in enumerate(factors):
        by_genre.setdefault(f.genre, []).append(i)
    # round-robin the genres into a global order, then cut by exact counts
    order: list[int] = []
    pools = {g: list(rng.split(g).permutation(len(idx))) for g, idx in by_genre.items()}
    genres = sorted(by_genre)
    cursor = {g: 0 for g in genres}
    while len(order) < n:
        for g in genres:
            if cursor[g] < len(by_genre[g]):
                order.append(by_genre[g][pools[g][cursor[g]]])
                cursor[g] += 1
    labels = [""] * n
    for rank, idx in enumerate(order):
        if rank < n_train:
            labels[idx] = "train"
        elif rank < n_train + n_val:
            labels[idx] = "val"
        else:
            labels[idx] = "test"
    return labels


def build_corpus(
    n_items: int,
    n_genres: int,
    split_fracs: tuple[float, float, float],
    seed: int,
    out_dir: str | Path,
    codec_cfg: CodecConfig | None = None,
    image_size: int = 64,
    keep_waveform: bool = True,
    workers: int = 1,
) -> Path:
    """Render the full corpus and write ``manifest.jsonl``; returns its path."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    codec_cfg = codec_cfg or CodecConfig()
    factors = plan_factors(n_items, n_genres, seed)
    labels = split_assignments(factors, tuple(split_fracs), seed)
    base_rng = Rng(seed)

    def render(i: int) -> TripletRecord:
        return generate_triplet(
            factors[i], base_rng.split(2).split(i), out_dir, codec_cfg,
            item_id=f"item{i:05d}", split=labels[i],
            image_size=image_size, n_genres=n_genres, keep_waveform=keep_waveform,
        )

    if workers > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=workers) as pool:
            records = list(pool.map(render, range(n_items)))
    else:
        records = [render(i) for i in range(n_items)]

    manifest = out_dir / "manifest.jsonl"
    with manifest.open("w") as fh:
        for rec in records:
            fh.write(rec.to_json() + "\n")
    return manifest


def load_manifest(path: str | Path, check_assets: bool = True) -> list[TripletRecord]:
    """Parse and validate a JSONL manifest; unknown keys are ignored."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"manifest not found: {path}")
    root = path.parent
    records = []
    with path.open() as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                raw = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ValueError(f"{path}:{lineno}: malformed JSON ({exc})") from None
            try:
                factors = None
                if raw.get("factors") is not None:
                    f = raw["factors"]
                    factors = LatentFactors(genre=int(f["genre"]), tempo=float(f["tempo"]),
                                            brightness=float(f["brightness"]))
                rec = TripletRecord(
                    id=str(raw["id"]), genre=int(raw["genre"]), caption=str(raw["caption"]),
                    image_path=str(raw["image_path"]),
                    spectrogram_path=str(raw["spectrogram_path"]),
                    waveform_path=raw.get("waveform_path"),
                    split=str(raw["split"]), factors=factors,
                )
            except (KeyError, ValueError, TypeError) as exc:
                raise ValueError(f"{path}:{lineno}: invalid record ({exc})") from None
            if rec.split not in ("train", "val", "test"):
                raise ValueError(f"{path}:{lineno}: record {rec.id}: bad split {rec.split!r}")
            if check_assets:
                for label, rel in (("image", rec.image_path), ("spectrogram", rec.spectrogram_path)):
                    if not (root / rel).exists():
                        raise FileNotFoundError(
                            f"{path}:{lineno}: record {rec.id}: missing {label} file {rel}")
            records.append(rec)
    return records


def split_records(records: list[TripletRecord]) -> dict[str, list[TripletRecord]]:
    out: dict[str, list[TripletRecord]] = {"train": [], "val": [], "test": []}
    for rec in records:
        out[rec.split].append(rec)
    return out
