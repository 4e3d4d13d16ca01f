"""Objective evaluation: Fréchet distance, label KL, the image-music
similarity score, the symmetric contrastive loss, and the small trained
models those metrics need at desk scale.

The image-music score multiplies two row-stochastic similarity matrices,
``image -> text`` and ``text -> music``: each raw cosine matrix is scaled
by a sharpness factor and row-softmaxed (the music-text matrix after
transposing, so text indexes its rows), and the diagonal mean of the
product is reported. Text is the bridging modality.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, no_grad
from .codecs import Spectrogram, tokenize, _stable_hash
from .numerics import fit_gaussian, sqrtm_psd
from .rng import Rng


@dataclass
class EmbeddingMatrix:
    """Unit-norm embedding rows for one modality."""

    rows: np.ndarray          # N x d, each row L2-normalized
    modality: str             # image | text | music

    def __post_init__(self):
        rows = np.asarray(self.rows, dtype=np.float64)
        norms = np.linalg.norm(rows, axis=1)
        if rows.ndim != 2 or not np.allclose(norms, 1.0, atol=1e-6):
            raise ValueError(f"embedding rows must be unit-norm (max dev {np.abs(norms - 1).max():.2e})")
        if self.modality not in ("image", "text", "music"):
            raise ValueError(f"unknown modality {self.modality!r}")
        self.rows = rows


@dataclass
class SimilarityMatrix:
    """N x N similarity scores; columns index the text modality."""

    values: np.ndarray
    normalization: str = "raw_cosine"   # raw_cosine | row_stochastic

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 2 or v.shape[0] != v.shape[1]:
            raise ValueError(f"similarity matrix must be square, got {v.shape}")
        if self.normalization == "raw_cosine" and (np.abs(v) > 1 + 1e-8).any():
            raise ValueError("raw cosine values must lie in [-1, 1]")
        if self.normalization == "row_stochastic" and not np.allclose(v.sum(axis=1), 1.0, atol=1e-6):
            raise ValueError("row-stochastic matrix rows must sum to 1")
        self.values = v

    @property
    def n(self) -> int:
        return self.values.shape[0]


def cosine_matrix(a: EmbeddingMatrix, b: EmbeddingMatrix) -> SimilarityMatrix:
    return SimilarityMatrix(values=a.rows @ b.rows.T, normalization="raw_cosine")


def frechet_distance(real_feats: np.ndarray, gen_feats: np.ndarray) -> float:
    """2-Wasserstein distance between Gaussians fit to two feature sets."""
    mu1, cov1 = fit_gaussian(real_feats)
    mu2, cov2 = fit_gaussian(gen_feats)
    s1 = sqrtm_psd(cov1)
    inner = sqrtm_psd(s1 @ cov2 @ s1)
    value = float(np.sum((mu1 - mu2) ** 2) + np.trace(cov1 + cov2 - 2.0 * inner))
    return max(value, 0.0)


def label_kl(real_label_dists: np.ndarray, gen_label_dists: np.ndarray,
             floor: float = 1e-10) -> float:
    """Mean over pairs of KL(real || gen), with a floor inside the log."""
    p = np.asarray(real_label_dists, dtype=np.float64)
    q = np.asarray(gen_label_dists, dtype=np.float64)
    if p.shape != q.shape or p.ndim != 2:
        raise ValueError(f"need paired (n, K) distributions, got {p.shape} and {q.shape}")
    for name, mat in (("real", p), ("gen", q)):
        if (mat < -1e-12).any() or not np.allclose(mat.sum(axis=1), 1.0, atol=1e-6):
            raise ValueError(f"{name} rows are not probability distributions")
    logs = np.log(np.maximum(p, floor)) - np.log(np.maximum(q, floor))
    kl_rows = np.where(p > 0, p * logs, 0.0).sum(axis=1)
    return float(kl_rows.mean())


def _row_softmax(values: np.ndarray, sharpness: float) -> np.ndarray:
    scaled = sharpness * values
    scaled = scaled - scaled.max(axis=1, keepdims=True)
    e = np.exp(scaled)
    return e / e.sum(axis=1, keepdims=True)


def imsm(a_clip: SimilarityMatrix, a_clap: SimilarityMatrix,
         sharpness: float = 10.0) -> tuple[np.ndarray, float]:
    """Bridged image->music affinity matrix and its diagonal-mean score.

    Both inputs carry text on the column axis. The music-text matrix is
    transposed before its row softmax, so the product composes
    image->text->music and stays row-stochastic.
    """
    if a_clip.n != a_clap.n:
        raise ValueError(f"matrix sizes differ: {a_clip.n} vs {a_clap.n}")
    if a_clip.normalization != "raw_cosine" or a_clap.normalization != "raw_cosine":
        raise ValueError("imsm expects raw cosine matrices")
    image_to_text = _row_softmax(a_clip.values, sharpness)
    text_to_music = _row_softmax(a_clap.values.T, sharpness)
    matrix = image_to_text @ text_to_music
    score = float(np.trace(matrix) / matrix.shape[0])
    return matrix, score


def itc_loss(z_img: Tensor | EmbeddingMatrix, z_txt: Tensor | EmbeddingMatrix,
             tau: float) -> Tensor:
    """Symmetric InfoNCE over paired embeddings at temperature tau.

    -1/(2N) * sum_j log softmax_j(img->txt) - 1/(2N) * sum_l log softmax_l(txt->img),
    with logits <z_i, z_t>/tau.
    """
    if tau <= 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    zi = z_img if isinstance(z_img, Tensor) else Tensor(z_img.rows)
    zt = z_txt if isinstance(z_txt, Tensor) else Tensor(z_txt.rows)
    if zi.shape != zt.shape:
        raise ValueError(f"embedding shapes differ: {zi.shape} vs {zt.shape}")
    n = zi.shape[0]
    logits = ad.matmul(zi, ad.transpose(zt)) * (1.0 / tau)   # (N, N): i -> t
    log_p_i2t = _log_softmax_rows(logits)
    log_p_t2i = _log_softmax_rows(ad.transpose(logits))
    eye = Tensor(np.eye(n, dtype=zi.dtype))
    diag_sum = ad.tsum(log_p_i2t * eye) + ad.tsum(log_p_t2i * eye)
    return diag_sum * Tensor(np.asarray(-1.0 / (2 * n), dtype=zi.dtype))


def _log_softmax_rows(logits: Tensor) -> Tensor:
    shifted_max = Tensor(logits.data.max(axis=1, keepdims=True))
    shifted = logits - shifted_max
    lse = ad.log(ad.tsum(ad.exp(shifted), axis=1, keepdims=True))
    return shifted - lse


def normalize_rows(x: Tensor) -> Tensor:
    sq = ad.tsum(ad.square(x), axis=1, keepdims=True)
    return x / ad.sqrt(sq + Tensor(np.asarray(1e-12, dtype=x.dtype)))


# -- toy feature extractors / classifier / embedders ---------------------------


def band_energy_features(spec_values: np.ndarray, n_bands: int = 16) -> np.ndarray:
    """Log band energies plus per-band temporal variation: 2 * n_bands dims."""
    v = np.asarray(spec_values, dtype=np.float64)
    e, f = v.shape
    edges = np.linspace(0, f, n_bands + 1).astype(int)
    energy = np.array([np.square(v[:, lo:hi]).sum() for lo, hi in zip(edges[:-1], edges[1:])])
    profile = np.array([np.square(v[:, lo:hi]).sum(axis=1) for lo, hi in zip(edges[:-1], edges[1:])])
    log_energy = np.log1p(energy)
    temporal_std = profile.std(axis=1)
    return np.concatenate([log_energy, np.log1p(temporal_std)])


def toy_extractor(spec: Spectrogram | np.ndarray) -> np.ndarray:
    """Deterministic 32-dim audio feature vector (Frechet metric backbone A)."""
    values = spec.values if isinstance(spec, Spectrogram) else spec
    return band_energy_features(values, n_bands=16)


def toy_extractor_fd(spec: Spectrogram | np.ndarray) -> np.ndarray:
    """Alternate 24-dim backbone: coarser bands plus time-segment energies."""
    values = spec.values if isinstance(spec, Spectrogram) else np.asarray(spec)
    v = np.asarray(values, dtype=np.float64)
    bands = band_energy_features(values, n_bands=8)       # 16 dims
    e = v.shape[0]
    edges = np.linspace(0, e, 9).astype(int)
    segs = np.array([np.square(v[lo:hi]).sum() for lo, hi in zip(edges[:-1], edges[1:])])
    return np.concatenate([bands, np.log1p(segs)])        # 24 dims


def image_features(image: np.ndarray) -> np.ndarray:
    """Cheap deterministic image descriptor: channel stats and moments."""
    img = np.asarray(image, dtype=np.float64)
    means = img.mean(axis=(0, 1))
    stds = img.std(axis=(0, 1))
    maxes = img.max(axis=(0, 1))
    mins = img.min(axis=(0, 1))
    total = img.mean()
    chroma = means - total
    return np.concatenate([means, stds, maxes, mins, chroma, [total]])  # 16 dims


def text_features(caption: str, dim: int = 64) -> np.ndarray:
    """Hashed bag-of-words indicator vector."""
    vec = np.zeros(dim)
    for tok in tokenize(caption):
        vec[_stable_hash(tok) % dim] += 1.0
    return vec


class LinearHead:
    """One trainable linear map used by the toy classifier and embedders."""

    def __init__(self, d_in: int, d_out: int, rng: Rng, dtype=np.float32):
        scale = np.sqrt(1.0 / d_in)
        self.w = Tensor((rng.split(0).normal((d_in, d_out), np.float64) * scale).astype(dtype),
                        requires_grad=True)
        self.b = Tensor(np.zeros(d_out, dtype=dtype), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return ad.matmul(x, self.w) + self.b

    def tensors(self) -> dict[str, Tensor]:
        return {"w": self.w, "b": self.b}


def _sgd_adam_train(loss_fn, heads: list[LinearHead], steps: int, lr: float = 0.05):
    from .training import AdamW

    params = {}
    for i, head in enumerate(heads):
        for n, t in head.tensors().items():
            params[f"h{i}.{n}"] = t
    opt = AdamW([{"name": "toy", "params": params, "lr": lr, "weight_decay": 0.0}])
    losses = []
    for _ in range(steps):
        opt.zero_grad()
        loss = loss_fn()
        loss.backward()
        opt.step()
        losses.append(float(loss.data))
    return losses


class ToyClassifier:
    """Genre softmax head over audio features, trained on the train split."""

    def __init__(self, n_genres: int, rng: Rng, d_in: int = 32):
        self.n_genres = n_genres
        self.head = LinearHead(d_in, n_genres, rng)

    def fit(self, feats: np.ndarray, labels: np.ndarray, steps: int = 300) -> list[float]:
        x = Tensor(feats.astype(np.float32))
        onehot = np.zeros((len(labels), self.n_genres), dtype=np.float32)
        onehot[np.arange(len(labels)), labels] = 1.0
        target = Tensor(onehot)

        def loss_fn():
            logits = self.head(x)
            logp = _log_softmax_rows(logits)
            return ad.tmean(ad.tsum(-(target * logp), axis=1))

        return _sgd_adam_train(loss_fn, [self.head], steps)

    def predict_proba(self, feats: np.ndarray) -> np.ndarray:
        with no_grad():
            logits = self.head(Tensor(feats.astype(np.float32)))
        p = _row_softmax(logits.data.astype(np.float64), 1.0)
        return p

    def accuracy(self, feats: np.ndarray, labels: np.ndarray) -> float:
        return float((self.predict_proba(feats).argmax(axis=1) == labels).mean())


class ToyEmbedders:
    """Image/text/music encoders contrastively aligned through text.

    Two symmetric InfoNCE objectives are trained jointly: image-text (the
    CLIP stand-in) and music-text (the CLAP stand-in), sharing the text
    head, so the image-music score is bridged by the text modality.
    """

    def __init__(self, embed_dim: int, rng: Rng, tau: float = 0.2,
                 d_image: int = 16, d_text: int = 64, d_music: int = 32):
        self.tau = tau
        self.image_head = LinearHead(d_image, embed_dim, rng.split(0))
        self.text_head = LinearHead(d_text, embed_dim, rng.split(1))
        self.music_head = LinearHead(d_music, embed_dim, rng.split(2))

    def fit(self, img_feats: np.ndarray, txt_feats: np.ndarray, mus_feats: np.ndarray,
            steps: int = 300, batch: int = 32, seed: int = 0) -> list[float]:
        rng = Rng(seed).split(77)
        n = len(img_feats)

        state = {"idx": None}

        def loss_fn():
            idx = state["idx"]
            zi = normalize_rows(self.image_head(Tensor(img_feats[idx].astype(np.float32))))
            zt = normalize_rows(self.text_head(Tensor(txt_feats[idx].astype(np.float32))))
            zm = normalize_rows(self.music_head(Tensor(mus_feats[idx].astype(np.float32))))
            return itc_loss(zi, zt, self.tau) + itc_loss(zm, zt, self.tau)

        losses = []
        heads = [self.image_head, self.text_head, self.music_head]
        from .training import AdamW

        params = {}
        for i, head in enumerate(heads):
            for pname, t in head.tensors().items():
                params[f"h{i}.{pname}"] = t
        opt = AdamW([{"name": "toy", "params": params, "lr": 0.02, "weight_decay": 0.0}])
        for step in range(steps):
            state["idx"] = rng.split(step).permutation(n)[:min(batch, n)]
            opt.zero_grad()
            loss = loss_fn()
            loss.backward()
            opt.step()
            losses.append(float(loss.data))
        return losses

    def _embed(self, head: LinearHead, feats: np.ndarray, modality: str) -> EmbeddingMatrix:
        with no_grad():
            z = normalize_rows(head(Tensor(feats.astype(np.float32))))
        return EmbeddingMatrix(rows=z.data.astype(np.float64), modality=modality)

    def embed_images(self, feats: np.ndarray) -> EmbeddingMatrix:
        return self._embed(self.image_head, feats, "image")

    def embed_texts(self, feats: np.ndarray) -> EmbeddingMatrix:
        return self._embed(self.text_head, feats, "text")

    def embed_music(self, feats: np.ndarray) -> EmbeddingMatrix:
        return self._embed(self.music_head, feats, "music")
