"""Checkpoint archives: a JSON header followed by named MELT tensor records.

Layout: u32 header length, UTF-8 JSON header, then repeated records of
[u32 name length][name bytes][u64 payload length][MELT bytes]. The header
carries the run config, the model kind, and training progress; tensors
carry the model weights, gate raws, and optimizer moments.
"""

from __future__ import annotations

import io
import json
import struct
from pathlib import Path

import numpy as np

from .autodiff import Tensor
from .codecs import TextEmbedder
from .config import (codec_config_from, config_hash, image_denoiser_config,
                     music_denoiser_config, placement_from, schedule_from)
from .denoiser import DenoiserConfig, DenoiserParams
from .melt import MAGIC as MELT_MAGIC
from .synapse import SynapseParams


def _melt_bytes(array: np.ndarray) -> bytes:
    arr = np.ascontiguousarray(array)
    if arr.dtype == np.float32:
        code = 1
    elif arr.dtype == np.float64:
        code = 2
    else:
        arr = arr.astype(np.float32)
        code = 1
    shape = arr.shape if arr.ndim else (1,)
    header = MELT_MAGIC + struct.pack("<BBB", 1, code, len(shape))
    header += struct.pack(f"<{len(shape)}I", *shape)
    return header + arr.reshape(shape).astype(arr.dtype.newbyteorder("<")).tobytes(order="C")


def _melt_from_bytes(blob: bytes) -> np.ndarray:
    if blob[:4] != MELT_MAGIC:
        raise ValueError("corrupt checkpoint record: bad MELT magic")
    _, code, ndim = struct.unpack_from("<BBB", blob, 4)
    dims = struct.unpack_from(f"<{ndim}I", blob, 7)
    offset = 7 + 4 * ndim
    dtype = np.dtype("<f4") if code == 1 else np.dtype("<f8")
    arr = np.frombuffer(blob, dtype=dtype, count=int(np.prod(dims)), offset=offset)
    return np.ascontiguousarray(arr.reshape(dims).astype(dtype.newbyteorder("=")))


def save_checkpoint(path: str | Path, header: dict, tensors: dict[str, np.ndarray]) -> None:
    buf = io.BytesIO()
    head = json.dumps(header, sort_keys=True).encode("utf-8")
    buf.write(struct.pack("<I", len(head)))
    buf.write(head)
    for name in sorted(tensors):
        nb = name.encode("utf-8")
        payload = _melt_bytes(tensors[name])
        buf.write(struct.pack("<I", len(nb)))
        buf.write(nb)
        buf.write(struct.pack("<Q", len(payload)))
        buf.write(payload)
    Path(path).write_bytes(buf.getvalue())


def load_checkpoint(path: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
    raw = Path(path).read_bytes()
    (head_len,) = struct.unpack_from("<I", raw, 0)
    header = json.loads(raw[4:4 + head_len].decode("utf-8"))
    tensors: dict[str, np.ndarray] = {}
    offset = 4 + head_len
    while offset < len(raw):
        (name_len,) = struct.unpack_from("<I", raw, offset)
        offset += 4
        name = raw[offset:offset + name_len].decode("utf-8")
        offset += name_len
        (payload_len,) = struct.unpack_from("<Q", raw, offset)
        offset += 8
        tensors[name] = _melt_from_bytes(raw[offset:offset + payload_len])
        offset += payload_len
    return header, tensors


# -- model-level save/load ------------------------------------------------------


def save_image_model(path: str | Path, run_cfg: dict, model: DenoiserParams,
                     extra: dict | None = None) -> None:
    header = {
        "format": "melsyn-checkpoint",
        "version": 1,
        "kind": "image",
        "config": run_cfg,
        "config_hash": config_hash(run_cfg),
    }
    if extra:
        header.update(extra)
    tensors = {f"psi.{n}": t.data for n, t in model.tensors.items()}
    save_checkpoint(path, header, tensors)


def load_image_model(path: str | Path) -> tuple[dict, DenoiserParams]:
    header, tensors = load_checkpoint(path)
    if header.get("kind") != "image":
        raise ValueError(f"{path}: not an image-model checkpoint")
    cfg = header["config"]
    dcfg = image_denoiser_config(cfg)
    params = _denoiser_from(dcfg, tensors, "psi.")
    params.freeze()
    return header, params


def save_music_model(
    path: str | Path,
    run_cfg: dict,
    music: DenoiserParams,
    gates: SynapseParams | None,
    optimizer_state: dict[str, np.ndarray] | None = None,
    train_progress: dict | None = None,
) -> None:
    header = {
        "format": "melsyn-checkpoint",
        "version": 1,
        "kind": "music",
        "config": run_cfg,
        "config_hash": config_hash(run_cfg),
        "alphas": gates.alphas() if gates is not None else {},
        "gate_layers": gates.layers if gates is not None else [],
        "gate_per_block": gates.per_block if gates is not None else True,
        "gates_trainable": (bool(gates.raw[0].requires_grad) if gates is not None else False),
        "train_progress": train_progress or {},
    }
    tensors = {f"theta.{n}": t.data for n, t in music.tensors.items()}
    if gates is not None:
        tensors.update({n: t.data for n, t in gates.tensors().items()})
    if optimizer_state:
        tensors.update(optimizer_state)
    save_checkpoint(path, header, tensors)


def _denoiser_from(dcfg: DenoiserConfig, tensors: dict[str, np.ndarray],
                   prefix: str) -> DenoiserParams:
    named = {
        n[len(prefix):]: Tensor(arr.copy(), requires_grad=True)
        for n, arr in tensors.items() if n.startswith(prefix)
    }
    if not named:
        raise ValueError(f"checkpoint holds no tensors with prefix {prefix!r}")
    return DenoiserParams(dcfg, named)


def load_music_model(path: str | Path) -> tuple[dict, DenoiserParams, SynapseParams | None,
                                                dict[str, np.ndarray]]:
    header, tensors = load_checkpoint(path)
    if header.get("kind") != "music":
        raise ValueError(f"{path}: not a music-model checkpoint")
    cfg = header["config"]
    music = _denoiser_from(music_denoiser_config(cfg), tensors, "theta.")
    gates = None
    if header.get("gate_layers"):
        gates = SynapseParams(header["gate_layers"], per_block=header.get("gate_per_block", True),
                              trainable=header.get("gates_trainable", True))
        for name, tensor in gates.tensors().items():
            if name in tensors:
                tensor.data = tensors[name].copy().reshape(())
    optim = {n: arr for n, arr in tensors.items() if n.startswith("optim.")}
    return header, music, gates, optim


def load_pipeline(music_path: str | Path, image_path: str | Path | None = None):
    """Assemble a sampling pipeline from checkpoints."""
    from .engine import Pipeline

    header, music, gates, _ = load_music_model(music_path)
    cfg = header["config"]
    music.freeze()
    image = None
    if image_path is not None:
        _, image = load_image_model(image_path)
    embedder = TextEmbedder(
        d_c=cfg["denoiser"]["d_c"], tokens=cfg["denoiser"]["text_tokens"],
        vocab_hash_size=cfg["codecs"]["text_hash_size"], seed=cfg["codecs"]["text_seed"],
    )
    codec_cfg = codec_config_from(cfg)
    return Pipeline(
        music=music, image=image, gates=gates, sched=schedule_from(cfg),
        codec_cfg=codec_cfg, codec=codec_cfg.make_codec(), embedder=embedder,
        run_config=cfg,
    )
