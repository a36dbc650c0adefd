"""Contrastive image/text dual encoder used as a zero-shot object classifier."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from . import tensorcore as tc
from .layers import Block, Embedding, LayerNorm, Linear, MLP, Module, param
from .tensorcore import Tensor
from .worldgen import OBJECT_VOCAB, ObjectVocab


class SamplerError(ValueError):
    """A contrastive batch contained duplicate captions."""


@dataclass
class DualEncoderConfig:
    d: int = 64
    layers: int = 2
    heads: int = 4
    image_hidden: int = 128
    image_layers: int = 0
    patch: int = 4
    max_text_len: int = 32
    init_temperature: float = 0.07
    pool_temperature: float = 0.03
    embed_std: float = 0.1
    prompt_template: str = "{}"

    @classmethod
    def from_dict(cls, d: dict) -> "DualEncoderConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown dualenc config fields: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


def pad_tokens(seqs: Sequence[Sequence[int]], max_len: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Right-pad id sequences with 0; returns (ids, valid mask)."""
    if not seqs or any(len(s) == 0 for s in seqs):
        raise ValueError("token sequences must be non-empty")
    n = max(len(s) for s in seqs)
    if max_len is not None and n > max_len:
        raise ValueError(f"sequence length {n} exceeds maximum {max_len}")
    ids = np.zeros((len(seqs), n), dtype=np.int64)
    mask = np.zeros((len(seqs), n), dtype=bool)
    for i, s in enumerate(seqs):
        ids[i, :len(s)] = s
        mask[i, :len(s)] = True
    return ids, mask


def patchify(frames: np.ndarray, p: int) -> np.ndarray:
    """(N, H, W, C) -> (N, H/p * W/p, p*p*C), patches in row-major order."""
    n, h, w, c = frames.shape
    x = frames.reshape(n, h // p, p, w // p, p, c).transpose(0, 1, 3, 2, 4, 5)
    return np.ascontiguousarray(x.reshape(n, (h // p) * (w // p), p * p * c))


class DualEncoder(Module):
    """Patch image tower and transformer text tower with a learned temperature.

    ``vocab`` is the token list shared with the dataset; the object vocabulary
    supplies class words for zero-shot prompts.
    """

    def __init__(self, vocab: Sequence[str], frame_shape: tuple[int, int, int],
                 cfg: DualEncoderConfig | None = None, seed: int = 0,
                 objects: ObjectVocab = OBJECT_VOCAB):
        cfg = cfg or DualEncoderConfig()
        self.cfg = cfg
        self.vocab = list(vocab)
        self.token_id = {t: i for i, t in enumerate(self.vocab)}
        self.frame_shape = tuple(frame_shape)
        self.objects = objects
        rng = np.random.default_rng(seed)
        d = cfg.d
        h, w, ch = self.frame_shape
        if h % cfg.patch or w % cfg.patch:
            raise ValueError(f"frame {h}x{w} not divisible into {cfg.patch}px patches")
        self.n_patches = (h // cfg.patch) * (w // cfg.patch)
        self.patch_embed = MLP(cfg.patch * cfg.patch * ch, cfg.image_hidden, d, rng)
        self.patch_pos = Embedding(self.n_patches, d, rng) if cfg.image_layers else None
        self.image_blocks = [Block(d, cfg.heads, rng) for _ in range(cfg.image_layers)]
        self.image_proj = Linear(d, d, rng)
        self.tok = Embedding(len(self.vocab), d, rng, std=cfg.embed_std)
        self.pos = Embedding(cfg.max_text_len, d, rng, std=cfg.embed_std)
        self.blocks = [Block(d, cfg.heads, rng) for _ in range(cfg.layers)]
        self.ln = LayerNorm(d)
        self.text_proj = Linear(d, d, rng)
        self.log_temperature = param(np.array(math.log(1.0 / cfg.init_temperature)))
        self.prompt_cache: Tensor | None = None

    # -- encoders -------------------------------------------------------------

    def _check_frames(self, frames: np.ndarray) -> np.ndarray:
        frames = np.asarray(frames)
        if frames.ndim == 3:
            frames = frames[None]
        if frames.shape[1:] != self.frame_shape:
            raise ValueError(f"frame shape {frames.shape[1:]} != configured {self.frame_shape}")
        if frames.dtype == np.uint8:
            frames = frames.astype(tc.get_dtype()) / 255.0
        return frames

    def encode_image(self, frames) -> Tensor:
        """Unit-norm embeddings (N, d) for frames (N, H, W, 3) or a single frame."""
        x = patchify(self._check_frames(frames), self.cfg.patch)
        h = self.patch_embed(Tensor(x))
        if self.image_blocks:
            h = h + self.patch_pos(np.arange(self.n_patches))
            for blk in self.image_blocks:
                h = blk(h, None)
        # smooth max over patches: tau * logsumexp(h / tau)
        tau = self.cfg.pool_temperature
        h = self.image_proj(tc.scale(tc.logsumexp(tc.scale(h, 1.0 / tau), axis=1), tau))
        return tc.l2_normalize(h, axis=-1)

    def tokenize(self, text: str | Sequence[str]) -> list[int]:
        words = text.split() if isinstance(text, str) else list(text)
        unk = self.token_id["<unk>"]
        return [self.token_id.get(w, unk) for w in words]

    def encode_text(self, token_seqs: Sequence[Sequence[int]]) -> Tensor:
        """Unit-norm embeddings (N, d) from mean-pooled transformer states."""
        ids, valid = pad_tokens(token_seqs, self.cfg.max_text_len)
        n, length = ids.shape
        x = self.tok(ids) + self.pos(np.arange(length))
        mask = ~valid[:, None, None, :]
        for blk in self.blocks:
            x = blk(x, mask)
        x = self.ln(x)
        dt = tc.get_dtype()
        w = valid.astype(dt)[..., None]
        pooled = tc.mul(tc.sum(tc.mul(x, w), axis=1), (1.0 / valid.sum(axis=1, keepdims=True)).astype(dt))
        return tc.l2_normalize(self.text_proj(pooled), axis=-1)

    # -- zero-shot classification --------------------------------------------

    def prompts(self) -> list[list[int]]:
        return [self.tokenize(self.cfg.prompt_template.format(name)) for name in self.objects.names]

    def prompt_embeddings(self) -> Tensor:
        return self.encode_text(self.prompts())

    def build_prompt_cache(self):
        """Freeze prompt embeddings for evaluation; training always recomputes."""
        self.prompt_cache = Tensor(self.prompt_embeddings().data)

    def clear_prompt_cache(self):
        self.prompt_cache = None

    @property
    def temperature(self) -> float:
        return float(np.exp(self.log_temperature.data))

    def similarity_logits(self, img: Tensor, txt: Tensor) -> Tensor:
        return tc.mul(tc.exp(self.log_temperature), tc.matmul(img, tc.transpose(txt)))

    def zero_shot_object_logits(self, frames, prompt_embeddings: Tensor | None = None) -> Tensor:
        """Temperature-scaled cosine similarity of each frame to every object prompt."""
        if len(self.objects) == 0:
            raise ValueError("empty object vocabulary")
        if prompt_embeddings is None:
            prompt_embeddings = self.prompt_cache if self.prompt_cache is not None else self.prompt_embeddings()
        return self.similarity_logits(self.encode_image(frames), prompt_embeddings)

    def predict_objects(self, frames) -> np.ndarray:
        return np.argmax(self.zero_shot_object_logits(frames).data, axis=-1)

    def clip_object_loss(self, frames, gold, weights=None) -> Tensor:
        """Cross-entropy of zero-shot object logits against gold object ids."""
        gold = np.atleast_1d(np.asarray(gold))
        if gold.size and (gold.min() < 0 or gold.max() >= len(self.objects)):
            raise IndexError(f"object id out of range [0, {len(self.objects)})")
        return tc.cross_entropy(self.zero_shot_object_logits(frames), gold, weights)

    # -- contrastive pretraining ---------------------------------------------

    def contrastive_loss(self, frames, captions: Sequence[Sequence[int]]) -> Tensor:
        """Symmetric InfoNCE over the batch similarity matrix."""
        keys = [tuple(c) for c in captions]
        if len(set(keys)) != len(keys):
            raise SamplerError("captions within a contrastive batch must be distinct")
        logits = self.similarity_logits(self.encode_image(frames), self.encode_text(captions))
        target = np.arange(len(keys))
        l_img = tc.cross_entropy(logits, target)
        l_txt = tc.cross_entropy(tc.transpose(logits), target)
        return tc.scale(tc.add(l_img, l_txt), 0.5)


def distinct_caption_batches(captions: Sequence[str], order: Sequence[int],
                             batch_size: int) -> list[list[int]]:
    """Split ``order`` into batches whose captions are pairwise distinct.

    A duplicate is deferred to the next batch that lacks its caption.
    """
    batches: list[tuple[list[int], set]] = []
    for i in order:
        cap = captions[i]
        for idx, seen in batches:
            if len(idx) < batch_size and cap not in seen:
                idx.append(i)
                seen.add(cap)
                break
        else:
            batches.append(([i], {cap}))
    return [idx for idx, _ in batches]
