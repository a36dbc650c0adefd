"""Episodic-transformer agent: instruction, frame history and action history in,
per-timestep action and object logits out."""
from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from . import tensorcore as tc
from .dualenc import pad_tokens, patchify
from .layers import Block, Embedding, LayerNorm, Linear, MLP, Module
from .tensorcore import Tensor
from .worldgen import ACTIONS, INTERACTIONS, OBJECT_VOCAB, Episode


@dataclass
class AgentConfig:
    d: int = 64
    layers: int = 2
    heads: int = 4
    max_steps: int = 48
    max_lang: int = 24
    patch: int = 4
    patch_features: int = 16
    patch_hidden: int = 32
    head_init: str = "zero"  # zero | normal

    @classmethod
    def from_dict(cls, d: dict) -> "AgentConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown agent config fields: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


class EpisodicAgent(Module):
    """Causal multimodal transformer over language tokens and per-step frame tokens.

    Each timestep contributes one token: the embedded frame plus the embedded
    previous action. Language tokens attend only to language; timestep ``t``
    attends to the whole instruction and to timesteps ``<= t``.
    """

    def __init__(self, n_tokens: int, frame_shape: tuple[int, int, int],
                 cfg: AgentConfig | None = None, seed: int = 0,
                 n_actions: int = len(ACTIONS), n_objects: int = len(OBJECT_VOCAB)):
        cfg = cfg or AgentConfig()
        self.cfg = cfg
        self.n_tokens, self.n_actions, self.n_objects = n_tokens, n_actions, n_objects
        self.frame_shape = tuple(frame_shape)
        rng = np.random.default_rng(seed)
        d = cfg.d
        h, w, ch = self.frame_shape
        self.n_patches = (h // cfg.patch) * (w // cfg.patch)
        self.tok = Embedding(n_tokens, d, rng)
        self.lang_pos = Embedding(cfg.max_lang, d, rng)
        self.patch_mlp = MLP(cfg.patch * cfg.patch * ch, cfg.patch_hidden, cfg.patch_features, rng)
        self.visual_proj = Linear(self.n_patches * cfg.patch_features, d, rng)
        self.action_emb = Embedding(n_actions + 1, d, rng)  # last row: start-of-episode
        self.time_pos = Embedding(cfg.max_steps, d, rng)
        self.modality = Embedding(2, d, rng)
        self.blocks = [Block(d, cfg.heads, rng) for _ in range(cfg.layers)]
        self.ln_f = LayerNorm(d)
        zero = cfg.head_init == "zero"
        self.action_head = Linear(d, n_actions, rng, zero=zero)
        self.object_head = Linear(d, n_objects, rng, zero=zero)

    @property
    def bos(self) -> int:
        return self.n_actions

    def embed_frames(self, frames: np.ndarray) -> Tensor:
        """(B, T, H, W, 3) frames -> (B, T, d)."""
        b, t = frames.shape[:2]
        flat = frames.reshape((b * t,) + self.frame_shape)
        if flat.dtype == np.uint8:
            flat = flat.astype(tc.get_dtype()) / 255.0
        p = self.patch_mlp(Tensor(patchify(flat, self.cfg.patch)))
        v = self.visual_proj(tc.reshape(tc.gelu(p), (b * t, -1)))
        return tc.reshape(v, (b, t, self.cfg.d))

    def attention_mask(self, lang_valid: np.ndarray, t: int) -> np.ndarray:
        b, length = lang_valid.shape
        s = length + t
        blocked = np.zeros((b, 1, s, s), dtype=bool)
        blocked[:, :, :, :length] |= ~lang_valid[:, None, None, :]
        blocked[:, :, :length, length:] = True
        blocked[:, :, length:, length:] |= tc.causal_mask(t)
        return blocked

    def forward(self, lang: np.ndarray, lang_valid: np.ndarray, frames: np.ndarray,
                prev_actions: np.ndarray) -> tuple[Tensor, Tensor]:
        """Batched forward pass.

        lang (B, L) token ids with validity mask (B, L); frames (B, T, H, W, 3);
        prev_actions (B, T) holding the action taken before each step (``bos``
        at t=0). Returns action logits (B, T, |A|) and object logits (B, T, |V|).
        """
        b, length = lang.shape
        t = frames.shape[1]
        if frames.shape[0] != b or prev_actions.shape != (b, t):
            raise ValueError("batch/time dimensions of lang, frames and actions disagree")
        if t < 1:
            raise ValueError("need at least one timestep")
        if t > self.cfg.max_steps:
            raise ValueError(f"{t} timesteps exceed max_steps={self.cfg.max_steps}")
        if length > self.cfg.max_lang:
            raise ValueError(f"instruction of {length} tokens exceeds max_lang={self.cfg.max_lang}")
        mod = self.modality(np.array([0, 1]))
        x_lang = self.tok(lang) + self.lang_pos(np.arange(length)) + mod[0]
        x_time = (self.embed_frames(frames) + self.action_emb(prev_actions)
                  + self.time_pos(np.arange(t)) + mod[1])
        x = tc.concat([x_lang, x_time], axis=1)
        mask = self.attention_mask(lang_valid, t)
        for blk in self.blocks:
            x = blk(x, mask)
        h = self.ln_f(x[:, length:, :])
        return self.action_head(h), self.object_head(h)

    # -- inference ------------------------------------------------------------

    def act_batch(self, token_seqs: Sequence[Sequence[int]], frames: Sequence[np.ndarray],
                  past_actions: Sequence[Sequence[int]]) -> tuple[np.ndarray, np.ndarray]:
        """Greedy (action, object) for the last frame of each history.

        All histories in one call must have the same length.
        """
        lang, valid = pad_tokens(token_seqs)
        fr = np.stack([np.asarray(f) for f in frames])
        prev = np.array([[self.bos] + list(p)[:fr.shape[1] - 1] for p in past_actions])
        a_logits, o_logits = self.forward(lang, valid, fr, prev)
        return np.argmax(a_logits.data[:, -1], axis=-1), np.argmax(o_logits.data[:, -1], axis=-1)

    def act(self, tokens: Sequence[int], frames: np.ndarray,
            past_actions: Sequence[int]) -> tuple[int, int]:
        """Greedy decision for the newest frame; uses only this model's weights."""
        frames = np.asarray(frames)
        if len(frames) < 1:
            raise ValueError("need at least one observed frame")
        a, o = self.act_batch([tokens], [frames], [past_actions])
        return int(a[0]), int(o[0])


# -- batching and losses ----------------------------------------------------

@dataclass
class Batch:
    lang: np.ndarray
    lang_valid: np.ndarray
    frames: np.ndarray        # uint8 (B, T, H, W, 3)
    prev_actions: np.ndarray
    actions: np.ndarray
    objects: np.ndarray
    step_mask: np.ndarray     # valid (unpadded) timesteps
    interaction_mask: np.ndarray

    def __len__(self):
        return len(self.lang)


def make_batch(episodes: Sequence[Episode], encode, bos: int) -> Batch:
    lang, valid = pad_tokens([encode(ep.instruction) for ep in episodes])
    b = len(episodes)
    t = max(len(ep) for ep in episodes)
    frame_shape = episodes[0].frames.shape[1:]
    frames = np.zeros((b, t) + frame_shape, dtype=np.uint8)
    prev = np.full((b, t), bos, dtype=np.int64)
    actions = np.zeros((b, t), dtype=np.int64)
    objects = np.zeros((b, t), dtype=np.int64)
    step_mask = np.zeros((b, t), dtype=bool)
    for i, ep in enumerate(episodes):
        n = len(ep)
        frames[i, :n] = ep.frames
        actions[i, :n] = ep.expert_actions
        prev[i, 1:n] = ep.expert_actions[:-1]
        objects[i, :n] = ep.gold_objects
        step_mask[i, :n] = True
    interaction = step_mask & np.isin(actions, list(INTERACTIONS))
    return Batch(lang, valid, frames, prev, actions, objects, step_mask, interaction)


def object_weights(batch: Batch, object_loss_steps: str = "all") -> np.ndarray:
    if object_loss_steps == "all":
        return batch.step_mask
    if object_loss_steps == "interaction":
        return batch.interaction_mask
    raise ValueError(f"object_loss_steps must be 'all' or 'interaction', got {object_loss_steps!r}")


def et_losses(agent: EpisodicAgent, batch: Batch, object_loss_steps: str = "all",
              logits: tuple[Tensor, Tensor] | None = None) -> tuple[Tensor, Tensor]:
    """Mean per-step action and object cross-entropies under teacher forcing."""
    if logits is None:
        logits = agent.forward(batch.lang, batch.lang_valid, batch.frames, batch.prev_actions)
    a_logits, o_logits = logits
    action_loss = tc.cross_entropy(a_logits, batch.actions, batch.step_mask)
    object_loss = tc.cross_entropy(o_logits, batch.objects, object_weights(batch, object_loss_steps))
    return action_loss, object_loss
