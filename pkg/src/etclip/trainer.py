"""Contrastive pretraining of the dual encoder and joint agent training.

In ``clip_aux`` mode each step computes the agent's object loss and the dual
encoder's zero-shot object loss on the same (frame, gold object) pairs and
mixes them as ``alpha * clip + (1 - alpha) * agent``. The total objective is
``action_loss_weight * action_loss + mixed object loss``. ``baseline`` mode
never builds the dual encoder.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import tensorcore as tc
from .agent import AgentConfig, EpisodicAgent, et_losses, make_batch, object_weights
from .checkpoint import Checkpoint, load_checkpoint
from .dualenc import DualEncoder, DualEncoderConfig, distinct_caption_batches
from .evalkit import AgentPolicy, EpisodeResult, rollout_many, build_report
from .tensorcore import Tensor
from .worldgen import Dataset, Episode, build_caption_pairs, probe_frames

log = logging.getLogger(__name__)

MODES = ("baseline", "clip_aux")


class ConfigError(ValueError):
    pass


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    alpha: float = 0.5
    epochs: int = 20
    batch_size: int = 16
    lr_agent: float = 3e-3
    lr_dualenc: float = 1e-4
    seed: int = 0
    object_loss_steps: str = "all"
    mode: str = "clip_aux"
    action_loss_weight: float = 1.0
    grad_clip: float | None = 1.0
    eval_every: int = 0
    eval_split: str = "valid_unseen"
    max_rollout_steps: int = 48

    def validate(self) -> "TrainConfig":
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigError(f"alpha must lie in [0, 1], got {self.alpha}")
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigError("epochs must be >= 0 and batch_size >= 1")
        if self.object_loss_steps not in ("all", "interaction"):
            raise ConfigError("object_loss_steps must be 'all' or 'interaction'")
        return self

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown train config fields: {sorted(unknown)}")
        return cls(**d).validate()


@dataclass
class PretrainConfig:
    epochs: int = 15
    batch_size: int = 64
    lr: float = 1e-3
    n_pairs: int = 3000
    probe_size: int = 500
    seed: int = 0

    @classmethod
    def from_dict(cls, d: dict) -> "PretrainConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown pretrain config fields: {sorted(unknown)}")
        return cls(**d)


def combine_object_loss(alpha: float, l_clip, l_et):
    """``alpha * l_clip + (1 - alpha) * l_et`` as a differentiable node."""
    if not 0.0 <= alpha <= 1.0:
        raise ConfigError(f"alpha must lie in [0, 1], got {alpha}")
    if not isinstance(l_clip, Tensor) and not isinstance(l_et, Tensor):
        return alpha * l_clip + (1.0 - alpha) * l_et
    l_clip = l_clip if isinstance(l_clip, Tensor) else Tensor(l_clip)
    l_et = l_et if isinstance(l_et, Tensor) else Tensor(l_et)
    return tc.add(tc.scale(l_clip, alpha), tc.scale(l_et, 1.0 - alpha))


# -- model <-> checkpoint -----------------------------------------------------

def frame_shape_of(dataset: Dataset) -> tuple[int, int, int]:
    for eps in dataset.splits.values():
        if eps:
            return tuple(eps[0].frames.shape[1:])
    n = dataset.config.grid_size * dataset.config.cell_px
    return (n, n, 3)


def dualenc_from_checkpoint(ckpt: Checkpoint) -> DualEncoder:
    cfg = ckpt.config
    model = DualEncoder(cfg["vocab"], tuple(cfg["frame_shape"]),
                        DualEncoderConfig.from_dict(cfg["dualenc"]))
    model.load_state_dict(ckpt.section("dualenc"))
    return model


def agent_from_checkpoint(ckpt: Checkpoint) -> EpisodicAgent:
    """Rebuild the agent from the ``agent`` section alone."""
    cfg = ckpt.config
    if not ckpt.has_section("agent"):
        raise TrainingError("checkpoint has no agent section")
    model = EpisodicAgent(len(cfg["vocab"]), tuple(cfg["frame_shape"]),
                          AgentConfig.from_dict(cfg["agent"]))
    model.load_state_dict(ckpt.section("agent"))
    return model


def _as_checkpoint(obj) -> Checkpoint:
    return obj if isinstance(obj, Checkpoint) else load_checkpoint(obj)


# -- pretraining --------------------------------------------------------------

@dataclass
class PretrainResult:
    checkpoint: Checkpoint
    model: DualEncoder
    history: list[dict]


def probe_accuracy(model: DualEncoder, frames: np.ndarray, labels: np.ndarray) -> float:
    model.build_prompt_cache()
    try:
        return float(np.mean(model.predict_objects(frames) == labels))
    finally:
        model.clear_prompt_cache()


def fit_dual_encoder(images: np.ndarray, captions: Sequence[str], vocab: Sequence[str],
                     cfg: PretrainConfig, model_cfg: DualEncoderConfig, probe=None):
    """Contrastive training loop; returns (model, rng, per-epoch history)."""
    model = DualEncoder(vocab, images.shape[1:], model_cfg, seed=cfg.seed)
    tokens = [model.tokenize(c) for c in captions]
    opt = tc.Adam(model.named_parameters(), lr=cfg.lr)
    rng = np.random.default_rng(cfg.seed)
    history = []
    for epoch in range(cfg.epochs):
        losses = []
        for idx in distinct_caption_batches(captions, rng.permutation(len(captions)), cfg.batch_size):
            with tc.Tape() as tape:
                loss = model.contrastive_loss(images[idx], [tokens[i] for i in idx])
            if not math.isfinite(loss.item()):
                raise TrainingError(f"non-finite contrastive loss at epoch {epoch}")
            tc.backward(loss, tape)
            opt.step()
            losses.append(loss.item())
        rec = {"epoch": epoch, "contrastive_loss": float(np.mean(losses)), "temperature": model.temperature}
        if probe is not None:
            rec["probe_accuracy"] = probe_accuracy(model, *probe)
        history.append(rec)
        log.info("pretrain epoch %d %s", epoch, rec)
    return model, rng, history


def pretrain_dualenc(dataset: Dataset, cfg: PretrainConfig | None = None,
                     model_cfg: DualEncoderConfig | None = None) -> PretrainResult:
    """Contrastive training on caption pairs, probing zero-shot accuracy each epoch."""
    cfg = cfg or PretrainConfig()
    model_cfg = model_cfg or DualEncoderConfig()
    train_eps = dataset.splits.get("train") or []
    if not train_eps:
        raise TrainingError("dataset has no train episodes to caption")
    shape = frame_shape_of(dataset)
    pairs = build_caption_pairs(train_eps, cfg.seed, cfg.n_pairs, cell_px=dataset.config.cell_px)
    images = np.stack([p[0] for p in pairs])
    captions = [p[1] for p in pairs]
    probe_x, probe_y = probe_frames(cfg.probe_size, cfg.seed + 7919, dataset.config.train_palettes,
                                    dataset.config.grid_size, dataset.config.cell_px)
    model, rng, history = fit_dual_encoder(images, captions, dataset.vocab, cfg, model_cfg,
                                           probe=(probe_x, probe_y))
    final = probe_accuracy(model, probe_x, probe_y)
    ckpt = Checkpoint(
        config={"kind": "dualenc", "vocab": list(dataset.vocab), "frame_shape": list(shape),
                "dualenc": model_cfg.to_dict(), "pretrain": asdict(cfg),
                "meta": {"probe_accuracy": [h["probe_accuracy"] for h in history],
                         "final_probe_accuracy": final, "epoch": cfg.epochs}},
        tensors={f"dualenc.{k}": v for k, v in model.state_dict().items()},
        rng_state=rng.bit_generator.state,
    )
    return PretrainResult(ckpt, model, history)


# -- joint training -----------------------------------------------------------

@dataclass
class TrainResult:
    checkpoint: Checkpoint
    agent: EpisodicAgent
    dualenc: DualEncoder | None
    log: list[dict] = field(default_factory=list)
    step_losses: list[dict] = field(default_factory=list)


def train_step(agent: EpisodicAgent, dualenc: DualEncoder | None, batch, cfg: TrainConfig,
               opt_agent: tc.Adam, opt_dual: tc.Adam | None) -> dict:
    """One optimisation step; returns the scalar loss components."""
    weights = object_weights(batch, cfg.object_loss_steps)
    with tc.Tape() as tape:
        action_loss, l_et = et_losses(agent, batch, cfg.object_loss_steps)
        record = {"action_loss": action_loss.item(), "object_loss_et": l_et.item()}
        if cfg.mode == "clip_aux":
            sel = weights.astype(bool)
            l_clip = dualenc.clip_object_loss(batch.frames[sel], batch.objects[sel])
            l_obj = combine_object_loss(cfg.alpha, l_clip, l_et)
            record["object_loss_clip"] = l_clip.item()
        else:
            l_obj = l_et
        total = tc.add(tc.scale(action_loss, cfg.action_loss_weight), l_obj)
        record["object_loss"] = l_obj.item()
        record["total"] = total.item()
    if not all(math.isfinite(v) for v in record.values()):
        raise TrainingError(f"non-finite loss, aborting: {record}")
    tc.backward(total, tape)
    opt_agent.step()
    if opt_dual is not None:
        opt_dual.step()
    return record


def evaluate(agent: EpisodicAgent, episodes: Sequence[Episode], dataset: Dataset,
             max_steps: int = 48) -> list[EpisodeResult]:
    return rollout_many(AgentPolicy(agent, dataset.encode), episodes, max_steps,
                        cell_px=dataset.config.cell_px)


def _run_checkpoint(cfg: TrainConfig, agent_cfg: AgentConfig, dataset: Dataset, shape,
                    agent: EpisodicAgent, dualenc: DualEncoder | None, opt_agent: tc.Adam,
                    opt_dual: tc.Adam | None, rng: np.random.Generator, epoch: int,
                    steps_done: int) -> Checkpoint:
    tensors = {f"agent.{k}": v.copy() for k, v in agent.state_dict().items()}
    tensors.update({f"opt.agent.{k}": v.copy() for k, v in opt_agent.state_dict().items()})
    config = {"kind": "run", "train": asdict(cfg), "agent": agent_cfg.to_dict(),
              "vocab": list(dataset.vocab), "frame_shape": list(shape),
              "meta": {"epoch": epoch, "steps": steps_done, "opt_agent_steps": opt_agent.step_count}}
    if dualenc is not None:
        config["dualenc"] = dualenc.cfg.to_dict()
        tensors.update({f"dualenc.{k}": v.copy() for k, v in dualenc.state_dict().items()})
        tensors.update({f"opt.dualenc.{k}": v.copy() for k, v in opt_dual.state_dict().items()})
        config["meta"]["opt_dualenc_steps"] = opt_dual.step_count
    return Checkpoint(config, tensors, rng.bit_generator.state)


def train(dataset: Dataset, cfg: TrainConfig, agent_cfg: AgentConfig | None = None,
          pretrained=None, resume=None, stop_after_epoch: int | None = None,
          max_steps: int | None = None, log_path=None) -> TrainResult:
    """Train the agent (and, in ``clip_aux`` mode, the dual encoder) by imitation.

    ``pretrained`` is a dual-encoder checkpoint (object or path), required in
    ``clip_aux`` mode and never read in ``baseline`` mode. ``resume`` is a run
    checkpoint from an earlier call; training continues after its epoch.
    ``stop_after_epoch`` ends the run early (for interrupted-run tests) and
    ``max_steps`` caps the number of optimisation steps.
    """
    cfg.validate()
    agent_cfg = agent_cfg or AgentConfig()
    train_eps = dataset.splits["train"]
    if not train_eps:
        raise TrainingError("no training episodes")
    shape = frame_shape_of(dataset)
    start_epoch = 0
    if resume is not None:
        resume = _as_checkpoint(resume)
        saved = resume.config["train"]
        if saved["mode"] != cfg.mode:
            raise ConfigError("cannot resume a run in a different mode")
        agent_cfg = AgentConfig.from_dict(resume.config["agent"])
        start_epoch = resume.config["meta"]["epoch"]
    agent = EpisodicAgent(len(dataset.vocab), shape, agent_cfg, seed=cfg.seed)
    dualenc = None
    if cfg.mode == "clip_aux":
        if resume is not None:
            dualenc = dualenc_from_checkpoint(resume)
        else:
            if pretrained is None:
                raise TrainingError("clip_aux mode requires a pretrained dual-encoder checkpoint")
            dualenc = dualenc_from_checkpoint(_as_checkpoint(pretrained))
        if tuple(dualenc.vocab) != tuple(dataset.vocab):
            raise TrainingError("dual encoder vocabulary does not match the dataset")
        dualenc.clear_prompt_cache()
    opt_agent = tc.Adam(agent.named_parameters(), lr=cfg.lr_agent, clip_norm=cfg.grad_clip)
    opt_dual = (tc.Adam(dualenc.named_parameters(), lr=cfg.lr_dualenc, clip_norm=cfg.grad_clip)
                if dualenc is not None else None)
    rng = np.random.default_rng(cfg.seed)
    steps_done = 0
    if resume is not None:
        agent.load_state_dict(resume.section("agent"))
        opt_agent.load_state_dict(resume.section("opt.agent"), resume.config["meta"]["opt_agent_steps"])
        if opt_dual is not None:
            opt_dual.load_state_dict(resume.section("opt.dualenc"),
                                     resume.config["meta"]["opt_dualenc_steps"])
        rng.bit_generator.state = resume.rng_state
        steps_done = resume.config["meta"]["steps"]

    records: list[dict] = []
    step_losses: list[dict] = []
    log_fh = open(log_path, "a", encoding="utf-8") if log_path else None

    def emit(rec):
        records.append(rec)
        if log_fh:
            log_fh.write(json.dumps(rec, sort_keys=True) + "\n")
            log_fh.flush()

    last_epoch = cfg.epochs if stop_after_epoch is None else min(cfg.epochs, stop_after_epoch)
    epoch = start_epoch
    try:
        for epoch in range(start_epoch + 1, last_epoch + 1):
            order = rng.permutation(len(train_eps))
            sums: dict[str, float] = {}
            n = 0
            for i in range(0, len(order), cfg.batch_size):
                if max_steps is not None and steps_done >= max_steps:
                    break
                batch = make_batch([train_eps[j] for j in order[i:i + cfg.batch_size]],
                                   dataset.encode, agent.bos)
                rec = train_step(agent, dualenc, batch, cfg, opt_agent, opt_dual)
                steps_done += 1
                step_losses.append(rec)
                for k, v in rec.items():
                    sums[k] = sums.get(k, 0.0) + v
                n += 1
            emit({"epoch": epoch, "split": "train", **{k: v / max(n, 1) for k, v in sums.items()}})
            if cfg.eval_every and epoch % cfg.eval_every == 0:
                emit({"epoch": epoch, "split": cfg.eval_split,
                      **_metrics(evaluate(agent, dataset.splits[cfg.eval_split], dataset,
                                          cfg.max_rollout_steps), cfg.eval_split)})
            if max_steps is not None and steps_done >= max_steps:
                break
    finally:
        if log_fh:
            log_fh.close()
    ckpt = _run_checkpoint(cfg, agent_cfg, dataset, shape, agent, dualenc, opt_agent, opt_dual,
                           rng, epoch, steps_done)
    return TrainResult(ckpt, agent, dualenc, records, step_losses)


def _metrics(results, split) -> dict:
    rep = build_report(results, split)
    agg = rep.rows["all"]
    return {"success_rate": agg.success_rate,
            "goal_conditioned_success_rate": agg.goal_conditioned_success_rate,
            "episodes": agg.count}
