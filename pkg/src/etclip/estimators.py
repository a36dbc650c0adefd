"""scikit-learn style wrappers around the dual encoder and the agent."""
from __future__ import annotations

from typing import Sequence

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from . import tensorcore as tc
from .agent import AgentConfig
from .dualenc import DualEncoderConfig
from .evalkit import build_report
from .trainer import ConfigError, PretrainConfig, TrainConfig, evaluate, fit_dual_encoder, train
from .worldgen import OBJECT_VOCAB, Dataset, Episode, build_token_vocab


def check_frames(X, frame_shape: tuple | None = None) -> np.ndarray:
    """Validate a stack of RGB frames (N, H, W, 3): uint8, or float in [0, 1]."""
    X = np.asarray(X)
    if X.ndim == 3:
        X = X[None]
    if X.ndim != 4 or X.shape[-1] != 3:
        raise ValueError(f"expected frames of shape (N, H, W, 3), got {X.shape}")
    if len(X) == 0:
        raise ValueError("no frames given")
    if X.dtype != np.uint8:
        X = X.astype(np.float32)
        if not np.all(np.isfinite(X)) or X.min() < 0.0 or X.max() > 1.0:
            raise ValueError("float frames must be finite and lie in [0, 1]")
    if frame_shape is not None and tuple(X.shape[1:]) != tuple(frame_shape):
        raise ValueError(f"frame shape {X.shape[1:]} does not match fitted {tuple(frame_shape)}")
    return X


def check_captions(y, n: int) -> list[str]:
    y = [str(c) for c in y]
    if len(y) != n:
        raise ValueError(f"{n} frames but {len(y)} captions")
    if any(not c.strip() for c in y):
        raise ValueError("captions must be non-empty")
    return y


def check_alpha(alpha) -> float:
    alpha = float(alpha)
    if not 0.0 <= alpha <= 1.0:
        raise ConfigError(f"alpha must lie in [0, 1], got {alpha}")
    return alpha


class ZeroShotObjectClassifier(ClassifierMixin, TransformerMixin, BaseEstimator):
    """Contrastively trained dual encoder exposed as an object classifier.

    ``fit`` takes frames and free-text captions; ``predict`` labels frames by
    their nearest object prompt, and ``transform`` returns image embeddings.
    ``score`` expects integer object ids.
    """

    def __init__(self, epochs: int = 15, batch_size: int = 64, lr: float = 1e-3, d: int = 64,
                 layers: int = 2, init_temperature: float = 0.07, vocab: Sequence[str] | None = None,
                 random_state: int = 0):
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.d = d
        self.layers = layers
        self.init_temperature = init_temperature
        self.vocab = vocab
        self.random_state = random_state

    def fit(self, X, y):
        X = check_frames(X)
        y = check_captions(y, len(X))
        vocab = list(self.vocab) if self.vocab is not None else build_token_vocab()
        cfg = PretrainConfig(epochs=self.epochs, batch_size=self.batch_size, lr=self.lr,
                             seed=self.random_state)
        mcfg = DualEncoderConfig(d=self.d, layers=self.layers, init_temperature=self.init_temperature)
        self.model_, _, self.history_ = fit_dual_encoder(X, y, vocab, cfg, mcfg)
        self.model_.build_prompt_cache()
        self.classes_ = np.arange(len(OBJECT_VOCAB))
        return self

    def decision_function(self, X) -> np.ndarray:
        check_is_fitted(self, "model_")
        X = check_frames(X, self.model_.frame_shape)
        return self.model_.zero_shot_object_logits(X).data.copy()

    def predict_proba(self, X) -> np.ndarray:
        return tc.softmax(tc.Tensor(self.decision_function(X)), axis=-1).data

    def predict(self, X) -> np.ndarray:
        return np.argmax(self.decision_function(X), axis=-1)

    def transform(self, X) -> np.ndarray:
        check_is_fitted(self, "model_")
        return self.model_.encode_image(check_frames(X, self.model_.frame_shape)).data.copy()


class InstructionFollower(BaseEstimator):
    """Agent trained by imitation on a generated :class:`Dataset`.

    ``predict`` rolls the agent out and returns per-episode results; ``score``
    is the goal-conditioned success rate in percent.
    """

    def __init__(self, mode: str = "baseline", alpha: float = 0.5, epochs: int = 20,
                 batch_size: int = 16, lr: float = 3e-3, dualenc_checkpoint=None,
                 max_steps: int = 48, random_state: int = 0):
        self.mode = mode
        self.alpha = alpha
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.dualenc_checkpoint = dualenc_checkpoint
        self.max_steps = max_steps
        self.random_state = random_state

    def fit(self, X: Dataset, y=None):
        if not isinstance(X, Dataset):
            raise TypeError("fit expects a worldgen Dataset")
        cfg = TrainConfig(mode=self.mode, alpha=check_alpha(self.alpha), epochs=self.epochs,
                          batch_size=self.batch_size, lr_agent=self.lr, seed=self.random_state,
                          max_rollout_steps=self.max_steps)
        pretrained = self.dualenc_checkpoint if self.mode == "clip_aux" else None
        result = train(X, cfg, AgentConfig(), pretrained=pretrained)
        self.agent_, self.dataset_ = result.agent, X
        self.log_ = result.log
        return self

    def predict(self, X: Sequence[Episode]):
        check_is_fitted(self, "agent_")
        if not len(X):
            raise ValueError("no episodes given")
        return evaluate(self.agent_, X, self.dataset_, self.max_steps)

    def score(self, X: Sequence[Episode], y=None) -> float:
        agg = build_report(self.predict(X), "score").rows["all"]
        return agg.goal_conditioned_success_rate
