"""Adam and the training phases.

Freezing is structural: each phase marks only its trainable groups as
requiring gradients and hands only those parameters to the optimizer.

Phases:
    pretrain_encoder  encoder alone, language-ID cross-entropy on seen languages
    train_stage1      projection + classifiers + downstream head, encoder frozen
    train_stage2      downstream head only, on a small budget of an unseen language
    train_scratch     fresh model on the low-resource budget (no pretraining)
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import losses
from . import tensor as T
from .config import ConfigError, TrainConfig
from .losses import LossReport
from .model import CLASSIFIERS, DOWNSTREAM, ENCODER, PROJECTION, ModelGraph
from .synthdata import ArraySet, CorpusManifest, load_arrays
from .tensor import Tensor

log = logging.getLogger(__name__)

_PHASE_TAGS = {"encoder": 1, "stage1": 2, "stage2": 3, "scratch": 4}


class TrainingError(RuntimeError):
    pass


class AccuracyGateError(TrainingError):
    pass


class NaNLossError(TrainingError):
    def __init__(self, step: int, last: LossReport | None):
        super().__init__(f"non-finite loss at step {step}; last finite report: {last}")
        self.step = step
        self.last = last


def adam_step(params, grads, state, lr, beta1=0.9, beta2=0.999, eps=1e-8) -> None:
    """In-place Adam update with bias correction.

    ``params``/``grads`` are parallel lists of arrays; ``state`` is a dict
    holding ``t`` and per-parameter first/second moment lists.
    """
    if "m" not in state:
        state["t"] = 0
        state["m"] = [np.zeros_like(p) for p in params]
        state["v"] = [np.zeros_like(p) for p in params]
    if len(state["m"]) != len(params) or len(grads) != len(params):
        raise ValueError("adam_step: params, grads and state have different lengths")
    state["t"] += 1
    t = state["t"]
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    for i, (p, g) in enumerate(zip(params, grads)):
        m, v = state["m"][i], state["v"][i]
        if p.shape != g.shape or p.shape != m.shape:
            raise ValueError(f"adam_step: shape mismatch param {p.shape} grad {g.shape} state {m.shape}")
        with np.errstate(over="ignore", invalid="ignore"):
            m *= beta1
            m += (1.0 - beta1) * g
            v *= beta2
            v += (1.0 - beta2) * g * g
        if not (np.isfinite(m).all() and np.isfinite(v).all()):
            raise T.NumericalError(f"adam_step: non-finite moment for parameter {i} at t={t}")
        p -= lr * (m / c1) / (np.sqrt(v / c2) + eps)


class Adam:
    def __init__(self, params: dict[str, Tensor], lr=1e-3, betas=(0.9, 0.999), eps=1e-8):
        self.names = sorted(params)
        self.params = [params[n] for n in self.names]
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.state: dict = {}

    @classmethod
    def from_config(cls, params, config: TrainConfig) -> Adam:
        return cls(params, config.learning_rate, (config.adam_beta1, config.adam_beta2), config.adam_eps)

    def step(self) -> None:
        grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in self.params]
        adam_step([p.data for p in self.params], grads, self.state, self.lr, *self.betas, self.eps)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


class BatchSampler:
    """Deterministic epoch-wise shuffling."""

    def __init__(self, n: int, batch_size: int, seed: int, phase: str):
        self.n = n
        self.batch_size = min(batch_size, n)
        self.rng = np.random.default_rng(np.random.SeedSequence([seed, _PHASE_TAGS[phase]]))
        self._order = np.empty(0, dtype=np.int64)

    def next(self) -> np.ndarray:
        if len(self._order) < self.batch_size:
            self._order = np.concatenate([self._order, self.rng.permutation(self.n)])
        batch, self._order = self._order[: self.batch_size], self._order[self.batch_size :]
        return np.sort(batch)


@dataclass
class Splits:
    seen_train: ArraySet
    seen_eval: ArraySet
    unseen_pool: ArraySet
    unseen_eval: ArraySet

    @classmethod
    def load(cls, manifest: CorpusManifest) -> Splits:
        seen, unseen = manifest.seen_languages, manifest.unseen_languages
        return cls(
            load_arrays(manifest, manifest.select("train", seen)),
            load_arrays(manifest, manifest.select("eval", seen)),
            load_arrays(manifest, manifest.select("train", unseen)),
            load_arrays(manifest, manifest.select("eval", unseen)),
        )

    def low_resource(self, budget: int, seen_languages=None) -> ArraySet:
        """First ``budget`` unseen-language train utterances in manifest order.

        The corpus is stored speaker-major, so a small budget covers few speakers.
        """
        if budget > len(self.unseen_pool):
            raise ConfigError(f"budget {budget} exceeds unseen pool of {len(self.unseen_pool)}")
        sub = self.unseen_pool.subset(np.arange(budget))
        if seen_languages is not None and np.isin(sub.y_lang, seen_languages).any():
            raise TrainingError("low-resource split contains seen-language utterances")
        return sub


def _run_steps(n_steps, step_fn, metrics=None, callback=None) -> LossReport | None:
    last = None
    for step in range(1, n_steps + 1):
        try:
            report = step_fn(step)
        except T.NumericalError:
            raise NaNLossError(step, last) from None
        if metrics is not None:
            metrics.write(report)
        last = report
        if callback is not None and callback(step, report):
            break
    return last


def _scalar(t: Tensor) -> float:
    return float(t.data)


def grl_schedule(config: TrainConfig, step: int) -> float:
    if config.grl_ramp_steps > 0:
        return config.grl_lambda * min(1.0, step / config.grl_ramp_steps)
    return config.grl_lambda


def language_accuracy(model: ModelGraph, data: ArraySet) -> float:
    z, _ = model.embed(data.frames)
    with T.no_grad():
        pred = model.encoder_logits(Tensor(z)).data.argmax(axis=1)
    return float((pred == data.y_lang).mean())


def pretrain_encoder(config: TrainConfig, model: ModelGraph, splits: Splits, metrics=None) -> dict:
    """Train the encoder on language ID; fail if held-out accuracy misses the gate."""
    params = model.set_trainable(ENCODER)
    opt = Adam.from_config(params, config)
    data = splits.seen_train
    sampler = BatchSampler(len(data), config.batch_size, config.seed, "encoder")
    info = {}

    def step_fn(step):
        idx = sampler.next()
        opt.zero_grad()
        loss = T.softmax_cross_entropy(model.encoder_logits(model.encode(data.frames[idx])), data.y_lang[idx])
        loss.backward()
        opt.step()
        v = _scalar(loss)
        return LossReport(step, v, 0.0, v, 0.0, v)

    _run_steps(config.encoder_steps, step_fn, metrics)
    model.set_trainable()
    info["steps"] = config.encoder_steps
    info["accuracy"] = language_accuracy(model, splits.seen_eval)
    log.info("encoder: %d steps, held-out language accuracy %.4f", config.encoder_steps, info["accuracy"])
    if info["accuracy"] < config.encoder_accuracy_gate:
        raise AccuracyGateError(
            f"encoder reached {info['accuracy']:.3f} < gate {config.encoder_accuracy_gate} after "
            f"{config.encoder_steps} steps; raise encoder_steps or learning_rate"
        )
    return info


def train_stage1(config: TrainConfig, model: ModelGraph, splits: Splits, metrics=None) -> LossReport:
    """Multilingual stage: task loss + language-embedding loss, encoder frozen."""
    model.sat_enabled = config.sat_enabled
    model.projection_enabled = config.projection_enabled
    model.grl_lambda = config.grl_lambda
    groups = [CLASSIFIERS, DOWNSTREAM] + ([PROJECTION] if config.projection_enabled else [])
    params = model.set_trainable(*groups)
    opt = Adam.from_config(params, config)
    data = splits.seen_train
    z_cache, _ = model.embed(data.frames)
    sampler = BatchSampler(len(data), config.batch_size, config.seed, "stage1")

    def step_fn(step):
        idx = sampler.next()
        opt.zero_grad()
        h = model.project(Tensor(z_cache[idx]))
        lang, spk = model.forward_heads(h, config.sat_enabled, grl_schedule(config, step))
        l_lang = losses.language_loss(lang, data.y_lang[idx])
        l_spk = losses.speaker_loss(spk, data.y_spk[idx])
        l_le = losses.le_loss(l_lang, l_spk)
        l_task = losses.task_loss(model.phoneme_logits(data.frames[idx], h), data.phonemes[idx])
        total = losses.composite_loss(losses.MULTILINGUAL, l_le, l_task)
        total.backward()
        opt.step()
        return LossReport(step, _scalar(l_lang), _scalar(l_spk), _scalar(l_le), _scalar(l_task), _scalar(total))

    last = _run_steps(config.stage1_steps, step_fn, metrics)
    model.set_trainable()
    return last


def train_stage2(config: TrainConfig, model: ModelGraph, splits: Splits, metrics=None) -> LossReport:
    """Low-resource stage: only the downstream head sees the unseen language."""
    config.validate()
    model.set_trainable()
    params = model.set_trainable(*config.stage2_trainable)
    opt = Adam.from_config(params, config)
    n_seen = model.n_languages
    data = splits.low_resource(config.low_resource_budget, seen_languages=np.arange(n_seen))
    _, h_cache = model.embed(data.frames)
    sampler = BatchSampler(len(data), config.batch_size, config.seed, "stage2")

    def step_fn(step):
        idx = sampler.next()
        opt.zero_grad()
        l_task = losses.task_loss(model.phoneme_logits(data.frames[idx], Tensor(h_cache[idx])), data.phonemes[idx])
        total = losses.composite_loss(losses.LOW_RESOURCE, None, l_task)
        total.backward()
        opt.step()
        v = _scalar(l_task)
        return LossReport(step, 0.0, 0.0, 0.0, v, _scalar(total))

    last = _run_steps(config.stage2_steps, step_fn, metrics)
    model.set_trainable()
    return last


def train_scratch(config: TrainConfig, splits: Splits, metrics=None) -> ModelGraph:
    """Same architecture, random init, trained only on the low-resource budget."""
    model = ModelGraph.from_config(config, seed=config.seed + 1)
    params = model.set_trainable(ENCODER, PROJECTION, DOWNSTREAM)
    params = {n: p for n, p in params.items() if not n.startswith("enc.lid")}
    opt = Adam.from_config(params, config)
    data = splits.low_resource(config.low_resource_budget)
    sampler = BatchSampler(len(data), config.batch_size, config.seed, "scratch")

    def step_fn(step):
        idx = sampler.next()
        opt.zero_grad()
        h = model.project(model.encode(data.frames[idx]), enabled=True)
        l_task = losses.task_loss(model.phoneme_logits(data.frames[idx], h), data.phonemes[idx])
        l_task.backward()
        opt.step()
        v = _scalar(l_task)
        return LossReport(step, 0.0, 0.0, 0.0, v, v)

    _run_steps(config.stage2_steps, step_fn, metrics)
    model.set_trainable()
    return model

