"""Adam and the three-stage training driver.

Stage 1 shapes the embedding space with angular-margin, contrastive and center
losses over generator classes; stage 2 trains the binary head (and backbone)
with cross-entropy under Mixup; stage 3 fine-tunes the head alone with the
backbone frozen.
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import losses
from .errors import EmptyDataset, MissingGeneratorLabels, ShapeMismatch
from .mixup import MixupConfig, mixup_batch
from .model import ModelParams, bind, embed_all, forward_embedding, head_logits, save_checkpoint, set_frozen

logger = logging.getLogger(__name__)

LOSS_NAMES = ("asoftmax", "contrastive", "center", "cross_entropy")
METRIC_LOSSES = frozenset({"asoftmax", "contrastive", "center"})


@dataclass(frozen=True)
class StageConfig:
    stage_id: int
    epochs: int
    learning_rate: float
    losses: frozenset
    mixup: bool = False
    backbone_frozen: bool = False

    def __post_init__(self):
        object.__setattr__(self, "losses", frozenset(self.losses))
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if not self.losses or not self.losses <= set(LOSS_NAMES):
            raise ValueError(f"losses must be a nonempty subset of {LOSS_NAMES}")
        if self.losses & METRIC_LOSSES and "cross_entropy" in self.losses:
            raise ValueError("a stage trains either embedding losses or cross-entropy, not both")


DEFAULT_STAGES = (
    StageConfig(1, 20, 5e-4, frozenset({"asoftmax", "contrastive", "center"}), mixup=False, backbone_frozen=False),
    StageConfig(2, 10, 1e-5, frozenset({"cross_entropy"}), mixup=True, backbone_frozen=False),
    StageConfig(3, 5, 1e-6, frozenset({"cross_entropy"}), mixup=False, backbone_frozen=True),
)


def plain_stage(epochs: int, learning_rate: float = 5e-4, mixup: bool = True) -> StageConfig:
    """Single cross-entropy stage used for the baseline test cases."""
    return StageConfig(1, epochs, learning_rate, frozenset({"cross_entropy"}), mixup=mixup)


@dataclass(frozen=True)
class LossSettings:
    weights: tuple[float, float, float] = (1.0, 1.0, 1.0)
    margin: int = 2
    contrastive_margin: float = 1.0
    center_update_rate: float = 0.5
    # target-logit blend for the angular margin: lam = max(lam_min, lam_base / (1 + lam_gamma * step))
    lam_base: float = 1000.0
    lam_gamma: float = 0.12
    lam_min: float = 5.0

    def lam_at(self, step: int) -> float:
        return max(self.lam_min, self.lam_base / (1.0 + self.lam_gamma * step))


@dataclass
class TrainingData:
    """Normalised spectrograms with binary labels and generator class ids.

    ``class_ids`` is 0 for bonafide and 1..G for the G fake generators.
    """

    features: np.ndarray
    labels: np.ndarray
    class_ids: np.ndarray | None = None

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.class_ids is not None:
            self.class_ids = np.asarray(self.class_ids, dtype=np.int64)

    def __len__(self):
        return self.features.shape[0]


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamState, lr: float):
    """Bias-corrected Adam. Only names present in ``grads`` move; arrays are replaced, not mutated."""
    state.step += 1
    t = state.step
    new = dict(params)
    for name, g in grads.items():
        p = params[name]
        if g.shape != p.shape:
            raise ShapeMismatch(f"gradient for {name} has shape {g.shape}, parameter {p.shape}")
        m = state.m.get(name, np.zeros_like(p))
        v = state.v.get(name, np.zeros_like(p))
        m = state.beta1 * m + (1 - state.beta1) * g
        v = state.beta2 * v + (1 - state.beta2) * g * g
        state.m[name], state.v[name] = m, v
        m_hat = m / (1 - state.beta1**t)
        v_hat = v / (1 - state.beta2**t)
        new[name] = p - lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return new, state


@dataclass
class TrainLog:
    records: list[dict] = field(default_factory=list)
    seeds: dict[str, int] = field(default_factory=dict)

    def extend(self, other: "TrainLog") -> None:
        self.records.extend(other.records)
        self.seeds.update(other.seeds)

    def to_jsonl(self) -> str:
        return "".join(json.dumps(r, sort_keys=True) + "\n" for r in self.records)

    def write(self, path) -> None:
        Path(path).write_text(self.to_jsonl())

    @classmethod
    def read(cls, path) -> "TrainLog":
        lines = Path(path).read_text().splitlines()
        return cls([json.loads(line) for line in lines if line.strip()])


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        idx = order[start : start + batch_size]
        if idx.size >= 2:
            yield idx


def _grads_by_name(grads: dict[ad.Tensor, np.ndarray], tensors: dict[str, ad.Tensor]) -> dict[str, np.ndarray]:
    return {name: grads[t] for name, t in tensors.items() if t in grads}


def run_stage(
    model: ModelParams,
    data: TrainingData,
    cfg: StageConfig,
    seed: int = 0,
    bank: losses.CenterBank | None = None,
    mixup_cfg: MixupConfig = MixupConfig(),
    loss_cfg: LossSettings = LossSettings(),
    batch_size: int = 16,
):
    """Train ``cfg.epochs`` epochs; returns ``(model, bank, log)``. The input model is not modified."""
    if len(data) == 0:
        raise EmptyDataset("no training examples")
    uses_metric = bool(cfg.losses & METRIC_LOSSES)
    if uses_metric and data.class_ids is None:
        raise MissingGeneratorLabels(f"stage {cfg.stage_id} needs generator class ids")
    if bank is None:
        bank = losses.CenterBank.zeros(model.embedding_dim, loss_cfg.center_update_rate)

    model = set_frozen(model.copy(), "backbone", cfg.backbone_frozen)
    log = TrainLog(seeds={f"stage{cfg.stage_id}": seed})
    if cfg.epochs == 0:
        return model, bank, log

    shuffle_rng = np.random.default_rng([seed, cfg.stage_id, 0])
    mix_rng = np.random.default_rng([seed, cfg.stage_id, 1])
    state = AdamState()
    trainable = {"backbone", "asoftmax"} if uses_metric else {"backbone", "head"}
    onehot = np.eye(2)[data.labels]

    # a frozen backbone without mixup sees fixed inputs: embed once, train the head on the cache
    cached = None
    if cfg.backbone_frozen and not cfg.mixup and not uses_metric:
        cached = embed_all(model, data.features, batch_size=32)

    step = 0
    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        totals: dict[str, float] = {}
        seen = 0
        for idx in _batches(len(data), batch_size, shuffle_rng):
            with ad.Graph() as graph:
                tensors = bind(model, trainable)
                if uses_metric:
                    emb = forward_embedding(model, data.features[idx], tensors)
                    lam = loss_cfg.lam_at(step)
                    loss, bank = _metric_loss(emb, tensors, data, idx, cfg, bank, loss_cfg, lam)
                else:
                    x, y = data.features[idx] if cached is None else None, onehot[idx]
                    if cfg.mixup:
                        x, y, _ = mixup_batch(x, y, mixup_cfg, mix_rng)
                    emb = ad.Tensor(cached[idx]) if cached is not None else forward_embedding(model, x, tensors)
                    loss = losses.cross_entropy(head_logits(model, emb, tensors), y)
                grads = ad.backward(loss.value, graph)
            model.params, state = adam_step(model.params, _grads_by_name(grads, tensors), state, cfg.learning_rate)
            for k, v in {"loss": loss.item(), **loss.components}.items():
                totals[k] = totals.get(k, 0.0) + v * idx.size
            seen += idx.size
            step += 1
        means = {k: v / seen for k, v in totals.items()}
        record = {
            "stage": cfg.stage_id,
            "epoch": epoch + 1,
            "loss": means.pop("loss"),
            "components": means,
            "losses": sorted(cfg.losses),
            "learning_rate": cfg.learning_rate,
            "mixup": cfg.mixup,
            "backbone_frozen": cfg.backbone_frozen,
            "wall_time": time.perf_counter() - t0,
        }
        if uses_metric:
            record["asoftmax_lambda"] = lam
        log.records.append(record)
        logger.info("stage %d epoch %d loss %.5f", cfg.stage_id, epoch + 1, record["loss"])
    model.params["centers.bonafide"] = bank.centers.copy()
    return model, bank, log


def _metric_loss(emb, tensors, data, idx, cfg, bank, loss_cfg, lam=0.0):
    weights = tuple(
        w if name in cfg.losses else 0.0
        for name, w in zip(("asoftmax", "contrastive", "center"), loss_cfg.weights)
    )
    loss, bank = losses.composite_phase1(
        emb,
        tensors["asoftmax.weight"],
        data.class_ids[idx],
        data.labels[idx],
        bank,
        weights=weights,
        margin=loss_cfg.margin,
        contrastive_margin=loss_cfg.contrastive_margin,
        lam=lam,
    )
    return loss, bank


def stage_plan(overrides: dict | None = None) -> tuple[StageConfig, ...]:
    """Default stages with optional overrides.

    ``overrides`` may hold ``epochs`` and/or ``learning_rates`` as 3-tuples.
    """
    overrides = overrides or {}
    stages = list(DEFAULT_STAGES)
    if "epochs" in overrides:
        stages = [replace(s, epochs=int(e)) for s, e in zip(stages, overrides["epochs"])]
    if "learning_rates" in overrides:
        stages = [replace(s, learning_rate=float(lr)) for s, lr in zip(stages, overrides["learning_rates"])]
    unknown = set(overrides) - {"epochs", "learning_rates"}
    if unknown:
        raise ValueError(f"unknown stage overrides {sorted(unknown)}")
    return tuple(stages)


def run_three_stage(
    model: ModelParams,
    data: TrainingData,
    overrides: dict | None = None,
    seed: int = 0,
    mixup_cfg: MixupConfig = MixupConfig(),
    loss_cfg: LossSettings = LossSettings(),
    batch_size: int = 16,
    checkpoint_dir=None,
    stages: tuple[StageConfig, ...] | None = None,
):
    """Run stages 1 -> 2 -> 3 with a fresh optimizer per stage.

    When ``checkpoint_dir`` is given a checkpoint is written after every stage.
    Returns ``(model, log)``.
    """
    if stages is None:
        stages = stage_plan(overrides)
    log = TrainLog()
    bank = None
    for cfg in stages:
        model, bank, stage_log = run_stage(
            model, data, cfg, seed=seed, bank=bank, mixup_cfg=mixup_cfg, loss_cfg=loss_cfg, batch_size=batch_size
        )
        log.extend(stage_log)
        if checkpoint_dir is not None:
            Path(checkpoint_dir, f"stage{cfg.stage_id}.ckpt").write_bytes(save_checkpoint(model))
    model = set_frozen(model, "backbone", False)
    return model, log


def stage_dict(cfg: StageConfig) -> dict:
    d = asdict(cfg)
    d["losses"] = sorted(cfg.losses)
    return d
