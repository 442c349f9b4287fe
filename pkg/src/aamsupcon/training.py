"""SGD training loop wiring batching -> model -> losses.

The loop is steps-based with a freshly sampled multiview batch per step,
classic SGD with momentum, and class-weight rows projected back onto the
sphere after every update. Fully deterministic given (config, seed): two
runs produce identical loss sequences and identical parameters.
"""

import time
from dataclasses import dataclass, field

import numpy as np

from .batching import AugmentPolicy, MultiviewBatch, build_batch
from .errors import DivergenceDetected, InvalidMargin, IoError, ZeroVector
from .geometry import normalize_rows
from .losses import (
    DenominatorConvention,
    GradCheckReport,
    LossInputs,
    LossKind,
    LossOutput,
    build_index_sets,
    evaluate_loss,
    loss_value_unchecked,
    relative_errors,
    supcon_loss,
)
from .model import (
    NetworkParams,
    ParamGrads,
    backward,
    encoder_embeddings,
    forward,
    init_params,
)


@dataclass
class TrainConfig:
    loss_kind: LossKind = LossKind.AAMSUPCON
    temperature: float = 0.07
    margin: float = 0.2
    scale: float = 30.0
    lam: float = 1.0
    convention: DenominatorConvention = DenominatorConvention.ALL_NON_ANCHOR
    learning_rate: float = 0.003
    momentum: float = 0.9
    steps: int = 1000
    batch_speakers: int = 8
    views_per_speaker: int = 2
    seed: int = 0
    encoder_hidden: tuple = (64, 64)
    proj_hidden: int = 128
    embedding_dim: int = 128
    noise_sigma: float = 0.1
    mask_max: int | None = None
    # which representation the softmax/margin classifier term consumes:
    # "projection" (the contrastive embedding z) or "encoder" (normalized h)
    classifier_space: str = "projection"

    def validate(self) -> None:
        if not self.temperature > 0:
            raise ValueError(f"temperature must be > 0, got {self.temperature}")
        if not (0.0 <= self.margin < np.pi / 2):
            raise InvalidMargin(f"margin must be in [0, pi/2), got {self.margin}")
        if not self.scale > 0:
            raise ValueError(f"scale must be > 0, got {self.scale}")
        if self.learning_rate < 0:
            raise ValueError(f"learning_rate must be >= 0, got {self.learning_rate}")
        if self.steps < 0:
            raise ValueError(f"steps must be >= 0, got {self.steps}")
        if self.classifier_space not in ("projection", "encoder"):
            raise ValueError(
                f"classifier_space must be projection|encoder, got {self.classifier_space!r}")

    def class_dim(self) -> int | None:
        return self.encoder_hidden[-1] if self.classifier_space == "encoder" else None

    def augment_policy(self) -> AugmentPolicy:
        return AugmentPolicy(self.noise_sigma, self.mask_max)


@dataclass
class StepRecord:
    step: int
    loss: float
    grad_norm: float
    wall_time: float


@dataclass
class RunLog:
    records: list = field(default_factory=list)
    config: dict = field(default_factory=dict)
    checkpoint_path: str | None = None


def _label_mapper(dataset):
    """Map raw speaker ids onto dense [0, C) indices, sorted by id."""
    ids = np.unique(np.array([s.speaker_id for s in dataset], dtype=np.int64))
    return ids, lambda labels: np.searchsorted(ids, labels)


def _build_sets(config: TrainConfig, dense_labels):
    if config.loss_kind in (LossKind.SUPCON, LossKind.AAMSUPCON):
        return build_index_sets(dense_labels, config.convention)
    return None


def _trace_loss(config: TrainConfig, params: NetworkParams, trace,
                dense_labels: np.ndarray):
    """Evaluate the configured loss on a forward trace.

    Returns (value, grad_projection, grad_encoder, grad_class_weights); the
    encoder slot is None unless the classifier term runs in encoder space."""
    kind = config.loss_kind
    z = trace.embeddings
    sets = _build_sets(config, dense_labels)
    if config.classifier_space == "projection" or kind is LossKind.SUPCON:
        inputs = LossInputs(z, dense_labels, params.class_weights,
                            config.temperature, config.margin, config.scale)
        out = evaluate_loss(kind, inputs, sets, config.lam)
        return out.value, out.grad_embeddings, None, out.grad_class_weights

    z_enc = encoder_embeddings(trace)
    cls_inputs = LossInputs(z_enc, dense_labels, params.class_weights,
                            config.temperature, config.margin, config.scale)
    cls_kind = LossKind.SOFTMAX if kind is LossKind.SOFTMAX else LossKind.ARCFACE
    cls = evaluate_loss(cls_kind, cls_inputs)
    if kind is not LossKind.AAMSUPCON:
        return cls.value, None, cls.grad_embeddings, cls.grad_class_weights
    # contrastive term stays in projection space; its class-weight slot is a
    # unit-row placeholder that supcon ignores
    dummy = np.eye(z.shape[1])[np.arange(params.num_classes) % z.shape[1]]
    sup_inputs = LossInputs(z, dense_labels, dummy,
                            config.temperature, config.margin, config.scale)
    sup = supcon_loss(sup_inputs, sets)
    return (cls.value + config.lam * sup.value,
            config.lam * sup.grad_embeddings,
            cls.grad_embeddings,
            cls.grad_class_weights)


def _trace_value_unchecked(config: TrainConfig, params: NetworkParams, trace,
                           dense_labels, sets) -> float:
    """Loss value without input validation, for finite-difference probes."""
    kind = config.loss_kind
    z = trace.embeddings
    if config.classifier_space == "projection" or kind is LossKind.SUPCON:
        return loss_value_unchecked(kind, z, dense_labels, params.class_weights,
                                    config.temperature, config.margin,
                                    config.scale, sets, config.lam)
    h = trace.encoder_act[-1] if trace.encoder_act else trace.inputs
    z_enc = h / np.linalg.norm(h, axis=1, keepdims=True)
    cls_kind = LossKind.SOFTMAX if kind is LossKind.SOFTMAX else LossKind.ARCFACE
    value = loss_value_unchecked(cls_kind, z_enc, dense_labels,
                                 params.class_weights, config.temperature,
                                 config.margin, config.scale)
    if kind is LossKind.AAMSUPCON:
        value += config.lam * loss_value_unchecked(
            LossKind.SUPCON, z, dense_labels, None, config.temperature,
            config.margin, config.scale, sets)
    return value


def loss_on_batch(config: TrainConfig, params: NetworkParams,
                  batch: MultiviewBatch) -> LossOutput:
    """Forward the batch and evaluate the configured loss on the resulting
    embeddings. Batch speaker ids must already be dense in [0, C).

    grad_embeddings covers the projection-space gradient; when the
    classifier term runs in encoder space its embedding gradient lives on
    the trainer's internal path, not here."""
    trace = forward(params, batch.features)
    value, grad_proj, _, grad_w = _trace_loss(config, params, trace, batch.labels)
    if grad_proj is None:
        grad_proj = np.zeros_like(trace.embeddings)
    return LossOutput(value, grad_proj, grad_w)


def train(config: TrainConfig, dataset):
    """Run config.steps SGD-with-momentum updates and return (params, log).

    Class weights are re-normalized after every update so the margin loss's
    cosine reading stays valid. A non-finite loss (or a collapsed projection
    output) aborts with DivergenceDetected carrying the step index.
    """
    config.validate()
    ids, to_dense = _label_mapper(dataset)
    d_in = dataset[0].features.shape[0]
    params = init_params([d_in, *config.encoder_hidden], config.proj_hidden,
                         config.embedding_dim, len(ids), config.seed,
                         class_dim=config.class_dim())
    velocity = _zeros_like_params(params)
    policy = config.augment_policy()
    rng = np.random.default_rng(config.seed)
    log = RunLog(config=config_as_dict(config))

    for step in range(config.steps):
        batch = build_batch(dataset, config.batch_speakers,
                            config.views_per_speaker, policy, rng)
        started = time.perf_counter()
        with np.errstate(all="ignore"):
            try:
                trace = forward(params, batch.features)
                value, grad_proj, grad_enc, grad_w = _trace_loss(
                    config, params, trace, to_dense(batch.labels))
            except ZeroVector as exc:
                raise DivergenceDetected(step, f"projection collapsed at step {step}") from exc
            if not np.isfinite(value):
                raise DivergenceDetected(step)
            if grad_proj is None:
                grad_proj = np.zeros_like(trace.embeddings)
            grads = backward(params, trace, grad_proj, grad_enc)
            grads.class_weights = grad_w

            grad_norm = _global_norm(grads)
            for (vw, vb), (gw, gb) in zip(velocity.encoder_layers, grads.encoder_layers):
                vw *= config.momentum
                vw += gw
                vb *= config.momentum
                vb += gb
            velocity.proj_w1 = config.momentum * velocity.proj_w1 + grads.proj_w1
            velocity.proj_w2 = config.momentum * velocity.proj_w2 + grads.proj_w2
            velocity.class_weights = (config.momentum * velocity.class_weights
                                      + grads.class_weights)
            if config.learning_rate != 0.0:
                lr = config.learning_rate
                for (w, b), (vw, vb) in zip(params.encoder_layers, velocity.encoder_layers):
                    w -= lr * vw
                    b -= lr * vb
                params.proj_w1 -= lr * velocity.proj_w1
                params.proj_w2 -= lr * velocity.proj_w2
                params.class_weights -= lr * velocity.class_weights
                params.class_weights = normalize_rows(params.class_weights)
        log.records.append(StepRecord(step, value, grad_norm,
                                      time.perf_counter() - started))
    return params, log


def _zeros_like_params(params: NetworkParams) -> ParamGrads:
    return ParamGrads(
        [(np.zeros_like(w), np.zeros_like(b)) for w, b in params.encoder_layers],
        np.zeros_like(params.proj_w1), np.zeros_like(params.proj_w2),
        np.zeros_like(params.class_weights))


def _global_norm(grads) -> float:
    total = 0.0
    for gw, gb in grads.encoder_layers:
        total += float(np.sum(gw * gw)) + float(np.sum(gb * gb))
    total += float(np.sum(grads.proj_w1 ** 2))
    total += float(np.sum(grads.proj_w2 ** 2))
    total += float(np.sum(grads.class_weights ** 2))
    return float(np.sqrt(total))


def config_as_dict(config: TrainConfig) -> dict:
    out = {}
    for key, value in vars(config).items():
        if isinstance(value, (LossKind, DenominatorConvention)):
            out[key] = value.value
        elif isinstance(value, tuple):
            out[key] = list(value)
        else:
            out[key] = value
    return out


def save_runlog(path, log: RunLog) -> None:
    """Delimited text, one record per step: step, loss, gradient norm.

    Wall times are deliberately not serialized so that reruns with the same
    config and seed produce byte-identical log files."""
    lines = ["step loss grad_norm"]
    for rec in log.records:
        lines.append("%d %.17g %.17g" % (rec.step, rec.loss, rec.grad_norm))
    try:
        with open(path, "w", encoding="ascii", newline="\n") as fh:
            fh.write("\n".join(lines) + "\n")
    except OSError as exc:
        raise IoError(f"cannot write run log to {path}: {exc}") from exc


def load_runlog(path) -> RunLog:
    try:
        with open(path, "r", encoding="ascii") as fh:
            lines = fh.read().splitlines()
    except OSError as exc:
        raise IoError(f"cannot read run log from {path}: {exc}") from exc
    log = RunLog()
    for line in lines[1:]:
        step, loss, grad_norm = line.split()
        log.records.append(StepRecord(int(step), float(loss), float(grad_norm), 0.0))
    return log


def end_to_end_grad_check(config: TrainConfig, dataset, step: float = 1e-6,
                          batch_seed: int = 0) -> GradCheckReport:
    """Finite-difference check of d(loss)/d(params) through the whole
    network (forward -> loss -> backward) on one sampled batch."""
    config.validate()
    ids, to_dense = _label_mapper(dataset)
    d_in = dataset[0].features.shape[0]
    params = init_params([d_in, *config.encoder_hidden], config.proj_hidden,
                         config.embedding_dim, len(ids), config.seed,
                         class_dim=config.class_dim())
    rng = np.random.default_rng(batch_seed)
    batch = build_batch(dataset, config.batch_speakers, config.views_per_speaker,
                        config.augment_policy(), rng)
    labels = to_dense(batch.labels)
    features = batch.features
    sets = _build_sets(config, labels)

    trace = forward(params, features)
    _, grad_proj, grad_enc, grad_w = _trace_loss(config, params, trace, labels)
    if grad_proj is None:
        grad_proj = np.zeros_like(trace.embeddings)
    grads = backward(params, trace, grad_proj, grad_enc)
    grads.class_weights = grad_w

    def value() -> float:
        return _trace_value_unchecked(config, params, forward(params, features),
                                      labels, sets)

    pairs = list(zip(_param_arrays(params), _param_arrays_of_grads(grads)))
    errors = []
    for arr, analytic in pairs:
        fd = np.zeros_like(arr)
        for idx in np.ndindex(arr.shape):
            orig = arr[idx]
            arr[idx] = orig + step
            hi = value()
            arr[idx] = orig - step
            lo = value()
            arr[idx] = orig
            fd[idx] = (hi - lo) / (2.0 * step)
        errors.append(relative_errors(analytic, fd))
    flat = np.concatenate(errors)
    return GradCheckReport(float(flat.max()), float(flat.mean()), int(flat.size))


def _param_arrays(params: NetworkParams):
    arrays = []
    for w, b in params.encoder_layers:
        arrays.extend([w, b])
    arrays.extend([params.proj_w1, params.proj_w2, params.class_weights])
    return arrays


def _param_arrays_of_grads(grads) -> list:
    arrays = []
    for gw, gb in grads.encoder_layers:
        arrays.extend([gw, gb])
    arrays.extend([grads.proj_w1, grads.proj_w2, grads.class_weights])
    return arrays
