"""Loss functions with analytic gradients.

Four losses on unit-norm embeddings: supervised contrastive (supcon),
additive angular margin softmax (arcface), their sum (aamsupcon), and a
plain scaled-softmax cross-entropy baseline. Each returns the scalar value
together with exact gradients w.r.t. the embedding matrix and the
class-weight matrix.

Gradient semantics: the loss is differentiated as a function of the raw
input matrices. Inputs are required to be unit-norm at construction, but no
re-normalization happens inside the loss, so the gradients are plain
Euclidean gradients and finite differences in ambient space reproduce them.
All softmax-shaped expressions use max-subtracted log-sum-exp.
"""

from dataclasses import dataclass
from enum import Enum

import numpy as np

from . import geometry
from .errors import (
    AnchorWithoutCandidate,
    AnchorWithoutPositive,
    BatchTooSmall,
    InvalidMargin,
    InvalidScale,
)

# Embedding and class-weight rows must be unit length to within this.
UNIT_NORM_TOL = 1e-9


class LossKind(Enum):
    SOFTMAX = "softmax"
    ARCFACE = "arcface"
    SUPCON = "supcon"
    AAMSUPCON = "aamsupcon"


class DenominatorConvention(Enum):
    """Which indices enter the contrastive denominator for anchor i.

    ALL_NON_ANCHOR: every j != i (canonical supervised-contrastive form).
    STRICT_NEGATIVES: only j with labels[j] != labels[i].
    """

    ALL_NON_ANCHOR = "all_non_anchor"
    STRICT_NEGATIVES = "strict_negatives"


@dataclass
class LossInputs:
    """One batch as the losses see it.

    embeddings: (N, d) unit-norm rows. labels: (N,) ints in [0, C).
    class_weights: (C, d) unit-norm rows. temperature divides the
    contrastive similarities, margin is the additive angle penalty in
    [0, pi/2), and scale multiplies the cosine logits.
    """

    embeddings: np.ndarray
    labels: np.ndarray
    class_weights: np.ndarray
    temperature: float = 0.07
    margin: float = 0.2
    scale: float = 30.0

    def __post_init__(self):
        self.embeddings = np.asarray(self.embeddings, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.class_weights = np.asarray(self.class_weights, dtype=np.float64)


@dataclass
class LossOutput:
    value: float
    grad_embeddings: np.ndarray
    grad_class_weights: np.ndarray


@dataclass
class IndexSets:
    """Per-anchor positive and denominator index lists (anchor excluded)."""

    positives: list
    candidates: list


@dataclass
class GradCheckReport:
    max_rel_error: float
    mean_rel_error: float
    num_components: int


def validate_inputs(inputs: LossInputs) -> None:
    """Check the LossInputs invariants, raising on violation."""
    z, y, w = inputs.embeddings, inputs.labels, inputs.class_weights
    if z.ndim != 2 or w.ndim != 2 or y.ndim != 1:
        raise ValueError("embeddings/class_weights must be 2-D, labels 1-D")
    if z.shape[0] != y.shape[0]:
        raise ValueError(f"{z.shape[0]} embeddings but {y.shape[0]} labels")
    if z.shape[1] != w.shape[1]:
        raise ValueError(
            f"embedding dim {z.shape[1]} != class-weight dim {w.shape[1]}")
    if y.size and (y.min() < 0 or y.max() >= w.shape[0]):
        raise ValueError(f"labels must lie in [0, {w.shape[0]})")
    for name, mat in (("embedding", z), ("class_weight", w)):
        norms = np.linalg.norm(mat, axis=1)
        drift = float(np.max(np.abs(norms - 1.0))) if norms.size else 0.0
        if drift > UNIT_NORM_TOL:
            raise ValueError(f"{name} rows deviate from unit norm by {drift:.3e}")
    if not inputs.temperature > 0:
        raise ValueError(f"temperature must be > 0, got {inputs.temperature}")
    if not inputs.scale > 0:
        raise InvalidScale(f"scale must be > 0, got {inputs.scale}")
    if not (0.0 <= inputs.margin < np.pi / 2):
        raise InvalidMargin(f"margin must be in [0, pi/2), got {inputs.margin}")


def build_index_sets(labels, convention=DenominatorConvention.ALL_NON_ANCHOR) -> IndexSets:
    """Construct P(i) and the denominator set A(i) for every anchor.

    P(i) holds all j != i sharing the anchor's label; A(i) depends on the
    convention. Raises BatchTooSmall for N < 2, AnchorWithoutPositive when
    some anchor has no same-label partner, and AnchorWithoutCandidate when
    the strict-negatives convention leaves a denominator empty.
    """
    labels = np.asarray(labels, dtype=np.int64)
    n = labels.shape[0]
    if n < 2:
        raise BatchTooSmall(f"need at least 2 samples, got {n}")
    everyone = np.arange(n)
    positives, candidates = [], []
    for i in range(n):
        same = everyone[(labels == labels[i]) & (everyone != i)]
        if same.size == 0:
            raise AnchorWithoutPositive(f"anchor {i} (label {labels[i]}) has no positive")
        if convention is DenominatorConvention.ALL_NON_ANCHOR:
            cand = everyone[everyone != i]
        else:
            cand = everyone[labels != labels[i]]
            if cand.size == 0:
                raise AnchorWithoutCandidate(
                    f"anchor {i}: no negatives in a single-class batch")
        positives.append(same)
        candidates.append(cand)
    return IndexSets(positives, candidates)


def _check_sets(sets: IndexSets, n: int) -> None:
    if len(sets.positives) != n or len(sets.candidates) != n:
        raise ValueError(f"index sets cover {len(sets.positives)} anchors, batch has {n}")
    for i in range(n):
        pos = np.asarray(sets.positives[i])
        cand = np.asarray(sets.candidates[i])
        if pos.size == 0:
            raise AnchorWithoutPositive(f"anchor {i} has no positive")
        if cand.size == 0:
            raise AnchorWithoutCandidate(f"anchor {i} has no candidates")
        if np.any(pos == i) or np.any(cand == i):
            raise ValueError(f"anchor {i} appears in its own index sets")


def _masks_from_sets(sets: IndexSets, n: int):
    pos = np.zeros((n, n), dtype=bool)
    cand = np.zeros((n, n), dtype=bool)
    for i in range(n):
        pos[i, np.asarray(sets.positives[i], dtype=np.int64)] = True
        cand[i, np.asarray(sets.candidates[i], dtype=np.int64)] = True
    return pos, cand


def _supcon_raw(z: np.ndarray, sets: IndexSets, tau: float):
    """Value and d/dz of the contrastive sum, no input validation."""
    n = z.shape[0]
    pos_mask, cand_mask = _masks_from_sets(sets, n)
    pcount = pos_mask.sum(axis=1).astype(np.float64)

    sims = (z @ z.T) / tau
    masked = np.where(cand_mask, sims, -np.inf)
    row_max = masked.max(axis=1)
    shifted_exp = np.exp(masked - row_max[:, None])
    denom = shifted_exp.sum(axis=1)
    lse = row_max + np.log(denom)

    pos_sums = np.where(pos_mask, sims, 0.0).sum(axis=1)
    value = float(np.sum(lse - pos_sums / pcount))

    # d(value)/d(sims): softmax weight on candidates minus 1/|P(i)| on positives.
    soft = shifted_exp / denom[:, None]
    g = (soft - pos_mask / pcount[:, None]) / tau
    grad_z = (g + g.T) @ z
    return value, grad_z


def _margin_softmax_raw(z, labels, w, margin, scale):
    """Cross-entropy over scaled cosine logits with the target column
    penalized by the angular margin; margin == 0 is the plain softmax path.
    Returns (value, grad_z, grad_w) without input validation."""
    n = z.shape[0]
    rows = np.arange(n)
    cosines = z @ w.T
    logits = cosines.copy()
    if margin != 0.0:
        logits[rows, labels] = geometry.margin_logit(cosines[rows, labels], margin)
    logits *= scale

    row_max = logits.max(axis=1)
    shifted = logits - row_max[:, None]
    exp_shifted = np.exp(shifted)
    sumexp = exp_shifted.sum(axis=1)
    lse = row_max + np.log(sumexp)
    value = float(np.mean(lse - logits[rows, labels]))

    d = exp_shifted / sumexp[:, None]
    d[rows, labels] -= 1.0
    d *= scale / n
    if margin != 0.0:
        d[rows, labels] *= geometry.margin_logit_grad(cosines[rows, labels], margin)
    grad_z = d @ w
    grad_w = d.T @ z
    return value, grad_z, grad_w


def supcon_loss(inputs: LossInputs, sets: IndexSets) -> LossOutput:
    """Supervised contrastive loss summed over anchors.

    value = sum_i (-1/|P(i)|) sum_{p in P(i)}
            log[ exp(z_i.z_p / tau) / sum_{a in A(i)} exp(z_i.z_a / tau) ]
    """
    validate_inputs(inputs)
    _check_sets(sets, inputs.embeddings.shape[0])
    value, grad_z = _supcon_raw(inputs.embeddings, sets, inputs.temperature)
    return LossOutput(value, grad_z, np.zeros_like(inputs.class_weights))


def arcface_loss(inputs: LossInputs) -> LossOutput:
    """Additive angular margin softmax over class-weight cosines.

    value = -(1/N) sum_i log[ e^{s cos(theta_yi + m)} /
            (e^{s cos(theta_yi + m)} + sum_{j != yi} e^{s cos theta_j}) ]
    """
    validate_inputs(inputs)
    value, grad_z, grad_w = _margin_softmax_raw(
        inputs.embeddings, inputs.labels, inputs.class_weights,
        inputs.margin, inputs.scale)
    return LossOutput(value, grad_z, grad_w)


def softmax_loss(inputs: LossInputs) -> LossOutput:
    """Plain cross-entropy over logits s * (z . W^T); the no-margin baseline."""
    validate_inputs(inputs)
    value, grad_z, grad_w = _margin_softmax_raw(
        inputs.embeddings, inputs.labels, inputs.class_weights, 0.0, inputs.scale)
    return LossOutput(value, grad_z, grad_w)


def aamsupcon_loss(inputs: LossInputs, sets: IndexSets, lam: float = 1.0) -> LossOutput:
    """Margin softmax plus lam times the contrastive term (lam = 1 default).

    lam = 0 degenerates to arcface_loss exactly; the index sets are still
    validated so malformed batches fail regardless of lam.
    """
    validate_inputs(inputs)
    _check_sets(sets, inputs.embeddings.shape[0])
    arc = arcface_loss(inputs)
    if lam == 0.0:
        return arc
    sup = supcon_loss(inputs, sets)
    return LossOutput(
        arc.value + lam * sup.value,
        arc.grad_embeddings + lam * sup.grad_embeddings,
        arc.grad_class_weights + lam * sup.grad_class_weights,
    )


def evaluate_loss(kind: LossKind, inputs: LossInputs, sets: IndexSets | None = None,
                  lam: float = 1.0) -> LossOutput:
    """Dispatch one of the four losses; builds default index sets if the
    contrastive term needs them and none were supplied."""
    if kind in (LossKind.SUPCON, LossKind.AAMSUPCON) and sets is None:
        sets = build_index_sets(inputs.labels)
    if kind is LossKind.SOFTMAX:
        return softmax_loss(inputs)
    if kind is LossKind.ARCFACE:
        return arcface_loss(inputs)
    if kind is LossKind.SUPCON:
        return supcon_loss(inputs, sets)
    if kind is LossKind.AAMSUPCON:
        return aamsupcon_loss(inputs, sets, lam)
    raise ValueError(f"unknown loss kind {kind!r}")


def loss_value_unchecked(kind: LossKind, embeddings, labels, class_weights,
                         temperature: float = 0.07, margin: float = 0.2,
                         scale: float = 30.0, sets: IndexSets | None = None,
                         lam: float = 1.0) -> float:
    """Scalar loss value with no invariant validation.

    Exists for finite-difference harnesses, which perturb raw entries and
    therefore evaluate slightly off the unit sphere. sets must be supplied
    for the contrastive kinds (they depend only on labels, so a harness
    builds them once).
    """
    z = np.asarray(embeddings, dtype=np.float64)
    w = None if class_weights is None else np.asarray(class_weights, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    if kind is LossKind.SUPCON:
        return _supcon_raw(z, sets, temperature)[0]
    if kind is LossKind.SOFTMAX:
        return _margin_softmax_raw(z, y, w, 0.0, scale)[0]
    if kind is LossKind.ARCFACE:
        return _margin_softmax_raw(z, y, w, margin, scale)[0]
    if kind is LossKind.AAMSUPCON:
        arc = _margin_softmax_raw(z, y, w, margin, scale)[0]
        return arc + lam * _supcon_raw(z, sets, temperature)[0]
    raise ValueError(f"unknown loss kind {kind!r}")


def relative_errors(analytic: np.ndarray, numeric: np.ndarray) -> np.ndarray:
    """Per-component relative error between two gradients.

    Each difference is divided by max(|analytic_i|, |numeric_i|, floor)
    where floor = max(1e-8, 1e-3 * overall gradient magnitude). The floor
    keeps components that are tiny relative to the gradient scale (and
    therefore dominated by finite-difference round-off) from reporting
    spurious errors, while leaving every component that matters under a
    true relative comparison.
    """
    analytic = np.asarray(analytic, dtype=np.float64).ravel()
    numeric = np.asarray(numeric, dtype=np.float64).ravel()
    gscale = max(float(np.max(np.abs(analytic), initial=0.0)),
                 float(np.max(np.abs(numeric), initial=0.0)))
    floor = max(1e-8, 1e-3 * gscale)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / denom


def grad_check(kind: LossKind, inputs: LossInputs, step: float = 1e-6,
               convention=DenominatorConvention.ALL_NON_ANCHOR,
               lam: float = 1.0, corrupt: float = 0.0) -> GradCheckReport:
    """Compare analytic gradients against central finite differences.

    Perturbations are applied to the raw embedding and class-weight entries
    (no re-normalization), matching the gradient semantics above. Returns
    the max and mean per-component relative error over both matrices.

    corrupt is a negative-control hook: a nonzero value is added to one
    analytic gradient component before the comparison and must make the
    check fail.
    """
    if step <= 0:
        raise ValueError(f"step must be > 0, got {step}")
    validate_inputs(inputs)
    sets = None
    if kind in (LossKind.SUPCON, LossKind.AAMSUPCON):
        sets = build_index_sets(inputs.labels, convention)
    analytic = evaluate_loss(kind, inputs, sets, lam)
    if corrupt != 0.0:
        analytic.grad_embeddings = analytic.grad_embeddings.copy()
        analytic.grad_embeddings[0, 0] += corrupt

    def value_at(z, w):
        return loss_value_unchecked(kind, z, inputs.labels, w,
                                    inputs.temperature, inputs.margin,
                                    inputs.scale, sets, lam)

    def central_diff(base):
        grad = np.zeros_like(base)
        for idx in np.ndindex(base.shape):
            orig = base[idx]
            base[idx] = orig + step
            hi = value_at(inputs.embeddings, inputs.class_weights)
            base[idx] = orig - step
            lo = value_at(inputs.embeddings, inputs.class_weights)
            base[idx] = orig
            grad[idx] = (hi - lo) / (2.0 * step)
        return grad

    fd_z = central_diff(inputs.embeddings)
    fd_w = central_diff(inputs.class_weights)
    errors = np.concatenate([
        relative_errors(analytic.grad_embeddings, fd_z),
        relative_errors(analytic.grad_class_weights, fd_w),
    ])
    return GradCheckReport(
        max_rel_error=float(errors.max()),
        mean_rel_error=float(errors.mean()),
        num_components=int(errors.size),
    )
