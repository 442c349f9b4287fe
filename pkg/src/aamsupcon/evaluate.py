"""Speaker-verification evaluation: trial lists, cosine scoring, EER and
minDCF.

Both metrics come in two independent routes: a fast sorted/vectorized
implementation and a brute-force threshold sweep that recounts errors for
every candidate threshold. Both apply the same documented conventions:

* a trial is accepted when score >= threshold, so tied scores flip together;
* candidate operating points are the distinct observed scores (plus the
  all-reject point for EER, plus +-inf for minDCF);
* where the false-accept and false-reject rates cross between adjacent
  candidates, the crossing is linearly interpolated in both rates and in
  the threshold (clamped to the largest observed score at the all-reject
  end).
"""

from dataclasses import dataclass

import numpy as np

from .errors import (
    DegenerateTrials,
    IndexOutOfRange,
    InsufficientSpeakers,
    InsufficientUtterances,
    IoError,
)
from .model import NetworkParams, encoder_embeddings, forward

_FLOAT_FMT = "%.17g"


@dataclass(frozen=True)
class Trial:
    enroll_index: int
    test_index: int
    is_target: bool

    def __post_init__(self):
        if self.enroll_index == self.test_index:
            raise ValueError(f"trial pairs a sample with itself (index {self.enroll_index})")


@dataclass
class ScoredTrials:
    scores: np.ndarray
    is_target: np.ndarray

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)
        self.is_target = np.asarray(self.is_target, dtype=bool)
        if self.scores.shape != self.is_target.shape or self.scores.ndim != 1:
            raise ValueError("scores and is_target must be 1-D and equal length")
        if not (self.is_target.any() and (~self.is_target).any()):
            raise DegenerateTrials("need at least one target and one non-target trial")


@dataclass
class DcfParams:
    p_target: float = 0.01
    c_miss: float = 1.0
    c_fa: float = 1.0

    def __post_init__(self):
        if not 0.0 < self.p_target < 1.0:
            raise ValueError(f"p_target must be in (0, 1), got {self.p_target}")
        if self.c_miss <= 0 or self.c_fa <= 0:
            raise ValueError("c_miss and c_fa must be > 0")


def build_trials(dataset, trials_per_speaker: int, seed: int) -> list:
    """Per speaker: trials_per_speaker same-speaker (target) pairs and as
    many cross-speaker (non-target) pairs, sampled without replacement where
    the pair space allows. Deterministic per seed."""
    if trials_per_speaker < 1:
        raise ValueError(f"trials_per_speaker must be >= 1, got {trials_per_speaker}")
    by_speaker: dict[int, list[int]] = {}
    for idx, s in enumerate(dataset):
        by_speaker.setdefault(s.speaker_id, []).append(idx)
    if len(by_speaker) < 2:
        raise InsufficientSpeakers("non-target trials need at least 2 speakers")
    for sid, idxs in by_speaker.items():
        if len(idxs) < 2:
            raise InsufficientUtterances(f"speaker {sid} has {len(idxs)} utterance(s), needs >= 2")

    rng = np.random.default_rng(seed)
    all_indices = np.arange(len(dataset))
    trials: list[Trial] = []
    for sid in sorted(by_speaker):
        own = np.array(by_speaker[sid])
        pairs = [(int(own[a]), int(own[b]))
                 for a in range(len(own)) for b in range(a + 1, len(own))]
        for k in _sample_k(rng, len(pairs), trials_per_speaker):
            trials.append(Trial(pairs[k][0], pairs[k][1], True))

        others = all_indices[~np.isin(all_indices, own)]
        space = len(own) * len(others)
        for k in _sample_k(rng, space, trials_per_speaker):
            e, o = divmod(k, len(others))
            trials.append(Trial(int(own[e]), int(others[o]), False))
    return trials


def _sample_k(rng, space: int, count: int):
    """count draws from range(space): without replacement while possible,
    then uniformly with replacement for the excess."""
    if count <= space:
        return [int(k) for k in rng.choice(space, size=count, replace=False)]
    extra = rng.integers(0, space, size=count - space)
    return list(range(space)) + [int(k) for k in extra]


def score_trials(params: NetworkParams, dataset, trials,
                 space: str = "projection") -> ScoredTrials:
    """Cosine scores from one cached forward pass over the whole dataset.

    space selects the representation: "projection" (the final contrastive
    embedding) or "encoder" (the normalized pre-projection output)."""
    if space not in ("projection", "encoder"):
        raise ValueError(f"space must be projection|encoder, got {space!r}")
    n = len(dataset)
    for t in trials:
        if not (0 <= t.enroll_index < n and 0 <= t.test_index < n):
            raise IndexOutOfRange(
                f"trial ({t.enroll_index}, {t.test_index}) outside dataset of {n}")
    feats = np.stack([s.features for s in dataset])
    trace = forward(params, feats)
    emb = trace.embeddings if space == "projection" else encoder_embeddings(trace)
    enroll = np.array([t.enroll_index for t in trials])
    test = np.array([t.test_index for t in trials])
    scores = np.clip(np.sum(emb[enroll] * emb[test], axis=1), -1.0, 1.0)
    return ScoredTrials(scores, np.array([t.is_target for t in trials]))


def _roc_points(scored: ScoredTrials):
    """FRR/FAR at every candidate threshold (ascending distinct scores, then
    the all-reject point). FRR(t) = P(target < t); FAR(t) = P(non-target >= t)."""
    if np.all(scored.scores == scored.scores[0]):
        raise DegenerateTrials("all trial scores are equal")
    tgt = np.sort(scored.scores[scored.is_target])
    non = np.sort(scored.scores[~scored.is_target])
    uniq = np.unique(scored.scores)
    frr = np.searchsorted(tgt, uniq, side="left") / tgt.size
    far = (non.size - np.searchsorted(non, uniq, side="left")) / non.size
    frr = np.append(frr, 1.0)
    far = np.append(far, 0.0)
    thresholds = np.append(uniq, uniq[-1])  # all-reject point clamps to max score
    return frr, far, thresholds


def eer(scored: ScoredTrials):
    """Equal error rate and its threshold.

    Walks the ROC over the candidate thresholds and linearly interpolates
    the crossing where FRR - FAR changes sign. Returns (eer, threshold) with
    eer in [0, 1].
    """
    frr, far, thr = _roc_points(scored)
    diff = frr - far  # non-decreasing; starts at -1
    k = int(np.argmax(diff >= 0.0))
    if diff[k] == 0.0:
        return float(frr[k]), float(thr[k])
    j = k - 1
    alpha = -diff[j] / (diff[k] - diff[j])
    rate = frr[j] + alpha * (frr[k] - frr[j])
    threshold = thr[j] + alpha * (thr[k] - thr[j])
    return float(rate), float(threshold)


def eer_threshold_sweep(scored: ScoredTrials):
    """Brute-force EER oracle: recount both error rates for every candidate
    threshold in O(n^2) and interpolate the crossing with the same rule as
    eer(). Kept free of shared code with the fast route."""
    scores = [float(s) for s in scored.scores]
    labels = [bool(t) for t in scored.is_target]
    if all(s == scores[0] for s in scores):
        raise DegenerateTrials("all trial scores are equal")
    targets = [s for s, t in zip(scores, labels) if t]
    nons = [s for s, t in zip(scores, labels) if not t]
    candidates = sorted(set(scores))
    points = []
    for u in candidates:
        frr = sum(1 for s in targets if s < u) / len(targets)
        far = sum(1 for s in nons if s >= u) / len(nons)
        points.append((frr, far, u))
    points.append((1.0, 0.0, candidates[-1]))
    for (frr0, far0, t0), (frr1, far1, t1) in zip(points, points[1:]):
        d0, d1 = frr0 - far0, frr1 - far1
        if d0 >= 0.0:
            return frr0, t0
        if d1 >= 0.0:
            if d1 == 0.0:
                return frr1, t1
            alpha = -d0 / (d1 - d0)
            return frr0 + alpha * (frr1 - frr0), t0 + alpha * (t1 - t0)
    raise AssertionError("no EER crossing found")  # unreachable: d spans -1..1


def min_dcf(scored: ScoredTrials, params: DcfParams | None = None):
    """Minimum normalized detection cost and the threshold attaining it.

    Sweeps the candidate thresholds (distinct scores plus +-inf), computes
    c_miss * P_miss * p_target + c_fa * P_fa * (1 - p_target), and divides
    by the best trivial-decision cost min(c_miss * p_target,
    c_fa * (1 - p_target)). Ties pick the lowest threshold.
    """
    params = params or DcfParams()
    if np.all(scored.scores == scored.scores[0]):
        raise DegenerateTrials("all trial scores are equal")
    tgt = np.sort(scored.scores[scored.is_target])
    non = np.sort(scored.scores[~scored.is_target])
    uniq = np.unique(scored.scores)
    thresholds = np.concatenate([[-np.inf], uniq, [np.inf]])
    p_miss = np.searchsorted(tgt, thresholds, side="left") / tgt.size
    p_fa = (non.size - np.searchsorted(non, thresholds, side="left")) / non.size
    dcf = (params.c_miss * p_miss * params.p_target
           + params.c_fa * p_fa * (1.0 - params.p_target))
    normalizer = min(params.c_miss * params.p_target,
                     params.c_fa * (1.0 - params.p_target))
    idx = int(np.argmin(dcf))
    return float(dcf[idx] / normalizer), float(thresholds[idx])


def min_dcf_threshold_sweep(scored: ScoredTrials, params: DcfParams | None = None):
    """Brute-force minDCF oracle: same candidate enumeration as min_dcf but
    recounting misses and false accepts trial by trial."""
    params = params or DcfParams()
    scores = [float(s) for s in scored.scores]
    labels = [bool(t) for t in scored.is_target]
    if all(s == scores[0] for s in scores):
        raise DegenerateTrials("all trial scores are equal")
    targets = [s for s, t in zip(scores, labels) if t]
    nons = [s for s, t in zip(scores, labels) if not t]
    candidates = [float("-inf")] + sorted(set(scores)) + [float("inf")]
    best = None
    for u in candidates:
        p_miss = sum(1 for s in targets if s < u) / len(targets)
        p_fa = sum(1 for s in nons if s >= u) / len(nons)
        cost = (params.c_miss * p_miss * params.p_target
                + params.c_fa * p_fa * (1.0 - params.p_target))
        if best is None or cost < best[0]:
            best = (cost, u)
    normalizer = min(params.c_miss * params.p_target,
                     params.c_fa * (1.0 - params.p_target))
    return best[0] / normalizer, best[1]


def save_trials(path, trials) -> None:
    """One trial per line: enroll_index test_index 0|1."""
    try:
        with open(path, "w", encoding="ascii", newline="\n") as fh:
            for t in trials:
                fh.write(f"{t.enroll_index} {t.test_index} {int(t.is_target)}\n")
    except OSError as exc:
        raise IoError(f"cannot write trials to {path}: {exc}") from exc


def load_trials(path) -> list:
    try:
        with open(path, "r", encoding="ascii") as fh:
            lines = fh.read().splitlines()
    except OSError as exc:
        raise IoError(f"cannot read trials from {path}: {exc}") from exc
    trials = []
    for ln, line in enumerate(lines, start=1):
        parts = line.split()
        if len(parts) != 3 or parts[2] not in ("0", "1"):
            raise IoError(f"{path}:{ln}: expected 'enroll test 0|1'")
        trials.append(Trial(int(parts[0]), int(parts[1]), parts[2] == "1"))
    return trials


def save_scored_trials(path, trials, scored: ScoredTrials) -> None:
    """Trial-list format with the score appended to each line."""
    if len(trials) != scored.scores.size:
        raise ValueError("trials and scores differ in length")
    try:
        with open(path, "w", encoding="ascii", newline="\n") as fh:
            for t, s in zip(trials, scored.scores):
                fh.write(f"{t.enroll_index} {t.test_index} {int(t.is_target)} "
                         + (_FLOAT_FMT % s) + "\n")
    except OSError as exc:
        raise IoError(f"cannot write scores to {path}: {exc}") from exc


def load_scored_trials(path):
    try:
        with open(path, "r", encoding="ascii") as fh:
            lines = fh.read().splitlines()
    except OSError as exc:
        raise IoError(f"cannot read scores from {path}: {exc}") from exc
    trials, scores, flags = [], [], []
    for ln, line in enumerate(lines, start=1):
        parts = line.split()
        if len(parts) != 4 or parts[2] not in ("0", "1"):
            raise IoError(f"{path}:{ln}: expected 'enroll test 0|1 score'")
        trials.append(Trial(int(parts[0]), int(parts[1]), parts[2] == "1"))
        scores.append(float(parts[3]))
        flags.append(parts[2] == "1")
    return trials, ScoredTrials(np.array(scores), np.array(flags))
