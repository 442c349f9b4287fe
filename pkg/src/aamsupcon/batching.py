"""Multiview batch construction.

A batch holds B original samples followed by their B augmentations, aligned
by index, so every anchor is guaranteed at least one positive. Augmentation
works in feature space: additive Gaussian noise, then a contiguous run of
coordinates zeroed (the desk-scale analog of time/frequency masking).
"""

from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .errors import AlreadyAugmented, InsufficientSpeakers, InsufficientUtterances


class ViewTag(Enum):
    ORIGINAL = "original"
    AUGMENTED = "augmented"


@dataclass
class Sample:
    features: np.ndarray
    speaker_id: int
    view_tag: ViewTag = ViewTag.ORIGINAL

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)


@dataclass
class AugmentPolicy:
    """noise_sigma scales the additive Gaussian noise; mask_max bounds the
    number of contiguous coordinates zeroed (None means d_in // 8)."""

    noise_sigma: float = 0.1
    mask_max: int | None = None

    def resolved_mask_max(self, d_in: int) -> int:
        return d_in // 8 if self.mask_max is None else self.mask_max


@dataclass
class MultiviewBatch:
    """2B samples: B originals then their B augmentations, index-aligned."""

    samples: list
    labels: np.ndarray = field(init=False)

    def __post_init__(self):
        self.labels = np.array([s.speaker_id for s in self.samples], dtype=np.int64)

    @property
    def features(self) -> np.ndarray:
        return np.stack([s.features for s in self.samples])

    def __len__(self) -> int:
        return len(self.samples)


def augment(x: Sample, policy: AugmentPolicy, rng: np.random.Generator) -> Sample:
    """One stochastic view of an original sample.

    Adds noise_sigma * N(0, I) to the features, then zeroes k contiguous
    coordinates with k drawn uniformly from [0, mask_max]. Speaker id and
    dimension are preserved. Raises AlreadyAugmented for non-original input.
    """
    if x.view_tag is not ViewTag.ORIGINAL:
        raise AlreadyAugmented(f"sample of speaker {x.speaker_id} is already augmented")
    d_in = x.features.shape[0]
    mask_max = policy.resolved_mask_max(d_in)
    if not 0 <= mask_max <= d_in:
        raise ValueError(f"mask_max {mask_max} outside [0, {d_in}]")
    feats = x.features + policy.noise_sigma * rng.standard_normal(d_in)
    k = int(rng.integers(0, mask_max + 1))
    if k > 0:
        start = int(rng.integers(0, d_in - k + 1))
        feats[start:start + k] = 0.0
    return Sample(feats, x.speaker_id, ViewTag.AUGMENTED)


def build_batch(dataset, batch_speakers: int, views_per_speaker: int,
                policy: AugmentPolicy, rng: np.random.Generator) -> MultiviewBatch:
    """Sample a multiview batch from a list of original samples.

    Draws batch_speakers speakers uniformly without replacement among those
    with at least views_per_speaker originals, then views_per_speaker
    originals per speaker without replacement, then appends one augmentation
    per original. Raises InsufficientSpeakers / InsufficientUtterances when
    the dataset cannot satisfy the request.
    """
    if batch_speakers < 1 or views_per_speaker < 1:
        raise ValueError("batch_speakers and views_per_speaker must be >= 1")
    by_speaker: dict[int, list[int]] = {}
    for idx, s in enumerate(dataset):
        if s.view_tag is ViewTag.ORIGINAL:
            by_speaker.setdefault(s.speaker_id, []).append(idx)
    if len(by_speaker) < batch_speakers:
        raise InsufficientSpeakers(
            f"need {batch_speakers} speakers, dataset has {len(by_speaker)}")
    eligible = sorted(sid for sid, idxs in by_speaker.items()
                      if len(idxs) >= views_per_speaker)
    if len(eligible) < batch_speakers:
        raise InsufficientUtterances(
            f"only {len(eligible)} speakers have >= {views_per_speaker} originals")

    chosen = rng.choice(np.array(eligible), size=batch_speakers, replace=False)
    originals: list[Sample] = []
    for sid in chosen:
        idxs = by_speaker[int(sid)]
        picks = rng.choice(len(idxs), size=views_per_speaker, replace=False)
        originals.extend(dataset[idxs[int(p)]] for p in picks)
    augmented = [augment(s, policy, rng) for s in originals]
    return MultiviewBatch(originals + augmented)
