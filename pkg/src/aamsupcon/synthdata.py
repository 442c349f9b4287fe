"""Synthetic speaker datasets with controllable separability.

Speakers are unit centroids drawn uniformly on the input sphere; every
utterance is the centroid plus isotropic Gaussian noise, re-normalized.
Ground truth is exact, so verification metrics have a known easy/hard dial
(spread) at desk scale. Datasets round-trip through a plain text format.
"""

from dataclasses import dataclass

import numpy as np

from .batching import Sample, ViewTag
from .errors import InvalidSpec, IoError
from .geometry import normalize

_FLOAT_FMT = "%.17g"  # 17 significant digits: exact float64 round-trip


@dataclass
class DatasetSpec:
    num_speakers: int
    utterances_per_speaker: int
    d_in: int
    spread: float
    seed: int

    def validate(self) -> None:
        if self.num_speakers < 2:
            raise InvalidSpec(f"num_speakers must be >= 2, got {self.num_speakers}")
        if self.utterances_per_speaker < 2:
            raise InvalidSpec("utterances_per_speaker must be >= 2, "
                              f"got {self.utterances_per_speaker}")
        if self.d_in < 2:
            raise InvalidSpec(f"d_in must be >= 2, got {self.d_in}")
        if self.spread < 0:
            raise InvalidSpec(f"spread must be >= 0, got {self.spread}")


def generate(spec: DatasetSpec):
    """Draw the dataset described by spec.

    Returns (samples, centroids) where samples is a flat list of ORIGINAL
    Sample entries ordered speaker-major and centroids is the
    (num_speakers, d_in) ground-truth matrix. Deterministic per seed.
    """
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    centroids = np.stack([normalize(rng.standard_normal(spec.d_in))
                          for _ in range(spec.num_speakers)])
    samples: list[Sample] = []
    for sid in range(spec.num_speakers):
        for _ in range(spec.utterances_per_speaker):
            noise = rng.standard_normal(spec.d_in)
            if spec.spread == 0.0:
                feats = centroids[sid].copy()
            else:
                feats = normalize(centroids[sid] + spec.spread * noise)
            samples.append(Sample(feats, sid, ViewTag.ORIGINAL))
    return samples, centroids


def split_holdout(samples, holdout_per_speaker: int):
    """Deterministically reserve the last k utterances of every speaker.

    Returns (train_samples, heldout_samples); order within each part follows
    the input order. k = 0 returns (samples, [])."""
    if holdout_per_speaker < 0:
        raise InvalidSpec(f"holdout_per_speaker must be >= 0, got {holdout_per_speaker}")
    if holdout_per_speaker == 0:
        return list(samples), []
    positions: dict[int, list[int]] = {}
    for idx, s in enumerate(samples):
        positions.setdefault(s.speaker_id, []).append(idx)
    held = set()
    for sid, idxs in positions.items():
        if len(idxs) <= holdout_per_speaker:
            raise InvalidSpec(
                f"speaker {sid} has {len(idxs)} utterances, cannot hold out "
                f"{holdout_per_speaker}")
        held.update(idxs[-holdout_per_speaker:])
    train = [s for i, s in enumerate(samples) if i not in held]
    heldout = [s for i, s in enumerate(samples) if i in held]
    return train, heldout


def save_dataset(path, spec: DatasetSpec, samples) -> None:
    """Write the text dump: one header line with the spec fields, then one
    line per sample: speaker_id view_tag features..."""
    lines = ["num_speakers=%d utterances_per_speaker=%d d_in=%d spread=%s seed=%d"
             % (spec.num_speakers, spec.utterances_per_speaker, spec.d_in,
                _FLOAT_FMT % spec.spread, spec.seed)]
    for s in samples:
        feats = " ".join(_FLOAT_FMT % x for x in s.features)
        lines.append(f"{s.speaker_id} {s.view_tag.value} {feats}")
    try:
        with open(path, "w", encoding="ascii", newline="\n") as fh:
            fh.write("\n".join(lines) + "\n")
    except OSError as exc:
        raise IoError(f"cannot write dataset to {path}: {exc}") from exc


def load_dataset(path):
    """Inverse of save_dataset. Returns (spec, samples)."""
    try:
        with open(path, "r", encoding="ascii") as fh:
            lines = fh.read().splitlines()
    except OSError as exc:
        raise IoError(f"cannot read dataset from {path}: {exc}") from exc
    if not lines:
        raise IoError(f"dataset file {path} is empty")
    fields = dict(item.split("=", 1) for item in lines[0].split())
    try:
        spec = DatasetSpec(
            num_speakers=int(fields["num_speakers"]),
            utterances_per_speaker=int(fields["utterances_per_speaker"]),
            d_in=int(fields["d_in"]),
            spread=float(fields["spread"]),
            seed=int(fields["seed"]),
        )
    except (KeyError, ValueError) as exc:
        raise IoError(f"malformed dataset header in {path}: {exc}") from exc
    samples = []
    for ln, line in enumerate(lines[1:], start=2):
        parts = line.split()
        if len(parts) != 2 + spec.d_in:
            raise IoError(f"{path}:{ln}: expected {2 + spec.d_in} fields, got {len(parts)}")
        feats = np.array([float(x) for x in parts[2:]], dtype=np.float64)
        samples.append(Sample(feats, int(parts[0]), ViewTag(parts[1])))
    return spec, samples
