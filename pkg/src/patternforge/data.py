"""Synthetic 1-D pattern datasets: generation, corruption, splits and file IO.

Each class is defined by a fixed template of Gaussian peaks on a small
constant baseline: a backbone of peaks shared by every class, plus a tall
anchor at a class-reserved position and two minor peaks of its own. Samples
jitter the peak heights. Corruption degrades copies of clean patterns while
remembering the pairing, so quality metrics can later compare against a
ground truth that training never sees.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import asdict, dataclass

import numpy as np

DATASET_MAGIC = b"PFDS"
DATASET_VERSION = 1

ROLE_IDEAL = "ideal"
ROLE_IMPERFECT = "imperfect"
ROLE_GROUND_TRUTH = "ground-truth"
_ROLE_CODES = {ROLE_IDEAL: "i", ROLE_IMPERFECT: "m", ROLE_GROUND_TRUTH: "g"}
_CODE_ROLES = {v: k for k, v in _ROLE_CODES.items()}


class DatasetFormatError(ValueError):
    """Wrong magic, bad checksum, truncation or version mismatch."""


@dataclass(frozen=True)
class Pattern:
    values: np.ndarray  # (d,) float64 in [0, 1]
    label: int
    role: str


@dataclass(frozen=True)
class CorruptionSpec:
    """Degradation applied to clean patterns, in a fixed order.

    Damage is structural first, per detected peak: the brightest peak may
    split into two dimmer neighbours, every peak can slide sideways by a few
    positions and have its amplitude rescaled (down to vanishing). A smooth
    background hump and white noise follow, then a clamp into [0, 1].
    """

    noise_std: float = 0.03
    drift_amp: float = 0.1
    shift_max: int = 8
    split_prob: float = 0.9
    amp_jitter: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if min(self.noise_std, self.drift_amp, self.amp_jitter) < 0 or self.shift_max < 0:
            raise ValueError("corruption magnitudes must be non-negative")
        if not 0.0 <= self.split_prob <= 1.0:
            raise ValueError("split_prob must be a probability")


class PatternDataset:
    """Immutable-by-convention collection of patterns plus pairing metadata.

    ``pairing`` maps the index of an imperfect pattern to the index of its
    ground-truth counterpart (evaluation only, never seen by training).
    """

    def __init__(self, patterns, length: int, classes: int,
                 pairing: dict[int, int] | None = None, manifest: dict | None = None):
        self.patterns = list(patterns)
        self.length = length
        self.classes = classes
        self.pairing = dict(pairing) if pairing else {}
        self.manifest = dict(manifest) if manifest else {}
        for i, p in enumerate(self.patterns):
            if p.values.shape != (length,):
                raise ValueError(f"pattern {i} has length {p.values.shape}, "
                                 f"expected ({length},)")
            if not 0 <= p.label < classes:
                raise ValueError(f"pattern {i} label {p.label} out of range")
            if p.values.size and (p.values.min() < 0.0 or p.values.max() > 1.0):
                raise ValueError(f"pattern {i} has values outside [0, 1]")
        for imp, gt in self.pairing.items():
            if self.patterns[imp].role != ROLE_IMPERFECT:
                raise ValueError(f"pairing source {imp} is not an imperfect pattern")
            if self.patterns[gt].label != self.patterns[imp].label:
                raise ValueError(f"pair ({imp}, {gt}) crosses class labels")

    def __len__(self) -> int:
        return len(self.patterns)

    def indices(self, role: str | None = None) -> list[int]:
        if role is None:
            return list(range(len(self.patterns)))
        return [i for i, p in enumerate(self.patterns) if p.role == role]

    def values(self, role: str | None = None) -> np.ndarray:
        idx = self.indices(role)
        if not idx:
            return np.zeros((0, self.length))
        return np.stack([self.patterns[i].values for i in idx])

    def labels(self, role: str | None = None) -> np.ndarray:
        return np.array([self.patterns[i].label for i in self.indices(role)],
                        dtype=np.intp)

    def paired_ground_truth(self) -> np.ndarray:
        """Ground-truth values aligned with values('imperfect') row order."""
        idx = self.indices(ROLE_IMPERFECT)
        missing = [i for i in idx if i not in self.pairing]
        if missing:
            raise ValueError("pairing is not total over imperfect patterns")
        return np.stack([self.patterns[self.pairing[i]].values for i in idx])


def _gaussian(length: int, center: float, width: float) -> np.ndarray:
    t = np.arange(length, dtype=np.float64)
    return np.exp(-0.5 * ((t - center) / width) ** 2)


def _class_peaks(classes: int, length: int, template_seed: int):
    """Per-class peak parameter lists: (center, width, height) triples.

    All classes share a common backbone of peaks; what distinguishes a class
    is a tall anchor at a class-reserved position plus two minor peaks of its
    own. Shared mass dominates, so degrading the thin class evidence genuinely
    confuses classification while leaving enough residue to restore.
    """
    rng = np.random.default_rng([template_seed, 1])
    backbone = [(
        float(rng.uniform(0.05 * length, 0.95 * length)),
        float(rng.uniform(1.5, 4.0)),
        float(rng.uniform(0.35, 0.8)),
    ) for _ in range(4)]
    peaks = []
    for k in range(classes):
        anchor = length * (k + 1) / (classes + 1)
        entries = [(anchor, float(rng.uniform(2.0, 4.0)), 1.0)]
        for _ in range(2):
            entries.append((
                float(rng.uniform(0.05 * length, 0.95 * length)),
                float(rng.uniform(1.5, 4.0)),
                float(rng.uniform(0.45, 0.75)),
            ))
        peaks.append(entries + backbone)
    return peaks


def _render(peaks, length: int, baseline: float, height_scales=None) -> np.ndarray:
    out = np.full(length, baseline, dtype=np.float64)
    for j, (center, width, height) in enumerate(peaks):
        scale = 1.0 if height_scales is None else height_scales[j]
        out += height * scale * _gaussian(length, center, width)
    return out / out.max()


def class_templates(classes: int, length: int, template_seed: int = 0,
                    baseline: float = 0.08) -> np.ndarray:
    """The zero-jitter pattern of every class, for template-matching oracles."""
    return np.stack([_render(p, length, baseline)
                     for p in _class_peaks(classes, length, template_seed)])


def gen_ideal(classes: int, per_class: int, length: int, seed: int,
              jitter: float = 0.15, baseline: float = 0.08,
              template_seed: int = 0) -> PatternDataset:
    """Clean labelled patterns: class templates with jittered peak heights.

    ``template_seed`` fixes the class system; datasets meant to describe the
    same classes (ideal training data and the sources of imperfect data)
    must share it, while ``seed`` varies only the per-sample jitter.
    """
    if classes < 2:
        raise ValueError("need at least 2 classes")
    if length < 64:
        raise ValueError("pattern length must be at least 64")
    if per_class < 1:
        raise ValueError("need at least one sample per class")
    peaks = _class_peaks(classes, length, template_seed)
    rng = np.random.default_rng([seed, 2])
    patterns = []
    for k in range(classes):
        for _ in range(per_class):
            scales = 1.0 + jitter * rng.uniform(-1.0, 1.0, size=len(peaks[k]))
            patterns.append(Pattern(_render(peaks[k], length, baseline, scales),
                                    k, ROLE_IDEAL))
    manifest = {"kind": "ideal", "seed": seed, "classes": classes,
                "per_class": per_class, "length": length, "jitter": jitter,
                "baseline": baseline, "template_seed": template_seed}
    return PatternDataset(patterns, length, classes, manifest=manifest)


def _find_peaks(x: np.ndarray, floor: float, min_separation: int = 6,
                cap: int = 10) -> list[int]:
    """Indices of prominent local maxima, tallest first."""
    candidates = [i for i in range(1, x.shape[0] - 1)
                  if x[i] > floor and x[i] >= x[i - 1] and x[i] >= x[i + 1]]
    candidates.sort(key=lambda i: -x[i])
    kept: list[int] = []
    for i in candidates:
        if all(abs(i - j) >= min_separation for j in kept):
            kept.append(i)
        if len(kept) == cap:
            break
    return kept


def _corrupt_one(x: np.ndarray, spec: CorruptionSpec, rng) -> np.ndarray:
    d = x.shape[0]
    t = np.arange(d, dtype=np.float64)
    out = x.copy()
    base = float(np.median(out))
    peaks = _find_peaks(out, floor=base + 0.15)
    # per-peak damage: the brightest peak may split into two dim neighbours,
    # every peak may slide sideways and have its amplitude rescaled
    for rank, p in enumerate(peaks):
        split = rank == 0 and rng.random() < spec.split_prob
        offset = int(rng.integers(4, 9))
        s = int(rng.integers(-spec.shift_max, spec.shift_max + 1))
        f = 1.0 + spec.amp_jitter * rng.uniform(-1.0, 1.0)
        if not split and s == 0 and f == 1.0:
            continue
        component = (out - base) * _gaussian(d, p, 4.0)
        if split:
            replacement = 0.55 * (np.roll(component, -offset)
                                  + np.roll(component, offset))
        else:
            replacement = component
        out = out - component + max(f, 0.0) * np.roll(replacement, s)
    # baseline drift: smooth non-negative background hump
    freq, phase = rng.uniform(0.3, 1.2), rng.uniform(0.0, 2.0 * np.pi)
    out = out + spec.drift_amp * 0.5 * (1.0 + np.sin(2.0 * np.pi * freq * t / d + phase))
    # additive noise, then clamp into the pattern value range
    out = out + rng.normal(0.0, spec.noise_std, size=d)
    return np.clip(out, 0.0, 1.0)


def corrupt(ideal: PatternDataset, spec: CorruptionSpec) -> PatternDataset:
    """Degrade every ideal pattern, keeping the clean copy as ground truth.

    The result holds the imperfect patterns first, their ground-truth
    sources after, and a total pairing between the two.
    """
    src_idx = ideal.indices(ROLE_IDEAL)
    rng = np.random.default_rng([spec.seed, 3])
    imperfect, ground_truth = [], []
    for i in src_idx:
        p = ideal.patterns[i]
        imperfect.append(Pattern(_corrupt_one(p.values, spec, rng), p.label,
                                 ROLE_IMPERFECT))
        ground_truth.append(Pattern(p.values.copy(), p.label, ROLE_GROUND_TRUTH))
    n = len(imperfect)
    pairing = {i: n + i for i in range(n)}
    manifest = {"kind": "imperfect", "source": ideal.manifest,
                "corruption": asdict(spec)}
    return PatternDataset(imperfect + ground_truth, ideal.length, ideal.classes,
                          pairing=pairing, manifest=manifest)


def split(dataset: PatternDataset, train_fraction: float, seed: int):
    """Seeded per-class stratified split; paired ground truth follows its
    imperfect partner into the same side."""
    if not 0.0 < train_fraction < 1.0:
        raise ValueError("train_fraction must be strictly between 0 and 1")
    primary_role = ROLE_IMPERFECT if dataset.indices(ROLE_IMPERFECT) else ROLE_IDEAL
    rng = np.random.default_rng([seed, 4])
    train_idx, test_idx = [], []
    for k in range(dataset.classes):
        members = [i for i in dataset.indices(primary_role)
                   if dataset.patterns[i].label == k]
        if not members:
            raise ValueError(f"class {k} has no {primary_role} samples")
        n_train = int(round(train_fraction * len(members)))
        if n_train < 1 or n_train >= len(members):
            raise ValueError(
                f"class {k} with {len(members)} samples cannot be split "
                f"{train_fraction:.2f}/{1 - train_fraction:.2f}")
        order = rng.permutation(len(members))
        train_idx += [members[j] for j in order[:n_train]]
        test_idx += [members[j] for j in order[n_train:]]
    return (_take(dataset, sorted(train_idx), "train", train_fraction, seed),
            _take(dataset, sorted(test_idx), "test", train_fraction, seed))


def _take(dataset: PatternDataset, indices, side: str, fraction: float,
          seed: int) -> PatternDataset:
    keep = list(indices)
    for i in indices:
        if i in dataset.pairing:
            keep.append(dataset.pairing[i])
    remap = {old: new for new, old in enumerate(keep)}
    patterns = [dataset.patterns[i] for i in keep]
    pairing = {remap[i]: remap[dataset.pairing[i]]
               for i in indices if i in dataset.pairing}
    manifest = dict(dataset.manifest)
    manifest["split"] = {"side": side, "fraction": fraction, "seed": seed}
    return PatternDataset(patterns, dataset.length, dataset.classes,
                          pairing=pairing, manifest=manifest)


# -- file format -----------------------------------------------------------------


def save_dataset(path, dataset: PatternDataset) -> None:
    """Binary dataset file: header text, label byte + float64 values per
    pattern, pairing table, then a CRC-32 of everything before it."""
    manifest = dict(dataset.manifest)
    manifest["_file"] = {
        "n": len(dataset.patterns),
        "length": dataset.length,
        "classes": dataset.classes,
        "roles": "".join(_ROLE_CODES[p.role] for p in dataset.patterns),
    }
    blob = bytearray()
    blob += DATASET_MAGIC
    blob += struct.pack("<I", DATASET_VERSION)
    raw = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("utf-8")
    blob += struct.pack("<I", len(raw))
    blob += raw
    for p in dataset.patterns:
        blob += struct.pack("<B", p.label)
        blob += p.values.astype("<f8").tobytes()
    blob += struct.pack("<I", len(dataset.pairing))
    for imp in sorted(dataset.pairing):
        blob += struct.pack("<II", imp, dataset.pairing[imp])
    blob += struct.pack("<I", zlib.crc32(bytes(blob)))
    with open(path, "wb") as fh:
        fh.write(bytes(blob))


def load_dataset(path) -> PatternDataset:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != DATASET_MAGIC:
        raise DatasetFormatError(
            f"not a dataset file (magic {blob[:4]!r}, expected {DATASET_MAGIC!r})")
    if len(blob) < 12:
        raise DatasetFormatError("truncated dataset file")
    (stored_crc,) = struct.unpack("<I", blob[-4:])
    if zlib.crc32(blob[:-4]) != stored_crc:
        raise DatasetFormatError("dataset checksum mismatch")
    off = 4
    (version,) = struct.unpack_from("<I", blob, off)
    off += 4
    if version != DATASET_VERSION:
        raise DatasetFormatError(f"unsupported dataset version {version}")
    (mlen,) = struct.unpack_from("<I", blob, off)
    off += 4
    manifest = json.loads(blob[off:off + mlen].decode("utf-8"))
    off += mlen
    info = manifest.pop("_file")
    n, length, classes = info["n"], info["length"], info["classes"]
    roles = info["roles"]
    patterns = []
    for i in range(n):
        (label,) = struct.unpack_from("<B", blob, off)
        off += 1
        values = np.frombuffer(blob, dtype="<f8", count=length, offset=off).copy()
        off += 8 * length
        patterns.append(Pattern(values, label, _CODE_ROLES[roles[i]]))
    (n_pairs,) = struct.unpack_from("<I", blob, off)
    off += 4
    pairing = {}
    for _ in range(n_pairs):
        imp, gt = struct.unpack_from("<II", blob, off)
        off += 8
        pairing[imp] = gt
    return PatternDataset(patterns, length, classes, pairing=pairing,
                          manifest=manifest)


def export_csv(path, dataset: PatternDataset) -> None:
    """Plain text dump: one pattern per row, label in the first column."""
    with open(path, "w") as fh:
        for p in dataset.patterns:
            fh.write(str(p.label) + "," + ",".join(str(v) for v in p.values) + "\n")
