"""Trial CSV parsing, filename metadata, synthetic trials and dataset splits."""

from __future__ import annotations

import logging
import re
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

log = logging.getLogger(__name__)

CHANNELS = ("AF3", "AF4", "T7", "T8", "Pz")
SAMPLE_RATE = 128.0
TRIAL_LENGTH = 384

# headset, synset, image index, session, global session; the leading dataset
# prefix and the s/g markers are optional so both naming styles parse
DEFAULT_PATTERN = (
    r"^(?:MindBigData_Imagenet_)?(?P<headset>[A-Za-z0-9]+)_(?P<synset>n\d{8})_"
    r"(?P<image>\d+)_s?(?P<session>\d+)_g?(?P<global>\d+)\.csv$"
)
PATTERN_GROUPS = ("headset", "synset", "image", "session", "global")


class IngestError(ValueError):
    pass


class UnknownChannel(IngestError):
    def __init__(self, name: str, line: int | None = None):
        self.name = name
        where = f" (line {line})" if line is not None else ""
        super().__init__(f"unknown channel {name!r}{where}")


class NoMatch(IngestError):
    pass


@dataclass
class RawTrial:
    channels: dict[str, np.ndarray]
    headset: str = ""
    synset_id: str = ""
    image_index: int = -1
    session: int = -1
    global_session: int = -1
    label: int = -1
    path: str = ""

    def waveform_matrix(self) -> np.ndarray:
        """(5, L) array in canonical channel order; lengths must agree."""
        lengths = {len(self.channels[c]) for c in CHANNELS}
        if len(lengths) != 1:
            raise IngestError(f"channel lengths differ: {sorted(lengths)}")
        return np.stack([self.channels[c] for c in CHANNELS])


# ----------------------------------------------------------------------
# trial files

def parse_trial_csv(text: str) -> RawTrial:
    """Parse ``NAME,v1,v2,...`` lines (LF or CRLF) into a :class:`RawTrial`."""
    if not text or not text.strip():
        raise IngestError("empty trial file")
    channels: dict[str, np.ndarray] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        name, *fields = line.strip().split(",")
        name = name.strip()
        if name not in CHANNELS:
            raise UnknownChannel(name, lineno)
        if name in channels:
            raise IngestError(f"duplicate channel {name!r} (line {lineno})")
        values = np.empty(len(fields))
        for col, tok in enumerate(fields, start=2):
            try:
                values[col - 2] = float(tok)
            except ValueError:
                raise IngestError(
                    f"non-numeric value {tok!r} at line {lineno}, column {col}") from None
        if values.size == 0 or not np.isfinite(values).all():
            raise IngestError(f"channel {name!r} has no usable samples (line {lineno})")
        channels[name] = values
    missing = [c for c in CHANNELS if c not in channels]
    if missing:
        raise IngestError(f"missing channels: {', '.join(missing)}")
    return RawTrial(channels={c: channels[c] for c in CHANNELS})


def serialize_trial(trial: RawTrial) -> str:
    # repr() round-trips float64 exactly
    lines = [",".join([c, *(repr(float(v)) for v in trial.channels[c])]) for c in CHANNELS]
    return "\n".join(lines) + "\n"


def read_trial(path, pattern: "re.Pattern | str | None" = None) -> RawTrial:
    path = Path(path)
    trial = parse_trial_csv(path.read_text(encoding="utf-8"))
    trial.path = str(path)
    try:
        meta = parse_filename(path.name, pattern)
    except NoMatch:
        return trial
    return replace(trial, headset=meta["headset"], synset_id=meta["synset"],
                   image_index=meta["image"], session=meta["session"],
                   global_session=meta["global"])


# ----------------------------------------------------------------------
# filenames

def compile_pattern(pattern: str = DEFAULT_PATTERN) -> re.Pattern:
    """Compile and validate a filename pattern; all five named groups are required."""
    try:
        rx = re.compile(pattern)
    except re.error as exc:
        raise IngestError(f"invalid filename pattern: {exc}") from None
    missing = [g for g in PATTERN_GROUPS if g not in rx.groupindex]
    if missing:
        raise IngestError(f"filename pattern lacks groups: {', '.join(missing)}")
    return rx


def parse_filename(name: str, pattern: "re.Pattern | str | None" = None) -> dict:
    if pattern is None:
        pattern = DEFAULT_PATTERN
    rx = compile_pattern(pattern) if isinstance(pattern, str) else pattern
    m = rx.search(name)
    if m is None:
        raise NoMatch(f"{name!r} does not match the filename pattern")
    out: dict = {"headset": m["headset"], "synset": m["synset"]}
    for key in ("image", "session", "global"):
        try:
            out[key] = int(m[key])
        except (TypeError, ValueError):
            raise IngestError(f"{key} field {m[key]!r} in {name!r} is not an integer") from None
    return out


def format_filename(headset: str, synset: str, image: int, session: int,
                    global_session: int) -> str:
    """Inverse of :func:`parse_filename` under the default pattern."""
    return f"{headset}_{synset}_{image}_s{session:02d}_g{global_session:04d}.csv"


# ----------------------------------------------------------------------
# labels

# ImageNet categories named for the 2/5/10-class tasks; ids are WordNet synsets
CATEGORY_SYNSETS = {
    "Animals": "n00015388", "Vehicles": "n04524313",
    "Dog": "n02084071", "Cat": "n02121808", "Bird": "n01503061",
    "Car": "n02958343", "Aircraft": "n02686568", "Fish": "n02512053",
    "Goose": "n01855672", "Truck": "n04490091", "Airplane": "n02691156",
    "Ship": "n04194289", "Bicycle": "n02834778",
}
TASK_CLASSES = {
    2: ["Animals", "Vehicles"],
    5: ["Dog", "Cat", "Bird", "Car", "Aircraft"],
    10: ["Dog", "Cat", "Bird", "Fish", "Goose", "Car", "Truck", "Airplane",
         "Ship", "Bicycle"],
}


@dataclass
class LabelMap:
    class_names: list[str]
    synset_to_class: dict[str, int] = field(default_factory=dict)

    def __post_init__(self):
        n = len(self.class_names)
        if n < 2:
            raise ValueError("a label map needs at least two classes")
        for syn, idx in self.synset_to_class.items():
            if not 0 <= idx < n:
                raise ValueError(f"synset {syn} maps outside [0, {n})")

    @property
    def n_classes(self) -> int:
        return len(self.class_names)

    def synsets_for(self, label: int) -> list[str]:
        return sorted(s for s, i in self.synset_to_class.items() if i == label)

    @classmethod
    def default(cls, n_classes: int) -> "LabelMap":
        """Category table for an ``n_classes`` task.

        2, 5 and 10 classes use the named category lists; other sizes take a
        prefix of the 10-class list and then generic names with placeholder
        synsets.
        """
        if n_classes < 2:
            raise ValueError("need at least two classes")
        names = list(TASK_CLASSES.get(n_classes, TASK_CLASSES[10][:n_classes]))
        while len(names) < n_classes:
            names.append(f"class_{len(names)}")
        syn = {}
        for i, name in enumerate(names):
            syn[CATEGORY_SYNSETS.get(name, f"n9{i:07d}")] = i
        return cls(names, syn)

    def label_trials(self, trials: Iterable[RawTrial]) -> list[RawTrial]:
        """Assign labels by synset; trials of unknown synsets are dropped and counted."""
        kept, skipped = [], 0
        for tr in trials:
            idx = self.synset_to_class.get(tr.synset_id)
            if idx is None:
                skipped += 1
                continue
            kept.append(replace(tr, label=idx))
        if skipped:
            log.warning("skipped %d trial(s) with synsets outside the label map", skipped)
        return kept


# ----------------------------------------------------------------------
# synthetic data

@dataclass
class SynthSpec:
    n_classes: int = 2
    trials_per_class: int = 50
    seed: int = 0
    noise_sigma: float = 1.0
    amplitude: float = 1.0
    base_freq: float = 4.0
    freq_step: float = 3.0
    dc_range: float = 50.0
    length: int = TRIAL_LENGTH
    sample_rate: float = SAMPLE_RATE
    max_freq: float = 50.0

    def class_freq(self, k: int) -> float:
        return self.base_freq + self.freq_step * k


def synth_generate(spec: SynthSpec, label_map: LabelMap | None = None) -> list[RawTrial]:
    """Class-keyed sinusoids in Gaussian noise with a random DC offset per channel.

    Class ``k`` oscillates at ``base_freq + freq_step * k`` Hz; each trial draws
    a random phase, each channel adds a fixed offset of ``c * pi / 5``.
    """
    if spec.n_classes < 2:
        raise ValueError("n_classes must be >= 2")
    if spec.trials_per_class < 1:
        raise ValueError("trials_per_class must be >= 1")
    top = spec.class_freq(spec.n_classes - 1)
    if top > spec.max_freq:
        raise ValueError(f"class frequency {top:g} Hz exceeds the {spec.max_freq:g} Hz passband")
    label_map = label_map or LabelMap.default(spec.n_classes)
    rng = np.random.default_rng(spec.seed)
    t = np.arange(spec.length) / spec.sample_rate
    chan_phase = np.arange(len(CHANNELS)) * np.pi / len(CHANNELS)
    trials = []
    image = 0
    for k in range(spec.n_classes):
        synset = label_map.synsets_for(k)[0]
        f = spec.class_freq(k)
        for j in range(spec.trials_per_class):
            phase = rng.uniform(0, 2 * np.pi)
            dc = rng.uniform(-spec.dc_range, spec.dc_range, size=len(CHANNELS))
            noise = rng.standard_normal((len(CHANNELS), spec.length)) * spec.noise_sigma
            wave = (spec.amplitude * np.sin(2 * np.pi * f * t[None, :] + phase + chan_phase[:, None])
                    + noise + dc[:, None])
            image += 1
            trials.append(RawTrial(
                channels={c: wave[i] for i, c in enumerate(CHANNELS)},
                headset="Insight", synset_id=synset, image_index=image,
                session=1 + j % 3, global_session=image, label=k,
                path=format_filename("Insight", synset, image, 1 + j % 3, image)))
    return trials


# ----------------------------------------------------------------------
# manifests and splits

@dataclass
class ManifestEntry:
    path: str
    synset: str
    label: int
    split: str = "train"
    session: int = -1
    global_session: int = -1


@dataclass
class DatasetManifest:
    entries: list[ManifestEntry]
    class_names: list[str] = field(default_factory=list)
    seed: int | None = None

    def __len__(self):
        return len(self.entries)

    @property
    def labels(self) -> np.ndarray:
        return np.array([e.label for e in self.entries], dtype=np.int64)

    def indices(self, split: str) -> np.ndarray:
        return np.array([i for i, e in enumerate(self.entries) if e.split == split], dtype=np.int64)

    def counts(self, split: str) -> dict[int, int]:
        out: dict[int, int] = {}
        for e in self.entries:
            if e.split == split:
                out[e.label] = out.get(e.label, 0) + 1
        return out

    @classmethod
    def from_trials(cls, trials: Sequence[RawTrial], class_names: Sequence[str]) -> "DatasetManifest":
        entries = [ManifestEntry(t.path, t.synset_id, t.label, "train", t.session, t.global_session)
                   for t in trials]
        entries.sort(key=lambda e: e.path)
        return cls(entries, list(class_names))

    # tab-separated text with a header; class names ride on a leading comment
    HEADER = ("path", "synset", "label", "split", "session", "global_session")

    def write(self, path) -> None:
        lines = []
        if self.class_names:
            lines.append("# classes=" + ",".join(self.class_names))
        if self.seed is not None:
            lines.append(f"# seed={self.seed}")
        lines.append("\t".join(self.HEADER))
        for e in self.entries:
            lines.append("\t".join(str(v) for v in (e.path, e.synset, e.label, e.split,
                                                      e.session, e.global_session)))
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")

    @classmethod
    def read(cls, path) -> "DatasetManifest":
        entries, names, seed = [], [], None
        header_seen = False
        for raw in Path(path).read_text(encoding="utf-8").splitlines():
            if not raw.strip():
                continue
            if raw.startswith("#"):
                key, _, value = raw[1:].strip().partition("=")
                if key == "classes":
                    names = value.split(",")
                elif key == "seed":
                    seed = int(value)
                continue
            cols = raw.split("\t")
            if not header_seen:
                if tuple(cols) != cls.HEADER:
                    raise IngestError(f"bad manifest header: {raw!r}")
                header_seen = True
                continue
            if len(cols) != len(cls.HEADER):
                raise IngestError(f"manifest row has {len(cols)} columns: {raw!r}")
            p, syn, label, split, sess, glob = cols
            entries.append(ManifestEntry(p, syn, int(label), split, int(sess), int(glob)))
        if not header_seen:
            raise IngestError("manifest has no header line")
        return cls(entries, names, seed)


def _by_class(entries, split=None) -> dict[int, list[int]]:
    groups: dict[int, list[int]] = {}
    for i, e in enumerate(entries):
        if e.label < 0:
            raise IngestError(f"unlabelled trial {e.path}")
        if split is None or e.split == split:
            groups.setdefault(e.label, []).append(i)
    return groups


def split_train_val(manifest: DatasetManifest, fraction: float = 0.2,
                    seed: int = 0) -> DatasetManifest:
    """Stratified split: ``round(fraction * n_k)`` validation trials from each class."""
    if not 0.0 < fraction < 1.0:
        raise ValueError("fraction must be in (0, 1)")
    entries = [replace(e, split="train") for e in manifest.entries]
    rng = np.random.default_rng(seed)
    for label, idx in sorted(_by_class(entries).items()):
        if len(idx) < 2:
            raise IngestError(f"class {label} has fewer than 2 trials")
        n_val = min(max(1, int(round(fraction * len(idx)))), len(idx) - 1)
        for i in rng.permutation(idx)[:n_val]:
            entries[i].split = "val"
    return DatasetManifest(entries, list(manifest.class_names), seed)


def subsample_per_class(manifest: DatasetManifest, k: int, seed: int = 0) -> DatasetManifest:
    """Keep ``k`` training trials per class; validation is untouched.

    The per-class order is a seeded shuffle and the first ``k`` are kept, so
    for one seed the subsets grow by inclusion as ``k`` grows.
    """
    groups = _by_class(manifest.entries, "train")
    short = {c: len(v) for c, v in groups.items() if len(v) < k}
    if short:
        raise IngestError(f"not enough training trials for k={k}: {short}")
    entries = [replace(e) for e in manifest.entries]
    rng = np.random.default_rng(seed)
    for label, idx in sorted(groups.items()):
        for i in rng.permutation(idx)[k:]:
            entries[i].split = "unused"
    return DatasetManifest(entries, list(manifest.class_names), manifest.seed)
