"""Dataset manifests, per-protocol label re-grouping, and a synthetic
micro-motion clip generator that stands in for the license-gated corpora.

Manifest format: one JSON object per line with keys ``clip_id``,
``subject_id``, ``database``, ``frames`` (relative paths), ``onset``,
``apex`` (nullable), ``label``. Frame files are 8-bit grayscale or RGB PNG.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import ConfigError, DataError, ManifestError
from .ioutil import atomic_write_text
from .flow import LUMA_WEIGHTS

DATABASES = ("SMIC-HS", "SMIC-VIS", "SMIC-NIR", "CASME2", "SAMM", "SYNTH")

_CLIP_ID_RE = re.compile(r"^[A-Za-z0-9][A-Za-z0-9._-]*$")


class _Excluded:
    """Sentinel: the active label scheme drops this sample."""

    def __repr__(self):
        return "EXCLUDED"


EXCLUDED = _Excluded()


@dataclass
class Sample:
    """One micro-expression clip as described by a manifest row."""

    clip_id: str
    subject_id: str
    database: str
    frame_paths: list
    onset_index: int
    apex_index: int | None
    raw_label: str


# ---------------------------------------------------------------------------
# frame files


def load_frame(path) -> np.ndarray:
    """Read a frame file into a gray float array in [0, 1].

    Color inputs are converted with luma weights 0.299 / 0.587 / 0.114.
    """
    with Image.open(path) as im:
        arr = np.asarray(im)
    if arr.dtype != np.uint8:
        raise DataError(f"{path}: expected 8-bit pixels, got {arr.dtype}")
    if arr.ndim == 2:
        return arr.astype(np.float64) / 255.0
    if arr.ndim == 3 and arr.shape[2] in (3, 4):
        r, g, b = (arr[..., i].astype(np.float64) for i in range(3))
        wr, wg, wb = LUMA_WEIGHTS
        return (wr * r + wg * g + wb * b) / 255.0
    raise DataError(f"{path}: unsupported image layout {arr.shape}")


def load_frames(sample: Sample):
    return [load_frame(p) for p in sample.frame_paths]


# ---------------------------------------------------------------------------
# manifest I/O


def load_manifest(path) -> list:
    """Parse and fully validate a JSONL manifest; order-preserving."""
    path = Path(path)
    base = path.parent
    samples = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ManifestError(f"{path}: line {lineno}: invalid JSON ({exc})") from None
            samples.append(_validate_record(rec, base, path, lineno))
    return samples


def _validate_record(rec, base: Path, path: Path, lineno: int) -> Sample:
    def fail(msg):
        raise ManifestError(f"{path}: line {lineno}: {msg}")

    if not isinstance(rec, dict):
        fail("record is not a JSON object")
    for key in ("clip_id", "subject_id", "database", "frames", "onset", "apex", "label"):
        if key not in rec:
            fail(f"missing key '{key}'")
    clip_id = rec["clip_id"]
    if not isinstance(clip_id, str) or not _CLIP_ID_RE.match(clip_id):
        fail(f"field 'clip_id': must be a filename-safe identifier, got {clip_id!r}")
    if not isinstance(rec["subject_id"], str) or not rec["subject_id"]:
        fail(f"clip '{clip_id}': field 'subject_id' must be a non-empty string")
    if rec["database"] not in DATABASES:
        fail(f"clip '{clip_id}': field 'database': unknown database {rec['database']!r}")
    frames = rec["frames"]
    if not isinstance(frames, list) or not frames or not all(isinstance(f, str) for f in frames):
        fail(f"clip '{clip_id}': field 'frames' must be a non-empty list of paths")
    onset = rec["onset"]
    if not isinstance(onset, int) or not 0 <= onset < len(frames):
        fail(f"clip '{clip_id}': field 'onset': {onset!r} not a frame index below {len(frames)}")
    apex = rec["apex"]
    if apex is not None and (not isinstance(apex, int) or not onset < apex < len(frames)):
        fail(f"clip '{clip_id}': field 'apex': {apex!r} must satisfy onset < apex < {len(frames)}")
    label = rec["label"]
    if not isinstance(label, str) or not label:
        fail(f"clip '{clip_id}': field 'label' must be a non-empty string")
    paths = [base / f for f in frames]
    for p in paths:
        if not p.is_file():
            fail(f"clip '{clip_id}': missing frame file {p}")
    return Sample(clip_id=clip_id, subject_id=rec["subject_id"], database=rec["database"],
                  frame_paths=paths, onset_index=onset, apex_index=apex, raw_label=label)


def write_manifest(path, samples) -> None:
    """Write samples as JSONL with frame paths relative to the manifest."""
    path = Path(path)
    base = path.parent
    lines = []
    for s in samples:
        rec = {
            "clip_id": s.clip_id,
            "subject_id": s.subject_id,
            "database": s.database,
            "frames": [str(Path(p).relative_to(base)) for p in s.frame_paths],
            "onset": s.onset_index,
            "apex": s.apex_index,
            "label": s.raw_label,
        }
        lines.append(json.dumps(rec, sort_keys=True))
    atomic_write_text(path, "\n".join(lines) + ("\n" if lines else ""))


# ---------------------------------------------------------------------------
# label schemes


def _db_family(database: str) -> str:
    return "SMIC" if database.startswith("SMIC") else database


@dataclass(frozen=True)
class LabelScheme:
    """Raw label -> protocol class mapping for one evaluation protocol."""

    name: str
    classes: tuple
    rules: dict  # database family -> {lowercased raw label: class name or EXCLUDED}

    def class_index(self, raw_label: str, database: str):
        fam = _db_family(database)
        table = self.rules.get(fam)
        if table is None:
            raise DataError(f"scheme '{self.name}' does not cover database {database}")
        target = table.get(raw_label.strip().lower())
        if target is None:
            raise DataError(
                f"unknown raw label {raw_label!r} for {database} under scheme '{self.name}'")
        if target is EXCLUDED:
            return EXCLUDED
        return self.classes.index(target)


def regroup_label(raw_label: str, database: str, scheme: LabelScheme):
    """Protocol class index for a raw label, or EXCLUDED when the protocol
    drops that label."""
    return scheme.class_index(raw_label, database)


_SMIC_DIRECT = {"negative": "Negative", "positive": "Positive", "surprise": "Surprise"}

CDE3 = LabelScheme(
    name="cde3",
    classes=("Negative", "Positive", "Surprise"),
    rules={
        "SMIC": dict(_SMIC_DIRECT),
        "SYNTH": {**_SMIC_DIRECT, "others": EXCLUDED},
        "CASME2": {
            "disgust": "Negative", "repression": "Negative",
            "happiness": "Positive", "surprise": "Surprise",
            "others": EXCLUDED, "sadness": EXCLUDED, "fear": EXCLUDED,
        },
        "SAMM": {
            "anger": "Negative", "angry": "Negative", "contempt": "Negative",
            "disgust": "Negative", "fear": "Negative", "sadness": "Negative",
            "happiness": "Positive", "surprise": "Surprise",
            "others": EXCLUDED, "other": EXCLUDED,
        },
    },
)

CDMER3 = LabelScheme(
    name="cdmer3",
    classes=("Negative", "Positive", "Surprise"),
    rules={
        "SMIC": dict(_SMIC_DIRECT),
        "SYNTH": {**_SMIC_DIRECT, "others": EXCLUDED},
        "CASME2": {
            "disgust": "Negative", "sadness": "Negative", "fear": "Negative",
            "happiness": "Positive", "surprise": "Surprise",
            "repression": EXCLUDED, "others": EXCLUDED,
        },
    },
)

SINGLE4 = LabelScheme(
    name="single4",
    classes=("Negative", "Positive", "Surprise", "Others"),
    rules={
        "SMIC": dict(_SMIC_DIRECT),
        "SYNTH": {**_SMIC_DIRECT, "others": "Others"},
        "CASME2": {
            "disgust": "Negative", "sadness": "Negative", "fear": "Negative",
            "happiness": "Positive", "surprise": "Surprise",
            "repression": "Others", "others": "Others",
        },
        "SAMM": {
            "disgust": "Negative", "anger": "Negative", "angry": "Negative",
            "contempt": "Negative", "fear": "Negative", "sadness": "Negative",
            "happiness": "Positive", "surprise": "Surprise",
            "others": "Others", "other": "Others",
        },
    },
)

CASME2_5 = LabelScheme(
    name="casme2_5",
    classes=("Happiness", "Surprise", "Disgust", "Repression", "Others"),
    rules={
        "CASME2": {
            "happiness": "Happiness", "surprise": "Surprise", "disgust": "Disgust",
            "repression": "Repression", "others": "Others",
            "sadness": EXCLUDED, "fear": EXCLUDED,
        },
    },
)

SCHEMES = {s.name: s for s in (CDE3, CDMER3, SINGLE4, CASME2_5)}


def label_samples(samples, scheme: LabelScheme):
    """Apply a scheme; returns (kept_samples, class_indices, n_excluded).

    Excluded samples are dropped before any fold planning and never enter
    the metrics.
    """
    kept, labels = [], []
    dropped = 0
    for s in samples:
        idx = scheme.class_index(s.raw_label, s.database)
        if idx is EXCLUDED:
            dropped += 1
            continue
        kept.append(s)
        labels.append(idx)
    return kept, np.asarray(labels, dtype=np.int64), dropped


# ---------------------------------------------------------------------------
# synthetic clips


SYNTH_CLASS_NAMES = ("Negative", "Positive", "Surprise", "Others")
SYNTH_PEAK_SHIFT = 2.0  # px at the apex frame


@dataclass
class SynthSpec:
    """Settings for the synthetic micro-motion generator."""

    n_subjects: int
    clips_per_subject: int
    n_classes: int
    frame_size: int = 64
    frames_per_clip: int = 12
    noise_sigma: float = 0.0
    seed: int = 0

    def validate(self):
        if min(self.n_subjects, self.clips_per_subject, self.n_classes) < 1:
            raise ConfigError("synthetic counts must be positive")
        if self.n_classes > len(SYNTH_CLASS_NAMES):
            raise ConfigError(f"at most {len(SYNTH_CLASS_NAMES)} synthetic classes supported")
        if self.frame_size < 16:
            raise ConfigError("synthetic frames must be at least 16x16")
        if self.frames_per_clip < 3:
            raise ConfigError("synthetic clips need at least 3 frames")
        if self.noise_sigma < 0:
            raise ConfigError("noise_sigma must be non-negative")


def _texture_params(rng, n_components: int = 12, size: int = 64):
    return {
        "amps": rng.uniform(0.5, 1.0, n_components),
        "freqs": rng.uniform(1.5, 6.0, n_components),
        "angles": rng.uniform(0.0, np.pi, n_components),
        "phases": rng.uniform(0.0, 2 * np.pi, n_components),
        "size": size,
    }


def _texture_eval(tp, xs, ys):
    """Band-limited random texture evaluated at continuous coordinates."""
    out = np.zeros_like(xs, dtype=np.float64)
    two_pi = 2.0 * np.pi
    for a, f, th, ph in zip(tp["amps"], tp["freqs"], tp["angles"], tp["phases"]):
        out += a * np.cos(two_pi * f * (np.cos(th) * xs + np.sin(th) * ys) / tp["size"] + ph)
    return 0.5 + 0.4 * out / np.abs(tp["amps"]).sum()


def motion_template(class_index: int, size: int):
    """Peak displacement field (du, dv) in pixels for one synthetic class.

    0: rightward translation of the lower half
    1: upward translation of the upper half
    2: radial expansion about the center, magnitude graded toward the
       bottom so the field has a well-defined mean direction
    3: leftward shear (horizontal shift growing with row index)
    """
    h = w = size
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    m = SYNTH_PEAK_SHIFT
    if class_index == 0:
        mask = 1.0 / (1.0 + np.exp(-(yy - 0.5 * (h - 1)) / (h / 16.0)))
        return m * mask, np.zeros_like(yy)
    if class_index == 1:
        mask = 1.0 / (1.0 + np.exp(-(0.5 * (h - 1) - yy) / (h / 16.0)))
        return np.zeros_like(yy), -m * mask
    if class_index == 2:
        cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
        radius = (min(h, w) - 1) / 2.0
        grade = 0.5 + yy / (h - 1)
        return m * grade * (xx - cx) / radius, m * grade * (yy - cy) / radius
    if class_index == 3:
        return -m * (yy / (h - 1)), np.zeros_like(yy)
    raise ConfigError(f"no motion template for class index {class_index}")


def _ramp(n_frames: int, apex: int) -> np.ndarray:
    """Motion magnitude profile: 0 at the first frame, 1 at the apex,
    decaying to 0.4 at the last frame."""
    r = np.zeros(n_frames)
    r[:apex + 1] = np.linspace(0.0, 1.0, apex + 1)
    if apex < n_frames - 1:
        r[apex:] = np.linspace(1.0, 0.4, n_frames - apex)
    return r


def generate_synthetic(spec: SynthSpec, out_dir) -> list:
    """Render synthetic clips to ``out_dir`` and write a manifest.

    Each subject gets its own base texture; each class imposes its motion
    template with magnitude ramping to a known apex. Class assignment
    cycles through subjects and clips so counts stay balanced. Returns
    the generated samples (also written to ``out_dir/manifest.jsonl``).
    """
    spec.validate()
    out_dir = Path(out_dir)
    frames_root = out_dir / "frames"
    try:
        frames_root.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataError(f"cannot create work directory {frames_root}: {exc}") from None

    size = spec.frame_size
    n_frames = spec.frames_per_clip
    apex = int(round(0.6 * (n_frames - 1)))
    apex = max(1, min(n_frames - 2, apex)) if n_frames > 2 else 1
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    templates = [motion_template(k, size) for k in range(spec.n_classes)]

    root_ss = np.random.SeedSequence(spec.seed)
    subject_seqs = root_ss.spawn(spec.n_subjects)
    samples = []
    for si in range(spec.n_subjects):
        subj_children = subject_seqs[si].spawn(spec.clips_per_subject + 1)
        texture = _texture_params(np.random.default_rng(subj_children[0]), size=size)
        for ci in range(spec.clips_per_subject):
            k = (si * spec.clips_per_subject + ci) % spec.n_classes
            du, dv = templates[k]
            ramp = _ramp(n_frames, apex)
            noise_rng = np.random.default_rng(subj_children[ci + 1])
            clip_id = f"s{si:02d}c{ci:02d}"
            clip_dir = frames_root / clip_id
            clip_dir.mkdir(parents=True, exist_ok=True)
            paths = []
            for t in range(n_frames):
                img = _texture_eval(texture, xx - ramp[t] * du, yy - ramp[t] * dv)
                if spec.noise_sigma > 0:
                    img = img + noise_rng.normal(0.0, spec.noise_sigma, img.shape)
                arr = np.clip(img, 0.0, 1.0)
                arr8 = np.rint(arr * 255.0).astype(np.uint8)
                fp = clip_dir / f"f{t:03d}.png"
                Image.fromarray(arr8, mode="L").save(fp, format="PNG")
                paths.append(fp)
            samples.append(Sample(
                clip_id=clip_id,
                subject_id=f"subj{si:02d}",
                database="SYNTH",
                frame_paths=paths,
                onset_index=0,
                apex_index=apex,
                raw_label=SYNTH_CLASS_NAMES[k],
            ))
    write_manifest(out_dir / "manifest.jsonl", samples)
    return samples
