"""Deterministic synthetic eye images with person and domain variation.

Rendering is built so that mirroring an image left-to-right gives exactly
the image rendered with negated yaw (for a person without yaw bias and with
noise off). Everything horizontal is computed with odd-symmetric arithmetic
and the blur sums mirror pairs before weighting, so the equality is bit-exact.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

IMAGE_SIZE = 32
MAX_ANGLE = np.pi / 3
DATASET_VERSION = 1

PITCH_RANGE = 0.35
YAW_RANGE = 0.5
# pupil travel in pixels per unit sin(angle)
TRAVEL = 7.0

_coords = np.arange(IMAGE_SIZE, dtype=np.float64) - (IMAGE_SIZE - 1) / 2.0
_YY, _XX = np.meshgrid(_coords, _coords, indexing="ij")


@dataclass(frozen=True)
class PersonSpec:
    person_id: str
    eye_aspect: float = 0.5
    iris_radius: float = 4.5
    pupil_scale: float = 1.0
    base_intensity: float = 0.85
    gaze_bias: tuple[float, float] = (0.0, 0.0)

    def __post_init__(self):
        object.__setattr__(self, "gaze_bias", tuple(float(v) for v in self.gaze_bias))
        checks = {
            "eye_aspect": (0.3, 0.9), "iris_radius": (2.0, 8.0), "pupil_scale": (0.5, 1.5),
            "base_intensity": (0.3, 1.0),
        }
        for name, (lo, hi) in checks.items():
            v = getattr(self, name)
            if not lo <= v <= hi:
                raise ValueError(f"PersonSpec.{name}={v} outside [{lo}, {hi}]")
        if max(abs(b) for b in self.gaze_bias) > 0.2:
            raise ValueError(f"PersonSpec.gaze_bias={self.gaze_bias} exceeds 0.2 rad")


@dataclass(frozen=True)
class DomainSpec:
    brightness_shift: float = 0.0
    contrast_scale: float = 1.0
    additive_noise_sigma: float = 0.0
    blur_radius: float = 0.0

    def __post_init__(self):
        if self.additive_noise_sigma < 0:
            raise ValueError("additive_noise_sigma must be >= 0")
        if self.contrast_scale <= 0:
            raise ValueError("contrast_scale must be > 0")
        if self.blur_radius < 0:
            raise ValueError("blur_radius must be >= 0")

    def without_noise(self) -> DomainSpec:
        return DomainSpec(self.brightness_shift, self.contrast_scale, 0.0, self.blur_radius)


SOURCE_DOMAIN = DomainSpec(brightness_shift=0.0, contrast_scale=1.0, additive_noise_sigma=0.01, blur_radius=0.0)
TARGET_DOMAIN = DomainSpec(brightness_shift=0.04, contrast_scale=0.85, additive_noise_sigma=0.02, blur_radius=0.5)


def _odd_sin(v: float) -> float:
    # sin with sign handled explicitly so f(-v) == -f(v) bit-exactly
    return float(np.copysign(np.sin(abs(v)), v)) if v != 0 else 0.0


def _coverage(signed_dist: np.ndarray) -> np.ndarray:
    return np.clip(0.5 - signed_dist, 0.0, 1.0)


def _gaussian_kernel(radius: float) -> np.ndarray:
    half = max(1, int(np.ceil(3 * radius)))
    k = np.exp(-0.5 * (np.arange(half + 1) / radius) ** 2)
    return k / (k[0] + 2 * k[1:].sum())


def _blur(img: np.ndarray, radius: float) -> np.ndarray:
    if radius <= 0:
        return img
    k = _gaussian_kernel(radius)
    half = len(k) - 1

    def along(a: np.ndarray, axis: int) -> np.ndarray:
        a = np.moveaxis(a, axis, -1)
        p = np.pad(a, [(0, 0)] * (a.ndim - 1) + [(half, half)], mode="edge")
        n = a.shape[-1]
        out = k[0] * p[..., half: half + n]
        for d in range(1, half + 1):
            out = out + k[d] * (p[..., half - d: half - d + n] + p[..., half + d: half + d + n])
        return np.moveaxis(out, -1, axis)

    return along(along(img, 1), 0)


def render(person: PersonSpec, domain: DomainSpec, gaze: tuple[float, float], rng_seed: int) -> np.ndarray:
    """Render a (1, 32, 32) float32 eye image for gaze (pitch, yaw) in radians."""
    pitch, yaw = float(gaze[0]), float(gaze[1])
    if abs(pitch) > MAX_ANGLE or abs(yaw) > MAX_ANGLE:
        raise ValueError(f"gaze {gaze} outside +-pi/3")
    bias_p, bias_y = person.gaze_bias
    travel = TRAVEL * person.pupil_scale
    cx = travel * (_odd_sin(yaw) + _odd_sin(bias_y))
    # image rows grow downward; positive pitch looks up
    cy = -travel * (_odd_sin(pitch) + _odd_sin(bias_p))

    a = 12.0
    b = a * person.eye_aspect
    skin = 0.6 * person.base_intensity
    sclera = person.base_intensity
    iris = 0.35 * person.base_intensity
    pupil = 0.08

    ell = np.sqrt((_XX / a) ** 2 + (_YY / b) ** 2)
    eye = _coverage((ell - 1.0) * b)
    dx = _XX - cx
    dy = _YY - cy
    r = np.sqrt(dx * dx + dy * dy)
    iris_cov = _coverage(r - person.iris_radius) * eye
    pupil_cov = _coverage(r - 0.45 * person.iris_radius) * eye

    img = np.full((IMAGE_SIZE, IMAGE_SIZE), skin)
    img = img + eye * (sclera - img)
    img = img + iris_cov * (iris - img)
    img = img + pupil_cov * (pupil - img)

    img = (img - 0.5) * domain.contrast_scale + 0.5 + domain.brightness_shift
    img = _blur(img, domain.blur_radius)
    if domain.additive_noise_sigma > 0:
        img = img + np.random.default_rng(rng_seed).normal(0.0, domain.additive_noise_sigma, img.shape)
    return np.clip(img, 0.0, 1.0).astype(np.float32)[None]


# --------------------------------------------------------------------------- datasets


@dataclass
class LabeledSet:
    """Images (N, 1, 32, 32) with (pitch, yaw) labels (N, 2), plus owner index."""

    images: np.ndarray
    labels: np.ndarray
    person_index: np.ndarray

    def __len__(self) -> int:
        return len(self.images)


@dataclass
class PersonDataset:
    """One target person: ordered unlabeled adaptation images and a labeled test split."""

    person: PersonSpec
    adapt_images: np.ndarray
    test_images: np.ndarray
    test_labels: np.ndarray
    # kept for analysis only; the personalization path never receives it
    _adapt_labels: np.ndarray = field(default=None, repr=False)

    def first_k(self, k: int) -> np.ndarray:
        if k < 1:
            raise ValueError(f"num_images must be >= 1, got {k}")
        if k > len(self.adapt_images):
            raise ValueError(
                f"person {self.person.person_id}: requested {k} adaptation images, only {len(self.adapt_images)} available")
        return self.adapt_images[:k]


@dataclass
class Benchmark:
    source: LabeledSet
    source_persons: list[PersonSpec]
    targets: list[PersonDataset]
    source_domain: DomainSpec
    target_domain: DomainSpec
    seed: int


def _sample_gaze(rng: np.random.Generator, n: int) -> np.ndarray:
    return np.stack([rng.uniform(-PITCH_RANGE, PITCH_RANGE, n), rng.uniform(-YAW_RANGE, YAW_RANGE, n)], axis=1)


def sample_source_person(rng: np.random.Generator, pid: str) -> PersonSpec:
    return PersonSpec(
        person_id=pid,
        eye_aspect=rng.uniform(0.42, 0.58),
        iris_radius=rng.uniform(4.0, 5.0),
        pupil_scale=rng.uniform(0.9, 1.1),
        base_intensity=rng.uniform(0.78, 0.92),
        gaze_bias=(0.0, 0.0),
    )


def sample_target_person(rng: np.random.Generator, pid: str) -> PersonSpec:
    sign = rng.choice([-1.0, 1.0], size=2)
    return PersonSpec(
        person_id=pid,
        eye_aspect=rng.uniform(0.5, 0.64),
        iris_radius=rng.uniform(4.6, 5.6),
        pupil_scale=rng.uniform(0.8, 1.2),
        base_intensity=rng.uniform(0.7, 0.82),
        gaze_bias=tuple(sign * rng.uniform(0.01, 0.04, size=2)),
    )


def _render_many(person: PersonSpec, domain: DomainSpec, gazes: np.ndarray, seeds: np.ndarray) -> np.ndarray:
    return np.stack([render(person, domain, g, int(s)) for g, s in zip(gazes, seeds)]).astype(np.float32)


def make_benchmark(n_source_persons: int = 20, n_samples_each: int = 200, n_target_persons: int = 10,
                   target_domain: DomainSpec = TARGET_DOMAIN, seed: int = 0, n_adapt: int = 15, n_test: int = 100,
                   source_domain: DomainSpec = SOURCE_DOMAIN) -> Benchmark:
    for name, v in (("n_source_persons", n_source_persons), ("n_samples_each", n_samples_each),
                    ("n_target_persons", n_target_persons), ("n_adapt", n_adapt), ("n_test", n_test)):
        if v < 1:
            raise ValueError(f"{name} must be positive, got {v}")
    root = np.random.SeedSequence(seed)
    src_ss, tgt_ss = root.spawn(2)

    images, labels, owners, persons = [], [], [], []
    for i, ss in enumerate(src_ss.spawn(n_source_persons)):
        rng = np.random.default_rng(ss)
        person = sample_source_person(rng, f"S{i:03d}")
        gazes = _sample_gaze(rng, n_samples_each)
        seeds = rng.integers(0, 2**31 - 1, n_samples_each)
        images.append(_render_many(person, source_domain, gazes, seeds))
        labels.append(gazes.astype(np.float32))
        owners.append(np.full(n_samples_each, i, dtype=np.int32))
        persons.append(person)
    source = LabeledSet(np.concatenate(images), np.concatenate(labels), np.concatenate(owners))

    targets = []
    for j, ss in enumerate(tgt_ss.spawn(n_target_persons)):
        rng = np.random.default_rng(ss)
        person = sample_target_person(rng, f"T{j:03d}")
        gazes = _sample_gaze(rng, n_adapt + n_test)
        seeds = rng.integers(0, 2**31 - 1, n_adapt + n_test)
        imgs = _render_many(person, target_domain, gazes, seeds)
        targets.append(PersonDataset(person, imgs[:n_adapt], imgs[n_adapt:],
                                     gazes[n_adapt:].astype(np.float32), gazes[:n_adapt].astype(np.float32)))
    return Benchmark(source, persons, targets, source_domain, target_domain, seed)


def split_source(source: LabeledSet, val_fraction: float, seed: int) -> tuple[LabeledSet, LabeledSet]:
    """Hold out a fraction of source samples (by index) for validation."""
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(source))
    n_val = int(round(len(source) * val_fraction))
    val, tr = np.sort(order[:n_val]), np.sort(order[n_val:])
    pick = lambda idx: LabeledSet(source.images[idx], source.labels[idx], source.person_index[idx])  # noqa: E731
    return pick(tr), pick(val)


# --------------------------------------------------------------------------- persistence


def _segments(bench: Benchmark) -> list[tuple[str, np.ndarray]]:
    segs = [("source.images", bench.source.images), ("source.labels", bench.source.labels)]
    for j, t in enumerate(bench.targets):
        segs += [(f"target{j}.adapt_images", t.adapt_images), (f"target{j}.adapt_labels", t._adapt_labels),
                 (f"target{j}.test_images", t.test_images), (f"target{j}.test_labels", t.test_labels)]
    return segs


def save_dataset(bench: Benchmark, path: str | Path) -> None:
    """Write ``<path>.json`` manifest and ``<path>.bin`` little-endian float32 blob."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    entries, chunks, offset = [], [], 0
    for name, arr in _segments(bench):
        arr = np.ascontiguousarray(arr, dtype="<f4")
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset, "count": int(arr.size)})
        chunks.append(arr.tobytes())
        offset += arr.size
    manifest = {
        "format_version": DATASET_VERSION,
        "seed": bench.seed,
        "source_domain": asdict(bench.source_domain),
        "target_domain": asdict(bench.target_domain),
        "source_persons": [asdict(p) for p in bench.source_persons],
        "source_person_index": bench.source.person_index.tolist(),
        "target_persons": [asdict(t.person) for t in bench.targets],
        "counts": {"source": len(bench.source), "targets": len(bench.targets)},
        "segments": entries,
    }
    path.with_suffix(".json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    path.with_suffix(".bin").write_bytes(b"".join(chunks))


def load_dataset(path: str | Path) -> Benchmark:
    path = Path(path)
    mpath, bpath = path.with_suffix(".json"), path.with_suffix(".bin")
    if not mpath.exists() or not bpath.exists():
        raise FileNotFoundError(f"dataset files missing: {mpath} / {bpath}")
    m = json.loads(mpath.read_text())
    if m.get("format_version") != DATASET_VERSION:
        raise ValueError(f"{mpath}: unsupported format_version {m.get('format_version')}")
    blob = np.frombuffer(bpath.read_bytes(), dtype="<f4")
    declared = sum(e["count"] for e in m["segments"])
    if blob.size != declared:
        raise ValueError(f"{bpath}: size mismatch, blob holds {blob.size} floats, manifest declares {declared}")
    seg = {}
    for e in m["segments"]:
        if e["count"] != int(np.prod(e["shape"])):
            raise ValueError(f"{mpath}: size mismatch in segment {e['name']}")
        seg[e["name"]] = blob[e["offset"]: e["offset"] + e["count"]].reshape(e["shape"]).astype(np.float32)
    n_src, n_tgt = m["counts"]["source"], m["counts"]["targets"]
    if len(seg["source.images"]) != n_src or len(m["target_persons"]) != n_tgt:
        raise ValueError(f"{mpath}: size mismatch between counts and segments")
    source = LabeledSet(seg["source.images"], seg["source.labels"],
                        np.asarray(m["source_person_index"], dtype=np.int32))
    targets = [
        PersonDataset(PersonSpec(**tp), seg[f"target{j}.adapt_images"], seg[f"target{j}.test_images"],
                      seg[f"target{j}.test_labels"], seg[f"target{j}.adapt_labels"])
        for j, tp in enumerate(m["target_persons"])
    ]
    return Benchmark(source, [PersonSpec(**p) for p in m["source_persons"]], targets,
                     DomainSpec(**m["source_domain"]), DomainSpec(**m["target_domain"]), m["seed"])
