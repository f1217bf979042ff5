"""Synthetic volumetric MRI cohort generator.

Each study is rendered in a canonical ``X x Y x Z`` anatomy grid (x: left to
right, y: anterior to posterior, z: inferior to superior).  Sequences are
axis-permuted views of that grid whose tissue and lesion intensities depend on
the sequence's modality family, so the same lesion is bright on T2/FLAIR and
dark (or invisible) on T1 depending on its class signature.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

MANIFEST_SCHEMA_VERSION = 1

PLANES = ("axial", "coronal", "sagittal")
PLANE_PREFIX = {"axial": "AX", "coronal": "COR", "sagittal": "SAG"}
# stored array = canonical.transpose(PLANE_PERMUTATION[plane])
PLANE_PERMUTATION = {"axial": (0, 1, 2), "coronal": (0, 2, 1), "sagittal": (1, 2, 0)}
MODALITIES = ("T1", "T2", "FLAIR", "T1POST")
T2_LIKE = ("T2", "FLAIR")
T1_LIKE = ("T1", "T1POST")
ACUITY_LEVELS = ("normal", "medium", "high")
SEVERITIES = ("mild", "moderate", "severe")
SEVERITY_RADIUS = {"mild": 1.6, "moderate": 2.2, "severe": 2.9}

# (parenchyma, csf) base intensities per modality family
TISSUE_INTENSITY = {
    "T1": (0.55, 0.15),
    "T2": (0.40, 0.85),
    "FLAIR": (0.45, 0.10),
    "T1POST": (0.55, 0.15),
}

STUDY_NAMES = (
    "MRI BRAIN WITHOUT CONTRAST",
    "MRI BRAIN WITH AND WITHOUT CONTRAST",
    "MRI BRAIN STROKE PROTOCOL",
    "MRI BRAIN TUMOR PROTOCOL",
    "MRI HEAD WO W CONTRAST",
)

NORMAL_FINDING = "no significant abnormality"


class CohortConfigError(ValueError):
    """Invalid cohort configuration; ``field`` names the offending entry."""

    def __init__(self, field_name: str, message: str):
        super().__init__(f"{field_name}: {message}")
        self.field = field_name


@dataclass(frozen=True)
class Region:
    name: str
    # canonical-grid fractions: (x offset from midline, y, z) ranges
    x_off: tuple[float, float]
    y: tuple[float, float]
    z: tuple[float, float]
    lateral: bool = True


REGIONS = {
    "frontal": Region("frontal", (0.12, 0.30), (0.20, 0.36), (0.40, 0.80)),
    "parietal": Region("parietal", (0.12, 0.30), (0.40, 0.60), (0.50, 0.85)),
    "occipital": Region("occipital", (0.08, 0.26), (0.66, 0.80), (0.35, 0.75)),
    "temporal": Region("temporal", (0.28, 0.34), (0.32, 0.55), (0.15, 0.45)),
    "cerebellar": Region("cerebellar", (0.05, 0.20), (0.65, 0.80), (0.05, 0.25)),
    "convexity": Region("convexity", (0.30, 0.36), (0.25, 0.70), (0.45, 0.80)),
    "periventricular": Region("periventricular", (0.10, 0.18), (0.38, 0.62), (0.40, 0.65)),
    "central": Region("central", (0.0, 0.0), (0.45, 0.55), (0.45, 0.60), lateral=False),
}


@dataclass(frozen=True)
class ClassSpec:
    """One diagnosis class: appearance, report phrasing and clinical mapping."""

    name: str
    category: str
    phrase: str
    keywords: tuple[str, ...]
    contrast: dict[str, float]
    regions: tuple[str, ...]
    acuity: str
    referrals: tuple[str, ...] = ()
    size_scale: float = 1.0


DEFAULT_CLASSES: tuple[ClassSpec, ...] = (
    ClassSpec("glioma", "neoplastic", "infiltrative glioma", ("glioma",),
              {"T1": -0.30, "T2": 0.40, "FLAIR": 0.45, "T1POST": 0.35},
              ("frontal", "parietal", "temporal"), "high", ("neurosurgery", "neuro-oncology"), 1.35),
    ClassSpec("metastasis", "neoplastic", "enhancing metastasis", ("metasta",),
              {"T1": -0.10, "T2": 0.0, "FLAIR": 0.0, "T1POST": 0.45},
              ("parietal", "occipital", "cerebellar"), "high", ("neuro-oncology",)),
    ClassSpec("meningioma", "neoplastic", "extra-axial meningioma", ("meningioma",),
              {"T1": 0.0, "T2": 0.0, "FLAIR": 0.0, "T1POST": 0.45},
              ("convexity",), "medium", ("neurosurgery",), 1.15),
    ClassSpec("subdural", "vascular", "subdural hematoma", ("subdural", "hemat"),
              {"T1": 0.25, "T2": 0.25, "FLAIR": 0.35, "T1POST": 0.25},
              ("convexity",), "high", ("neurosurgery",)),
    ClassSpec("ischemia", "vascular", "acute ischemic infarct", ("infarct",),
              {"T1": 0.0, "T2": 0.40, "FLAIR": 0.45, "T1POST": 0.0},
              ("frontal", "parietal", "occipital"), "high", ("neurology",)),
    ClassSpec("hemorrhage", "vascular", "intraparenchymal hemorrhage", ("hemorrhage",),
              {"T1": 0.35, "T2": -0.30, "FLAIR": -0.25, "T1POST": 0.35},
              ("frontal", "temporal", "parietal"), "high", ("neurosurgery",)),
    ClassSpec("arachnoid_cyst", "structural", "arachnoid cyst", ("arachnoid", "cyst"),
              {"T1": -0.40, "T2": 0.45, "FLAIR": -0.35, "T1POST": -0.40},
              ("temporal", "convexity"), "normal", ()),
    ClassSpec("ventriculomegaly", "structural", "ventriculomegaly", ("ventriculomegaly",),
              {"T1": -0.40, "T2": 0.45, "FLAIR": -0.30, "T1POST": -0.40},
              ("central",), "medium", ("neurosurgery",), 1.2),
    ClassSpec("colloid_cyst", "structural", "obstructive colloid cyst", ("colloid",),
              {"T1": 0.35, "T2": -0.35, "FLAIR": 0.0, "T1POST": 0.0},
              ("central",), "medium", ("neurosurgery",), 0.8),
    ClassSpec("demyelination", "inflammatory", "demyelinating plaques", ("demyelinat",),
              {"T1": 0.0, "T2": 0.35, "FLAIR": 0.45, "T1POST": 0.0},
              ("periventricular",), "medium", ("neurology",)),
    ClassSpec("abscess", "inflammatory", "brain abscess", ("abscess",),
              {"T1": -0.25, "T2": 0.40, "FLAIR": 0.30, "T1POST": 0.45},
              ("frontal", "parietal", "cerebellar"), "high", ("neurosurgery", "neurology")),
    ClassSpec("encephalitis", "inflammatory", "encephalitis", ("encephalitis",),
              {"T1": 0.0, "T2": 0.40, "FLAIR": 0.45, "T1POST": 0.0},
              ("temporal",), "high", ("neurology",)),
)

DEFAULT_PREVALENCE = (0.0968, 0.0872, 0.0678, 0.0775, 0.0872, 0.0581,
                      0.0678, 0.0775, 0.0581, 0.0775, 0.0581, 0.0678)

# (source class, implied class, probability)
DEFAULT_COOCCURRENCE = (("colloid_cyst", "ventriculomegaly", 0.6),)

REFERRALS = ("neurosurgery", "neurology", "neuro-oncology")


@dataclass(frozen=True)
class SequenceSpec:
    modality: str
    variants: tuple[str, ...]
    planes: dict[str, float]
    include_prob: float = 1.0


DEFAULT_ROSTER: tuple[SequenceSpec, ...] = (
    SequenceSpec("T1", ("T1", "T1_SE", "T1_3D"), {"axial": 1.0}),
    SequenceSpec("T2", ("T2", "T2_TSE", "T2_FSE"), {"axial": 0.7, "coronal": 0.3}),
    SequenceSpec("FLAIR", ("T2_FLAIR", "FLAIR", "FLAIR_FS"),
                 {"axial": 0.5, "coronal": 0.3, "sagittal": 0.2}, include_prob=0.85),
    SequenceSpec("T1POST", ("T1_POST", "T1+C", "T1_GAD"),
                 {"axial": 0.5, "coronal": 0.25, "sagittal": 0.25}),
)


@dataclass(frozen=True)
class BiasModel:
    """Logistic link from exposures to P(turnaround > 2 days)."""

    intercept: float = -0.9
    weekend: float = math.log(2.5)
    # additive log-odds per population quartile (1 = most rural)
    quartile: tuple[float, ...] = (0.8, 0.4, 0.1, 0.0)
    # additive log-odds per region code
    region: tuple[float, ...] = (0.0, 0.1, 0.2, 0.3, 0.5, 0.9)
    long_mean_extra_days: float = 2.5


@dataclass(frozen=True)
class AttributeMarginals:
    p_female: float = 0.52
    age_mean: float = 50.0
    age_sd: float = 20.0
    race: tuple[float, ...] = (0.70, 0.15, 0.06, 0.05, 0.04)
    region: tuple[float, ...] = (0.35, 0.20, 0.18, 0.12, 0.09, 0.06)
    quartile: tuple[float, ...] = (0.25, 0.25, 0.25, 0.25)
    p_weekend: float = 0.25
    p_government_insurer: float = 0.40
    scanner: tuple[float, ...] = (0.45, 0.35, 0.20)


@dataclass(frozen=True)
class CohortConfig:
    n_studies: int = 500
    grid: tuple[int, int, int] = (32, 32, 8)
    n_classes: int = 12
    prevalence: tuple[float, ...] | None = None
    class_specs: tuple[ClassSpec, ...] | None = None
    cooccurrence: tuple[tuple[str, str, float], ...] = DEFAULT_COOCCURRENCE
    roster: tuple[SequenceSpec, ...] = DEFAULT_ROSTER
    attributes: AttributeMarginals = field(default_factory=AttributeMarginals)
    bias: BiasModel = field(default_factory=BiasModel)
    noise_sd: float = 0.03
    lesion_gain: float = 1.0
    lesion_scale: float = 1.0
    # parenchymal intensity change per year of age, relative
    age_intensity_slope: float = -0.003
    qualifier_prob: float = 0.3
    n_boilerplate: tuple[int, int] = (3, 5)

    @property
    def classes(self) -> tuple[ClassSpec, ...]:
        if self.class_specs is not None:
            return self.class_specs
        return DEFAULT_CLASSES[: self.n_classes]

    @property
    def class_prevalence(self) -> tuple[float, ...]:
        if self.prevalence is not None:
            return tuple(self.prevalence)
        return DEFAULT_PREVALENCE[: len(self.classes)]

    def validate(self) -> None:
        if self.n_studies < 1:
            raise CohortConfigError("n_studies", "must be >= 1")
        if len(self.grid) != 3 or min(self.grid) < 1:
            raise CohortConfigError("grid", "must be three positive sizes")
        if not self.roster:
            raise CohortConfigError("roster", "at least one sequence required")
        if len(self.roster) < 2:
            raise CohortConfigError("roster", "studies need >= 2 sequences")
        classes = self.classes
        if not 1 <= len(classes) <= len(DEFAULT_CLASSES) and self.class_specs is None:
            raise CohortConfigError("n_classes", f"must be in [1, {len(DEFAULT_CLASSES)}]")
        prev = self.class_prevalence
        if len(prev) != len(classes):
            raise CohortConfigError("prevalence", f"expected {len(classes)} entries, got {len(prev)}")
        for p in prev:
            if not 0.0 <= p <= 1.0:
                raise CohortConfigError("prevalence", f"value {p} outside [0, 1]")
        for spec in self.roster:
            if spec.modality not in MODALITIES:
                raise CohortConfigError("roster", f"unknown modality {spec.modality!r}")
            if not 0.0 <= spec.include_prob <= 1.0:
                raise CohortConfigError("roster", "include_prob outside [0, 1]")
            if any(p not in PLANES for p in spec.planes):
                raise CohortConfigError("roster", f"unknown plane in {spec.planes}")
        for src, dst, p in self.cooccurrence:
            if not 0.0 <= p <= 1.0:
                raise CohortConfigError("cooccurrence", f"probability {p} outside [0, 1]")
        for c in classes:
            for r in c.regions:
                if r not in REGIONS:
                    raise CohortConfigError("class_specs", f"unknown region {r!r}")
        for name, probs in (("attributes.race", self.attributes.race),
                            ("attributes.region", self.attributes.region),
                            ("attributes.quartile", self.attributes.quartile),
                            ("attributes.scanner", self.attributes.scanner)):
            if abs(sum(probs) - 1.0) > 1e-6 or min(probs) < 0:
                raise CohortConfigError(name, "must be a probability vector")
        if len(self.bias.region) != len(self.attributes.region):
            raise CohortConfigError("bias.region", "length must match attributes.region")
        if len(self.bias.quartile) != len(self.attributes.quartile):
            raise CohortConfigError("bias.quartile", "length must match attributes.quartile")


@dataclass
class SequenceVolume:
    seq_name: str
    modality: str
    plane: str
    voxels: np.ndarray

    @property
    def orientation(self) -> tuple[int, int, int]:
        return PLANE_PERMUTATION[self.plane]


@dataclass(frozen=True)
class Finding:
    label: int
    class_name: str
    phrase: str
    laterality: str
    severity: str
    region: str

    @property
    def text(self) -> str:
        return f"{self.severity} {self.phrase} in the {self.laterality} {self.region} region"


@dataclass
class RawReport:
    prose: str
    findings: list[Finding]


@dataclass
class SensitiveAttributes:
    sex: str
    age_years: float
    race_code: int
    region_code: int
    population_quartile: int
    weekend_flag: int
    insurer_code: int
    scanner_code: int
    turnaround_days: float


@dataclass
class LesionMask:
    label: int
    finding_index: int
    mask: np.ndarray  # bool, canonical grid


@dataclass
class VolumetricStudy:
    study_id: str
    study_name: str
    sequences: list[SequenceVolume]
    report: RawReport
    labels: np.ndarray
    attributes: SensitiveAttributes
    masks: list[LesionMask]

    def sequence(self, name: str) -> SequenceVolume:
        for s in self.sequences:
            if s.seq_name == name:
                return s
        raise KeyError(name)

    def class_mask(self, label: int) -> np.ndarray:
        """Union of all lesion masks for ``label`` in the canonical grid."""
        out = np.zeros(self.masks[0].mask.shape if self.masks else (0, 0, 0), dtype=bool)
        for m in self.masks:
            if m.label == label:
                out |= m.mask
        return out

    @property
    def abnormal(self) -> bool:
        return bool(self.labels.any())


def mask_in_sequence(mask: np.ndarray, seq: SequenceVolume) -> np.ndarray:
    """Express a canonical-grid mask in the voxel layout of ``seq``."""
    return np.transpose(mask, seq.orientation)


def effective_prevalence(config: CohortConfig) -> np.ndarray:
    """Marginal positive rate per class after co-occurrence rules are applied."""
    classes = config.classes
    idx = {c.name: i for i, c in enumerate(classes)}
    prev = np.array(config.class_prevalence, dtype=float)
    out = prev.copy()
    for src, dst, p in config.cooccurrence:
        if src in idx and dst in idx:
            out[idx[dst]] = out[idx[dst]] + (1 - out[idx[dst]]) * prev[idx[src]] * p
    return out


def expected_normal_fraction(config: CohortConfig) -> float:
    # co-occurrence only adds labels to already-abnormal studies
    return float(np.prod(1.0 - np.array(config.class_prevalence, dtype=float)))


def expected_weekend_odds_ratio(config: CohortConfig, threshold_days: float = 2.0) -> float:
    """Marginal odds ratio of long turnaround for weekend vs weekday studies.

    The bias model sets a conditional log-odds; the marginal odds ratio after
    averaging over quartile and region differs slightly, so it is computed by
    exact enumeration.  ``threshold_days`` must be 2 (the link threshold).
    """
    if threshold_days != 2.0:
        raise ValueError("only the modeled 2-day threshold has a closed form")
    a, b = config.attributes, config.bias
    rates = []
    for w in (1, 0):
        tot = 0.0
        for qi, qp in enumerate(a.quartile):
            for ri, rp in enumerate(a.region):
                eta = b.intercept + b.weekend * w + b.quartile[qi] + b.region[ri]
                tot += qp * rp / (1.0 + math.exp(-eta))
        rates.append(tot)
    p1, p0 = rates
    return (p1 / (1 - p1)) / (p0 / (1 - p0))


_BOILERPLATE = (
    "Technique: multiplanar multisequence MRI of the brain was performed.",
    "The visualized paranasal sinuses are clear.",
    "The orbits are unremarkable.",
    "No acute intracranial hemorrhage is identified.",
    "Flow voids are preserved.",
    "The calvarium is intact.",
    "Clinical history: headache.",
    "Clinical history: follow up.",
    "The pituitary gland is normal in size.",
    "Mastoid air cells are clear.",
    "Comparison: none available.",
    "The craniocervical junction is normal.",
)

_QUALIFIERS = (
    ", stable compared to the previous exam",
    ", with interval progression",
    ", improved from the prior study",
    ", unchanged from previous imaging",
)


def _sentence(text: str) -> str:
    return text[0].upper() + text[1:]


def _sample_labels(rng: np.random.Generator, config: CohortConfig) -> np.ndarray:
    classes = config.classes
    prev = np.asarray(config.class_prevalence, dtype=float)
    y = (rng.random(len(classes)) < prev).astype(np.int8)
    idx = {c.name: i for i, c in enumerate(classes)}
    for src, dst, p in config.cooccurrence:
        if src in idx and dst in idx and y[idx[src]]:
            if rng.random() < p:
                y[idx[dst]] = 1
    return y


def _sample_attributes(rng: np.random.Generator, config: CohortConfig) -> SensitiveAttributes:
    a, b = config.attributes, config.bias
    sex = "F" if rng.random() < a.p_female else "M"
    age = float(np.clip(rng.normal(a.age_mean, a.age_sd), 1.0, 95.0))
    race = int(rng.choice(len(a.race), p=a.race))
    region = int(rng.choice(len(a.region), p=a.region))
    quartile = int(rng.choice(len(a.quartile), p=a.quartile)) + 1
    weekend = int(rng.random() < a.p_weekend)
    insurer = int(rng.random() < a.p_government_insurer)
    scanner = int(rng.choice(len(a.scanner), p=a.scanner))
    eta = b.intercept + b.weekend * weekend + b.quartile[quartile - 1] + b.region[region]
    p_long = 1.0 / (1.0 + math.exp(-eta))
    if rng.random() < p_long:
        tat = 2.0 + 1e-3 + rng.exponential(b.long_mean_extra_days)
    else:
        tat = rng.uniform(0.1, 2.0)
    return SensitiveAttributes(sex, round(age, 1), race, region, quartile, weekend,
                               insurer, scanner, round(float(tat), 3))


def _anatomy(rng: np.random.Generator, grid: tuple[int, int, int]):
    X, Y, Z = grid
    cx, cy, cz = (X - 1) / 2, (Y - 1) / 2, (Z - 1) / 2
    rx = X * (0.40 + rng.uniform(-0.02, 0.02))
    ry = Y * (0.44 + rng.uniform(-0.02, 0.02))
    rz = Z * 0.52
    xx, yy, zz = np.meshgrid(np.arange(X), np.arange(Y), np.arange(Z), indexing="ij")
    brain = ((xx - cx) / rx) ** 2 + ((yy - cy) / ry) ** 2 + ((zz - cz) / rz) ** 2 <= 1.0
    vx, vy, vz = X * 0.06, Y * 0.14, max(Z * 0.14, 0.8)
    vent = ((xx - cx) / vx) ** 2 + ((yy - cy) / vy) ** 2 + ((zz - cz) / vz) ** 2 <= 1.0
    return brain, vent & brain, (xx, yy, zz)


def _lesion(rng, spec: ClassSpec, grid, coords, brain, severity: str, scale: float = 1.0):
    X, Y, Z = grid
    xx, yy, zz = coords
    region = REGIONS[rng.choice(spec.regions)]
    if region.lateral:
        side = "left" if rng.random() < 0.5 else "right"
    else:
        side = "midline"
    r = SEVERITY_RADIUS[severity] * spec.size_scale * scale * X / 32
    rz = max(0.9, r * 0.45 * Z / 8)
    for _ in range(50):
        off = rng.uniform(*region.x_off) * X
        cx = (X - 1) / 2 + (-off if side == "left" else off)
        cy = rng.uniform(*region.y) * (Y - 1)
        cz = rng.uniform(*region.z) * (Z - 1)
        m = ((xx - cx) / r) ** 2 + ((yy - cy) / r) ** 2 + ((zz - cz) / rz) ** 2 <= 1.0
        m &= brain
        if m.sum() >= 3:
            return m, side, region.name
    raise RuntimeError(f"could not place lesion for {spec.name}")


def _render(rng, modality, brain, vent, lesions, age, config: CohortConfig):
    par, csf = TISSUE_INTENSITY[modality]
    par = par * (1.0 + config.age_intensity_slope * (age - 50.0))
    vol = np.zeros(brain.shape, dtype=np.float64)
    vol[brain] = par
    vol[vent] = csf
    for spec, m in lesions:
        vol[m] += spec.contrast[modality] * config.lesion_gain
    vol[brain] += rng.normal(0.0, config.noise_sd, size=int(brain.sum()))
    vol[~brain] = np.abs(rng.normal(0.0, config.noise_sd / 6, size=int((~brain).sum())))
    return np.clip(vol, 0.0, 1.0).astype(np.float32)


def _make_study(rng: np.random.Generator, index: int, config: CohortConfig) -> VolumetricStudy:
    classes = config.classes
    labels = _sample_labels(rng, config)
    attrs = _sample_attributes(rng, config)
    brain, vent, coords = _anatomy(rng, config.grid)

    findings: list[Finding] = []
    masks: list[LesionMask] = []
    lesions = []
    for li in np.flatnonzero(labels):
        spec = classes[li]
        severity = SEVERITIES[int(rng.integers(len(SEVERITIES)))]
        m, side, region = _lesion(rng, spec, config.grid, coords, brain, severity, config.lesion_scale)
        findings.append(Finding(int(li), spec.name, spec.phrase, side, severity, region))
        masks.append(LesionMask(int(li), len(findings) - 1, m))
        lesions.append((spec, m))

    sequences = []
    for k, sspec in enumerate(config.roster):
        if k >= 2 and rng.random() >= sspec.include_prob:
            continue
        planes = list(sspec.planes)
        probs = np.array([sspec.planes[p] for p in planes], dtype=float)
        plane = planes[int(rng.choice(len(planes), p=probs / probs.sum()))]
        variant = sspec.variants[int(rng.integers(len(sspec.variants)))]
        canonical = _render(rng, sspec.modality, brain, vent, lesions, attrs.age_years, config)
        vox = np.ascontiguousarray(np.transpose(canonical, PLANE_PERMUTATION[plane]))
        sequences.append(SequenceVolume(f"{PLANE_PREFIX[plane]}_{variant}", sspec.modality, plane, vox))

    sentences = []
    for f in findings:
        s = _sentence(f.text)
        if rng.random() < config.qualifier_prob:
            s += _QUALIFIERS[int(rng.integers(len(_QUALIFIERS)))]
        sentences.append(s + ".")
    lo, hi = config.n_boilerplate
    n_bp = int(rng.integers(lo, hi + 1))
    bp = [_BOILERPLATE[i] for i in rng.choice(len(_BOILERPLATE), size=n_bp, replace=False)]
    if not findings:
        bp.append("No significant intracranial abnormality.")
    order = rng.permutation(len(sentences) + len(bp))
    pool = sentences + bp
    prose = " ".join(pool[i] for i in order)

    study_name = STUDY_NAMES[int(rng.integers(len(STUDY_NAMES)))]
    return VolumetricStudy(
        study_id=f"S{index:06d}",
        study_name=study_name,
        sequences=sequences,
        report=RawReport(prose, findings),
        labels=labels,
        attributes=attrs,
        masks=masks,
    )


def generate_cohort(config: CohortConfig, seed: int) -> list[VolumetricStudy]:
    """Generate ``config.n_studies`` studies; deterministic for ``(config, seed)``.

    Every study gets its own child generator, so the cohort can be sharded by
    index and regenerated piecewise with identical bytes.
    """
    config.validate()
    root = np.random.SeedSequence(seed)
    children = root.spawn(config.n_studies)
    return [_make_study(np.random.default_rng(c), i, config) for i, c in enumerate(children)]


@dataclass(frozen=True)
class MappingTable:
    """Diagnosis -> (acuity, referrals) lookup keyed by class index."""

    acuity: dict[int, str]
    referrals: dict[int, tuple[str, ...]]
    referral_names: tuple[str, ...] = REFERRALS

    @classmethod
    def from_classes(cls, classes: Sequence[ClassSpec]) -> "MappingTable":
        return cls({i: c.acuity for i, c in enumerate(classes)},
                   {i: tuple(c.referrals) for i, c in enumerate(classes)})


def acuity_referral_map(labels: np.ndarray, table: MappingTable) -> tuple[str, np.ndarray]:
    labels = np.asarray(labels)
    acuity = 0
    refs = np.zeros(len(table.referral_names), dtype=np.int8)
    for i in np.flatnonzero(labels == 1):
        if i not in table.acuity or i not in table.referrals:
            raise KeyError(f"mapping table has no entry for class {i}")
        acuity = max(acuity, ACUITY_LEVELS.index(table.acuity[i]))
        for r in table.referrals[i]:
            refs[table.referral_names.index(r)] = 1
    # validate coverage for every class even when negative
    missing = [i for i in range(len(labels)) if i not in table.acuity]
    if missing:
        raise KeyError(f"mapping table has no entry for classes {missing}")
    return ACUITY_LEVELS[acuity], refs


# ---------------------------------------------------------------- persistence


def save_cohort(studies: Iterable[VolumetricStudy], root: str | Path) -> Path:
    """Write a dataset directory: manifest.jsonl + volumes/*.npz + reports/*.txt."""
    root = Path(root)
    (root / "volumes").mkdir(parents=True, exist_ok=True)
    (root / "reports").mkdir(parents=True, exist_ok=True)
    manifest = root / "manifest.jsonl"
    with manifest.open("w") as fh:
        for st in studies:
            vol_path = Path("volumes") / f"{st.study_id}.npz"
            rep_path = Path("reports") / f"{st.study_id}.txt"
            arrays = {f"seq{i}": s.voxels for i, s in enumerate(st.sequences)}
            arrays.update({f"mask{i}": m.mask for i, m in enumerate(st.masks)})
            np.savez_compressed(root / vol_path, **arrays)
            (root / rep_path).write_text(st.report.prose)
            rec = {
                "schema_version": MANIFEST_SCHEMA_VERSION,
                "study_id": st.study_id,
                "study_name": st.study_name,
                "labels": st.labels.tolist(),
                "attributes": asdict(st.attributes),
                "sequences": [{"seq_name": s.seq_name, "modality": s.modality, "plane": s.plane}
                              for s in st.sequences],
                "findings": [asdict(f) for f in st.report.findings],
                "masks": [{"label": m.label, "finding_index": m.finding_index} for m in st.masks],
                "volume_file": str(vol_path),
                "report_file": str(rep_path),
            }
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    return manifest


def read_manifest(root: str | Path) -> list[dict]:
    out = []
    with (Path(root) / "manifest.jsonl").open() as fh:
        for line in fh:
            rec = json.loads(line)
            if rec.get("schema_version") != MANIFEST_SCHEMA_VERSION:
                raise ValueError(f"unsupported manifest schema {rec.get('schema_version')}")
            out.append(rec)
    return out


def load_cohort(root: str | Path) -> list[VolumetricStudy]:
    root = Path(root)
    studies = []
    for rec in read_manifest(root):
        with np.load(root / rec["volume_file"]) as z:
            seqs = [SequenceVolume(s["seq_name"], s["modality"], s["plane"], z[f"seq{i}"])
                    for i, s in enumerate(rec["sequences"])]
            masks = [LesionMask(m["label"], m["finding_index"], z[f"mask{i}"])
                     for i, m in enumerate(rec["masks"])]
        findings = [Finding(**f) for f in rec["findings"]]
        prose = (root / rec["report_file"]).read_text()
        studies.append(VolumetricStudy(
            rec["study_id"], rec["study_name"], seqs, RawReport(prose, findings),
            np.asarray(rec["labels"], dtype=np.int8), SensitiveAttributes(**rec["attributes"]), masks))
    return studies


def split_indices(n: int, seed: int, fractions=(0.7, 0.1, 0.2)) -> dict[str, np.ndarray]:
    """Deterministic train/val/test split of ``range(n)``."""
    rng = np.random.default_rng(seed)
    perm = rng.permutation(n)
    n_train = int(round(fractions[0] * n))
    n_val = int(round(fractions[1] * n))
    return {
        "train": np.sort(perm[:n_train]),
        "val": np.sort(perm[n_train:n_train + n_val]),
        "test": np.sort(perm[n_train + n_val:]),
    }


def with_overrides(config: CohortConfig, **kw) -> CohortConfig:
    return replace(config, **kw)
