"""Synthetic brain-like phantoms, the AAVOL1 volume format, and dataset manifests."""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, FormatError

HEALTHY, LESION = "healthy", "lesion"


@dataclass
class Volume:
    """D x H x W grid; float32 intensities in [0, 1] or uint8 binary."""

    data: np.ndarray

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.ndim != 3 or min(self.data.shape) <= 0:
            raise ConfigError(f"volume must be a non-empty 3-D array, got shape {self.data.shape}")
        if self.data.dtype not in (np.float32, np.uint8):
            raise ConfigError(f"volume payload must be float32 or uint8, got {self.data.dtype}")

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.data.shape

    def __eq__(self, other):
        return (isinstance(other, Volume) and self.data.dtype == other.data.dtype
                and self.data.shape == other.data.shape
                and self.data.tobytes() == other.data.tobytes())


@dataclass
class PatientRecord:
    id: str
    image: Volume
    brain_mask: Volume
    lesion_mask: Volume
    cohort: str


@dataclass
class PhantomParams:
    seed: int = 0
    dims: tuple[int, int, int] = (16, 64, 64)
    texture_band: tuple[float, float] = (1.0, 3.0)
    texture_amplitude: float = 0.06
    ribbons: tuple[int, int] = (6, 10)
    ribbon_depth: tuple[float, float] = (0.06, 0.12)
    ribbon_width: float = 1.5
    lesion_count: tuple[int, int] = (1, 3)
    lesion_radius: tuple[float, float] = (2.5, 4.0)
    lesion_boost: tuple[float, float] = (0.3, 0.45)

    def __post_init__(self):
        self.dims = tuple(int(v) for v in self.dims)
        for name in ("texture_band", "ribbons", "ribbon_depth", "lesion_count", "lesion_radius", "lesion_boost"):
            setattr(self, name, tuple(getattr(self, name)))
        if len(self.dims) != 3 or min(self.dims) < 1:
            raise ConfigError(f"phantom dims must be three positive ints, got {self.dims}")
        if self.lesion_radius[0] < 1.5:
            # a radius-1.5 ball already has 19 voxels (> 6); smaller ones may not
            raise ConfigError(f"lesion radius must be >= 1.5, got {self.lesion_radius}")
        if self.lesion_count[0] < 1 or self.lesion_count[1] < self.lesion_count[0]:
            raise ConfigError(f"bad lesion count range {self.lesion_count}")


def _ellipse_axes(rng, h, w):
    return (rng.uniform(0.34, 0.42) * h, rng.uniform(0.28, 0.36) * w)


def generate_phantom(p: PhantomParams, cohort: str, patient_id: str | None = None) -> PatientRecord:
    """Deterministic phantom from ``p.seed``.

    An elliptical "brain" with a soft rim, a band-limited cosine texture, and
    dark sulcus-like ribbons extruded (with slow drift) along the slice axis.
    The lesion cohort additionally gets hyperintense blobs.
    """
    if cohort not in (HEALTHY, LESION):
        raise ConfigError(f"cohort must be {HEALTHY!r} or {LESION!r}, got {cohort!r}")
    rng = np.random.default_rng(p.seed)
    d, h, w = p.dims
    zz, yy, xx = np.meshgrid(np.arange(d, dtype=np.float64), np.arange(h, dtype=np.float64),
                             np.arange(w, dtype=np.float64), indexing="ij")

    cy = h / 2 + rng.uniform(-2, 2)
    cx = w / 2 + rng.uniform(-2, 2)
    ay, ax = _ellipse_axes(rng, h, w)
    # head narrows slightly away from the middle slice
    zc = rng.uniform(0.3, 0.7) * (d - 1)
    shrink = np.sqrt(np.clip(1.0 - ((zz - zc) / (2.5 * max(d, 2))) ** 2, 0.5, 1.0))
    rho = np.sqrt(((yy - cy) / (ay * shrink)) ** 2 + ((xx - cx) / (ax * shrink)) ** 2)
    brain = rho <= 1.0

    # tissue: brighter core, slightly darker rim, smooth texture
    img = 0.42 + 0.12 * (1.0 - rho ** 2)
    lo, hi = p.texture_band
    for _ in range(6):
        freq = rng.uniform(lo, hi) / max(h, w) * 2 * math.pi
        theta = rng.uniform(0, 2 * math.pi)
        phase = rng.uniform(0, 2 * math.pi)
        kz = rng.uniform(-0.1, 0.1)
        img = img + (p.texture_amplitude / 3) * np.cos(
            freq * (np.cos(theta) * yy + np.sin(theta) * xx) + kz * zz + phase)

    # ribbons: wavy curves running inward from the rim
    n_rib = int(rng.integers(p.ribbons[0], p.ribbons[1] + 1))
    for _ in range(n_rib):
        ang = rng.uniform(0, 2 * math.pi)
        depth = rng.uniform(*p.ribbon_depth)
        length = rng.uniform(0.35, 0.7)
        wav_amp = rng.uniform(0.03, 0.1)
        wav_freq = rng.uniform(2.0, 5.0)
        wav_phase = rng.uniform(0, 2 * math.pi)
        drift = rng.uniform(-0.02, 0.02)
        # polar coordinates in the normalised ellipse frame
        ny = (yy - cy) / (ay * shrink)
        nx = (xx - cx) / (ax * shrink)
        r = np.sqrt(ny ** 2 + nx ** 2)
        phi = np.arctan2(ny, nx)
        centre = ang + drift * (zz - zc) + wav_amp * np.sin(wav_freq * math.pi * r + wav_phase)
        dphi = np.angle(np.exp(1j * (phi - centre)))
        dist_px = np.abs(dphi) * r * (ay + ax) / 2 * shrink
        along = np.clip((r - (1.0 - length)) / 0.1, 0.0, 1.0)
        img = img - depth * along * np.exp(-0.5 * (dist_px / p.ribbon_width) ** 2)

    # soft rim so the mask border is not a hard step
    img = img * np.clip((1.0 - rho) * 12.0, 0.0, 1.0)
    img = np.where(brain, img, 0.0)

    lesion = np.zeros(p.dims, dtype=bool)
    if cohort == LESION:
        n_les = int(rng.integers(p.lesion_count[0], p.lesion_count[1] + 1))
        rmin, rmax = p.lesion_radius
        for _ in range(n_les):
            rad = rng.uniform(rmin, rmax)
            # centre well inside the brain so the whole ball stays in the mask
            for _attempt in range(200):
                lz = rng.uniform(0, d - 1)
                ly = rng.uniform(cy - ay, cy + ay)
                lx = rng.uniform(cx - ax, cx + ax)
                iz = int(round(lz))
                s = float(shrink[iz, 0, 0])
                margin_r = math.hypot((ly - cy) / (ay * s), (lx - cx) / (ax * s))
                if margin_r + (rad + 2.0) / (min(ay, ax) * s) <= 1.0:
                    break
            dist = np.sqrt((zz - lz) ** 2 + (yy - ly) ** 2 + (xx - lx) ** 2)
            sigma = rad / math.sqrt(2 * math.log(4.0))
            bump = np.minimum(1.0, 2.0 * np.exp(-0.5 * (dist / sigma) ** 2))
            img = img + rng.uniform(*p.lesion_boost) * bump * brain
            lesion |= (dist <= rad) & brain

    img = np.clip(img, 0.0, 1.0).astype(np.float32)
    pid = patient_id or f"{cohort}-{p.seed}"
    return PatientRecord(pid, Volume(img), Volume(brain.astype(np.uint8)),
                         Volume(lesion.astype(np.uint8)), cohort)


def patient_seed(base: int, cohort: str, index: int) -> int:
    """Independent per-patient seed derived from a run seed."""
    tag = 0 if cohort == HEALTHY else 1
    return int(np.random.SeedSequence([int(base), tag, int(index)]).generate_state(1)[0])


def generate_cohort(p: PhantomParams, n_healthy: int, n_lesion: int) -> list[PatientRecord]:
    from dataclasses import replace
    records = []
    for cohort, n in ((HEALTHY, n_healthy), (LESION, n_lesion)):
        for i in range(n):
            pp = replace(p, seed=patient_seed(p.seed, cohort, i))
            records.append(generate_phantom(pp, cohort, patient_id=f"{cohort}-{i:03d}"))
    return records


# -- volume file format ---------------------------------------------------
VOL_MAGIC = b"AAVOL1"
HEADER = struct.Struct("<6sBBIII12s")  # 32 bytes
_TAGS = {np.dtype(np.float32): 0, np.dtype(np.uint8): 1}
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype(np.uint8)}
MAX_VOXELS = 1 << 31


def write_volume(v: Volume, path) -> None:
    d, h, w = v.dims
    header = HEADER.pack(VOL_MAGIC, _TAGS[v.data.dtype], 0, d, h, w, bytes(12))
    payload = np.ascontiguousarray(v.data, dtype=_DTYPES[_TAGS[v.data.dtype]]).tobytes()
    Path(path).write_bytes(header + payload)


def read_volume(path) -> Volume:
    raw = Path(path).read_bytes()
    if len(raw) < HEADER.size:
        raise FormatError(f"{path}: file shorter than the {HEADER.size}-byte header", len(raw))
    magic, tag, _pad, d, h, w, _reserved = HEADER.unpack_from(raw, 0)
    if magic != VOL_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}", 0)
    if tag not in _DTYPES:
        raise FormatError(f"{path}: unknown payload tag {tag}", 6)
    if min(d, h, w) == 0 or d * h * w > MAX_VOXELS:
        raise FormatError(f"{path}: implausible dims {d}x{h}x{w}", 8)
    dtype = _DTYPES[tag]
    need = d * h * w * dtype.itemsize
    have = len(raw) - HEADER.size
    if have != need:
        raise FormatError(f"{path}: payload has {have} bytes, dims {d}x{h}x{w} need {need}",
                          HEADER.size + min(have, need))
    data = np.frombuffer(raw, dtype=dtype, offset=HEADER.size).reshape(d, h, w)
    return Volume(data.astype(np.float32 if tag == 0 else np.uint8))


# -- manifests --------------------------------------------------------------
@dataclass
class ManifestEntry:
    id: str
    image: str
    brain_mask: str
    lesion_mask: str
    cohort: str
    split: str


@dataclass
class Manifest:
    patients: list[ManifestEntry] = field(default_factory=list)
    root: Path = Path(".")

    def split(self, name: str) -> list[ManifestEntry]:
        return [e for e in self.patients if e.split == name]

    @property
    def train(self) -> list[ManifestEntry]:
        return self.split("train")

    @property
    def test(self) -> list[ManifestEntry]:
        return self.split("test")

    def load(self, entry: ManifestEntry) -> PatientRecord:
        return PatientRecord(entry.id, read_volume(self.root / entry.image),
                             read_volume(self.root / entry.brain_mask),
                             read_volume(self.root / entry.lesion_mask), entry.cohort)

    def to_json(self) -> dict:
        return {"patients": [asdict(e) for e in self.patients]}

    def write(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=2) + "\n")

    @classmethod
    def read(cls, path) -> "Manifest":
        path = Path(path)
        try:
            doc = json.loads(path.read_text())
            entries = [ManifestEntry(**e) for e in doc["patients"]]
        except (OSError, json.JSONDecodeError, KeyError, TypeError) as exc:
            raise ConfigError(f"cannot read manifest {path}: {exc}") from exc
        return cls(entries, path.parent)


def assign_splits(records, train_frac: float = 1.0, seed: int = 0) -> dict[str, str]:
    """patient id -> "train" / "test".

    Only healthy patients are trained on; a seeded ``round(train_frac * n)``
    of them go to train, the rest and every lesion patient go to test.
    """
    healthy = sorted(r.id for r in records if r.cohort == HEALTHY)
    lesion = sorted(r.id for r in records if r.cohort == LESION)
    if not healthy or not lesion:
        raise ConfigError(f"need at least one healthy and one lesion patient "
                          f"(got {len(healthy)} healthy, {len(lesion)} lesion)")
    if not 0.0 < train_frac <= 1.0:
        raise ConfigError(f"train_frac must be in (0, 1], got {train_frac}")
    order = np.random.default_rng(seed).permutation(len(healthy))
    n_train = max(1, int(round(train_frac * len(healthy))))
    split = {healthy[i]: ("train" if rank < n_train else "test") for rank, i in enumerate(order)}
    split.update({pid: "test" for pid in lesion})
    return split


def build_manifest(records, train_frac: float = 1.0, seed: int = 0, root=".",
                   paths: dict[str, dict[str, str]] | None = None) -> Manifest:
    split = assign_splits(records, train_frac, seed)
    entries = []
    for r in records:
        pth = (paths or {}).get(r.id) or {k: f"patients/{r.id}/{k}.vol"
                                          for k in ("image", "brain_mask", "lesion_mask")}
        entries.append(ManifestEntry(r.id, pth["image"], pth["brain_mask"], pth["lesion_mask"],
                                     r.cohort, split[r.id]))
    return Manifest(entries, Path(root))


def write_dataset(records, out_dir, train_frac: float = 1.0, seed: int = 0) -> Path:
    out_dir = Path(out_dir)
    manifest = build_manifest(records, train_frac, seed, root=out_dir)
    for r, e in zip(records, manifest.patients):
        (out_dir / e.image).parent.mkdir(parents=True, exist_ok=True)
        write_volume(r.image, out_dir / e.image)
        write_volume(r.brain_mask, out_dir / e.brain_mask)
        write_volume(r.lesion_mask, out_dir / e.lesion_mask)
    path = out_dir / "manifest.json"
    manifest.write(path)
    return path


def slices(records) -> np.ndarray:
    """Stack every axial slice of the records into [N, 1, H, W]."""
    return np.concatenate([r.image.data[:, None] for r in records], axis=0)
