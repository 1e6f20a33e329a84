# Synthetic wrapped-phase interferograms.
#
# Satu interferogram = wrap(deformasi + APS turbulen + APS topografi + ramp),
# lalu daerah incoherent diganti noise uniform. Semua fungsi deterministik
# per seed; dataset = fungsi murni dari (jumlah, profil, seed).

import dataclasses
import logging
import math
import zlib
from dataclasses import dataclass, field
from functools import partial
from typing import Optional

import numpy as np

from errors import ConfigurationError, ContractError, DimensionError
from pool import ordered_map

LOG = logging.getLogger(__name__)

POISSON_RATIO = 0.25
SOURCE_KINDS = ("mogi", "dyke", "sill")
FULL_SCALE_COUNTS = {
    "train": (17976, 7024),
    "val": (3361, 5000),
    "target": (404, 365),
}
DESK_SCALE_COUNTS = {
    "train": (1440, 560),
    "val": (322, 478),
    "target": (420, 380),
}

# Parameter ranges for the randomly drawn sources (meters / degrees).
SOURCE_RANGES = {
    "mogi": {"depth": (1000.0, 5000.0)},
    "sill": {"strike": (0.0, 360.0), "dip": (0.0, 10.0), "length": (1500.0, 5000.0),
             "width": (1500.0, 5000.0), "depth": (500.0, 3000.0)},
    "dyke": {"strike": (0.0, 360.0), "dip": (70.0, 90.0), "length": (1000.0, 5000.0),
             "width": (500.0, 3000.0), "depth": (100.0, 1500.0)},
}

_TWO_PI = 2.0 * math.pi
# largest float32 strictly below pi, smallest float32 not below -pi
_F32_HI = np.nextafter(np.float32(np.pi), np.float32(0.0))
_F32_LO = np.nextafter(np.float32(-np.pi), np.float32(0.0))


@dataclass
class SceneParams:
    grid_size: int = 64
    pixel_spacing: float = 100.0
    radar_wavelength: float = 0.0556
    incidence_angle: float = 39.0
    heading: float = -10.0
    rng_seed: int = 0
    relief: tuple = (0.0, 2000.0)
    dem_beta: float = 2.0

    def validate(self):
        if self.grid_size < 16:
            raise ConfigurationError(f"grid_size must be >= 16, got {self.grid_size}")
        if not self.pixel_spacing > 0:
            raise ConfigurationError("pixel_spacing must be > 0")
        if not 0.0 < self.incidence_angle < 90.0:
            raise ConfigurationError("incidence_angle must be in (0, 90) degrees")
        if not self.radar_wavelength > 0:
            raise ConfigurationError("radar_wavelength must be > 0")
        if self.relief[1] < self.relief[0]:
            raise ConfigurationError(f"relief range {self.relief} is inverted")
        return self

    @property
    def phase_per_meter(self):
        return 4.0 * math.pi / self.radar_wavelength

    def coordinates(self):
        """(east, north) in meters of every pixel center; row 0 is the northern edge."""
        n = self.grid_size
        c = (n - 1) / 2.0
        idx = np.arange(n, dtype=np.float64)
        east = (idx - c) * self.pixel_spacing
        north = (c - idx) * self.pixel_spacing
        return np.meshgrid(east, north)

    def los_vector(self):
        """Ground-to-satellite unit vector (east, north, up) of a right-looking radar."""
        inc = math.radians(self.incidence_angle)
        head = math.radians(self.heading)
        return (-math.sin(inc) * math.cos(head), math.sin(inc) * math.sin(head), math.cos(inc))


@dataclass
class DeformationSource:
    kind: str = "none"
    center: tuple = (0.0, 0.0)
    depth: float = 2000.0
    volume_change: float = 0.0
    strike: float = 0.0
    dip: float = 0.0
    length: float = 0.0
    width: float = 0.0
    peak_amplitude: float = 0.0

    def validate(self):
        if self.kind not in SOURCE_KINDS + ("none",):
            raise ConfigurationError(f"unknown source kind '{self.kind}'")
        if self.kind != "none" and not self.depth > 0:
            raise ConfigurationError("source depth must be > 0")
        return self


@dataclass
class AtmosphereParams:
    turbulent_max_strength: float = 0.02
    correlation_length: float = 5000.0
    topo_coupling: float = 0.0
    ramp_coeffs: tuple = (0.0, 0.0)

    def validate(self):
        if self.turbulent_max_strength < 0:
            raise ConfigurationError("turbulent_max_strength must be >= 0")
        if not self.correlation_length > 0:
            raise ConfigurationError("correlation_length must be > 0")
        return self


@dataclass
class Interferogram:
    phase: np.ndarray
    label: int
    coherence_mask: np.ndarray
    provenance: dict = field(default_factory=dict)


@dataclass(frozen=True)
class DomainProfile:
    name: str
    deformation_range: tuple = (0.10, 0.25)
    turbulent_mean: float = 0.02
    turbulent_spread: tuple = (0.5, 2.0)
    correlation_length: float = 5000.0
    topo_coupling_max: float = 2.0
    ramp_max: float = 0.05
    incoherence_coverage: tuple = (0.0, 0.0)
    kinds: tuple = SOURCE_KINDS


PROFILES = {
    "source": DomainProfile("source"),
    "target": DomainProfile("target", deformation_range=(0.05, 0.15), turbulent_mean=0.04,
                            incoherence_coverage=(0.05, 0.15)),
}


def resolve_profile(profile):
    if isinstance(profile, DomainProfile):
        return profile
    try:
        return PROFILES[profile]
    except KeyError:
        raise ConfigurationError(f"unknown domain profile '{profile}' (known: {sorted(PROFILES)})") from None


@dataclass
class SyntheticDataset:
    """Interferogram phases with optional labels, per-sample seeds and manifest records."""
    phases: np.ndarray
    labels: Optional[np.ndarray]
    seeds: np.ndarray
    records: list = field(default_factory=list)
    profile: str = "source"

    def __post_init__(self):
        if self.labels is not None and len(self.labels) != len(self.phases):
            raise DimensionError(f"{len(self.labels)} labels for {len(self.phases)} samples")
        if len(self.seeds) != len(self.phases):
            raise DimensionError(f"{len(self.seeds)} seeds for {len(self.phases)} samples")

    def __len__(self):
        return len(self.phases)

    @property
    def grid_size(self):
        return int(self.phases.shape[-1])

    @property
    def has_labels(self):
        return self.labels is not None

    def counts(self):
        if self.labels is None:
            return None
        n_pos = int(np.sum(self.labels == 1))
        return n_pos, len(self) - n_pos

    def subset(self, indices):
        indices = np.asarray(indices, dtype=np.int64)
        records = [self.records[i] for i in indices] if self.records else []
        labels = None if self.labels is None else self.labels[indices]
        return SyntheticDataset(self.phases[indices], labels, self.seeds[indices], records, self.profile)

    def without_labels(self):
        return SyntheticDataset(self.phases, None, self.seeds, self.records, self.profile)

    def with_labels(self, labels):
        return SyntheticDataset(self.phases, np.asarray(labels, dtype=np.int64), self.seeds,
                                self.records, self.profile)


# ================================================================= #
# ============================ PHASE ============================== #
# ================================================================= #

def wrap_phase(x):
    """Wrap to [-pi, pi)."""
    x = np.asarray(x, dtype=np.float64)
    out = np.mod(x + math.pi, _TWO_PI) - math.pi
    return np.where(out >= math.pi, out - _TWO_PI, out)


def to_float32_phase(phase):
    """Cast wrapped phase to float32 without leaving [-pi, pi)."""
    return np.clip(np.asarray(phase, dtype=np.float32), _F32_LO, _F32_HI)


# ================================================================= #
# ========================== TOPOGRAPHY =========================== #
# ================================================================= #

def _rng_for(params, rng):
    return rng if rng is not None else np.random.default_rng(int(params.rng_seed))


def synthesize_dem(params, rng=None):
    """Fractal surface by spectral synthesis (power ~ k^-beta), rescaled to params.relief."""
    params.validate()
    n = params.grid_size
    lo, hi = params.relief
    if hi == lo:
        return np.full((n, n), float(lo))
    rng = _rng_for(params, rng)
    f = np.fft.fftfreq(n)
    k = np.hypot(*np.meshgrid(f, f))
    amp = np.zeros_like(k)
    amp[k > 0] = k[k > 0] ** (-params.dem_beta / 2.0)
    surface = np.fft.ifft2(np.fft.fft2(rng.standard_normal((n, n))) * amp).real
    span = surface.max() - surface.min()
    if span == 0:
        return np.full((n, n), float(lo))
    return lo + (surface - surface.min()) / span * (hi - lo)


# ================================================================= #
# ========================== DEFORMATION ========================== #
# ================================================================= #

def project_los(east, north, up, params):
    le, ln, lu = params.los_vector()
    return le * east + ln * north + lu * up


def mogi_point(source, x, y, poisson=POISSON_RATIO):
    """Mogi point source surface displacement (east, north, up) at points (x, y)."""
    dx = np.asarray(x, dtype=np.float64) - source.center[0]
    dy = np.asarray(y, dtype=np.float64) - source.center[1]
    d = float(source.depth)
    r3 = (dx * dx + dy * dy + d * d) ** 1.5
    c = source.volume_change * (1.0 - poisson) / math.pi
    return c * dx / r3, c * dy / r3, c * d / r3


def mogi_displacement(source, params):
    if source.kind != "mogi":
        raise ContractError(f"mogi source expected, got '{source.kind}'")
    source.validate()
    x, y = params.coordinates()
    return mogi_point(source, x, y)


def mogi_los(source, params):
    return project_los(*mogi_displacement(source, params), params)


def dislocation_displacement(source, params):
    # Gaussian lobes along/across strike, not elastic dislocation.
    # Sill: one uplift lobe, dip only narrows it. Dyke: lobes on both sides of the trace.
    if source.kind not in ("dyke", "sill"):
        raise ContractError(f"dyke or sill source expected, got '{source.kind}'")
    source.validate()
    x, y = params.coordinates()
    dx = x - source.center[0]
    dy = y - source.center[1]
    s = math.radians(source.strike)
    along = dx * math.sin(s) + dy * math.cos(s)
    across = dx * math.cos(s) - dy * math.sin(s)
    sig_a = math.hypot(source.length / 2.0, source.depth)
    sig_b = math.hypot(source.width / 2.0, source.depth)

    if source.kind == "sill":
        sig_d = math.hypot(0.5 * source.width * math.cos(math.radians(source.dip)), source.depth)
        up = np.exp(-0.5 * (along / sig_a) ** 2 - 0.5 * (across / sig_d) ** 2)
        zero = np.zeros_like(up)
        return zero, zero.copy(), up

    skew = math.cos(math.radians(source.dip))
    side = np.where(across >= 0, 1.0 + skew, 1.0 - skew)
    t = across / sig_b
    envelope = side * np.exp(-0.5 * (along / sig_a) ** 2 - 0.5 * t * t)
    horizontal = t * envelope
    up = t * t * envelope
    return horizontal * math.cos(s), -horizontal * math.sin(s), up


def dislocation_los(source, params):
    los = project_los(*dislocation_displacement(source, params), params)
    peak = np.abs(los).max()
    if source.peak_amplitude == 0 or peak == 0:
        return np.zeros_like(los)
    return los * (source.peak_amplitude / peak)


def deformation_los(source, params):
    if source.kind == "none":
        return np.zeros((params.grid_size, params.grid_size))
    if source.kind == "mogi":
        return mogi_los(source, params)
    return dislocation_los(source, params)


def sample_source(kind, profile, params, rng):
    if kind not in SOURCE_KINDS:
        raise ConfigurationError(f"unknown source kind '{kind}'")
    ranges = SOURCE_RANGES[kind]
    extent = params.grid_size * params.pixel_spacing
    center = tuple(float(v) for v in rng.uniform(-extent / 4.0, extent / 4.0, size=2))
    target = float(rng.uniform(*profile.deformation_range))
    draw = {name: float(rng.uniform(lo, hi)) for name, (lo, hi) in ranges.items()}

    if kind == "mogi":
        unit = DeformationSource("mogi", center=center, depth=draw["depth"], volume_change=1.0)
        peak_unit = float(np.abs(mogi_los(unit, params)).max())
        return dataclasses.replace(unit, volume_change=target / peak_unit, peak_amplitude=target)
    return DeformationSource(kind, center=center, peak_amplitude=target, **draw)


# ================================================================= #
# ========================== ATMOSPHERE =========================== #
# ================================================================= #

def _padded_size(n, correlation_length, spacing):
    # periodic FFT field: pad so the torus is several correlation lengths wide
    need = max(2 * n, n + int(math.ceil(3.0 * correlation_length / spacing)))
    return 1 << (need - 1).bit_length()


def turbulent_aps(atmosphere, scene, rng=None):
    """Correlated Gaussian delay (exponential covariance) converted to phase."""
    atmosphere.validate()
    scene.validate()
    n = scene.grid_size
    if atmosphere.turbulent_max_strength == 0:
        return np.zeros((n, n))
    rng = _rng_for(scene, rng)
    size = _padded_size(n, atmosphere.correlation_length, scene.pixel_spacing)
    f = np.fft.fftfreq(size, d=scene.pixel_spacing)
    k = np.hypot(*np.meshgrid(f, f))
    psd = (1.0 + (_TWO_PI * k * atmosphere.correlation_length) ** 2) ** -1.5
    white = rng.standard_normal((size, size))
    field_ = np.fft.ifft2(np.fft.fft2(white) * np.sqrt(psd)).real[:n, :n]
    peak = np.abs(field_).max()
    delay = field_ * (atmosphere.turbulent_max_strength / peak)
    return delay * scene.phase_per_meter


def topo_aps(dem, coupling):
    # coupling in rad/km
    dem = np.asarray(dem, dtype=np.float64)
    return coupling * (dem / 1000.0)


def phase_ramp(coeffs, grid_size):
    a, b = coeffs
    rows, cols = np.mgrid[0:grid_size, 0:grid_size]
    return a * cols + b * rows


def incoherence_mask(coverage, params, rng, correlation_pixels=4.0):
    n = params.grid_size
    if coverage <= 0:
        return np.zeros((n, n), dtype=bool)
    if coverage >= 1:
        return np.ones((n, n), dtype=bool)
    f = np.fft.fftfreq(n)
    k = np.hypot(*np.meshgrid(f, f))
    smooth = np.fft.ifft2(np.fft.fft2(rng.standard_normal((n, n)))
                          * np.exp(-0.5 * (k * _TWO_PI * correlation_pixels) ** 2)).real
    return smooth > np.quantile(smooth, 1.0 - coverage)


# ================================================================= #
# ========================== COMPOSITION ========================== #
# ================================================================= #

def compose(deformation, turbulent, topo, ramp, mask, scene=None, rng=None,
            source=None, atmosphere=None):
    """wrap(-(4pi/lambda)*LOS + turbulent + topo + ramp), incoherent pixels replaced by noise."""
    grids = [np.asarray(g, dtype=np.float64) for g in (deformation, turbulent, topo, ramp)]
    mask = np.asarray(mask, dtype=bool)
    shapes = {g.shape for g in grids} | {mask.shape}
    if len(shapes) != 1:
        raise DimensionError(f"component grids disagree in shape: {sorted(shapes)}")
    scene = scene or SceneParams(grid_size=grids[0].shape[0])

    phase = wrap_phase(-scene.phase_per_meter * grids[0] + grids[1] + grids[2] + grids[3])
    if mask.any():
        rng = _rng_for(scene, rng)
        phase[mask] = rng.uniform(-math.pi, math.pi, size=int(mask.sum()))

    if source is not None:
        label = 0 if source.kind == "none" else 1
    else:
        label = int(np.any(grids[0] != 0))
    provenance = {"scene": dataclasses.asdict(scene)}
    if source is not None:
        provenance["source"] = dataclasses.asdict(source)
    if atmosphere is not None:
        provenance["atmosphere"] = dataclasses.asdict(atmosphere)
    return Interferogram(to_float32_phase(phase), label, mask, provenance)


def synthesize_interferogram(seed, label, profile="source", scene=None):
    """One labeled interferogram, fully determined by (seed, label, profile, scene)."""
    profile = resolve_profile(profile)
    scene = dataclasses.replace(scene or SceneParams(), rng_seed=int(seed)).validate()
    rng = np.random.default_rng(int(seed))

    dem = synthesize_dem(scene, rng)
    if label == 1:
        kind = profile.kinds[int(rng.integers(len(profile.kinds)))]
        source = sample_source(kind, profile, scene, rng)
    else:
        source = DeformationSource("none")
    deformation = deformation_los(source, scene)

    atmosphere = AtmosphereParams(
        turbulent_max_strength=profile.turbulent_mean * float(rng.uniform(*profile.turbulent_spread)),
        correlation_length=profile.correlation_length,
        topo_coupling=float(rng.uniform(-profile.topo_coupling_max, profile.topo_coupling_max)),
        ramp_coeffs=tuple(float(v) for v in rng.uniform(-profile.ramp_max, profile.ramp_max, size=2)),
    )
    turbulent = turbulent_aps(atmosphere, scene, rng)
    topo = topo_aps(dem, atmosphere.topo_coupling)
    ramp = phase_ramp(atmosphere.ramp_coeffs, scene.grid_size)
    mask = incoherence_mask(float(rng.uniform(*profile.incoherence_coverage)), scene, rng)
    return compose(deformation, turbulent, topo, ramp, mask, scene, rng, source, atmosphere)


def _manifest_record(index, seed, ifg, profile_name):
    source = ifg.provenance.get("source", {})
    atmosphere = ifg.provenance.get("atmosphere", {})
    center = source.get("center", (0.0, 0.0))
    return {
        "sample": index,
        "seed": int(seed),
        "label": ifg.label,
        "profile": profile_name,
        "kind": source.get("kind", "none"),
        "center_x": float(center[0]),
        "center_y": float(center[1]),
        "depth": float(source.get("depth", 0.0)),
        "volume_change": float(source.get("volume_change", 0.0)),
        "strike": float(source.get("strike", 0.0)),
        "dip": float(source.get("dip", 0.0)),
        "length": float(source.get("length", 0.0)),
        "width": float(source.get("width", 0.0)),
        "peak_los": float(source.get("peak_amplitude", 0.0)),
        "turbulent_strength": float(atmosphere.get("turbulent_max_strength", 0.0)),
        "topo_coupling": float(atmosphere.get("topo_coupling", 0.0)),
        "ramp_a": float(atmosphere.get("ramp_coeffs", (0.0, 0.0))[0]),
        "ramp_b": float(atmosphere.get("ramp_coeffs", (0.0, 0.0))[1]),
        "incoherent_fraction": float(ifg.coherence_mask.mean()),
    }


def _synthesize_job(job, profile, scene):
    seed, label = job
    return synthesize_interferogram(seed, label, profile, scene)


def generate_dataset(n_pos, n_neg, profile="source", seed=0, scene=None, workers=1):
    """n_pos deformation + n_neg clean interferograms in a seed-determined order."""
    if n_pos < 0 or n_neg < 0:
        raise ConfigurationError(f"sample counts must be >= 0, got ({n_pos}, {n_neg})")
    profile = resolve_profile(profile)
    scene = (scene or SceneParams()).validate()
    n = n_pos + n_neg

    root = np.random.SeedSequence([int(seed), zlib.crc32(profile.name.encode("utf-8"))])
    order_seq, sample_seq = root.spawn(2)
    labels = np.array([1] * n_pos + [0] * n_neg, dtype=np.int64)
    labels = labels[np.random.default_rng(order_seq).permutation(n)]
    seeds = sample_seq.generate_state(n, dtype=np.uint64) if n else np.zeros(0, dtype=np.uint64)

    LOG.info(">>> [GEN] %s profile: %d positive / %d negative (seed=%s, grid=%d, workers=%d)",
             profile.name, n_pos, n_neg, seed, scene.grid_size, workers)
    jobs = list(zip(seeds.tolist(), labels.tolist()))
    ifgs = ordered_map(partial(_synthesize_job, profile=profile, scene=scene), jobs, workers)

    g = scene.grid_size
    phases = np.stack([ifg.phase for ifg in ifgs]) if n else np.zeros((0, g, g), dtype=np.float32)
    records = [_manifest_record(i, s, ifg, profile.name) for i, (s, ifg) in enumerate(zip(seeds, ifgs))]
    return SyntheticDataset(phases, labels, seeds, records, profile.name)
