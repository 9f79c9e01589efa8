"""
Procedural DTM/DSM/nDSM/footprint scenes.

A scene is built in three steps:

1. `generate_terrain()` draws a bare-earth DTM from band-limited power-law spectral noise.
2. `place_structures()` drops buildings (extruded rectangles, flat or gabled) preferentially on gentle slopes, and clusters of trees (Gaussian bumps) anywhere.
3. `compose_scene()` stacks both: DSM = DTM + structures, nDSM = DSM - DTM.

```python
config = SynthConfig(size_px=512, seed=11)
scene = synthesize_scene(config)
```
"""
import dataclasses
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Tuple

import numpy as np
from scipy import ndimage

from .Errors import ConfigurationError, ContractError, SynthesisError
from .Raster import TerrainField, read_array, read_key_values, write_array, write_key_values
from .Utils import config_hash, derive_rng

logger = logging.getLogger(__name__)

GROUND, BUILDING, VEGETATION = 0, 1, 2

# (terrain_amplitude_m, terrain_roughness) of the named terrain regimes.
TERRAIN_REGIMES = {
    'urban': (8.0, 2.6),
    'rolling': (30.0, 2.2),
    'mountainous': (120.0, 1.8),
}

# Tree heights under this value are treated as ground.
MIN_VEGETATION_HEIGHT_M = 0.1


@dataclass
class SynthConfig:
    """
    Parameters of the scene synthesizer.

    Densities are expressed per square kilometer: `building_density` counts buildings, `vegetation_density` counts tree clusters. Ranges are `(low, high)` tuples sampled uniformly.
    """
    size_px: int = 512
    resolution_m: float = 1.0
    terrain_regime: str = 'custom'
    terrain_amplitude_m: float = 30.0
    terrain_roughness: float = 2.0
    terrain_min_wavelength_m: float = 16.0
    terrain_base_m: float = 0.0
    building_density: float = 150.0
    building_height_m: Tuple[float, float] = (3.0, 15.0)
    building_size_m: Tuple[float, float] = (6.0, 40.0)
    gable_probability: float = 0.5
    gable_extra: Tuple[float, float] = (0.0, 0.3)
    rotation_probability: float = 0.5
    slope_scale_deg: float = 10.0
    building_gap_px: int = 2
    vegetation_density: float = 60.0
    vegetation_height_m: Tuple[float, float] = (2.0, 25.0)
    trees_per_cluster: Tuple[int, int] = (1, 8)
    cluster_spread_m: float = 8.0
    crown_radius_m: Tuple[float, float] = (1.5, 4.0)
    max_attempts: int = 500
    seed: int = 0

    def __post_init__(self):
        for name in ('building_height_m', 'building_size_m', 'gable_extra', 'vegetation_height_m', 'trees_per_cluster', 'crown_radius_m'):
            value = tuple(getattr(self, name))
            if len(value) != 2 or value[0] > value[1]:
                raise ConfigurationError(f"synth.{name} must be a (low, high) range, got {value}.")
            setattr(self, name, value)

        if self.size_px < 32:
            raise ConfigurationError(f"synth.size_px must be at least 32, got {self.size_px}.")
        if not self.resolution_m > 0:
            raise ConfigurationError(f"synth.resolution_m must be > 0, got {self.resolution_m}.")
        if self.terrain_regime != 'custom' and self.terrain_regime not in TERRAIN_REGIMES:
            raise ConfigurationError(f"synth.terrain_regime must be 'custom' or one of {sorted(TERRAIN_REGIMES)}.")
        if self.terrain_amplitude_m < 0:
            raise ConfigurationError("synth.terrain_amplitude_m must be >= 0.")
        for name in ('building_density', 'vegetation_density'):
            if getattr(self, name) < 0:
                raise ConfigurationError(f"synth.{name} must be >= 0, got {getattr(self, name)}.")
        if self.building_height_m[0] <= 0:
            raise ConfigurationError("synth.building_height_m must be strictly positive.")
        if self.building_size_m[0] <= 0:
            raise ConfigurationError("synth.building_size_m must be strictly positive.")
        for name in ('gable_probability', 'rotation_probability'):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ConfigurationError(f"synth.{name} must be a probability.")
        if self.slope_scale_deg <= 0:
            raise ConfigurationError("synth.slope_scale_deg must be > 0.")

    def terrain_parameters(self):
        "Amplitude and spectral exponent, after applying the terrain regime."
        if self.terrain_regime == 'custom':
            return self.terrain_amplitude_m, self.terrain_roughness
        return TERRAIN_REGIMES[self.terrain_regime]

    @property
    def area_km2(self):
        return (self.size_px * self.resolution_m) ** 2 / 1e6


@dataclass(eq=False)
class StructureLayer:
    """
    Above-ground structures of a scene.

    :param add_heights: height above the terrain in meters (0 on the ground).
    :param footprint: binary building mask.
    :param kind_map: per-pixel class, GROUND (0), BUILDING (1) or VEGETATION (2).
    """
    add_heights: np.ndarray
    footprint: np.ndarray
    kind_map: np.ndarray

    def __post_init__(self):
        self.add_heights = np.asarray(self.add_heights, dtype=np.float32)
        self.footprint = np.asarray(self.footprint, dtype=np.uint8)
        self.kind_map = np.asarray(self.kind_map, dtype=np.uint8)

        if not (self.add_heights.shape == self.footprint.shape == self.kind_map.shape):
            raise ContractError("add_heights, footprint and kind_map must share their shape.")
        if (self.add_heights < 0).any():
            raise ContractError("structure heights must be non-negative.")
        if (self.add_heights[self.kind_map == GROUND] != 0).any():
            raise ContractError("structure heights must be zero on ground pixels.")
        if not np.array_equal(self.footprint == 1, self.kind_map == BUILDING):
            raise ContractError("footprint must mark exactly the building pixels.")
        if (self.add_heights[self.footprint == 1] <= 0).any():
            raise ContractError("every building pixel must rise above the terrain.")


@dataclass(eq=False)
class SceneBundle:
    """
    Aligned DTM, DSM, nDSM and footprint of one scene.

    The nDSM is exactly `dsm - dtm` in float32, which is non-negative since the DSM is never below the DTM.
    """
    dtm: TerrainField
    dsm: TerrainField
    ndsm: TerrainField
    footprint: np.ndarray
    scene_id: str
    kind_map: Optional[np.ndarray] = None

    def __post_init__(self):
        self.footprint = np.asarray(self.footprint, dtype=np.uint8)
        shapes = {self.dtm.shape, self.dsm.shape, self.ndsm.shape, self.footprint.shape}
        if len(shapes) != 1:
            raise ContractError(f"scene {self.scene_id}: grids do not share their shape {shapes}.")
        if len({self.dtm.resolution_m, self.dsm.resolution_m, self.ndsm.resolution_m}) != 1:
            raise ContractError(f"scene {self.scene_id}: grids do not share their resolution.")
        if (self.dsm.heights < self.dtm.heights).any():
            raise ContractError(f"scene {self.scene_id}: DSM below DTM.")
        if not np.array_equal(self.ndsm.heights, self.dsm.heights - self.dtm.heights):
            raise ContractError(f"scene {self.scene_id}: nDSM differs from DSM - DTM.")

    @property
    def shape(self):
        return self.dtm.shape

    @property
    def resolution_m(self):
        return self.dtm.resolution_m


#############################################################################################
## Terrain
#############################################################################################

def generate_terrain(config):
    """
    Draws a bare-earth terrain from power-law spectral noise.

    White noise is filtered in the Fourier domain by `f^(-roughness/2)` for `0 < f <= resolution / min_wavelength`, so the power spectrum falls off as `f^-roughness` and no feature is shorter than `terrain_min_wavelength_m`. The field is then rescaled so that its range is exactly the terrain amplitude, on top of `terrain_base_m`.

    :param config: SynthConfig.
    """
    amplitude, roughness = config.terrain_parameters()
    n = config.size_px

    if amplitude == 0:
        heights = np.full((n, n), config.terrain_base_m, dtype=np.float64)
        return TerrainField(heights, resolution_m=config.resolution_m, kind='dtm', seed=config.seed)

    rng = derive_rng(config.seed, 'terrain')
    noise = rng.standard_normal((n, n))

    fy = np.fft.fftfreq(n)[:, None]
    fx = np.fft.fftfreq(n)[None, :]
    f = np.sqrt(fx ** 2 + fy ** 2)
    cutoff = min(0.5, config.resolution_m / config.terrain_min_wavelength_m)

    spectral_filter = np.zeros_like(f)
    band = (f > 0) & (f <= cutoff)
    spectral_filter[band] = f[band] ** (-roughness / 2.0)

    field = np.real(np.fft.ifft2(np.fft.fft2(noise) * spectral_filter))
    span = field.max() - field.min()
    if span > 0:
        field = (field - field.min()) / span
    else:
        field = np.zeros_like(field)

    heights = config.terrain_base_m + amplitude * field

    return TerrainField(heights, resolution_m=config.resolution_m, kind='dtm', seed=config.seed)


def slope_degrees(heights, resolution_m):
    "Local slope in degrees from central differences."
    dy, dx = np.gradient(np.asarray(heights, dtype=np.float64), resolution_m)
    return np.degrees(np.arctan(np.hypot(dx, dy)))


#############################################################################################
## Structures
#############################################################################################

def _rectangle_pixels(shape, center, length, width, angle):
    "Pixels whose center lies in a rotated rectangle, plus the across-ridge coordinate of each."
    cy, cx = center
    radius = 0.5 * np.hypot(length, width)
    r0, r1 = max(int(np.floor(cy - radius)), 0), min(int(np.ceil(cy + radius)) + 1, shape[0])
    c0, c1 = max(int(np.floor(cx - radius)), 0), min(int(np.ceil(cx + radius)) + 1, shape[1])

    rows, cols = np.mgrid[r0:r1, c0:c1]
    dy = rows + 0.5 - cy
    dx = cols + 0.5 - cx
    u = dx * np.cos(angle) + dy * np.sin(angle)
    v = -dx * np.sin(angle) + dy * np.cos(angle)
    inside = (np.abs(u) <= length / 2.0) & (np.abs(v) <= width / 2.0)

    return rows[inside], cols[inside], v[inside]


def _place_buildings(terrain, config, slope):
    shape = terrain.shape
    rng = derive_rng(config.seed, 'buildings')
    count = int(round(config.building_density * config.area_km2))

    footprint = np.zeros(shape, dtype=bool)
    occupied = np.zeros(shape, dtype=bool)
    heights = np.zeros(shape, dtype=np.float64)

    for index in range(count):
        for _ in range(config.max_attempts):
            length, width = sorted(rng.uniform(*config.building_size_m, size=2) / config.resolution_m, reverse=True)
            angle = rng.uniform(0.0, np.pi) if rng.random() < config.rotation_probability else 0.0
            radius = 0.5 * np.hypot(length, width)
            if 2 * radius >= min(shape):
                continue
            cy = rng.uniform(radius, shape[0] - radius)
            cx = rng.uniform(radius, shape[1] - radius)

            # Steep cells reject more candidates.
            acceptance = np.exp(-slope[int(cy), int(cx)] / config.slope_scale_deg)
            if rng.random() >= acceptance:
                continue

            rows, cols, v = _rectangle_pixels(shape, (cy, cx), length, width, angle)
            if rows.size == 0 or occupied[rows, cols].any():
                continue

            height = rng.uniform(*config.building_height_m)
            if rng.random() < config.gable_probability:
                ridge = rng.uniform(*config.gable_extra) * height
                roof = height + ridge * (1.0 - np.abs(v) / (width / 2.0))
            else:
                roof = np.full(rows.shape, height)

            footprint[rows, cols] = True
            heights[rows, cols] = roof
            mask = np.zeros(shape, dtype=bool)
            mask[rows, cols] = True
            occupied |= ndimage.binary_dilation(mask, iterations=config.building_gap_px) if config.building_gap_px > 0 else mask
            break
        else:
            raise SynthesisError(
                f"could not place building {index + 1} of {count} after {config.max_attempts} attempts: "
                f"building_density={config.building_density} is too high for this terrain."
            )

    return footprint, heights


def _place_vegetation(terrain, config):
    shape = terrain.shape
    rng = derive_rng(config.seed, 'vegetation')
    clusters = int(round(config.vegetation_density * config.area_km2))
    vegetation = np.zeros(shape, dtype=np.float64)

    for _ in range(clusters):
        center = rng.uniform(0, shape[0]), rng.uniform(0, shape[1])
        for _ in range(int(rng.integers(config.trees_per_cluster[0], config.trees_per_cluster[1] + 1))):
            ty = center[0] + rng.normal(0.0, config.cluster_spread_m / config.resolution_m)
            tx = center[1] + rng.normal(0.0, config.cluster_spread_m / config.resolution_m)
            height = rng.uniform(*config.vegetation_height_m)
            sigma = rng.uniform(*config.crown_radius_m) / config.resolution_m

            reach = int(np.ceil(3 * sigma))
            r0, r1 = max(int(ty) - reach, 0), min(int(ty) + reach + 1, shape[0])
            c0, c1 = max(int(tx) - reach, 0), min(int(tx) + reach + 1, shape[1])
            if r0 >= r1 or c0 >= c1:
                continue
            rows, cols = np.mgrid[r0:r1, c0:c1]
            bump = height * np.exp(-((rows + 0.5 - ty) ** 2 + (cols + 0.5 - tx) ** 2) / (2 * sigma ** 2))
            vegetation[r0:r1, c0:c1] = np.maximum(vegetation[r0:r1, c0:c1], bump)

    vegetation[vegetation < MIN_VEGETATION_HEIGHT_M] = 0.0
    return vegetation


def place_structures(terrain, config):
    """
    Places buildings and vegetation on a terrain.

    Building candidates are drawn uniformly and accepted with probability `exp(-slope / slope_scale_deg)`, so the placement probability decreases monotonically with the local slope. Buildings keep a gap of `building_gap_px` pixels between each other. Vegetation never covers buildings.

    :param terrain: TerrainField.
    :param config: SynthConfig.
    """
    if not np.isfinite(terrain.heights).all():
        raise ContractError("terrain heights must be finite.")

    slope = slope_degrees(terrain.heights, terrain.resolution_m)
    footprint, building_heights = _place_buildings(terrain, config, slope)
    vegetation = _place_vegetation(terrain, config)

    add_heights = np.where(footprint, building_heights, vegetation).astype(np.float32)
    kind_map = np.full(terrain.shape, GROUND, dtype=np.uint8)
    kind_map[(add_heights > 0) & ~footprint] = VEGETATION
    kind_map[footprint] = BUILDING

    return StructureLayer(add_heights=add_heights, footprint=footprint, kind_map=kind_map)


#############################################################################################
## Scenes
#############################################################################################

def compose_scene(terrain, layer, scene_id=None):
    """
    Stacks a structure layer on a terrain.

    The DSM is the float32 sum of the DTM and the structure heights; the nDSM is recomputed as DSM - DTM, so the identity holds bit-exactly in storage precision.

    :param terrain: TerrainField (the DTM).
    :param layer: StructureLayer.
    :param scene_id: identifier of the scene (default: derived from the terrain seed).
    """
    if terrain.shape != layer.add_heights.shape:
        raise ContractError(f"terrain {terrain.shape} and structures {layer.add_heights.shape} do not have the same shape.")

    dtm = terrain.heights.astype(np.float32)
    dsm = np.add(dtm, layer.add_heights, dtype=np.float32)
    ndsm = np.subtract(dsm, dtm, dtype=np.float32)

    def as_field(heights, kind):
        return TerrainField(heights, resolution_m=terrain.resolution_m, kind=kind, seed=terrain.seed)

    return SceneBundle(
        dtm=as_field(dtm, 'dtm'),
        dsm=as_field(dsm, 'dsm'),
        ndsm=as_field(ndsm, 'ndsm'),
        footprint=layer.footprint,
        scene_id=scene_id if scene_id is not None else f"scene-{terrain.seed}",
        kind_map=layer.kind_map,
    )


def synthesize_scene(config, scene_id=None):
    "Terrain, structures and composition in one call."
    terrain = generate_terrain(config)
    layer = place_structures(terrain, config)
    return compose_scene(terrain, layer, scene_id=scene_id)


def generate_scenes(config, count):
    """
    Generates `count` scenes whose seeds are derived from `config.seed`.

    Scene `i` only depends on `(config, i)`, so scenes can be generated in any order or in parallel.

    :param config: SynthConfig.
    :param count: number of scenes.
    """
    scenes = []
    for index in range(count):
        seed = int(derive_rng(config.seed, 'scene', index).integers(2 ** 31 - 1))
        scene_config = dataclasses.replace(config, seed=seed)
        scenes.append(synthesize_scene(scene_config, scene_id=f"s{config.seed}-{index:04d}"))
        logger.debug("Generated scene %d/%d (seed %d).", index + 1, count, seed)
    return scenes


#############################################################################################
## IO
#############################################################################################

def save_scene(scene, directory, config=None):
    """
    Writes a scene as a directory: `scene.txt` (key=value manifest), `dtm.f32`, `dsm.f32`, `ndsm.f32`, `footprint.u8` and `kind_map.u8`.

    :param scene: SceneBundle.
    :param directory: destination directory, created if needed.
    :param config: SynthConfig used for generation, whose hash is recorded.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)

    write_array(directory / 'dtm.f32', scene.dtm.heights)
    write_array(directory / 'dsm.f32', scene.dsm.heights)
    write_array(directory / 'ndsm.f32', scene.ndsm.heights)
    write_array(directory / 'footprint.u8', scene.footprint)
    if scene.kind_map is not None:
        write_array(directory / 'kind_map.u8', scene.kind_map)

    write_key_values(directory / 'scene.txt', {
        'scene_id': scene.scene_id,
        'rows': scene.shape[0],
        'cols': scene.shape[1],
        'resolution_m': repr(float(scene.resolution_m)),
        'seed': scene.dtm.seed,
        'config_hash': config_hash(config) if config is not None else '',
    })


def load_scene(directory):
    "Reads a scene written by `save_scene()`."
    directory = Path(directory)
    meta = read_key_values(directory / 'scene.txt')
    shape = (int(meta['rows']), int(meta['cols']))
    resolution = float(meta['resolution_m'])
    seed = int(meta['seed'])

    def as_field(name, kind):
        return TerrainField(read_array(directory / name, shape), resolution_m=resolution, kind=kind, seed=seed)

    kind_map = None
    if (directory / 'kind_map.u8').exists():
        kind_map = read_array(directory / 'kind_map.u8', shape)

    return SceneBundle(
        dtm=as_field('dtm.f32', 'dtm'),
        dsm=as_field('dsm.f32', 'dsm'),
        ndsm=as_field('ndsm.f32', 'ndsm'),
        footprint=read_array(directory / 'footprint.u8', shape),
        scene_id=meta['scene_id'],
        kind_map=kind_map,
    )
