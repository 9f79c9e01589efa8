"""
From scenes to training corpora: tiling, normalization, scene-level splits, label budgets and label noise.

Two tasks share the same machinery:

* `pretext`: input = DSM tile, target = DTM tile (both normalized in the same frame).
* `segmentation`: input = nDSM tile, target = footprint tile.
"""
import dataclasses
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, FrozenSet, List, Optional, Tuple

import numpy as np
import pandas as pd
from scipy import ndimage
from sklearn.model_selection import train_test_split

from .Errors import ConfigurationError, ContractError, DataError, MissingArtifactError
from .SceneSynth import SceneBundle, load_scene
from .Raster import TerrainField
from .Utils import derive_rng

logger = logging.getLogger(__name__)

TASKS = ('pretext', 'segmentation')
SPLITS = ('train', 'val', 'test')
NORMALIZATIONS = ('minshift', 'global')


@dataclass
class DatasetConfig:
    """
    Tiling and corpus parameters.

    :param scene_count: number of synthetic scenes to generate.
    :param tile_px: tile size in pixels (default: 128).
    :param stride_px: distance between two tiles (default: 128, no overlap).
    :param normalization: 'minshift' (per-tile shift to the minimum, range clamped to `min_scale_m`) or 'global' (`global_offset_m`, `global_scale_m` for every tile).
    :param split_fractions: (train, val, test) fractions of scenes.
    """
    scene_count: int = 50
    tile_px: int = 128
    stride_px: int = 128
    normalization: str = 'minshift'
    min_scale_m: float = 1.0
    global_offset_m: float = 0.0
    global_scale_m: float = 30.0
    split_fractions: Tuple[float, float, float] = (0.8, 0.1, 0.1)

    def __post_init__(self):
        self.split_fractions = tuple(self.split_fractions)
        if self.scene_count < 1:
            raise ConfigurationError("dataset.scene_count must be >= 1.")
        if self.tile_px < 1 or self.stride_px < 1:
            raise ConfigurationError("dataset.tile_px and dataset.stride_px must be >= 1.")
        if self.normalization not in NORMALIZATIONS:
            raise ConfigurationError(f"dataset.normalization must be one of {NORMALIZATIONS}.")
        if not self.min_scale_m > 0 or not self.global_scale_m > 0:
            raise ConfigurationError("dataset normalization scales must be > 0.")
        if len(self.split_fractions) != 3:
            raise ConfigurationError("dataset.split_fractions must hold (train, val, test).")


@dataclass
class NoiseSpec:
    """
    Label corruption applied to segmentation targets.

    :param p_remove_building: probability to delete each building component.
    :param p_add_phantom_building: probability, per building component, to add a phantom rectangle somewhere in the tile.
    :param max_shift_px: the whole mask is translated by up to this many pixels along each axis.
    :param p_boundary_erode_dilate: probability to erode or dilate (50/50) the mask by one pixel.
    """
    p_remove_building: float = 0.0
    p_add_phantom_building: float = 0.0
    max_shift_px: int = 0
    p_boundary_erode_dilate: float = 0.0
    phantom_size_px: Tuple[int, int] = (4, 16)
    seed: int = 0

    def __post_init__(self):
        self.phantom_size_px = tuple(self.phantom_size_px)
        for name in ('p_remove_building', 'p_add_phantom_building', 'p_boundary_erode_dilate'):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ConfigurationError(f"noise.{name} must be in [0, 1], got {getattr(self, name)}.")
        if self.max_shift_px < 0:
            raise ConfigurationError("noise.max_shift_px must be >= 0.")

    @property
    def is_noop(self):
        return self.p_remove_building == 0 and self.p_add_phantom_building == 0 and self.max_shift_px == 0 and self.p_boundary_erode_dilate == 0


@dataclass(eq=False)
class TileRecord:
    """
    One training example.

    :param input: DSM (pretext) or nDSM (segmentation) tile.
    :param target: DTM tile (pretext) or binary footprint tile (segmentation).
    :param offset: normalization offset in meters (input' = (input - offset) / scale).
    :param scale: normalization scale in meters.
    :param clean_target: the target before label noise, None while the labels are clean.
    """
    tile_id: str
    scene_id: str
    row: int
    col: int
    task: str
    input: np.ndarray
    target: np.ndarray
    offset: float = 0.0
    scale: float = 1.0
    normalized: bool = False
    clean_target: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.task not in TASKS:
            raise ContractError(f"task must be one of {TASKS}, got {self.task!r}.")
        if self.input.shape != self.target.shape:
            raise ContractError(f"tile {self.tile_id}: input {self.input.shape} and target {self.target.shape} differ.")
        if not (math.isfinite(self.offset) and math.isfinite(self.scale) and self.scale > 0):
            raise ContractError(f"tile {self.tile_id}: invalid normalization ({self.offset}, {self.scale}).")

    @property
    def scoring_target(self):
        "Clean target when label noise was injected, the target otherwise."
        return self.clean_target if self.clean_target is not None else self.target


@dataclass(eq=False)
class DatasetManifest:
    """
    Index of tiles with their split, labeled flag and task.

    Tiles of one scene always share the same split. Labeled tiles are a subset of the training split.
    """
    records: List[TileRecord]
    splits: Dict[str, str]
    task: str
    seed: int = 0
    labeled: FrozenSet[str] = frozenset()
    label_fraction: float = 1.0
    noise_log: Dict[str, int] = field(default_factory=dict)

    def __post_init__(self):
        if self.task not in TASKS:
            raise ContractError(f"task must be one of {TASKS}, got {self.task!r}.")
        ids = {r.tile_id for r in self.records}
        if set(self.splits) != ids:
            raise ContractError("every tile must have exactly one split.")
        if not set(self.splits.values()) <= set(SPLITS):
            raise ContractError(f"splits must be in {SPLITS}.")
        self.labeled = frozenset(self.labeled)
        if any(self.splits.get(t) != 'train' for t in self.labeled):
            raise ContractError("labeled tiles must belong to the training split.")

        scene_split = {}
        for record in self.records:
            split = self.splits[record.tile_id]
            if scene_split.setdefault(record.scene_id, split) != split:
                raise ContractError(f"scene {record.scene_id} appears in several splits.")

    def split(self, name):
        "Records of one split, in manifest order."
        if name not in SPLITS:
            raise ConfigurationError(f"split must be one of {SPLITS}, got {name!r}.")
        return [r for r in self.records if self.splits[r.tile_id] == name]

    def labeled_records(self):
        return [r for r in self.records if r.tile_id in self.labeled]

    def scene_ids(self, name):
        return sorted({r.scene_id for r in self.split(name)})

    def arrays(self, records, clean=False):
        """
        Stacks records into network-ready arrays: inputs (N, H, W, 1) float32, targets (N, H, W, 1) float32 for the pretext task or (N, H, W) int32 masks for segmentation.

        :param records: list of TileRecord.
        :param clean: use the clean targets when label noise was injected.
        """
        if not records:
            raise ConfigurationError("no tile to stack.")
        x = np.stack([r.input for r in records]).astype(np.float32)[..., None]
        targets = [r.scoring_target if clean else r.target for r in records]
        if self.task == 'pretext':
            y = np.stack(targets).astype(np.float32)[..., None]
        else:
            y = np.stack(targets).astype(np.int32)
        return x, y

    def summary(self):
        "Logs a summary of the manifest."
        logger.info("Dataset summary (%s task, seed %d)", self.task, self.seed)
        for name in SPLITS:
            logger.info("\t- %s: %d tiles from %d scenes", name, len(self.split(name)), len(self.scene_ids(name)))
        if self.task == 'segmentation':
            logger.info("\t- labeled: %d tiles (fraction %.3g)", len(self.labeled), self.label_fraction)
        if self.noise_log:
            logger.info("\t- label noise: %s", self.noise_log)


#############################################################################################
## Tiling and normalization
#############################################################################################

def tile_scene(scene, tile_px, stride_px, task):
    """
    Cuts a scene into square tiles. Partial tiles at the borders are dropped.

    :param scene: SceneBundle.
    :param tile_px: tile size in pixels.
    :param stride_px: distance in pixels between two consecutive tiles.
    :param task: 'pretext' (DSM -> DTM) or 'segmentation' (nDSM -> footprint).
    """
    if task not in TASKS:
        raise ConfigurationError(f"task must be one of {TASKS}, got {task!r}.")
    if stride_px < 1:
        raise ConfigurationError(f"stride_px must be >= 1, got {stride_px}.")
    rows, cols = scene.shape
    if tile_px < 1 or tile_px > min(rows, cols):
        raise ConfigurationError(f"tile_px={tile_px} does not fit in a {rows}x{cols} scene.")

    records = []
    for row in range(0, rows - tile_px + 1, stride_px):
        for col in range(0, cols - tile_px + 1, stride_px):
            records.append(extract_tile(scene, row, col, tile_px, task))
    return records


def extract_tile(scene, row, col, tile_px, task):
    "Single tile of a scene at a given pixel offset."
    if task == 'pretext':
        source, target = scene.dsm.heights, scene.dtm.heights
    else:
        source, target = scene.ndsm.heights, scene.footprint
    window = (slice(row, row + tile_px), slice(col, col + tile_px))
    if source[window].shape != (tile_px, tile_px):
        raise DataError(f"tile at ({row}, {col}) exceeds scene {scene.scene_id}.")
    return TileRecord(
        tile_id=f"{scene.scene_id}_r{row:05d}_c{col:05d}",
        scene_id=scene.scene_id,
        row=int(row),
        col=int(col),
        task=task,
        input=source[window].copy(),
        target=target[window].copy(),
    )


def normalize_tile(tile, mode='minshift', offset=None, scale=None, min_scale_m=1.0):
    """
    Brings a tile to a common frame.

    * 'minshift': `input' = (input - min(input)) / max(max(input) - min(input), min_scale_m)`.
    * 'global': `input' = (input - offset) / scale` with the given constants.

    Pretext targets (DTM) are transformed with the same offset and scale as the input, so DSM and DTM stay in one frame. Segmentation masks are left untouched.

    :param tile: TileRecord with raw heights in meters.
    :param mode: 'minshift' or 'global'.
    """
    if mode not in NORMALIZATIONS:
        raise ConfigurationError(f"normalization must be one of {NORMALIZATIONS}, got {mode!r}.")
    if tile.normalized:
        return tile

    heights = tile.input.astype(np.float64)
    if not np.isfinite(heights).all():
        raise DataError(f"tile {tile.tile_id} contains non-finite heights.")

    if mode == 'minshift':
        offset = float(heights.min())
        scale = max(float(heights.max()) - offset, float(min_scale_m))
    elif offset is None or scale is None:
        raise ConfigurationError("global normalization needs an offset and a scale.")

    normalized_input = ((heights - offset) / scale).astype(np.float32)
    if tile.task == 'pretext':
        target = tile.target.astype(np.float64)
        if not np.isfinite(target).all():
            raise DataError(f"tile {tile.tile_id} contains non-finite targets.")
        normalized_target = ((target - offset) / scale).astype(np.float32)
    else:
        normalized_target = tile.target

    return dataclasses.replace(tile, input=normalized_input, target=normalized_target, offset=float(offset), scale=float(scale), normalized=True)


def normalize_records(records, config):
    "Applies the normalization of a DatasetConfig to a list of records."
    return [
        normalize_tile(r, mode=config.normalization, offset=config.global_offset_m, scale=config.global_scale_m, min_scale_m=config.min_scale_m)
        for r in records
    ]


def assemble_tiles(records, shape, which='input'):
    """
    Pastes tiles back into a scene-sized array (NaN where no tile lands). Used to check that tiling loses nothing inside the covered area.

    :param records: TileRecords of one scene.
    :param shape: shape of the scene.
    :param which: 'input' or 'target'.
    """
    canvas = np.full(shape, np.nan, dtype=np.float64)
    for r in records:
        data = getattr(r, which)
        h, w = data.shape
        canvas[r.row:r.row + h, r.col:r.col + w] = data
    return canvas


def rescale_scene(scene, factor):
    """
    Resamples a scene by `factor` (2.0 doubles the number of pixels), as a change of acquisition resolution.

    DTM and nDSM are interpolated bilinearly, masks by nearest neighbour; the DSM is recomposed from them so the scene invariants keep holding.

    :param scene: SceneBundle.
    :param factor: zoom factor (> 0).
    """
    if not factor > 0:
        raise ConfigurationError(f"rescale factor must be > 0, got {factor}.")
    if factor == 1:
        return scene

    resolution = scene.resolution_m / factor
    dtm = ndimage.zoom(scene.dtm.heights.astype(np.float64), factor, order=1).astype(np.float32)
    ndsm = np.maximum(ndimage.zoom(scene.ndsm.heights.astype(np.float64), factor, order=1), 0.0).astype(np.float32)
    footprint = ndimage.zoom(scene.footprint, factor, order=0)
    kind_map = ndimage.zoom(scene.kind_map, factor, order=0) if scene.kind_map is not None else None

    dsm = np.add(dtm, ndsm, dtype=np.float32)
    ndsm = np.subtract(dsm, dtm, dtype=np.float32)

    def as_field(heights, kind):
        return TerrainField(heights, resolution_m=resolution, kind=kind, seed=scene.dtm.seed)

    return SceneBundle(
        dtm=as_field(dtm, 'dtm'),
        dsm=as_field(dsm, 'dsm'),
        ndsm=as_field(ndsm, 'ndsm'),
        footprint=footprint,
        scene_id=scene.scene_id,
        kind_map=kind_map,
    )


#############################################################################################
## Splits and label budgets
#############################################################################################

def make_splits(records, fractions=(0.8, 0.1, 0.1), seed=0):
    """
    Assigns every scene (and thus all of its tiles) to the train, val or test split.

    Split sizes are rounded per split, every non-zero fraction gets at least one scene, and train takes the rest.

    :param records: list of TileRecord of a single task.
    :param fractions: (train, val, test) fractions of scenes, summing to 1.
    :param seed: random seed of the assignment.
    """
    fractions = tuple(float(f) for f in fractions)
    if len(fractions) != 3 or any(f < 0 for f in fractions) or abs(sum(fractions) - 1.0) > 1e-6:
        raise ConfigurationError(f"split fractions must be three non-negative numbers summing to 1, got {fractions}.")
    tasks = {r.task for r in records}
    if len(tasks) != 1:
        raise ConfigurationError("records must all belong to one task.")

    scenes = sorted({r.scene_id for r in records})
    n = len(scenes)
    wanted = sum(1 for f in fractions if f > 0)
    if n < wanted:
        raise ConfigurationError(f"{n} scenes cannot fill {wanted} splits.")

    def count(f):
        return max(1, int(round(f * n))) if f > 0 else 0

    n_val, n_test = count(fractions[1]), count(fractions[2])
    n_train = n - n_val - n_test
    if fractions[0] > 0 and n_train < 1:
        raise ConfigurationError(f"{n} scenes leave no scene for training.")

    rest, test = (train_test_split(scenes, test_size=n_test, random_state=seed) if n_test > 0 else (scenes, []))
    train, val = (train_test_split(rest, test_size=n_val, random_state=seed + 1) if n_val > 0 else (rest, []))

    scene_split = {s: 'train' for s in train}
    scene_split.update({s: 'val' for s in val})
    scene_split.update({s: 'test' for s in test})

    manifest = DatasetManifest(
        records=list(records),
        splits={r.tile_id: scene_split[r.scene_id] for r in records},
        task=tasks.pop(),
        seed=seed,
    )
    if manifest.task == 'segmentation':
        manifest.labeled = frozenset(r.tile_id for r in manifest.split('train'))
    return manifest


def label_order(manifest, seed):
    "Seeded permutation of the training tiles; every label budget is a prefix of it."
    train_ids = sorted(r.tile_id for r in manifest.split('train'))
    permutation = derive_rng(seed, 'labels').permutation(len(train_ids))
    return [train_ids[i] for i in permutation]


def subsample_labels(manifest, fraction, seed=0):
    """
    Keeps the labels of `ceil(fraction * |train|)` training tiles.

    The labeled tiles are a prefix of one seeded permutation, so under the same seed the 1% subset is included in the 10% subset, itself included in the full set. Unlabeled tiles stay in the manifest but are excluded from supervised losses.

    :param manifest: segmentation DatasetManifest.
    :param fraction: label fraction in (0, 1].
    :param seed: random seed of the permutation.
    """
    if manifest.task != 'segmentation':
        raise ConfigurationError("label budgets only apply to the segmentation task.")
    if not 0.0 < fraction <= 1.0:
        raise ConfigurationError(f"label fraction must be in (0, 1], got {fraction}.")

    order = label_order(manifest, seed)
    count = math.ceil(fraction * len(order) - 1e-9)
    if count == 0:
        raise ConfigurationError(f"label fraction {fraction} of {len(order)} training tiles selects no tile.")

    logger.info("Label budget: %d of %d training tiles (fraction %.3g).", count, len(order), fraction)
    return dataclasses.replace(manifest, labeled=frozenset(order[:count]), label_fraction=float(fraction))


#############################################################################################
## Label noise
#############################################################################################

def _translate(mask, dy, dx):
    "Shifts a mask by (dy, dx) pixels, filling with background."
    shifted = np.zeros_like(mask)
    h, w = mask.shape
    src_r = slice(max(-dy, 0), h - max(dy, 0))
    src_c = slice(max(-dx, 0), w - max(dx, 0))
    dst_r = slice(max(dy, 0), h - max(-dy, 0))
    dst_c = slice(max(dx, 0), w - max(-dx, 0))
    shifted[dst_r, dst_c] = mask[src_r, src_c]
    return shifted


def corrupt_mask(mask, spec, rng):
    """
    Applies a NoiseSpec to one mask. Returns the noisy mask and counters of what was done.

    Steps: building removal, phantom buildings, translation, boundary erosion/dilation.
    """
    mask = mask.astype(bool)
    stats = {'removed': 0, 'phantoms': 0, 'shifted': 0, 'morphed': 0}

    labels, count = ndimage.label(mask, structure=np.ones((3, 3)))
    noisy = mask.copy()
    for component in range(1, count + 1):
        if rng.random() < spec.p_remove_building:
            noisy[labels == component] = False
            stats['removed'] += 1

    h, w = mask.shape
    for _ in range(count):
        if rng.random() < spec.p_add_phantom_building:
            ph, pw = (int(s) for s in rng.integers(spec.phantom_size_px[0], spec.phantom_size_px[1] + 1, size=2))
            ph, pw = min(ph, h), min(pw, w)
            r = int(rng.integers(0, h - ph + 1))
            c = int(rng.integers(0, w - pw + 1))
            noisy[r:r + ph, c:c + pw] = True
            stats['phantoms'] += 1

    if spec.max_shift_px > 0:
        dy, dx = (int(s) for s in rng.integers(-spec.max_shift_px, spec.max_shift_px + 1, size=2))
        if dy or dx:
            noisy = _translate(noisy, dy, dx)
            stats['shifted'] += 1

    if rng.random() < spec.p_boundary_erode_dilate:
        if rng.random() < 0.5:
            noisy = ndimage.binary_erosion(noisy)
        else:
            noisy = ndimage.binary_dilation(noisy)
        stats['morphed'] += 1

    return noisy.astype(np.uint8), stats


def inject_label_noise(manifest, spec, splits=None):
    """
    Corrupts segmentation targets to emulate incomplete and incorrect labels.

    Inputs are never modified; the clean masks are kept in `TileRecord.clean_target` for scoring. Each tile draws from its own seeded stream, so the result does not depend on the tile order.

    :param manifest: segmentation DatasetManifest.
    :param spec: NoiseSpec.
    :param splits: splits to corrupt (default: all).
    """
    if manifest.task != 'segmentation':
        raise ConfigurationError("label noise only applies to the segmentation task.")

    splits = set(splits) if splits is not None else set(SPLITS)
    totals = {'removed': 0, 'phantoms': 0, 'shifted': 0, 'morphed': 0}
    records = []
    for record in manifest.records:
        if manifest.splits[record.tile_id] not in splits or spec.is_noop:
            records.append(record)
            continue
        clean = record.scoring_target
        noisy, stats = corrupt_mask(clean, spec, derive_rng(spec.seed, 'noise', record.tile_id))
        for key in totals:
            totals[key] += stats[key]
        records.append(dataclasses.replace(record, target=noisy, clean_target=clean))

    logger.info("Injected label noise: %s", totals)
    return dataclasses.replace(manifest, records=records, noise_log=totals)


#############################################################################################
## Corpus construction and manifest files
#############################################################################################

def build_manifest(scenes, config, task, seed=0):
    """
    Tiles, normalizes and splits a list of scenes.

    :param scenes: list of SceneBundle.
    :param config: DatasetConfig.
    :param task: 'pretext' or 'segmentation'.
    :param seed: split seed.
    """
    records = []
    for scene in scenes:
        records.extend(tile_scene(scene, config.tile_px, config.stride_px, task))
    records = normalize_records(records, config)
    return make_splits(records, config.split_fractions, seed=seed)


def write_manifest(manifest, path, tile_px):
    """
    Writes a manifest as tab-separated text: a `#` header with the task, seed and label fraction, then one line per tile (tile_id, scene_id, offsets, split, labeled flag, payload paths, normalization stats). Paths are relative to the scene root.

    :param manifest: DatasetManifest (clean labels).
    :param path: destination file.
    :param tile_px: tile size in pixels.
    """
    if manifest.task == 'pretext':
        input_name, target_name = 'dsm.f32', 'dtm.f32'
    else:
        input_name, target_name = 'ndsm.f32', 'footprint.u8'

    df = pd.DataFrame({
        'tile_id': [r.tile_id for r in manifest.records],
        'scene_id': [r.scene_id for r in manifest.records],
        'row': [r.row for r in manifest.records],
        'col': [r.col for r in manifest.records],
        'tile_px': tile_px,
        'split': [manifest.splits[r.tile_id] for r in manifest.records],
        'labeled': [int(r.tile_id in manifest.labeled) for r in manifest.records],
        'input_path': [f"{r.scene_id}/{input_name}" for r in manifest.records],
        'target_path': [f"{r.scene_id}/{target_name}" for r in manifest.records],
        'normalized': [int(r.normalized) for r in manifest.records],
        'offset': [repr(r.offset) for r in manifest.records],
        'scale': [repr(r.scale) for r in manifest.records],
    })

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, 'w', encoding='utf-8', newline='') as f:
        f.write(f"# task={manifest.task} seed={manifest.seed} label_fraction={manifest.label_fraction!r}\n")
        df.to_csv(f, sep='\t', index=False)


def read_manifest(path, scene_root):
    """
    Reads a manifest written by `write_manifest()` and loads its tiles from the scene directories.

    :param path: manifest file.
    :param scene_root: directory containing one sub-directory per scene.
    """
    path = Path(path)
    scene_root = Path(scene_root)
    if not path.exists():
        raise MissingArtifactError(f"manifest {path} does not exist.")

    with open(path, encoding='utf-8') as f:
        header = dict(item.split('=', 1) for item in f.readline().lstrip('#').split())
    df = pd.read_csv(path, sep='\t', comment='#', dtype={'tile_id': str, 'scene_id': str, 'offset': str, 'scale': str})

    task = header['task']
    scenes = {}
    records = []
    for entry in df.itertuples(index=False):
        if entry.scene_id not in scenes:
            scene_dir = scene_root / entry.scene_id
            if not scene_dir.exists():
                raise MissingArtifactError(f"scene directory {scene_dir} does not exist.")
            scenes[entry.scene_id] = load_scene(scene_dir)
        scene = scenes[entry.scene_id]
        tile = extract_tile(scene, entry.row, entry.col, int(entry.tile_px), task)
        tile = dataclasses.replace(tile, tile_id=entry.tile_id)
        if int(entry.normalized):
            offset, scale = float(entry.offset), float(entry.scale)
            tile = normalize_tile(tile, mode='global', offset=offset, scale=scale)
        records.append(tile)

    return DatasetManifest(
        records=records,
        splits=dict(zip(df['tile_id'], df['split'])),
        task=task,
        seed=int(header['seed']),
        labeled=frozenset(df['tile_id'][df['labeled'] == 1]),
        label_fraction=float(header['label_fraction']),
    )
