"""
Elevation rasters, ingestion of external grids and the raw binary formats used on disk.

On disk, every raster is a headerless row-major little-endian array: 32-bit floats (`.f32`) for heights, 8-bit unsigned integers (`.u8`) for masks. Shapes and metadata live in a key/value text manifest next to the payloads.
"""
import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy import ndimage

from .Errors import ContractError, DataError, IngestionError, MissingArtifactError

logger = logging.getLogger(__name__)

KINDS = ('dtm', 'dsm', 'ndsm', 'mask')

# Tolerance on negative nDSM values when DSM and DTM come from measurements.
NDSM_TOLERANCE_M = 0.01


@dataclass(eq=False)
class ElevationRaster:
    """
    2-D grid of heights in meters (or a binary mask) with its ground resolution.

    :param heights: 2-D array, stored as float32 (uint8 for masks).
    :param resolution_m: meters per pixel.
    :param kind: one of 'dtm', 'dsm', 'ndsm', 'mask'.
    :param fill_mask: boolean array marking pixels that were filled during ingestion (None when nothing was filled).
    """
    heights: np.ndarray
    resolution_m: float = 1.0
    kind: str = 'dtm'
    fill_mask: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ContractError(f"kind must be one of {KINDS}, got {self.kind!r}.")
        heights = np.asarray(self.heights)
        if heights.ndim != 2:
            raise ContractError(f"heights must be a 2-D grid, got shape {heights.shape}.")
        if not self.resolution_m > 0:
            raise ContractError(f"resolution_m must be > 0, got {self.resolution_m}.")
        if self.kind == 'mask':
            if not np.isin(heights, (0, 1)).all():
                raise DataError("a mask raster may only contain 0 and 1.")
            heights = heights.astype(np.uint8)
        else:
            heights = heights.astype(np.float32)
            if not np.isfinite(heights).all():
                raise DataError(f"{self.kind} raster contains non-finite values.")
        self.heights = heights

    @property
    def shape(self):
        return self.heights.shape


@dataclass(eq=False)
class TerrainField(ElevationRaster):
    """
    Elevation raster produced by the scene synthesizer. Carries the seed it was generated from and must be at least 32x32 pixels.
    """
    seed: int = 0

    def __post_init__(self):
        super().__post_init__()
        if min(self.heights.shape) < 32:
            raise ContractError(f"a terrain field must be at least 32x32 pixels, got {self.heights.shape}.")


#############################################################################################
## Ingestion
#############################################################################################

class ArrayAdapter(object):
    """
    In-memory ingestion adapter.

    An adapter is any callable returning a tuple `(grid, resolution_m, nodata)`: `grid` a numpy array (2-D for a single band), `resolution_m` the ground resolution in meters or None when unknown, and `nodata` the void value or None (NaN is always treated as void).
    """

    def __init__(self, grid, resolution_m=1.0, nodata=None):
        self.grid = np.asarray(grid)
        self.resolution_m = resolution_m
        self.nodata = nodata

    def __call__(self):
        return self.grid, self.resolution_m, self.nodata


class RasterioAdapter(object):
    """
    Ingestion adapter for georeferenced files (GeoTIFF and anything GDAL reads). Needs the optional `rasterio` dependency.

    :param path: path to the raster file.
    :param band: 1-based band index to read. When None, all bands are read and multi-band files are rejected by `ingest_raster()`.
    """

    def __init__(self, path, band=None):
        self.path = str(path)
        self.band = band

    def __call__(self):
        try:
            import rasterio
        except ImportError as exc:
            raise IngestionError("rasterio is required to read raster files: pip install rasterio") from exc

        with rasterio.open(self.path) as src:
            if self.band is None:
                grid = src.read()
                if grid.shape[0] == 1:
                    grid = grid[0]
            else:
                grid = src.read(self.band)
            resolution = None if src.transform.is_identity else abs(float(src.res[0]))
            nodata = src.nodata

        return grid, resolution, nodata


def fill_nearest(grid, invalid):
    """
    Replaces the invalid pixels of a grid by the value of their nearest valid neighbour.

    :param grid: 2-D array.
    :param invalid: boolean array, True where the value must be replaced.
    """
    if not invalid.any():
        return grid.copy()
    if invalid.all():
        raise IngestionError("the raster contains no valid pixel.")
    _, (rows, cols) = ndimage.distance_transform_edt(invalid, return_indices=True)
    return grid[rows, cols]


def ingest_raster(source, kind):
    """
    Validates the grid returned by an adapter and turns it into an ElevationRaster.

    NaN and nodata pixels are filled with their nearest valid neighbour; the filled pixels are recorded in `fill_mask`.

    :param source: adapter callable returning `(grid, resolution_m, nodata)`.
    :param kind: 'dtm', 'dsm', 'ndsm' or 'mask'.
    """
    if kind not in KINDS:
        raise IngestionError(f"kind must be one of {KINDS}, got {kind!r}.")

    grid, resolution, nodata = source()
    grid = np.asarray(grid)

    if grid.ndim == 3 and grid.shape[0] > 1:
        raise IngestionError(f"expected a single-band raster, got {grid.shape[0]} bands.")
    if grid.ndim == 3:
        grid = grid[0]
    if grid.ndim != 2:
        raise IngestionError(f"expected a 2-D grid, got shape {grid.shape}.")
    if resolution is None:
        raise IngestionError("the raster has no ground resolution metadata.")

    grid = grid.astype(np.float64)
    invalid = ~np.isfinite(grid)
    if nodata is not None and np.isfinite(nodata):
        invalid |= grid == nodata

    filled = fill_nearest(grid, invalid)
    if invalid.any():
        logger.info("Filled %d void pixels of the %s raster.", int(invalid.sum()), kind)

    if kind == 'mask':
        filled = (filled > 0.5).astype(np.uint8)

    return ElevationRaster(
        heights=filled,
        resolution_m=float(resolution),
        kind=kind,
        fill_mask=invalid if invalid.any() else np.zeros(grid.shape, dtype=bool),
    )


def ndsm_from_pair(dsm, dtm, tolerance=NDSM_TOLERANCE_M):
    """
    Computes the nDSM of an ingested DSM/DTM pair.

    Measured pairs can dip slightly below zero; values down to `-tolerance` are clipped silently, anything lower is clipped too but a warning is emitted.

    :param dsm: ElevationRaster of kind 'dsm'.
    :param dtm: ElevationRaster of kind 'dtm'.
    :param tolerance: accepted negative height in meters (default: 0.01).
    """
    if dsm.shape != dtm.shape:
        raise ContractError(f"DSM {dsm.shape} and DTM {dtm.shape} do not have the same shape.")
    if dsm.resolution_m != dtm.resolution_m:
        raise ContractError("DSM and DTM do not have the same resolution.")

    ndsm = dsm.heights - dtm.heights
    lowest = float(ndsm.min())
    if lowest < -tolerance:
        logger.warning(
            "nDSM reaches %.3f m, below the -%.3f m tolerance (%d pixels).",
            lowest, tolerance, int((ndsm < -tolerance).sum()),
        )

    return ElevationRaster(np.maximum(ndsm, 0.0), resolution_m=dsm.resolution_m, kind='ndsm')


#############################################################################################
## Binary payloads and key/value manifests
#############################################################################################

def write_array(path, array):
    """
    Writes a float raster as little-endian float32 (`.f32`) or a mask as uint8 (`.u8`), row-major, without header.

    :param path: destination file (pathlib.Path).
    :param array: 2-D numpy array.
    """
    if array.dtype == np.uint8 or array.dtype == bool:
        np.ascontiguousarray(array, dtype=np.uint8).tofile(path)
    else:
        np.ascontiguousarray(array, dtype='<f4').tofile(path)


def read_array(path, shape):
    """
    Reads a payload written by `write_array()`. The dtype is deduced from the extension.

    :param path: source file (pathlib.Path).
    :param shape: expected 2-D shape.
    """
    if not path.exists():
        raise MissingArtifactError(f"raster payload {path} does not exist.")
    dtype = np.uint8 if path.suffix == '.u8' else np.dtype('<f4')
    data = np.fromfile(path, dtype=dtype)
    if data.size != int(np.prod(shape)):
        raise DataError(f"{path} holds {data.size} values, expected {shape}.")
    return data.reshape(shape).astype(np.float32 if dtype != np.uint8 else np.uint8)


def write_key_values(path, values):
    """
    Writes a UTF-8 `key=value` text manifest, one entry per line, keys sorted.
    """
    lines = [f"{key}={values[key]}" for key in sorted(values)]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_key_values(path):
    "Reads a manifest written by `write_key_values()`. Values are returned as strings."
    if not path.exists():
        raise MissingArtifactError(f"manifest {path} does not exist.")
    values = {}
    for line in path.read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        key, _, value = line.partition("=")
        values[key.strip()] = value.strip()
    return values
