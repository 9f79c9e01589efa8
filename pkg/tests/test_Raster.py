import logging

import numpy as np
import pytest

from terra_ssl.Errors import ContractError, DataError, IngestionError, MissingArtifactError
from terra_ssl.Raster import (ArrayAdapter, ElevationRaster, RasterioAdapter, TerrainField, fill_nearest, ingest_raster,
                              ndsm_from_pair, read_array, read_key_values, write_array, write_key_values)


def test_identity_adapter():
    grid = np.random.default_rng(0).uniform(0, 50, (64, 64))
    raster = ingest_raster(ArrayAdapter(grid, resolution_m=0.5), 'dsm')
    assert raster.shape == (64, 64)
    assert raster.resolution_m == 0.5
    np.testing.assert_array_equal(raster.heights, grid.astype(np.float32))
    assert not raster.fill_mask.any()


def test_single_void_pixel_is_filled():
    grid = np.arange(64 * 64, dtype=np.float64).reshape(64, 64)
    grid[10, 10] = np.nan
    raster = ingest_raster(ArrayAdapter(grid), 'dtm')
    assert raster.fill_mask.sum() == 1
    assert raster.fill_mask[10, 10]
    neighbours = {grid[9, 10], grid[11, 10], grid[10, 9], grid[10, 11]}
    assert float(raster.heights[10, 10]) in neighbours


def test_nodata_value_is_filled():
    grid = np.full((32, 32), 12.0)
    grid[:4, :4] = -9999.0
    raster = ingest_raster(ArrayAdapter(grid, nodata=-9999.0), 'dtm')
    assert raster.fill_mask.sum() == 16
    assert (raster.heights == 12.0).all()


def test_single_band_cube_is_accepted():
    raster = ingest_raster(ArrayAdapter(np.ones((1, 8, 8))), 'dtm')
    assert raster.shape == (8, 8)


def test_multi_band_is_rejected():
    with pytest.raises(IngestionError, match='single-band'):
        ingest_raster(ArrayAdapter(np.ones((2, 8, 8))), 'dsm')


def test_missing_resolution_is_rejected():
    with pytest.raises(IngestionError, match='resolution'):
        ingest_raster(ArrayAdapter(np.ones((8, 8)), resolution_m=None), 'dsm')


def test_all_void_is_rejected():
    with pytest.raises(IngestionError):
        ingest_raster(ArrayAdapter(np.full((8, 8), np.nan)), 'dsm')


def test_unknown_kind_is_rejected():
    with pytest.raises(IngestionError):
        ingest_raster(ArrayAdapter(np.ones((8, 8))), 'dem')


def test_mask_ingestion_binarizes():
    raster = ingest_raster(ArrayAdapter(np.array([[0.0, 0.9], [1.0, 0.2]])), 'mask')
    assert raster.heights.dtype == np.uint8
    np.testing.assert_array_equal(raster.heights, [[0, 1], [1, 0]])


def test_fill_nearest_keeps_valid_pixels():
    grid = np.arange(16, dtype=np.float64).reshape(4, 4)
    invalid = np.zeros((4, 4), dtype=bool)
    invalid[0, 0] = True
    filled = fill_nearest(grid, invalid)
    np.testing.assert_array_equal(filled[~invalid], grid[~invalid])


def test_ndsm_within_tolerance_is_silent(caplog):
    dtm = ElevationRaster(np.full((8, 8), 10.0), kind='dtm')
    dsm = ElevationRaster(np.full((8, 8), 9.995), kind='dsm')
    with caplog.at_level(logging.WARNING):
        ndsm = ndsm_from_pair(dsm, dtm)
    assert not caplog.records
    assert (ndsm.heights >= 0).all()


def test_ndsm_below_tolerance_warns(caplog):
    dtm = ElevationRaster(np.full((8, 8), 10.0), kind='dtm')
    heights = np.full((8, 8), 12.0)
    heights[0, 0] = 9.5
    dsm = ElevationRaster(heights, kind='dsm')
    with caplog.at_level(logging.WARNING):
        ndsm = ndsm_from_pair(dsm, dtm)
    assert any('tolerance' in r.getMessage() for r in caplog.records)
    assert ndsm.heights[0, 0] == 0.0
    assert ndsm.heights[1, 1] == 2.0


def test_ndsm_shape_mismatch():
    with pytest.raises(ContractError):
        ndsm_from_pair(ElevationRaster(np.zeros((8, 8)), kind='dsm'), ElevationRaster(np.zeros((4, 4))))


def test_raster_validation():
    with pytest.raises(DataError):
        ElevationRaster(np.array([[0.0, np.inf]]))
    with pytest.raises(ContractError):
        ElevationRaster(np.zeros(8))
    with pytest.raises(ContractError):
        ElevationRaster(np.zeros((4, 4)), resolution_m=-1.0)
    with pytest.raises(DataError):
        ElevationRaster(np.full((4, 4), 2), kind='mask')
    with pytest.raises(ContractError):
        TerrainField(np.zeros((16, 16)))


def test_payload_round_trip(tmp_path):
    heights = np.random.default_rng(1).normal(size=(12, 7)).astype(np.float32)
    mask = (heights > 0).astype(np.uint8)
    write_array(tmp_path / 'h.f32', heights)
    write_array(tmp_path / 'm.u8', mask)

    raw = np.fromfile(tmp_path / 'h.f32', dtype='<f4')
    assert raw.size == heights.size
    np.testing.assert_array_equal(read_array(tmp_path / 'h.f32', (12, 7)), heights)
    np.testing.assert_array_equal(read_array(tmp_path / 'm.u8', (12, 7)), mask)

    with pytest.raises(DataError):
        read_array(tmp_path / 'h.f32', (12, 8))
    with pytest.raises(MissingArtifactError):
        read_array(tmp_path / 'missing.f32', (12, 7))


def test_key_values_round_trip(tmp_path):
    write_key_values(tmp_path / 'meta.txt', {'rows': 3, 'scene_id': 'a=b', 'resolution_m': 0.5})
    values = read_key_values(tmp_path / 'meta.txt')
    assert values == {'resolution_m': '0.5', 'rows': '3', 'scene_id': 'a=b'}


def test_rasterio_adapter(tmp_path):
    rasterio = pytest.importorskip('rasterio')
    from rasterio.transform import from_origin

    grid = np.random.default_rng(2).uniform(0, 10, (16, 16)).astype(np.float32)
    grid[3, 3] = -9999.0
    path = tmp_path / 'dtm.tif'
    with rasterio.open(
        path, 'w', driver='GTiff', height=16, width=16, count=1, dtype='float32',
        transform=from_origin(0.0, 8.0, 0.5, 0.5), nodata=-9999.0,
    ) as dst:
        dst.write(grid, 1)

    raster = ingest_raster(RasterioAdapter(path), 'dtm')
    assert raster.resolution_m == 0.5
    assert raster.fill_mask.sum() == 1
    assert raster.heights[3, 3] != -9999.0
