from __future__ import annotations

import numpy as np
import pytest
from scipy.spatial.distance import pdist

from core.errors import DatasetError, InvalidArgumentError
from core.models.data import DataMatrix, RngSpec
from core.schemas.experiment import DataConfig
from core.services import dataset_service


def test_parse_single_row():
    data = dataset_service.parse_csv_dataset("2,0\n")
    assert (data.d, data.N) == (2, 1)
    assert np.array_equal(data.column(0), [2.0, 0.0])


def test_parse_six_points_skips_blank_lines():
    rng = np.random.default_rng(1)
    rows = rng.uniform(-10, 10, size=(6, 2))
    text = "\n".join(",".join(str(v) for v in row) for row in rows) + "\n\n"
    data = dataset_service.parse_csv_dataset(text)
    assert (data.d, data.N) == (2, 6)


def test_nan_entry_reports_position():
    with pytest.raises(DatasetError) as excinfo:
        dataset_service.parse_csv_dataset("1,2\n3,NaN\n")
    assert (excinfo.value.row, excinfo.value.column) == (1, 1)


def test_ragged_rows_rejected():
    with pytest.raises(DatasetError):
        dataset_service.parse_csv_dataset("1,2\n3\n")


def test_json_dataset():
    data = dataset_service.parse_json_dataset("[[1, 2], [3, 4], [5, 6]]")
    assert (data.d, data.N) == (2, 3)
    with pytest.raises(DatasetError):
        dataset_service.parse_json_dataset('{"points": []}')


def test_missing_file(tmp_path):
    with pytest.raises(DatasetError):
        dataset_service.load_dataset(tmp_path / "absent.csv")


def test_csv_round_trip_is_exact(tmp_path, sparse_data):
    path = dataset_service.save_dataset(tmp_path / "data.csv", sparse_data)
    loaded = dataset_service.load_dataset(path)
    assert np.array_equal(loaded.points, sparse_data.points)
    assert dataset_service.dataset_to_csv(loaded) == path.read_text(encoding="utf-8")


def test_svd_single_column():
    basis = dataset_service.svd_decompose(DataMatrix(np.array([[2.0], [0.0]])))
    assert basis.D == 1
    assert np.allclose(np.abs(basis.V[:, 0]), [1.0, 0.0])
    assert basis.Vperp.shape == (2, 1)


def test_svd_rank_cutoff():
    Y = np.array([[1.0, 1.0], [0.0, 1e-14]])
    assert dataset_service.svd_decompose(DataMatrix(Y), rank_tol=1e-10).D == 1


def test_svd_subspace_cube():
    data = dataset_service.subspace_cube_dataset(RngSpec(0), 200, d=100, D=20)
    basis = dataset_service.svd_decompose(data)
    assert basis.D == 20
    assert np.allclose(basis.V.T @ basis.V, np.eye(20), atol=1e-12)
    assert np.allclose(basis.V.T @ basis.Vperp, 0.0, atol=1e-12)
    assert np.allclose(basis.V @ basis.R, data.points, atol=1e-10)


def test_gaussian_draws():
    draws = dataset_service.sample_standard_gaussian(RngSpec(7), 2, 100_000)
    assert np.all(np.abs(draws.mean(axis=1)) < 0.02)
    again = dataset_service.sample_standard_gaussian(RngSpec(7), 2, 100_000)
    assert np.array_equal(draws, again)
    other = dataset_service.sample_standard_gaussian(RngSpec(8), 2, 10)
    assert not np.array_equal(draws[:, 0], other[:, 0])


def test_substreams_are_independent():
    a = dataset_service.sample_standard_gaussian(RngSpec(7, 1), 2, 5, substream=0)
    b = dataset_service.sample_standard_gaussian(RngSpec(7, 1), 2, 5, substream=1)
    assert not np.array_equal(a, b)


def test_sparse_dataset_respects_separation():
    data = dataset_service.sparse_dataset(RngSpec(0), 6, d=2, box=10.0, min_separation=5.0)
    assert data.N == 6
    assert pdist(data.points.T).min() >= 5.0
    assert np.all(np.abs(data.points) <= 10.0)


def test_sparse_dataset_impossible_separation():
    with pytest.raises(InvalidArgumentError):
        dataset_service.sparse_dataset(RngSpec(0), 10, d=1, box=1.0, min_separation=5.0, max_draws=500)


def test_hierarchical_dataset_and_labels():
    config = DataConfig(mode="hierarchical")
    data = dataset_service.build_dataset(config, RngSpec(0))
    labels = dataset_service.cluster_labels(config)
    assert data.N == labels.size == 4 * 30
    centers = np.array(config.centers)
    for label, center in enumerate(centers):
        assert np.allclose(data.points[:, labels == label].mean(axis=1), center, atol=0.5)


def test_basis_file_round_trip(tmp_path, cube):
    _, basis = cube
    loaded = dataset_service.load_basis(dataset_service.save_basis(tmp_path / "basis.json", basis))
    assert loaded.D == basis.D
    assert np.allclose(loaded.V, basis.V)
    assert np.allclose(loaded.V.T @ loaded.Vperp, 0.0, atol=1e-12)


def test_undecodable_file_is_a_dataset_error(tmp_path):
    path = tmp_path / "latin.csv"
    path.write_bytes(b"1.0,2.0\n\xff\xfe,3.0\n")
    with pytest.raises(DatasetError, match="UTF-8"):
        dataset_service.load_dataset(path)


def test_directory_is_a_dataset_error(tmp_path):
    with pytest.raises(DatasetError) as excinfo:
        dataset_service.load_dataset(tmp_path)
    assert excinfo.value.exit_code == 2
