"""Tests for ingestion, preprocessing stages, splitting, sharding and SMOTE."""

import logging
import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent.parent))

from fedfraud.data_pipeline import (
    ColumnKind,
    DatasetSchema,
    PipelineConfig,
    Preprocessor,
    ProcessedDataset,
    RawTable,
    SplitSpec,
    apply_bins,
    bin_column,
    bin_edges,
    build_client_shards,
    correlation_matrix,
    impute,
    iqr_fences,
    load_csv,
    one_hot,
    prepare_federated_data,
    preprocess,
    remove_outliers_iqr,
    shard,
    smote,
    train_test_split,
)
from fedfraud.errors import ConfigError, EmptyDatasetError, ParseError, PipelineError, SchemaError

F, I, C = ColumnKind.FLOAT, ColumnKind.INTEGER, ColumnKind.CATEGORICAL


def labelled(columns, n=None):
    """RawTable with a 0/1 fraud_bool target appended."""
    n = n or len(next(iter(columns.values()))[1])
    columns = dict(columns)
    columns["fraud_bool"] = (I, [i % 2 for i in range(n)])
    return RawTable.from_columns(columns)


def write_csv(path, text):
    path.write_text(text)
    return path


SMALL_SCHEMA = DatasetSchema((("fraud_bool", I), ("income", F), ("payment_type", C)))


# ingestion

def test_load_csv_types_columns(tmp_path):
    path = write_csv(tmp_path / "a.csv", "fraud_bool,income,payment_type\n0,0.5,AA\n1,,AB\n0,0.25,\n")
    table = load_csv(path, SMALL_SCHEMA)
    assert table.row_count == 3
    assert np.isnan(table.frame["income"].iloc[1])
    assert table.frame["payment_type"].isna().tolist() == [False, False, True]
    assert table.kinds["payment_type"] == C


def test_load_csv_header_only(tmp_path):
    path = write_csv(tmp_path / "a.csv", "fraud_bool,income,payment_type\n")
    with pytest.raises(EmptyDatasetError):
        load_csv(path, SMALL_SCHEMA)


def test_load_csv_empty_file(tmp_path):
    path = write_csv(tmp_path / "a.csv", "")
    with pytest.raises(EmptyDatasetError):
        load_csv(path, SMALL_SCHEMA)


def test_load_csv_categorical_token_in_float_column(tmp_path):
    path = write_csv(tmp_path / "a.csv", "fraud_bool,income,payment_type\n0,0.5,AA\n1,AB,AB\n")
    with pytest.raises(ParseError) as exc:
        load_csv(path, SMALL_SCHEMA)
    assert exc.value.row == 2
    assert exc.value.column == "income"


def test_load_csv_non_integral_integer(tmp_path):
    path = write_csv(tmp_path / "a.csv", "fraud_bool,income,payment_type\n0.5,0.5,AA\n")
    with pytest.raises(ParseError):
        load_csv(path, SMALL_SCHEMA)


def test_load_csv_schema_mismatch(tmp_path):
    path = write_csv(tmp_path / "a.csv", "fraud_bool,income\n0,0.5\n")
    with pytest.raises(SchemaError):
        load_csv(path, SMALL_SCHEMA)


def test_load_csv_target_must_be_binary(tmp_path):
    path = write_csv(tmp_path / "a.csv", "fraud_bool,income,payment_type\n2,0.5,AA\n")
    with pytest.raises(SchemaError):
        load_csv(path, SMALL_SCHEMA)


def test_load_csv_missing_file(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_csv(tmp_path / "missing.csv", SMALL_SCHEMA)


def test_load_synthetic_file(synthetic_csv):
    path, schema = synthetic_csv
    table = load_csv(path, schema)
    assert table.row_count == 400
    assert table.column_names == schema.names


def test_fraud_default_schema():
    schema = DatasetSchema.fraud_default()
    assert len(schema.names) == 32
    assert schema.kinds["fraud_bool"] == I
    assert schema.kinds["income"] == F
    assert schema.kinds["device_os"] == C


def test_schema_round_trip(tmp_path):
    schema = DatasetSchema.from_header(["fraud_bool", "income", "source"])
    assert DatasetSchema.load(schema.save(tmp_path / "schema.json")) == schema


def test_schema_rejects_non_integer_target():
    with pytest.raises(SchemaError):
        DatasetSchema((("fraud_bool", F),))


# imputation

def test_impute_numeric_mean():
    table = impute(labelled({"x": (F, [1.0, None, 3.0])}))
    assert table.frame["x"].tolist() == [1.0, 2.0, 3.0]


def test_impute_categorical_mode():
    table = impute(labelled({"c": (C, ["a", "a", None, "b"])}))
    assert table.frame["c"].tolist() == ["a", "a", "a", "b"]


def test_impute_mode_tie_is_lexicographic():
    table = impute(labelled({"c": (C, ["b", "a", None])}))
    assert table.frame["c"].tolist() == ["b", "a", "a"]


def test_impute_entirely_missing_column():
    with pytest.raises(PipelineError):
        impute(labelled({"x": (F, [None, None])}))


# outliers

def test_iqr_worked_example():
    values = np.array([1, 2, 3, 4, 5, 6, 7, 8, 9, 100], dtype=float)
    lo, hi = iqr_fences(values)
    assert lo == pytest.approx(-3.5, abs=1e-12)
    assert hi == pytest.approx(14.5, abs=1e-12)

    table = remove_outliers_iqr(labelled({"x": (F, values.tolist())}))
    assert table.row_count == 9
    assert 100.0 not in table.frame["x"].tolist()
    assert table.metadata["iqr_fences"]["x"] == pytest.approx([-3.5, 14.5])


def test_iqr_constant_column_keeps_all_rows():
    table = remove_outliers_iqr(labelled({"x": (F, [2.0] * 6)}))
    assert table.row_count == 6


def test_iqr_ignores_integer_columns():
    table = remove_outliers_iqr(labelled({"x": (I, [1, 2, 3, 4, 5, 6, 7, 8, 9, 100])}))
    assert table.row_count == 10


def test_iqr_skips_short_columns(caplog):
    with caplog.at_level(logging.WARNING, logger="fedfraud.data_pipeline"):
        table = remove_outliers_iqr(labelled({"x": (F, [1.0, 2.0, 1000.0])}))
    assert table.row_count == 3
    assert "Skipping IQR" in caplog.text


def test_iqr_multiplier_must_be_finite():
    with pytest.raises(PipelineError):
        remove_outliers_iqr(labelled({"x": (F, [1.0, 2.0, 3.0, 4.0])}), float("inf"))
    with pytest.raises(ConfigError):
        PipelineConfig(iqr_multiplier=float("inf"))


# binning

def test_bins_unit_interval():
    edges = bin_edges(np.array([0.0, 1.0]), 10)
    assert apply_bins(np.array([0.55]), edges).tolist() == [5]


def test_bins_boundaries():
    values = np.array([0.0, 0.3, 1.0])
    labels = bin_column(values, 10)
    assert labels[0] == 0
    assert labels[-1] == 9


def test_bins_four_over_zero_to_eight():
    edges = bin_edges(np.array([0.0, 8.0]), 4)
    assert apply_bins(np.array([2.0]), edges).tolist() == [1]


def test_bins_clip_outside_fitted_range():
    edges = bin_edges(np.array([0.0, 1.0]), 10)
    assert apply_bins(np.array([-5.0, 5.0]), edges).tolist() == [0, 9]


def test_bins_constant_column():
    with pytest.raises(PipelineError):
        bin_edges(np.array([1.0, 1.0]), 10)


# one-hot

def test_one_hot_definition():
    table = one_hot(labelled({"c": (C, ["A", "B", "C"])}), ["c"])
    assert table.column_names == ["c=A", "c=B", "c=C", "fraud_bool"]
    assert table.frame.iloc[1][["c=A", "c=B", "c=C"]].tolist() == [0.0, 1.0, 0.0]


def test_one_hot_single_value_vocabulary():
    table = one_hot(labelled({"c": (C, ["x", "x"])}), ["c"])
    assert table.frame["c=x"].tolist() == [1.0, 1.0]


def test_one_hot_column_count():
    sizes = {"payment_type": 5, "employment_status": 7, "housing_status": 7, "source": 3, "device_os": 5}
    n = 7
    columns = {name: (C, [f"v{i % size}" for i in range(n)]) for name, size in sizes.items()}
    table = one_hot(labelled(columns))
    assert len(table.column_names) == 27 + 1


def test_one_hot_unseen_value_is_all_zeros():
    table = one_hot(labelled({"c": (C, ["A", "Z"])}), ["c"], vocabularies={"c": ["A", "B"]})
    assert table.frame.iloc[1][["c=A", "c=B"]].tolist() == [0.0, 0.0]


# correlation

def test_correlation_examples():
    table = labelled({
        "x": (F, [1.0, 2.0, 3.0]),
        "y": (F, [1.0, 3.0, 2.0]),
        "z": (F, [-2.0, -4.0, -6.0]),
    })
    matrix = correlation_matrix(table)
    assert matrix.value("x", "x") == 1.0
    assert matrix.value("x", "y") == pytest.approx(0.5, abs=1e-12)
    assert matrix.value("x", "z") == pytest.approx(-1.0, abs=1e-12)
    np.testing.assert_array_equal(matrix.values, matrix.values.T)


def test_correlation_excludes_zero_variance(caplog):
    table = labelled({"x": (F, [1.0, 2.0, 3.0, 4.0]), "k": (F, [5.0] * 4)})
    with caplog.at_level(logging.WARNING, logger="fedfraud.data_pipeline"):
        matrix = correlation_matrix(table)
    assert "k" not in matrix.names
    assert "zero-variance" in caplog.text


def test_correlation_csv(tmp_path):
    matrix = correlation_matrix(labelled({"x": (F, [1.0, 2.0, 3.0]), "y": (F, [1.0, 3.0, 2.0])}))
    text = matrix.to_csv(tmp_path / "corr.csv").read_text()
    assert text.splitlines()[0] == ",x,y,fraud_bool"


# split and shard

def numbered(n):
    return ProcessedDataset(np.arange(n, dtype=float)[:, None], np.array([i % 2 for i in range(n)]), ("id",))


def test_split_sizes_and_partition():
    train, test = train_test_split(numbered(10), SplitSpec(train_fraction=0.8, seed=4))
    assert (train.n_samples, test.n_samples) == (8, 2)
    ids = sorted(train.features[:, 0].tolist() + test.features[:, 0].tolist())
    assert ids == list(range(10))


def test_split_deterministic():
    a, _ = train_test_split(numbered(30), SplitSpec(seed=9))
    b, _ = train_test_split(numbered(30), SplitSpec(seed=9))
    np.testing.assert_array_equal(a.features, b.features)


def test_split_keeps_both_sides_non_empty():
    train, test = train_test_split(numbered(2), SplitSpec(train_fraction=0.1))
    assert (train.n_samples, test.n_samples) == (1, 1)


def test_shard_sizes():
    parts = shard(numbered(10), 3, seed=1)
    assert sorted(p.n_samples for p in parts) == [3, 3, 4]
    ids = sorted(v for p in parts for v in p.features[:, 0].tolist())
    assert ids == list(range(10))


def test_shard_single_is_identity():
    data = numbered(7)
    (only,) = shard(data, 1, seed=5)
    np.testing.assert_array_equal(only.features, data.features)


def test_shard_too_few_rows():
    with pytest.raises(PipelineError):
        shard(numbered(2), 3)


# SMOTE

def test_smote_balances_counts():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(110, 3))
    y = np.array([0] * 100 + [1] * 10)
    out_x, out_y = smote(x, y, seed=1)
    assert int(np.sum(out_y == 0)) == 100
    assert int(np.sum(out_y == 1)) == 100
    np.testing.assert_array_equal(out_x[:110], x)


def test_smote_balanced_input_unchanged():
    x = np.arange(8, dtype=float).reshape(4, 2)
    y = np.array([0, 1, 0, 1])
    out_x, out_y = smote(x, y)
    np.testing.assert_array_equal(out_x, x)
    np.testing.assert_array_equal(out_y, y)


def test_smote_synthetic_rows_are_convex_combinations():
    rng = np.random.default_rng(123)
    for case in range(20):
        n_major, n_minor = int(rng.integers(20, 60)), int(rng.integers(2, 12))
        x = rng.normal(size=(n_major + n_minor, 4))
        y = np.array([0] * n_major + [1] * n_minor)
        out_x, out_y = smote(x, y, k_neighbors=3, seed=case)
        assert np.sum(out_y == 0) == np.sum(out_y == 1)
        minority = x[y == 1]
        lo = np.minimum(minority[:, None, :], minority[None, :, :])
        hi = np.maximum(minority[:, None, :], minority[None, :, :])
        for row in out_x[len(x):]:
            inside = np.all((row >= lo - 1e-12) & (row <= hi + 1e-12), axis=2)
            assert inside.any()


def test_smote_deterministic():
    rng = np.random.default_rng(4)
    x, y = rng.normal(size=(30, 2)), np.array([0] * 25 + [1] * 5)
    a, _ = smote(x, y, seed=3)
    b, _ = smote(x, y, seed=3)
    np.testing.assert_array_equal(a, b)


def test_smote_needs_two_minority_rows():
    with pytest.raises(PipelineError):
        smote(np.zeros((5, 2)), np.array([0, 0, 0, 0, 1]))


def test_build_client_shards_modes(dataset_factory):
    train = dataset_factory(n=90, seed=2, fraud_rate=0.3)
    per_shard = build_client_shards(train, 3, PipelineConfig(smote_mode="per_shard"), seed=1)
    assert all(s.class_counts()[0] == s.class_counts()[1] for s in per_shard)
    off = build_client_shards(train, 3, PipelineConfig(smote_mode="off"), seed=1)
    assert sum(s.n_samples for s in off) == 90
    pooled = build_client_shards(train, 3, PipelineConfig(smote_mode="pooled"), seed=1)
    counts = [sum(s.class_counts()[c] for s in pooled) for c in (0, 1)]
    assert counts[0] == counts[1]


# full chain

def fraud_like_table(n=60, seed=0):
    rng = np.random.default_rng(seed)
    income = rng.uniform(0.0, 1.0, n).tolist()
    income[3] = None
    return labelled({
        "income": (F, income),
        "velocity_6h": (F, rng.normal(100.0, 10.0, n).tolist()),
        "customer_age": (I, rng.integers(18, 80, n).tolist()),
        "payment_type": (C, [["AA", "AB", "AC"][i % 3] if i != 5 else None for i in range(n)]),
    }, n)


def test_preprocess_contract():
    dataset = preprocess(fraud_like_table())
    assert np.all(np.isfinite(dataset.features))
    assert "fraud_bool" not in dataset.feature_names
    assert "binned_income" in dataset.feature_names
    assert {"payment_type=AA", "payment_type=AB", "payment_type=AC"} <= set(dataset.feature_names)
    for key in ("imputation", "iqr_fences", "bin_edges", "vocabularies", "scaling"):
        assert key in dataset.metadata


def test_preprocess_standardizes_numeric_columns_only():
    dataset = preprocess(fraud_like_table())
    j = dataset.feature_names.index("velocity_6h")
    assert dataset.features[:, j].mean() == pytest.approx(0.0, abs=1e-9)
    k = dataset.feature_names.index("payment_type=AA")
    assert set(np.unique(dataset.features[:, k])) <= {0.0, 1.0}


def test_preprocess_deterministic():
    a = preprocess(fraud_like_table())
    b = preprocess(fraud_like_table())
    np.testing.assert_array_equal(a.features, b.features)
    assert a.feature_names == b.feature_names


def test_preprocessor_transform_reuses_fitted_statistics():
    pre = Preprocessor(PipelineConfig())
    fitted = pre.fit_transform(fraud_like_table(seed=1))
    again = pre.transform(fraud_like_table(seed=2))
    assert again.feature_names == fitted.feature_names
    assert again.n_samples == 60


def test_prepare_federated_data(synthetic_csv):
    path, schema = synthetic_csv
    data = prepare_federated_data(load_csv(path, schema), PipelineConfig(), SplitSpec(shard_count=3, seed=2))
    assert len(data.shards) == 3
    assert data.train.n_samples + data.test.n_samples == data.processed.n_samples
    assert all(s.class_counts()[0] == s.class_counts()[1] for s in data.shards)
    assert "fraud_bool" in data.correlation.names


def test_prepare_federated_data_fit_on_train(synthetic_csv):
    path, schema = synthetic_csv
    config = PipelineConfig(fit_on_train=True)
    data = prepare_federated_data(load_csv(path, schema), config, SplitSpec(seed=2))
    assert data.test.feature_names == data.train.feature_names
    assert data.test.n_samples > 0


def test_dataset_save_load(tmp_path, dataset_factory):
    data = dataset_factory(n=12, d=3)
    restored = ProcessedDataset.load(data.save(tmp_path / "d.json"))
    np.testing.assert_array_equal(restored.features, data.features)
    np.testing.assert_array_equal(restored.labels, data.labels)
    assert restored.feature_names == data.feature_names


def test_dataset_rejects_non_finite():
    with pytest.raises(PipelineError):
        ProcessedDataset(np.array([[np.nan]]), np.array([0]), ("x",))
