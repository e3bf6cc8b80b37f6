import numpy as np
import pytest

from splitnn.data import (
    CLASSIFICATION,
    ColumnStats,
    assign_folds,
    denormalize,
    fit_column_stats,
    impute_and_normalize,
    load_dataset,
    make_fold_plan,
    parse_schema,
)
from splitnn.errors import (
    EmptyDatasetError,
    MalformedDataError,
    SchemaError,
    ShapeMismatchError,
)

from conftest import make_dataset


def write(tmp_path, name, text):
    p = tmp_path / name
    p.write_text(text)
    return p


SCHEMA3 = """\
@task classification
@missing ? NA empty
column a numeric
column b numeric
column y label
"""


def test_schema_parse_roles(tmp_path):
    schema = parse_schema(write(tmp_path, "s.schema", SCHEMA3))
    assert schema.task == CLASSIFICATION
    assert [c.role for c in schema.columns] == ["numeric", "numeric", "label"]
    assert "" in schema.missing_markers and "?" in schema.missing_markers


def test_schema_missing_file(tmp_path):
    with pytest.raises(SchemaError, match="not found"):
        parse_schema(tmp_path / "absent.schema")


def test_schema_needs_label(tmp_path):
    bad = "@task classification\ncolumn a numeric\ncolumn b numeric\n"
    with pytest.raises(SchemaError, match="label"):
        parse_schema(write(tmp_path, "bad.schema", bad))


def test_schema_rejects_unknown_role(tmp_path):
    bad = "@task classification\ncolumn a wat\ncolumn y label\n"
    with pytest.raises(SchemaError, match="unknown column role"):
        parse_schema(write(tmp_path, "bad.schema", bad))


def test_load_single_missing_cell(tmp_path):
    schema = write(tmp_path, "s.schema", SCHEMA3)
    csv = write(tmp_path, "d.csv", "1,2,0\n3,?,1\n5,6,0\n")
    ds = load_dataset(csv, schema)
    assert ds.n_rows == 3 and ds.n_features == 2
    assert (~ds.mask).sum() == 1 and not ds.mask[1, 1]
    assert np.isnan(ds.features[1, 1])


def test_load_fully_observed_mask_all_true(tmp_path):
    schema = write(tmp_path, "s.schema", SCHEMA3)
    ds = load_dataset(write(tmp_path, "d.csv", "1,2,0\n3,4,1\n"), schema)
    assert ds.mask.all()


def test_load_malformed_cell_names_row_and_column(tmp_path):
    schema = write(tmp_path, "s.schema", SCHEMA3)
    csv = write(tmp_path, "d.csv", "1,2,0\n3,oops,1\n")
    with pytest.raises(MalformedDataError, match=r"line 2.*column b.*oops"):
        load_dataset(csv, schema)


def test_load_missing_label_drops_row_with_warning(tmp_path):
    schema = write(tmp_path, "s.schema", SCHEMA3)
    csv = write(tmp_path, "d.csv", "1,2,0\n3,4,?\n5,6,1\n")
    with pytest.warns(UserWarning, match="dropped 1 row"):
        ds = load_dataset(csv, schema)
    assert ds.n_rows == 2


def test_load_no_usable_rows(tmp_path):
    schema = write(tmp_path, "s.schema", SCHEMA3)
    csv = write(tmp_path, "d.csv", "1,2,?\n3,4,NA\n")
    with pytest.raises(EmptyDatasetError):
        load_dataset(csv, schema)


def test_load_binary_column_and_ignore(tmp_path):
    schema_text = """\
@task classification
@header yes
@missing empty
column id ignore
column status binary
column a numeric
column y label
"""
    schema = write(tmp_path, "s.schema", schema_text)
    csv = write(tmp_path, "d.csv", "id,status,a,y\n7,up,1.5,0\n8,down,2.5,1\n9,,3.5,0\n")
    ds = load_dataset(csv, schema)
    assert ds.feature_names == ("status", "a")
    # sorted tokens: down -> 0, up -> 1
    assert ds.features[0, 0] == 1.0 and ds.features[1, 0] == 0.0
    assert not ds.mask[2, 0]


def test_load_binary_rejects_three_values(tmp_path):
    schema_text = "@task classification\ncolumn s binary\ncolumn a numeric\ncolumn y label\n"
    schema = write(tmp_path, "s.schema", schema_text)
    csv = write(tmp_path, "d.csv", "x,1,0\ny,2,1\nz,3,0\n")
    with pytest.raises(MalformedDataError, match="binary"):
        load_dataset(csv, schema)


def test_per_column_missing_markers(tmp_path):
    schema_text = """\
@task classification
@missing ?
column a numeric missing=0
column b numeric
column y label
"""
    schema = write(tmp_path, "s.schema", schema_text)
    ds = load_dataset(write(tmp_path, "d.csv", "0,0,0\n1,2,1\n"), schema)
    assert not ds.mask[0, 0]  # 0 is a marker for column a only
    assert ds.mask[0, 1] and ds.features[0, 1] == 0.0


def test_pima_metadata_matches_published_table(data_dir):
    ds = load_dataset(data_dir / "pima.csv", data_dir / "pima.schema")
    assert ds.n_rows == 768 and ds.n_features == 8
    assert ds.missing_fraction == pytest.approx(0.1224, abs=0.005)


def test_raw_zero_marked_pima_equals_nan_marked_pima(data_dir):
    nan_marked = load_dataset(data_dir / "pima.csv", data_dir / "pima.schema")
    zero_marked = load_dataset(data_dir / "pima_uci_raw.csv", data_dir / "pima_uci_raw.schema")
    assert np.array_equal(nan_marked.mask, zero_marked.mask)
    assert np.array_equal(nan_marked.labels, zero_marked.labels)
    assert np.allclose(
        nan_marked.features[nan_marked.mask], zero_marked.features[zero_marked.mask]
    )


def test_column_stats_two_point_mean(tmp_path):
    schema = write(tmp_path, "s.schema", SCHEMA3)
    ds = load_dataset(write(tmp_path, "d.csv", "2,1,0\n?,1,1\n4,1,0\n"), schema)
    stats = fit_column_stats(ds, np.arange(3))
    assert stats.mean[0] == pytest.approx(3.0)
    assert stats.observed_count[0] == 2


def test_column_stats_fully_missing_column(tmp_path):
    schema = write(tmp_path, "s.schema", SCHEMA3)
    ds = load_dataset(write(tmp_path, "d.csv", "?,1,0\n?,2,1\n"), schema)
    stats = fit_column_stats(ds, np.arange(2))
    assert stats.mean[0] == 0.0 and stats.std[0] == 1.0 and stats.observed_count[0] == 0


def test_column_stats_row_restricted(tmp_path):
    schema = write(tmp_path, "s.schema", SCHEMA3)
    ds = load_dataset(write(tmp_path, "d.csv", "1,9,0\n2,9,1\n3,9,0\n4,9,1\n"), schema)
    stats = fit_column_stats(ds, [0, 1])
    assert stats.mean[0] == pytest.approx(1.5)


def test_column_stats_population_convention():
    ds = make_dataset(n=50, d=4, missing=0.0, seed=9)
    stats = fit_column_stats(ds, np.arange(50))
    assert np.allclose(stats.std, ds.features.std(axis=0))  # ddof=0


def test_impute_and_normalize_examples():
    ds = make_dataset(n=40, d=4, missing=0.2, seed=2)
    stats = fit_column_stats(ds, np.arange(40))
    z = impute_and_normalize(ds, stats)
    assert np.isfinite(z).all()
    assert (z[~ds.mask] == 0.0).all()
    # observed cell equal to the mean maps to 0
    j = 0
    row = np.argmax(ds.mask[:, j])
    ds.features[row, j] = stats.mean[j]
    z2 = impute_and_normalize(ds, stats)
    assert z2[row, j] == 0.0


def test_impute_z_score():
    stats = ColumnStats(
        mean=np.array([3.0, 0.0]), std=np.array([2.0, 1.0]),
        observed_count=np.array([5, 5]),
    )
    ds = make_dataset(n=4, d=2, missing=0.0, seed=1)
    ds.features[0, 0] = 5.0
    z = impute_and_normalize(ds, stats)
    assert z[0, 0] == pytest.approx(1.0)


def test_impute_shape_mismatch():
    ds = make_dataset(n=10, d=4, seed=0)
    stats = ColumnStats(mean=np.zeros(3), std=np.ones(3), observed_count=np.ones(3, dtype=np.int64))
    with pytest.raises(ShapeMismatchError):
        impute_and_normalize(ds, stats)


def test_round_trip_fully_observed():
    ds = make_dataset(n=50, d=5, missing=0.0, seed=7)
    stats = fit_column_stats(ds, np.arange(50))
    z = impute_and_normalize(ds, stats)
    back = denormalize(z, stats)
    assert np.allclose(back, ds.features, rtol=1e-9, atol=1e-9)


def test_stats_ignore_poisoned_holdout_rows():
    ds = make_dataset(n=60, d=5, seed=11)
    train = np.arange(40)
    poisoned = ds.features.copy()
    poisoned[40:] = np.where(ds.mask[40:], poisoned[40:] * 1e6, np.nan)
    clean_stats = fit_column_stats(ds, train)
    dirty_stats = fit_column_stats(ds.replace_features(poisoned, ds.mask), train)
    assert np.array_equal(clean_stats.mean, dirty_stats.mean)
    assert np.array_equal(clean_stats.std, dirty_stats.std)


def test_fold_plan_exact_stratification():
    ds = make_dataset(n=10, d=3, missing=0.0, seed=5)
    object.__setattr__(ds, "labels", np.array([0, 1] * 5, dtype=np.int64))
    plan = make_fold_plan(ds, 5, 5, seed=3)
    for fold in range(5):
        rows = plan.assignments == fold
        assert rows.sum() == 2
        assert ds.labels[rows].sum() == 1  # one sample per class


def test_fold_plan_deterministic(small_classification):
    a = make_fold_plan(small_classification, 5, 5, seed=42).assignments
    b = make_fold_plan(small_classification, 5, 5, seed=42).assignments
    assert np.array_equal(a, b)
    c = make_fold_plan(small_classification, 5, 5, seed=43).assignments
    assert not np.array_equal(a, c)


def test_fold_plan_partition_and_balance(small_classification):
    plan = make_fold_plan(small_classification, 5, 5, seed=0)
    sizes = np.bincount(plan.assignments, minlength=5)
    assert sizes.sum() == small_classification.n_rows
    assert sizes.max() - sizes.min() <= 1
    for cls in (0, 1):
        per_fold = np.bincount(plan.assignments[small_classification.labels == cls], minlength=5)
        assert per_fold.max() - per_fold.min() <= 1


def test_fold_plan_pima_sizes(data_dir):
    ds = load_dataset(data_dir / "pima.csv", data_dir / "pima.schema")
    plan = make_fold_plan(ds, 5, 5, seed=1)
    sizes = sorted(np.bincount(plan.assignments, minlength=5), reverse=True)
    # 768 = 154 + 154 + 154 + 153 + 153
    assert sizes == [154, 154, 154, 153, 153]


def test_fold_plan_small_class_warning():
    ds = make_dataset(n=12, d=3, missing=0.0, seed=5)
    labels = np.zeros(12, dtype=np.int64)
    labels[:3] = 1
    object.__setattr__(ds, "labels", labels)
    with pytest.warns(UserWarning, match="stratification incomplete"):
        make_fold_plan(ds, 5, 5, seed=0)


def test_fold_plan_preconditions(small_classification):
    with pytest.raises(ShapeMismatchError):
        make_fold_plan(small_classification, 1, 5, seed=0)


def test_assign_folds_regression_deterministic():
    labels = np.random.default_rng(0).standard_normal(33)
    a = assign_folds(labels, 4, seed=9, stratified=False)
    b = assign_folds(labels, 4, seed=9, stratified=False)
    assert np.array_equal(a, b)
    sizes = np.bincount(a, minlength=4)
    assert sizes.max() - sizes.min() <= 1
