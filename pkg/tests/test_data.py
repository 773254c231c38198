import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from ncoiv.data import ColumnSchema, Dataset, TuningParams, center_nco, load_dataset, save_dataset
from ncoiv.errors import SchemaError
from ncoiv.simulation import ScenarioConfig, generate

from conftest import make_dataset


def write(tmp_path, text, name="d.csv"):
    p = tmp_path / name
    p.write_text(text)
    return p


def test_load_small_csv_shapes(tmp_path):
    p = write(tmp_path, "y,t,z1\n1,0,1\n2,1,0\n3,1,1\n4,2,0\n5,2,1\n")
    d = load_dataset(p, ColumnSchema(y="y", t="t", z=("z1",), intercept=False))
    assert (d.n, d.p, d.K) == (5, 0, 1)
    d = load_dataset(p, ColumnSchema(y="y", t="t", z=("z1",)))
    assert (d.n, d.p, d.K) == (5, 1, 1)
    assert np.all(d.x[:, 0] == 1.0)
    assert d.m is None


def test_missing_column_is_named(tmp_path):
    p = write(tmp_path, "y,z1\n1,0\n2,1\n3,1\n")
    with pytest.raises(SchemaError, match="'t'"):
        load_dataset(p, ColumnSchema(y="y", t="t", z=("z1",)))


def test_nan_cell_cites_column_and_row(tmp_path):
    p = write(tmp_path, "y,t,z1,z2\n1,0,1,1\n2,1,0,2\n3,1,1,NaN\n4,2,0,1\n")
    with pytest.raises(SchemaError, match=r"'z2', row 3"):
        load_dataset(p, ColumnSchema(y="y", t="t", z=("z1", "z2")))


def test_non_numeric_cell(tmp_path):
    p = write(tmp_path, "y,t,z1\n1,0,1\n2,abc,0\n3,1,1\n")
    with pytest.raises(SchemaError, match=r"non-numeric.*'t', row 2"):
        load_dataset(p, ColumnSchema(y="y", t="t", z=("z1",)))


def test_too_few_rows(tmp_path):
    p = write(tmp_path, "y,t,z1,x1,x2\n1,0,1,1,2\n2,1,0,3,1\n3,1,1,0,0\n")
    with pytest.raises(SchemaError, match="too few"):
        load_dataset(p, ColumnSchema(y="y", t="t", z=("z1",), x=("x1", "x2")))


def test_m_column_is_centered_on_load(tmp_path):
    p = write(tmp_path, "y,t,z1,m\n1,0,1,1.6\n2,1,0,0.4\n3,1,1,1.0\n")
    d = load_dataset(p, ColumnSchema(y="y", t="t", z=("z1",), m="m"))
    np.testing.assert_allclose(d.m, [0.6, -0.6, 0.0], atol=1e-15)


def test_center_nco_examples():
    np.testing.assert_array_equal(center_nco(np.array([1.0, 1.0, 1.0])), [0.0, 0.0, 0.0])
    np.testing.assert_allclose(center_nco(np.array([1.6, 0.4])), [0.6, -0.6], atol=1e-15)


def test_center_nco_large_sample_mean_zero():
    d, lat = generate(ScenarioConfig(n=200_000, reps=1), 0)
    assert abs(d.m.mean()) < 1e-12
    # centered M = 0.6 (U - mean U)
    np.testing.assert_allclose(d.m, 0.6 * (lat.u - lat.u.mean()), atol=1e-12)


@given(arrays(np.float64, st.integers(1, 60), elements=st.floats(-1e6, 1e6)))
@settings(max_examples=200, deadline=None)
def test_center_nco_idempotent(m):
    once = center_nco(m)
    scale = max(1.0, np.abs(m).max())
    np.testing.assert_allclose(center_nco(once), once, atol=1e-15 * scale * 16)


def test_roundtrip_bit_exact(tmp_path, rng):
    d = make_dataset(rng, n=40, K=3, p=3)
    path = tmp_path / "rt.csv"
    schema = save_dataset(d, path)
    back = load_dataset(path, schema)
    for f in ("y", "t", "x", "z", "m"):
        assert np.array_equal(getattr(back, f), getattr(d, f)), f
    assert back.z_names == d.z_names


def test_dataset_rejects_bad_shapes():
    with pytest.raises(SchemaError):
        Dataset(y=np.ones(4), t=np.ones(3), x=np.zeros((4, 0)), z=np.ones((4, 1)))
    with pytest.raises(SchemaError, match="intercept"):
        Dataset(y=np.ones(4), t=np.ones(4), x=np.full((4, 1), 2.0), z=np.ones((4, 1)), intercept=True)
    with pytest.raises(SchemaError, match="non-finite"):
        Dataset(y=np.array([1, np.inf, 0, 1.0]), t=np.ones(4), x=np.zeros((4, 0)), z=np.ones((4, 1)))


def test_dataset_is_immutable(rng):
    d = make_dataset(rng)
    with pytest.raises(ValueError):
        d.y[0] = 1.0
    with pytest.raises(AttributeError):
        d.y = np.zeros(3)


def test_tuning_defaults_follow_sample_size():
    small = TuningParams.for_sample_size(200)
    large = TuningParams.for_sample_size(500)
    assert (small.kappa1, small.kappa2n, small.tau_n, small.w_threshold) == (10, 0.01, 0.01, 0.1)
    assert (large.kappa1, large.kappa2n, large.tau_n, large.w_threshold) == (10, 0.001, 0.001, 0.1)
    assert small.lambda_n == 0.1 and small.delta == 1.0
    with pytest.raises(ValueError):
        TuningParams(tau_n=0.0)
    with pytest.raises(ValueError):
        TuningParams(kappa1=-1.0)
