import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from attriweight.errors import ChecksumMismatch, DimensionMismatch, FormatError, InvalidArgument
from attriweight.features import (
    ProjectionSpec,
    build_projection,
    extract_features,
    load_store,
    save_store,
)
from attriweight.model import ParameterGrouping, make_spec, per_example_gradients

finite = st.floats(-1e3, 1e3, allow_nan=False)


def test_identity_projection_is_raw_gradient(small_mlp, blobs):
    proj = build_projection(small_mlp.grouping, 1, 0, kind="Identity")
    store = extract_features(small_mlp, blobs, blobs.ids[:10], proj)
    raw = per_example_gradients(small_mlp, blobs.features[:10], blobs.labels[:10])
    assert np.array_equal(store.data, raw.astype(np.float32))


def test_rademacher_entries(small_mlp):
    proj = build_projection(small_mlp.grouping, 3, 5)
    m = proj.matrix(0)
    assert set(np.unique(np.abs(m)).tolist()) == {1 / np.sqrt(3)}


def test_projection_deterministic(small_mlp, blobs):
    a = extract_features(small_mlp, blobs, blobs.ids, build_projection(small_mlp.grouping, 3, 5, clip=True))
    b = extract_features(small_mlp, blobs, blobs.ids, build_projection(small_mlp.grouping, 3, 5, clip=True))
    assert a.data.tobytes() == b.data.tobytes()


def test_target_larger_than_group_rejected(small_mlp):
    with pytest.raises(InvalidArgument):
        build_projection(small_mlp.grouping, 10_000, 0)
    clipped = build_projection(small_mlp.grouping, 10_000, 0, clip=True)
    assert [d_out for _, _, d_out in clipped.per_group_dims] == small_mlp.grouping.dims


def test_target_must_be_positive(small_mlp):
    with pytest.raises(InvalidArgument):
        build_projection(small_mlp.grouping, 0, 0)


def test_jl_dot_product_preserved():
    grouping = ParameterGrouping((("g", 512),))
    rng = np.random.default_rng(0)
    ok = 0
    for trial in range(200):
        proj = build_projection(grouping, 256, trial)
        u, v = rng.standard_normal(512), rng.standard_normal(512)
        pu, pv = proj.project(u)[0], proj.project(v)[0]
        ok += abs(pu @ pv - u @ v) / (np.linalg.norm(u) * np.linalg.norm(v)) < 0.2
    assert ok / 200 >= 0.95


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, 12, elements=finite), arrays(np.float64, 12, elements=finite), finite, finite)
def test_projection_is_linear(u, v, a, b):
    proj = build_projection(ParameterGrouping((("x", 5), ("y", 7))), 3, 1)
    lhs = proj.project(a * u + b * v)
    rhs = a * proj.project(u) + b * proj.project(v)
    scale = max(1.0, np.abs(lhs).max(), np.abs(rhs).max())
    assert np.max(np.abs(lhs - rhs)) <= 1e-12 * scale


def test_projection_keeps_groups_separate():
    proj = build_projection(ParameterGrouping((("x", 5), ("y", 7))), 3, 1)
    g = np.zeros(12)
    g[:5] = 1.0
    out = proj.project(g)[0]
    assert np.all(out[3:] == 0)


def test_identity_requires_equal_dims():
    with pytest.raises(InvalidArgument):
        ProjectionSpec((("x", 5, 3),), 0, "Identity")


def test_store_rows_in_id_order(small_mlp, blobs):
    ids = np.array([9, 2, 30, 4])
    store = extract_features(small_mlp, blobs, ids, build_projection(small_mlp.grouping, 2, 0, clip=True))
    assert store.example_ids.tolist() == [2, 4, 9, 30]
    assert store.data.shape == (4, store.dim)


def test_store_blocks_reassemble(small_mlp, blobs):
    store = extract_features(small_mlp, blobs, blobs.ids[:8], build_projection(small_mlp.grouping, 2, 0, clip=True))
    row = store.data[3]
    assert np.array_equal(np.concatenate([row[s] for s in store.block_slices()]), row)
    assert store.group_names == small_mlp.grouping.names


def test_grouping_mismatch_rejected(small_mlp, blobs):
    other = make_spec("Mlp1", blobs.dim, 3, hidden=2).grouping()
    with pytest.raises(DimensionMismatch):
        extract_features(small_mlp, blobs, blobs.ids[:2], build_projection(other, 1, 0))


def test_missing_id(small_mlp, blobs):
    with pytest.raises(KeyError):
        extract_features(small_mlp, blobs, [10_000], build_projection(small_mlp.grouping, 1, 0))


def test_explicit_features_need_labels(small_mlp, blobs):
    with pytest.raises(InvalidArgument):
        extract_features(small_mlp, blobs, [0], build_projection(small_mlp.grouping, 1, 0), features=blobs.features[:1])


@pytest.fixture
def store(small_mlp, blobs):
    return extract_features(small_mlp, blobs, blobs.ids[:20], build_projection(small_mlp.grouping, 2, 3, clip=True))


def test_store_round_trip_is_bitwise(store, tmp_path):
    path = tmp_path / "s.gfst"
    save_store(store, path)
    back = load_store(path)
    assert back.data.tobytes() == store.data.tobytes()
    assert back.group_layout == store.group_layout
    assert np.array_equal(back.example_ids, store.example_ids)
    save_store(back, tmp_path / "again.gfst")
    assert (tmp_path / "again.gfst").read_bytes() == path.read_bytes()


def test_truncated_store(store, tmp_path):
    path = tmp_path / "s.gfst"
    save_store(store, path)
    path.write_bytes(path.read_bytes()[:-9])
    with pytest.raises(FormatError):
        load_store(path)


def test_bad_magic(tmp_path):
    path = tmp_path / "s.gfst"
    path.write_bytes(b"NOPE" + bytes(40))
    with pytest.raises(FormatError):
        load_store(path)


def test_corrupted_payload_byte(store, tmp_path):
    path = tmp_path / "s.gfst"
    save_store(store, path)
    raw = bytearray(path.read_bytes())
    raw[-10] ^= 0xFF
    path.write_bytes(bytes(raw))
    with pytest.raises(ChecksumMismatch):
        load_store(path)
