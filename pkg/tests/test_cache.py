import numpy as np

from optctrl.cache import cache_path, cached_bilaplacian, load_inverse, save_inverse
from optctrl.data import bar_mesh
from optctrl.services.mesh import normalize_unit_sphere


def test_save_and_load(tmp_path, bar, bar_op):
    path = save_inverse(bar_op, tmp_path)
    assert path == cache_path(tmp_path, bar.content_hash())

    deflated, null_weight = load_inverse(path, bar_op.n, bar_op.epsilon, bar_op.mesh_hash)
    assert np.array_equal(deflated, bar_op.deflated_inv)
    assert null_weight == bar_op.null_weight


def test_mismatches_are_misses(tmp_path, bar_op):
    path = save_inverse(bar_op, tmp_path)
    assert load_inverse(path, bar_op.n, bar_op.epsilon * 2, bar_op.mesh_hash) is None
    assert load_inverse(path, bar_op.n + 1, bar_op.epsilon, bar_op.mesh_hash) is None
    assert load_inverse(path, bar_op.n, bar_op.epsilon, "0" * 64) is None
    assert load_inverse(tmp_path / "missing.optcinv", bar_op.n, bar_op.epsilon, bar_op.mesh_hash) is None


def test_corrupt_files_are_misses(tmp_path, bar_op):
    path = save_inverse(bar_op, tmp_path)
    data = path.read_bytes()

    path.write_bytes(b"NOTMAGIC" + data[8:])
    assert load_inverse(path, bar_op.n, bar_op.epsilon, bar_op.mesh_hash) is None

    path.write_bytes(data[:-8])
    assert load_inverse(path, bar_op.n, bar_op.epsilon, bar_op.mesh_hash) is None

    path.write_bytes(data[:20])
    assert load_inverse(path, bar_op.n, bar_op.epsilon, bar_op.mesh_hash) is None


def test_cached_operator_matches_fresh(tmp_path, bar, bar_op):
    first = cached_bilaplacian(bar, cache_dir=tmp_path)
    assert cache_path(tmp_path, bar.content_hash()).exists()
    second = cached_bilaplacian(bar, cache_dir=tmp_path)

    for op in (first, second):
        assert np.array_equal(op.deflated_inv, bar_op.deflated_inv)
        assert op.epsilon == bar_op.epsilon
        assert op.null_weight == bar_op.null_weight


def test_cache_keyed_by_mesh(tmp_path, bar):
    other = normalize_unit_sphere(bar_mesh(5, 2, 2))
    cached_bilaplacian(bar, cache_dir=tmp_path)
    cached_bilaplacian(other, cache_dir=tmp_path)
    assert len(list(tmp_path.glob("*.optcinv"))) == 2


def test_unwritable_cache_still_returns_operator(tmp_path, bar, bar_op):
    blocker = tmp_path / "not-a-dir"
    blocker.write_text("")

    op = cached_bilaplacian(bar, cache_dir=blocker)
    assert np.array_equal(op.deflated_inv, bar_op.deflated_inv)
    assert op.epsilon == bar_op.epsilon
    assert blocker.is_file()
