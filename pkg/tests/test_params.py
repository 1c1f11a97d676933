import numpy as np
import pytest

from sgbias.errors import DataError
from sgbias.params import ParamStore, read_array_doc, write_array_doc


def filled_store(seed=0):
    rng = np.random.default_rng(seed)
    store = ParamStore()
    store.create("eem.w_s", rng.normal(size=(4, 3)))
    store.create("sem.layer0.ln.gain", np.ones(5))
    store.create("base.cls1.b", rng.normal(size=7) * 1e-17)  # tiny values survive
    return store


def test_save_load_save_byte_identical(tmp_path):
    store = filled_store()
    p1 = tmp_path / "a.ckpt.json"
    p2 = tmp_path / "b.ckpt.json"
    store.save(p1)
    ParamStore.load(p1).save(p2)
    assert p1.read_bytes() == p2.read_bytes()


def test_roundtrip_values_exact(tmp_path):
    store = filled_store(1)
    path = tmp_path / "m.ckpt.json"
    store.save(path)
    loaded = ParamStore.load(path)
    assert loaded.names() == sorted(store.names())
    for name, t in store.items():
        assert np.array_equal(loaded[name].data, t.data)
        assert loaded[name].requires_grad


def test_duplicate_name_rejected():
    store = ParamStore()
    store.create("w", np.zeros(2))
    with pytest.raises(ValueError, match="already exists"):
        store.create("w", np.zeros(2))


def test_created_params_own_their_data():
    src = np.zeros(3)
    store = ParamStore()
    t = store.create("w", src)
    src[0] = 99.0
    assert t.data[0] == 0.0


def test_missing_file_raises_data_error(tmp_path):
    with pytest.raises(DataError, match="no such file"):
        ParamStore.load(tmp_path / "absent.ckpt.json")


def test_malformed_file_raises_data_error(tmp_path):
    path = tmp_path / "bad.ckpt.json"
    path.write_text("{not json")
    with pytest.raises(DataError, match="not a valid checkpoint"):
        ParamStore.load(path)


def test_schema_mismatch_raises(tmp_path):
    path = tmp_path / "old.ckpt.json"
    path.write_text('{"schema": "something.else", "params": {}}')
    with pytest.raises(DataError, match="schema mismatch"):
        ParamStore.load(path)


def test_array_doc_shape_check(tmp_path):
    path = tmp_path / "arrays.ckpt.json"
    write_array_doc(path, {"a": np.arange(6.0).reshape(2, 3)})
    back = read_array_doc(path)
    assert np.array_equal(back["a"], np.arange(6.0).reshape(2, 3))
    text = path.read_text().replace('"shape":[2,3]', '"shape":[2,4]')
    path.write_text(text)
    with pytest.raises(DataError, match="values for shape"):
        read_array_doc(path)
