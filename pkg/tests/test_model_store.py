import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from streamtrain.model_store import (
    BrokenChainError,
    ChecksumError,
    ModelStore,
    ModelStoreError,
    deserialize_weights,
    serialize_weights,
)


def bits(arr):
    return np.ascontiguousarray(arr, dtype="<f8").view("<u8").ravel().tolist()


class TestSerialization:
    def test_round_trip_2d(self):
        w = np.arange(12.0).reshape(3, 4)
        assert (deserialize_weights(serialize_weights(w)) == w).all()

    def test_round_trip_special_values(self):
        w = np.array([0.0, -0.0, np.inf, -np.inf, np.nan, 5e-324, 1.7e308])
        back = deserialize_weights(serialize_weights(w))
        assert bits(back) == bits(w)

    @given(
        shape=st.sampled_from([(3,), (2, 5), (4, 3, 2)]),
        seed=st.integers(0, 2**32 - 1),
    )
    @settings(max_examples=25, deadline=None)
    def test_round_trip_random(self, shape, seed):
        w = np.random.default_rng(seed).normal(size=shape)
        back = deserialize_weights(serialize_weights(w))
        assert back.shape == w.shape
        assert bits(back) == bits(w)


class TestStoreLoad:
    def test_full_every_one_all_full(self, tmp_path):
        store = ModelStore(tmp_path, full_every=1)
        for i in range(4):
            art = store.store(np.full((2, 2), float(i)))
            assert art.kind == "full"

    def test_xor_identical_models_zero_delta(self, tmp_path):
        store = ModelStore(tmp_path, full_every=10, operator="xor")
        w = np.random.default_rng(0).normal(size=(8, 16))
        store.store(w)
        art = store.store(w.copy())
        assert art.kind == "delta"
        payload = (tmp_path / art.filename).read_bytes()
        body = payload[12 + 4 * 2 :]  # past the rank-2 MDMW header
        words = np.frombuffer(body, dtype="<u8")
        assert (words == 0).all()
        # compressibility: zero-word run length dominates
        assert (words == 0).mean() >= 0.99

    @pytest.mark.parametrize("operator", ["xor", "subtract"])
    def test_reconstruct_pair(self, tmp_path, operator):
        rng = np.random.default_rng(1)
        store = ModelStore(tmp_path / operator, full_every=10, operator=operator)
        a = rng.normal(size=(5, 7))
        b = rng.normal(size=(5, 7))
        store.store(a)
        store.store(b)
        assert bits(store.load(1)) == bits(b)
        assert bits(store.load(0)) == bits(a)

    @pytest.mark.parametrize("operator", ["xor", "subtract"])
    @pytest.mark.parametrize("chain_len", range(1, 9))
    def test_chain_reconstruction_bit_exact(self, tmp_path, operator, chain_len):
        rng = np.random.default_rng(chain_len)
        store = ModelStore(tmp_path / f"{operator}{chain_len}", full_every=chain_len + 1, operator=operator)
        models = []
        w = rng.normal(size=(3, 9))
        for _ in range(chain_len + 1):
            models.append(w.copy())
            store.store(w)
            w = w + rng.normal(size=w.shape) * rng.choice([0.0, 1e-18, 1.0], size=w.shape)
        for i, expected in enumerate(models):
            assert bits(store.load(i)) == bits(expected)

    def test_subtract_handles_extreme_values(self, tmp_path):
        store = ModelStore(tmp_path, full_every=5, operator="subtract")
        a = np.array([[1e308, -1e308, 1e-320, 0.0]])
        b = np.array([[-1e308, 1e308, 0.1, 1e-320]])
        store.store(a)
        store.store(b)
        assert bits(store.load(1)) == bits(b)

    def test_full_cadence(self, tmp_path):
        store = ModelStore(tmp_path, full_every=3)
        kinds = [store.store(np.ones((2, 2)) * i).kind for i in range(7)]
        assert kinds == ["full", "delta", "delta", "full", "delta", "delta", "full"]

    def test_checksum_mismatch(self, tmp_path):
        store = ModelStore(tmp_path, full_every=1)
        art = store.store(np.ones((2, 2)))
        path = tmp_path / art.filename
        data = bytearray(path.read_bytes())
        data[-1] ^= 0xFF
        path.write_bytes(bytes(data))
        with pytest.raises(ChecksumError):
            store.load(0)

    def test_broken_chain(self, tmp_path):
        store = ModelStore(tmp_path, full_every=4, operator="xor")
        store.store(np.ones((2, 2)))
        store.store(np.full((2, 2), 2.0))
        (tmp_path / store.artifacts[0].filename).unlink()
        with pytest.raises(BrokenChainError):
            store.load(1)

    def test_shape_mismatch(self, tmp_path):
        store = ModelStore(tmp_path, full_every=5)
        store.store(np.ones((2, 2)))
        with pytest.raises(ModelStoreError):
            store.store(np.ones((3, 2)))

    def test_reopen_manifest(self, tmp_path):
        store = ModelStore(tmp_path, full_every=2, operator="subtract")
        w0, w1 = np.ones((2, 3)), np.full((2, 3), 0.3)
        store.store(w0)
        store.store(w1)
        reopened = ModelStore.open(tmp_path)
        assert bits(reopened.load(1)) == bits(w1)

    @given(seed=st.integers(0, 2**32 - 1), operator=st.sampled_from(["xor", "subtract"]))
    @settings(max_examples=25, deadline=None)
    def test_random_round_trips(self, tmp_path_factory, seed, operator):
        tmp = tmp_path_factory.mktemp("ms")
        rng = np.random.default_rng(seed)
        store = ModelStore(tmp, full_every=int(rng.integers(1, 9)), operator=operator)
        models = [rng.normal(size=(4, 6)) * 10.0 ** int(rng.integers(-10, 10)) for _ in range(10)]
        for m in models:
            store.store(m)
        for i, m in enumerate(models):
            assert bits(store.load(i)) == bits(m)
