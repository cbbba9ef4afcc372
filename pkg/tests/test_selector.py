import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from streamtrain.selector import (
    DuplicateSampleError,
    EmptyTriggerError,
    SelectionConfig,
    Selector,
    SelectorError,
    TriggerTrainingSet,
    presample,
    worker_share_bounds,
)


def quota_oracle(sizes, budget):
    """Brute-force quota computation: floor share each, remainder one at a
    time to larger groups first, water-fill leftovers from capped groups."""
    n = len(sizes)
    order = sorted(range(n), key=lambda g: (-sizes[g], g))
    quotas = [budget // n] * n
    for i in range(budget % n):
        quotas[order[i]] += 1
    leftover = sum(max(0, quotas[g] - sizes[g]) for g in range(n))
    quotas = [min(quotas[g], sizes[g]) for g in range(n)]
    while leftover > 0:
        moved = False
        for g in order:
            if leftover == 0:
                break
            if quotas[g] < sizes[g]:
                quotas[g] += 1
                leftover -= 1
                moved = True
        if not moved:
            break
    return quotas


def make_selector(tmp_path, **kwargs):
    return Selector(SelectionConfig(**kwargs), tmp_path / "sel")


def inform(selector, keys, labels=None, ts=None):
    keys = np.asarray(keys)
    labels = np.zeros(len(keys), dtype=np.int64) if labels is None else np.asarray(labels)
    ts = np.arange(len(keys)) if ts is None else np.asarray(ts)
    selector.inform_samples(keys, ts, labels)


class TestInformSamples:
    def test_class_counts(self, tmp_path):
        sel = make_selector(tmp_path)
        inform(sel, [0, 1, 2], labels=[7, 7, 7])
        assert sel.class_counts[7] == 3

    def test_pool_boundary(self, tmp_path):
        sel = make_selector(tmp_path, tail_triggers=0, partition_size=100)
        inform(sel, [0, 1, 2])
        sel.inform_trigger()
        inform(sel, [3, 4])
        tts = sel.inform_trigger()
        keys, _ = tts.read_partition(0)
        assert keys.tolist() == [3, 4]

    def test_large_inform_count(self, tmp_path):
        sel = make_selector(tmp_path)
        inform(sel, np.arange(100_000))
        assert sel.informed_count == 100_000

    def test_duplicate_key_rejected(self, tmp_path):
        sel = make_selector(tmp_path)
        inform(sel, [0, 1])
        with pytest.raises(DuplicateSampleError):
            inform(sel, [1])


class TestInformTrigger:
    def test_partition_count_1000_keys_size_100(self, tmp_path):
        sel = make_selector(tmp_path, partition_size=100)
        inform(sel, np.arange(1000))
        tts = sel.inform_trigger()
        assert tts.num_partitions == 10
        assert tts.partition_counts == [100] * 10

    def test_finetune_window_tail_triggers_zero(self, tmp_path):
        sel = make_selector(tmp_path, tail_triggers=0, partition_size=1000)
        inform(sel, np.arange(50))
        sel.inform_trigger()
        inform(sel, np.arange(50, 120))
        tts = sel.inform_trigger()
        keys, weights = tts.read_partition(0)
        assert keys.tolist() == list(range(50, 120))
        assert (weights == 1.0).all()

    def test_warmup_skips_presampling(self, tmp_path):
        sel = make_selector(
            tmp_path, tail_triggers=0, presampling="uniform",
            presampling_ratio=0.5, warmup_triggers=2, partition_size=1000,
        )
        sizes = []
        for r in range(3):
            inform(sel, np.arange(r * 100, r * 100 + 100))
            sizes.append(sel.inform_trigger().total_count)
        assert sizes == [100, 100, 50]

    def test_empty_window_raises(self, tmp_path):
        sel = make_selector(tmp_path)
        with pytest.raises(EmptyTriggerError):
            sel.inform_trigger()

    def test_infinite_window_accumulates(self, tmp_path):
        sel = make_selector(tmp_path, tail_triggers=None, partition_size=1000)
        inform(sel, np.arange(30))
        sel.inform_trigger()
        inform(sel, np.arange(30, 50))
        tts = sel.inform_trigger()
        assert tts.total_count == 50

    @given(
        pools=st.lists(st.integers(1, 40), min_size=1, max_size=6),
        tail=st.integers(0, 6),
    )
    @settings(max_examples=30, deadline=None)
    def test_window_equals_last_k_plus_one_pools(self, tmp_path_factory, pools, tail):
        tmp = tmp_path_factory.mktemp("win")
        sel = Selector(
            SelectionConfig(tail_triggers=tail, partition_size=10_000), tmp / "s"
        )
        start = 0
        pool_keys = []
        tts = None
        for size in pools:
            ks = list(range(start, start + size))
            pool_keys.append(ks)
            inform(sel, ks)
            start += size
            tts = sel.inform_trigger()
        expected = sorted(k for p in pool_keys[-(tail + 1):] for k in p)
        got = [k for p in range(tts.num_partitions) for k in tts.read_partition(p)[0].tolist()]
        assert got == expected

    def test_local_backend_matches_memory(self, tmp_path):
        out = []
        for backend in ("memory", "local"):
            sel = Selector(
                SelectionConfig(tail_triggers=1, backend=backend, partition_size=7),
                tmp_path / backend,
            )
            inform(sel, np.arange(20), labels=np.arange(20) % 3)
            sel.inform_trigger()
            inform(sel, np.arange(20, 35), labels=np.arange(15) % 3)
            tts = sel.inform_trigger()
            out.append(
                [tts.read_partition(p)[0].tolist() for p in range(tts.num_partitions)]
            )
        assert out[0] == out[1]


class TestPresample:
    def test_ratio_one_identity(self):
        keys = np.array([5, 3, 9], dtype=np.uint64)
        selected, weights = presample(keys, np.zeros(3), np.zeros(3), "uniform", 1.0, seed=0)
        assert selected.tolist() == [3, 5, 9]
        assert weights.tolist() == [1.0, 1.0, 1.0]

    def test_class_balanced_quota_one_each(self):
        keys = np.arange(4, dtype=np.uint64)
        labels = np.array([0, 0, 0, 1])
        selected, _ = presample(keys, labels, np.zeros(4), "class_balanced", 0.5, seed=1)
        got = labels[selected.astype(int)]
        assert sorted(got.tolist()) == [0, 1]

    def test_class_balanced_cap_and_redistribute(self):
        # classes {A:6, B:2}, budget 6 -> 4 A + 2 B
        keys = np.arange(8, dtype=np.uint64)
        labels = np.array([0] * 6 + [1] * 2)
        selected, _ = presample(keys, labels, np.zeros(8), "class_balanced", 0.75, seed=2)
        got = labels[selected.astype(int)]
        assert (got == 0).sum() == 4 and (got == 1).sum() == 2
        assert quota_oracle([6, 2], 6) == [4, 2]

    def test_trigger_balanced_uses_trigger_ids(self):
        keys = np.arange(8, dtype=np.uint64)
        triggers = np.array([0] * 6 + [1] * 2)
        selected, _ = presample(keys, np.zeros(8), triggers, "trigger_balanced", 0.75, seed=3)
        got = triggers[selected.astype(int)]
        assert (got == 0).sum() == 4 and (got == 1).sum() == 2

    def test_deterministic_and_sorted(self):
        keys = np.arange(100, dtype=np.uint64)
        a, _ = presample(keys, np.zeros(100), np.zeros(100), "uniform", 0.3, seed=9)
        b, _ = presample(keys, np.zeros(100), np.zeros(100), "uniform", 0.3, seed=9)
        assert a.tolist() == b.tolist()
        assert (np.diff(a.astype(np.int64)) > 0).all()

    def test_ratio_out_of_range(self):
        with pytest.raises(SelectorError):
            presample(np.arange(3, dtype=np.uint64), np.zeros(3), np.zeros(3), "uniform", 1.5, 0)

    @given(
        ratio=st.floats(0.01, 1.0),
        sizes=st.lists(st.integers(1, 30), min_size=1, max_size=5),
        policy=st.sampled_from(["uniform", "class_balanced", "trigger_balanced"]),
        seed=st.integers(0, 1000),
    )
    @settings(max_examples=80, deadline=None)
    def test_budget_exactness(self, ratio, sizes, policy, seed):
        labels = np.concatenate([np.full(s, i) for i, s in enumerate(sizes)])
        n = len(labels)
        keys = np.arange(n, dtype=np.uint64)
        selected, weights = presample(keys, labels, labels, policy, ratio, seed)
        assert len(selected) == int(np.floor(ratio * n))
        assert (weights > 0).all()

    @given(
        n_classes=st.integers(1, 6),
        per_class=st.integers(2, 20),
        seed=st.integers(0, 100),
    )
    @settings(max_examples=40, deadline=None)
    def test_class_balance_within_one(self, n_classes, per_class, seed):
        # every class holds >= ceil(budget / classes): counts differ by <= 1
        labels = np.repeat(np.arange(n_classes), per_class)
        n = len(labels)
        keys = np.arange(n, dtype=np.uint64)
        selected, _ = presample(keys, labels, labels, "class_balanced", 0.5, seed)
        counts = np.bincount(labels[selected.astype(int)], minlength=n_classes)
        assert counts.max() - counts.min() <= 1

    @given(
        sizes=st.lists(st.integers(0, 15), min_size=1, max_size=8).filter(lambda s: sum(s) > 0),
        data=st.data(),
    )
    @settings(max_examples=60, deadline=None)
    def test_quotas_match_oracle(self, sizes, data):
        from streamtrain.selector import _balanced_quotas

        budget = data.draw(st.integers(0, sum(sizes)))
        got = _balanced_quotas(np.asarray(sizes), budget).tolist()
        assert got == quota_oracle(sizes, budget)
        assert sum(got) == budget


class TestPartitionShares:
    def test_even_split(self, tmp_path):
        tts = TriggerTrainingSet.write(
            tmp_path, 0, np.arange(100, dtype=np.uint64), np.ones(100), partition_size=100
        )
        sizes = [len(tts.get_partition_share(0, w, 4)[0]) for w in range(4)]
        assert sizes == [25, 25, 25, 25]

    def test_uneven_split_concatenates(self, tmp_path):
        tts = TriggerTrainingSet.write(
            tmp_path, 0, np.arange(10, dtype=np.uint64), np.ones(10), partition_size=10
        )
        shares = [tts.get_partition_share(0, w, 3)[0].tolist() for w in range(3)]
        assert [len(s) for s in shares] == [4, 3, 3]
        assert [k for s in shares for k in s] == list(range(10))

    def test_out_of_range(self, tmp_path):
        tts = TriggerTrainingSet.write(
            tmp_path, 0, np.arange(5, dtype=np.uint64), np.ones(5), partition_size=5
        )
        with pytest.raises(SelectorError):
            tts.get_partition_share(1, 0, 2)
        with pytest.raises(SelectorError):
            tts.get_partition_share(0, 2, 2)

    def test_writer_threads_independent_of_workers(self, tmp_path):
        rng = np.random.default_rng(0)
        keys = rng.permutation(256).astype(np.uint64)
        weights = rng.random(256)
        tts = TriggerTrainingSet.write(
            tmp_path, 3, keys, weights, partition_size=100, writer_threads=8
        )
        loaded = TriggerTrainingSet.load(tmp_path, 3)
        for p in range(tts.num_partitions):
            expect_k = keys[p * 100 : (p + 1) * 100]
            expect_w = weights[p * 100 : (p + 1) * 100]
            got_k = np.concatenate([loaded.get_partition_share(p, w, 3)[0] for w in range(3)])
            got_w = np.concatenate([loaded.get_partition_share(p, w, 3)[1] for w in range(3)])
            assert got_k.tolist() == expect_k.tolist()
            assert got_w.tolist() == expect_w.tolist()

    @given(
        n=st.integers(1, 400),
        partition_size=st.integers(1, 120),
        writer_threads=st.integers(1, 9),
        workers=st.integers(1, 9),
        seed=st.integers(0, 2**31),
    )
    @settings(max_examples=50, deadline=None)
    def test_reassembly_equals_persisted(
        self, tmp_path_factory, n, partition_size, writer_threads, workers, seed
    ):
        tmp = tmp_path_factory.mktemp("tts")
        rng = np.random.default_rng(seed)
        keys = rng.integers(0, 2**63, size=n).astype(np.uint64)
        weights = rng.random(n) + 0.001
        tts = TriggerTrainingSet.write(tmp, 0, keys, weights, partition_size, writer_threads)
        back_k, back_w = [], []
        for p in range(tts.num_partitions):
            for w in range(workers):
                ks, ws = tts.get_partition_share(p, w, workers)
                back_k.append(ks)
                back_w.append(ws)
        assert np.concatenate(back_k).tolist() == keys.tolist()
        assert np.concatenate(back_w).tolist() == weights.tolist()

    def test_share_bounds_error(self):
        with pytest.raises(SelectorError):
            worker_share_bounds(10, 3, 3)
