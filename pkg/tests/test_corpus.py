import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bundleforge.corpus import (
    BundleTable,
    BundlingCase,
    ConfigError,
    DataFormatError,
    ItemCorpus,
    PopClass,
    Scenario,
    Split,
    SynthConfig,
    build_eval_cases,
    compute_popularity,
    dataset_checksum,
    label_case,
    load_bundles,
    load_dataset,
    load_features,
    load_interactions,
    make_scenario_cases,
    make_training_case,
    random_holdout,
    save_bundles,
    save_dataset,
    save_features,
    split_bundles,
    synth_generate,
)
from bundleforge.numerics import SplitMix64


def write(path, text):
    path.write_text(text)
    return path


class TestInteractions:
    def test_dedup(self, tmp_path):
        D = load_interactions(write(tmp_path / "d.tsv", "u1\ti1\nu1\ti1\nu2\ti2\n"))
        assert D.nnz == 2
        assert D.to_csr().toarray().tolist() == [[1, 0], [0, 1]]
        assert D.counts.tolist() == [1, 1]

    def test_empty_file_warns(self, tmp_path):
        with pytest.warns(UserWarning):
            D = load_interactions(write(tmp_path / "d.tsv", ""))
        assert (D.n_users, D.n_items) == (0, 0)

    def test_malformed_line_number(self, tmp_path):
        with pytest.raises(DataFormatError) as exc:
            load_interactions(write(tmp_path / "d.tsv", "u1\ti1\nu2\n"))
        assert exc.value.line == 2

    def test_unknown_separator(self, tmp_path):
        with pytest.raises(DataFormatError, match="separator"):
            load_interactions(write(tmp_path / "d.tsv", "u1,i1\n"))

    def test_replica_dimensions(self, tmp_path):
        data = synth_generate(SynthConfig(n_items=100, n_users=150, n_bundles=60, n_themes=10, seed=4))
        save_dataset(tmp_path, data)
        back = load_dataset(tmp_path)
        assert back.interactions.n_users == data.interactions.n_users
        assert back.interactions.nnz == data.interactions.nnz
        assert back.corpus.n == 100


class TestBundles:
    def test_roundtrip_bit_exact(self, tmp_path):
        table = BundleTable(
            items=(np.array([0, 1]), np.array([1, 2, 3])), ids=("b0", "b1"), item_ids=("a", "b", "c", "d")
        )
        p = tmp_path / "b.tsv"
        save_bundles(p, table)
        first = p.read_bytes()
        back = load_bundles(p, {"a": 0, "b": 1, "c": 2, "d": 3})
        assert [x.tolist() for x in back.items] == [[0, 1], [1, 2, 3]]
        save_bundles(p, back)
        assert p.read_bytes() == first

    def test_small_bundle_dropped(self, tmp_path):
        with pytest.warns(UserWarning, match="fewer than 2"):
            t = load_bundles(write(tmp_path / "b.tsv", "b0\tx\nb0\tx\nb1\tx\nb1\ty\n"))
        assert t.ids == ("b1",)

    def test_invalid_table(self):
        with pytest.raises(DataFormatError):
            BundleTable(items=(np.array([1, 1]),), ids=("b",))


class TestFeatures:
    def test_header_shape(self, tmp_path):
        m = np.arange(32, dtype=np.float32).reshape(4, 8)
        save_features(tmp_path / "f.bndf", m)
        raw = (tmp_path / "f.bndf").read_bytes()
        assert raw[:4] == b"BNDF" and raw[4:12] == (4).to_bytes(4, "little") + (8).to_bytes(4, "little")
        assert load_features(tmp_path / "f.bndf").shape == (4, 8)
        np.testing.assert_array_equal(load_features(tmp_path / "f.bndf"), m)

    def test_csv_fallback(self, tmp_path):
        p = write(tmp_path / "f.csv", "item_id,a,b\n1,3,4\n0,1,2\n")
        assert load_features(p).tolist() == [[1, 2], [3, 4]]

    def test_truncated(self, tmp_path):
        save_features(tmp_path / "f.bndf", np.ones((3, 2)))
        raw = (tmp_path / "f.bndf").read_bytes()
        (tmp_path / "f.bndf").write_bytes(raw[:-4])
        with pytest.raises(DataFormatError):
            load_features(tmp_path / "f.bndf")

    def test_generated_corpus_checksum(self, tmp_path):
        data = synth_generate(SynthConfig(n_items=100, n_users=100, n_bundles=50, n_themes=10, seed=2))
        save_dataset(tmp_path / "a", data)
        save_dataset(tmp_path / "b", load_dataset(tmp_path / "a"))
        assert dataset_checksum(tmp_path / "a") == dataset_checksum(tmp_path / "b")

    def test_corpus_validation(self):
        with pytest.raises(DataFormatError):
            ItemCorpus(np.zeros((2, 3)), np.zeros((3, 3)), ("a", "b"))
        with pytest.raises(DataFormatError):
            ItemCorpus(np.zeros((2, 3)), np.zeros((2, 3)), ("a", "a"))


class TestPopularity:
    def test_example_counts(self):
        p = compute_popularity([5, 3, 1, 0, 0, 0, 0, 0, 0, 9], 0.3, 0.3)
        assert set(p.members(PopClass.HEAD)) == {9, 0, 1}
        # zero-count items 3..8 tie; descending count then ascending id puts 6, 7, 8 last
        assert set(p.members(PopClass.TAIL)) == {6, 7, 8}

    def test_equal_counts(self):
        p = compute_popularity([2] * 10, 0.2, 0.3)
        assert p.members(PopClass.HEAD).tolist() == [0, 1]
        assert p.members(PopClass.TAIL).tolist() == [7, 8, 9]

    def test_boundaries(self):
        assert (compute_popularity([1, 2, 3], 1.0, 0.0).classes == PopClass.HEAD).all()
        with pytest.raises(ConfigError):
            compute_popularity([1, 2, 3], 0.8, 0.3)
        with pytest.raises(ConfigError):
            compute_popularity([1, 2, 3], -0.1, 0.3)

    @given(st.lists(st.integers(0, 20), min_size=1, max_size=40), st.floats(0.0, 0.5), st.floats(0.0, 0.5))
    def test_invariants(self, counts, h, t):
        p = compute_popularity(counts, h, t)
        n = len(counts)
        assert sorted(p.rank.tolist()) == list(range(n))
        n_head = min(n, int(np.ceil(h * n - 1e-9)))
        assert (p.classes == PopClass.HEAD).sum() == n_head
        assert (p.classes == PopClass.TAIL).sum() == min(int(np.ceil(t * n - 1e-9)), n - n_head)
        brute = sorted(range(n), key=lambda i: (-counts[i], i))
        assert [brute.index(i) for i in range(n)] == p.rank.tolist()


class TestSplit:
    @pytest.mark.parametrize("n,sizes", [(10, (7, 2, 1)), (100, (70, 20, 10)), (1500, (1050, 300, 150))])
    def test_sizes(self, n, sizes):
        s = split_bundles(n, 3)
        assert tuple(int((s == k).sum()) for k in (Split.TRAIN, Split.TEST, Split.VAL)) == sizes

    def test_determinism(self):
        assert split_bundles(50, 9).tobytes() == split_bundles(50, 9).tobytes()
        assert split_bundles(50, 9).tobytes() != split_bundles(50, 10).tobytes()

    def test_empty(self):
        with pytest.raises(ValueError):
            split_bundles(0, 1)


class TestCases:
    def test_size_two_forced(self):
        rng = SplitMix64(0)
        for _ in range(20):
            c = make_training_case([4, 7], rng)
            assert len(c.query) == 1 and len(c.target) == 1

    def test_coverage(self):
        rng = SplitMix64(5)
        q, t = set(), set()
        for _ in range(10_000):
            c = make_training_case(list(range(10)), rng)
            q.update(c.query)
            t.update(c.target)
            assert 3 <= len(c.query) <= 8
        assert q == t == set(range(10))

    def test_deterministic(self):
        a = make_training_case(range(6), SplitMix64(3))
        b = make_training_case(range(6), SplitMix64(3))
        assert a == b

    def test_too_small(self):
        with pytest.raises(ValueError):
            make_training_case([1], SplitMix64(0))

    def test_case_invariants(self):
        with pytest.raises(ValueError):
            BundlingCase(0, (1,), (1,))
        with pytest.raises(ValueError):
            BundlingCase(0, (), (1,))

    def _profile(self):
        # items 0,1 HEAD; 2,3 MID; 4,5 TAIL
        return compute_popularity([10, 9, 5, 4, 1, 0], 1 / 3, 1 / 3)

    def test_pop_to_lt(self):
        cases = make_scenario_cases([0, 1, 4], self._profile(), Scenario.POP_TO_LT)
        assert len(cases) == 1
        assert cases[0].query == (0, 1) and cases[0].target == (4,)

    def test_mid_disqualifies(self):
        for sc in (Scenario.POP_TO_LT, Scenario.LT_TO_POP, Scenario.POP_TO_POP, Scenario.LT_TO_LT):
            assert make_scenario_cases([0, 2, 4], self._profile(), sc) == []

    def test_tail_only(self):
        p = self._profile()
        got = {sc for sc in Scenario if sc not in (Scenario.MIXED, Scenario.OVERALL)
               if make_scenario_cases([4, 5], p, sc)}
        assert got == {Scenario.LT_TO_LT}

    def test_overall_holdout(self):
        c = make_scenario_cases([0, 1, 2, 3], self._profile(), Scenario.OVERALL, bundle=3, seed=1)[0]
        assert set(c.query) | set(c.target) == {0, 1, 2, 3}
        assert c == make_scenario_cases([0, 1, 2, 3], self._profile(), Scenario.OVERALL, bundle=3, seed=1)[0]

    @settings(max_examples=50)
    @given(st.integers(2, 8), st.integers(0, 10_000), st.integers(0, 100))
    def test_random_holdout_partition(self, size, seed, bundle):
        items = list(range(100, 100 + size))
        q, t = random_holdout(items, seed, bundle)
        assert q and t and sorted(q + t) == items

    def test_labels(self):
        p = self._profile()
        assert label_case((0,), (4,), p) is Scenario.POP_TO_LT
        assert label_case((4,), (0,), p) is Scenario.LT_TO_POP
        assert label_case((0,), (2,), p) is Scenario.MIXED

    def test_build_eval_cases_ordering(self):
        table = BundleTable(items=(np.array([0, 4]), np.array([1, 5]), np.array([0, 2])), ids=("a", "b", "c"))
        out = build_eval_cases(table, [1, 0, 2], self._profile(), seed=0)
        assert [c.bundle for c in out[Scenario.POP_TO_LT]] == [0, 1]
        assert len(out[Scenario.OVERALL]) == 3

    def test_looser_ratio_never_fewer_cases(self):
        data = synth_generate(SynthConfig(seed=1))
        ids = np.arange(len(data.bundles))
        counts = []
        for r in (0.1, 0.2, 0.3, 0.4, 0.5):
            prof = compute_popularity(data.interactions, r, r)
            counts.append(len(build_eval_cases(data.bundles, ids, prof, [Scenario.POP_TO_LT])[Scenario.POP_TO_LT]))
        assert counts == sorted(counts)


class TestSynth:
    def test_zipf_mass(self):
        data = synth_generate(SynthConfig(seed=0))
        c = np.sort(data.interactions.counts)[::-1]
        assert c[:50].sum() > 0.5 * c.sum()

    def test_zipf_zero_is_flat(self):
        data = synth_generate(SynthConfig(n_items=100, n_users=1000, n_themes=10, zipf_exponent=0.0, seed=0))
        c = data.interactions.counts
        assert c.min() > 0 and c.max() / c.min() < 3

    def test_same_seed_same_files(self, tmp_path):
        cfg = SynthConfig(n_items=100, n_users=200, n_bundles=80, n_themes=10, seed=7)
        save_dataset(tmp_path / "a", synth_generate(cfg))
        save_dataset(tmp_path / "b", synth_generate(cfg))
        for name in ("interactions.tsv", "bundles.tsv", "text.bndf", "media.bndf", "idmap.tsv"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()

    def test_bundles_are_themed(self):
        data = synth_generate(SynthConfig(seed=3))
        theme = data.meta["theme"]
        assert all(len(set(theme[b].tolist())) == 1 for b in data.bundles.items)

    def test_content_carries_theme(self):
        data = synth_generate(SynthConfig(seed=3))
        theme, X = data.meta["theme"], data.corpus.text
        centroids = np.stack([X[theme == t].mean(0) for t in range(theme.max() + 1)])
        nearest = np.argmin(((X[:, None, :] - centroids[None]) ** 2).sum(-1), axis=1)
        assert (nearest == theme).mean() > 0.5

    def test_infeasible(self):
        with pytest.raises(ConfigError):
            synth_generate(SynthConfig(n_items=20, n_themes=10, bundle_size_range=(2, 5)))
        with pytest.raises(ConfigError):
            synth_generate(SynthConfig(bundle_size_range=(1, 3)))

    def test_bundle_sizes(self):
        data = synth_generate(SynthConfig(seed=2))
        sizes = {len(b) for b in data.bundles.items}
        assert sizes <= set(range(2, 6))
        assert len(data.bundles) == 1500
        assert all(len(set(b.tolist())) == len(b) for b in data.bundles.items)
