import os
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from crossvae import data
from crossvae.data import DataError, SparseRatingMatrix

ML1M = Path(os.environ.get("CROSSVAE_ML1M", "data/ml-1m/ratings.dat"))


def write(tmp_path, name, text):
    path = tmp_path / name
    path.write_text(text)
    return path


@st.composite
def rating_matrices(draw, max_users=12, max_items=12, min_triples=0):
    nu = draw(st.integers(1, max_users))
    ni = draw(st.integers(1, max_items))
    cells = draw(st.lists(st.integers(0, nu * ni - 1), unique=True,
                          min_size=min(min_triples, nu * ni), max_size=nu * ni))
    cells = np.array(cells, dtype=np.int64)
    ratings = draw(st.lists(st.integers(1, 5), min_size=len(cells), max_size=len(cells)))
    return SparseRatingMatrix(nu, ni, cells // ni, cells % ni, np.array(ratings, dtype=float))


class TestSparseRatingMatrix:
    def test_rejects_out_of_range(self):
        with pytest.raises(DataError):
            SparseRatingMatrix(2, 2, [0, 2], [0, 1], [1.0, 2.0])

    def test_rejects_duplicates(self):
        with pytest.raises(DataError):
            SparseRatingMatrix(2, 2, [0, 0], [1, 1], [1.0, 2.0])

    def test_rejects_non_finite(self):
        with pytest.raises(DataError):
            SparseRatingMatrix(2, 2, [0], [1], [np.nan])

    @given(rating_matrices())
    def test_index_views_invert_triples(self, m):
        triples = set(m.triples)
        from_users = {(u, int(i), float(r)) for u in range(m.n_users) for i, r in zip(*m.by_user(u))}
        from_items = {(int(u), i, float(r)) for i in range(m.n_items) for u, r in zip(*m.by_item(i))}
        assert from_users == triples == from_items
        for u in range(m.n_users):
            items, _ = m.by_user(u)
            assert np.all(np.diff(items) > 0)

    def test_triple_arrays_are_read_only(self, small_matrix):
        with pytest.raises(ValueError):
            small_matrix.ratings[0] = 99.0


class TestLoadRatings:
    def test_double_colon_hand_trace(self, tmp_path):
        m = data.load_ratings(write(tmp_path, "r.dat", "1::10::4.0::t\n2::10::3.0::t\n"))
        assert (m.n_users, m.n_items) == (2, 1)
        assert m.triples == [(0, 0, 4.0), (1, 0, 3.0)]
        assert m.user_ids == ["1", "2"] and m.item_ids == ["10"]

    def test_duplicate_keeps_later_rating(self, tmp_path):
        m = data.load_ratings(write(tmp_path, "r.dat", "1::10::4::0\n1::11::2::0\n1::10::1::0\n"))
        assert sorted(m.triples) == [(0, 0, 1.0), (0, 1, 2.0)]

    def test_csv_with_header(self, tmp_path):
        m = data.load_ratings(write(tmp_path, "r.csv", "userId,movieId,rating,timestamp\n5,7,3.5,1\n6,7,2,1\n"), "csv")
        assert m.triples == [(0, 0, 3.5), (1, 0, 2.0)]

    def test_csv_without_header_is_rejected(self, tmp_path):
        with pytest.raises(DataError, match="line 1"):
            data.load_ratings(write(tmp_path, "r.csv", "5,7,3.5,1\n"), "csv")

    def test_amazon_has_no_header(self, tmp_path):
        m = data.load_ratings(write(tmp_path, "a.csv", "A1,B9,5.0,1\nA2,B9,4.0,2\n"), "amazon")
        assert m.triples == [(0, 0, 5.0), (1, 0, 4.0)]

    def test_bad_row_reports_line_number(self, tmp_path):
        with pytest.raises(DataError, match="line 2"):
            data.load_ratings(write(tmp_path, "r.dat", "1::10::4::0\n1::11::abc::0\n"))

    def test_short_row(self, tmp_path):
        with pytest.raises(DataError, match="line 1"):
            data.load_ratings(write(tmp_path, "r.dat", "1::10\n"))

    def test_empty_file(self, tmp_path):
        with pytest.raises(DataError):
            data.load_ratings(write(tmp_path, "r.dat", "\n"))

    def test_missing_file(self, tmp_path):
        with pytest.raises(FileNotFoundError, match="dataset not found"):
            data.load_ratings(tmp_path / "nope.dat")

    def test_unknown_format(self, tmp_path):
        with pytest.raises(DataError):
            data.load_ratings(write(tmp_path, "r.dat", "1::1::1::1\n"), "xml")

    @pytest.mark.skipif(not ML1M.exists(), reason="ML-1M ratings file not present")
    def test_ml1m_user_count(self):
        m = data.load_ratings(ML1M)
        assert m.n_users == 6040
        assert len(m) == 1_000_209


class TestFilterMinRatings:
    def test_min_one_is_identity_after_pruning(self, small_matrix):
        out = data.filter_min_ratings(small_matrix, 1)
        assert len(out) == len(small_matrix)
        assert np.all(out.user_degrees() >= 1) and np.all(out.item_degrees() >= 1)

    def test_cascade(self):
        # user 0: 9 ratings on items 0..8; users 1..10 rate items 9..18 (10 each)
        users = [0] * 9 + [u for u in range(1, 11) for _ in range(10)]
        items = list(range(9)) + [i for _ in range(1, 11) for i in range(9, 19)]
        m = SparseRatingMatrix(11, 19, users, items, np.ones(len(users)))
        out = data.filter_min_ratings(m, 10)
        assert out.n_users == 10 and out.n_items == 10 and len(out) == 100

    def test_empty_result(self, small_matrix):
        with pytest.raises(DataError):
            data.filter_min_ratings(small_matrix, 1000)

    def test_invalid_min(self, small_matrix):
        with pytest.raises(DataError):
            data.filter_min_ratings(small_matrix, 0)

    def test_random_50x50_against_recount(self):
        rng = np.random.default_rng(0)
        cells = rng.choice(2500, size=900, replace=False)
        m = SparseRatingMatrix(50, 50, cells // 50, cells % 50, np.ones(900))
        out = data.filter_min_ratings(m, 13)
        degu, degi = {}, {}
        for u, i, _ in out.triples:
            degu[u] = degu.get(u, 0) + 1
            degi[i] = degi.get(i, 0) + 1
        assert min(degu.values()) >= 13 and min(degi.values()) >= 13
        assert len(degu) == out.n_users < 50 and len(degi) == out.n_items < 50
        # slow fixed-point recomputation over raw pairs
        pairs = set(zip(m.users.tolist(), m.items.tolist()))
        while True:
            cu, ci = {}, {}
            for u, i in pairs:
                cu[u] = cu.get(u, 0) + 1
                ci[i] = ci.get(i, 0) + 1
            kept = {(u, i) for u, i in pairs if cu[u] >= 13 and ci[i] >= 13}
            if kept == pairs:
                break
            pairs = kept
        assert len(pairs) == len(out)

    @given(rating_matrices(), st.integers(1, 4))
    def test_degrees_meet_threshold(self, m, k):
        try:
            out = data.filter_min_ratings(m, k)
        except DataError:
            return
        assert out.user_degrees().min() >= k and out.item_degrees().min() >= k


class TestSplit:
    def test_sizes_for_100(self, small_matrix):
        m = data.synthetic_low_rank(10, 10, density=1.0)
        s = data.split(m, 0)
        assert (len(s.train), len(s.validation), len(s.test)) == (70, 15, 15)

    def test_same_seed_same_split(self, small_matrix):
        a, b = data.split(small_matrix, 3), data.split(small_matrix, 3)
        for (_, x), (_, y) in zip(a.parts(), b.parts()):
            assert x.triples == y.triples

    def test_union_and_disjointness(self):
        m = data.synthetic_low_rank(40, 50, density=0.5, seed=1)
        assert len(m) == 1000
        s = data.split(m, 9)
        parts = [set(p.triples) for _, p in s.parts()]
        assert set.union(*parts) == set(m.triples)
        assert sum(len(p) for p in parts) == len(m)

    @given(st.integers(10, 400), st.integers(0, 10))
    def test_proportions_within_one(self, n, seed):
        m = SparseRatingMatrix(1, n, np.zeros(n, dtype=int), np.arange(n), np.ones(n))
        s = data.split(m, seed)
        for frac, (_, part) in zip(data.SPLIT_FRACTIONS, s.parts()):
            assert abs(len(part) - frac * n) <= 1

    def test_too_small(self):
        m = SparseRatingMatrix(1, 5, [0] * 5, range(5), np.ones(5))
        with pytest.raises(DataError):
            data.split(m, 0)


class TestBinarize:
    def test_threshold_is_strict(self):
        m = SparseRatingMatrix(1, 3, [0, 0, 0], [0, 1, 2], [4.0, 3.0, 2.0])
        assert data.binarize(m).ratings.tolist() == [1.0, 0.0, 0.0]

    def test_all_fives(self):
        m = SparseRatingMatrix(2, 2, [0, 1], [0, 1], [5.0, 5.0])
        assert data.binarize(m).ratings.tolist() == [1.0, 1.0]

    @given(rating_matrices())
    def test_structure_preserved(self, m):
        b = data.binarize(m)
        np.testing.assert_array_equal(b.users, m.users)
        np.testing.assert_array_equal(b.items, m.items)
        np.testing.assert_array_equal(b.user_indptr, m.user_indptr)


class TestSubsample:
    def test_one_percent_of_ml1m_count(self):
        n = 1_000_209
        m = SparseRatingMatrix(1001, 1000, np.arange(n) // 1000, np.arange(n) % 1000, np.ones(n))
        train, rest = data.subsample(m, 0.01, 0)
        assert len(train) == 10_003
        assert len(train) + len(rest) == n

    @given(st.integers(2, 300), st.floats(0.01, 0.99), st.integers(0, 5))
    def test_sizes_add_up_and_repeat(self, n, frac, seed):
        m = SparseRatingMatrix(1, n, np.zeros(n, dtype=int), np.arange(n), np.ones(n))
        a, rest = data.subsample(m, frac, seed)
        b, _ = data.subsample(m, frac, seed)
        assert len(a) + len(rest) == n
        assert a.triples == b.triples
        assert set(a.triples).isdisjoint(rest.triples)

    def test_bad_fraction(self, small_matrix):
        for f in (0.0, 1.0, -0.5):
            with pytest.raises(DataError):
                data.subsample(small_matrix, f, 0)

    def test_sparse_split_halves_the_rest(self, small_matrix):
        s = data.split_sparse(small_matrix, 0.1, 0)
        assert len(s.train) == 7
        assert abs(len(s.validation) - len(s.test)) <= 1
        assert len(s.train) + len(s.validation) + len(s.test) == len(small_matrix)


class TestMakeBatches:
    def test_sizes(self):
        assert [len(b) for b in data.make_batches(5, 2, 0)] == [2, 2, 1]

    def test_single_batch(self):
        assert len(data.make_batches(100, 100, 0)) == 1

    @given(st.integers(0, 200), st.integers(1, 50), st.integers(0, 5))
    def test_partition(self, n, size, seed):
        batches = data.make_batches(n, size, seed)
        assert len(batches) == -(-n // size)
        flat = np.concatenate(batches) if batches else np.zeros(0, dtype=int)
        assert sorted(flat.tolist()) == list(range(n))
        assert all(np.array_equal(x, y) for x, y in zip(batches, data.make_batches(n, size, seed)))

    def test_invalid_size(self):
        with pytest.raises(DataError):
            data.make_batches(3, 0)


class TestManifests:
    def test_split_manifest_round_trip(self, small_matrix, tmp_path):
        s = data.split(small_matrix, 1)
        data.write_split_manifest(s, tmp_path / "split.csv")
        back = data.read_split_manifest(tmp_path / "split.csv", small_matrix.n_users, small_matrix.n_items)
        for (_, x), (_, y) in zip(s.parts(), back.parts()):
            assert x.triples == y.triples
        assert (tmp_path / "split.csv").read_text().splitlines()[0] == "user_idx,item_idx,rating,split"

    def test_id_map(self, tmp_path):
        data.write_id_map(["u7", "u3"], tmp_path / "ids.csv")
        assert (tmp_path / "ids.csv").read_text() == "raw_id,dense_idx\nu7,0\nu3,1\n"

    def test_bad_label(self, tmp_path):
        path = write(tmp_path, "m.csv", "user_idx,item_idx,rating,split\n0,0,1.0,holdout\n")
        with pytest.raises(DataError, match="line 2"):
            data.read_split_manifest(path)


class TestSynthetic:
    def test_shape_and_density(self, lowrank_matrix):
        assert (lowrank_matrix.n_users, lowrank_matrix.n_items) == (200, 300)
        assert len(lowrank_matrix) == 12_000

    def test_repeatable(self):
        a, b = data.synthetic_low_rank(seed=4), data.synthetic_low_rank(seed=4)
        np.testing.assert_array_equal(a.ratings, b.ratings)
