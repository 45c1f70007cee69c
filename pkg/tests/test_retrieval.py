"""Index building, distance, search, and file-format checks."""

import numpy as np
import pytest

from fedsearch import autoencoder as ae
from fedsearch import datasets as ds
from fedsearch import retrieval as rt
from fedsearch.errors import ConfigError, DecodeError, DimensionError, FeatureIndexError


def make_index(vectors, labels=None, magnifications=None, ids=None, dim=None):
    n = len(vectors)
    labels = labels or ["benign"] * n
    magnifications = magnifications or ["40x"] * n
    ids = ids or [f"e{i}" for i in range(n)]
    dim = dim or len(vectors[0])
    entries = [
        rt.IndexEntry(
            id=ids[i],
            vector=np.asarray(vectors[i], dtype=np.float32),
            label=labels[i],
            magnification=magnifications[i],
            center="c",
            split="train",
        )
        for i in range(n)
    ]
    return rt.FeatureIndex(entries=tuple(entries), layout_id=bytes(8), feature_dim=dim)


class TestEuclidean:
    def test_three_four_five(self):
        assert rt.euclidean(np.array([0.0, 0.0]), np.array([3.0, 4.0])) == 5.0

    def test_self_distance_zero(self):
        x = np.random.default_rng(0).standard_normal(200)
        assert rt.euclidean(x, x) == 0.0

    def test_matches_scalar_loop(self):
        rng = np.random.default_rng(1)
        for _ in range(10):
            a = rng.standard_normal(200)
            b = rng.standard_normal(200)
            acc = 0.0
            for x, y in zip(a, b):
                acc += (x - y) ** 2
            assert rt.euclidean(a, b) == pytest.approx(acc**0.5, rel=1e-10)

    def test_length_mismatch(self):
        with pytest.raises(DimensionError):
            rt.euclidean(np.zeros(3), np.zeros(4))

    def test_accepts_feature_vectors(self):
        fv = ae.FeatureVector(values=np.array([3.0, 4.0]))
        assert rt.euclidean(fv, np.zeros(2)) == 5.0


class TestBuildIndex:
    def setup_method(self):
        self.config = ae.tiny_config(seed=3)
        self.model = ae.build_model(self.config)

    def write_images(self, tmp_path, count=4):
        rows = []
        rng = np.random.default_rng(7)
        for i in range(count):
            path = tmp_path / f"img{i}.png"
            ds.save_image(rng.random((3, 16, 16)), path)
            rows.append(
                ds.ImageRecord(
                    id=f"img{i}", path=path, label="benign" if i % 2 else "malignant",
                    magnification="40x", center="c", split="train",
                )
            )
        return ds.DatasetManifest(records=rows)

    def test_entry_per_image_with_bottleneck_dim(self, tmp_path):
        manifest = self.write_images(tmp_path, count=5)
        index = rt.build_index(self.model, manifest)
        assert len(index) == 5
        assert all(e.vector.shape == (self.config.bottleneck_dim,) for e in index.entries)
        assert [e.id for e in index.entries] == [r.id for r in manifest.records]

    def test_empty_manifest_rejected(self):
        manifest = ds.DatasetManifest(records=[])
        with pytest.raises(FeatureIndexError, match="empty"):
            rt.build_index(self.model, manifest)

    def test_rebuild_is_bit_identical(self, tmp_path):
        manifest = self.write_images(tmp_path)
        first = rt.serialize_index(rt.build_index(self.model, manifest))
        second = rt.serialize_index(rt.build_index(self.model, manifest))
        assert first == second

    def test_test_split_excluded(self, tmp_path):
        manifest = self.write_images(tmp_path, count=4)
        leak = ds.ImageRecord(
            id="leak", path=manifest.records[0].path, label="benign",
            magnification="40x", center="c", split="test",
        )
        manifest = ds.DatasetManifest(records=manifest.records + [leak])
        index = rt.build_index(self.model, manifest)
        assert all(e.id != "leak" for e in index.entries)

    def test_unreadable_image_names_path(self, tmp_path):
        record = ds.ImageRecord(
            id="x", path=tmp_path / "missing.png", label="benign",
            magnification="40x", center="c", split="train",
        )
        with pytest.raises(Exception, match="missing.png"):
            rt.build_index(self.model, ds.DatasetManifest(records=[record]))


class TestSearchVector:
    def test_top_two_of_three(self):
        index = make_index([[1.0, 0.0], [2.0, 0.0], [3.0, 0.0]])
        result = rt.search_vector(index, np.zeros(2), k=2, scenario="sen1", query_magnification="40x")
        assert [h.entry_id for h in result.hits] == ["e0", "e1"]
        assert [h.distance for h in result.hits] == [1.0, 2.0]

    def test_tie_breaks_to_earlier_insertion(self):
        index = make_index([[5.0, 0.0], [1.0, 0.0], [1.0, 0.0]])
        result = rt.search_vector(index, np.zeros(2), k=2, scenario="sen1", query_magnification="40x")
        assert [h.entry_id for h in result.hits] == ["e1", "e2"]

    def test_distances_non_decreasing(self):
        rng = np.random.default_rng(2)
        index = make_index(rng.standard_normal((50, 8)))
        result = rt.search_vector(index, rng.standard_normal(8), k=10, scenario="sen1",
                                  query_magnification="40x")
        distances = [h.distance for h in result.hits]
        assert distances == sorted(distances)

    def test_sen1_filters_magnification(self):
        index = make_index(
            [[0.1, 0.0], [0.2, 0.0], [0.3, 0.0], [0.4, 0.0]],
            magnifications=["40x", "100x", "40x", "100x"],
        )
        result = rt.search_vector(index, np.zeros(2), k=4, scenario="sen1", query_magnification="100x")
        assert all(h.magnification == "100x" for h in result.hits)
        assert [h.entry_id for h in result.hits] == ["e1", "e3"]

    def test_sen1_absent_magnification_is_error(self):
        index = make_index([[1.0, 0.0]])
        with pytest.raises(FeatureIndexError, match="empty"):
            rt.search_vector(index, np.zeros(2), k=1, scenario="sen1", query_magnification="400x")

    def test_sen1_requires_magnification(self):
        index = make_index([[1.0, 0.0]])
        with pytest.raises(ConfigError):
            rt.search_vector(index, np.zeros(2), k=1, scenario="sen1")

    def test_sen2_groups_are_homogeneous_and_ordered(self):
        rng = np.random.default_rng(3)
        mags = ["400x", "100x", "40x", "200x"] * 8
        index = make_index(rng.standard_normal((32, 4)), magnifications=mags)
        result = rt.search_vector(index, rng.standard_normal(4), k=5, scenario="sen2")
        assert [m for m, _ in result.groups] == ["40x", "100x", "200x", "400x"]
        assert all(len(hits) == 5 for _, hits in result.groups)
        for magnification, hits in result.groups:
            assert all(h.magnification == magnification for h in hits)
        assert result.hits == [h for _, hits in result.groups for h in hits]

    def test_query_own_id_never_returned(self):
        index = make_index([[0.0, 0.0], [1.0, 0.0]], ids=["query", "other"])
        result = rt.search_vector(index, np.zeros(2), k=2, scenario="sen1",
                                  query_magnification="40x", query_id="query")
        assert [h.entry_id for h in result.hits] == ["other"]

    def test_k_must_be_positive(self):
        index = make_index([[1.0, 0.0]])
        with pytest.raises(ConfigError):
            rt.search_vector(index, np.zeros(2), k=0, scenario="sen1", query_magnification="40x")

    def test_far_entries_prepended_do_not_change_top_k(self):
        rng = np.random.default_rng(4)
        vectors = rng.standard_normal((20, 6))
        query = rng.standard_normal(6)
        base = make_index(vectors)
        before = rt.search_vector(base, query, k=5, scenario="sen1", query_magnification="40x")
        far = [query + 1000.0 + i for i in range(3)]
        padded = make_index(list(far) + list(vectors),
                            ids=[f"far{i}" for i in range(3)] + [f"e{i}" for i in range(20)])
        after = rt.search_vector(padded, query, k=5, scenario="sen1", query_magnification="40x")
        assert [h.entry_id for h in before.hits] == [h.entry_id for h in after.hits]

    def test_matches_brute_force_oracle(self):
        # Exhaustive sort by the scalar distance with the same tie rule.
        rng = np.random.default_rng(5)
        n, dim = 300, 32
        vectors = rng.standard_normal((n, dim))
        vectors[17] = vectors[3]  # force exact ties
        vectors[120] = vectors[3]
        index = make_index(vectors)
        for trial in range(20):
            query = vectors[rng.integers(0, n)] if trial % 3 == 0 else rng.standard_normal(dim)
            expected_order = sorted(
                range(n),
                key=lambda i: (rt.euclidean(vectors[i], query), i),
            )
            for k in (1, 5, 10):
                result = rt.search_vector(index, query, k=k, scenario="sen1", query_magnification="40x")
                assert [h.entry_id for h in result.hits] == [f"e{i}" for i in expected_order[:k]]


class TestSearchWithModel:
    def test_layout_binding_enforced(self, tmp_path):
        model = ae.build_model(ae.tiny_config())
        other = ae.build_model(ae.tiny_config(bottleneck_dim=8))
        index = make_index(np.zeros((3, 16)), dim=16)  # layout bytes(8) != model layout
        with pytest.raises(FeatureIndexError, match="layout"):
            rt.search(index, model, np.zeros((3, 16, 16)), k=1, query_magnification="40x")
        assert other.layout_id != model.layout_id

    def test_search_encodes_and_ranks(self, tmp_path):
        model = ae.build_model(ae.tiny_config(seed=8))
        rng = np.random.default_rng(6)
        images = rng.random((6, 3, 16, 16)).astype(np.float32)
        entries = []
        for i, img in enumerate(images):
            vec = ae.encode(model, img).values
            entries.append(rt.IndexEntry(id=f"e{i}", vector=vec, label="benign",
                                         magnification="40x", center="c", split="train"))
        index = rt.FeatureIndex(entries=tuple(entries), layout_id=model.layout_id,
                                feature_dim=model.config.bottleneck_dim)
        result = rt.search(index, model, images[2], k=1, scenario="sen1", query_magnification="40x")
        assert result.hits[0].entry_id == "e2"
        assert result.hits[0].distance == pytest.approx(0.0, abs=1e-5)
        assert result.elapsed_seconds > 0


class TestIndexFormat:
    def make(self):
        rng = np.random.default_rng(7)
        return make_index(
            rng.standard_normal((5, 12)),
            labels=["benign", "malignant", "benign", "malignant", "benign"],
            magnifications=["40x", "100x", "200x", "400x", "40x"],
        )

    def test_round_trip_bit_exact(self):
        index = self.make()
        back = rt.deserialize_index(rt.serialize_index(index))
        assert back.layout_id == index.layout_id
        assert back.feature_dim == index.feature_dim
        assert len(back) == len(index)
        for a, b in zip(index.entries, back.entries):
            assert (a.id, a.label, a.magnification, a.center, a.split) == (
                b.id, b.label, b.magnification, b.center, b.split)
            assert a.vector.tobytes() == b.vector.tobytes()

    def test_file_round_trip(self, tmp_path):
        index = self.make()
        path = tmp_path / "i.fcix"
        rt.save_index(index, path)
        assert rt.serialize_index(rt.load_index(path)) == rt.serialize_index(index)

    def test_bad_magic(self):
        data = bytearray(rt.serialize_index(self.make()))
        data[0] ^= 0xFF
        with pytest.raises(DecodeError, match="magic"):
            rt.deserialize_index(bytes(data))

    def test_bad_version(self):
        data = bytearray(rt.serialize_index(self.make()))
        data[4] = 0xEE
        with pytest.raises(DecodeError, match="version"):
            rt.deserialize_index(bytes(data))

    def test_truncation_names_entry_ordinal(self):
        data = rt.serialize_index(self.make())
        with pytest.raises(DecodeError, match="entry 4"):
            rt.deserialize_index(data[:-6])

    def test_trailing_bytes_rejected(self):
        data = rt.serialize_index(self.make()) + b"\x00"
        with pytest.raises(DecodeError, match="trailing"):
            rt.deserialize_index(data)
