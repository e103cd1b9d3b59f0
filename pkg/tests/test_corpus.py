import json

import numpy as np
import pytest
from hypothesis import given, strategies as st

from conftest import make_pair, tiny_store
from mmentail.corpus import (ClaimDocumentPair, DataFormatError, Dataset,
                             ImageFeatureStore, Label3, Label5, LABELS3,
                             LABELS5, class_counts, extract_domain,
                             load_dataset, load_feature_store,
                             map_5way_to_3way, save_dataset,
                             save_feature_store)

text = st.text(
    alphabet=st.characters(blacklist_categories=("Cs",), blacklist_characters="\n\r"),
    min_size=1, max_size=30).filter(lambda s: s.strip())


class TestLabels:
    def test_canonical_orders(self):
        assert [l.value for l in LABELS5] == [
            "Support_Multimodal", "Support_Text", "Insufficient_Multimodal",
            "Insufficient_Text", "Refute"]
        assert [l.value for l in LABELS3] == ["support", "refute", "insufficient"]

    def test_collapse_is_total(self):
        collapsed = {map_5way_to_3way(label) for label in LABELS5}
        assert collapsed == set(Label3)

    def test_collapse_assignments(self):
        assert map_5way_to_3way(Label5.SUPPORT_TEXT) is Label3.SUPPORT
        assert map_5way_to_3way(Label5.INSUFFICIENT_MULTIMODAL) is Label3.INSUFFICIENT
        assert map_5way_to_3way(Label5.REFUTE) is Label3.REFUTE


class TestDomain:
    @pytest.mark.parametrize("url,expected", [
        ("https://www.Newswire.Example/a/b.jpg", "newswire.example"),
        ("http://photostock.example:8080/x", "photostock.example"),
        ("https://sub.dailyfeed.example/p?q=1", "sub.dailyfeed.example"),
        ("", ""),
        ("not a url", ""),
        ("https://", ""),
    ])
    def test_cases(self, url, expected):
        assert extract_domain(url) == expected

    @given(st.text(max_size=60))
    def test_total_on_arbitrary_strings(self, s):
        out = extract_domain(s)
        assert isinstance(out, str)
        assert out == out.lower()


class TestDatasetIO:
    def test_round_trip(self, tmp_path, hand_dataset):
        path = tmp_path / "ds.jsonl"
        save_dataset(hand_dataset, str(path))
        back = load_dataset(str(path), split_name="hand")
        assert back.pairs == hand_dataset.pairs
        assert back.split_name == "hand"

    def test_duplicate_id_rejected(self, tmp_path):
        path = tmp_path / "dup.jsonl"
        save_dataset(Dataset([make_pair("same"), make_pair("same")]), str(path))
        with pytest.raises(DataFormatError, match="duplicate id"):
            load_dataset(str(path))

    def test_bad_json_reports_line(self, tmp_path):
        path = tmp_path / "bad.jsonl"
        rec = json.dumps(make_pair().to_record())
        path.write_text(rec + "\n{not json\n")
        with pytest.raises(DataFormatError, match="line 2"):
            load_dataset(str(path))

    def test_unknown_field_rejected(self, tmp_path):
        rec = make_pair().to_record()
        rec["surprise"] = "x"
        path = tmp_path / "extra.jsonl"
        path.write_text(json.dumps(rec) + "\n")
        with pytest.raises(DataFormatError, match="unknown fields"):
            load_dataset(str(path))

    def test_unknown_label_rejected(self, tmp_path):
        rec = make_pair().to_record()
        rec["label"] = "Mostly_True"
        path = tmp_path / "lab.jsonl"
        path.write_text(json.dumps(rec) + "\n")
        with pytest.raises(DataFormatError, match="unknown label"):
            load_dataset(str(path))

    def test_missing_claim_text_rejected(self, tmp_path):
        rec = make_pair().to_record()
        rec["claim_text"] = "   "
        path = tmp_path / "m.jsonl"
        path.write_text(json.dumps(rec) + "\n")
        with pytest.raises(DataFormatError, match="claim_text"):
            load_dataset(str(path))

    def test_unlabeled_pair_loads_as_none(self, tmp_path):
        rec = make_pair().to_record()
        rec["label"] = None
        path = tmp_path / "n.jsonl"
        path.write_text(json.dumps(rec) + "\n")
        assert load_dataset(str(path))[0].label is None

    def test_store_validation_names_missing_image(self, tmp_path, hand_dataset):
        ds_path = tmp_path / "ds.jsonl"
        save_dataset(hand_dataset, str(ds_path))
        store = tiny_store(ids=("qi0",))
        feat_path = tmp_path / "f.features"
        save_feature_store(store, str(feat_path))
        with pytest.raises(DataFormatError, match="'di0'"):
            load_dataset(str(ds_path), feature_store_path=str(feat_path))

    @given(st.lists(
        st.tuples(text, text, st.sampled_from(list(Label5) + [None])),
        min_size=1, max_size=6))
    def test_round_trip_property(self, tmp_path_factory, rows):
        pairs = [make_pair(f"p{i}", claim_text=c, doc_text=d, label=lab)
                 for i, (c, d, lab) in enumerate(rows)]
        path = tmp_path_factory.mktemp("rt") / "ds.jsonl"
        save_dataset(Dataset(pairs), str(path))
        assert load_dataset(str(path)).pairs == pairs


class TestClassCounts:
    def test_counts(self, hand_dataset):
        counts = class_counts(hand_dataset)
        assert counts[Label5.SUPPORT_MULTIMODAL] == 1
        assert counts[Label5.REFUTE] == 1
        assert counts[Label5.SUPPORT_TEXT] == 0
        assert sum(counts.values()) == len(hand_dataset)


class TestFeatureStore:
    def test_round_trip_exact(self, tmp_path):
        rng = np.random.default_rng(3)
        store = ImageFeatureStore(6)
        for i in range(5):
            store.add(f"img{i}", rng.standard_normal(6) * 10.0 ** float(rng.integers(-8, 8)))
        path = tmp_path / "s.features"
        save_feature_store(store, str(path))
        back = load_feature_store(str(path))
        assert back.dim == 6
        assert back.ids() == store.ids()
        for image_id in store.ids():
            np.testing.assert_array_equal(back[image_id], store[image_id])

    def test_dim_mismatch_rejected(self):
        store = ImageFeatureStore(3)
        with pytest.raises(DataFormatError, match="expected 3 floats"):
            store.add("x", np.zeros(4))

    def test_non_finite_rejected(self):
        store = ImageFeatureStore(2)
        with pytest.raises(DataFormatError, match="non-finite"):
            store.add("x", np.array([1.0, np.nan]))

    def test_missing_id_names_it(self):
        with pytest.raises(KeyError, match="ghost"):
            tiny_store()["ghost"]

    def test_bad_header_rejected(self, tmp_path):
        path = tmp_path / "bad.features"
        path.write_text("dim 4\n")
        with pytest.raises(DataFormatError, match="l="):
            load_feature_store(str(path))

    def test_short_row_reports_line(self, tmp_path):
        path = tmp_path / "short.features"
        path.write_text("l=3\nok\t1 2 3\nbad\t1 2\n")
        with pytest.raises(DataFormatError, match="line 3"):
            load_feature_store(str(path))

    @given(st.integers(1, 8), st.integers(1, 5), st.integers(0, 2 ** 32 - 1))
    def test_round_trip_property(self, tmp_path_factory, dim, count, seed):
        rng = np.random.default_rng(seed)
        store = ImageFeatureStore(dim)
        for i in range(count):
            store.add(f"i{i}", rng.standard_normal(dim))
        path = tmp_path_factory.mktemp("fs") / "s.features"
        save_feature_store(store, str(path))
        back = load_feature_store(str(path))
        for image_id in store.ids():
            np.testing.assert_array_equal(back[image_id], store[image_id])
