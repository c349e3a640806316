import numpy as np
import pytest

from crossmodal.synthdata import Dataset, Split
from crossmodal.unitprobe import (
    ProbeError,
    TopList,
    consistency_of,
    summarize,
    top_from_activations,
)


def top(labels):
    return TopList(list(range(len(labels))), [0.0] * len(labels), list(labels))


def val_dataset(labels_by_mod):
    val = {m: Split(np.zeros((len(l), 1)), np.asarray(l)) for m, l in labels_by_mod.items()}
    return Dataset(3, {m: 1 for m in labels_by_mod}, val, val)


class TestConsistency:
    def test_all_agree(self):
        assert consistency_of({"a": top([1, 1, 2]), "b": top([1, 0, 1]), "c": top([1, 1, 1])}) == 1.0

    def test_partial(self):
        t = {"a": top([0, 0]), "b": top([0, 0]), "c": top([2, 2]), "d": top([1, 1])}
        assert consistency_of(t) == 0.5

    def test_tie_to_smallest_label(self):
        # majority within a list ties -> smallest label, so both majors are 0
        assert consistency_of({"a": top([1, 0]), "b": top([0, 1])}) == 1.0
        # plurality across modalities ties -> 1 of 2 agree
        assert consistency_of({"a": top([2]), "b": top([1])}) == 0.5

    def test_single_modality(self):
        assert consistency_of({"a": top([0, 1, 2])}) == 1.0


class TestTop:
    def test_order_and_ties(self):
        ds = val_dataset({"a": [0, 1, 2, 0]})
        acts = {"a": np.array([[0.5], [2.0], [0.5], [1.0]])}
        t = top_from_activations(acts, ds, 0, 3)["a"]
        assert t.example_ids == [1, 3, 0]
        assert t.labels == [1, 0, 0]
        assert t.activations == [2.0, 1.0, 0.5]

    def test_k_larger_than_rows(self):
        ds = val_dataset({"a": [0, 1]})
        t = top_from_activations({"a": np.array([[1.0], [2.0]])}, ds, 0, 5)["a"]
        assert t.example_ids == [1, 0]

    def test_errors(self):
        ds = val_dataset({"a": [0]})
        with pytest.raises(ProbeError):
            top_from_activations({"a": np.zeros((1, 2))}, ds, 2, 1)
        with pytest.raises(ProbeError):
            top_from_activations({"a": np.zeros((1, 2))}, ds, 0, 0)


def test_summarize():
    s = summarize(np.array([0.2, 0.4, 1.0, 1.0]))
    assert s["units"] == 4
    assert s["mean"] == pytest.approx(0.65)
    assert s["median"] == pytest.approx(0.7)
    assert sum(s["histogram"]) == 4 and s["histogram"][-1] == 2
    assert s["bin_edges"][0] == 0.0 and s["bin_edges"][-1] == 1.0
