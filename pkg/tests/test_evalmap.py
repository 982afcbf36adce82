import itertools

import numpy as np
import pytest

from deepchange.evalmap import (ClassMapping, MappingError, apply_mapping,
                                binary_collapse, format_table, majority_map,
                                metrics)


class TestMajorityMap:
    def test_clear_majority(self):
        m = majority_map([0] * 10, [1] * 9 + [2], k=1, n_classes=3)
        assert m.class_of(0) == 1
        assert m.entries[0][2] == pytest.approx(0.9)

    def test_tie_prefers_lower_class(self):
        m = majority_map([0] * 10, [1] * 5 + [3] * 5, k=1, n_classes=4)
        assert m.class_of(0) == 1

    def test_empty_cluster_flagged_unchanged(self):
        m = majority_map([0, 0], [2, 2], k=3, n_classes=3)
        assert m.class_of(1) == 0
        assert m.entries[1][2] == 0.0

    def test_matches_brute_force_histogram(self, rng):
        assignments = rng.integers(0, 10, 500)
        labels = rng.integers(0, 5, 500)
        m = majority_map(assignments, labels, k=10, n_classes=5)
        for c in range(10):
            members = labels[assignments == c]
            if len(members) == 0:
                continue
            counts = np.bincount(members, minlength=5)
            assert m.class_of(c) == int(np.argmax(counts))


class TestApplyMapping:
    def test_identity_like(self):
        m = ClassMapping(4)
        for k in range(4):
            m.assign(k, k)
        a = np.array([0, 1, 2, 3, 2, 1])
        np.testing.assert_array_equal(apply_mapping(a, m), a)

    def test_constant_collapse(self):
        m = ClassMapping(4)
        for k in range(6):
            m.assign(k, 0)
        np.testing.assert_array_equal(apply_mapping([3, 5, 0], m), 0)

    def test_unmapped_id_raises(self):
        m = ClassMapping(4)
        m.assign(0, 1)
        with pytest.raises(MappingError, match=r"\[2\]"):
            apply_mapping([0, 2], m)

    def test_pure_clusters_recover_ground_truth(self, rng):
        labels = rng.integers(0, 4, 300)
        assignments = labels + 4 * rng.integers(0, 3, 300)  # pure split
        m = majority_map(assignments, labels, k=12, n_classes=4)
        np.testing.assert_array_equal(apply_mapping(assignments, m), labels)


class TestMetrics:
    def test_perfect_prediction(self, rng):
        t = rng.integers(0, 5, 200)
        r = metrics(t, t, 5, change_class_ids=(1, 2, 3, 4))
        present = np.bincount(t, minlength=5) > 0
        np.testing.assert_allclose(r.iou[present], 1.0)
        assert r.m_acc == pytest.approx(1.0)
        assert r.m_iou_change == pytest.approx(1.0)

    def test_binary_hand_case(self):
        # All predicted positive, half truly positive: IoU_pos = 0.5.
        t = np.array([0, 0, 1, 1])
        p = np.array([1, 1, 1, 1])
        r = metrics(p, t, 2, change_class_ids=(1,))
        assert r.iou[1] == pytest.approx(0.5)
        assert r.iou[0] == pytest.approx(0.0)

    def test_confusion_counts_sum(self, rng):
        t = rng.integers(0, 3, 77)
        p = rng.integers(0, 3, 77)
        r = metrics(p, t, 3, change_class_ids=(1, 2))
        assert r.confusion.sum() == 77

    def test_zero_support_classes_excluded_from_macc(self):
        t = np.array([0, 0, 1])
        p = np.array([0, 1, 1])
        r = metrics(p, t, 5, change_class_ids=(1, 2, 3, 4))
        assert r.m_acc == pytest.approx((0.5 + 1.0) / 2)

    def test_empty_input_rejected(self):
        with pytest.raises(ValueError):
            metrics([], [], 3, (1,))

    def test_permutation_invariance(self, rng):
        t = rng.integers(0, 4, 300)
        p = rng.integers(0, 4, 300)
        perm = np.array([2, 3, 0, 1])
        base = metrics(p, t, 4, change_class_ids=(1, 3))
        moved = metrics(perm[p], perm[t], 4,
                        change_class_ids=tuple(sorted(perm[[1, 3]])))
        assert moved.m_acc == pytest.approx(base.m_acc)
        assert moved.m_iou_change == pytest.approx(base.m_iou_change)
        np.testing.assert_allclose(np.sort(moved.iou), np.sort(base.iou))


class TestBinaryCollapse:
    def test_multiclass_perfect_implies_binary_perfect(self, rng):
        t = rng.integers(0, 5, 100)
        r = binary_collapse(t, t)
        assert r.m_acc == pytest.approx(1.0)

    def test_interchange_confusion_absorbed(self):
        t = np.array([0, 1, 2, 2, 1])
        p = np.array([0, 2, 1, 1, 2])  # swaps the two change classes
        r = binary_collapse(p, t)
        assert r.iou[1] == pytest.approx(1.0)
        assert r.iou[0] == pytest.approx(1.0)

    def test_matches_direct_binary_confusion(self, rng):
        t = rng.integers(0, 4, 500)
        p = rng.integers(0, 4, 500)
        r = binary_collapse(p, t)
        tb = (t != 0).astype(int)
        pb = (p != 0).astype(int)
        want = metrics(pb, tb, 2, change_class_ids=(1,))
        np.testing.assert_array_equal(r.confusion, want.confusion)


class TestMappingOptimality:
    def test_majority_is_optimal_constant_mapping(self, rng):
        # Exhaustive check on small instances: no per-cluster constant
        # mapping beats the majority rule.
        for trial in range(50):
            trial_rng = np.random.default_rng(trial)
            k, n_classes, n = 3, 3, 30
            assignments = trial_rng.integers(0, k, n)
            labels = trial_rng.integers(0, n_classes, n)
            m = majority_map(assignments, labels, k, n_classes)
            got = (apply_mapping(assignments, m) == labels).sum()
            best = max(
                sum((np.array(combo)[assignments] == labels))
                for combo in itertools.product(range(n_classes), repeat=k)
            )
            assert got == best
            # Accuracy equals the sum of per-cluster majority counts.
            maj_sum = sum(
                np.bincount(labels[assignments == c], minlength=n_classes).max()
                for c in range(k) if (assignments == c).any()
            )
            assert got == maj_sum


class TestMappingJson:
    def test_roundtrip(self):
        m = ClassMapping(7)
        m.assign(0, 3, "user")
        m.assign(1, 0, "majority", 0.93)
        back = ClassMapping.from_json(m.to_json())
        assert back.n_classes == 7
        assert back.entries[0][:2] == (3, "user")
        assert back.entries[1] == (0, "majority", 0.93)

    def test_schema_field_present(self):
        import json
        doc = json.loads(ClassMapping(3).to_json())
        assert doc["schema"] == 1
        assert doc["entries"] == []

    def test_rejects_bad_provenance(self):
        m = ClassMapping(3)
        with pytest.raises(ValueError):
            m.assign(0, 1, "guess")

    def test_rejects_out_of_range_class(self):
        with pytest.raises(ValueError):
            ClassMapping(3).assign(0, 3)


def test_format_table_mentions_all_classes():
    t = np.array([0, 1, 2, 0])
    r = metrics(t, t, 3, change_class_ids=(1, 2))
    text = format_table(r, ("unchanged", "new_building", "demolition"))
    for name in ("unchanged", "new_building", "demolition", "mAcc", "mIoU_ch"):
        assert name in text
