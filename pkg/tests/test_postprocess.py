#!/usr/bin/env python3
"""
Tests for connected components and the VS / cochlea post-processing rules.
"""

import sys
import os
import itertools
import unittest
from collections import deque

import numpy as np

# Add parent directory to path to import modules
sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from tests import synthetic
from utils.errors import ValidationError
from utils.postprocess import (
    connected_components,
    keep_largest,
    postprocess_pipeline,
    postprocess_with_report,
    remove_far_vs,
)
from utils.volume_core import LabelVolume, Spacing

SPACING = Spacing(0.46875, 0.46875, 1.5)
OFFSETS = [d for d in itertools.product((-1, 0, 1), repeat=3) if d != (0, 0, 0)]


def flood_fill_components(binary):
    """Plain BFS over the 26-neighborhood; returns (size, first linear index, centroid) per component."""
    nx, ny, nz = binary.shape
    seen = np.zeros_like(binary, dtype=bool)
    found = []
    # Visit in NIfTI order (x fastest) so the seed is the component's lowest linear index.
    for z in range(nz):
        for y in range(ny):
            for x in range(nx):
                if not binary[x, y, z] or seen[x, y, z]:
                    continue
                seen[x, y, z] = True
                queue, members = deque([(x, y, z)]), []
                while queue:
                    v = queue.popleft()
                    members.append(v)
                    for d in OFFSETS:
                        w = (v[0] + d[0], v[1] + d[1], v[2] + d[2])
                        if all(0 <= w[a] < binary.shape[a] for a in range(3)) and binary[w] and not seen[w]:
                            seen[w] = True
                            queue.append(w)
                centroid = tuple(np.mean(np.array(members, dtype=np.float64), axis=0))
                found.append((len(members), x + nx * (y + ny * z), centroid, members))
    found.sort(key=lambda c: (-c[0], c[1]))
    return found


def volume_with(*boxes, dims=(16, 16, 48)):
    data = np.zeros(dims, dtype=np.uint8)
    for label, (xs, ys, zs) in boxes:
        data[xs, ys, zs] = label
    return LabelVolume(data, SPACING)


COCHLEA = (2, (slice(2, 5), slice(2, 5), slice(9, 12)))  # centroid z = 10


def vs_at(z_center, x=slice(9, 12)):
    return (1, (x, slice(9, 12), slice(z_center - 1, z_center + 2)))


class TestConnectedComponents(unittest.TestCase):

    def test_against_flood_fill(self):
        rng = np.random.default_rng(0)
        for _ in range(30):
            dims = tuple(int(d) for d in rng.integers(1, 17, size=3))
            data = np.where(rng.random(dims) < 0.25, rng.integers(1, 3, size=dims), 0)
            mask = LabelVolume(data, SPACING)
            for label in (1, 2):
                stats, ids = connected_components(mask, label)
                expected = flood_fill_components(data == label)
                self.assertEqual([s.voxel_count for s in stats], [c[0] for c in expected])
                for s, (size, _, centroid, members) in zip(stats, expected):
                    np.testing.assert_allclose(s.centroid, centroid, atol=1e-9)
                    self.assertEqual(s.class_label, label)
                    self.assertTrue(all(ids[v] == s.id for v in members))
                self.assertEqual([s.id for s in stats], list(range(1, len(stats) + 1)))
                self.assertTrue(np.array_equal(ids > 0, data == label))
                self.assertEqual(ids.dtype, np.int32)

    def test_diagonal_neighbours_connect(self):
        data = np.zeros((3, 3, 3), dtype=np.uint8)
        data[0, 0, 0] = data[1, 1, 1] = data[2, 2, 2] = 1
        stats, _ = connected_components(LabelVolume(data, SPACING), 1)
        self.assertEqual(len(stats), 1)
        self.assertEqual(stats[0].voxel_count, 3)
        self.assertEqual(stats[0].centroid, (1.0, 1.0, 1.0))

    def test_equal_sizes_ordered_by_first_voxel(self):
        data = np.zeros((6, 1, 6), dtype=np.uint8)
        data[4, 0, 0] = 1  # linear index 4
        data[0, 0, 3] = 1  # linear index 18
        stats, ids = connected_components(LabelVolume(data, SPACING), 1)
        self.assertEqual(stats[0].centroid, (4.0, 0.0, 0.0))
        self.assertEqual(ids[0, 0, 3], 2)

    def test_empty_class(self):
        stats, ids = connected_components(LabelVolume(np.zeros((2, 2, 2), dtype=np.uint8), SPACING), 2)
        self.assertEqual(stats, [])
        self.assertFalse(ids.any())

    def test_label_out_of_range(self):
        with self.assertRaises(ValidationError):
            connected_components(LabelVolume(np.zeros((2, 2, 2), dtype=np.uint8), SPACING), 3)


class TestFarVsRule(unittest.TestCase):

    def test_offsets(self):
        near = volume_with(COCHLEA, vs_at(15))  # 5 slices from the cochlea
        self.assertTrue(np.array_equal(remove_far_vs(near).data, near.data))
        edge = volume_with(COCHLEA, vs_at(25))  # exactly 15: kept
        self.assertTrue(np.array_equal(remove_far_vs(edge).data, edge.data))
        far = volume_with(COCHLEA, vs_at(30))  # 20: removed
        self.assertFalse(np.any(remove_far_vs(far).data == 1))

    def test_only_far_components_go(self):
        mask = volume_with(COCHLEA, vs_at(15), vs_at(30, x=slice(0, 3)))
        cleaned, removed = postprocess_with_report(mask)
        self.assertEqual([r.rule for r in removed], ["far_from_cochlea"])
        self.assertAlmostEqual(removed[0].component.centroid[2], 30.0)
        self.assertEqual(int((cleaned.data == 1).sum()), 27)

    def test_reference_is_the_largest_cochlea(self):
        small_cochlea = (2, (slice(13, 14), slice(13, 14), slice(40, 41)))
        mask = volume_with(COCHLEA, small_cochlea, vs_at(36))
        # 26 slices from the large cochlea, 4 from the small one
        self.assertFalse(np.any(remove_far_vs(mask).data == 1))

    def test_no_cochlea_keeps_everything(self):
        mask = volume_with(vs_at(5), vs_at(40, x=slice(0, 3)))
        self.assertTrue(np.array_equal(remove_far_vs(mask).data, mask.data))

    def test_custom_z_max(self):
        mask = volume_with(COCHLEA, vs_at(15))
        self.assertFalse(np.any(remove_far_vs(mask, z_max=4).data == 1))


class TestKeepLargest(unittest.TestCase):

    def test_keeps_one_component_per_class(self):
        rng = np.random.default_rng(1)
        for _ in range(20):
            data = np.where(rng.random((8, 8, 8)) < 0.1, rng.integers(1, 3, size=(8, 8, 8)), 0)
            out = keep_largest(LabelVolume(data, SPACING), [1, 2])
            for label in (1, 2):
                self.assertLessEqual(len(connected_components(out, label)[0]), 1)

    def test_report_rule(self):
        mask = volume_with(COCHLEA, (2, (slice(14, 15), slice(14, 15), slice(20, 21))), vs_at(10, x=slice(9, 12)))
        cleaned, removed = postprocess_with_report(mask)
        self.assertEqual([(r.rule, r.component.class_label, r.component.voxel_count) for r in removed],
                         [("not_largest", 2, 1)])
        self.assertEqual(removed[0].to_dict()["rule"], "not_largest")
        self.assertEqual(int((cleaned.data == 2).sum()), 27)


class TestPipeline(unittest.TestCase):

    def test_synthetic_fixture(self):
        noisy = LabelVolume(synthetic.noisy_labels(), synthetic.SPACING)
        cleaned = postprocess_pipeline(noisy)
        expected = synthetic.ground_truth()
        expected[12:14, 12:14, 10] = 0
        self.assertTrue(np.array_equal(cleaned.data, expected))

    def test_idempotent_and_subset_preserving(self):
        rng = np.random.default_rng(2)
        for _ in range(100):
            dims = tuple(int(d) for d in rng.integers(4, 12, size=3))
            data = np.where(rng.random(dims) < 0.15, rng.integers(1, 3, size=dims), 0)
            mask = LabelVolume(data, SPACING)
            z_max = float(rng.integers(0, 6))
            once = postprocess_pipeline(mask, z_max=z_max)
            self.assertTrue(np.all((once.data == 0) | (once.data == data)))
            twice = postprocess_pipeline(once, z_max=z_max)
            self.assertTrue(np.array_equal(twice.data, once.data))

    def test_label_checks(self):
        mask = LabelVolume(np.zeros((2, 2, 2), dtype=np.uint8), SPACING)
        with self.assertRaises(ValidationError):
            postprocess_pipeline(mask, vs_label=1, cochlea_label=1)
        with self.assertRaises(ValidationError):
            postprocess_pipeline(mask, vs_label=3)


if __name__ == '__main__':
    unittest.main()
