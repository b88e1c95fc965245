"""Tests for poisoning plans and trigger embedding"""

import shutil
import tempfile
import unittest
from pathlib import Path

import numpy as np

from pixelveil.data_io import ImageTensor, LabeledDataset
from pixelveil.errors import DimensionMismatchError, ManifestError, PatchBoundsError, PlanError
from pixelveil.imageops import horizontal_flip
from pixelveil.poison import (
    PatchSpec,
    PoisonPlan,
    apply_patch,
    load_plan,
    make_plan,
    poison_all_test,
    poison_dataset,
    poison_image,
    residual_map,
    save_plan,
)
from pixelveil.trigger import TriggerSpec, generate_trigger

SEED = "ab" * 32


def _single(value: int) -> ImageTensor:
    return ImageTensor(np.full((1, 1, 1), value, dtype=np.uint8))


class TestPoisonImage(unittest.TestCase):
    """Test saturating trigger addition"""

    def test_clamp_top(self):
        """Test 250 + 10 saturates at 255"""
        out = poison_image(_single(250), np.full((1, 1, 1), 10.0))
        self.assertEqual(int(out.pixels[0, 0, 0]), 255)

    def test_plain_addition(self):
        """Test 100 - 4 is 96"""
        out = poison_image(_single(100), np.full((1, 1, 1), -4.0))
        self.assertEqual(int(out.pixels[0, 0, 0]), 96)

    def test_clamp_bottom(self):
        """Test 2 - 10 saturates at 0"""
        out = poison_image(_single(2), np.full((1, 1, 1), -10.0))
        self.assertEqual(int(out.pixels[0, 0, 0]), 0)

    def test_fractional_rounding(self):
        """Test real-valued perturbations round half away from zero"""
        out = poison_image(_single(100), np.full((1, 1, 1), 2.5))
        self.assertEqual(int(out.pixels[0, 0, 0]), 103)
        out = poison_image(_single(100), np.full((1, 1, 1), -2.5))
        self.assertEqual(int(out.pixels[0, 0, 0]), 97)

    def test_support_only(self):
        """Test only pixels inside the trigger region change"""
        trigger = generate_trigger(TriggerSpec(seed=SEED, magnitude_m=8))
        image = ImageTensor(np.full((28, 28, 1), 128, dtype=np.uint8))
        out = poison_image(image, trigger)
        changed = out.pixels != image.pixels
        self.assertEqual(int(changed.sum()), trigger.m_effective)
        diff = out.pixels.astype(int) - image.pixels.astype(int)
        self.assertTrue(np.array_equal(diff, trigger.values.astype(int)))

    def test_flip_commutes(self):
        """Test flipping a poisoned image equals poisoning the flipped image"""
        rng = np.random.default_rng(4)
        for m in (10, 7.5, 255):
            trigger = generate_trigger(TriggerSpec(seed=SEED, magnitude_m=m))
            for _ in range(20):
                image = ImageTensor(rng.integers(0, 256, (28, 28, 1), dtype=np.uint8))
                self.assertEqual(horizontal_flip(poison_image(image, trigger)),
                                 poison_image(horizontal_flip(image), trigger))

    def test_shape_mismatch(self):
        """Test a trigger for another geometry is refused"""
        trigger = generate_trigger(TriggerSpec(seed=SEED, magnitude_m=8))
        with self.assertRaises(DimensionMismatchError):
            poison_image(ImageTensor(np.zeros((32, 32, 1), dtype=np.uint8)), trigger)


class TestMakePlan(unittest.TestCase):
    """Test poisoned-record selection"""

    def test_deterministic(self):
        """Test the same seed selects the same records"""
        a = make_plan(10, 0.5, 1, selection_seed=7)
        b = make_plan(10, 0.5, 1, selection_seed=7)
        self.assertEqual(a.poisoned_indices, b.poisoned_indices)
        self.assertEqual(len(a.poisoned_indices), 5)

    def test_zero_rate(self):
        """Test rate 0 selects nothing"""
        self.assertEqual(make_plan(100, 0.0, 1, 0).poisoned_indices, ())

    def test_cardinality(self):
        """Test 5% of 10000 gives 500 unique in-range indices"""
        plan = make_plan(10000, 0.05, 5, 3)
        self.assertEqual(len(plan.poisoned_indices), 500)
        self.assertEqual(len(set(plan.poisoned_indices)), 500)
        self.assertTrue(all(0 <= i < 10000 for i in plan.poisoned_indices))

    def test_bad_rate(self):
        """Test rates outside [0, 1] are refused"""
        with self.assertRaises(PlanError):
            make_plan(10, 1.5, 0, 0)

    def test_plan_checks_count(self):
        """Test a plan with the wrong number of indices is refused"""
        with self.assertRaises(PlanError):
            PoisonPlan(target_class=0, poison_rate=0.5, poisoned_indices=(1,),
                       selection_seed=0, dataset_size=10)

    def test_mask(self):
        """Test the boolean mask marks poisoned records"""
        plan = make_plan(20, 0.25, 0, 1)
        self.assertEqual(int(plan.mask.sum()), 5)
        self.assertTrue(all(plan.mask[i] for i in plan.poisoned_indices))


class TestPoisonDataset(unittest.TestCase):
    """Test dataset-level poisoning"""

    def setUp(self):
        rng = np.random.default_rng(0)
        self.dataset = LabeledDataset(
            rng.integers(20, 236, (1000, 28, 28, 1), dtype=np.uint8),
            rng.integers(0, 10, 1000), 10)
        self.trigger = generate_trigger(TriggerSpec(seed=SEED, magnitude_m=10))

    def test_zero_rate_unchanged(self):
        """Test an empty plan leaves the dataset as is"""
        plan = make_plan(len(self.dataset), 0.0, 5, 0)
        poisoned, _ = poison_dataset(self.dataset, self.trigger, plan)
        self.assertEqual(poisoned, self.dataset)

    def test_full_rate(self):
        """Test rate 1 relabels everything to the target"""
        plan = make_plan(len(self.dataset), 1.0, 5, 0)
        poisoned, _ = poison_dataset(self.dataset, self.trigger, plan)
        self.assertTrue(np.all(poisoned.labels == 5))

    def test_modified_count(self):
        """Test exactly the planned records differ from the input"""
        plan = make_plan(len(self.dataset), 0.05, 5, 0)
        poisoned, _ = poison_dataset(self.dataset, self.trigger, plan)
        changed = np.any(poisoned.images != self.dataset.images, axis=(1, 2, 3))
        self.assertEqual(int(changed.sum()), 50)
        self.assertEqual(sorted(np.flatnonzero(changed).tolist()), list(plan.poisoned_indices))
        self.assertEqual(len(poisoned), len(self.dataset))

    def test_size_mismatch(self):
        """Test a plan drawn for another dataset size is refused"""
        with self.assertRaises(PlanError):
            poison_dataset(self.dataset, self.trigger, make_plan(10, 0.5, 5, 0))

    def test_poison_all_test(self):
        """Test every test image is poisoned and relabeled"""
        poisoned = poison_all_test(self.dataset.take(3), self.trigger, 5)
        self.assertEqual(poisoned.labels.tolist(), [5, 5, 5])
        self.assertFalse(np.array_equal(poisoned.images, self.dataset.images[:3]))

    def test_poison_all_test_empty(self):
        """Test an empty test set stays empty"""
        empty = self.dataset.take(0)
        self.assertEqual(len(poison_all_test(empty, self.trigger, 5)), 0)


class TestPatch(unittest.TestCase):
    """Test the opaque patch baseline"""

    def test_single_pixel(self):
        """Test a 1×1 white patch on a black image"""
        image = ImageTensor(np.zeros((4, 4, 1), dtype=np.uint8))
        out = apply_patch(image, PatchSpec(1, 1, (255,)))
        self.assertEqual(int(out.pixels.sum()), 255)
        self.assertEqual(int(out.pixels[0, 0, 0]), 255)

    def test_whole_image(self):
        """Test a patch covering the image makes it constant"""
        image = ImageTensor(np.arange(16, dtype=np.uint8).reshape(4, 4))
        out = apply_patch(image, PatchSpec(4, 4, (7,)))
        self.assertTrue(np.all(out.pixels == 7))

    def test_yellow_corner(self):
        """Test a 3×3 yellow patch changes 27 channel values on a gray image"""
        image = ImageTensor(np.full((32, 32, 3), 128, dtype=np.uint8))
        patch = PatchSpec.bottom_right(3, (255, 255, 0), 32, 32)
        out = apply_patch(image, patch)
        self.assertEqual(int((out.pixels != image.pixels).sum()), 27)
        self.assertEqual(out.pixels[31, 31].tolist(), [255, 255, 0])

    def test_out_of_bounds(self):
        """Test a patch past the edge is refused"""
        image = ImageTensor(np.zeros((4, 4, 1), dtype=np.uint8))
        with self.assertRaises(PatchBoundsError):
            apply_patch(image, PatchSpec(2, 2, (1,), anchor=(3, 3)))


class TestPlanManifest(unittest.TestCase):
    """Test poison manifest persistence"""

    def setUp(self):
        self.temp_dir = Path(tempfile.mkdtemp())

    def tearDown(self):
        shutil.rmtree(self.temp_dir)

    def test_round_trip(self):
        """Test a saved plan loads back with its trigger reference"""
        plan = make_plan(50, 0.2, 3, 11)
        patch = PatchSpec(2, 2, (255,), anchor=(1, 1))
        path = self.temp_dir / "plan.json"
        save_plan(plan, path, trigger_manifest="t.json", trigger_kind="patch", patch=patch)
        manifest = load_plan(path)
        self.assertEqual(manifest.plan, plan)
        self.assertEqual(manifest.trigger_kind, "patch")
        self.assertEqual(manifest.trigger_manifest, "t.json")
        self.assertEqual(manifest.patch, patch)

    def test_missing_field(self):
        """Test a manifest without indices names the field"""
        path = self.temp_dir / "plan.json"
        path.write_text('{"target_class": 1, "poison_rate": 0.1, '
                        '"selection_seed": 0, "dataset_size": 10}')
        with self.assertRaises(ManifestError) as ctx:
            load_plan(path)
        self.assertEqual(ctx.exception.field, "poisoned_indices")


class TestResidualMap(unittest.TestCase):
    """Test the amplified difference image"""

    def test_gain(self):
        """Test differences are scaled and clipped"""
        clean = ImageTensor(np.array([[10, 10]], dtype=np.uint8))
        poisoned = ImageTensor(np.array([[13, 100]], dtype=np.uint8))
        out = residual_map(clean, poisoned, gain=10.0)
        self.assertEqual(out.pixels[0, :, 0].tolist(), [30, 255])


if __name__ == "__main__":
    unittest.main()
