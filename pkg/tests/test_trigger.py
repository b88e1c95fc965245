"""Tests for keyed trigger generation"""

import json
import shutil
import tempfile
import unittest
from dataclasses import replace
from pathlib import Path

import numpy as np
from Crypto.Cipher import AES

from pixelveil.data_io import NormStats
from pixelveil.errors import (
    ChannelMismatchError,
    InfeasibleLayoutError,
    InvalidSpecError,
    ManifestError,
)
from pixelveil.keystream import KeyStream
from pixelveil.trigger import (
    Symmetry,
    TriggerSpec,
    compute_layout,
    generate_trigger,
    load_trigger,
    save_trigger,
    trigger_flip_invariant,
    unnormalize_trigger,
)

SEED = "00112233445566778899aabbccddeeff00112233445566778899aabbccddeeff"


class TestKeyStream(unittest.TestCase):
    """Test the AES-CTR bit source"""

    def test_deterministic(self):
        """Test equal keys give equal streams"""
        a = KeyStream(bytes(32)).read_bytes(64)
        b = KeyStream(bytes(32)).read_bytes(64)
        self.assertEqual(a, b)

    def test_consumes_in_order(self):
        """Test consecutive reads continue the stream"""
        whole = KeyStream(bytes(32)).read_bytes(48)
        stream = KeyStream(bytes(32))
        self.assertEqual(stream.read_bytes(16) + stream.read_bytes(32), whole)

    def test_bits_msb_first(self):
        """Test bits are taken most significant first"""
        first = KeyStream(bytes(32)).read_bytes(1)[0]
        bits = KeyStream(bytes(32)).read_bits(8)
        expected = [(first >> (7 - i)) & 1 for i in range(8)]
        self.assertEqual(bits.tolist(), expected)

    def test_signs(self):
        """Test signs map bit 1 to +1 and bit 0 to -1"""
        bits = KeyStream(bytes(32)).read_bits(100)
        signs = KeyStream(bytes(32)).read_signs(100)
        self.assertTrue(np.array_equal(signs, np.where(bits == 1, 1, -1)))

    def test_counter_blocks(self):
        """Test block i is AES of the fixed nonce followed by counter i"""
        key = bytes(range(32))
        ecb = AES.new(key, AES.MODE_ECB)
        expected = b"".join(ecb.encrypt(b"pixelvei" + i.to_bytes(8, "big")) for i in range(3))
        self.assertEqual(KeyStream(key).read_bytes(48), expected)

    def test_key_length(self):
        """Test short keys are rejected"""
        with self.assertRaises(ValueError):
            KeyStream(bytes(16))


class TestLayout(unittest.TestCase):
    """Test trigger region geometry"""

    def test_mnist_layout(self):
        """Test the 28×28 grayscale layout"""
        layout = compute_layout(TriggerSpec(seed=SEED, magnitude_m=10))
        self.assertEqual((layout.base_h, layout.base_v), (2, 5))
        self.assertEqual((layout.width, layout.height), (16, 20))
        self.assertEqual(layout.m_effective, 320)
        self.assertEqual((layout.top, layout.left), (4, 6))

    def test_cifar_layout(self):
        """Test the 32×32 RGB layout"""
        spec = TriggerSpec(seed=SEED, magnitude_m=4, channels=3, image_h=32, image_w=32)
        layout = compute_layout(spec)
        self.assertEqual((layout.base_h, layout.base_v), (3, 6))
        self.assertEqual((layout.width, layout.height), (24, 24))
        self.assertEqual(layout.m_effective, 1728)

    def test_infeasible(self):
        """Test an 8×8 image with margin 4 has no room"""
        with self.assertRaises(InfeasibleLayoutError):
            TriggerSpec(seed=SEED, magnitude_m=10, image_h=8, image_w=8)

    def test_margins_respected(self):
        """Test the region keeps every margin"""
        for size in range(17, 40):
            spec = TriggerSpec(seed=SEED, magnitude_m=1, image_h=size, image_w=size)
            layout = compute_layout(spec)
            self.assertGreaterEqual(layout.top, 4)
            self.assertGreaterEqual(layout.left, 4)
            self.assertGreaterEqual(size - layout.top - layout.height, 4)
            self.assertGreaterEqual(size - layout.left - layout.width, 4)

    def test_symmetry_factor(self):
        """Test mirrored axes multiply the replication"""
        self.assertEqual(Symmetry.NONE.factor, 1)
        self.assertEqual(Symmetry.HORIZONTAL.factor, 2)
        self.assertEqual(Symmetry.BOTH.factor, 4)


class TestTriggerSpec(unittest.TestCase):
    """Test spec validation"""

    def test_magnitude_range(self):
        """Test m must lie in (0, 255]"""
        with self.assertRaises(InvalidSpecError):
            TriggerSpec(seed=SEED, magnitude_m=0)
        with self.assertRaises(InvalidSpecError):
            TriggerSpec(seed=SEED, magnitude_m=256)

    def test_seed_length(self):
        """Test the seed must be 256 bits"""
        with self.assertRaises(InvalidSpecError):
            TriggerSpec(seed="abcd", magnitude_m=1)

    def test_hex_prefix(self):
        """Test 0x-prefixed seeds are accepted"""
        spec = TriggerSpec(seed="0x" + SEED, magnitude_m=1)
        self.assertEqual(spec.seed_hex, SEED)


class TestGenerateTrigger(unittest.TestCase):
    """Test trigger realization"""

    def setUp(self):
        self.spec = TriggerSpec(seed=SEED, magnitude_m=10)

    def test_deterministic(self):
        """Test the same spec gives a bit-identical tensor"""
        a = generate_trigger(self.spec)
        b = generate_trigger(self.spec)
        self.assertEqual(a, b)
        self.assertTrue(np.array_equal(a.base_signs, b.base_signs))

    def test_values(self):
        """Test values are ±m inside the region and 0 outside"""
        trigger = generate_trigger(self.spec)
        layout = trigger.layout
        region = trigger.values[layout.rows, layout.cols, :]
        self.assertTrue(set(np.unique(np.abs(region))) == {10.0})
        outside = trigger.values.copy()
        outside[layout.rows, layout.cols, :] = 0
        self.assertFalse(outside.any())
        self.assertEqual(int(np.count_nonzero(trigger.values)), trigger.m_effective)

    def test_horizontal_mirror(self):
        """Test horizontal symmetry mirrors columns"""
        trigger = generate_trigger(self.spec)
        self.assertTrue(np.array_equal(trigger.values, trigger.values[:, ::-1, :]))
        self.assertTrue(trigger_flip_invariant(trigger))

    def test_vertical_mirror(self):
        """Test vertical symmetry mirrors rows of the region"""
        spec = replace(self.spec, symmetry=Symmetry.VERTICAL, image_h=32)
        trigger = generate_trigger(spec)
        region = trigger.values[trigger.layout.rows, trigger.layout.cols, :]
        self.assertTrue(np.array_equal(region, region[::-1, :, :]))

    def test_repetition(self):
        """Test each base sign fills an R_V×R_H block"""
        trigger = generate_trigger(self.spec)
        layout = trigger.layout
        region = trigger.values[layout.rows, layout.cols, 0]
        first = region[:4, :4]
        self.assertTrue(np.all(first == first[0, 0]))
        self.assertEqual(first[0, 0], 10.0 * trigger.base_signs[0, 0, 0])

    def test_sign_balance(self):
        """Test base signs are close to balanced on a large draw"""
        spec = TriggerSpec.flat(1.0, 10000, SEED)
        signs = generate_trigger(spec).base_signs
        self.assertEqual(set(np.unique(signs)), {-1, 1})
        self.assertLess(abs(float(signs.mean())), 0.05)

    def test_seeds_differ(self):
        """Test different seeds give different tensors"""
        rng = np.random.default_rng(0)
        for _ in range(20):
            a = replace(self.spec, seed=rng.bytes(32))
            b = replace(self.spec, seed=rng.bytes(32))
            self.assertNotEqual(generate_trigger(a), generate_trigger(b))

    def test_one_bit_seed_change(self):
        """Test flipping a single seed bit changes the base signs"""
        rng = np.random.default_rng(1)
        changed = 0
        for _ in range(1000):
            seed = bytearray(rng.bytes(32))
            a = generate_trigger(replace(self.spec, seed=bytes(seed)))
            bit = int(rng.integers(256))
            seed[bit // 8] ^= 1 << (bit % 8)
            b = generate_trigger(replace(self.spec, seed=bytes(seed)))
            changed += not np.array_equal(a.base_signs, b.base_signs)
        self.assertGreaterEqual(changed, 990)


class TestUnnormalize(unittest.TestCase):
    """Test the per-channel affine map"""

    def test_values(self):
        """Test zeros map to mu and ±m map to ±m*sigma+mu"""
        trigger = generate_trigger(TriggerSpec(seed=SEED, magnitude_m=4))
        out = unnormalize_trigger(trigger, NormStats((10.0,), (2.0,)))
        self.assertEqual(out[0, 0, 0], 10.0)
        layout = trigger.layout
        expected = trigger.values[layout.rows, layout.cols, :] * 2 + 10
        self.assertTrue(np.array_equal(out[layout.rows, layout.cols, :], expected))
        self.assertTrue(set(np.unique(out[layout.rows, layout.cols, :])) <= {2.0, 18.0})

    def test_channel_mismatch(self):
        """Test stats must match the trigger's channels"""
        trigger = generate_trigger(TriggerSpec(seed=SEED, magnitude_m=4))
        with self.assertRaises(ChannelMismatchError):
            unnormalize_trigger(trigger, NormStats((0.0, 0.0, 0.0), (1.0, 1.0, 1.0)))


class TestManifest(unittest.TestCase):
    """Test trigger manifest persistence"""

    def setUp(self):
        self.temp_dir = Path(tempfile.mkdtemp())

    def tearDown(self):
        shutil.rmtree(self.temp_dir)

    def test_round_trip(self):
        """Test a saved spec loads back equal"""
        spec = TriggerSpec(seed=SEED, magnitude_m=3.5, symmetry=Symmetry.BOTH,
                           channels=3, image_h=32, image_w=32)
        path = self.temp_dir / "trigger.json"
        save_trigger(spec, path)
        self.assertEqual(load_trigger(path), spec)

    def test_missing_seed(self):
        """Test the error names the missing field"""
        data = TriggerSpec(seed=SEED, magnitude_m=1).to_dict()
        del data["seed"]
        path = self.temp_dir / "trigger.json"
        path.write_text(json.dumps(data))
        with self.assertRaises(ManifestError) as ctx:
            load_trigger(path)
        self.assertEqual(ctx.exception.field, "seed")
        self.assertIn("seed", str(ctx.exception))

    def test_malformed_json(self):
        """Test non-JSON content is a manifest error"""
        path = self.temp_dir / "trigger.json"
        path.write_text("not json {")
        with self.assertRaises(ManifestError):
            load_trigger(path)


if __name__ == "__main__":
    unittest.main()
