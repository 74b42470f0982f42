"""
Tests for the checkpoint container
"""

import unittest
import tempfile
import os
import struct
import sys
sys.path.append(os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

import numpy as np
from numpy.testing import assert_array_equal

import rec_checkpoint as ckpt_mod
from rec_checkpoint import Checkpoint, CheckpointError, HEADER_FORMAT, MAGIC


def sample_checkpoint():
    rng = np.random.default_rng(0)
    return Checkpoint(
        kind='item_table',
        tensors={
            'matrix': rng.normal(size=(5, 3)).astype(np.float32),
            'ids': np.arange(4, dtype=np.int64),
            'scalar': np.float32(1.5) * np.ones(()),
        },
        meta={'provenance': 'FT', 'trainable': False, 'nested': {'a': [1, 2]}},
    )


class TestCheckpoint(unittest.TestCase):
    """Binary container round trips and validation"""

    def setUp(self):
        self.tmpdir = tempfile.TemporaryDirectory()
        self.dir = self.tmpdir.name

    def tearDown(self):
        self.tmpdir.cleanup()

    def test_round_trip_is_bit_exact(self):
        original = sample_checkpoint()
        path = os.path.join(self.dir, 'a.ckpt')
        original.save(path)
        loaded = ckpt_mod.load(path)

        self.assertEqual(loaded.kind, 'item_table')
        self.assertEqual(loaded.meta, original.meta)
        self.assertEqual(list(loaded.tensors), list(original.tensors))
        assert_array_equal(loaded.tensors['matrix'], original.tensors['matrix'])
        self.assertEqual(loaded.tensors['matrix'].tobytes(), original.tensors['matrix'].tobytes())
        self.assertEqual(loaded.tensors['ids'].dtype, np.int32)
        self.assertEqual(loaded.tensors['scalar'].shape, ())

    def test_saved_bytes_reload_to_same_bytes(self):
        original = sample_checkpoint()
        data = original.to_bytes()
        self.assertEqual(Checkpoint.from_bytes(data).to_bytes(), data)

    def test_hash_is_content_addressed(self):
        a, b = sample_checkpoint(), sample_checkpoint()
        self.assertEqual(a.content_hash(), b.content_hash())
        b.tensors['matrix'][0, 0] += 1.0
        self.assertNotEqual(a.content_hash(), b.content_hash())

    def test_save_returns_file_hash(self):
        path = os.path.join(self.dir, 'sub', 'a.ckpt')
        digest = sample_checkpoint().save(path)
        self.assertEqual(digest, ckpt_mod.file_hash(path))

    def test_bad_magic(self):
        data = bytearray(sample_checkpoint().to_bytes())
        data[:4] = b'NOPE'
        with self.assertRaises(CheckpointError):
            Checkpoint.from_bytes(bytes(data))

    def test_unsupported_version(self):
        data = sample_checkpoint().to_bytes()
        header = struct.pack(HEADER_FORMAT, MAGIC, 9, struct.unpack(HEADER_FORMAT, data[:9])[2])
        with self.assertRaises(CheckpointError):
            Checkpoint.from_bytes(header + data[9:])

    def test_truncated_data(self):
        data = sample_checkpoint().to_bytes()
        with self.assertRaises(CheckpointError):
            Checkpoint.from_bytes(data[:5])
        with self.assertRaises(CheckpointError):
            Checkpoint.from_bytes(data[:-4])

    def test_missing_file(self):
        with self.assertRaises(FileNotFoundError):
            ckpt_mod.load(os.path.join(self.dir, 'missing.ckpt'))
        self.assertEqual(ckpt_mod.get_file_info(os.path.join(self.dir, 'missing.ckpt')), {})

    def test_artifact_name(self):
        self.assertEqual(ckpt_mod.artifact_name('encoder-PT', 'abcdef0123456789'), 'encoder-PT-abcdef012345.ckpt')

    def test_save_artifact_is_deterministic(self):
        first = ckpt_mod.save_artifact(sample_checkpoint(), self.dir, 'table-FT')
        second = ckpt_mod.save_artifact(sample_checkpoint(), self.dir, 'table-FT')
        self.assertEqual(first, second)
        self.assertTrue(os.path.basename(first).startswith('table-FT-'))
        self.assertEqual(len(os.listdir(self.dir)), 1)

    def test_file_info(self):
        path = os.path.join(self.dir, 'a.ckpt')
        sample_checkpoint().save(path)
        info = ckpt_mod.get_file_info(path)
        self.assertEqual(info['kind'], 'item_table')
        self.assertEqual(info['tensor_count'], 3)
        self.assertEqual(info['value_count'], 15 + 4 + 1)
        self.assertEqual(info['file_size_bytes'], os.path.getsize(path))


if __name__ == '__main__':
    unittest.main()
