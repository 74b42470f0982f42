"""
Tests for experiment config parsing, precedence and validation
"""

import unittest
import tempfile
import os
import sys
from unittest import mock
sys.path.append(os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

import rec_config as cfg
from rec_config import ConfigError, ExperimentConfig
from rec_pipeline import ALL


class ConfigFileMixin:
    def setUp(self):
        self.tmpdir = tempfile.TemporaryDirectory()

    def tearDown(self):
        self.tmpdir.cleanup()

    def write(self, text, name='exp.cfg'):
        path = os.path.join(self.tmpdir.name, name)
        with open(path, 'w', encoding='utf-8') as f:
            f.write(text)
        return path


class TestParsing(ConfigFileMixin, unittest.TestCase):
    """File syntax and typed assignment"""

    def test_parse_lines(self):
        entries = cfg.parse_lines("# header\n\nseed = 7   # master\nencoder.layers=3\n")
        self.assertEqual(entries, [('seed', '7', 3), ('encoder.layers', '3', 4)])

    def test_typed_values(self):
        path = self.write("\n".join([
            "seed = 7",
            "verbose = yes",
            "dataset.intra_cluster_prob = 0.6",
            "stages.ft2.tuned_layers = 1,3,5",
            "stages.pt.tuned_layers = ALL",
            "protocol.kind = full",
            "ablation.fractions = 0.2,1.0",
            "variant.FT-trainable.provenance = FT",
            "variant.FT-trainable.lr_grid = grid",
        ]))
        config = cfg.load_config(path)
        self.assertEqual(config.seed, 7)
        self.assertTrue(config.verbose)
        self.assertAlmostEqual(config.dataset.intra_cluster_prob, 0.6)
        self.assertEqual(config.stages.ft2.tuned_layers, frozenset({1, 3, 5}))
        self.assertEqual(config.stages.pt.tuned_layers, ALL)
        self.assertEqual(config.ablation.fractions, (0.2, 1.0))
        spec = config.variants['FT-trainable']
        self.assertEqual((spec.name, spec.provenance), ('FT-trainable', 'FT'))
        self.assertEqual(len(spec.lr_grid), 4)

    def test_errors_carry_line_numbers(self):
        cases = [
            ("seed = 1\nencoder.depth = 3\n", 2, 'encoder.depth'),
            ("seed = 1\n\nencoder.layers = three\n", 3, 'encoder.layers'),
            ("verbose = maybe\n", 1, 'verbose'),
            ("encoder = 4\n", 1, 'encoder'),
            ("seed.value = 4\n", 1, 'seed.value'),
            ("variant.x = 1\n", 1, 'variant.x'),
        ]
        for text, line_number, key in cases:
            with self.subTest(key=key):
                with self.assertRaises(ConfigError) as ctx:
                    cfg.load_config(self.write(text))
                self.assertEqual(ctx.exception.line_number, line_number)
                self.assertEqual(ctx.exception.field, key)
        with self.assertRaises(ConfigError) as ctx:
            cfg.load_config(self.write("seed 4\n"))
        self.assertEqual(ctx.exception.line_number, 1)

    def test_variant_name_comes_from_key(self):
        with self.assertRaises(ConfigError):
            cfg.load_config(overrides=['variant.a.name=b'])

    def test_missing_file(self):
        with self.assertRaises(FileNotFoundError):
            cfg.load_config(os.path.join(self.tmpdir.name, 'absent.cfg'))


class TestPrecedence(ConfigFileMixin, unittest.TestCase):
    """defaults < file < overrides < dedicated flags"""

    def test_override_order(self):
        path = self.write("seed = 1\nencoder.layers = 3\nout_dir = from-file\n")
        config = cfg.load_config(path, overrides=['encoder.layers=5'])
        self.assertEqual(config.encoder.layers, 5)
        self.assertEqual(config.out_dir, 'from-file')
        config = cfg.load_config(path, overrides=['seed=2'], seed=9, out_dir='from-flag')
        self.assertEqual(config.seed, 9)
        self.assertEqual(config.out_dir, 'from-flag')

    def test_bad_override(self):
        with self.assertRaises(ConfigError):
            cfg.load_config(overrides=['encoder.layers'])

    def test_out_dir_environment(self):
        with mock.patch.dict(os.environ, {cfg.OUT_ENV: 'env-out'}):
            self.assertEqual(cfg.load_config().resolved_out_dir(), 'env-out')
            self.assertEqual(cfg.load_config(out_dir='flag').resolved_out_dir(), 'flag')
        with mock.patch.dict(os.environ, {}, clear=True):
            self.assertEqual(cfg.load_config().resolved_out_dir(), cfg.DEFAULT_OUT)

    def test_seed_propagates_to_unset_components(self):
        config = cfg.load_config(overrides=['backbone.seed=3', 'variant.v.mode=freeze'], seed=11)
        self.assertEqual(config.encoder.seed, 11)
        self.assertEqual(config.stages.ft2.seed, 11)
        self.assertEqual(config.backbone.seed, 3)
        self.assertEqual(config.variants['v'].seed, 11)

    def test_explicit_zero_seed_is_kept(self):
        config = cfg.load_config(overrides=['stages.pt.seed=0', 'variant.v.seed=0', 'variant.w.mode=freeze'], seed=11)
        self.assertEqual(config.stages.pt.seed, 0)
        self.assertEqual(config.variants['v'].seed, 0)
        self.assertEqual(config.variants['w'].seed, 11)
        self.assertEqual(config.stages.ft1.seed, 11)
        from_file = cfg.load_config(self.write("encoder.seed = 0\n"), seed=11)
        self.assertEqual(from_file.encoder.seed, 0)
        self.assertEqual(from_file.backbone.seed, 11)

    def test_ks_follow_protocol_kind(self):
        self.assertEqual(cfg.load_config(overrides=['protocol.kind=full']).protocol.ks, (5, 10, 50))
        self.assertEqual(cfg.load_config().protocol.ks, (5, 10))
        explicit = cfg.load_config(overrides=['protocol.kind=full', 'protocol.ks=20,1'])
        self.assertEqual(explicit.protocol.ks, (1, 20))


class TestValidateAndDump(ConfigFileMixin, unittest.TestCase):

    def test_defaults_need_a_seed(self):
        problems = cfg.validate(cfg.load_config())
        self.assertEqual(problems, ["seed: master seed is required"])
        self.assertEqual(cfg.validate(cfg.load_config(seed=0)), [])

    def test_reports_every_violation(self):
        config = cfg.load_config(seed=1, overrides=[
            'backbone.d=32', 'dataset.pretrain_fraction=1.5', 'stages.ft2.tuned_layers=9',
            'variant.e.mode=further_emb', 'variant.e.provenance=FT', 'variant.e.parent=missing'])
        problems = cfg.validate(config)
        keys = [p.split(':', 1)[0] for p in problems]
        self.assertIn('backbone.d', keys)
        self.assertIn('dataset.pretrain_fraction', keys)
        self.assertIn('stages.ft2', keys)
        self.assertIn('variant.e.parent', keys)

    def test_synthetic_vocabulary_bounds(self):
        config = cfg.load_config(seed=1, overrides=['dataset.vocab_per_cluster=2', 'dataset.shared_vocab=1'])
        keys = [p.split(':', 1)[0] for p in cfg.validate(config)]
        self.assertEqual(keys, ['dataset.shared_vocab', 'dataset.vocab_per_cluster'])

    def test_real_dataset_files_must_exist(self):
        config = cfg.load_config(seed=1, overrides=['dataset.synthetic=false'])
        keys = [p.split(':', 1)[0] for p in cfg.validate(config)]
        self.assertEqual(keys, ['dataset.interactions', 'dataset.catalog'])

    def test_dump_round_trip(self):
        config = cfg.load_config(seed=4, overrides=[
            'stages.ft2.tuned_layers=0,2', 'protocol.kind=full', 'ablation.seeds=0,1',
            'variant.FT-freeze.provenance=FT', 'variant.FT-freeze.mode=freeze',
            'variant.FT-further-Emb.provenance=FT', 'variant.FT-further-Emb.mode=further_emb',
            'variant.FT-further-Emb.parent=FT-freeze'])
        restored = cfg.load_config(self.write(cfg.dump_config(config)))
        self.assertEqual(restored, config)
        self.assertIsInstance(restored, ExperimentConfig)


if __name__ == '__main__':
    unittest.main()
