"""
Tests for the encoder training stages and their objectives
"""

import unittest
import os
import sys
from unittest import mock
sys.path.append(os.path.dirname(os.path.dirname(os.path.abspath(__file__))))
sys.path.append(os.path.dirname(os.path.abspath(__file__)))

import numpy as np
from numpy.testing import assert_allclose, assert_array_equal

import rec_tensor as T
import rec_pipeline as pl
from rec_corpus import SequenceDataset
from rec_eval import EvalProtocol, evaluate
from rec_layers import block_param_count
from rec_pipeline import ALL, NONE, StageConfig
from rec_seqmodels import EmbeddingTable
from rec_tensor import Tensor
from rec_textenc import MASK_ID, NUM_SPECIAL, encode_catalog
from lab_fixtures import parameter_gradient_error, tiny_encoder, tiny_lab_data


class TestLayerSelection(unittest.TestCase):

    def test_parse_and_format(self):
        self.assertEqual(pl.parse_layers('all'), ALL)
        self.assertEqual(pl.parse_layers(' NONE '), NONE)
        self.assertEqual(pl.parse_layers(''), NONE)
        self.assertEqual(pl.parse_layers('3, 1'), frozenset({1, 3}))
        self.assertEqual(pl.parse_layers([2, 0]), frozenset({0, 2}))
        self.assertEqual(pl.format_layers(frozenset({3, 1})), '1,3')
        self.assertEqual(pl.format_layers(ALL), 'ALL')

    def test_stage_config_validation(self):
        StageConfig(tuned_layers=frozenset({0, 1})).validate(2)
        bad = [
            StageConfig(stage='XX'),
            StageConfig(patience=0),
            StageConfig(epochs=0),
            StageConfig(mlm_rate=1.0),
            StageConfig(temperature=0.0),
            StageConfig(tuned_layers='SOME'),
        ]
        for config in bad:
            with self.subTest(config=config):
                with self.assertRaises(ValueError):
                    config.validate(2)
        with self.assertRaises(ValueError):
            StageConfig(tuned_layers=frozenset({2})).validate(2)

    def test_describe_is_serialisable(self):
        values = StageConfig(tuned_layers=frozenset({4, 2})).describe()
        self.assertEqual(values['tuned_layers'], '2,4')


class TestTrainingLoop(unittest.TestCase):
    """Early stopping and best-state restore"""

    def test_early_stopper(self):
        stopper = pl.EarlyStopper(patience=2)
        outcomes = [stopper.update(e, v) for e, v in enumerate([0.1, 0.2, 0.2, 0.15])]
        self.assertEqual([o[0] for o in outcomes], [True, True, False, False])
        self.assertEqual([o[1] for o in outcomes], [False, False, False, True])
        self.assertEqual(stopper.best_epoch, 1)
        with self.assertRaises(ValueError):
            pl.EarlyStopper(0)

    def test_restores_best_epoch(self):
        p = Tensor(np.zeros(2), requires_grad=True)
        loop = pl.TrainingLoop('FT1', {'p': p}, StageConfig(epochs=10, patience=2))
        scores = iter([0.1, 0.5, 0.2, 0.3, 0.9])

        def train_epoch(epoch):
            p.data[...] = epoch
            return 1.0

        report = loop.run(train_epoch, lambda: next(scores))
        self.assertEqual(report.stop_reason, 'patience')
        self.assertEqual(report.best_epoch, 1)
        self.assertEqual(report.epochs_run, 4)
        assert_array_equal(p.data, [1.0, 1.0])

    def test_loss_monitor_without_validation(self):
        p = Tensor(np.zeros(1), requires_grad=True)
        loop = pl.TrainingLoop('PT', {'p': p}, StageConfig(epochs=3, patience=5))
        losses = [3.0, 1.0, 2.0]
        report = loop.run(lambda epoch: losses[epoch])
        self.assertEqual(report.stop_reason, 'max_epochs')
        self.assertEqual(report.best_epoch, 1)
        self.assertEqual(report.valid_ndcg, [None, None, None])

    def test_nothing_trainable(self):
        p = Tensor(np.ones(2), requires_grad=False)
        calls = []
        loop = pl.TrainingLoop('FT2', {'p': p}, StageConfig())
        report = loop.run(lambda epoch: calls.append(epoch) or 0.0, lambda: 0.25)
        self.assertEqual(calls, [])
        self.assertEqual(report.stop_reason, 'nothing_trainable')
        self.assertEqual(report.valid_ndcg, [0.25])

    def test_non_finite_loss(self):
        p = Tensor(np.ones(1), requires_grad=True)
        loop = pl.TrainingLoop('PT', {'p': p}, StageConfig())
        with self.assertRaises(FloatingPointError):
            loop.step(T.scale(T.tsum(p), float('nan')))

    def test_report_lines_leave_out_wall_time(self):
        report = pl.TrainReport(stage='PT', losses=[1.0, 0.5], valid_ndcg=[None, None],
                                best_epoch=1, stop_reason='max_epochs', wall_time=12.5)
        lines = report.to_lines()
        self.assertEqual(len(lines), 3)
        self.assertNotIn('wall', ''.join(lines))


class TestObjectives(unittest.TestCase):
    """MLM corruption and the contrastive loss"""

    def test_mlm_mask_never_touches_specials(self):
        ids = [1, 5, 6, 0, 7, 3, 8]
        sample = pl.mlm_mask(ids, 0.9, seed=0, vocab_size=9)
        self.assertTrue(all(ids[p] >= NUM_SPECIAL for p in sample.positions))
        assert_array_equal(sample.labels, np.asarray(ids)[sample.positions])
        untouched = np.setdiff1d(np.arange(len(ids)), sample.positions)
        assert_array_equal(sample.corrupted[untouched], np.asarray(ids)[untouched])

    def test_mlm_mask_deterministic(self):
        ids = list(range(4, 40))
        a = pl.mlm_mask(ids, 0.3, seed=5)
        b = pl.mlm_mask(ids, 0.3, seed=5)
        assert_array_equal(a.corrupted, b.corrupted)
        assert_array_equal(a.positions, b.positions)

    def test_mlm_mask_corruption_mix(self):
        ids = np.full(20000, 10)
        sample = pl.mlm_mask(ids, 0.5, seed=1, vocab_size=50)
        self.assertAlmostEqual(sample.positions.size / ids.size, 0.5, delta=0.02)
        chosen = sample.corrupted[sample.positions]
        self.assertAlmostEqual(np.mean(chosen == MASK_ID), 0.8, delta=0.02)
        self.assertTrue(np.all(chosen[chosen != MASK_ID] >= NUM_SPECIAL))

    def test_mlm_mask_edge_cases(self):
        self.assertIsNone(pl.mlm_mask([0, 1, 2, 3], 0.5, seed=0))
        with self.assertRaises(ValueError):
            pl.mlm_mask([5, 6], 0.0, seed=0)

    def test_iic_closed_form(self):
        vectors = Tensor(np.eye(8))
        loss = pl.iic_loss(vectors, vectors, temperature=0.05)
        expected = -np.log(np.exp(20.0) / (np.exp(20.0) + 7.0))
        self.assertAlmostEqual(loss.item(), expected, places=6)

    def test_iic_needs_two_rows(self):
        with self.assertRaises(ValueError):
            pl.iic_loss(Tensor(np.ones((1, 4))), Tensor(np.ones((1, 4))))
        with self.assertRaises(T.ShapeError):
            pl.iic_loss(Tensor(np.ones((2, 4))), Tensor(np.ones((3, 4))))

    def test_iic_gradients(self):
        rng = np.random.default_rng(0)
        a, b = rng.normal(size=(4, 5)), rng.normal(size=(4, 5))

        def fn(x, y):
            return pl.iic_loss(T.l2_normalize(x), T.l2_normalize(y), temperature=0.5)

        for wrt in range(2):
            tensors = [Tensor(a, requires_grad=True), Tensor(b, requires_grad=True)]
            fn(*tensors).backward()
            numeric = T.numerical_gradient(fn, [a, b], wrt)
            self.assertLess(T.relative_error(tensors[wrt].grad, numeric), 1e-3)

    def test_next_item_pairs(self):
        train = {2: [1, 2, 3, 4], 0: [5], 1: [6, 7]}
        pairs = pl.next_item_pairs(train, np.random.default_rng(0))
        self.assertEqual(len(pairs), 2)
        self.assertEqual(pairs[0], ([6], 7))
        prefix, target = pairs[1]
        seq = train[2]
        self.assertEqual(prefix + [target], seq[:len(prefix) + 1])
        self.assertEqual(pl.next_item_pairs(train, np.random.default_rng(0)), pairs)


class TestEncoderStages(unittest.TestCase):
    """Tiny end-to-end runs of LF, PT, FT1 and FT2"""

    @classmethod
    def setUpClass(cls):
        cls.data = tiny_lab_data()
        cls.protocol = EvalProtocol()

    def encoder(self):
        return tiny_encoder(self.data.tokenizer)

    def pretrain_dataset(self):
        return SequenceDataset(sequences=self.data.split.train, catalog_size=self.data.catalog_size)

    def test_layer_mask_counts(self):
        encoder = self.encoder()
        cfg = encoder.config
        names = pl.apply_layer_mask(encoder, frozenset({1}))
        self.assertEqual(encoder.parameter_count(names), block_param_count(cfg.d, cfg.ffn_dim))
        self.assertEqual(sorted(encoder.trainable_names()), sorted(names))
        self.assertEqual(pl.apply_layer_mask(encoder, NONE), [])
        self.assertEqual(len(pl.apply_layer_mask(encoder, ALL)), len(encoder.params))
        with self.assertRaises(ValueError):
            pl.apply_layer_mask(encoder, frozenset({5}))

    def test_pt_loss_gradients(self):
        encoder = self.encoder()
        pairs = pl.next_item_pairs(self.data.split.train, np.random.default_rng(1))[:4]
        config = StageConfig(stage='PT', mlm_rate=0.3, temperature=0.5)

        def loss():
            return pl.pt_loss(encoder, pairs, self.data.catalog, self.data.tokenizer, config,
                              np.random.default_rng(2))

        self.assertLess(parameter_gradient_error(encoder, loss, entries=2), 1e-4)

    def test_ft_loss_gradients(self):
        encoder = self.encoder()
        pairs = pl.next_item_pairs(self.data.split.train, np.random.default_rng(3))[:4]
        table = np.random.default_rng(4).normal(size=(self.data.catalog_size, encoder.config.d))

        def loss():
            return pl.ft_loss(encoder, pairs, Tensor(table), self.data.catalog, self.data.tokenizer, 0.5)

        self.assertLess(parameter_gradient_error(encoder, loss, entries=2), 1e-4)

    def test_text_mlm_stage(self):
        encoder = self.encoder()
        ckpt, report = pl.stage_text_mlm(encoder, self.data.catalog, self.data.tokenizer,
                                         StageConfig(epochs=2, batch_size=8, lr=1e-2))
        self.assertEqual(ckpt.kind, 'text_encoder')
        self.assertEqual(ckpt.meta['provenance'], 'LF')
        self.assertEqual(ckpt.meta['lineage']['stage'], 'LF')
        self.assertEqual(report.epochs_run, 2)
        self.assertTrue(all(np.isfinite(report.losses)))

    def test_pt_stage_records_parent(self):
        encoder = self.encoder()
        parent = encoder.to_checkpoint().content_hash()
        ckpt, report = pl.stage_pt(encoder, self.pretrain_dataset(), self.data.catalog, self.data.tokenizer,
                                   StageConfig(epochs=1, batch_size=8))
        self.assertEqual(ckpt.meta['provenance'], 'PT')
        self.assertEqual(ckpt.meta['lineage']['parent'], parent)
        self.assertEqual(report.epochs_run, 1)

    def test_pt_stage_loss_falls(self):
        encoder = self.encoder()
        _, report = pl.stage_pt(encoder, self.pretrain_dataset(), self.data.catalog, self.data.tokenizer,
                                StageConfig(epochs=4, batch_size=8, lr=1e-2, patience=10))
        self.assertEqual(report.epochs_run, 4)
        self.assertLess(min(report.losses[1:]), 0.95 * report.losses[0])
        self.assertEqual(report.best_epoch, int(np.argmin(report.losses)))

    def test_pt_stage_needs_two_users(self):
        dataset = SequenceDataset(sequences={0: [1, 2, 3]}, catalog_size=self.data.catalog_size)
        with self.assertRaises(ValueError):
            pl.stage_pt(self.encoder(), dataset, self.data.catalog, self.data.tokenizer, StageConfig(epochs=1))

    def test_ft1_stage(self):
        config = StageConfig(epochs=1, batch_size=8)
        ckpt, table, report = pl.stage_ft1(self.encoder(), self.data.split, self.data.catalog,
                                           self.data.tokenizer, config, self.data.valid, self.protocol)
        self.assertEqual(table.provenance, 'FT')
        self.assertFalse(table.trainable)
        self.assertEqual(table.rows, self.data.catalog_size)
        self.assertEqual(table.source_hash, ckpt.content_hash())
        assert_allclose(np.linalg.norm(table.matrix, axis=1), np.ones(table.rows), rtol=1e-5)
        self.assertEqual(len(report.valid_ndcg), 1)

        again = pl.stage_ft1(self.encoder(), self.data.split, self.data.catalog,
                             self.data.tokenizer, config, self.data.valid, self.protocol)
        self.assertEqual(again[0].content_hash(), ckpt.content_hash())

    def test_ft1_table_is_refreshed_each_epoch(self):
        encodings = []

        def record(*args, **kwargs):
            matrix = encode_catalog(*args, **kwargs)
            encodings.append(matrix.copy())
            return matrix

        config = StageConfig(epochs=2, batch_size=8, lr=1e-2, patience=10)
        with mock.patch.object(pl, 'encode_catalog', side_effect=record):
            _, _, report = pl.stage_ft1(self.encoder(), self.data.split, self.data.catalog,
                                        self.data.tokenizer, config, self.data.valid, self.protocol)
        self.assertEqual(report.epochs_run, 2)
        # start of epoch 0, then after every epoch's updates, then the exported table
        self.assertEqual(len(encodings), 4)
        self.assertGreater(np.abs(encodings[1] - encodings[0]).max(), 1e-6)
        self.assertGreater(np.abs(encodings[2] - encodings[1]).max(), 1e-6)

    def test_ft2_keeps_table_fixed(self):
        table = EmbeddingTable.random(self.data.catalog_size, 8, seed=0)
        ckpt, result, report = pl.stage_ft2(self.encoder(), table, self.data.split, self.data.catalog,
                                            self.data.tokenizer, StageConfig(epochs=1, batch_size=8),
                                            self.data.valid, self.protocol)
        assert_array_equal(result.matrix, table.matrix)
        self.assertEqual(result.provenance, 'random')
        self.assertNotIn('item_table', ckpt.tensors)
        self.assertEqual(ckpt.meta['lineage']['table'], table.checksum())

    def test_ft2_with_no_layers_changes_nothing(self):
        encoder = self.encoder()
        before = encoder.state_dict()
        table = EmbeddingTable.random(self.data.catalog_size, 8, seed=0)
        _, _, report = pl.stage_ft2(encoder, table, self.data.split, self.data.catalog, self.data.tokenizer,
                                    StageConfig(epochs=3, tuned_layers=NONE), self.data.valid, self.protocol)
        self.assertEqual(report.stop_reason, 'nothing_trainable')
        for name, value in before.items():
            assert_array_equal(encoder.params[name].data, value)

    def test_ft2_trainable_table_only(self):
        encoder = self.encoder()
        before = encoder.state_dict()
        table = EmbeddingTable.random(self.data.catalog_size, 8, seed=0)
        ckpt, result, _ = pl.stage_ft2(encoder, table, self.data.split, self.data.catalog, self.data.tokenizer,
                                       StageConfig(epochs=1, batch_size=8, tuned_layers=NONE),
                                       self.data.valid, self.protocol, train_table=True)
        self.assertTrue(result.trainable)
        self.assertIn('item_table', ckpt.tensors)
        for name, value in before.items():
            assert_array_equal(encoder.params[name].data, value)

    def test_ft2_dim_mismatch(self):
        table = EmbeddingTable.random(self.data.catalog_size, 6, seed=0)
        with self.assertRaises(T.ShapeError):
            pl.stage_ft2(self.encoder(), table, self.data.split, self.data.catalog, self.data.tokenizer,
                         StageConfig(epochs=1), self.data.valid)

    def test_recformer_scorer_evaluates(self):
        encoder = self.encoder()
        from rec_textenc import encode_catalog
        table = encode_catalog(encoder, self.data.catalog, self.data.tokenizer)
        scorer = pl.RecformerScorer(encoder, table, self.data.catalog, self.data.tokenizer, batch_size=4)
        report = evaluate(scorer, self.data.test, self.protocol)
        self.assertEqual(report.count, len(self.data.test))
        full = scorer.score([[0, 1]], None)
        self.assertEqual(full.shape, (1, self.data.catalog_size))


if __name__ == '__main__':
    unittest.main()
