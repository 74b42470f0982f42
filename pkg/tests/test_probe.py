"""
Tests for [CLS] attention capture, head similarity and the layer sweep
"""

import unittest
import tempfile
import os
import sys
sys.path.append(os.path.dirname(os.path.dirname(os.path.abspath(__file__))))
sys.path.append(os.path.dirname(os.path.abspath(__file__)))

import numpy as np
from scipy import stats
from numpy.testing import assert_allclose, assert_array_equal

import rec_probe as probe
from rec_eval import EvalProtocol
from rec_pipeline import ALL, NONE, StageConfig
from rec_seqmodels import EmbeddingTable
from rec_checkpoint import CheckpointError
from rec_textenc import AttentionTrace, Tokenizer, build_tokenizer
from lab_fixtures import tiny_catalog, tiny_encoder, tiny_lab_data


def block_trace(layers=4, heads=2, tokens=5, split=2):
    """Layers below `split` attend to token 1, the rest to token 3"""
    weights = np.zeros((layers, heads, tokens))
    weights[:split, :, 1] = 1.0
    weights[split:, :, 3] = 1.0
    return AttentionTrace(weights=weights, token_ids=[1] + [10] * (tokens - 1),
                          token_types=[0] + [1] * (tokens - 1),
                          item_positions=[0, 1, 1, 2, 2][:tokens])


class TestCapture(unittest.TestCase):
    """Traces from a real encoder"""

    def setUp(self):
        self.catalog = tiny_catalog()
        self.tok = build_tokenizer(self.catalog)
        self.encoder = tiny_encoder(self.tok)

    def test_untrained_single_head_is_near_uniform(self):
        encoder = tiny_encoder(self.tok, layers=1, heads=1, d=16)
        trace = probe.capture(encoder, [0, 2, 1], self.catalog, self.tok)
        row = trace.weights[0, 0].astype(np.float64)
        row /= row.sum()
        counts = 1000.0 * row
        expected = np.full_like(counts, 1000.0 / len(row))
        self.assertGreater(stats.chisquare(counts, expected).pvalue, 0.95)

    def test_trace_rows_are_distributions(self):
        trace = probe.capture(self.encoder, [0, 2, 1], self.catalog, self.tok)
        cfg = self.encoder.config
        self.assertEqual(trace.weights.shape[:2], (cfg.layers, cfg.heads))
        self.assertEqual(trace.weights.shape[2], len(trace.token_ids))
        assert_allclose(trace.weights.sum(axis=-1), np.ones((cfg.layers, cfg.heads)), atol=1e-5)
        self.assertIn('provenance=random', trace.description)

    def test_capture_from_checkpoint_and_path(self):
        ckpt = self.encoder.to_checkpoint()
        direct = probe.capture(self.encoder, [1, 0], self.catalog, self.tok)
        from_ckpt = probe.capture(ckpt, [1, 0], self.catalog, self.tok)
        with tempfile.TemporaryDirectory() as tmp:
            path = os.path.join(tmp, 'enc.ckpt')
            ckpt.save(path)
            from_path = probe.capture(path, [1, 0], self.catalog, self.tok)
        assert_array_equal(direct.weights, from_ckpt.weights)
        assert_array_equal(direct.weights, from_path.weights)

    def test_capture_errors(self):
        with self.assertRaises(ValueError):
            probe.capture(self.encoder, [], self.catalog, self.tok)
        smaller = Tokenizer(vocab=dict(list(self.tok.vocab.items())[:-1]))
        with self.assertRaises(ValueError):
            probe.capture(self.encoder, [0], self.catalog, smaller)
        with self.assertRaises(CheckpointError):
            probe.capture(EmbeddingTable.random(4, 8, seed=0), [0], self.catalog, self.tok)

    def test_token_budget(self):
        trace = probe.capture(self.encoder, [0, 1, 2, 3], self.catalog, self.tok, max_tokens=10)
        self.assertLessEqual(len(trace.token_ids), 10)


class TestTraceHelpers(unittest.TestCase):

    def test_validate_trace(self):
        probe.validate_trace(block_trace())
        bad = block_trace()
        bad.weights[0, 0, 1] = 0.5
        with self.assertRaises(ValueError):
            probe.validate_trace(bad)
        negative = block_trace()
        negative.weights[0, 0, 0] = -0.1
        negative.weights[0, 0, 1] = 1.1
        with self.assertRaises(ValueError):
            probe.validate_trace(negative)

    def test_item_positions(self):
        trace = block_trace()
        self.assertEqual(probe.first_token_positions(trace), {1: 1, 2: 3})
        self.assertEqual(probe.item_spans(trace), {1: (1, 3), 2: (3, 5)})

    def test_export_trace(self):
        frame = probe.export_trace(block_trace())
        self.assertEqual(len(frame), 4 * 2 * 5)
        self.assertEqual(list(frame.columns),
                         ['layer', 'head', 'token_index', 'item_position', 'token_type', 'weight'])
        assert_allclose(frame.groupby(['layer', 'head'])['weight'].sum().values, np.ones(8))


class TestSimilarity(unittest.TestCase):
    """Pairwise head similarity and stratification evidence"""

    def test_cosine_matrix_properties(self):
        rng = np.random.default_rng(0)
        weights = rng.dirichlet(np.ones(6), size=(3, 2))
        trace = AttentionTrace(weights=weights, token_ids=[0] * 6, token_types=[0] * 6, item_positions=[0] * 6)
        for metric in (probe.COSINE, probe.JENSEN_SHANNON):
            with self.subTest(metric=metric):
                matrix = probe.similarity(trace, metric)
                assert_allclose(matrix.values, matrix.values.T)
                assert_allclose(np.diag(matrix.values), np.ones(6))
                self.assertTrue((matrix.values >= -1e-12).all() and (matrix.values <= 1 + 1e-12).all())
                self.assertEqual(matrix.labels[3], (1, 1))
                self.assertEqual(list(matrix.to_frame().columns)[:2], ['L0H0', 'L0H1'])

    def test_unknown_metric(self):
        with self.assertRaises(ValueError):
            probe.similarity(block_trace(), 'euclid')

    def test_block_constant_trace(self):
        trace = block_trace()
        partition = probe.layer_blocks(4, 2, blocks=2)
        self.assertEqual(partition, [[0, 1, 2, 3], [4, 5, 6, 7]])
        for metric in (probe.COSINE, probe.JENSEN_SHANNON):
            with self.subTest(metric=metric):
                score = probe.stratification_score(probe.similarity(trace, metric), partition)
                self.assertAlmostEqual(score.within, 1.0)
                self.assertAlmostEqual(score.between, 0.0)
                self.assertAlmostEqual(score.evidence, 1.0)

    def test_layer_blocks(self):
        self.assertEqual(probe.layer_blocks(6, 2, 3), [[0, 1, 2, 3], [4, 5, 6, 7], [8, 9, 10, 11]])
        self.assertEqual(probe.layer_blocks(2, 1, 3), [[0], [1]])
        self.assertEqual(probe.layer_blocks(1, 2, 3), [[0, 1]])

    def test_partition_errors(self):
        matrix = probe.similarity(block_trace())
        with self.assertRaises(ValueError):
            probe.stratification_score(matrix, [[0, 1, 2], [4, 5, 6, 7]])
        with self.assertRaises(ValueError):
            probe.stratification_score(matrix, [[0, 1, 2, 3], [], [4, 5, 6, 7]])

    def test_one_sided_partitions_score_nan(self):
        matrix = probe.similarity(block_trace())
        single = probe.stratification_score(matrix, [list(range(8))])
        self.assertTrue(np.isnan(single.between))
        self.assertTrue(np.isnan(single.evidence))
        self.assertGreater(single.within, 0.0)
        scattered = probe.stratification_score(matrix, [[i] for i in range(8)])
        self.assertTrue(np.isnan(scattered.within))
        self.assertTrue(np.isnan(scattered.evidence))
        self.assertGreaterEqual(scattered.between, 0.0)

    def test_shallow_encoders_score(self):
        catalog = tiny_catalog()
        tok = build_tokenizer(catalog)
        for layers, heads in ((1, 2), (2, 1), (1, 1)):
            with self.subTest(layers=layers, heads=heads):
                encoder = tiny_encoder(tok, layers=layers, heads=heads)
                trace = probe.capture(encoder, [0, 2], catalog, tok)
                partition = probe.layer_blocks(layers, heads, 3)
                score = probe.stratification_score(probe.similarity(trace), partition)
                self.assertTrue(np.isnan(score.evidence))

    def test_random_rows_show_no_stratification(self):
        rng = np.random.default_rng(4)
        layers, heads = 12, 4
        weights = rng.dirichlet(np.ones(10), size=(layers, heads))
        trace = AttentionTrace(weights=weights, token_ids=[0] * 10, token_types=[0] * 10, item_positions=[0] * 10)
        matrix = probe.similarity(trace)
        partition = probe.layer_blocks(layers, heads, 3)
        observed = probe.stratification_score(matrix, partition).evidence
        self.assertLess(abs(observed), 0.1)

        rows = layers * heads
        null = []
        for _ in range(500):
            order = rng.permutation(rows)
            shuffled = [list(order[block]) for block in partition]
            null.append(probe.stratification_score(matrix, shuffled).evidence)
        p_value = (np.sum(np.abs(null) >= abs(observed)) + 1) / (len(null) + 1)
        self.assertGreater(p_value, 0.005)


class TestLayerSweep(unittest.TestCase):
    """Layer sets and the FT2 sweep"""

    def test_default_layer_sets(self):
        labels = [label for label, _ in probe.default_layer_sets(12)]
        self.assertEqual(labels, ['NONE', 'ALL', '0,4,8', '1,5,9', '2,6,10', '3,7,11', '3', '7', '11'])
        sets = dict(probe.default_layer_sets(12))
        self.assertEqual(sets['2,6,10'], frozenset({2, 6, 10}))
        small = [label for label, _ in probe.default_layer_sets(2)]
        self.assertEqual(small, ['NONE', 'ALL', '0', '1'])
        self.assertEqual([label for label, _ in probe.default_layer_sets(3)], ['NONE', 'ALL', '0,1,2', '0', '1', '2'])

    def test_uneven_depth_sweeps_every_layer(self):
        for layers in (4, 5, 7, 8):
            with self.subTest(layers=layers):
                sets = probe.default_layer_sets(layers)
                swept = set().union(*(chosen for label, chosen in sets if label not in ('NONE', 'ALL')))
                self.assertEqual(swept, set(range(layers)))
        labels = [label for label, _ in probe.default_layer_sets(4)]
        self.assertEqual(labels, ['NONE', 'ALL', '0,2,3', '1,2,3', '1', '2', '3'])

    def test_sweep(self):
        data = tiny_lab_data()
        encoder = tiny_encoder(data.tokenizer)
        encoder.provenance = 'FT'
        base = encoder.to_checkpoint()
        table = EmbeddingTable.random(data.catalog_size, encoder.config.d, seed=0)
        sets = [(NONE, NONE), ('1', frozenset({1})), (ALL, ALL)]
        report = probe.layer_sweep(data, base, table, sets, StageConfig(epochs=1, batch_size=8), EvalProtocol())

        frame = report.to_frame()
        self.assertEqual(list(frame['tuned_layers']), ['NONE', '1', 'ALL'])
        self.assertEqual(frame.loc[0, 'trainable_params'], 0)
        self.assertEqual(frame.loc[2, 'trainable_params'], encoder.parameter_count())
        self.assertLess(frame.loc[1, 'trainable_params'], frame.loc[2, 'trainable_params'])
        self.assertIn('NDCG@10', report.format_table())
        for _, metrics, _ in report.rows:
            self.assertEqual(metrics.checkpoint_hash, base.content_hash())


if __name__ == '__main__':
    unittest.main()
