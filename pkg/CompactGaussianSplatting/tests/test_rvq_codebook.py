import torch
from django.test import SimpleTestCase

from CompactGaussianSplatting.exceptions import RvqError
from CompactGaussianSplatting.rvq_codebook import (RvqCodebook, codebook_loss, encode, kmeans_init,
                                                   quantize_attribute, straight_through)
from CompactGaussianSplatting.scene_model import DTYPE


def random_vectors(n, dim, seed=0):
    return torch.randn((n, dim), generator=torch.Generator().manual_seed(seed), dtype=DTYPE)


class KMeansTests(SimpleTestCase):
    def test_returns_requested_number_of_codes(self):
        codes = kmeans_init(random_vectors(200, 3), 16, iters=5, seed=1)
        self.assertEqual(tuple(codes.shape), (16, 3))

    def test_fewer_points_than_codes_pads_with_a_warning(self):
        points = random_vectors(3, 4)
        with self.assertLogs('CompactGaussianSplatting.rvq_codebook', level='WARNING'):
            codes = kmeans_init(points, 8)
        self.assertEqual(tuple(codes.shape), (8, 4))
        for code in codes:
            self.assertTrue(any(torch.allclose(code, p) for p in points))

    def test_no_points_raises(self):
        with self.assertRaises(RvqError):
            kmeans_init(torch.zeros((0, 3), dtype=DTYPE), 4)

    def test_same_seed_same_codes(self):
        vectors = random_vectors(100, 3, seed=4)
        self.assertTrue(torch.equal(kmeans_init(vectors, 8, seed=3), kmeans_init(vectors, 8, seed=3)))


class EncodeTests(SimpleTestCase):
    def test_single_stage_matches_exhaustive_search(self):
        vectors = random_vectors(300, 4, seed=1)
        book = RvqCodebook(4, 1, 32)
        with torch.no_grad():
            book.codes[0] = random_vectors(32, 4, seed=2)
        indices, recon = encode(vectors, book)
        for n in range(vectors.shape[0]):
            distances = [float(((vectors[n] - code) ** 2).sum()) for code in book.codes[0]]
            self.assertEqual(int(indices[n, 0]), distances.index(min(distances)))
        self.assertTrue(torch.equal(recon, book.codes[0][indices[:, 0]]))

    def test_residual_energy_never_increases(self):
        vectors = random_vectors(1000, 4, seed=7)
        book = RvqCodebook(4, 6, 64).fit(vectors, iters=10, seed=0)
        energies = book.residual_energies(vectors)
        self.assertEqual(len(energies), 7)
        for before, after in zip(energies, energies[1:]):
            self.assertLessEqual(after, before)

    def test_usage_counts_every_vector_once_per_stage(self):
        vectors = random_vectors(120, 3, seed=2)
        book = RvqCodebook(3, 2, 8).fit(vectors, iters=3)
        self.assertEqual(book.usage.sum(dim=1).tolist(), [120, 120])

    def test_dimension_mismatch_raises(self):
        with self.assertRaises(RvqError):
            encode(random_vectors(5, 3), RvqCodebook(4, 1, 2))

    def test_dead_codes_are_reseeded(self):
        vectors = random_vectors(50, 2, seed=3)
        book = RvqCodebook(2, 1, 4)
        with torch.no_grad():
            book.codes[0] = torch.tensor([[0.0, 0.0], [100.0, 100.0], [-100.0, 100.0], [0.1, 0.0]],
                                         dtype=DTYPE)
        encode(vectors, book)
        with self.assertLogs('CompactGaussianSplatting.rvq_codebook', level='WARNING'):
            reseeded = book.reseed_dead_codes(vectors)
        self.assertEqual(reseeded, 2)
        self.assertLess(float(book.codes[0].abs().max()), 100.0)

    def test_stage_stats_report_entropy_and_norms(self):
        vectors = random_vectors(200, 3, seed=5)
        book = RvqCodebook(3, 3, 16).fit(vectors, iters=5)
        stats = book.stage_stats()
        self.assertEqual([s['stage'] for s in stats], [0, 1, 2])
        for s in stats:
            self.assertGreaterEqual(s['entropy_bits'], 0.0)
            self.assertLessEqual(s['entropy_bits'], 4.0 + 1e-12)
        self.assertEqual(book.index_bits, 4)


class CodebookLossTests(SimpleTestCase):
    def test_matches_scalar_reference(self):
        vectors = random_vectors(40, 3, seed=11)
        book = RvqCodebook(3, 3, 5).fit(vectors, iters=3)
        loss = float(codebook_loss(vectors, book))

        total = 0.0
        for n in range(40):
            residual = [float(v) for v in vectors[n]]
            for stage in range(3):
                code = [float(c) for c in book.codes[stage][book.indices[n, stage]]]
                total += sum((r - c) ** 2 for r, c in zip(residual, code))
                residual = [r - c for r, c in zip(residual, code)]
        self.assertAlmostEqual(loss, total / (40 * 5), delta=1e-9)

    def test_gradient_reaches_only_the_codes(self):
        vectors = random_vectors(30, 4, seed=2).requires_grad_(True)
        book = RvqCodebook(4, 2, 4).fit(vectors.detach(), iters=2)
        codebook_loss(vectors, book).backward()
        self.assertIsNone(vectors.grad)
        self.assertGreater(float(book.codes.grad.abs().sum()), 0.0)

    def test_empty_input_has_zero_loss(self):
        self.assertEqual(float(codebook_loss(torch.zeros((0, 3), dtype=DTYPE), RvqCodebook(3, 1, 2))), 0.0)


class QuantizeAttributeTests(SimpleTestCase):
    def test_straight_through_forwards_reconstruction_and_passes_gradient(self):
        raw = random_vectors(10, 3).requires_grad_(True)
        recon = torch.zeros((10, 3), dtype=DTYPE)
        out = straight_through(raw, recon)
        self.assertTrue(torch.equal(out.detach(), recon))
        out.sum().backward()
        self.assertTrue(torch.equal(raw.grad, torch.ones((10, 3), dtype=DTYPE)))

    def test_rotation_is_quantized_into_its_codebook(self):
        rotations = random_vectors(64, 4, seed=8)
        result = quantize_attribute('rotation', rotations, size=8, stages=2, iters=3)
        self.assertEqual(tuple(result.indices.shape), (64, 2))
        self.assertTrue(torch.equal(result.values, result.book.reconstruct(result.indices)))

    def test_unknown_attribute_raises(self):
        with self.assertRaises(RvqError):
            quantize_attribute('opacity', random_vectors(5, 1), size=2, stages=1)

    def test_wrong_dimension_raises(self):
        with self.assertRaises(RvqError):
            quantize_attribute('scale', random_vectors(5, 4), size=2, stages=1)
