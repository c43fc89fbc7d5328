import math

import numpy as np
import pytest

from treequant.core import Parameter, finite_diff_gradient
from treequant.errors import ConfigError, DimensionError
from treequant.quantizer import (AVERAGE, CONCAT_PROJECT, CascadedQuantizer,
                                 Codebook, cage_loss, code_purity,
                                 codebook_utilization, extract_tree,
                                 fuse_codes, make_quantizer, nearest_code,
                                 quantize_batch, quantize_cascade,
                                 ste_backward, ste_backward_batch)
from treequant.rng import SeededRng


def book(rows, level=1, name="cb"):
    return Codebook(level=level, entries=Parameter(np.array(rows, dtype=np.float32), name=name))


def quantizer(levels, alpha=1.0, beta=1.0, fusion_mode=AVERAGE, projection=None):
    books = [book(rows, level=i + 1, name=f"cb{i + 1}") for i, rows in enumerate(levels)]
    return CascadedQuantizer(codebooks=books, alpha=alpha, beta=beta,
                             fusion_mode=fusion_mode, projection=projection)


def oracle_nearest(entries, e):
    """Independent exhaustive scan: explicit loops, float64 sums, first minimum."""
    best_j, best_d = -1, None
    for j in range(entries.shape[0]):
        d = 0.0
        for k in range(entries.shape[1]):
            diff = float(e[k]) - float(entries[j, k])
            d += diff * diff
        if best_d is None or d < best_d:
            best_j, best_d = j, d
    return best_j, best_d


class TestNearestCode:
    def test_single_entry(self):
        cb = book([[5.0, 5.0]])
        j, code, _ = nearest_code(cb, np.array([0.0, 0.0]))
        assert j == 0
        assert np.allclose(code, [5.0, 5.0])

    def test_exact_match(self):
        cb = book([[0, 0], [1, 0], [2, 0], [3, 3], [4, 0]])
        j, _, dist = nearest_code(cb, np.array([3.0, 3.0]))
        assert j == 3
        assert dist == 0.0

    def test_derived_instance(self):
        cb = book([[0, 0], [1, 0], [0, 2]])
        j, _, dist = nearest_code(cb, np.array([0.9, 0.1]))
        assert j == 1
        assert dist == pytest.approx(0.02, rel=1e-6)

    def test_tie_breaks_to_lowest_index(self):
        cb = book([[1.0, 0.0], [-1.0, 0.0], [1.0, 0.0]])
        j, _, _ = nearest_code(cb, np.array([0.0, 0.0]))
        assert j == 0

    def test_dimension_mismatch(self):
        with pytest.raises(DimensionError):
            nearest_code(book([[0, 0]]), np.array([1.0, 2.0, 3.0]))

    def test_agrees_with_exhaustive_oracle(self):
        gen = np.random.default_rng(42)
        for _ in range(200):
            k = int(gen.integers(1, 50))
            d = int(gen.integers(1, 16))
            entries = gen.normal(size=(k, d)).astype(np.float32)
            e = gen.normal(size=d).astype(np.float32)
            j, _, _ = nearest_code(book(entries), e)
            assert j == oracle_nearest(entries, e)[0]


class TestQuantizeCascade:
    def test_single_level_equals_nearest_code(self):
        q = quantizer([[[0, 0], [1, 1]]])
        e = np.array([0.9, 0.8], dtype=np.float32)
        trace = quantize_cascade(q, e)
        j, code, dist = nearest_code(q.codebooks[0], e)
        assert trace.indices == [j]
        assert np.array_equal(trace.codes[0], code)
        assert trace.sq_dists[0] == pytest.approx(dist)

    def test_level_two_searches_with_level_one_code(self):
        # e is closest to (5,5) at level 2, but the cascade feeds the
        # level-1 code (1,0) into the level-2 search
        q = quantizer([
            [[1.0, 0.0], [4.0, 4.0], [9.0, 9.0]],
            [[1.0, 0.0], [5.0, 5.0]],
        ], alpha=0.0)
        e = np.array([2.0, 1.0], dtype=np.float32)
        trace = quantize_cascade(q, e)
        assert trace.indices[0] == 0
        assert trace.indices[1] == 0

    def test_deterministic(self):
        q = make_quantizer(SeededRng(1), 8, [6, 3])
        e = np.linspace(-1, 1, 8).astype(np.float32)
        t1 = quantize_cascade(q, e)
        t2 = quantize_cascade(q, e)
        assert t1.indices == t2.indices
        assert np.array_equal(t1.fused, t2.fused)

    def test_batch_matches_single(self):
        q = make_quantizer(SeededRng(2), 4, [5, 2], alpha=0.7)
        gen = np.random.default_rng(0)
        x = gen.normal(size=(10, 4)).astype(np.float32)
        bt = quantize_batch(q, x)
        for i in range(10):
            single = quantize_cascade(q, x[i])
            assert list(bt.indices[:, i]) == single.indices
            assert np.array_equal(bt.fused[i], single.fused)


class TestFuseCodes:
    def test_alpha_zero_returns_input(self):
        q = make_quantizer(SeededRng(3), 4, [3], alpha=0.0)
        e = np.array([0.5, -0.5, 1.0, 2.0], dtype=np.float32)
        trace = quantize_cascade(q, e)
        assert np.array_equal(trace.fused, e)

    def test_average_mode_arithmetic(self):
        q = quantizer([
            [[0.0, 2.0], [9.0, 9.0]],
            [[2.0, 0.0]],
        ], alpha=1.0)
        e = np.array([1.0, 1.0], dtype=np.float32)
        trace = quantize_cascade(q, e)
        assert np.allclose(trace.pooled, [1.0, 1.0])
        assert np.allclose(trace.fused, [2.0, 2.0])

    def test_self_code_scaling(self):
        e = np.array([1.0, -2.0], dtype=np.float32)
        for alpha in (0.0, 0.5, 1.5):
            q = quantizer([[e.tolist()]], alpha=alpha)
            trace = quantize_cascade(q, e)
            assert np.allclose(trace.fused, (1 + alpha) * e)

    def test_missing_projection_rejected(self):
        with pytest.raises(ConfigError):
            quantizer([[[0.0, 0.0]]], fusion_mode=CONCAT_PROJECT)

    def test_concat_identity_projection_matches_average_at_h1(self):
        proj = Parameter(np.eye(2, dtype=np.float32), name="proj")
        qa = quantizer([[[0.3, 0.4], [2.0, 2.0]]], alpha=0.8)
        qc = quantizer([[[0.3, 0.4], [2.0, 2.0]]], alpha=0.8,
                       fusion_mode=CONCAT_PROJECT, projection=proj)
        e = np.array([0.2, 0.5], dtype=np.float32)
        assert np.allclose(quantize_cascade(qa, e).fused, quantize_cascade(qc, e).fused, atol=1e-7)

    def test_fuse_codes_recomputes_trace_fusion(self):
        q = make_quantizer(SeededRng(4), 4, [4, 2], alpha=1.3)
        e = np.arange(4, dtype=np.float32) / 4
        trace = quantize_cascade(q, e)
        z = fuse_codes(trace, q)
        assert np.allclose(z, trace.fused, atol=1e-7)


class TestCageLoss:
    def test_fixed_point_is_zero(self):
        e = [1.0, 2.0]
        q = quantizer([[e]], beta=0.5)
        loss = cage_loss(quantize_cascade(q, np.array(e, dtype=np.float32)), beta=0.5)
        assert loss.l_quant == 0.0 and loss.l_commit == 0.0 and loss.l_cage == 0.0

    def test_single_level_arithmetic(self):
        q = quantizer([[[0.0, 0.0]]], beta=0.5)
        loss = cage_loss(quantize_cascade(q, np.array([1.0, 0.0], dtype=np.float32)), beta=0.5)
        assert loss.l_quant == pytest.approx(1.0)
        assert loss.l_commit == pytest.approx(1.0)
        assert loss.l_cage == pytest.approx(1.5)

    def test_forward_value_identity(self):
        gen = np.random.default_rng(7)
        for _ in range(200):
            h = int(gen.integers(1, 4))
            sizes = sorted(gen.choice(np.arange(2, 30), size=h, replace=False), reverse=True)
            q = make_quantizer(SeededRng(int(gen.integers(1 << 30))), 6, [int(s) for s in sizes])
            e = gen.normal(size=6).astype(np.float32)
            loss = cage_loss(quantize_cascade(q, e), beta=1.0)
            assert abs(loss.l_quant - loss.l_commit) < 1e-6


def commit_surrogate(trace, weight):
    """Straight-through surrogate of the commitment penalty as a function of e.

    The per-level offsets captured at the base point are constants; the
    perturbation of e rides the chain into every level input.
    """
    base = trace.input.astype(np.float64)
    codes = [c.astype(np.float64) for c in trace.codes]

    def f(e64):
        shift = e64.reshape(-1) - base
        total = 0.0
        prev = base + shift
        for c in codes:
            total += float(((prev - c) ** 2).sum())
            prev = c + shift
        return weight * total

    return f


class TestSteBackward:
    def test_task_path_identity_average(self):
        q = quantizer([[[0.0, 0.0], [3.0, 3.0]]], alpha=1.0, beta=0.0)
        trace = quantize_cascade(q, np.array([5.0, 5.0], dtype=np.float32))
        grad_e, code_grads, _ = ste_backward(trace, q, np.array([1.0, 2.0]), weight_cage=0.0)
        assert np.allclose(grad_e, [2.0, 4.0])
        assert all(not np.any(g) for g in code_grads.values())

    def test_quant_and_commit_routing_single_level(self):
        q = quantizer([[[0.0, 0.0]]], alpha=0.0, beta=1.0)
        trace = quantize_cascade(q, np.array([1.0, 0.0], dtype=np.float32))
        grad_e, code_grads, _ = ste_backward(trace, q, np.zeros(2), weight_cage=1.0)
        assert np.allclose(code_grads[(1, 0)], [-2.0, 0.0])
        assert np.allclose(grad_e, [2.0, 0.0])

    def test_disabled_cage_passes_gradient_through(self):
        q = quantizer([[[0.5, 0.5], [2.0, 2.0]]], alpha=0.0)
        trace = quantize_cascade(q, np.array([0.4, 0.4], dtype=np.float32))
        grad_z = np.array([0.3, -0.7], dtype=np.float32)
        grad_e, code_grads, _ = ste_backward(trace, q, grad_z, weight_cage=0.0)
        assert np.array_equal(grad_e, grad_z)
        assert all(not np.any(g) for g in code_grads.values())

    @pytest.mark.parametrize("trial", range(30))
    def test_ste_identity_random(self, trial):
        gen = np.random.default_rng(trial)
        h = int(gen.integers(1, 4))
        d = int(gen.choice([4, 64]))
        alpha = float(gen.uniform(0, 2))
        sizes = sorted(gen.choice(np.arange(2, 40), size=h, replace=False), reverse=True)
        q = make_quantizer(SeededRng(trial), d, [int(s) for s in sizes], alpha=alpha)
        e = gen.normal(size=d).astype(np.float32)
        grad_z = gen.normal(size=d).astype(np.float32)
        trace = quantize_cascade(q, e)
        grad_e, _, _ = ste_backward(trace, q, grad_z, weight_cage=0.0)
        q.beta = 0.0
        grad_e_no_losses, _, _ = ste_backward(trace, q, grad_z, weight_cage=0.0)
        assert np.allclose(grad_e_no_losses, (1 + alpha) * grad_z, atol=1e-6)
        assert np.allclose(grad_e, grad_e_no_losses, atol=1e-6)

    @pytest.mark.parametrize("trial", range(20))
    def test_commitment_gradient_matches_surrogate_fd(self, trial):
        gen = np.random.default_rng(200 + trial)
        h = int(gen.integers(1, 4))
        d = int(gen.integers(2, 8))
        beta = float(gen.uniform(0.1, 2.0))
        omega_q = float(gen.uniform(0.1, 2.0))
        sizes = sorted(gen.choice(np.arange(2, 20), size=h, replace=False), reverse=True)
        q = make_quantizer(SeededRng(trial), d, [int(s) for s in sizes], alpha=0.0, beta=beta)
        e = gen.normal(size=d).astype(np.float32)
        trace = quantize_cascade(q, e)
        grad_e, _, _ = ste_backward(trace, q, np.zeros(d), weight_cage=omega_q)
        # remove the quantization term's absence: grad_e here is commit-only
        fd = finite_diff_gradient(commit_surrogate(trace, omega_q * beta),
                                  e.astype(np.float64), h=1e-3).reshape(-1)
        denom = np.maximum(np.abs(fd), 1e-3)
        assert np.max(np.abs(grad_e - fd) / denom) < 1e-4

    @pytest.mark.parametrize("trial", range(20))
    def test_quantization_gradient_matches_fd(self, trial):
        gen = np.random.default_rng(300 + trial)
        h = int(gen.integers(1, 4))
        d = int(gen.integers(2, 8))
        omega_q = float(gen.uniform(0.1, 2.0))
        sizes = sorted(gen.choice(np.arange(2, 20), size=h, replace=False), reverse=True)
        q = make_quantizer(SeededRng(trial), d, [int(s) for s in sizes], beta=0.0)
        q.beta = 0.0
        e = gen.normal(size=d).astype(np.float32)
        trace = quantize_cascade(q, e)
        _, code_grads, _ = ste_backward(trace, q, np.zeros(d), weight_cage=omega_q)
        inputs = [trace.input.astype(np.float64)] + [c.astype(np.float64) for c in trace.codes[:-1]]
        for level in range(1, h + 1):
            prev = inputs[level - 1]
            code = trace.codes[level - 1].astype(np.float64)
            fd = finite_diff_gradient(lambda c64, prev=prev: omega_q * float(((prev - c64.reshape(-1)) ** 2).sum()),
                                      code, h=1e-3).reshape(-1)
            analytic = code_grads[(level, trace.indices[level - 1])]
            denom = np.maximum(np.abs(fd), 1e-3)
            assert np.max(np.abs(analytic - fd) / denom) < 1e-4

    def test_unselected_rows_get_zero_gradient(self):
        q = make_quantizer(SeededRng(11), 4, [8, 3], alpha=1.0, beta=1.0)
        gen = np.random.default_rng(11)
        x = gen.normal(size=(16, 4)).astype(np.float32)
        bt = quantize_batch(q, x)
        ste_backward_batch(q, bt, gen.normal(size=(16, 4)).astype(np.float32), weight_cage=1.0)
        for level, cb in enumerate(q.codebooks):
            selected = set(int(j) for j in bt.indices[level])
            for row in range(cb.size):
                if row not in selected:
                    assert not cb.entries.grad[row].any()

    def test_batch_routing_matches_single(self):
        q = make_quantizer(SeededRng(12), 4, [6, 2], alpha=0.9, beta=0.7)
        gen = np.random.default_rng(12)
        x = gen.normal(size=(5, 4)).astype(np.float32)
        gz = gen.normal(size=(5, 4)).astype(np.float32)
        bt = quantize_batch(q, x)
        grad_e_batch = ste_backward_batch(q, bt, gz, weight_cage=0.4, accumulate=False)
        for i in range(5):
            single, _, _ = ste_backward(bt.row(i), q, gz[i], weight_cage=0.4)
            assert np.allclose(grad_e_batch[i], single, atol=1e-6)

    def test_concat_projection_gradient(self):
        d, h = 3, 2
        gen = np.random.default_rng(9)
        proj = Parameter(gen.normal(size=(h * d, d)).astype(np.float32), name="proj")
        q = quantizer([
            gen.normal(size=(4, d)).tolist(),
            gen.normal(size=(2, d)).tolist(),
        ], alpha=0.6, beta=0.0, fusion_mode=CONCAT_PROJECT, projection=proj)
        e = gen.normal(size=d).astype(np.float32)
        trace = quantize_cascade(q, e)
        grad_z = gen.normal(size=d).astype(np.float32)
        q.beta = 0.0
        grad_e, _, grad_proj = ste_backward(trace, q, grad_z, weight_cage=0.0)

        concat = np.concatenate(trace.codes).astype(np.float64)

        def fused_surrogate(p64):
            # z as a function of the projection, selections frozen
            return float(np.dot(concat @ p64, grad_z.astype(np.float64))) * 0.6

        fd = finite_diff_gradient(lambda p: fused_surrogate(p) / 0.6 * 0.6,
                                  proj.value.astype(np.float64), h=1e-3)
        assert np.max(np.abs(grad_proj - fd)) < 1e-3

        # task gradient to e: direct residual plus one chunk per level
        chunks = (0.6 * (proj.value.astype(np.float64) @ grad_z)).reshape(h, d)
        expected = grad_z + chunks.sum(axis=0)
        assert np.allclose(grad_e, expected, atol=1e-5)


class TestExtractTree:
    def test_star_tree(self):
        q = quantizer([[[0.0, 0.0]]])
        emb = np.array([[1, 0], [0, 1], [-1, 0]], dtype=np.float32)
        tree = extract_tree(q, emb)
        assert tree.level_sizes == [1]
        assert np.array_equal(tree.paths, [[0], [0], [0]])
        assert tree.parents == []

    def test_exact_match_leaves(self):
        pts = [[1.0, 0.0], [-1.0, 0.0], [0.0, 1.0], [0.0, -1.0]]
        q = quantizer([pts])
        tree = extract_tree(q, np.array(pts, dtype=np.float32))
        assert sorted(int(p[0]) for p in tree.paths) == [0, 1, 2, 3]

    def test_parent_links_are_nearest_codes(self):
        q = make_quantizer(SeededRng(21), 4, [6, 2])
        emb = np.random.default_rng(21).normal(size=(9, 4)).astype(np.float32)
        tree = extract_tree(q, emb)
        for child in range(6):
            j, _, _ = nearest_code(q.codebooks[1], q.codebooks[0].entries.value[child])
            assert tree.parents[0][child] == j

    def test_pure_function(self):
        q = make_quantizer(SeededRng(22), 4, [5, 2])
        emb = np.random.default_rng(1).normal(size=(7, 4)).astype(np.float32)
        t1 = extract_tree(q, emb)
        t2 = extract_tree(q, emb)
        assert np.array_equal(t1.paths, t2.paths)
        assert all(np.array_equal(a, b) for a, b in zip(t1.parents, t2.parents))

    def test_empty_embeddings_rejected(self):
        q = make_quantizer(SeededRng(23), 4, [3])
        with pytest.raises(ValueError):
            extract_tree(q, np.zeros((0, 4), dtype=np.float32))


class TestDiagnostics:
    def test_collapse_gives_one_over_v(self):
        q = quantizer([[[0.0, 0.0], [100.0, 100.0], [200.0, 200.0], [300.0, 300.0]]])
        x = np.random.default_rng(0).normal(size=(20, 2)).astype(np.float32)
        bt = quantize_batch(q, x)
        assert codebook_utilization(bt, q) == [0.25]

    def test_full_utilization(self):
        pts = [[10.0, 0.0], [-10.0, 0.0], [0.0, 10.0], [0.0, -10.0]]
        q = quantizer([pts])
        bt = quantize_batch(q, np.array(pts, dtype=np.float32))
        assert codebook_utilization(bt, q) == [1.0]

    def test_single_trace(self):
        q = quantizer([[[0.0, 0.0], [5.0, 5.0]]])
        t = quantize_cascade(q, np.array([0.1, 0.1], dtype=np.float32))
        assert codebook_utilization([t], q) == [0.5]

    def test_purity_perfect_alignment(self):
        report = code_purity([0, 0, 1, 1], ["A", "A", "B", "B"])
        assert report.spans == {"A": 1, "B": 1}
        assert report.exclusive == 2
        assert report.total == 2

    def test_purity_spread(self):
        report = code_purity([0, 1, 2, 3], ["A", "A", "A", "B"])
        assert report.spans["A"] == 3
        assert report.exclusive == 1
        assert report.under_10 == 2

    def test_purity_length_mismatch(self):
        with pytest.raises(ValueError):
            code_purity([0, 1], ["A"])


class TestConstruction:
    def test_sizes_must_strictly_decrease(self):
        with pytest.raises(ConfigError):
            make_quantizer(SeededRng(1), 4, [4, 4])
        with pytest.raises(ConfigError):
            make_quantizer(SeededRng(1), 4, [2, 5])

    def test_negative_weights_rejected(self):
        with pytest.raises(ConfigError):
            make_quantizer(SeededRng(1), 4, [3], alpha=-0.1)
