"""Prototype generator against a brute-force per-column oracle."""

import math

import numpy as np
import numpy.testing as npt
import pytest

from qproto.errors import ConfigError, RangeError
from qproto.hierarchy import HierarchicalRep
from qproto.protogen import (PGConfig, generate_fgc, generate_prototype,
                             generate_prototypes, generate_prototypes_multi,
                             similarity, similarity_row)
from qproto.tensor import Tensor


def rng_for(seed):
    return np.random.default_rng(np.random.SeedSequence((0x960, seed)))


# ---------------------------------------------------------------------------
# brute-force oracle: plain python/numpy scalars, full sort, hand softmax
# ---------------------------------------------------------------------------

def sim_scalar(kind, a, b):
    if kind == "cosine":
        na, nb = math.sqrt(float(a @ a)), math.sqrt(float(b @ b))
        if na < 1e-12 or nb < 1e-12:
            return 0.0
        return float(a @ b) / (na * nb)
    return math.exp(max(-500.0, min(500.0, float(a @ b))))


def prototype_oracle(query_cols, support_cols, xi, kind):
    """O(T * KT * c): per query column, score every support column, sort
    descending with index tie-break, softmax the top xi, aggregate."""
    c, t = query_cols.shape
    kt = support_cols.shape[1]
    xi = min(xi, kt)
    proto = np.zeros((c, t))
    all_idx, all_rho = [], []
    for i in range(t):
        sims = [sim_scalar(kind, query_cols[:, i], support_cols[:, j])
                for j in range(kt)]
        order = sorted(range(kt), key=lambda j: (-sims[j], j))[:xi]
        chosen = np.array([sims[j] for j in order])
        e = np.exp(chosen - chosen.max())
        rho = e / e.sum()
        proto[:, i] = sum(r * support_cols[:, j] for r, j in zip(rho, order))
        all_idx.append(order)
        all_rho.append(rho)
    return proto, np.array(all_idx), np.array(all_rho)


class TestSimilarity:
    def test_cosine_self_is_one(self):
        a = Tensor(rng_for(0).normal(size=6))
        npt.assert_allclose(similarity("cosine", a, a).item(), 1.0, atol=1e-12)

    def test_gaussian_zero_vector_is_one(self):
        b = Tensor(rng_for(1).normal(size=4))
        assert similarity("gaussian", Tensor(np.zeros(4)), b).item() == 1.0

    def test_orthogonal_and_unit_dot(self):
        e1, e2 = Tensor([1.0, 0.0]), Tensor([0.0, 1.0])
        assert similarity("cosine", e1, e2).item() == 0.0
        npt.assert_allclose(similarity("gaussian", e1, e1).item(), math.e, rtol=1e-15)

    def test_cosine_zero_guard(self):
        z = Tensor(np.zeros(3))
        b = Tensor([1.0, 2.0, 3.0])
        assert similarity("cosine", z, b).item() == 0.0
        tiny = Tensor(np.full(3, 1e-14))
        assert similarity("cosine", tiny, b).item() == 0.0

    def test_cosine_range(self):
        rng = rng_for(2)
        for _ in range(50):
            a, b = Tensor(rng.normal(size=5)), Tensor(rng.normal(size=5))
            assert -1.0 - 1e-12 <= similarity("cosine", a, b).item() <= 1.0 + 1e-12

    def test_gaussian_overflow_clamped(self):
        big = Tensor(np.full(4, 100.0))
        val = similarity("gaussian", big, big).item()
        assert np.isfinite(val) and val == math.exp(500.0)

    def test_unknown_kind_rejected(self):
        with pytest.raises(ConfigError):
            PGConfig(similarity="manhattan")


class TestSimilarityRow:
    def test_self_support(self):
        u = Tensor(rng_for(3).normal(size=4))
        row = similarity_row(u, Tensor(u.data[:, None]), "cosine")
        npt.assert_allclose(row.data, [1.0], atol=1e-12)

    def test_orthogonal_basis(self):
        sup = Tensor(np.eye(3))
        row = similarity_row(Tensor(np.array([0.0, 1.0, 0.0])), sup, "cosine")
        npt.assert_allclose(row.data, [0.0, 1.0, 0.0], atol=1e-15)

    @pytest.mark.parametrize("kind", ["cosine", "gaussian"])
    def test_matches_scalar_oracle(self, kind):
        rng = rng_for(4)
        u = rng.normal(size=4)
        sup = rng.normal(size=(4, 10))
        row = similarity_row(Tensor(u), Tensor(sup), kind)
        want = [sim_scalar(kind, u, sup[:, j]) for j in range(10)]
        npt.assert_allclose(row.data, want, atol=1e-12)


class TestGenerateFgc:
    def test_xi_one_returns_nearest(self):
        rng = rng_for(5)
        sup = rng.normal(size=(3, 8))
        u = sup[:, 5] * 2.0                           # parallel to column 5
        cell, prov = generate_fgc(Tensor(u), Tensor(sup), PGConfig(xi=1))
        npt.assert_array_equal(cell.data, sup[:, 5])
        assert prov.indices.tolist() == [5]
        npt.assert_array_equal(prov.weights, [1.0])

    def test_identical_columns_return_that_vector(self):
        w = rng_for(6).normal(size=4)
        sup = np.tile(w[:, None], (1, 6))
        for xi in (1, 3, 6):
            cell, _ = generate_fgc(Tensor(rng_for(7).normal(size=4)), Tensor(sup),
                                   PGConfig(xi=xi))
            npt.assert_allclose(cell.data, w, atol=1e-12)

    def test_hand_computed_two_of_three(self):
        u = np.array([1.0, 0.0])
        sup = np.array([[1.0, 0.0, -1.0], [0.0, 1.0, 0.0]])
        cell, prov = generate_fgc(Tensor(u), Tensor(sup),
                                  PGConfig(xi=2, similarity="cosine"))
        assert prov.indices.tolist() == [0, 1]        # sims [1, 0, -1]
        e = math.e
        npt.assert_allclose(prov.weights, [e / (e + 1), 1 / (e + 1)], atol=1e-12)
        npt.assert_allclose(cell.data, [e / (e + 1), 1 / (e + 1)], atol=1e-12)
        npt.assert_allclose(cell.data, [0.7310585786, 0.2689414214], atol=1e-9)

    def test_xi_clamps_to_pool_size(self):
        rng = rng_for(8)
        cell, prov = generate_fgc(Tensor(rng.normal(size=3)),
                                  Tensor(rng.normal(size=(3, 4))),
                                  PGConfig(xi=9, clamp_xi=True))
        assert prov.indices.shape == (4,)

    def test_oversized_xi_without_clamp_raises(self):
        rng = rng_for(9)
        with pytest.raises(RangeError):
            generate_fgc(Tensor(rng.normal(size=3)), Tensor(rng.normal(size=(3, 4))),
                         PGConfig(xi=9, clamp_xi=False))

    def test_xi_below_one_rejected(self):
        with pytest.raises(ConfigError):
            PGConfig(xi=0)


class TestGeneratePrototype:
    def test_self_support_cosine_xi1_is_identity(self):
        rng = rng_for(10)
        q = rng.normal(size=(4, 6))
        proto = generate_prototype(Tensor(q), Tensor(q), PGConfig(xi=1))
        npt.assert_array_equal(proto.fgcs.data, q)
        npt.assert_array_equal(proto.provenance.indices[:, 0], np.arange(6))

    def test_accepts_hierarchical_rep(self):
        rng = rng_for(11)
        q = rng.normal(size=(3, 5))
        rep = HierarchicalRep(fgcs=Tensor(q), sizes=(2, 1), offsets=(0, 4))
        proto = generate_prototype(rep, Tensor(rng.normal(size=(3, 7))), PGConfig(xi=2))
        assert proto.fgcs.shape == (3, 5)
        assert proto.provenance.indices.shape == (5, 2)

    def test_micro_case_matches_oracle(self):
        rng = rng_for(12)
        q = rng.normal(size=(2, 2))
        sup = rng.normal(size=(2, 3))
        cfg = PGConfig(xi=2, similarity="cosine")
        proto = generate_prototype(Tensor(q), Tensor(sup), cfg)
        want, idx, rho = prototype_oracle(q, sup, 2, "cosine")
        npt.assert_allclose(proto.fgcs.data, want, atol=1e-12)
        npt.assert_array_equal(proto.provenance.indices, idx)
        npt.assert_allclose(proto.provenance.weights, rho, atol=1e-12)

    def test_batched_equals_sequential_75_queries(self):
        rng = rng_for(13)
        queries = rng.normal(size=(75, 4, 9))
        sup = rng.normal(size=(4, 12))
        cfg = PGConfig(xi=5)
        batched, prov = generate_prototypes(Tensor(queries), Tensor(sup), cfg)
        for b in (0, 17, 74):
            single = generate_prototype(Tensor(queries[b]), Tensor(sup), cfg)
            npt.assert_array_equal(batched.data[b], single.fgcs.data)
            npt.assert_array_equal(prov.indices[b], single.provenance.indices)

    def test_multi_class_equals_per_class(self):
        rng = rng_for(14)
        queries = rng.normal(size=(6, 3, 5))
        sup_all = rng.normal(size=(4, 3, 8))
        cfg = PGConfig(xi=3)
        protos, prov = generate_prototypes_multi(Tensor(queries), Tensor(sup_all), cfg)
        for n in range(4):
            per, prov_n = generate_prototypes(Tensor(queries), Tensor(sup_all[n]), cfg)
            npt.assert_allclose(protos.data[n], per.data, atol=1e-12)
            npt.assert_array_equal(prov.indices[n], prov_n.indices)


class TestInvariants:
    @pytest.mark.parametrize("seed", range(10))
    @pytest.mark.parametrize("kind", ["cosine", "gaussian"])
    def test_weights_positive_and_sum_to_one(self, seed, kind):
        rng = rng_for(100 + seed)
        q = rng.normal(size=(3, 7))
        sup = rng.normal(size=(3, 11)) * 0.6
        proto = generate_prototype(Tensor(q), Tensor(sup),
                                   PGConfig(xi=4, similarity=kind))
        w = proto.provenance.weights
        assert (w > 0).all()
        npt.assert_allclose(w.sum(axis=1), 1.0, atol=1e-12)

    def test_cosine_positive_scaling_invariance(self):
        rng = rng_for(15)
        q = rng.normal(size=(4, 6))
        sup = rng.normal(size=(4, 9))
        cfg = PGConfig(xi=3, similarity="cosine")
        base = generate_prototype(Tensor(q), Tensor(sup), cfg)
        # power-of-two scaling keeps every float op exact: bit-level check
        scaled = generate_prototype(Tensor(4.0 * q), Tensor(2.0 * sup), cfg)
        npt.assert_array_equal(scaled.provenance.indices, base.provenance.indices)
        npt.assert_array_equal(scaled.provenance.weights, base.provenance.weights)
        npt.assert_array_equal(scaled.fgcs.data, 2.0 * base.fgcs.data)
        # arbitrary positive scalars: 1e-12-level
        scaled2 = generate_prototype(Tensor(1.7 * q), Tensor(0.31 * sup), cfg)
        npt.assert_array_equal(scaled2.provenance.indices, base.provenance.indices)
        npt.assert_allclose(scaled2.provenance.weights, base.provenance.weights,
                            atol=1e-12)

    def test_xi_equal_pool_is_convex_combination(self):
        rng = rng_for(16)
        q = rng.normal(size=(3, 4))
        sup = rng.normal(size=(3, 6))
        proto = generate_prototype(Tensor(q), Tensor(sup), PGConfig(xi=6))
        w = proto.provenance.weights
        assert (w > 0).all()
        npt.assert_allclose(w.sum(axis=1), 1.0, atol=1e-12)
        # explicit convex reconstruction from the recorded provenance
        for i in range(4):
            rebuilt = sum(w[i, m] * sup[:, j]
                          for m, j in enumerate(proto.provenance.indices[i]))
            npt.assert_allclose(proto.fgcs.data[:, i], rebuilt, atol=1e-12)
        hull_min = sup.min(axis=1) - 1e-9
        hull_max = sup.max(axis=1) + 1e-9
        assert (proto.fgcs.data >= hull_min[:, None]).all()
        assert (proto.fgcs.data <= hull_max[:, None]).all()


@pytest.mark.parametrize("seed", range(100))
def test_accelerated_path_matches_bruteforce_oracle(seed):
    """Randomized instances: c <= 8, T <= 50, K <= 5, xi in 1..9, both kinds."""
    rng = rng_for(1000 + seed)
    c = int(rng.integers(1, 9))
    t = int(rng.integers(1, 51))
    k = int(rng.integers(1, 6))
    kt = k * int(rng.integers(1, 11))
    xi = int(rng.integers(1, 10))
    kind = ("cosine", "gaussian")[seed % 2]
    q = rng.normal(size=(c, t))
    sup = rng.normal(size=(c, kt)) * 0.7
    proto = generate_prototype(Tensor(q), Tensor(sup),
                               PGConfig(xi=xi, similarity=kind, clamp_xi=True))
    want, idx, rho = prototype_oracle(q, sup, xi, kind)
    npt.assert_allclose(proto.fgcs.data, want, atol=1e-10)
    npt.assert_array_equal(proto.provenance.indices, idx)
    npt.assert_allclose(proto.provenance.weights, rho, atol=1e-10)
