"""Relation distributions, relational consistency, InfoNCE and the warm-up blend."""

import math

import numpy as np
import pytest
import torch
import torch.nn.functional as F

from ressl.errors import ShapeError
from ressl.loss import (
    RelationDistribution,
    TemperaturePair,
    WarmupSchedule,
    info_nce,
    relation_distribution,
    relation_entropy,
    relational_consistency,
    total_loss,
    warmup_weight,
)


def _unit(rows, dim, seed=0):
    gen = torch.Generator().manual_seed(seed)
    return F.normalize(torch.randn(rows, dim, generator=gen, dtype=torch.float64), dim=1)


class TestRelationDistribution:
    """softmax over similarities to the bank, one row per embedding."""

    def test_rows_are_stochastic(self):
        p = relation_distribution(_unit(8, 16), _unit(64, 16, seed=1), tau=0.1)
        assert p.shape == (8, 64)
        np.testing.assert_allclose(p.probs.sum(dim=1).numpy(), 1.0, atol=1e-5)
        assert torch.all(p.probs >= 0)

    def test_hand_computed_values(self):
        """z = e1 against bank {e1, e2} at tau = 1 gives [e, 1] / (e + 1)."""
        z = torch.tensor([[1.0, 0.0]], dtype=torch.float64)
        bank = torch.eye(2, dtype=torch.float64)
        p = relation_distribution(z, bank, tau=1.0)
        expected = np.array([[math.e, 1.0]]) / (math.e + 1.0)
        np.testing.assert_allclose(p.probs.numpy(), expected, atol=1e-12)

    def test_lower_temperature_sharpens(self):
        z, bank = _unit(8, 16), _unit(64, 16, seed=1)
        soft = relation_entropy(relation_distribution(z, bank, tau=0.1))
        sharp = relation_entropy(relation_distribution(z, bank, tau=0.04))
        assert sharp < soft

    def test_empty_bank_rejected(self):
        with pytest.raises(ValueError):
            relation_distribution(_unit(4, 8), torch.empty(0, 8, dtype=torch.float64), tau=0.1)

    def test_dimension_mismatch_rejected(self):
        with pytest.raises(ShapeError):
            relation_distribution(_unit(4, 8), _unit(16, 12), tau=0.1)

    def test_bank_receives_no_gradient(self):
        bank = _unit(16, 8).requires_grad_(True)
        z = _unit(4, 8).requires_grad_(True)
        relation_distribution(z, bank, 0.1).log_probs.sum().backward()
        assert bank.grad is None
        assert z.grad is not None


class TestRelationalConsistency:
    """Cross-entropy of the student relation against the detached teacher relation."""

    def test_kl_is_non_negative(self):
        bank = _unit(128, 32, seed=3)
        for seed in range(5):
            p1 = relation_distribution(_unit(16, 32, seed=10 + seed), bank, 0.1)
            p2 = relation_distribution(_unit(16, 32, seed=20 + seed), bank, 0.04)
            kl = relational_consistency(p1, p2) - relation_entropy(p2)
            assert kl.item() >= -1e-8

    def test_identical_inputs_give_zero_kl(self):
        """tau_s = tau_t and z1 = z2: cross-entropy equals the teacher entropy."""
        z, bank = _unit(16, 32), _unit(128, 32, seed=1)
        p1 = relation_distribution(z, bank, 0.1)
        p2 = relation_distribution(z, bank, 0.1)
        kl = relational_consistency(p1, p2) - relation_entropy(p2)
        assert abs(kl.item()) <= 1e-8

    def test_one_hot_teacher_reduces_to_nearest_neighbor_infonce(self):
        """A one-hot target at the bank row nearest to z2 is InfoNCE with that row as the positive."""
        z1, z2, bank = _unit(16, 32), _unit(16, 32, seed=1), _unit(128, 32, seed=2)
        nearest = (z2 @ bank.T).argmax(dim=1)
        target = RelationDistribution.from_probs(F.one_hot(nearest, bank.shape[0]).to(torch.float64))
        loss = relational_consistency(relation_distribution(z1, bank, 0.1), target)
        oracle = F.cross_entropy(z1 @ bank.T / 0.1, nearest)
        assert abs(loss.item() - oracle.item()) <= 1e-10

    def test_very_low_teacher_temperature_approaches_one_hot(self):
        z1, z2, bank = _unit(8, 16), _unit(8, 16, seed=1), _unit(64, 16, seed=2)
        nearest = (z2 @ bank.T).argmax(dim=1)
        sharp = relational_consistency(relation_distribution(z1, bank, 0.1), relation_distribution(z2, bank, 1e-6))
        oracle = F.cross_entropy(z1 @ bank.T / 0.1, nearest)
        np.testing.assert_allclose(sharp.item(), oracle.item(), atol=1e-6)

    def test_shape_mismatch_rejected(self):
        bank = _unit(32, 8)
        with pytest.raises(ShapeError):
            relational_consistency(relation_distribution(_unit(4, 8), bank, 0.1),
                                   relation_distribution(_unit(5, 8), bank, 0.1))

    def test_gradient_matches_finite_differences(self):
        bank = _unit(12, 6, seed=1)
        z2 = _unit(3, 6, seed=2)
        z1 = _unit(3, 6).requires_grad_(True)

        def loss(z):
            return relational_consistency(relation_distribution(z, bank, 0.1), relation_distribution(z2, bank, 0.04))

        assert torch.autograd.gradcheck(loss, (z1,), eps=1e-4, atol=1e-5)

    def test_teacher_side_receives_no_gradient(self):
        bank = _unit(32, 8, seed=1)
        z1 = _unit(4, 8).requires_grad_(True)
        z2 = _unit(4, 8, seed=2).requires_grad_(True)
        p2 = RelationDistribution.from_logits(z2 @ bank.T / 0.04, 0.04)
        relational_consistency(relation_distribution(z1, bank, 0.1), p2).backward()
        assert z1.grad is not None
        assert z2.grad is None


class TestInfoNCE:
    def test_matches_cross_entropy_oracle(self):
        z1, z2, bank = _unit(8, 16), _unit(8, 16, seed=1), _unit(32, 16, seed=2)
        logits = torch.cat([(z1 * z2).sum(dim=1, keepdim=True), z1 @ bank.T], dim=1) / 0.2
        oracle = F.cross_entropy(logits, torch.zeros(8, dtype=torch.long))
        np.testing.assert_allclose(info_nce(z1, z2, bank, 0.2).item(), oracle.item(), atol=1e-12)

    def test_misaligned_positives_rejected(self):
        with pytest.raises(ShapeError):
            info_nce(_unit(4, 8), _unit(3, 8), _unit(16, 8), 0.2)


class TestTemperaturePair:
    def test_teacher_hotter_than_student_rejected(self):
        with pytest.raises(ValueError, match="sharper"):
            TemperaturePair(tau_s=0.1, tau_t=0.2)

    def test_non_positive_rejected(self):
        with pytest.raises(ValueError):
            TemperaturePair(tau_s=0.1, tau_t=0.0)

    def test_equal_temperatures_accepted_without_sharpening(self):
        pair = TemperaturePair(tau_s=0.1, tau_t=0.1)
        assert not pair.sharpens
        assert TemperaturePair().sharpens


class TestWarmup:
    """alpha = min(step / warmup_steps, 1)."""

    def test_ramp(self):
        sched = WarmupSchedule(warmup_steps=100)
        assert warmup_weight(0, sched) == 0.0
        assert warmup_weight(50, sched) == 0.5
        assert warmup_weight(100, sched) == 1.0
        assert warmup_weight(10_000, sched) == 1.0

    def test_invalid_inputs(self):
        with pytest.raises(ValueError):
            WarmupSchedule(warmup_steps=0)
        with pytest.raises(ValueError):
            warmup_weight(-1, WarmupSchedule(10))

    def test_blend_endpoints(self):
        z1, z2, bank = _unit(8, 16), _unit(8, 16, seed=1), _unit(32, 16, seed=2)
        temps = TemperaturePair(0.1, 0.04)
        rel, parts = total_loss(z1, z2, bank, temps, alpha=1.0)
        nce, _ = total_loss(z1, z2, bank, temps, alpha=0.0)
        np.testing.assert_allclose(rel.item(), parts["loss_rel"], atol=1e-12)
        np.testing.assert_allclose(nce.item(), parts["loss_nce"], atol=1e-12)
        mid, _ = total_loss(z1, z2, bank, temps, alpha=0.25)
        np.testing.assert_allclose(mid.item(), 0.25 * rel.item() + 0.75 * nce.item(), atol=1e-12)

    def test_alpha_out_of_range_rejected(self):
        with pytest.raises(ValueError):
            total_loss(_unit(2, 4), _unit(2, 4), _unit(8, 4), TemperaturePair(), alpha=1.5)


def _naive_relation(z, bank, tau):
    rows = []
    for zi in z:
        logits = [sum(a * b for a, b in zip(zi, bk)) / tau for bk in bank]
        top = max(logits)
        weights = [math.exp(v - top) for v in logits]
        total = sum(weights)
        rows.append([w / total for w in weights])
    return rows


def _naive_consistency(z1, z2, bank, tau_s, tau_t):
    p1 = _naive_relation(z1, bank, tau_s)
    p2 = _naive_relation(z2, bank, tau_t)
    total = 0.0
    for row1, row2 in zip(p1, p2):
        total -= sum(b * math.log(a) for a, b in zip(row1, row2) if b > 0)
    return total / len(z1)


def _naive_info_nce(z1, z2, bank, tau):
    total = 0.0
    for q, k in zip(z1, z2):
        pos = sum(a * b for a, b in zip(q, k)) / tau
        logits = [pos] + [sum(a * b for a, b in zip(q, bk)) / tau for bk in bank]
        top = max(logits)
        total -= pos - (top + math.log(sum(math.exp(v - top) for v in logits)))
    return total / len(z1)


def _random_instance(rng):
    b, k, d = rng.integers(1, 5), rng.integers(1, 17), rng.integers(1, 9)

    def unit(n):
        x = rng.normal(size=(n, d))
        return x / np.linalg.norm(x, axis=1, keepdims=True)

    tau_s = float(rng.uniform(0.05, 0.5))
    tau_t = float(rng.uniform(0.02, tau_s))
    return unit(b), unit(b), unit(k), tau_s, tau_t, float(rng.uniform(0.0, 1.0))


class TestNaiveSummation:
    """Every loss term against a plain double-loop evaluation in float64."""

    def test_random_instances(self):
        rng = np.random.default_rng(7)
        for _ in range(100):
            z1, z2, bank, tau_s, tau_t, alpha = _random_instance(rng)
            t1, t2, tb = (torch.from_numpy(a) for a in (z1, z2, bank))

            probs = relation_distribution(t1, tb, tau_s).probs.numpy()
            np.testing.assert_allclose(probs, _naive_relation(z1.tolist(), bank.tolist(), tau_s), rtol=0, atol=1e-10)

            expected_rel = _naive_consistency(z1.tolist(), z2.tolist(), bank.tolist(), tau_s, tau_t)
            rel = relational_consistency(relation_distribution(t1, tb, tau_s), relation_distribution(t2, tb, tau_t))
            assert abs(rel.item() - expected_rel) <= 1e-10

            expected_nce = _naive_info_nce(z1.tolist(), z2.tolist(), bank.tolist(), tau_s)
            assert abs(info_nce(t1, t2, tb, tau_s).item() - expected_nce) <= 1e-10

            loss, _ = total_loss(t1, t2, tb, TemperaturePair(tau_s, tau_t), alpha)
            assert abs(loss.item() - (alpha * expected_rel + (1 - alpha) * expected_nce)) <= 1e-10

    def test_total_loss_gradient_matches_central_differences(self):
        rng = np.random.default_rng(11)
        eps = 1e-4
        for _ in range(20):
            z1, z2, bank, tau_s, tau_t, alpha = _random_instance(rng)
            t2, tb = torch.from_numpy(z2), torch.from_numpy(bank)
            temps = TemperaturePair(tau_s, tau_t)

            t1 = torch.from_numpy(z1.copy()).requires_grad_(True)
            total_loss(t1, t2, tb, temps, alpha)[0].backward()
            analytic = t1.grad.numpy()

            numeric = np.zeros_like(z1)
            for idx in np.ndindex(*z1.shape):
                plus, minus = z1.copy(), z1.copy()
                plus[idx] += eps
                minus[idx] -= eps
                f_plus = total_loss(torch.from_numpy(plus), t2, tb, temps, alpha)[0].item()
                f_minus = total_loss(torch.from_numpy(minus), t2, tb, temps, alpha)[0].item()
                numeric[idx] = (f_plus - f_minus) / (2 * eps)
            error = np.linalg.norm(analytic - numeric)
            assert error <= 1e-3 * np.linalg.norm(numeric) + 1e-7


class TestWorkedValues:
    def test_four_row_bank(self):
        z = torch.tensor([[1.0, 0.0]], dtype=torch.float64)
        bank = torch.tensor([[1.0, 0.0], [0.0, 1.0], [-1.0, 0.0], [0.0, -1.0]], dtype=torch.float64)
        probs = relation_distribution(z, bank, 0.1).probs[0].numpy()
        np.testing.assert_allclose(probs, [0.999909, 4.5396e-5, 2.061e-9, 4.5396e-5], rtol=1e-3)

    def test_info_nce_closed_form(self):
        z = torch.tensor([[1.0, 0.0]], dtype=torch.float64)
        bank = torch.tensor([[0.0, 1.0], [0.0, -1.0]], dtype=torch.float64)
        assert info_nce(z, z, bank, 0.1).item() == pytest.approx(math.log1p(2 * math.exp(-10)), rel=1e-12)

    def test_uniform_relations_give_log_k(self):
        z = torch.tensor([[0.0, 0.0, 1.0]], dtype=torch.float64)
        bank = torch.tensor([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [-1.0, 0.0, 0.0], [0.0, -1.0, 0.0]],
                            dtype=torch.float64)
        p = relation_distribution(z, bank, 0.1)
        assert relational_consistency(p, relation_distribution(z, bank, 0.04)).item() == pytest.approx(math.log(4))

    def test_equal_similarities_give_log_k_plus_one(self):
        z = torch.tensor([[0.0, 0.0, 1.0]], dtype=torch.float64)
        k = torch.tensor([[1.0, 0.0, 0.0]], dtype=torch.float64)
        bank = torch.tensor([[0.0, 1.0, 0.0], [0.0, -1.0, 0.0]], dtype=torch.float64)
        assert info_nce(z, k, bank, 0.1).item() == pytest.approx(math.log(3))

    def test_shared_similarity_offset_leaves_relation_unchanged(self):
        """Adding the same amount to every similarity of a row does not move its softmax."""
        z, bank = _unit(6, 8), _unit(20, 8, seed=1)
        shifted_z = torch.cat([z, torch.full((6, 1), 0.7, dtype=torch.float64)], dim=1)
        shifted_bank = torch.cat([bank, torch.full((20, 1), 1.3, dtype=torch.float64)], dim=1)
        base = relation_distribution(z, bank, 0.1).probs
        shifted = relation_distribution(shifted_z, shifted_bank, 0.1).probs
        torch.testing.assert_close(shifted, base, rtol=0, atol=1e-12)
