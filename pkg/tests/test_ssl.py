import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from habmap.nnet import Network, NetworkConfig, TrainConfig, predict_proba, train
from habmap.ssl import (
    IICConfig,
    PseudoLabelSet,
    SSLError,
    cluster_assignments,
    iic_joint,
    iic_loss,
    iic_loss_grad,
    iic_pretrain,
    noisy_student_train,
    pseudo_label,
)
from habmap.synth import two_texture_patches


def random_rows(rng, B, C, sharp):
    z = rng.normal(size=(B, C)) * sharp
    e = np.exp(z - z.max(1, keepdims=True))
    return e / e.sum(1, keepdims=True)


def toy_set(n, seed):
    rng = np.random.default_rng(seed)
    y = np.arange(n) % 2
    X = rng.normal(0, 0.3, size=(n, 2, 5, 5))
    X[:, 0] += (2 * y - 1)[:, None, None]
    return X, y


class TestIICLoss:
    def test_uniform_rows_zero(self):
        z = np.full((8, 4), 0.25)
        assert iic_loss(z, z) == pytest.approx(0.0, abs=1e-12)
        np.testing.assert_allclose(iic_joint(z, z), 1 / 16)

    def test_diagonal_joint_ln2(self):
        z = np.repeat(np.eye(2), 5, axis=0)
        np.testing.assert_allclose(iic_joint(z, z), np.diag([0.5, 0.5]))
        assert -iic_loss(z, z) == pytest.approx(math.log(2), abs=1e-6)

    def test_rejects_unnormalized(self):
        with pytest.raises(SSLError):
            iic_loss(np.ones((2, 2)), np.full((2, 2), 0.5))
        with pytest.raises(SSLError):
            iic_loss(np.full((2, 2), 0.5), np.full((3, 2), 0.5))

    @given(st.integers(0, 2**32 - 1), st.integers(1, 40), st.integers(2, 8), st.floats(0.1, 20))
    def test_mi_bounds_and_symmetry(self, seed, B, C, sharp):
        rng = np.random.default_rng(seed)
        z, zp = random_rows(rng, B, C, sharp), random_rows(rng, B, C, sharp)
        P = iic_joint(z, zp)
        assert (P >= 0).all()
        assert P.sum() == pytest.approx(1.0, abs=1e-6)
        np.testing.assert_array_equal(P, P.T)
        mi = -iic_loss(z, zp)
        assert -1e-9 <= mi <= math.log(C) + 1e-9
        assert iic_loss(zp, z) == iic_loss(z, zp)

    def test_gradient_finite_difference(self):
        rng = np.random.default_rng(3)
        z, zp = random_rows(rng, 6, 3, 2.0), random_rows(rng, 6, 3, 2.0)
        _, dz, dzp = iic_loss_grad(z, zp)
        eps = 1e-6
        # move mass between two entries of one row so both stay on the simplex
        d = np.zeros_like(z)
        d[2, 0], d[2, 1] = eps, -eps
        fd_z = (iic_loss(z + d, zp) - iic_loss(z - d, zp)) / (2 * eps)
        fd_zp = (iic_loss(z, zp + d) - iic_loss(z, zp - d)) / (2 * eps)
        assert fd_z == pytest.approx(dz[2, 0] - dz[2, 1], rel=1e-5, abs=1e-8)
        assert fd_zp == pytest.approx(dzp[2, 0] - dzp[2, 1], rel=1e-5, abs=1e-8)


class TestIICPretrain:
    def test_head_must_match_clusters(self):
        with pytest.raises(SSLError):
            iic_pretrain(Network(NetworkConfig(3, 3, (4,))), np.zeros((4, 3, 5, 5)), IICConfig(n_clusters=2))
        with pytest.raises(SSLError):
            IICConfig(n_clusters=1)

    def test_deterministic_and_loss_decreases(self):
        X, _ = two_texture_patches(64, 9, 3, seed=1)
        cfg = IICConfig(n_clusters=2, epochs=4, batch_size=32, lr=3e-3, input_size=9)
        a, ha = iic_pretrain(Network(NetworkConfig(2, 3, (4,)), seed=0), X, cfg, seed=0)
        b, hb = iic_pretrain(Network(NetworkConfig(2, 3, (4,)), seed=0), X, cfg, seed=0)
        assert a.digest() == b.digest()
        assert ha == hb
        assert ha[-1] <= ha[0]

    def test_two_textures_cluster(self):
        X, y = two_texture_patches(512, 9, 3, seed=0)
        net = Network(NetworkConfig(2, 3, (8, 16)), seed=0)
        cfg = IICConfig(n_clusters=2, epochs=50, batch_size=128, lr=3e-3, input_size=9)
        net, _ = iic_pretrain(net, X, cfg, seed=0)
        a = cluster_assignments(net, X)
        assert max((a == y).mean(), (a != y).mean()) >= 0.9


class TestNoisyStudent:
    def test_zero_head_teacher_uniform(self):
        teacher = Network(NetworkConfig(4, 2, (4,)), zero_head=True)
        X = np.random.default_rng(0).normal(size=(5, 2, 7, 7))
        ps = pseudo_label(teacher, X, tta_rounds=3, input_size=5)
        np.testing.assert_allclose(ps.probs, 0.25)
        assert ps.teacher_hash == teacher.digest()
        with pytest.raises(SSLError):
            pseudo_label(teacher, np.zeros((2, 3, 5, 5)))

    def test_pseudo_labels_rows_and_determinism(self):
        teacher = Network(NetworkConfig(3, 2, (4,)), seed=2)
        X = np.random.default_rng(1).normal(size=(6, 2, 5, 5))
        a = pseudo_label(teacher, X, tta_rounds=4, seed=9, input_size=5)
        b = pseudo_label(teacher, X, tta_rounds=4, seed=9, input_size=5)
        np.testing.assert_allclose(a.probs.sum(1), 1.0, atol=1e-6)
        np.testing.assert_array_equal(a.probs, b.probs)

    def test_pslb_round_trip(self, tmp_path):
        ps = PseudoLabelSet(("a", "bé"), np.array([[0.25, 0.75], [1.0, 0.0]]), "ab" * 32)
        ps.save(tmp_path / "p.pslb")
        back = PseudoLabelSet.load(tmp_path / "p.pslb")
        assert back.ids == ps.ids and back.teacher_hash == ps.teacher_hash
        np.testing.assert_allclose(back.probs, ps.probs)
        with pytest.raises(SSLError):
            PseudoLabelSet.from_bytes(b"NOPE")

    def test_student_learns_from_teacher(self):
        X, y = toy_set(20, 0)
        Xu, _ = toy_set(40, 1)
        cfg = TrainConfig(epochs=40, batch_size=10, lr=1e-2, input_size=5)
        teacher = Network(NetworkConfig(2, 2, (4,)), seed=0)
        train(teacher, X, y, cfg)
        assert (predict_proba(teacher, X).argmax(1) == y).mean() == 1.0
        student, log = noisy_student_train(teacher, X, y, Xu, cfg, student_seed=1)
        assert len(log.epochs) == 40
        assert (predict_proba(student, X).argmax(1) == y).mean() >= 0.95

    def test_empty_unlabeled_is_plain_training(self):
        X, y = toy_set(10, 0)
        cfg = TrainConfig(epochs=3, batch_size=5, lr=1e-2, input_size=5)
        teacher = Network(NetworkConfig(2, 2, (4,)), seed=0)
        student, _ = noisy_student_train(teacher, X, y, np.zeros((0, 2, 5, 5)), cfg, student_seed=4)
        plain = Network(NetworkConfig(2, 2, (4,)), seed=4)
        train(plain, X, y, cfg)
        assert student.digest() == plain.digest()

    def test_empty_labeled(self):
        t = Network(NetworkConfig(2, 2, (4,)))
        with pytest.raises(SSLError):
            noisy_student_train(t, np.zeros((0, 2, 5, 5)), np.zeros(0, int), None, TrainConfig(input_size=5))

    def test_pretrained_frozen_student(self):
        X, y = toy_set(10, 0)
        pre = Network(NetworkConfig(5, 2, (4,)), seed=7)
        teacher = Network(NetworkConfig(2, 2, (4,)), seed=0)
        cfg = TrainConfig(epochs=2, batch_size=5, input_size=5, freeze_conv=True)
        student, _ = noisy_student_train(teacher, X, y, toy_set(10, 2)[0], cfg, pretrained=pre)
        assert student.conv_frozen
        np.testing.assert_array_equal(student.features(X), pre.features(X))
