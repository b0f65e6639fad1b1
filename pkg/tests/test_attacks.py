import io

import numpy as np
import pytest

from conftest import random_toy
from oracle import fd_input_grad, rel_error, symmetric_loss

from symdefense.attacks import (AttackSpec, adaptive_symmetry_pgd, adaptive_symmetry_pgd_batch, margin_loss,
                                p_schedule, perturbation_norm, pgd, pgd_batch, pick_target, project,
                                run_attack_batch, square_attack, square_attack_batch, symmetry_loss_and_grad)
from symdefense.group import A, B, C, E, ELEMENTS, apply, pullback
from symdefense.harness import select_correct
from symdefense.nn import forward_batch, loss_and_grads, loss_and_grads_batch, predict, predict_batch


def grid_images(rng, shape):
    return (rng.integers(0, 2 ** 24 + 1, size=shape) * 2.0 ** -24).astype(np.float32)


def assert_feasible(x, x_adv, norm, eps):
    assert x_adv.min() >= 0 and x_adv.max() <= 1
    assert perturbation_norm(x_adv - x, norm) <= eps + 1e-5


class TestSpec:
    def test_defaults(self):
        assert AttackSpec("pgd").targeted is True
        assert AttackSpec("square", "l2").p_init == 0.02
        assert AttackSpec("square", "linf").p_init == 0.01
        assert AttackSpec("adaptive_pgd").targeted is False

    def test_step_size(self):
        assert AttackSpec("pgd", "linf", 16 / 255, 100).step_size == pytest.approx(1.5686e-3, abs=1e-7)

    @pytest.mark.parametrize("kwargs", [dict(eps=-0.1), dict(steps_or_queries=0), dict(family="fgsm"),
                                        dict(norm="l1"), dict(family="square", targeted=True),
                                        dict(family="square", p_init=0.0), dict(family="square", p_init=1.5)])
    def test_invalid(self, kwargs):
        with pytest.raises(ValueError):
            AttackSpec(**kwargs)


class TestProject:
    def test_l2_radial(self, rng):
        d = rng.normal(size=(1, 4, 4))
        d *= 2 * 0.7 / np.linalg.norm(d)
        assert np.linalg.norm(project(d, "l2", 0.7)) == pytest.approx(0.7, rel=1e-12)

    def test_linf_clamp(self):
        np.testing.assert_array_equal(project(np.array([0.2, -0.01]), "linf", 0.05), [0.05, -0.01])

    @pytest.mark.parametrize("norm", ["l2", "linf"])
    def test_inside_ball_unchanged(self, rng, norm):
        d = (rng.normal(size=(1, 3, 3)) * 1e-3).astype(np.float32)
        assert project(d, norm, 1.0).tobytes() == d.tobytes()

    def test_negative_eps(self):
        with pytest.raises(ValueError):
            project(np.zeros(3), "linf", -1)


class TestPickTarget:
    def test_binary(self, rng):
        assert all(pick_target(0, 2, rng) == 1 for _ in range(100))

    def test_never_true_label(self, rng):
        assert all(pick_target(4, 10, rng) != 4 for _ in range(10_000))

    def test_uniform(self, rng):
        draws = np.array([pick_target(3, 10, rng) for _ in range(100_000)])
        counts = np.bincount(draws, minlength=10)
        assert counts[3] == 0
        expected = 100_000 / 9
        sigma = np.sqrt(100_000 * (1 / 9) * (8 / 9))
        others = np.delete(counts, 3)
        assert np.all(np.abs(others - expected) < 3 * sigma)
        chi2 = ((others - expected) ** 2 / expected).sum()
        assert chi2 < 26.1  # 99.9th percentile of chi-square with 8 degrees of freedom

    def test_single_class(self, rng):
        with pytest.raises(ValueError):
            pick_target(0, 1, rng)


@pytest.fixture
def toy():
    return random_toy(3)


class TestPGD:
    def test_zero_eps_is_identity(self, toy, rng):
        x = grid_images(rng, (1, 6, 6))
        label = predict(toy, x)
        res = pgd(toy, x, label, AttackSpec("pgd", "linf", 0.0, 10))
        assert res.x_adv.tobytes() == x.tobytes() and not res.success

    def test_single_step_linf_closed_form(self, toy, rng):
        for _ in range(10):
            x = grid_images(rng, (1, 6, 6))
            spec = AttackSpec("pgd", "linf", 0.03, 1, seed=int(rng.integers(1000)))
            target = pick_target(predict(toy, x), 3, np.random.default_rng(spec.seed))
            res = pgd(toy, x, predict(toy, x), spec)
            assert res.target == target
            g = loss_and_grads(toy, x, target).input_grad
            step = np.clip(-spec.step_size * np.sign(g), -spec.eps, spec.eps)
            np.testing.assert_allclose(res.x_adv, np.clip(x + step, 0, 1), atol=1e-6)

    def test_single_step_l2_direction(self, toy, rng):
        x = grid_images(rng, (1, 6, 6)) * np.float32(0.5) + np.float32(0.25)
        spec = AttackSpec("pgd", "l2", 0.1, 1)
        res = pgd(toy, x, 0, spec, target=2)
        g = loss_and_grads(toy, x, 2).input_grad.astype(np.float64)
        expected = x - spec.eps * g / np.linalg.norm(g)  # step 2.5 eps, projected back to radius eps
        np.testing.assert_allclose(res.x_adv, expected, atol=1e-6)

    @pytest.mark.parametrize("norm,eps", [("linf", 0.05), ("linf", 0.2), ("l2", 0.5), ("l2", 2.0)])
    def test_feasible(self, toy, rng, norm, eps):
        x = grid_images(rng, (20, 1, 6, 6))
        for r, xi in zip(pgd_batch(toy, x, rng.integers(0, 3, 20), AttackSpec("pgd", norm, eps, 15)), x):
            assert_feasible(xi, r.x_adv, norm, eps)

    def test_deterministic(self, toy, rng):
        x = grid_images(rng, (1, 6, 6))
        spec = AttackSpec("pgd", "l2", 0.5, 20, seed=7)
        assert pgd(toy, x, 1, spec).x_adv.tobytes() == pgd(toy, x, 1, spec).x_adv.tobytes()

    def test_batch_matches_single_with_same_seed(self, toy, rng):
        x = grid_images(rng, (3, 1, 6, 6))
        spec = AttackSpec("pgd", "linf", 0.1, 5)
        batch = pgd_batch(toy, x, [0, 1, 2], spec, seeds=[11, 12, 13])
        for i, r in enumerate(batch):
            single = pgd(toy, x[i], i, AttackSpec("pgd", "linf", 0.1, 5, seed=11 + i))
            assert r.target == single.target
            np.testing.assert_allclose(r.x_adv, single.x_adv, atol=1e-6)

    def test_trace_lines(self, toy, rng):
        buf = io.StringIO()
        pgd(toy, grid_images(rng, (1, 6, 6)), 0, AttackSpec("pgd", "linf", 0.1, 4), trace=buf)
        lines = buf.getvalue().splitlines()
        assert len(lines) == 5
        step, loss, norm = lines[-1].split("\t")
        assert int(step) == 4 and float(loss) >= 0 and float(norm) <= 0.1 + 1e-6

    def test_success_flag_means_target_hit(self, toy, rng):
        x = grid_images(rng, (30, 1, 6, 6))
        for r, xi in zip(pgd_batch(toy, x, predict_batch(toy, x), AttackSpec("pgd", "linf", 0.5, 20)), x):
            assert r.success == (predict(toy, r.x_adv) == r.target)


class TestSymmetryGradient:
    @pytest.mark.parametrize("seed", range(8))
    def test_summed_objective_finite_differences(self, seed):
        rng = np.random.default_rng(seed)
        net = random_toy(seed)
        x = 0.1 + 0.8 * rng.random((1, 6, 6))  # away from the box so probes stay in range
        label = int(rng.integers(3))
        _, grad = symmetry_loss_and_grad(net, x[None].astype(np.float32), np.array([label]))
        numeric, valid = fd_input_grad(lambda z: symmetric_loss(net, z, label, ELEMENTS), x)
        assert valid.mean() > 0.8
        assert np.all(rel_error(grad[0], numeric)[valid] < 1e-2)

    @pytest.mark.parametrize("g", [A, B, C])
    def test_chain_rule_through_one_symmetry(self, g, rng):
        net = random_toy(5)
        x = (0.1 + 0.8 * rng.random((1, 6, 6)))
        _, grad = symmetry_loss_and_grad(net, x[None].astype(np.float32), np.array([1]), (g,))
        at_image = loss_and_grads(net, apply(g, x).astype(np.float32), 1).input_grad
        np.testing.assert_allclose(grad[0], pullback(g, at_image), rtol=1e-6)
        numeric, valid = fd_input_grad(lambda z: symmetric_loss(net, z, 1, (g,)), x)
        assert np.all(rel_error(grad[0], numeric)[valid] < 1e-2)

    def test_loss_is_sum_of_views(self, toy, rng):
        x = grid_images(rng, (2, 1, 6, 6))
        loss, _ = symmetry_loss_and_grad(toy, x, np.array([0, 2]))
        parts = sum(loss_and_grads_batch(toy, apply(g, x), [0, 2], wrt_input=False).loss for g in ELEMENTS)
        np.testing.assert_allclose(loss, parts, rtol=1e-6)


class TestAdaptivePGD:
    def test_zero_eps(self, toy, rng):
        x = grid_images(rng, (1, 6, 6))
        assert adaptive_symmetry_pgd(toy, x, 0, AttackSpec("adaptive_pgd", "linf", 0.0, 5)).x_adv.tobytes() \
            == x.tobytes()

    @pytest.mark.parametrize("norm", ["linf", "l2"])
    def test_identity_group_matches_untargeted_pgd(self, toy, rng, norm):
        x = grid_images(rng, (4, 1, 6, 6))
        labels = [0, 1, 2, 0]
        a = adaptive_symmetry_pgd_batch(toy, x, labels, AttackSpec("adaptive_pgd", norm, 0.3, 12, seed=3),
                                        elements=(E,))
        b = pgd_batch(toy, x, labels, AttackSpec("pgd", norm, 0.3, 12, targeted=False, seed=3))
        for r, s in zip(a, b):
            assert r.x_adv.tobytes() == s.x_adv.tobytes()

    def test_ascends_summed_loss(self, toy, rng):
        x = grid_images(rng, (20, 1, 6, 6))
        labels = predict_batch(toy, x)
        before, _ = symmetry_loss_and_grad(toy, x, labels)
        res = adaptive_symmetry_pgd_batch(toy, x, labels, AttackSpec("adaptive_pgd", "linf", 0.1, 10))
        after = np.array([r.final_loss for r in res])
        assert np.mean(after >= before) >= 0.9

    @pytest.mark.parametrize("norm,eps", [("linf", 0.1), ("l2", 1.0)])
    def test_feasible(self, toy, rng, norm, eps):
        x = grid_images(rng, (10, 1, 6, 6))
        for r, xi in zip(adaptive_symmetry_pgd_batch(toy, x, [1] * 10, AttackSpec("adaptive_pgd", norm, eps, 10)), x):
            assert_feasible(xi, r.x_adv, norm, eps)


class TestSquare:
    def test_schedule(self):
        assert p_schedule(0.01, 0, 10_000) == 0.01
        assert p_schedule(0.01, 11, 10_000) == 0.005
        assert p_schedule(0.01, 600, 10_000) == 0.01 / 16
        assert p_schedule(0.01, 9999, 10_000) == 0.01 / 512
        # the schedule is rescaled to shorter budgets
        assert p_schedule(0.01, 60, 1000) == 0.01 / 16

    def test_margin_loss(self):
        logits = np.array([[1.0, 3.0, 2.0], [5.0, 1.0, 0.0]])
        np.testing.assert_array_equal(margin_loss(logits, np.array([2, 0])), [-1.0, 4.0])

    def test_already_misclassified(self, toy, rng):
        x = grid_images(rng, (1, 6, 6))
        wrong = (predict(toy, x) + 1) % 3
        res = square_attack(toy, x, wrong, AttackSpec("square", "linf", 0.1, 100))
        assert res.success and res.queries_used <= 1 and res.x_adv.tobytes() == x.tobytes()

    @pytest.mark.parametrize("norm,eps", [("linf", 0.05), ("linf", 0.3), ("l2", 0.5), ("l2", 3.0)])
    def test_trace_and_feasibility(self, toy, rng, norm, eps):
        x = grid_images(rng, (15, 1, 6, 6))
        labels = predict_batch(toy, x)
        results = square_attack_batch(toy, x, labels, AttackSpec("square", norm, eps, 200))
        for i, r in enumerate(results):
            assert_feasible(x[i], r.x_adv, norm, eps)
            assert r.queries_used <= 200
            trace = np.array(r.margin_trace)
            assert np.all(np.diff(trace) < 0)  # accepted iff the margin strictly decreases
            assert r.success == (predict(toy, r.x_adv) != labels[i])
            margin = margin_loss(forward_batch(toy, r.x_adv[None]), labels[i:i + 1])[0]
            assert r.final_loss == pytest.approx(margin, abs=1e-5)
            if not r.success:
                assert r.queries_used == 200

    def test_larger_image_feasibility(self, rng):
        net = random_toy(1, shape=(3, 16, 16), classes=4)
        x = grid_images(rng, (4, 3, 16, 16))
        labels = predict_batch(net, x)
        for norm, eps in (("linf", 8 / 255), ("l2", 1.0)):
            for r, xi in zip(square_attack_batch(net, x, labels, AttackSpec("square", norm, eps, 100)), x):
                assert_feasible(xi, r.x_adv, norm, eps)

    def test_deterministic(self, toy, rng):
        x = grid_images(rng, (1, 6, 6))
        spec = AttackSpec("square", "l2", 1.0, 50, seed=5)
        a, b = square_attack(toy, x, predict(toy, x), spec), square_attack(toy, x, predict(toy, x), spec)
        assert a.x_adv.tobytes() == b.x_adv.tobytes() and a.margin_trace == b.margin_trace


def test_dispatch(toy, rng):
    x = grid_images(rng, (2, 1, 6, 6))
    for family in ("pgd", "square", "adaptive_pgd"):
        res = run_attack_batch(toy, x, [0, 1], AttackSpec(family, "linf", 0.1, 5))
        assert len(res) == 2


@pytest.fixture(scope="module")
def net(trained_mnist):
    return trained_mnist("none")


class TestTrained:
    def test_targeted_loss_decreases(self, net, mnist_test):
        idx = select_correct(net, mnist_test, 100)
        x, y = mnist_test.images[idx], mnist_test.labels[idx]
        res = pgd_batch(net, x, y, AttackSpec("pgd", "linf", 0.1, 40))
        targets = np.array([r.target for r in res])
        initial = loss_and_grads_batch(net, x, targets, wrt_input=False).loss
        final = np.array([r.final_loss for r in res])
        assert np.mean(final <= initial) >= 0.9

    @pytest.mark.slow
    def test_square_beats_random_noise(self, net, mnist_test):
        eps = 0.05
        idx = select_correct(net, mnist_test, 100)
        x, y = mnist_test.images[idx], mnist_test.labels[idx]
        res = square_attack_batch(net, x, y, AttackSpec("square", "linf", eps, 10_000))
        square_rate = np.mean([r.success for r in res])
        noise = np.random.default_rng(0).choice(np.float32([-eps, eps]), size=x.shape)
        noise_rate = np.mean(predict_batch(net, np.clip(x + noise, 0, 1)) != y)
        print(f"square success {square_rate:.3f} vs random +-eps noise {noise_rate:.3f}")
        assert square_rate > noise_rate
