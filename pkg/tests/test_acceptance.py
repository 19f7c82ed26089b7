"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Criteria 5-10 train real models; the full module takes on the order of 1.5 to
2 CPU-hours. Heavy artifacts (datasets, trained models) are built once per
session and shared across criteria.
"""

import math
import time
from contextlib import contextmanager
from dataclasses import replace

import numpy as np
import pytest
import torch

from helpers import (
    assert_grads_close,
    finite_difference_grad,
    scalar_pixel_oracle,
)

from radiofield3d.encoder import EncoderConfig
from radiofield3d.fusion import build_model
from radiofield3d.grids import SupervisionSpec, build_pseudo_volume
from radiofield3d.losses import (
    LossWeights,
    PixelLossConfig,
    RenderParams,
    composite_weights,
    js_divergence,
    linear_volume_loss,
    mse_loss,
    pixel_loss,
    radio_rendering_loss,
    soft_histogram,
    total_loss,
)
from radiofield3d.metrics import psnr, rmse, ssim
from radiofield3d.rm3d import load_scene
from radiofield3d.scene import SceneConfig, generate_dataset, generate_scene, load_manifest
from radiofield3d.training import TrainConfig, evaluate, evaluate_scenes, train, train_scenes

# Weak-supervision study (criteria 6 and 7): dataset size, supervision and
# seed count are pinned by the criteria; the epoch budget is calibrated so
# both objectives converge on labeled layers (see notes in the repo README).
WS_SCENES = 200
WS_SEEDS = (0, 1, 2)
WS_EPOCHS = 150
WS_SUPERVISION = SupervisionSpec(layer_indices=(0, 3, 7))

# Altitude-strategy and sampling-density studies (criteria 8 and 9) run on a
# smaller dataset with a shorter schedule.
STRAT_SCENES = 60
STRAT_EPOCHS = 40
STRAT_SEEDS = (0, 1, 2)
SAMPLING_COUNTS = (5, 25, 100)


@contextmanager
def criterion(number: int, name: str):
    start = time.time()
    try:
        yield
    except Exception:
        print(f"\nACCEPTANCE {number} ({name}): FAIL [{time.time() - start:.0f}s]")
        raise
    print(f"\nACCEPTANCE {number} ({name}): PASS [{time.time() - start:.0f}s]")


def desk_model(seed: int):
    return build_model(64, 64, np.arange(1.0, 9.0), seed=seed)


@pytest.fixture(scope="session")
def desk_dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("desk200")
    return generate_dataset(SceneConfig(), WS_SCENES, seed=1000, out_dir=out)


@pytest.fixture(scope="session")
def strat_dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("strat60")
    return generate_dataset(SceneConfig(), STRAT_SCENES, seed=2000, out_dir=out)


def _train_and_report(manifest, supervision, config, out_dir, run_name, k_eval=None):
    model = desk_model(config.seed)
    train(model, manifest, supervision, config, out_dir, run_name=run_name)
    report = evaluate(
        model, manifest, "test", supervision,
        k_eval or config.samples_per_scene, seed=0,
    )
    return model, report


@pytest.fixture(scope="session")
def weak_supervision_reports(desk_dataset, tmp_path_factory):
    """Six trained models: {jsil, mse-weak} x 3 seeds on the 200-scene set."""
    out = tmp_path_factory.mktemp("ws_runs")
    reports = {}
    for objective in ("jsil", "mse-weak"):
        for seed in WS_SEEDS:
            config = TrainConfig(
                epochs=WS_EPOCHS, batch_size=4, val_every=10, seed=seed,
                objective=objective, samples_per_scene=50,
            )
            _, report = _train_and_report(
                desk_dataset, WS_SUPERVISION, config, out, f"{objective}_s{seed}"
            )
            reports[(objective, seed)] = report
    return reports


class TestCriterion1Gradients:
    def test_gradient_suite(self):
        with criterion(1, "gradient suite"):
            start = time.time()
            rng = np.random.default_rng(100)
            altitudes = np.arange(1.0, 5.0)
            supervision = SupervisionSpec(layer_indices=(0, 2))
            gt = rng.random((4, 8, 8))
            pseudo = build_pseudo_volume(gt[[0, 2]], altitudes[[0, 2]], altitudes)
            heights = rng.uniform(0, 3, (8, 8))
            coords = np.column_stack(
                [rng.integers(0, 8, 10), rng.integers(0, 8, 10),
                 rng.choice(altitudes, 10)]
            ).astype(float)
            values = rng.random(10)
            pred = torch.tensor(
                rng.uniform(0.05, 0.95, (4, 8, 8)), requires_grad=True
            )
            as64 = lambda arr: torch.as_tensor(np.asarray(arr), dtype=torch.float64)
            weights = LossWeights()
            render_params = RenderParams.for_altitudes(altitudes)
            pixel_config = PixelLossConfig()

            term_fns = {
                "L_v": lambda: linear_volume_loss(
                    pred, as64(gt[[0, 2]]), supervision.layer_indices,
                    as64(pseudo.data), weights,
                )[0],
                "L_r": lambda: radio_rendering_loss(
                    pred, altitudes, as64(heights), render_params, 0.1, 4.0
                ),
                "L_p": lambda: pixel_loss(
                    pred, altitudes, as64(coords), as64(values), pixel_config, 0.1
                ),
                "L_total": lambda: total_loss(
                    pred, altitudes, supervision, as64(gt[[0, 2]]),
                    as64(pseudo.data), as64(heights), as64(coords), as64(values),
                    weights, render_params, pixel_config, 4.0,
                ).total,
                "MSE": lambda: mse_loss(pred, as64(gt)),
            }
            for name, fn in term_fns.items():
                analytic = torch.autograd.grad(fn(), pred)[0]
                numeric = finite_difference_grad(fn, pred)
                assert_grads_close(analytic, numeric, rtol=1e-4, context=name)

            # End-to-end: every parameter of a 16x16 / N=4 / k=5 model (sized
            # so the exhaustive finite-difference sweep stays inside the
            # 2-minute budget).
            enc = EncoderConfig(
                num_freqs=1, d_model=4, patch_size=8, depth=1, heads=2,
                mlp_ratio=2.0,
            )
            model = build_model(
                16, 16, np.arange(1.0, 5.0), enc, seed=0,
                base_channels=4, channel_floor=4, groupnorm_groups=2,
            ).double()
            m_alts = np.arange(1.0, 5.0)
            m_heights = as64(rng.uniform(0, 3, (1, 16, 16)))
            m_coords = as64(
                np.column_stack(
                    [rng.integers(0, 16, 5), rng.integers(0, 16, 5),
                     rng.choice(m_alts, 5)]
                )
            ).unsqueeze(0)
            m_values = as64(rng.random(5)).unsqueeze(0)
            m_gt = rng.random((4, 16, 16))
            m_sup = SupervisionSpec(layer_indices=(0, 3))
            m_pseudo = build_pseudo_volume(m_gt[[0, 3]], m_alts[[0, 3]], m_alts)

            def end_to_end():
                volume = model(m_heights, m_coords, m_values)[0]
                rp = RenderParams.for_altitudes(
                    m_alts, k_gain=model.render_k, t_threshold=model.render_t
                )
                return total_loss(
                    volume, m_alts, m_sup, as64(m_gt[[0, 3]]), as64(m_pseudo.data),
                    m_heights[0], m_coords[0], m_values[0], weights, rp,
                    pixel_config, 4.0,
                ).total

            params = list(model.named_parameters())
            loss = end_to_end()
            grads = torch.autograd.grad(loss, [p for _, p in params], allow_unused=True)
            n_checked = 0
            for (name, param), grad in zip(params, grads):
                analytic = torch.zeros_like(param) if grad is None else grad
                # Step 1e-6 keeps the O(h^2) truncation of the central
                # difference below the 1e-3 relative bound for tiny entries.
                numeric = finite_difference_grad(end_to_end, param, step=1e-6)
                assert_grads_close(analytic, numeric, rtol=1e-3, context=name)
                n_checked += param.numel()
            elapsed = time.time() - start
            assert n_checked > 1000
            assert elapsed < 120, f"gradient suite took {elapsed:.0f}s"


class TestCriterion2RenderingInvariants:
    def test_rendering_invariants(self):
        with criterion(2, "rendering invariants"):
            rng = np.random.default_rng(101)
            columns = torch.as_tensor(
                rng.random((8, 1000, 1)), dtype=torch.float64
            )
            dz = torch.ones(8, dtype=torch.float64)
            density = torch.sigmoid(10.0 * (columns - 0.5))
            alpha, transmittance, weights = composite_weights(density, dz)
            assert (weights >= 0).all() and (weights <= 1).all()
            assert (weights.sum(dim=0) <= 1 + 1e-9).all()
            assert (transmittance[1:] <= transmittance[:-1] + 1e-12).all()

            # Transparent volume: zero density -> zero weights everywhere.
            zero_alpha, _, zero_w = composite_weights(torch.zeros(8, 1000, 1), dz)
            assert torch.equal(zero_w, torch.zeros_like(zero_w))
            assert torch.equal(zero_alpha, torch.zeros_like(zero_alpha))

            # Opaque floor: sigma -> +inf on the last traversal sample.
            density = torch.zeros(2, 4, 4, dtype=torch.float64)
            density[1] = 1e9
            _, _, w = composite_weights(density, torch.ones(2, dtype=torch.float64))
            np.testing.assert_allclose(w[0], np.zeros((4, 4)), atol=0)
            np.testing.assert_allclose(w[1], np.ones((4, 4)), atol=1e-12)
            z = torch.tensor([2.0, 1.0], dtype=torch.float64)
            np.testing.assert_allclose(
                (w * z.reshape(-1, 1, 1)).sum(0), np.ones((4, 4)), atol=1e-12
            )


class TestCriterion3PseudoLabelOracle:
    def test_pseudo_label_oracle(self):
        with criterion(3, "pseudo-label oracle"):
            rng = np.random.default_rng(102)
            for _ in range(100):
                n_s = int(rng.integers(1, 6))
                sup_alt = np.sort(
                    rng.choice(np.arange(1.0, 20.0), size=n_s, replace=False)
                )
                slices = rng.random((n_s, 5, 4))
                targets = np.sort(
                    rng.choice(np.arange(1.0, 20.0), size=8, replace=False)
                )
                pseudo = build_pseudo_volume(slices, sup_alt, targets)
                for li, z in enumerate(targets):
                    for i in range(5):
                        for j in range(4):
                            column = slices[:, i, j]
                            if z <= sup_alt[0]:
                                expected = column[0]
                            elif z >= sup_alt[-1]:
                                expected = column[-1]
                            else:
                                k = int(np.searchsorted(sup_alt, z, side="right")) - 1
                                if sup_alt[k] == z:
                                    expected = column[k]
                                else:
                                    w = (z - sup_alt[k]) / (sup_alt[k + 1] - sup_alt[k])
                                    expected = column[k] + w * (column[k + 1] - column[k])
                            assert pseudo.data[li, i, j] == expected
                            # Cross-check with an independent implementation.
                            assert pseudo.data[li, i, j] == pytest.approx(
                                float(np.interp(z, sup_alt, column)), abs=1e-12
                            )


class TestCriterion4PixelLossOracle:
    def test_pixel_loss_oracle(self):
        with criterion(4, "pixel-loss oracle"):
            config = PixelLossConfig(altitude_bins=8, hist_bins=2, hist_bandwidth=0.5)
            rng = np.random.default_rng(103)
            for trial in range(50):
                n = int(rng.integers(2, 9))
                pred = torch.as_tensor(rng.random((n, 6, 6)), dtype=torch.float64)
                altitudes = np.arange(1.0, n + 1)
                k = int(rng.integers(1, 25))
                coords = np.column_stack(
                    [rng.integers(0, 6, k), rng.integers(0, 6, k),
                     rng.choice(altitudes, k)]
                ).astype(float)
                values = rng.random(k)
                loss = pixel_loss(
                    pred, altitudes,
                    torch.as_tensor(coords, dtype=torch.float64),
                    torch.as_tensor(values, dtype=torch.float64),
                    config, 0.1,
                )
                expected = scalar_pixel_oracle(
                    pred.numpy(), altitudes, coords, values, config, 0.1
                )
                assert float(loss) == pytest.approx(expected, abs=1e-9)
                # The distribution term is bounded by log 2.
                p = soft_histogram(pred.flatten(), 2, 0.5)
                q = soft_histogram(torch.as_tensor(values), 2, 0.5)
                assert float(js_divergence(p, q)) <= math.log(2) + 1e-12


class TestCriterion5Trainability:
    def test_single_scene_overfit(self, tmp_path):
        with criterion(5, "trainability smoke"):
            start = time.time()
            scene = generate_scene(SceneConfig(seed=42))
            model = desk_model(seed=0)
            config = TrainConfig(
                epochs=500, batch_size=1, val_every=50, seed=0,
                samples_per_scene=50,
            )
            result = train_scenes(
                model, [scene], [scene], WS_SUPERVISION, config, tmp_path
            )
            elapsed = time.time() - start
            assert result.steps == 500
            assert result.best_val_rmse < 0.05, (
                f"supervised-layer RMSE {result.best_val_rmse:.4f}"
            )
            assert elapsed < 15 * 60, f"took {elapsed:.0f}s"


def _mean(values):
    return float(np.mean(values))


class TestCriterion6WeakSupervisionBenefit:
    def test_unlabeled_rmse_improvement(self, weak_supervision_reports):
        with criterion(6, "weak-supervision benefit"):
            jsil = _mean(
                [weak_supervision_reports[("jsil", s)].unlabeled.rmse for s in WS_SEEDS]
            )
            weak = _mean(
                [
                    weak_supervision_reports[("mse-weak", s)].unlabeled.rmse
                    for s in WS_SEEDS
                ]
            )
            improvement = (weak - jsil) / weak
            print(
                f"\n  unlabeled RMSE: jsil {jsil:.4f} vs mse-weak {weak:.4f} "
                f"({improvement * 100:.1f}% lower)"
            )
            assert improvement >= 0.20


class TestCriterion7VerticalGeneralizationGap:
    def test_gap_ratios(self, weak_supervision_reports):
        with criterion(7, "vertical generalization gap"):
            def ratio(objective):
                unlabeled = _mean(
                    [
                        weak_supervision_reports[(objective, s)].unlabeled.rmse
                        for s in WS_SEEDS
                    ]
                )
                labeled = _mean(
                    [
                        weak_supervision_reports[(objective, s)].labeled.rmse
                        for s in WS_SEEDS
                    ]
                )
                return unlabeled / labeled

            jsil_ratio = ratio("jsil")
            weak_ratio = ratio("mse-weak")
            print(f"\n  ratios: jsil {jsil_ratio:.2f}, mse-weak {weak_ratio:.2f}")
            assert jsil_ratio < 1.5
            assert weak_ratio > 2.0


@pytest.fixture(scope="session")
def altitude_strategy_reports(strat_dataset, tmp_path_factory):
    """Spread vs adjacent supervision x 3 seeds, plus N_s = 1 and N_s = 5."""
    out = tmp_path_factory.mktemp("strategies")
    reports = {}
    strategies = {"spread": (0, 3, 7), "adjacent": (2, 3, 4)}
    for name, indices in strategies.items():
        for seed in STRAT_SEEDS:
            config = TrainConfig(
                epochs=STRAT_EPOCHS, batch_size=4, val_every=10, seed=seed,
                samples_per_scene=50,
            )
            _, report = _train_and_report(
                strat_dataset, SupervisionSpec(layer_indices=indices), config,
                out, f"{name}_s{seed}",
            )
            reports[(name, seed)] = report
    for name, indices in {"ns1": (3,), "ns5": (0, 2, 4, 5, 7)}.items():
        config = TrainConfig(
            epochs=STRAT_EPOCHS, batch_size=4, val_every=10, seed=STRAT_SEEDS[0],
            samples_per_scene=50,
        )
        _, report = _train_and_report(
            strat_dataset, SupervisionSpec(layer_indices=indices), config,
            out, name,
        )
        reports[(name, STRAT_SEEDS[0])] = report
    return reports


class TestCriterion8AltitudeStrategy:
    def test_spread_beats_adjacent(self, altitude_strategy_reports):
        with criterion(8, "altitude-strategy ordering"):
            wins = 0
            for seed in STRAT_SEEDS:
                spread = altitude_strategy_reports[("spread", seed)].unlabeled.rmse
                adjacent = altitude_strategy_reports[("adjacent", seed)].unlabeled.rmse
                print(f"\n  seed {seed}: spread {spread:.4f} vs adjacent {adjacent:.4f}")
                if spread < adjacent:
                    wins += 1
            assert wins >= 2, f"spread won only {wins}/3 seeds"

            ns1 = altitude_strategy_reports[("ns1", STRAT_SEEDS[0])].unlabeled.rmse
            ns3 = altitude_strategy_reports[("spread", STRAT_SEEDS[0])].unlabeled.rmse
            ns5 = altitude_strategy_reports[("ns5", STRAT_SEEDS[0])].unlabeled.rmse
            print(f"  N_s trend: 1 -> {ns1:.4f}, 3 -> {ns3:.4f}, 5 -> {ns5:.4f}")
            assert ns5 <= ns3 <= ns1


class TestCriterion9SamplingDensity:
    def test_rmse_trend(self, strat_dataset, tmp_path_factory):
        with criterion(9, "sampling-density trend"):
            out = tmp_path_factory.mktemp("sampling")
            rmses = []
            for count in SAMPLING_COUNTS:
                config = TrainConfig(
                    epochs=STRAT_EPOCHS, batch_size=4, val_every=10,
                    seed=STRAT_SEEDS[0], samples_per_scene=count,
                )
                _, report = _train_and_report(
                    strat_dataset, WS_SUPERVISION, config, out, f"k{count}"
                )
                rmses.append(report.overall.rmse)
            print(
                "\n  RMSE vs k: "
                + ", ".join(f"k={k}: {r:.4f}" for k, r in zip(SAMPLING_COUNTS, rmses))
            )
            assert rmses[1] <= rmses[0] and rmses[2] <= rmses[1]
            assert (rmses[0] - rmses[1]) > (rmses[1] - rmses[2])


class TestCriterion10Determinism:
    def test_bit_identical_training(self, strat_dataset, tmp_path):
        with criterion(10, "training determinism"):
            config = TrainConfig(
                epochs=2, batch_size=4, val_every=1, seed=5, samples_per_scene=20
            )
            artifacts = []
            for name in ("first", "second"):
                model = desk_model(config.seed)
                result = train(
                    model, strat_dataset, WS_SUPERVISION, config, tmp_path / name
                )
                artifacts.append(
                    (
                        result.checkpoint_path.read_bytes(),
                        result.log_path.read_text(),
                    )
                )
            assert artifacts[0][0] == artifacts[1][0], "checkpoints differ"
            assert artifacts[0][1] == artifacts[1][1], "logs differ"


class TestCriterion11MetricUnits:
    def test_metric_identities(self):
        with criterion(11, "metric unit suite"):
            rng = np.random.default_rng(104)
            x = rng.random((3, 16, 16))
            assert rmse(x, x) == 0.0
            assert psnr(x, x) == math.inf
            assert ssim(x, x) == pytest.approx(1.0, abs=1e-9)
            target = np.zeros((16, 16))
            pred = np.full((16, 16), 0.1)
            assert rmse(pred, target) == pytest.approx(0.1, abs=1e-12)
            assert psnr(pred, target) == pytest.approx(20.0, abs=1e-9)
            a, b = rng.random((16, 16)), rng.random((16, 16))
            assert ssim(a, b) == pytest.approx(ssim(b, a), abs=1e-12)
            value = float(
                mse_loss(
                    torch.as_tensor(pred, dtype=torch.float64),
                    torch.as_tensor(target, dtype=torch.float64),
                )
            )
            assert value == pytest.approx(rmse(pred, target) ** 2, abs=1e-9)


class TestRandomBaseline:
    """Supporting check: an untrained model scores far worse than trained."""

    def test_random_init_is_null_baseline(self, weak_supervision_reports, desk_dataset):
        untrained = desk_model(seed=99)
        splits = load_manifest(desk_dataset)
        scenes = [load_scene(p) for p in splits["test"][:8]]
        report = evaluate_scenes(
            untrained, scenes, WS_SUPERVISION, 50, seed=0, n_eval_seeds=1
        )
        trained_rmse = weak_supervision_reports[("jsil", 0)].overall.rmse
        print(
            f"\n  random-init RMSE {report.overall.rmse:.4f} vs trained "
            f"{trained_rmse:.4f}"
        )
        assert report.overall.rmse > 1.5 * trained_rmse
