"""Acceptance criteria, one test each; every test prints a single pass/fail line.

The oracle criteria reuse the unit-test checks; the directional criteria train
the toy models for five seeds and take several minutes each on one CPU.
"""

import statistics
import time

import pytest

import test_denoiser as denoiser_tests
import test_diffusion as diffusion_tests
import test_metrics as metrics_tests
import test_rollout as rollout_tests
import test_srr as srr_tests
import test_tensor as tensor_tests
import test_trd as trd_tests
from rolloutwm import experiments
from rolloutwm import worldsim as ws
from rolloutwm.cli import main
from rolloutwm.trd import TrdConfig

SEEDS = (0, 1, 2, 3, 4)


def _run_checks(checks):
    """Run zero-argument checks; return elapsed seconds and the names of failures."""
    start = time.perf_counter()
    failed = []
    for name, check in checks:
        try:
            check()
        except AssertionError:
            failed.append(name)
    return time.perf_counter() - start, failed


def _oracle(criterion, number, checks, budget):
    elapsed, failed = _run_checks(checks)
    ok = not failed and elapsed < budget
    detail = f"{len(checks)} checks, {elapsed:.1f}s (budget {budget:.0f}s)"
    if failed:
        detail += "; failed: " + ", ".join(failed)
    criterion(number, ok, detail)
    assert ok, detail


def test_criterion_01_gradient_oracle(criterion):
    checks = [(f"op:{name}", lambda name=name: tensor_tests.test_gradients_match_finite_differences(name))
              for name in sorted(tensor_tests.OPS)]
    checks += [("denoiser:64bit", denoiser_tests.test_full_pass_gradients_64bit),
               ("denoiser:32bit", denoiser_tests.test_full_pass_gradients_32bit)]
    _oracle(criterion, 1, checks, 120)


def test_criterion_02_sampler_oracle(criterion):
    _oracle(criterion, 2, [("gaussian M=32", diffusion_tests.test_gaussian_oracle_m32),
                           ("one step exact", diffusion_tests.test_one_step_recovers_clean_sample_exactly)], 60)


def test_criterion_03_blending(criterion):
    clips = ws.make_dataset(0, 4, 24)
    _oracle(criterion, 3, [
        ("hard switch", srr_tests.test_blend_hard_switch),
        ("fixed point", srr_tests.test_blend_fixed_point),
        ("alpha w=2", srr_tests.test_blend_alpha_at_w2),
        ("gt cache = base step", lambda: srr_tests.test_srr_with_gt_cache_and_hard_switch_matches_base(clips)),
    ], 120)


def test_criterion_04_schedule_anchors(criterion):
    anchors = [(0, 1000.0), (50, 1000.0), (100, 1000.0), (250, 500.0), (400, 0.0)]
    checks = [("N anchors", srr_tests.test_n_schedule_long_horizon_anchors),
              ("w anchors", srr_tests.test_w_schedule_long_horizon_anchors)]
    checks += [(f"tau_th@{k}", lambda k=k, v=v: trd_tests.test_cfg_threshold_anchors(k, v)) for k, v in anchors]
    _oracle(criterion, 4, checks, 60)


def test_criterion_05_metric_oracles(criterion):
    checks = [("dtw examples", metrics_tests.test_dtw_examples),
              ("dtw brute force", metrics_tests.test_dtw_matches_brute_force),
              ("frechet identical", metrics_tests.test_frechet_identical),
              ("frechet mean shift", metrics_tests.test_frechet_mean_shift),
              ("are wrapping", metrics_tests.test_are_cases)]
    checks += [(f"frechet 4I vs I d={d}", lambda d=d: metrics_tests.test_frechet_scalar_covariances(d))
               for d in (1, 3, 8)]
    _oracle(criterion, 5, checks, 60)


def test_criterion_06_dmd_sanity(criterion):
    _oracle(criterion, 6, [("zero gradient", trd_tests.test_zero_gradient_when_critic_is_teacher),
                           ("indicator off", trd_tests.test_indicator_off_matches_alpha_one_bitwise),
                           ("hand case -4", trd_tests.test_hand_substitution_minus_four)], 60)


def test_criterion_10_efficiency_and_memory(criterion):
    cfg = TrdConfig()
    checks = [("student NFE = 4", trd_tests.test_nfe_accounting),
              ("student calls per chunk", trd_tests.test_train_step_fires_and_counts),
              ("window T+K over 100 chunks", rollout_tests.test_bounded_window_over_100_chunks)]
    assert cfg.student_steps == 4
    _oracle(criterion, 10, checks, 120)


# directional reproductions on the toy world


def _count(pairs):
    return sum(a < b for a, b in pairs)


@pytest.mark.slow
def test_criterion_07_srr_beats_base(criterion):
    start = time.perf_counter()
    runs = [experiments.srr_comparison(s) for s in SEEDS]
    elapsed = time.perf_counter() - start
    wins = _count((r.final("srr"), r.final("base")) for r in runs)
    ratios = [r.slope("srr") / r.slope("base") for r in runs]
    ratio = statistics.median(ratios)
    ok = wins >= 4 and ratio <= 0.5 and elapsed <= 1800
    finals = " ".join(f"{r.final('base'):.4f}/{r.final('srr'):.4f}" for r in runs)
    criterion(7, ok, f"SRR lower in {wins}/5 seeds (base/srr: {finals}); median slope ratio {ratio:.3f}; "
                     f"{elapsed / 60:.1f} min")
    assert ok


_ABLATION: dict = {}


def _ablation(seed):
    if seed not in _ABLATION:
        t0 = time.perf_counter()
        depth = experiments.trd_ablation(seed, runs=(("srr", None), ("srr", 1)))
        t1 = time.perf_counter()
        teacher = experiments.trd_ablation(seed, runs=(("base", None),))
        t2 = time.perf_counter()
        depth.reports.update(teacher.reports)
        _ABLATION[seed] = (depth, t1 - t0, t2 - t1)
    return _ABLATION[seed]


@pytest.mark.slow
def test_criterion_08_trd_rollout_depth(criterion):
    full = f"srr:{TrdConfig().n_chunks}"
    runs = [_ablation(s) for s in SEEDS]
    elapsed = sum(t for _, t, _ in runs)
    wins = _count((r.final(full), r.final("srr:1")) for r, _, _ in runs)
    ok = wins >= 4 and elapsed <= 1200
    finals = " ".join(f"{r.final('srr:1'):.4f}/{r.final(full):.4f}" for r, _, _ in runs)
    criterion(8, ok, f"full depth lower in {wins}/5 seeds (N=1/full: {finals}); {elapsed / 60:.1f} min")
    assert ok


@pytest.mark.slow
def test_criterion_09_teacher_initialization(criterion):
    n = TrdConfig().n_chunks
    runs = [_ablation(s)[0] for s in SEEDS]
    wins = _count((r.final(f"srr:{n}"), r.final(f"base:{n}")) for r in runs)
    ok = wins >= 4
    finals = " ".join(f"{r.final(f'base:{n}'):.4f}/{r.final(f'srr:{n}'):.4f}" for r in runs)
    criterion(9, ok, f"SRR teacher lower in {wins}/5 seeds (base/srr teacher: {finals})")
    assert ok


@pytest.mark.slow
def test_criterion_11_closed_loop(criterion):
    for s in SEEDS:
        experiments.teachers(experiments.setup(s))
    start = time.perf_counter()
    probes = [experiments.closed_loop_probe(s) for s in SEEDS]
    elapsed = time.perf_counter() - start
    clean = sum(p.failures == 0 for p in probes)
    ok = clean >= 4 and elapsed <= 600
    norms = " ".join(f"{p.max_norm:.2f}" for p in probes)
    criterion(11, ok, f"{clean}/5 seeds with zero failures over 50 chunks; max latent norms {norms}; "
                      f"{elapsed / 60:.1f} min (excluding teacher training)")
    assert ok


def _chain(out):
    flags = ["--seed", "3", "--out", str(out)]
    for argv in (["gen-data"], ["train-base"], ["train-srr"], ["distill"], ["rollout"], ["eval"]):
        assert main(argv + flags) == 0, argv
    return {p.name: p.read_bytes() for p in sorted(out.iterdir())}


@pytest.mark.slow
def test_criterion_12_pipeline_determinism(criterion, tmp_path):
    a = _chain(tmp_path / "a")
    b = _chain(tmp_path / "b")
    differ = sorted(name for name in a if a[name] != b.get(name))
    ok = set(a) == set(b) and not differ
    criterion(12, ok, f"{len(a)} artifacts from the default-config chain compared byte for byte"
                      + (f"; differ: {', '.join(differ)}" if differ else ""))
    assert ok
