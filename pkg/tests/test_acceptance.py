"""End-to-end acceptance checks; each prints one PASS/FAIL line at its stated tolerance."""

import time

import numpy as np
import pytest

from posetemplate.cli import main as cli_main
from posetemplate.diff import format_gradient_report, run_gradient_check
from posetemplate.evaluate import sample_errors, score
from posetemplate.fit import FitConfig, fit_pose, synthetic_fit_config
from posetemplate.geometry import AffineTransform, compose, identity_params
from posetemplate.losses import anchor_loss, boundary_loss, transformed_anchors
from posetemplate.render import render_analytic, render_warped
from posetemplate.synth import PoseRanges, derive_seed, generate_dataset, sample_pose

RECOVERY_SEED = 0
RECOVERY_N = 100
EDGE_TARGETS = 5
EDGE_OVERHANG = 0.05


def test_gradient_correctness(human, acceptance_line):
    start = time.perf_counter()
    rows = run_gradient_check(human, draws=100, seed=0, resolution=16, step=1e-5, tolerance=1e-4,
                              features=("identity",))
    elapsed = time.perf_counter() - start
    worst = max(r.max_rel_error for r in rows)
    ok = all(r.passed for r in rows) and elapsed < 30.0
    terms = ", ".join(f"{r.term} {r.max_rel_error:.1e}" for r in rows)
    acceptance_line("1 gradient correctness", ok,
                    f"max rel err {worst:.2e} <= 1e-4 over 100 draws ({terms}); {elapsed:.1f} s < 30 s")
    assert ok, format_gradient_report(rows)


def mild_affine(rng, n_parts):
    """Rotation within 45 degrees, |det| in [0.5, 2], mild anisotropy, small shift."""
    rows = []
    for _ in range(n_parts):
        angle = np.deg2rad(rng.uniform(-45.0, 45.0))
        det = np.exp(rng.uniform(np.log(0.5), np.log(2.0)))
        aspect = np.exp(rng.uniform(-0.3, 0.3))
        rot = AffineTransform.rotation(angle).linear
        a = rot @ np.diag([np.sqrt(det) * aspect, np.sqrt(det) / aspect])
        rows.append(np.r_[a.ravel(), rng.uniform(-0.1, 0.1, size=2)])
    return np.array(rows)


def test_render_equivalence(human, acceptance_line):
    rng = np.random.default_rng(0)
    start = time.perf_counter()
    means = []
    for _ in range(50):
        p = mild_affine(rng, human.n_parts)
        diff = render_warped(human, p, 128).data - render_analytic(human, p, 128).data
        means.append(np.abs(diff).mean())
    elapsed = time.perf_counter() - start
    ok = max(means) <= 0.01 and elapsed < 60.0
    acceptance_line("2 render equivalence", ok,
                    f"worst mean |warped - analytic| {max(means):.2e} <= 0.01 over 50 transforms at H=128; "
                    f"{elapsed:.1f} s < 60 s")
    assert ok


def test_canonical_consistency(human, acceptance_line):
    ident = identity_params(human.n_parts)
    a = anchor_loss(human, ident)
    b = boundary_loss(human, ident)
    result = fit_pose(human, render_analytic(human, ident, 128), FitConfig())
    fitted = dict(result.keypoints)
    kp_err = max(np.linalg.norm(fitted[k.id] - np.array(k.point)) for k in human.keypoints)
    ok = a <= 1e-12 and b == 0.0 and result.final_loss.total < 1e-6 and kp_err < 1e-3
    acceptance_line("3 canonical consistency", ok,
                    f"anchor {a:.1e} <= 1e-12, boundary {b:.1e} == 0, fit total {result.final_loss.total:.1e} "
                    f"< 1e-6, keypoint err {kp_err:.1e} < 1e-3")
    assert ok


@pytest.fixture(scope="module")
def recovery(human):
    """The pinned 100-pose synthetic suite, fitted with the full objective."""
    start = time.perf_counter()
    dataset = generate_dataset(human, RECOVERY_N, PoseRanges(), 128, seed=RECOVERY_SEED)
    config = synthetic_fit_config()
    results = [fit_pose(human, maps, config) for _, maps in dataset]
    elapsed = time.perf_counter() - start
    return dataset, results, elapsed


def test_synthetic_recovery(recovery, acceptance_line):
    dataset, results, elapsed = recovery
    preds = [r.keypoints for r in results]
    truth = [s.keypoints_gt for s, _ in dataset]
    overall = score(preds, truth).overall
    errors = sample_errors(preds, truth)
    within = float(np.mean(errors <= 3.0))
    ok = overall <= 2.0 and within >= 0.9 and elapsed < 600.0
    acceptance_line("4 synthetic recovery", ok,
                    f"overall {overall:.3f}% <= 2.0%, {within:.0%} of samples <= 3.0% (need >= 90%), "
                    f"{RECOVERY_N} poses seed {RECOVERY_SEED}; {elapsed:.0f} s < 600 s")
    assert ok


def edge_target(human, index):
    """A sampled pose shifted so its outermost anchor overhangs the frame edge by ``EDGE_OVERHANG``."""
    sample = sample_pose(human, PoseRanges(), derive_seed(RECOVERY_SEED, index))
    params = np.stack([t.params for t in sample.transforms])
    anchors = transformed_anchors(human, params)
    row, axis = np.unravel_index(np.argmax(np.abs(anchors)), anchors.shape)
    shift = np.zeros(2)
    shift[axis] = np.sign(anchors[row, axis]) * (1.0 + EDGE_OVERHANG) - anchors[row, axis]
    moved = [compose(AffineTransform.translation(*shift), t) for t in sample.transforms]
    return render_analytic(human, moved, 128)


def test_ablation_direction(human, recovery, acceptance_line):
    dataset, with_anchor, _ = recovery
    base = synthetic_fit_config()
    no_anchor_cfg = FitConfig.from_dict({**base.to_dict(), "loss": {**base.loss.to_dict(), "lambda1": 0.0}})
    no_anchor = [fit_pose(human, maps, no_anchor_cfg) for _, maps in dataset]
    mean_on = float(np.mean([anchor_loss(human, r.params.reshape(-1, 6)) for r in with_anchor]))
    mean_off = float(np.mean([anchor_loss(human, r.params.reshape(-1, 6)) for r in no_anchor]))

    def worst_anchor(target, lambda2):
        cfg = FitConfig.from_dict({**base.to_dict(), "loss": {**base.loss.to_dict(), "lambda2": lambda2}})
        result = fit_pose(human, target, cfg)
        return float(np.abs(transformed_anchors(human, result.params.reshape(-1, 6))).max())

    prevented = 0
    for i in range(EDGE_TARGETS):
        target = edge_target(human, i)
        free, bounded = worst_anchor(target, 0.0), worst_anchor(target, 1.0)
        prevented += free > base.loss.boundary_b >= bounded
    ok = mean_off > mean_on and prevented >= 1
    acceptance_line("5 ablation direction", ok,
                    f"mean anchor loss lambda1=0 {mean_off:.2e} > lambda1=1 {mean_on:.2e}; "
                    f"{prevented}/{EDGE_TARGETS} edge targets leave the frame with lambda2=0 but not with "
                    f"lambda2=1 (need >= 1)")
    assert ok


def pipeline(workdir, monkeypatch):
    monkeypatch.chdir(workdir)
    assert cli_main(["synth", "--n", "3", "--seed", "11", "--resolution", "64", "--out", "data"]) == 0
    assert cli_main(["fit", "--profile", "synthetic", "--max-iters", "80", "--input", "data", "--out", "fit",
                     "--overlays"]) == 0
    assert cli_main(["eval", "--predictions", "fit", "--ground-truth", "data", "--out", "eval"]) == 0
    return {p.relative_to(workdir).as_posix(): p.read_bytes() for p in sorted(workdir.rglob("*")) if p.is_file()}


def test_pipeline_determinism(tmp_path, monkeypatch, acceptance_line):
    (tmp_path / "one").mkdir()
    (tmp_path / "two").mkdir()
    first = pipeline(tmp_path / "one", monkeypatch)
    second = pipeline(tmp_path / "two", monkeypatch)
    differing = sorted(k for k in set(first) | set(second) if first.get(k) != second.get(k))
    ok = not differing and len(first) > 0
    acceptance_line("6 determinism", ok,
                    f"{len(first)} files from synth + fit + eval identical across reruns"
                    + (f"; differing: {differing}" if differing else ""))
    assert ok
