"""Acceptance criteria, one test each, reported as PASS/FAIL lines in the terminal summary.

The desk runs behind criteria 4 to 8 share one module fixture: a 16-identity
synthetic dataset (8 train, 8 test, 4 sequences of 30 frames) and the desk
recipe from ``gaitstr.experiments`` for three variants and three seeds.
"""

import time

import numpy as np
import pytest
import torch

from gaitstr.dataset import GaitDataset
from gaitstr.encoders import SilhouetteEncoder
from gaitstr.experiments import desk_config, refinement_errors, run_variant
from gaitstr.refinement import GaitSTR, ModelConfig
from gaitstr.skeleton import JointSequence, SYNTH13, bones_to_joints, joints_to_bones, normalize_skeleton
from gaitstr.synthetic import build_dataset, generate_walk, sample_identity
from gaitstr.training import load_checkpoint, train

from gradient_cases import CASES
from metric_cases import CHECKS

VARIANTS = ("silhouette", "concat", "gaitstr")
SEEDS = (0, 1, 2)


# --- 1 ---------------------------------------------------------------------------------------


def test_criterion_1_structural_identities(criterion):
    start = time.perf_counter()
    failures = []
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(20):
        j = JointSequence(rng.normal(size=(7, 13, 2)) * rng.uniform(0.1, 100), SYNTH13)
        back = bones_to_joints(joints_to_bones(j), j.data[:, SYNTH13.root])
        worst = max(worst, float(np.abs(back.data - j.data).max()))
        once = normalize_skeleton(j)
        if not np.allclose(normalize_skeleton(once).data, once.data, rtol=0, atol=1e-12):
            failures.append("normalize_skeleton not idempotent")
    if worst > 1e-9:
        failures.append(f"joints/bones round trip error {worst:.2e}")

    torch.manual_seed(0)
    enc = SilhouetteEncoder((4, 6, 8), 10).double()
    sils = (torch.rand(2, 6, 64, 44, dtype=torch.float64) > 0.6).double()
    out = enc(sils)
    if not torch.equal(enc(sils[:, torch.randperm(6)]), out):
        failures.append("silhouette encoding depends on frame order")
    if not torch.equal(enc(sils.repeat_interleave(2, dim=1)), out):
        failures.append("silhouette encoding depends on frame duplication")

    small = dict(embed_dim=8, sil_channels=(2, 2, 4), stgcn_hidden=(4, 4, 8, 8), decoder_channels=(8, 4, 4),
                 cma_hidden=4)
    torch.manual_seed(1)
    full = GaitSTR(ModelConfig(**small, variant="gaitstr"), 3)
    base = GaitSTR(ModelConfig(**small, variant="concat"), 3)
    base.load_state_dict({k: v for k, v in full.state_dict().items()
                          if k in base.state_dict() and not k.startswith("classifier")}, strict=False)
    p = sample_identity(np.random.default_rng(2))
    walk = [generate_walk(p, 10, condition="carried-blob", seed=s) for s in range(2)]
    sil_t = torch.as_tensor(np.stack([w.silhouettes for w in walk]), dtype=torch.float32)
    joints_t = torch.as_tensor(np.stack([w.joints.data for w in walk]), dtype=torch.float32)
    a, b = full(sil_t, joints_t), base(sil_t, joints_t)
    if not torch.equal(a.refined_joints, joints_t):
        failures.append("zero-initialised refinement changed the joints")
    if not (torch.equal(a.feature[:, :18], b.feature) and torch.equal(a.feature[:, 18:], b.feature[:, 16:18])):
        failures.append("zero-initialised feature differs from the concatenation baseline")
    elapsed = time.perf_counter() - start
    if elapsed >= 30:
        failures.append(f"took {elapsed:.1f} s")
    criterion(1, "structural identities", not failures,
              "; ".join(failures) or f"all exact, round trip {worst:.1e}, {elapsed:.1f} s")


# --- 2 ---------------------------------------------------------------------------------------


def test_criterion_2_gradient_suite(criterion):
    start = time.perf_counter()
    errors = {name: case() for name, case in CASES.items()}
    elapsed = time.perf_counter() - start
    worst = max(errors, key=errors.get)
    ok = all(e < 1e-4 for e in errors.values()) and elapsed < 300
    criterion(2, "finite-difference gradients", ok,
              f"{len(errors)} operators, worst {worst} {errors[worst]:.1e} (< 1e-4), {elapsed:.1f} s")


# --- 3 ---------------------------------------------------------------------------------------


def test_criterion_3_metric_oracles(criterion):
    start = time.perf_counter()
    failures, counts = [], {}
    for name, check in CHECKS.items():
        try:
            counts[name] = check(n=100)
        except AssertionError as exc:
            failures.append(f"{name}: {exc}")
    elapsed = time.perf_counter() - start
    if elapsed >= 120:
        failures.append(f"took {elapsed:.1f} s")
    criterion(3, "metric oracles", not failures,
              "; ".join(failures) or f"{len(counts)} operations x {min(counts.values())} instances, {elapsed:.1f} s")


# --- desk runs -------------------------------------------------------------------------------


def _desk_runs(root, dataset):
    runs, times = {}, {}
    for seed in SEEDS:
        for variant in VARIANTS:
            start = time.perf_counter()
            runs[variant, seed] = run_variant(dataset, desk_config(variant, seed), root / f"{variant}_{seed}")
            times[variant, seed] = time.perf_counter() - start
    return runs, times


@pytest.fixture(scope="module")
def desk(tmp_path_factory):
    root = tmp_path_factory.mktemp("desk")
    build_dataset(root / "data", 16, 4, 30, seed=0)
    dataset = GaitDataset.load(root / "data")
    runs, times = _desk_runs(root / "first", dataset)
    return root, dataset, runs, times


def test_criterion_4_desk_learnability(desk, criterion):
    _, dataset, runs, times = desk
    test = dataset.split("test")
    rank1 = runs["gaitstr", 0].clean.rank[1]
    elapsed = times["gaitstr", 0]
    shape_ok = len(dataset.split("train").identities()) == 8 and len(test.identities()) == 8
    ok = shape_ok and rank1 >= 0.90 and elapsed < 1200 and runs["gaitstr", 0].state.iteration <= 2000
    criterion(4, "desk learnability", ok,
              f"GaitSTR seed 0 test rank-1 {rank1:.4f} (>= 0.90) on {runs['gaitstr', 0].clean.num_probes} probes, "
              f"{runs['gaitstr', 0].state.iteration} iterations, {elapsed:.0f} s")


def test_criterion_5_refinement_trend(desk, criterion):
    _, dataset, runs, _ = desk
    test = dataset.split("test").samples
    tables = [refinement_errors(runs["gaitstr", s].state.model, test, 0.1, 0.1) for s in SEEDS]
    mean = {k: float(np.mean([t[k] for t in tables])) for k in tables[0]}
    ok = mean["refined"] < mean["raw"] and mean["refined"] <= min(mean["average"], mean["gaussian"])
    criterion(5, "refinement trend", ok,
              "MPJPE over 3 seeds " + ", ".join(f"{k} {v:.4f}" for k, v in mean.items())
              + " (need refined < raw and <= both smoothers)")


def test_criterion_6_fusion_trend(desk, criterion):
    runs = desk[2]
    mean = {v: float(np.mean([runs[v, s].jittered.rank[1] for s in SEEDS])) for v in VARIANTS}
    ok = mean["silhouette"] <= mean["concat"] <= mean["gaitstr"] and mean["gaitstr"] > mean["silhouette"]
    criterion(6, "fusion trend", ok,
              "mean jittered rank-1 " + ", ".join(f"{v} {m:.4f}" for v, m in mean.items())
              + " (need silhouette <= concat <= gaitstr, gaitstr > silhouette)")


def test_criterion_7_lambda_ablation(desk, criterion):
    root, dataset, runs, _ = desk
    low = run_variant(dataset, desk_config("gaitstr", 0, lambda_triplet=0.01), root / "lambda_0.01")
    base = runs["gaitstr", 0].clean.rank[1]
    drop = base - low.clean.rank[1]
    criterion(7, "lambda ablation", drop >= 0.05,
              f"seed 0 test rank-1 {base:.4f} at lambda1=1 vs {low.clean.rank[1]:.4f} at lambda1=0.01, "
              f"drop {drop:.4f} (>= 0.05)")


def test_criterion_8_reproducibility(desk, criterion):
    root, dataset, _, _ = desk
    _desk_runs(root / "second", dataset)
    mismatched = []
    for variant in VARIANTS:
        for seed in SEEDS:
            for name in ("metrics.csv", "eval_clean.csv", "eval_jitter.csv"):
                a = (root / "first" / f"{variant}_{seed}" / name).read_bytes()
                b = (root / "second" / f"{variant}_{seed}" / name).read_bytes()
                if a != b:
                    mismatched.append(f"{variant}_{seed}/{name}")

    train_split = dataset.split("train")
    cfg = desk_config("gaitstr", 5, iterations=20, log_interval=5, checkpoint_interval=10)
    whole = train(cfg, train_split, root / "resume_whole")
    resumed = train(cfg, train_split, root / "resume_tail",
                    resume=load_checkpoint(root / "resume_whole" / "ckpt_000010.pt"))
    same_weights = all(torch.equal(x, y) for x, y in zip(whole.model.state_dict().values(),
                                                         resumed.model.state_dict().values()))
    same_log = ((root / "resume_whole" / "metrics.csv").read_bytes()
                == (root / "resume_tail" / "metrics.csv").read_bytes())
    ok = not mismatched and same_weights and same_log
    criterion(8, "reproducibility", ok,
              f"{len(VARIANTS) * len(SEEDS) * 3 - len(mismatched)}/{len(VARIANTS) * len(SEEDS) * 3} CSVs identical "
              f"across reruns; resume weights {'identical' if same_weights else 'DIFFER'}, "
              f"log {'identical' if same_log else 'DIFFERS'}"
              + (f"; mismatched {', '.join(mismatched)}" if mismatched else ""))
