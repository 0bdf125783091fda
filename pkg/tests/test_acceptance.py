"""End-to-end acceptance run.

Each test checks one acceptance criterion at its stated tolerance and records
a single PASS/FAIL line (printed, and repeated in the pytest terminal
summary). Criteria 5-8 train real models and take several minutes each.
"""

import math
import statistics
import time

import numpy as np
import pytest
import torch

import suites
from icre.backbone import BackboneConfig, DualStreamBackbone
from icre.dataset import Manifest, Modality, SampleRecord, SamplerConfig, Split, generate_synthetic, load_images, sample_pk_indices
from icre.harness import TrainConfig, evaluate, lr_at, param_hash, plot_dist, train
from icre.metrics import ProtocolConfig, cmc_map
from icre.mpfr import MPFR, normalize_masks
from icre.sdce import SDCE, TransformerBlock, attention_weights

SEEDS = (0, 1, 2)
DESK = dict(epochs=40, P=5, K=4, image_size=(64, 32), variant="TINY")
FULL = {}
BASELINE_TRI = dict(mpfr_on=False, sdce_on=False, loss="TRI")
BASELINE_ICG = dict(mpfr_on=False, sdce_on=False, loss="ICG")
FULL_TRI = dict(loss="TRI")


# ---------------------------------------------------------------------------
# 1. oracle suite

def test_criterion_1_oracle_suite():
    start = time.perf_counter()
    checks = {
        "icg_loss": (suites.oracle_icg(n=100), 1e-7),
        "cmc_map": (suites.oracle_cmc_map(n=100), 1e-12),
        "gem_pool": (suites.oracle_gem(n=100), 1e-6),
        "normalize_masks": (suites.oracle_normalize_masks(n=100), 1e-6),
        "modulated_attention": (suites.oracle_modulated_attention(n=100), 1e-6),
        "jib": (suites.oracle_jib(n=100), 1e-6),
    }
    secs = time.perf_counter() - start
    ok = all(err <= tol for err, tol in checks.values()) and secs < 120
    detail = ", ".join(f"{k} max|err|={err:.1e} (tol {tol:.0e})" for k, (err, tol) in checks.items())
    assert suites.record(1, "oracle suite, 100 instances per op", ok, f"{detail}; {secs:.1f}s")


# ---------------------------------------------------------------------------
# 2. gradient suite

def test_criterion_2_gradient_suite():
    start = time.perf_counter()
    errs = {
        "MPFR params": max(suites.mpfr_gradcheck(seed=s) for s in range(2)),
        "SDCE params incl. beta": max(suites.sdce_gradcheck(seed=s) for s in range(2)),
        "icg_loss wrt F_pool": suites.icg_gradcheck(n=20),
    }
    secs = time.perf_counter() - start
    ok = all(e <= 1e-4 for e in errs.values()) and secs < 180
    detail = ", ".join(f"{k} rel.err={e:.1e}" for k, e in errs.items())
    assert suites.record(2, "finite-difference gradients (tol 1e-4)", ok, f"{detail}; {secs:.1f}s")


# ---------------------------------------------------------------------------
# 3. invariant suite

def _mask_simplex_error(rng):
    worst = 0.0
    for _ in range(100):
        k = int(rng.integers(2, 5))
        masks = [torch.from_numpy(rng.normal(scale=5, size=(2, 1, 3, 4))) for _ in range(k)]
        w = torch.stack(normalize_masks(masks))
        if not ((w > 0) & (w < 1)).all():
            return math.inf
        worst = max(worst, float((w.sum(0) - 1).abs().max()))
    return worst


def _attention_row_error(rng):
    worst = 0.0
    for _ in range(100):
        heads = int(rng.integers(1, 5))
        c, t = heads * int(rng.integers(1, 4)), int(rng.integers(1, 8))
        q = torch.from_numpy(rng.normal(scale=3, size=(2, t, c)))
        k = torch.from_numpy(rng.normal(scale=3, size=(2, t, c)))
        worst = max(worst, float((attention_weights(q, k, heads).sum(-1) - 1).abs().max()))
    return worst


def _beta_reduction_error():
    worst = 0.0
    for seed in range(20):
        torch.manual_seed(seed)
        mod = TransformerBlock(8, 2, modulate=True)
        plain = TransformerBlock(8, 2, modulate=False)
        plain.load_state_dict({k: v for k, v in mod.state_dict().items() if k != "beta"})
        x, y = torch.randn(2, 6, 8), torch.randn(2, 6, 8)
        with torch.no_grad():
            worst = max(worst, float((mod(x, y, (3, 2)) - plain(x, y, (3, 2))).abs().max()))
    return worst


def _shape_contract():
    torch.manual_seed(0)
    cfg = BackboneConfig.tiny()
    shapes = dict(enumerate(cfg.stage_shapes(64, 32), start=1))
    feats = DualStreamBackbone(cfg).eval()(torch.randn(2, 3, 64, 32), [0, 1])
    fused = MPFR(shapes).eval()(feats)
    out = SDCE(shapes[4][0], heads=4)(feats.f_h, fused)
    return fused.shape == feats.f_h.shape and out.shape == feats.f_h.shape


def _cmc_invariants(rng):
    for _ in range(100):
        nq, ng = int(rng.integers(1, 10)), int(rng.integers(2, 30))
        q, g = rng.integers(0, 4, nq), rng.integers(0, 4, ng)
        d = rng.integers(0, 20, size=(nq, ng)) / 20
        a = cmc_map(d, q, g, max_rank=ng)
        b = cmc_map(np.exp(3 * d) - 5, q, g, max_rank=ng)
        if np.any(np.diff(a.cmc) < 0) or a.cmc != b.cmc or a.map != b.map:
            return False
    return True


def _batch_contract():
    recs = tuple(
        SampleRecord(f"{p}/{m.value}/{k}", p, m, 1) for p in range(12) for m in Modality for k in range(5)
    )
    idx = sample_pk_indices(Manifest(recs, Split.TRAIN), SamplerConfig(P=6, K=8), np.random.default_rng(0))
    mods = np.array([recs[i].modality.code for i in idx])
    ids = np.array([recs[i].identity for i in idx])
    return len(idx), int((mods == 0).sum()), int((mods == 1).sum()), len(set(ids))


def test_criterion_3_invariant_suite():
    rng = np.random.default_rng(0)
    simplex = _mask_simplex_error(rng)
    rows = _attention_row_error(rng)
    beta = _beta_reduction_error()
    shapes = _shape_contract()
    cmc = _cmc_invariants(rng)
    total, n_vis, n_ir, n_ids = _batch_contract()
    ok = (simplex <= 1e-6 and rows <= 1e-6 and beta <= 1e-7 and shapes and cmc
          and (total, n_vis, n_ir, n_ids) == (48, 24, 24, 6))
    detail = (f"mask simplex err={simplex:.1e}, attention rows err={rows:.1e}, beta=1 err={beta:.1e}, "
              f"shapes={'ok' if shapes else 'BAD'}, CMC monotone+argsort={'ok' if cmc else 'BAD'}, "
              f"P=6,K=8 batch={total} ({n_vis} VIS + {n_ir} IR, {n_ids} ids)")
    assert suites.record(3, "invariants", ok, detail)


# ---------------------------------------------------------------------------
# 4. schedule

def test_criterion_4_schedule():
    cfg = TrainConfig()
    want = {0: 0.01, 10: 0.1, 30: 0.01, 90: 0.001, 120: 0.0001}
    got = {e: lr_at(e, cfg) for e in want}
    assert suites.record(4, "lr schedule exact values", got == want, f"{got}")


# ---------------------------------------------------------------------------
# training runs shared by 5-8

class Runs:
    def __init__(self, root):
        self.root = root
        self.data = {}
        self.cache = {}

    def dataset(self, seed):
        if seed not in self.data:
            out = self.root / f"data{seed}"
            m = {s: generate_synthetic(10, 20, (64, 32), seed=seed, out_dir=out, split=s) for s in Split}
            self.data[seed] = (m, load_images(m[Split.TRAIN], (64, 32)))
        return self.data[seed]

    def run(self, name, overrides, seed, tag=""):
        key = (name, seed, tag)
        if key not in self.cache:
            m, bank = self.dataset(seed)
            cfg = TrainConfig(**DESK, seed=seed, **overrides)
            start = time.perf_counter()
            trainer = train(cfg, m[Split.TRAIN], images=bank)
            secs = time.perf_counter() - start
            rep = evaluate(trainer.model, cfg, m[Split.QUERY], m[Split.GALLERY], ProtocolConfig())
            hist = plot_dist(trainer.model, cfg, m[Split.QUERY])
            self.cache[key] = dict(report=rep, hist=hist, hash=param_hash(trainer.model), secs=secs)
        return self.cache[key]

    def all(self, name, overrides):
        return [self.run(name, overrides, s) for s in SEEDS]


@pytest.fixture(scope="module")
def runs(tmp_path_factory):
    return Runs(tmp_path_factory.mktemp("acceptance"))


def _fmt(xs):
    return "[" + ", ".join(f"{x:.4f}" for x in xs) + "]"


@pytest.mark.slow
def test_criterion_5_end_to_end(runs):
    full = runs.all("full", FULL)
    r1 = [r["report"].rank(1) for r in full]
    maps = [r["report"].map for r in full]
    secs = sum(r["secs"] for r in full)
    med_r1, med_map = statistics.median(r1), statistics.median(maps)
    ok = med_r1 >= 0.90 and med_map >= 0.80 and secs <= 15 * 60
    detail = (f"median R1={med_r1:.4f} (>=0.90) per-seed {_fmt(r1)}, median mAP={med_map:.4f} (>=0.80) "
              f"per-seed {_fmt(maps)}, training {secs:.0f}s for 3 runs on {torch.get_num_threads()} thread(s)")
    assert suites.record(5, "desk-scale end-to-end, IR->VIS", ok, detail)


@pytest.mark.slow
def test_criterion_6_ablation_trend(runs):
    def median_map(name, overrides):
        maps = [r["report"].map for r in runs.all(name, overrides)]
        return statistics.median(maps), maps

    full, full_maps = median_map("full", FULL)
    base_tri, base_tri_maps = median_map("baseline_tri", BASELINE_TRI)
    base_icg, base_icg_maps = median_map("baseline_icg", BASELINE_ICG)
    full_tri, full_tri_maps = median_map("full_tri", FULL_TRI)
    # the TRI -> ICG swap is checked both without modules and with both modules
    ok = full >= base_tri and base_icg >= base_tri and full >= full_tri
    detail = (f"median mAP full={full:.4f} {_fmt(full_maps)} vs baseline+TRI={base_tri:.4f} {_fmt(base_tri_maps)}; "
              f"TRI->ICG without modules {base_tri:.4f} -> {base_icg:.4f} {_fmt(base_icg_maps)}; "
              f"TRI->ICG with MPFR+SDCE {full_tri:.4f} {_fmt(full_tri_maps)} -> {full:.4f}")
    assert suites.record(6, "ablation direction", ok, detail)


@pytest.mark.slow
def test_criterion_7_distance_distribution(runs):
    full = [r["hist"] for r in runs.all("full", FULL)]
    base = [r["hist"] for r in runs.all("baseline_tri", BASELINE_TRI)]
    ordered = all(h.intra_mean < h.inter_mean for h in full)
    g_full = statistics.median(h.gap for h in full)
    g_base = statistics.median(h.gap for h in base)
    ok = ordered and g_full >= g_base
    detail = (f"full intra/inter means {[(round(h.intra_mean, 4), round(h.inter_mean, 4)) for h in full]}; "
              f"median gap full={g_full:.4f} vs baseline+TRI={g_base:.4f}")
    assert suites.record(7, "cross-modal distance distribution", ok, detail)


@pytest.mark.slow
def test_criterion_8_determinism(runs):
    a = runs.run("full", FULL, SEEDS[0])
    b = runs.run("full", FULL, SEEDS[0], tag="repeat")
    same_json = a["report"].to_json() == b["report"].to_json()
    same_hash = a["hash"] == b["hash"]
    detail = f"EvalReport JSON identical={same_json}, parameter hash identical={same_hash} ({a['hash'][:16]}...)"
    assert suites.record(8, "determinism", same_json and same_hash, detail)
