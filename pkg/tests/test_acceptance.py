"""Acceptance suite: one or more tests per criterion, summarised at the end of the run.

Run on its own with ``pytest tests/test_acceptance.py -m acceptance``; the
terminal summary prints one PASS/FAIL line per criterion with the measured
values.
"""

import copy
import json
import math
import time

import numpy as np
import pytest
import torch
import torch.nn.functional as F
from torch.func import functional_call

from makeup_prior.backends import (FeaturePyramid, KeySet, RegionMaskSet, ToyViT, embed_face,
                                   extract_keys)
from makeup_prior.cli import EXIT_OK, main
from makeup_prior.correspondence import (CorrespondenceMatrix, centralize, correlation_matrix,
                                         region_correlation, warp)
from makeup_prior.decoder import ConditionalDecoder, DecoderArch, block_conditions, decode
from makeup_prior.evaluation import (Gallery, VerificationThreshold, calibrate_threshold,
                                     identify, load_threshold_presets, rank_n_rates, verify)
from makeup_prior.experiment import load_config, write_toy_experiment
from makeup_prior.losses import (HistogramTargets, LossWeights, adversarial_loss, global_loss,
                                 histogram_loss, histogram_match, self_similarity,
                                 structure_loss)
from makeup_prior.pipeline import (RunConfig, VideoRun, iterations_to_reach, protect_image,
                                   protect_video, toy_run_config)
from makeup_prior.toyfaces import labeled_set, make_identity, makeup_reference, render_face

pytestmark = pytest.mark.acceptance


def criterion(number, title):
    return pytest.mark.criterion(number, title)


# ---------------------------------------------------------------------------
# 1. histogram matching


def _quantile_map_oracle(src, ref):
    """Scalar-loop CDF matching: average rank of each source value -> linear reference quantile."""
    ref = sorted(ref)
    n, m = len(src), len(ref)
    out = []
    for v in src:
        below = sum(1 for w in src if w < v)
        equal = sum(1 for w in src if w == v)
        rank = below + (equal - 1) / 2.0              # 0-based average rank among ties
        q = 0.5 if n == 1 else rank / (n - 1)
        pos = q * (m - 1)
        lo = int(math.floor(pos))
        hi = min(lo + 1, m - 1)
        frac = pos - lo
        out.append(ref[lo] if frac == 0 else ref[lo] + frac * (ref[hi] - ref[lo]))
    return out


@criterion(1, "histogram matching equals brute-force quantile mapping")
def test_histogram_matching_oracle(record_property):
    rng = np.random.default_rng(2024)
    start = time.perf_counter()
    worst = 0.0
    for trial in range(200):
        n, m = rng.integers(1, 65, size=2)
        src = rng.random(n)
        ref = rng.random(m)
        if trial % 4 == 0:                        # coarse values produce ties
            src = np.round(src * 5) / 5
            ref = np.round(ref * 5) / 5
        got = histogram_match(src, ref)
        want = _quantile_map_oracle(list(src), list(ref))
        worst = max(worst, float(np.max(np.abs(got - np.asarray(want)))))
    # identity and degenerate cases are exact
    for n in (1, 2, 17, 64):
        src = rng.random(n)
        assert np.array_equal(histogram_match(src, rng.permutation(src)), src)
        assert np.array_equal(histogram_match(src, np.full(int(rng.integers(1, 65)), 0.3)),
                              np.full(n, 0.3))
    elapsed = time.perf_counter() - start
    record_property("detail", f"max abs err {worst:.1e}, {elapsed:.2f}s")
    assert worst <= 1e-6
    assert elapsed < 10


# ---------------------------------------------------------------------------
# 2. correspondence


def _brute_cosines(fs, fr):
    """Scalar loops: centralize per channel, then cosine per (u, v), zero-norm guarded."""
    def central(f):
        c, h, w = f.shape
        out = np.zeros((h * w, c))
        for k in range(c):
            mean = sum(f[k, i, j] for i in range(h) for j in range(w)) / (h * w)
            for i in range(h):
                for j in range(w):
                    out[i * w + j, k] = f[k, i, j] - mean
        return out

    s, r = central(fs), central(fr)
    a = np.zeros((len(s), len(r)))
    for u in range(len(s)):
        for v in range(len(r)):
            ns = math.sqrt(sum(x * x for x in s[u]))
            nr = math.sqrt(sum(x * x for x in r[v]))
            if ns < 1e-8 or nr < 1e-8:
                continue
            a[u, v] = sum(x * y for x, y in zip(s[u], r[v])) / (ns * nr)
    return a


def _masks_at(region_mask):
    z = torch.zeros_like(region_mask)
    return RegionMaskSet({"eyes": z, "lips": region_mask, "skin": z}, 0.0)


@criterion(2, "correspondence matches scalar-loop brute force; warp limits")
def test_correspondence_oracle(record_property):
    rng = np.random.default_rng(7)
    worst = 0.0
    for trial in range(30):
        c = int(rng.integers(1, 9))
        hs, ws, hr, wr = (int(v) for v in rng.integers(1, 5, size=4))
        fs = rng.normal(size=(c, hs, ws))
        fr = rng.normal(size=(c, hr, wr))
        got = correlation_matrix(centralize(torch.as_tensor(fs)),
                                 centralize(torch.as_tensor(fr))).values.numpy()
        worst = max(worst, float(np.abs(got - _brute_cosines(fs, fr)).max()))

        # region-restricted: soft masks at feature resolution, some positions fully off
        ms = rng.random((hs, ws)) * (rng.random((hs, ws)) > 0.3)
        mr = rng.random((hr, wr)) * (rng.random((hr, wr)) > 0.3)
        if ms.sum() == 0 or mr.sum() == 0:
            continue
        a = region_correlation(torch.as_tensor(fs), torch.as_tensor(fr),
                               _masks_at(torch.as_tensor(ms)), _masks_at(torch.as_tensor(mr)), "lips")
        want = _brute_cosines(fs * ms, fr * mr)
        off = (ms <= 0).ravel()
        want[off] = 0.0
        worst = max(worst, float(np.abs(a.values.numpy() - want).max()))
        assert a.inactive.numpy()[off].all()

    # half-plane masks on a 4x4 grid: inactive rows are exactly the zero-mask rows
    fs, fr = rng.normal(size=(8, 4, 4)), rng.normal(size=(8, 4, 4))
    half = np.zeros((4, 4))
    half[:, :2] = 1
    a = region_correlation(torch.as_tensor(fs), torch.as_tensor(fr), _masks_at(torch.as_tensor(half)),
                           _masks_at(torch.ones(4, 4, dtype=torch.float64)), "lips")
    assert a.inactive.tolist() == [bool(half.ravel()[u] == 0) for u in range(16)]
    assert np.abs(a.values.numpy() - np.where(half.ravel()[:, None] > 0,
                                             _brute_cosines(fs * half, fr), 0)).max() <= 1e-6

    # warp at alpha = 1e4 selects the argmax (rows with a clear maximum)
    warp_err, rows = 0.0, 0
    for trial in range(20):
        fs, fr = rng.normal(size=(8, 4, 4)), rng.normal(size=(8, 4, 4))
        a = correlation_matrix(centralize(torch.as_tensor(fs)), centralize(torch.as_tensor(fr)))
        out = warp(a, torch.as_tensor(fr), 1e4).flatten(1).T.numpy()
        vals = a.values.numpy()
        top2 = np.sort(vals, axis=1)[:, -2:]
        clear = (top2[:, 1] - top2[:, 0]) > 2e-3
        pick = fr.reshape(8, -1).T[vals.argmax(1)]
        warp_err = max(warp_err, float(np.abs(out[clear] - pick[clear]).max()))
        rows += int(clear.sum())
    assert rows >= 0.9 * 20 * 16

    # uniform rows give the reference mean
    fr = torch.as_tensor(rng.normal(size=(8, 3, 4)))
    u = warp(CorrespondenceMatrix(torch.full((5, 12), 0.37, dtype=torch.float64), (1, 5), (3, 4)),
             fr, 50.0)
    mean_err = float((u - fr.flatten(1).mean(1)[:, None, None]).abs().max())

    record_property("detail", f"cosine err {worst:.1e}, argmax err {warp_err:.1e}, "
                              f"mean err {mean_err:.1e}")
    assert worst <= 1e-6
    assert warp_err <= 1e-4
    assert mean_err <= 1e-12


# ---------------------------------------------------------------------------
# 3. gradients


def _fd_check(fn, tensor, n_coords, rng, h=1e-6):
    """Relative errors between autograd and central differences at sampled coordinates."""
    t = tensor.detach().clone().requires_grad_(True)
    fn(t).backward()
    g = t.grad.detach().clone()
    flat = t.detach().clone().view(-1)
    errs = []
    idx = rng.choice(flat.numel(), size=min(n_coords, flat.numel()), replace=False)
    with torch.no_grad():
        for i in idx:
            orig = flat[i].item()
            flat[i] = orig + h
            up = fn(flat.view_as(t)).item()
            flat[i] = orig - h
            down = fn(flat.view_as(t)).item()
            flat[i] = orig
            fd = (up - down) / (2 * h)
            an = g.view(-1)[i].item()
            errs.append(abs(fd - an) / (max(abs(fd), abs(an)) + 1e-8))
    return errs


@criterion(3, "analytic gradients agree with central finite differences")
def test_gradient_suite(suite, record_property):
    start = time.perf_counter()
    rng = np.random.default_rng(0)
    gen = torch.Generator().manual_seed(0)
    dt = torch.float64
    results = {}

    vit = ToyViT(0, patch_size=4).to(dt)
    xs = torch.rand(3, 16, 16, generator=gen, dtype=dt)
    xp = torch.rand(3, 16, 16, generator=gen, dtype=dt)
    src_keys = extract_keys(vit, xs)
    results["structure"] = _fd_check(lambda x: structure_loss(xs, x, vit, source_keys=src_keys),
                                     xp, 60, rng)

    masks = {r: (torch.rand(12, 12, generator=gen, dtype=dt) > 0.5).to(dt) for r in ("lips", "skin")}
    targets = HistogramTargets({r: torch.rand(3, 12, 12, generator=gen, dtype=dt) * m
                                for r, m in masks.items()}, masks, [])
    results["histogram"] = _fd_check(
        lambda x: histogram_loss(x, targets, {"lips": 1.0, "skin": 0.5}),
        torch.rand(3, 12, 12, generator=gen, dtype=dt), 60, rng)

    ref = FeaturePyramid([torch.randn(4, 8, 8, generator=gen, dtype=dt),
                          torch.randn(4, 16, 16, generator=gen, dtype=dt)], [0.5, 1.0])
    results["global"] = _fd_check(lambda f: global_loss(f, ref, 3),
                                  torch.randn(4, 8, 8, generator=gen, dtype=dt), 60, rng)

    surrogates = [copy.deepcopy(e).to(dt) for e in suite.embedders[:3]]
    x_s = render_face(make_identity(0), 16).to(dt)
    x_t = render_face(make_identity(500), 16).to(dt)
    results["adversarial"] = _fd_check(lambda x: adversarial_loss(x, x_s, x_t, surrogates),
                                       torch.rand(3, 16, 16, generator=gen, dtype=dt), 60, rng)

    arch = DecoderArch(num_blocks=2, base_channels=16, output_size=(16, 16),
                       condition_channels=(4, 4), input_channels=4, modulation_hidden=8)
    dec = ConditionalDecoder(arch, 0).to(dt)
    with torch.no_grad():
        for blk in dec.blocks:
            blk.amc.gamma.weight.normal_(0, 0.1, generator=gen)
            blk.amc.beta.weight.normal_(0, 0.1, generator=gen)
    feat = torch.randn(4, 4, 4, generator=gen, dtype=dt)
    pyr = FeaturePyramid([torch.randn(4, 8, 8, generator=gen, dtype=dt),
                          torch.randn(4, 16, 16, generator=gen, dtype=dt)], [0.5, 1.0])
    weight = dec.blocks[1].conv.weight

    def with_weight(w):
        conds = block_conditions(arch, pyr)
        return functional_call(dec, {"blocks.1.conv.weight": w}, (feat, conds)).square().mean()

    # decode w.r.t. the makeup features, one decoder weight tensor, and a condition map
    results["decode/features"] = _fd_check(lambda f: decode(dec, f, pyr).square().mean(), feat, 40, rng)
    results["decode/weight"] = _fd_check(with_weight, weight, 40, rng)
    results["decode/condition"] = _fd_check(
        lambda c: decode(dec, feat, FeaturePyramid([pyr.levels[0], c], pyr.scales)).square().mean(),
        pyr.levels[1], 40, rng)

    elapsed = time.perf_counter() - start
    share = {k: float(np.mean(np.asarray(v) < 1e-3)) for k, v in results.items()}
    record_property("detail", ", ".join(f"{k} {v:.0%}" for k, v in share.items()) + f", {elapsed:.1f}s")
    assert all(v >= 0.95 for v in share.values()), share
    assert elapsed < 120


# ---------------------------------------------------------------------------
# 4. structure descriptor


@criterion(4, "self-similarity is symmetric, unit-diagonal, bounded; structure_loss(x, x) = 0")
def test_structure_descriptor_properties(suite, record_property):
    gen = torch.Generator().manual_seed(4)
    worst = 0.0
    for trial in range(100):
        n = int(torch.randint(2, 40, (1,), generator=gen))
        c = int(torch.randint(1, 24, (1,), generator=gen))
        cls = bool(trial % 2)
        keys = torch.randn(n + int(cls), c, generator=gen) * float(torch.rand(1, generator=gen) * 10 + 0.1)
        s = self_similarity(KeySet(keys, 1, (n, 1), cls))
        assert s.shape == (n, n)
        assert torch.equal(s, s.T)
        assert s.min() >= -1 and s.max() <= 1
        worst = max(worst, float((s.diagonal() - 1).abs().max()))
    x = torch.rand(3, 32, 32, generator=gen)
    zero = float(structure_loss(x, x.clone(), suite.vit))
    record_property("detail", f"diag err {worst:.1e}, L(x,x) {zero:.1e}")
    assert worst <= 1e-6
    assert zero <= 1e-6


# ---------------------------------------------------------------------------
# 5-6. toy transfer analog

SIZE = 32
N_SOURCES = 20


@pytest.fixture(scope="module")
def transfer_setup(suite):
    held = suite.embedders[3]
    calib, labels = labeled_set(60, 3, SIZE, offset=100)
    thr = calibrate_threshold(held, calib, labels, fmr=0.01)
    sources = [render_face(make_identity(i), SIZE) for i in range(N_SOURCES)]
    second = [render_face(make_identity(i), SIZE, variation=1) for i in range(N_SOURCES)]
    return held, thr, sources, second, makeup_reference(0, SIZE), render_face(make_identity(500), SIZE)


def _d(held, a, b):
    with torch.no_grad():
        return float(1 - embed_face(held, a) @ embed_face(held, b))


@criterion(5, "impersonation transfers to a held-out toy embedder")
def test_toy_transfer_impersonation(backends, transfer_setup, record_property):
    held, thr, sources, _, x_r, x_t = transfer_setup
    cfg = toy_run_config(SIZE, 100)
    assert sorted(cfg.surrogate_names) == sorted(backends.surrogates)
    assert held.name not in cfg.surrogate_names
    start = time.perf_counter()
    protected = [protect_image(x_s, x_r, x_t, cfg, backends).protected for x_s in sources]
    elapsed = time.perf_counter() - start
    psr = np.mean([_d(held, p, x_t) <= thr.tau for p in protected])
    clean = np.mean([_d(held, x_s, x_t) <= thr.tau for x_s in sources])
    record_property("detail", f"PSR {psr:.2f}, clean {clean:.2f}, tau {thr.tau:.3f}, "
                              f"{SIZE}x{SIZE} CPU {elapsed:.0f}s")
    assert psr >= 0.6
    assert clean <= 0.1
    assert elapsed < 2 * 3600


@criterion(6, "dodging pushes the protected face away from the source identity")
def test_toy_transfer_dodging(backends, transfer_setup, record_property):
    held, thr, sources, second, x_r, _ = transfer_setup
    cfg = toy_run_config(SIZE, 100, attack_mode="dodge")
    wins = wins_probe = 0
    for x_s, x_s2 in zip(sources, second):
        p = protect_image(x_s, x_r, None, cfg, backends).protected
        clean_pair = _d(held, x_s, x_s2)
        wins += _d(held, p, x_s) > clean_pair
        wins_probe += _d(held, p, x_s2) > clean_pair
    rate, rate_probe = wins / N_SOURCES, wins_probe / N_SOURCES
    record_property("detail", f"D(p,x_s) > D(clean pair) in {rate:.0%}; "
                              f"D(p,probe) > D(clean pair) in {rate_probe:.0%}")
    assert rate >= 0.8


# ---------------------------------------------------------------------------
# 7. video warm start


@criterion(7, "warm-started frames reach frame 0's loss in <= 1/5 of its iterations")
def test_video_warm_start(backends, record_property):
    iters = 100
    budget = iters // 5
    cfg = toy_run_config(SIZE, iters)
    x_r, x_t = makeup_reference(0, SIZE), render_face(make_identity(500), SIZE)
    warm_steps, cold_steps = [], []
    for ident in range(3):
        # three consecutive near-identical frames: same pose and lighting, fresh sensor noise
        frames = [render_face(make_identity(ident), SIZE, variation=v, lighting=0.0, noise=0.005)
                  for v in range(3)]
        warm = protect_video(VideoRun(frames, per_frame_iterations=budget), x_r, x_t, cfg, backends)
        cold = protect_video(VideoRun(frames, keyframe_interval=1), x_r, x_t, cfg, backends)
        level = warm[0].final_loss.total
        assert cold[0].final_loss.total == level            # same cold frame 0 in both runs
        for t in (1, 2):
            traj = warm[t].loss_trajectory + [warm[t].final_loss]
            warm_steps.append(iterations_to_reach(traj, level))
            cold_steps.append(iterations_to_reach(cold[t].loss_trajectory[:budget + 1], level))
    record_property("detail", f"warm steps {warm_steps}, cold within {budget}: {cold_steps}")
    assert all(s is not None and s <= budget for s in warm_steps)
    assert all(s is None for s in cold_steps)


# ---------------------------------------------------------------------------
# 8. ablation harness


@criterion(8, "ablation runs complete; lambda_adv = 0 leaves the adversarial term unchanged")
def test_ablation_runs_complete(backends, record_property):
    x_s, x_r, x_t = render_face(make_identity(0), SIZE), makeup_reference(0, SIZE), \
        render_face(make_identity(500), SIZE)
    for name in ("lambda_hist", "lambda_struc", "lambda_glob"):
        w = LossWeights(lambda_adv=50.0, **{name: 0.0})
        rec = protect_image(x_s, x_r, x_t, toy_run_config(SIZE, 30, weights=w), backends)
        assert len(rec.loss_trajectory) == 30
        for bd in rec.loss_trajectory + [rec.final_loss]:
            d = bd.as_dict()
            assert set(d) == {"struc", "hist", "glob", "adv", "total"}
            assert all(math.isfinite(v) for v in d.values())
    record_property("detail", "hist/struc/glob ablations complete")


@criterion(8, "ablation runs complete; lambda_adv = 0 leaves the adversarial term unchanged")
def test_zero_adversarial_weight_drift(backends, record_property):
    x_r, x_t = makeup_reference(0, SIZE), render_face(make_identity(500), SIZE)
    w = LossWeights(lambda_adv=0.0)
    drifts = []
    for i in range(3):
        rec = protect_image(render_face(make_identity(i), SIZE), x_r, x_t,
                            toy_run_config(SIZE, 100, weights=w), backends)
        drifts.append(rec.final_loss.adv - rec.loss_trajectory[0].adv)
    record_property("detail", "adv(final) - adv(iter 0) = " + ", ".join(f"{d:+.3f}" for d in drifts))
    assert all(abs(d) < 0.05 for d in drifts)


# ---------------------------------------------------------------------------
# 9. evaluation oracles


def _oracle_ranking(probe, labels, embs):
    best = {}
    for lab, e in zip(labels, embs):
        d = 1.0 - float(torch.dot(e, probe))
        best[lab] = min(d, best.get(lab, math.inf))
    return sorted(best, key=lambda lab: (best[lab], lab))


@criterion(9, "identification and Rank-N match exhaustive oracles; verify monotone; presets verbatim")
def test_evaluation_oracles(record_property):
    gen = torch.Generator().manual_seed(9)
    checked = 0
    for trial in range(40):
        n = int(torch.randint(2, 101, (1,), generator=gen))
        n_ids = int(torch.randint(2, min(n, 30) + 1, (1,), generator=gen))
        labels = [f"id{int(v):02d}" for v in torch.randint(0, n_ids, (n,), generator=gen)]
        if len(set(labels)) < 2:
            continue
        embs = F.normalize(torch.randn(n, 6, generator=gen, dtype=torch.float64), dim=1)
        if trial % 3 == 0:                       # duplicated rows force exact distance ties
            embs[n // 2:] = embs[: n - n // 2].clone()
        gallery = Gallery(labels, embs)
        k = len(gallery.identities)
        probes = F.normalize(torch.randn(8, 6, generator=gen, dtype=torch.float64), dim=1)
        probes[0] = embs[0]
        for p in probes:
            full = _oracle_ranking(p, labels, embs)
            for n_top in {1, min(5, k), k}:
                assert identify(p, gallery, n_top) == full[:n_top]
            checked += 1
        ns = sorted({1, min(5, k)})
        targets = [labels[int(torch.randint(0, n, (1,), generator=gen))] for _ in probes]
        for mode in ("impersonate", "dodge"):
            rep = rank_n_rates(probes, gallery, ns, mode, true_labels=targets, target_labels=targets)
            for n_top in ns:
                hits = [t in _oracle_ranking(p, labels, embs)[:n_top] for p, t in zip(probes, targets)]
                want = np.mean(hits) if mode == "impersonate" else np.mean([not h for h in hits])
                assert rep.rank_n[n_top] == want
            if mode == "impersonate":
                assert rep.rank_n[ns[0]] <= rep.rank_n[ns[-1]]

    # Rank-1 <= Rank-5 for both modes
    embs = F.normalize(torch.randn(40, 6, generator=gen, dtype=torch.float64), dim=1)
    labels = [f"id{i % 10}" for i in range(40)]
    g = Gallery(labels, embs)
    probes = F.normalize(torch.randn(30, 6, generator=gen, dtype=torch.float64), dim=1)
    lab = [f"id{i % 10}" for i in range(30)]
    for mode in ("impersonate", "dodge"):
        rates = rank_n_rates(probes, g, (1, 5), mode, true_labels=lab, target_labels=lab).rank_n
        if mode == "impersonate":
            assert rates[1] <= rates[5]
        else:
            # Rank-N-U counts probes whose top N excludes the true identity
            assert rates[5] <= rates[1]

    # verify is monotone in tau
    taus = np.linspace(0.01, 1.99, 60)
    for _ in range(100):
        a, b = F.normalize(torch.randn(2, 6, generator=gen, dtype=torch.float64), dim=1)
        flags = [verify(a, b, VerificationThreshold("x", float(t))) for t in taus]
        assert flags == sorted(flags)

    presets = {k: v.tau for k, v in load_threshold_presets().items()}
    record_property("detail", f"{checked} probes vs oracle, presets {presets}")
    assert presets == {"irse50": 0.241, "ir152": 0.167, "mobileface": 0.302, "facenet": 0.409}


# ---------------------------------------------------------------------------
# 10. reproducibility


def _strip_timing(man):
    man = dict(man)
    man.pop("timing")
    return man


@criterion(10, "identical configs and seeds reproduce images and manifests")
def test_reproducibility(backends, tmp_path, record_property):
    x_s, x_r, x_t = render_face(make_identity(3), SIZE), makeup_reference(1, SIZE), \
        render_face(make_identity(501), SIZE)
    a = protect_image(x_s, x_r, x_t, toy_run_config(SIZE, 50, seed=5), backends)
    b = protect_image(x_s, x_r, x_t, toy_run_config(SIZE, 50, seed=5), backends)
    diff = float((a.protected - b.protected).abs().max())
    assert diff <= 1e-6
    assert _strip_timing(a.manifest()) == _strip_timing(b.manifest())

    dets = [protect_image(x_s, x_r, x_t, toy_run_config(SIZE, 50, seed=5, deterministic=True), backends)
            for _ in range(2)]
    assert torch.equal(dets[0].protected, dets[1].protected)

    # full CLI runs into two separate experiment directories
    outs = []
    for k in range(2):
        cfg = write_toy_experiment(tmp_path / f"run{k}", n_sources=2, n_distractors=2, iterations=20)
        assert main(["protect", "--config", str(cfg), "--deterministic", "--seed", "3"]) == EXIT_OK
        outs.append(cfg.parent / "out" / "protect" / "runs")
    runs = sorted(p.name for p in outs[0].iterdir())
    assert runs == sorted(p.name for p in outs[1].iterdir())
    for r in runs:
        assert (outs[0] / r / "protected.png").read_bytes() == (outs[1] / r / "protected.png").read_bytes()
        m0, m1 = (json.loads((o / r / "manifest.json").read_text()) for o in outs)
        assert _strip_timing(m0) == _strip_timing(m1)
    record_property("detail", f"max diff {diff:.1e}; deterministic and CLI runs bit-exact")


# ---------------------------------------------------------------------------
# 11. defaults


@criterion(11, "default configuration equals the published hyperparameters")
def test_default_config_fidelity(tmp_path, record_property):
    (tmp_path / "c.yaml").write_text("schema: makeup-prior/experiment\nversion: 1\n")
    for run in (RunConfig(), load_config(tmp_path / "c.yaml").run):
        assert run.iterations == 450
        assert run.optimizer.lr == 2e-4
        assert (run.optimizer.beta1, run.optimizer.beta2) == (0.9, 0.999)
        w = run.weights
        assert (w.lambda_struc, w.lambda_hist, w.lambda_glob, w.lambda_adv) == (0.001, 0.8, 0.2, 0.003)
    record_property("detail", "450 it, lr 2e-4, betas (0.9, 0.999), lambdas (0.001, 0.8, 0.2, 0.003)")
