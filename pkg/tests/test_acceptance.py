"""Acceptance suite: one test per release criterion, stated tolerances.

Run with `pytest tests/test_acceptance.py -v -s` to see one line per
criterion.
"""

import time

import numpy as np
import pytest

from maskrefine.correspondence import (
    FeatureMap,
    MixConfig,
    ToyFeatureExtractor,
    find_correspondence,
    find_correspondence_bruteforce,
    mix_probabilities,
    normalize_features,
    refine_mask,
)
from maskrefine.diffusion import (
    ConditionSpec,
    ToyDenoiser,
    add_noise,
    ddim_step,
    one_step_reconstruct,
    predict_x0,
)
from maskrefine.evaluation import class_counts, iou, mean_iou, stratified_gain
from maskrefine.injection import (
    AttentionLogits,
    InjectionMask,
    inject_attention,
    prepare_injection_set,
    row_softmax,
)
from maskrefine.pipeline import DatasetLayout, RunConfig, run_refinement
from maskrefine.toydata import (
    PROB_BACKGROUND,
    PROB_INTERIOR,
    PROB_OVER_RING,
    PROB_UNDER_RING,
    TOY_BG_TEXTURE,
    TOY_FG_TEXTURE,
    make_toy_dataset,
    over_segmented_scene,
    under_segmented_scene,
)
from maskrefine.types import (
    ClassIndexMask,
    ImageTensor,
    NoiseSchedule,
    SoftMask,
    class_token_indices,
    seeded_normal,
)


def _ok(name: str) -> None:
    print(f"{name}: PASS")


def test_p1_attention_injection_suite():
    """P1: vanilla at alpha=0, row-stochastic, mass monotone in alpha."""
    rng = np.random.default_rng(101)
    alphas = (0.0, 1.0, 5.0, 20.0)
    start = time.perf_counter()
    for _ in range(500):
        q = int(rng.integers(1, 65))
        k = int(rng.integers(1, 17))
        d = int(rng.integers(1, 33))
        logits = AttentionLogits(rng.standard_normal((q, d)),
                                 rng.standard_normal((k, d)))
        bias = InjectionMask(rng.integers(0, 2, size=(q, k)), kind="cross")
        vanilla = row_softmax((logits.q @ logits.k.T) * logits.scale)
        prev_mass = None
        for alpha in alphas:
            out = inject_attention(logits, bias, alpha)
            assert np.abs(out.sum(axis=1) - 1.0).max() <= 1e-6
            if alpha == 0.0:
                assert np.abs(out - vanilla).max() <= 1e-6
            mass = (out * bias.bits).sum(axis=1)
            if prev_mass is not None:
                rows = bias.bits.any(axis=1)
                assert (mass[rows] >= prev_mass[rows] - 1e-12).all()
            prev_mass = mass
    elapsed = time.perf_counter() - start
    assert elapsed < 5.0, f"injection suite took {elapsed:.2f}s"
    _ok(f"P1 attention injection (500 instances, {elapsed:.2f}s)")


def test_p2_correspondence_oracle_equivalence_and_budget():
    """P2: blocked search == brute force on 200 instances; 64x64 < 1s."""
    rng = np.random.default_rng(202)
    for trial in range(200):
        h = int(rng.integers(1, 33))
        w = int(rng.integers(1, 33))
        d = int(rng.integers(1, 65))
        orig = normalize_features(
            FeatureMap(rng.standard_normal((h, w, d)).astype(np.float32)))
        gen_arr = rng.standard_normal((h, w, d)).astype(np.float32)
        if trial % 5 == 0 and h * w >= 2:
            flat = orig.data.reshape(-1, d).copy()
            flat[-1] = flat[0]  # exact duplicate: forces a tie when matched
            orig = FeatureMap(flat.reshape(h, w, d), normalized=True)
            gen_arr[0, 0] = flat[0]
        gen = normalize_features(FeatureMap(gen_arr))
        expected = find_correspondence_bruteforce(orig, gen)
        got = find_correspondence(orig, gen)
        np.testing.assert_array_equal(got.indices, expected.indices)

    orig = normalize_features(
        FeatureMap(rng.standard_normal((64, 64, 64)).astype(np.float32)))
    gen = normalize_features(
        FeatureMap(rng.standard_normal((64, 64, 64)).astype(np.float32)))
    start = time.perf_counter()
    find_correspondence(orig, gen)
    elapsed = time.perf_counter() - start
    assert elapsed < 1.0, f"64x64 search took {elapsed:.3f}s"
    _ok(f"P2 correspondence oracle equivalence (200 instances; "
        f"64x64 d=64 in {elapsed * 1000:.0f}ms)")


def test_p3_mixing_algebra():
    """P3: identity, range, filter, direction, exact arithmetic <= 1e-7."""
    from maskrefine.correspondence import CorrespondenceMap

    rng = np.random.default_rng(303)
    betas = (0.0, 0.25, 0.5, 0.8, 0.9, 1.0)
    for beta in betas:
        for _ in range(20):
            h = int(rng.integers(1, 12))
            w = int(rng.integers(1, 12))
            n = h * w
            s_vals = (rng.integers(0, 257, size=(h, w)) / 256.0).astype(np.float32)
            s = SoftMask(s_vals)
            delta = CorrespondenceMap(rng.integers(0, n, size=n), h, w)
            lo, hi = sorted(rng.random(2))
            cfg = MixConfig(beta=beta, cf_low=lo, cf_high=hi)
            out = mix_probabilities(s, delta, cfg)

            flat_in = s_vals.reshape(-1)
            flat_out = out.values.reshape(-1)
            band = (flat_in >= np.float32(lo)) & (flat_in <= np.float32(hi))

            # range preservation
            assert flat_out.min() >= 0.0 and flat_out.max() <= 1.0
            # filtered-out pixels copied verbatim
            np.testing.assert_array_equal(flat_out[~band], flat_in[~band])
            # exact mixing arithmetic on band pixels
            expected = (beta * flat_in.astype(np.float64)
                        + (1.0 - beta) * flat_in.astype(np.float64)[delta.indices])
            assert np.abs(flat_out[band] - expected[band]).max(initial=0.0) <= 1e-7
            if beta == 1.0:
                np.testing.assert_array_equal(flat_out, flat_in)
            else:
                toward = np.sign(flat_in[delta.indices].astype(np.float64) - flat_in)
                change = np.sign(flat_out.astype(np.float64) - flat_in)
                np.testing.assert_array_equal(change[band], toward[band])
    _ok("P3 mixing algebra (beta grid x random S, delta)")


def test_p4_diffusion_algebra():
    """P4: round trip <= 1e-6; toy reconstruction <= 1e-5; ddim exact."""
    sched = NoiseSchedule.linear_beta()
    rng = np.random.default_rng(404)
    x0 = ImageTensor(rng.random((8, 8, 3)))
    eps = ImageTensor(seeded_normal((8, 8, 3), 99))
    for t in (1, 100, 400, 999):
        back = predict_x0(add_noise(x0, t, eps, sched), eps, t, sched)
        assert np.abs(back.array - x0.array).max() <= 1e-6

    mask = np.zeros((8, 8), dtype=np.float32)
    mask[2:6, 2:6] = 1.0
    tokens = class_token_indices("a photo of cat", "cat")
    inj = prepare_injection_set(SoftMask(mask), 0.5, tokens, [8], key_length=4)
    cond = ConditionSpec(prompt="a photo of cat", token_set=tokens, injection=inj)
    backend = ToyDenoiser.from_textures(TOY_FG_TEXTURE, TOY_BG_TEXTURE, sched)
    target = mask[:, :, None] * np.array(TOY_FG_TEXTURE) \
        + (1 - mask[:, :, None]) * np.array(TOY_BG_TEXTURE)
    for t_s in (1, 400, 999):
        out = one_step_reconstruct(x0, t_s, cond, backend, seed=5, sched=sched)
        assert np.abs(out.array - target).max() <= 1e-5

    x_t = ImageTensor(rng.random((4, 4, 2)))
    eps_hat = ImageTensor(rng.standard_normal((4, 4, 2)))
    x0_hat = predict_x0(x_t, eps_hat, 400, sched)
    stepped = ddim_step(x_t, eps_hat, 400, 0, sched, sigma=0.0)
    np.testing.assert_array_equal(stepped.array, x0_hat.array)
    _ok("P4 diffusion algebra (round trips, toy backend, sampler step)")


def test_p5_evaluation_oracle():
    """P5: metrics match a pixel-counting oracle; bands match fixtures."""
    rng = np.random.default_rng(505)
    num_classes = 4
    preds, gts = [], []
    for _ in range(100):
        pred = ClassIndexMask(rng.integers(0, num_classes, size=(16, 16)).astype(np.int32))
        gt = ClassIndexMask(rng.integers(0, num_classes, size=(16, 16)).astype(np.int32))
        preds.append(pred)
        gts.append(gt)
        inter, union = class_counts(pred, gt, num_classes)
        for c in range(num_classes):
            o_inter = o_union = 0
            for p, g in zip(pred.labels.reshape(-1), gt.labels.reshape(-1)):
                o_inter += (p == c) and (g == c)
                o_union += (p == c) or (g == c)
            assert inter[c] == o_inter and union[c] == o_union
            if o_union:
                assert iou(pred, gt, c) == o_inter / o_union

    report = mean_iou(preds, gts, num_classes)
    total_i = np.zeros(num_classes, dtype=np.int64)
    total_u = np.zeros(num_classes, dtype=np.int64)
    for p, g in zip(preds, gts):
        i, u = class_counts(p, g, num_classes)
        total_i += i
        total_u += u
    expected = (total_i[total_u > 0] / total_u[total_u > 0]).mean()
    assert report.mean_iou == pytest.approx(float(expected), abs=1e-12)

    gt = ClassIndexMask(np.ones((1, 10), dtype=np.int32))
    def with_hits(k):
        return ClassIndexMask(
            np.array([[1] * k + [0] * (10 - k)], dtype=np.int32))
    # initial IoUs: 10, 30 | 50, 70 | 90, 100 percent
    initial = [with_hits(1), with_hits(3), with_hits(5), with_hits(7),
               with_hits(9), with_hits(10)]
    refined = [with_hits(2), with_hits(3), with_hits(7), with_hits(8),
               with_hits(10), with_hits(10)]
    strat = stratified_gain(initial, refined, [gt] * 6, 2)
    (b0, c0, g0), (b1, c1, g1), (b2, c2, g2) = strat.bands
    assert (b0, b1, b2) == ((0.0, 40.0), (40.0, 80.0), (80.0, 100.0))
    assert (c0, c1, c2) == (2, 2, 2)
    assert g0 == pytest.approx((10 + 0) / 2)
    assert g1 == pytest.approx((20 + 10) / 2)
    assert g2 == pytest.approx((10 + 0) / 2)
    _ok("P5 evaluation oracle (100 random pairs + band fixtures)")


def test_p6_engineered_end_to_end_fixtures():
    """P6: over-fixture shrinks exactly, under-fixture grows exactly."""
    beta = 0.8
    mix = MixConfig(beta=beta, cf_low=0.2, cf_high=0.6)
    extractor = ToyFeatureExtractor()
    backend = ToyDenoiser.from_textures(TOY_FG_TEXTURE, TOY_BG_TEXTURE)

    for kind, scene, ring_prob, matched_prob in (
        ("over", over_segmented_scene(), PROB_OVER_RING, PROB_BACKGROUND),
        ("under", under_segmented_scene(), PROB_UNDER_RING, PROB_INTERIOR),
    ):
        name = next(iter(scene.coarse))
        s = scene.coarse[name]
        prompt = f"a photo of {name}"
        tokens = class_token_indices(prompt, name)
        inj = prepare_injection_set(s, 0.5, tokens, [64], key_length=4)
        cond = ConditionSpec(prompt=prompt, token_set=tokens, injection=inj)
        x_gen = one_step_reconstruct(scene.image, 400, cond, backend, seed=0)
        x_gen = ImageTensor(np.clip(x_gen.array, 0.0, 1.0).astype(np.float32))
        refined = refine_mask(scene.image, x_gen, s, extractor, mix)

        ring = s.values == np.float32(ring_prob)
        change = refined.values[ring].astype(np.float64) - s.values[ring]
        expected = (1.0 - beta) * (np.float32(matched_prob)
                                   - s.values[ring].astype(np.float64))
        assert np.abs(change - expected).max() <= 1e-6

        gt_cls = next(iter(scene.class_ids.values()))
        coarse_label = ClassIndexMask(
            np.where(s.values >= 0.5, gt_cls, 0).astype(np.int32))
        refined_label = ClassIndexMask(
            np.where(refined.values >= 0.5, gt_cls, 0).astype(np.int32))
        coarse_iou = iou(coarse_label, scene.gt, gt_cls)
        refined_iou = iou(refined_label, scene.gt, gt_cls)
        assert refined_iou > coarse_iou, (kind, coarse_iou, refined_iou)
        assert refined_iou == pytest.approx(1.0)
    _ok("P6 engineered over/under fixtures (exact adjustment, IoU up)")


def test_p7_determinism_across_runs_and_workers(tmp_path):
    """P7: identical config + seed => byte-identical outputs at 1 and 4 workers."""
    trees = []
    for name, workers in (("r1w1", 1), ("r2w1", 1), ("r1w4", 4), ("r2w4", 4)):
        root = tmp_path / name
        make_toy_dataset(root)
        result = run_refinement(DatasetLayout.open(root),
                                RunConfig(seed=13, workers=workers))
        assert result.ok
        out = root / "out"
        trees.append({str(p.relative_to(out)): p.read_bytes()
                      for p in sorted(out.rglob("*")) if p.is_file()})
    assert trees[0] == trees[1] == trees[2] == trees[3]
    pngs = [k for k in trees[0] if k.endswith(".png")]
    assert pngs and "report.json" in trees[0]
    _ok("P7 determinism (2 runs x workers {1, 4} byte-identical)")
