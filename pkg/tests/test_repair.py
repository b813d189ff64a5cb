"""Statistics-repair tests: the analytic gamma rescale, calibration-data
repair at each observation site, and batch synthesis from the network alone."""

import numpy as np
import pytest

from foldkit.clustering import Assignment, cluster_means
from foldkit.errors import ValidationError
from foldkit.folding import FoldPlan, discover_groups
from foldkit.nn import forward, forward_trace, get_block, path_str
from foldkit.repair import (InversionConfig, apply_fold_ar, ar_scale,
                            data_repair, deep_inversion,
                            estimate_cluster_correlation, fold_data_repair,
                            fold_dir, fold_naive)

from oracles import duplicate_channels, pairwise_mean_cosine, random_network


def calib_batches(splits, size=64):
    x = splits.calib.features
    return [x[i:i + size] for i in range(0, len(x), size)]


# ---------------------------------------------------------------------------
# analytic scale factor

def test_ar_scale_pinned_values():
    assert abs(ar_scale(2, 0.0) - np.sqrt(2.0)) < 1e-12
    for n in (1, 2, 3, 8, 64):
        assert abs(ar_scale(n, 1.0) - 1.0) < 1e-12
    for e in (-0.9, 0.0, 0.37, 1.0):
        assert ar_scale(1, e) == 1.0
    assert abs(ar_scale(4, 0.5) - 4.0 / np.sqrt(4 + 12 * 0.5)) < 1e-12


def test_ar_scale_monotone_and_clamped():
    grid = [ar_scale(5, e) for e in np.linspace(-0.2, 1.0, 13)]
    assert all(a >= b - 1e-15 for a, b in zip(grid, grid[1:]))
    # below the negative-correlation bound the scale saturates instead of
    # dividing by a non-positive variance
    assert ar_scale(3, -5.0) == ar_scale(3, -0.5 + 1e-3)
    assert np.isfinite(ar_scale(2, -1.0))
    assert ar_scale(2, 2.0) == ar_scale(2, 1.0)
    with pytest.raises(ValidationError):
        ar_scale(0, 0.0)


def test_estimate_cluster_correlation_matches_double_loop(rng):
    rows = rng.normal(size=(12, 7))
    labels = np.array([0, 0, 0, 1, 1, 2, 2, 2, 2, 3, 3, 3])
    e = estimate_cluster_correlation(rows, Assignment(labels=labels, k=4))
    for c in range(4):
        want = pairwise_mean_cosine(rows[labels == c])
        assert abs(e[c] - want) < 1e-12


def test_estimate_cluster_correlation_singleton_and_zero_rows(rng):
    rows = rng.normal(size=(3, 4))
    e = estimate_cluster_correlation(rows, Assignment(labels=np.array([0, 1, 1]), k=2))
    assert e[0] == 1.0
    rows[2] = 0.0
    with pytest.raises(ValidationError):
        estimate_cluster_correlation(rows, Assignment(labels=np.array([0, 1, 1]), k=2))
    # zero row alone in its cluster never enters a cosine
    e = estimate_cluster_correlation(rows, Assignment(labels=np.array([0, 0, 1]), k=2))
    assert e[1] == 1.0


# ---------------------------------------------------------------------------
# analytic repair

def test_fold_ar_requires_batchnorm(rng):
    net = random_network("mlp", rng)
    with pytest.raises(ValidationError):
        apply_fold_ar(net, FoldPlan(sparsity=0.5))


def test_fold_ar_is_identity_on_exact_duplicates(rng):
    """Duplicate channels correlate at exactly 1, so the variance of their
    mean needs no correction and the analytic repair reduces to plain folding."""
    net = random_network("mlp_bn", rng, width=6)
    big = duplicate_channels(net, 2)
    x = rng.normal(size=(16,) + net.input_shape)
    folded_ar, rep_ar = apply_fold_ar(big, FoldPlan(sparsity=0.5, seed=0))
    folded_plain, _ = fold_naive(big, FoldPlan(sparsity=0.5, seed=0))
    assert rep_ar.repair == "ar"
    np.testing.assert_allclose(forward(folded_ar, x), forward(folded_plain, x), atol=1e-10)
    np.testing.assert_allclose(forward(folded_ar, x), forward(net, x), atol=1e-9)


def test_fold_ar_scales_gamma_only(small_trained, rng):
    net, _, _ = small_trained
    folded_ar, _ = apply_fold_ar(net, FoldPlan(sparsity=0.5, seed=0))
    folded_plain, _ = fold_naive(net, FoldPlan(sparsity=0.5, seed=0))
    for g in discover_groups(folded_plain):
        bn_a = get_block(folded_ar, g.producers[0].bn_path)
        bn_p = get_block(folded_plain, g.producers[0].bn_path)
        np.testing.assert_array_equal(bn_a.beta, bn_p.beta)
        np.testing.assert_array_equal(bn_a.running_mean, bn_p.running_mean)
        np.testing.assert_array_equal(bn_a.running_var, bn_p.running_var)
        assert np.all(bn_a.gamma / bn_p.gamma >= 1.0 - 1e-12)  # E <= 1 inflates
        wa = get_block(folded_ar, g.producers[0].path).weight
        wp = get_block(folded_plain, g.producers[0].path).weight
        np.testing.assert_array_equal(wa, wp)


# ---------------------------------------------------------------------------
# calibration-data repair

def test_data_repair_needs_batches(small_trained):
    net, splits, _ = small_trained
    with pytest.raises(ValidationError):
        fold_data_repair(net, FoldPlan(sparsity=0.5), [])


def test_data_repair_is_noop_on_exact_duplicates(rng):
    net = random_network("mlp_bn", rng, width=6)
    big = duplicate_channels(net, 2)
    batches = [rng.normal(size=(32,) + net.input_shape) for _ in range(2)]
    repaired, _ = fold_data_repair(big, FoldPlan(sparsity=0.5, seed=0), batches)
    x = rng.normal(size=(16,) + net.input_shape)
    np.testing.assert_allclose(forward(repaired, x), forward(net, x), atol=1e-9)


def test_data_repair_bn_free_matches_preactivation_exactly(rng):
    """Without BatchNorm the correction is fused into rows and bias, which is
    linear at the producer output, so the match there is exact."""
    net = random_network("mlp", rng, width=8)
    batches = [rng.normal(size=(48,) + net.input_shape) for _ in range(2)]
    pooled = np.concatenate(batches, axis=0)
    repaired, report = fold_data_repair(net, FoldPlan(sparsity=0.5, seed=0), batches)
    recs = {r.group_id: r for r in report.groups}
    groups = discover_groups(net)
    sites = [path_str(g.producers[0].path) for g in groups]
    _, orig = forward_trace(net, pooled, sites=sites)
    _, fixd = forward_trace(repaired, pooled, sites=sites)
    for g, site in zip(groups, sites):
        a = recs[g.group_id].assignment()
        mu_t = cluster_means(a, orig[site].mean[:, None])[:, 0]
        sd_t = cluster_means(a, np.sqrt(orig[site].var)[:, None])[:, 0]
        np.testing.assert_allclose(fixd[site].mean, mu_t, atol=1e-8)
        np.testing.assert_allclose(np.sqrt(fixd[site].var), sd_t, atol=1e-8)


def test_data_repair_residual_producers_match_post_bn_exactly(rng):
    """Producers coupled through a residual sum are corrected at their post-BN
    output where the affine acts linearly, so the match there is exact."""
    net = random_network("residual", rng, width=8)
    batches = [rng.normal(size=(48,) + net.input_shape) for _ in range(2)]
    pooled = np.concatenate(batches, axis=0)
    repaired, report = fold_data_repair(net, FoldPlan(sparsity=0.5, seed=0), batches)
    recs = {r.group_id: r for r in report.groups}
    res = next(g for g in discover_groups(net) if g.kind == "residual_identity")
    sites = [path_str(p.bn_path) for p in res.producers]
    _, orig = forward_trace(net, pooled, sites=sites)
    _, fixd = forward_trace(repaired, pooled, sites=sites)
    a = recs[res.group_id].assignment()
    for site in sites:
        mu_t = cluster_means(a, orig[site].mean[:, None])[:, 0]
        sd_t = cluster_means(a, np.sqrt(orig[site].var)[:, None])[:, 0]
        np.testing.assert_allclose(fixd[site].mean, mu_t, atol=1e-8)
        np.testing.assert_allclose(np.sqrt(fixd[site].var), sd_t, atol=1e-8)


def test_data_repair_converges_at_probe_sites(small_trained):
    """Post-activation matching is a fixed-point iteration; on a trained net
    it should land within a few percent of the targets."""
    net, splits, _ = small_trained
    batches = calib_batches(splits)
    pooled = np.concatenate(batches, axis=0)
    repaired, report = fold_data_repair(net, FoldPlan(sparsity=0.5, seed=0), batches)
    recs = {r.group_id: r for r in report.groups}
    groups = discover_groups(net)
    sites = [g.probe_site for g in groups]
    _, orig = forward_trace(net, pooled, sites=sites)
    _, fixd = forward_trace(repaired, pooled, sites=sites)
    for g in groups:
        a = recs[g.group_id].assignment()
        mu_t = cluster_means(a, orig[g.probe_site].mean[:, None])[:, 0]
        sd_t = cluster_means(a, np.sqrt(orig[g.probe_site].var)[:, None])[:, 0]
        ratio = np.sqrt(fixd[g.probe_site].var) / np.maximum(sd_t, 1e-12)
        assert ratio.min() > 0.9 and ratio.max() < 1.1
        rel = np.abs(fixd[g.probe_site].mean - mu_t) / np.maximum(sd_t, 1e-12)
        assert rel.max() < 0.15


def test_data_repair_leaves_inputs_untouched(small_trained):
    net, splits, _ = small_trained
    before = [b.weight.copy() for b in net.blocks if hasattr(b, "weight")]
    fold_data_repair(net, FoldPlan(sparsity=0.5, seed=0), calib_batches(splits))
    after = [b.weight for b in net.blocks if hasattr(b, "weight")]
    for a, b in zip(before, after):
        np.testing.assert_array_equal(a, b)


# ---------------------------------------------------------------------------
# batch synthesis

def test_deep_inversion_shapes_and_targets(small_trained):
    net, _, _ = small_trained
    cfg = InversionConfig(batch_size=10, steps=5, seed=3)
    result = deep_inversion(net, cfg)
    assert result.batch.shape == (10,) + net.input_shape
    np.testing.assert_array_equal(result.targets, np.arange(10) % net.class_count)
    assert len(result.loss_trace) == 5
    assert np.isfinite(result.batch).all()


def test_deep_inversion_is_deterministic(small_trained):
    net, _, _ = small_trained
    cfg = InversionConfig(batch_size=8, steps=25, seed=7)
    a = deep_inversion(net, cfg)
    b = deep_inversion(net, cfg)
    assert np.array_equal(a.batch, b.batch)
    assert a.loss_trace == b.loss_trace
    c = deep_inversion(net, InversionConfig(batch_size=8, steps=25, seed=8))
    assert not np.array_equal(a.batch, c.batch)


def test_deep_inversion_loss_descends(small_trained):
    """At the default batch size momentum steps may overshoot locally, but
    every 10-step window must end no more than 5% above where it started."""
    net, _, _ = small_trained
    trace = deep_inversion(net, InversionConfig(batch_size=64, steps=120, seed=0)).loss_trace
    assert all(t > 0 for t in trace)
    for t in range(len(trace) - 10):
        assert trace[t + 10] <= trace[t] * 1.05
    assert trace[-1] < trace[0]


def test_fold_dir_recalibrates_on_synthetic_batch(small_trained):
    net, splits, _ = small_trained
    cfg = InversionConfig(batch_size=16, steps=40, seed=0)
    repaired, report, inversion = fold_dir(net, FoldPlan(sparsity=0.5, seed=0), cfg)
    assert report.repair == "dir"
    assert inversion.batch.shape == (16,) + net.input_shape
    folded_plain, _ = fold_naive(net, FoldPlan(sparsity=0.5, seed=0))
    # weights agree with the dir-variant fold, statistics come from the batch
    bn_path = discover_groups(repaired)[0].producers[0].bn_path
    assert not np.array_equal(get_block(repaired, bn_path).running_mean,
                              get_block(folded_plain, bn_path).running_mean)
    logits = forward(repaired, splits.test.features[:32])
    assert np.isfinite(logits).all()
