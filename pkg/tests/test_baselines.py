"""Baseline compression paths: structured magnitude pruning and two-network
merging (including the doubled-network construction they share)."""

import numpy as np
import pytest

from foldkit.errors import ValidationError
from foldkit.folding import discover_groups, permute_group_channels
from foldkit.folding.groups import consumer_cols, producer_rows
from foldkit.folding.merge import (MERGE_MODES, doubled_network,
                                   merge_networks, merge_rows,
                                   weight_matching)
from foldkit.nn import Network, forward
from foldkit.nn.blocks import BatchNorm, Dense, ReLU
from foldkit.pruning import NORM_KINDS, magnitude_prune

from oracles import random_network


def tiny_net(weight):
    weight = np.asarray(weight, dtype=np.float64)
    n = weight.shape[0]
    return Network(blocks=[Dense(weight=weight, bias=np.zeros(n)), ReLU(),
                           Dense(weight=np.ones((2, n)), bias=np.zeros(2))],
                   input_shape=(weight.shape[1],), class_count=2)


# ---------------------------------------------------------------------------
# pruning

def test_prune_scores_match_row_norms(rng):
    net = random_network("mlp_bn", rng, width=9)
    groups = discover_groups(net)
    for norm, reducer in [("l1", lambda r: np.abs(r).sum(axis=1)),
                          ("l2", lambda r: np.sqrt((r * r).sum(axis=1)))]:
        _, report = magnitude_prune(net, sparsity=0.5, norm=norm)
        first = report.groups[0]
        rows = producer_rows(net, groups[0].producers[0])
        np.testing.assert_allclose(first.scores, reducer(rows), atol=1e-12)
        np.testing.assert_array_equal(
            first.kept, np.sort(np.argsort(-first.scores, kind="stable")[:first.k]))


def test_prune_norms_rank_differently():
    # row 0 wins under l2 (one big weight), row 1 wins under l1 (spread mass)
    net = tiny_net([[3.0, 0.0, 0.0], [1.2, 1.2, 1.2]])
    _, rep_l2 = magnitude_prune(net, sparsity=0.5, norm="l2")
    _, rep_l1 = magnitude_prune(net, sparsity=0.5, norm="l1")
    assert rep_l2.groups[0].kept.tolist() == [0]
    assert rep_l1.groups[0].kept.tolist() == [1]


def test_prune_breaks_ties_toward_low_index():
    net = tiny_net(np.eye(4))
    _, report = magnitude_prune(net, sparsity=0.5, norm="l2")
    assert report.groups[0].kept.tolist() == [0, 1]


def test_prune_shrinks_widths_and_keeps_function_shape(small_trained):
    net, splits, _ = small_trained
    pruned, report = magnitude_prune(net, sparsity=0.5, norm="l2")
    assert [g.n for g in discover_groups(pruned)] == [12, 12, 12]
    logits = forward(pruned, splits.test.features[:16])
    assert logits.shape == (16, net.class_count)
    assert np.isfinite(logits).all()
    # original untouched
    assert discover_groups(net)[0].n == 24


def test_prune_sparsity_zero_is_identity(small_trained):
    net, splits, _ = small_trained
    pruned, report = magnitude_prune(net, sparsity=0.0, norm="l2")
    assert report.total_dropped_mass == 0.0
    x = splits.test.features[:32]
    assert np.array_equal(forward(pruned, x), forward(net, x))


def test_prune_labels_and_probe_assignments(rng):
    net = random_network("mlp_bn", rng, width=6)
    _, report = magnitude_prune(net, sparsity=0.5, norm="l2")
    rec = report.groups[0]
    labels = rec.labels()
    assert np.all(labels[rec.kept] == np.arange(rec.k))
    dropped = np.setdiff1d(np.arange(rec.n), rec.kept)
    assert np.all(labels[dropped] == -1)
    maps = report.probe_assignments()
    assert set(maps) == {g.probe_site for g in discover_groups(net)}


def test_prune_dropped_mass_accounting(rng):
    net = random_network("mlp_bn", rng, width=8)
    _, report = magnitude_prune(net, sparsity=0.5, norm="l2")
    assert abs(report.total_dropped_mass
               - sum(g.dropped_mass for g in report.groups)) < 1e-12
    first = report.groups[0]
    rows = producer_rows(net, discover_groups(net)[0].producers[0])
    dropped = np.setdiff1d(np.arange(first.n), first.kept)
    assert abs(first.dropped_mass - (rows[dropped] ** 2).sum()) < 1e-10


def test_prune_conv_and_residual(rng):
    for arch in ("conv_bn", "residual"):
        net = random_network(arch, rng, width=8)
        pruned, _ = magnitude_prune(net, sparsity=0.5, norm="l1")
        x = rng.normal(size=(4,) + net.input_shape)
        assert np.isfinite(forward(pruned, x)).all()
        assert all(g.n < 9 for g in discover_groups(pruned))


def test_prune_per_group_and_validation(rng):
    net = random_network("mlp_bn", rng, width=8)
    gids = [g.group_id for g in discover_groups(net)]
    pruned, _ = magnitude_prune(net, per_group={gids[0]: 2, gids[1]: 8, gids[2]: 5})
    assert [g.n for g in discover_groups(pruned)] == [2, 8, 5]
    with pytest.raises(ValidationError):
        magnitude_prune(net, per_group={gids[0]: 9})
    with pytest.raises(ValidationError):
        magnitude_prune(net, per_group={gids[0]: 2})  # other groups uncovered
    with pytest.raises(ValidationError):
        magnitude_prune(net, sparsity=0.5, norm="l3")
    with pytest.raises(ValidationError):
        magnitude_prune(net)
    assert NORM_KINDS == ("l1", "l2")


# ---------------------------------------------------------------------------
# doubled network

@pytest.mark.parametrize("arch", ("mlp_bn", "mlp", "conv_bn", "residual"))
def test_doubled_network_averages_logits(arch, rng):
    a = random_network(arch, rng, width=6)
    b = random_network(arch, rng, width=6)
    x = rng.normal(size=(10,) + a.input_shape)
    both = doubled_network(a, b)
    np.testing.assert_allclose(forward(both, x),
                               (forward(a, x) + forward(b, x)) / 2.0, atol=1e-10)


def test_doubled_network_rejects_mismatch(rng):
    a = random_network("mlp_bn", rng, width=6)
    with pytest.raises(ValidationError):
        doubled_network(a, random_network("mlp_bn", rng, width=7))
    with pytest.raises(ValidationError):
        doubled_network(a, random_network("mlp", rng, width=6))
    b = a.copy()
    bn = next(blk for blk in b.blocks if isinstance(blk, BatchNorm))
    bn.epsilon = 1e-3
    with pytest.raises(ValidationError):
        doubled_network(a, b)


def test_merge_rejects_degenerate_networks():
    lone = Network(blocks=[Dense(weight=np.ones((2, 3)), bias=np.zeros(2))],
                   input_shape=(3,), class_count=2)
    with pytest.raises(ValidationError):
        merge_networks(lone, lone.copy())


# ---------------------------------------------------------------------------
# merging

def test_paired_self_merge_recovers_network(rng):
    net = random_network("mlp_bn", rng, width=6)
    merged, report = merge_networks(net, net.copy(), mode="paired")
    x = rng.normal(size=(12,) + net.input_shape)
    np.testing.assert_allclose(forward(merged, x), forward(net, x), atol=1e-8)
    for rec in report.groups:
        assert rec.pairing is not None
        np.testing.assert_array_equal(rec.pairing, np.arange(rec.n))


def test_paired_merge_recovers_permuted_copy(rng):
    net = random_network("mlp_bn", rng, width=7)
    groups = discover_groups(net)
    permuted = net
    applied = {}
    for g in groups:
        perm = rng.permutation(g.n)
        permuted = permute_group_channels(permuted, g, perm)
        applied[g.group_id] = perm
    merged, _ = merge_networks(net, permuted, mode="paired")
    x = rng.normal(size=(12,) + net.input_shape)
    np.testing.assert_allclose(forward(merged, x), forward(net, x), atol=1e-8)


def test_weight_matching_inverts_known_permutation(rng):
    net = random_network("mlp_bn", rng, width=7)
    g0 = discover_groups(net)[0]
    perm = rng.permutation(g0.n)
    permuted = permute_group_channels(net, g0, perm)
    match = weight_matching(net, permuted)
    rows_a = producer_rows(net, g0.producers[0])
    rows_b = producer_rows(permuted, g0.producers[0])
    np.testing.assert_allclose(rows_b[match[g0.group_id]], rows_a, atol=1e-12)


def test_weight_matching_identity_on_identical_networks(rng):
    net = random_network("conv_bn", rng, width=5)
    match = weight_matching(net, net.copy())
    for gid, perm in match.items():
        np.testing.assert_array_equal(perm, np.arange(perm.size))


def test_free_merge_is_deterministic(rng):
    a = random_network("mlp_bn", rng, width=6)
    b = random_network("mlp_bn", rng, width=6)
    m1, r1 = merge_networks(a, b, mode="free", seed=5)
    m2, r2 = merge_networks(a, b, mode="free", seed=5)
    assert r1.total_cost == r2.total_cost
    x = np.linspace(-1, 1, 4 * a.input_shape[0]).reshape((4,) + a.input_shape)
    assert np.array_equal(forward(m1, x), forward(m2, x))
    for g1, g2 in zip(r1.groups, r2.groups):
        np.testing.assert_array_equal(g1.labels, g2.labels)
        assert g1.pairing is None


def test_merge_mode_validation(rng):
    a = random_network("mlp_bn", rng, width=4)
    with pytest.raises(ValidationError):
        merge_networks(a, a.copy(), mode="avg")
    assert MERGE_MODES == ("paired", "free")


def test_merge_rows_concatenate_all_segments(rng):
    net = random_network("mlp_bn", rng, width=5)
    g = discover_groups(net)[0]
    rows = merge_rows(net, g)
    p = g.producers[0]
    prod = producer_rows(net, p)
    cols = consumer_cols(net, g.consumers[0], g.n)
    assert rows.shape == (5, prod.shape[1] + 4 + cols.shape[1])
    np.testing.assert_allclose(rows[:, :prod.shape[1]], prod, atol=1e-12)
    np.testing.assert_allclose(rows[:, -cols.shape[1]:], cols, atol=1e-12)
