"""Statistics repair after folding.

Folding replaces correlated channels by their mean, which shrinks the
variance of downstream pre-activations. Three remedies are provided:

* analytic (`apply_fold_ar`): rescale each folded BatchNorm gamma by a
  factor computed from a data-free estimate of the within-cluster
  activation correlation,
* synthetic-data (`fold_dir`): synthesize one batch from the original
  network by gradient descent on its BatchNorm statistics, then
  recalibrate the folded network on it,
* calibration-data (`data_repair`): rescale and shift every folded channel
  so its mean/std on real calibration data match the cluster mean of the
  original channels' statistics (through BatchNorm parameters where
  present, fused into the rows otherwise).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .clustering import Assignment, cluster_means
from .errors import ValidationError
from .folding.fold import FoldPlan, FoldReport, fold_network
from .folding.groups import discover_groups
from .nn.blocks import RUNNING_VAR_FLOOR, Network, get_block, path_str
from .nn.engine import InputLossSpec, forward_trace, input_loss_and_gradient
from .nn.recalibrate import bn_recalibrate

E_CLAMP_MARGIN = 1e-3


def estimate_cluster_correlation(rows, assignment: Assignment) -> np.ndarray:
    """Data-free per-cluster correlation estimate E[c].

    Treats each normalized weight row as the loading vector of a unit-variance
    uncorrelated input, so the correlation of channels i and j is the cosine
    of their rows. E[c] averages the cosine over ordered pairs i != j within
    the cluster; singletons get 1. Zero-norm rows in multi-member clusters
    are rejected.
    """
    rows = np.asarray(rows, dtype=np.float64)
    e = np.ones(assignment.k)
    for c in range(assignment.k):
        members = np.where(assignment.labels == c)[0]
        if members.size == 1:
            continue
        sub = rows[members]
        norms = np.sqrt((sub * sub).sum(axis=1))
        if np.any(norms == 0):
            raise ValidationError(
                f"cluster {c}: zero-norm weight row, correlation undefined")
        g = (sub @ sub.T) / np.outer(norms, norms)
        m = members.size
        e[c] = (g.sum() - np.trace(g)) / (m * m - m)
    return e


def ar_scale(cluster_size: int, e_value: float) -> float:
    """Gamma factor undoing the mean-of-correlated-channels variance shrink.

    Averaging N unit-variance channels with mean pairwise correlation E gives
    variance (N + (N^2 - N) E) / N^2; the returned factor is the reciprocal
    square root of that. E is clamped to [-1/(N-1) + margin, 1] to keep the
    implied variance positive.
    """
    n = int(cluster_size)
    if n < 1:
        raise ValidationError(f"cluster size {n} < 1")
    if n == 1:
        return 1.0
    e = float(np.clip(e_value, -1.0 / (n - 1) + E_CLAMP_MARGIN, 1.0))
    return n / np.sqrt(n + (n * n - n) * e)


def _ar_gamma_scaler(net, group, assignment):
    """Per-producer (scales, e_values) for fold_network's gamma hook."""
    out = {}
    for p in group.producers:
        bn = get_block(net, p.bn_path)
        block = get_block(net, p.path)
        w = block.weight.reshape(block.weight.shape[0], -1)
        normalized = w / np.sqrt(bn.running_var + bn.epsilon)[:, None]
        e = estimate_cluster_correlation(normalized, assignment)
        sizes = assignment.counts()
        scales = np.array([ar_scale(sizes[c], e[c]) for c in range(assignment.k)])
        out[path_str(p.path)] = (scales, e)
    return out


def fold_naive(net: Network, plan: FoldPlan):
    """Fold with no statistics correction."""
    plan = FoldPlan(sparsity=plan.sparsity, per_group=plan.per_group,
                    repair="naive", seed=plan.seed)
    return fold_network(net, plan)


def apply_fold_ar(net: Network, plan: FoldPlan):
    """Fold, then analytically rescale each folded BatchNorm gamma."""
    for g in discover_groups(net):
        if not g.has_bn:
            raise ValidationError(
                f"analytic repair needs BatchNorm on every producer; group {g.group_id} has none")
    plan = FoldPlan(sparsity=plan.sparsity, per_group=plan.per_group,
                    repair="ar", seed=plan.seed)
    return fold_network(net, plan, gamma_scaler=_ar_gamma_scaler)


# ---------------------------------------------------------------------------
# calibration-data repair

def _pooled_trace(net, batches, sites, keep_raw=False):
    batch = np.concatenate([np.asarray(b, dtype=np.float64) for b in batches], axis=0)
    return forward_trace(net, batch, sites=sites, keep_raw=keep_raw)


REPAIR_PASSES = 3


def _bn_preact_repair(current, p, mu_t, sd_t, batches):
    """Match a producer's post-BN mean/std to targets (exact, linear)."""
    site = path_str(p.path)
    _, cur = _pooled_trace(current, batches, [site])
    bn = get_block(current, p.bn_path)
    bn.running_mean = cur[site].mean
    bn.running_var = np.maximum(cur[site].var, RUNNING_VAR_FLOOR)
    sign = np.where(bn.gamma < 0, -1.0, 1.0)
    # sqrt((v+eps)/v) cancels the epsilon in the normalizer so the post-BN
    # std on the calibration set equals sd_t exactly
    bn.gamma = sign * sd_t * np.sqrt((bn.running_var + bn.epsilon) / bn.running_var)
    bn.beta = mu_t.copy()


def _bn_site_repair(current, p, site, mu_t, sd_t, batches):
    """Match a producer's mean/std at its observation site (usually the
    post-activation output) by fixed-point updates of its BatchNorm affine.

    Scaling gamma and beta together scales a ReLU output exactly, so the
    std is hit in one step; the mean shift interacts with the kink and
    converges over the remaining passes. The folded running statistics are
    left in place: they only reparameterize the affine, and keeping them
    makes the repair an exact no-op when the folded channels already match
    their targets.
    """
    bn = get_block(current, p.bn_path)
    for _ in range(REPAIR_PASSES):
        _, out = _pooled_trace(current, batches, [site])
        sd_m = np.sqrt(out[site].var)
        live = sd_m > 1e-8
        s = np.where(live, sd_t / np.maximum(sd_m, 1e-8), 1.0)
        bn.gamma = bn.gamma * s
        bn.beta = bn.beta * s + (mu_t - s * out[site].mean)
    return bn


def data_repair(original: Network, folded: Network, batches, report: FoldReport) -> Network:
    """Restore per-channel activation statistics of a folded network on
    calibration data.

    Each folded producer channel is rescaled and shifted so its observed
    mean/std match the cluster mean of the original channels' mean/std at
    the channel's observation site. Single-producer groups with BatchNorm
    are corrected at the group probe site (post-activation); producers
    coupled through a residual block are corrected at their post-BN output
    instead, where the per-producer affine acts linearly. BN-free producers
    get the affine fused into their rows (pre-activation). Producers are
    corrected front to back so each measurement sees the corrections
    upstream of it.
    """
    batches = list(batches)
    if not batches:
        raise ValidationError("data_repair needs at least one calibration batch")
    groups_orig = {g.group_id: g for g in discover_groups(original)}

    # (producer, assignment, observation site)
    todo = []
    for rec in report.groups:
        group = groups_orig[rec.group_id]
        coupled = len(group.producers) > 1
        for p in group.producers:
            if p.bn_path is None:
                site = path_str(p.path)
            elif coupled:
                site = path_str(p.bn_path)
            else:
                site = group.probe_site
            todo.append((p, rec.assignment(), site))
    # group discovery lists a residual group before the chain nested in its
    # main branch; repair must instead follow forward evaluation order so
    # each measurement sees every correction upstream of it
    todo.sort(key=lambda item: tuple(str(e).zfill(8) for e in item[0].path))
    _, orig_stats = _pooled_trace(original, batches,
                                  sorted({site for _, _, site in todo}))

    current = folded.copy()
    for p, assignment, site in todo:
        mu_t = cluster_means(assignment, orig_stats[site].mean[:, None])[:, 0]
        sd_t = cluster_means(assignment, np.sqrt(orig_stats[site].var)[:, None])[:, 0]
        if p.bn_path is None:
            _, cur = _pooled_trace(current, batches, [site])
            z_mean, z_var = cur[site].mean, cur[site].var
            block = get_block(current, p.path)
            scale = sd_t / np.maximum(np.sqrt(z_var), 1e-8)
            w = block.weight.reshape(block.weight.shape[0], -1)
            block.weight = (w * scale[:, None]).reshape(block.weight.shape)
            block.bias = scale * (block.bias - z_mean) + mu_t
        elif site == path_str(p.bn_path):
            _bn_preact_repair(current, p, mu_t, sd_t, batches)
        else:
            _bn_site_repair(current, p, site, mu_t, sd_t, batches)
    return Network(blocks=current.blocks, input_shape=current.input_shape,
                   class_count=current.class_count)


def fold_data_repair(net: Network, plan: FoldPlan, batches):
    """Fold, then repair statistics against calibration data."""
    plan = FoldPlan(sparsity=plan.sparsity, per_group=plan.per_group,
                    repair="data", seed=plan.seed)
    folded, report = fold_network(net, plan)
    return data_repair(net, folded, batches, report), report


# ---------------------------------------------------------------------------
# synthetic-data repair

@dataclass
class InversionConfig:
    batch_size: int = 64
    steps: int = 500
    lr: float = 0.05
    momentum: float = 0.9
    bn_weight: float = 1.0
    l2_weight: float = 1e-4
    tv_weight: float = 1e-4
    seed: int = 0


@dataclass
class InversionResult:
    batch: np.ndarray
    targets: np.ndarray
    loss_trace: list = field(default_factory=list)


def deep_inversion(net: Network, config: InversionConfig = None) -> InversionResult:
    """Synthesize one batch from the network alone.

    Starts from seeded standard-normal noise and descends (with momentum) a
    loss combining class confidence on round-robin targets, BatchNorm
    statistics matching at every BN input, and L2/total-variation priors.
    """
    config = config or InversionConfig()
    rng = np.random.default_rng(int(config.seed))
    x = rng.standard_normal((config.batch_size,) + net.input_shape)
    targets = np.arange(config.batch_size) % net.class_count
    spec = InputLossSpec(targets=targets, ce_weight=1.0, bn_weight=config.bn_weight,
                         l2_weight=config.l2_weight, tv_weight=config.tv_weight)
    velocity = np.zeros_like(x)
    trace = []
    lr = config.lr
    for _ in range(config.steps):
        with np.errstate(over="ignore", invalid="ignore"):
            loss, _, grad = input_loss_and_gradient(net, x, spec)
        if not np.isfinite(loss) or not np.isfinite(grad).all():
            break
        # small batches can set off runaway feedback between the iterate
        # scale and the statistics mismatch; a 4x single-step jump never
        # happens in a healthy run, so damp instead of overflowing
        if trace and loss > 4.0 * trace[-1]:
            velocity = np.zeros_like(x)
            lr *= 0.5
        trace.append(float(loss))
        velocity = config.momentum * velocity - lr * grad
        x = x + velocity
    return InversionResult(batch=x, targets=targets, loss_trace=trace)


def fold_dir(net: Network, plan: FoldPlan, config: InversionConfig = None):
    """Fold with the synthetic-data variant: cluster on the DIR fold matrix,
    synthesize one batch from the original network, and recalibrate the
    folded network's BatchNorm statistics on it.

    Returns (repaired network, report, inversion result).
    """
    inversion = deep_inversion(net, config)
    plan = FoldPlan(sparsity=plan.sparsity, per_group=plan.per_group,
                    repair="dir", seed=plan.seed)
    folded, report = fold_network(net, plan)
    repaired = bn_recalibrate(folded, [inversion.batch])
    return repaired, report, inversion
