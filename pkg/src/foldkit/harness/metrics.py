"""Activation-statistics diagnostics for compressed networks."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..clustering import channel_match_correlation
from ..errors import ValidationError
from ..folding.groups import discover_groups
from ..nn.engine import forward_trace


@dataclass
class VarianceRatios:
    per_site: dict           # site -> mean of Var(compressed)/target over channels
    excluded: dict           # site -> channels skipped for zero target variance
    headline: float          # ratio at the last (deepest) probe site
    mean_abs_dev: float      # mean over sites of |1 - ratio|

    def to_json(self):
        return {"per_site": {k: float(v) for k, v in self.per_site.items()},
                "excluded": dict(self.excluded),
                "headline": float(self.headline),
                "mean_abs_dev": float(self.mean_abs_dev)}


def variance_ratio(original, compressed, batch, sites=None, channel_maps=None):
    """Compare per-channel activation variance before and after compression.

    For each probe site the target variance of compressed channel j is the
    mean variance of the original channels mapped onto it (`channel_maps`,
    site -> labels array over original channels; label -1 means the channel
    was deleted and has no counterpart). Without a map the site must keep
    its width and channels compare one to one.
    """
    if sites is None:
        sites = [g.probe_site for g in discover_groups(original)]
    if not sites:
        raise ValidationError("no probe sites to compare")
    channel_maps = channel_maps or {}
    _, orig = forward_trace(original, batch, sites=sites)
    _, comp = forward_trace(compressed, batch, sites=sites)
    per_site, excluded = {}, {}
    for site in sites:
        vo, vc = orig[site].var, comp[site].var
        labels = channel_maps.get(site)
        if labels is None:
            if vo.shape != vc.shape:
                raise ValidationError(
                    f"site {site}: widths differ ({vo.size} vs {vc.size}) "
                    "and no channel map was given")
            labels = np.arange(vo.size)
        else:
            labels = np.asarray(labels)
            if labels.size != vo.size:
                raise ValidationError(f"site {site}: channel map covers "
                                      f"{labels.size} channels, site has {vo.size}")
        target = np.zeros(vc.size)
        counts = np.zeros(vc.size)
        live = labels >= 0
        np.add.at(target, labels[live], vo[live])
        np.add.at(counts, labels[live], 1.0)
        if (counts == 0).any():
            raise ValidationError(f"site {site}: some compressed channels have "
                                  "no mapped original channel")
        target /= counts
        ok = target > 0
        excluded[site] = int((~ok).sum())
        if not ok.any():
            raise ValidationError(f"site {site}: all target variances are zero")
        per_site[site] = float(np.mean(vc[ok] / target[ok]))
    ratios = [per_site[s] for s in sites]
    return VarianceRatios(per_site=per_site, excluded=excluded,
                          headline=ratios[-1],
                          mean_abs_dev=float(np.mean([abs(1.0 - r) for r in ratios])))


@dataclass
class CorrelationRow:
    site: str
    channels: int
    mean_rho: float
    median_rho: float
    histogram: list  # bin counts over [-1, 1], sums to `channels`

    def to_json(self):
        return {"site": self.site, "channels": self.channels,
                "mean_rho": self.mean_rho, "median_rho": self.median_rho,
                "histogram": list(self.histogram)}


@dataclass
class CorrelationReport:
    bins: int
    rows: list = field(default_factory=list)

    def to_json(self):
        return {"bins": self.bins, "rows": [r.to_json() for r in self.rows]}


def layer_correlation_report(net, batch, bins=20) -> CorrelationReport:
    """For every probe site, match each channel with its most correlated
    distinct sibling and histogram the matched correlations over [-1, 1]."""
    sites = [g.probe_site for g in discover_groups(net)]
    if not sites:
        raise ValidationError("network has no probe sites")
    _, stats = forward_trace(net, batch, sites=sites, keep_raw=True)
    report = CorrelationReport(bins=bins)
    edges = np.linspace(-1.0, 1.0, bins + 1)
    for site in sites:
        raw = stats[site].raw
        _, rho = channel_match_correlation(raw, raw, exclude_self=True)
        hist, _ = np.histogram(np.clip(rho, -1.0, 1.0), bins=edges)
        report.rows.append(CorrelationRow(
            site=site, channels=rho.size, mean_rho=float(rho.mean()),
            median_rho=float(np.median(rho)), histogram=[int(h) for h in hist]))
    return report
