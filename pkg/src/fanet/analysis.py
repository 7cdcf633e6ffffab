"""Attention-parameter statistics and excitation-map export."""

from __future__ import annotations

import csv
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image

from .data import SegmentationSample, to_batch
from .errors import ConfigError
from .models import SegmentationNet

QUANTILES = (5, 25, 50, 75, 95)
RATIO_EPS = 1e-12


class _StreamingMoments:
    """Welford accumulator for per-channel mean/variance/min/max."""

    def __init__(self, channels: int):
        self.n = 0
        self.mean = np.zeros(channels)
        self.m2 = np.zeros(channels)
        self.min = np.full(channels, np.inf)
        self.max = np.full(channels, -np.inf)

    def update(self, rows: np.ndarray) -> None:
        for row in np.asarray(rows, dtype=np.float64):
            self.n += 1
            delta = row - self.mean
            self.mean += delta / self.n
            self.m2 += delta * (row - self.mean)
            np.minimum(self.min, row, out=self.min)
            np.maximum(self.max, row, out=self.max)

    @property
    def std(self) -> np.ndarray:
        return np.sqrt(self.m2 / max(self.n, 1))


@dataclass
class AttentionStats:
    """Per-channel summary of s and g over a dataset for one excitation site.

    Mean, std, min and max come from single-pass accumulators; quantiles
    from the raw per-sample values, which are kept for export.
    """

    site: str
    count: int
    s_values: np.ndarray  # [count, C]
    g_values: np.ndarray  # [count, C]
    s_moments: _StreamingMoments
    g_moments: _StreamingMoments

    @property
    def channels(self) -> int:
        return self.s_values.shape[1]

    def summary(self, which: str) -> dict[str, np.ndarray]:
        vals, mom = (self.s_values, self.s_moments) if which == "s" else (self.g_values, self.g_moments)
        out = {"mean": mom.mean, "std": mom.std, "min": mom.min, "max": mom.max}
        for q, row in zip(QUANTILES, np.percentile(vals, QUANTILES, axis=0)):
            out[f"q{q}"] = row
        return out

    def rows(self) -> list[dict]:
        s, g = self.summary("s"), self.summary("g")
        rows = []
        for c in range(self.channels):
            row = {"site": self.site, "channel": c, "count": self.count}
            for prefix, summ in (("s", s), ("g", g)):
                for key, arr in summ.items():
                    row[f"{prefix}_{key}"] = float(arr[c])
            rows.append(row)
        return rows


def collect_attention_stats(model: SegmentationNet, dataset: Sequence[SegmentationSample],
                            batch_size: int = 8) -> dict[str, AttentionStats]:
    """Run the model (eval mode) over ``dataset`` and gather every per-sample s and g.

    Keys are site names such as ``Merge-Conv1_512`` (FIAM levels) and
    ``FSAM4_64``.  Models without fastidious attention give an empty dict.
    """
    sites = model.attention_sites()
    if not sites or not dataset:
        return {}
    s_vals: dict[str, list] = {k: [] for k in sites}
    g_vals: dict[str, list] = {k: [] for k in sites}
    moments: dict[str, tuple[_StreamingMoments, _StreamingMoments]] = {}
    dtype = model.parameters()[0].dtype
    previous = model.recorder
    try:
        for i in range(0, len(dataset), batch_size):
            images, _ = to_batch(dataset[i:i + batch_size], dtype=dtype)
            model.recorder = {}
            model.predict(images)
            for site in sites:
                rec = model.recorder[site]
                s_vals[site].append(rec["s"].astype(np.float64))
                g_vals[site].append(rec["g"].astype(np.float64))
                if site not in moments:
                    c = rec["s"].shape[1]
                    moments[site] = (_StreamingMoments(c), _StreamingMoments(c))
                moments[site][0].update(rec["s"])
                moments[site][1].update(rec["g"])
    finally:
        model.recorder = previous
    return {
        site: AttentionStats(site, len(dataset), np.concatenate(s_vals[site]), np.concatenate(g_vals[site]),
                             *moments[site])
        for site in sites
    }


def write_stats_csv(path, stats_list: Sequence[AttentionStats]) -> None:
    rows = [r for st in stats_list for r in st.rows()]
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]))
        writer.writeheader()
        for r in rows:
            writer.writerow({k: (f"{v:.6f}" if isinstance(v, float) else v) for k, v in r.items()})


_SITE_ALIASES = [
    (re.compile(r"^FIAM(\d)$", re.I), "Merge-Conv{}_"),
    (re.compile(r"^Merge-Conv(\d)$", re.I), "Merge-Conv{}_"),
    (re.compile(r"^FSAM(\d)$", re.I), "FSAM{}_"),
]


def resolve_site(model: SegmentationNet, module_id: str) -> str:
    """Accept full site names (``FSAM4_64``) or short forms (``FSAM4``, ``FIAM4``)."""
    sites = model.attention_sites()
    if module_id in sites:
        return module_id
    for pattern, prefix in _SITE_ALIASES:
        m = pattern.match(module_id)
        if m:
            hits = [s for s in sites if s.startswith(prefix.format(m.group(1)))]
            if hits:
                return hits[0]
    raise ConfigError(f"unknown excitation site {module_id!r}; available: {', '.join(sites) or 'none'}")


def excitation_maps(model: SegmentationNet, sample: SegmentationSample, module_id: str,
                    channels: Sequence[int]) -> dict[int, dict]:
    """Input, output, difference and ratio maps for selected channels of one site.

    ``ratio`` is output/input where |input| > 1e-12 and 1 elsewhere.
    """
    site = resolve_site(model, module_id)
    dtype = model.parameters()[0].dtype
    images, _ = to_batch([sample], dtype=dtype)
    previous = model.recorder
    try:
        model.recorder = {}
        model.predict(images)
        rec = model.recorder[site]
    finally:
        model.recorder = previous
    n_ch = rec["input"].shape[1]
    out = {}
    for c in channels:
        if not 0 <= c < n_ch:
            raise ConfigError(f"channel {c} out of range for {site} ({n_ch} channels)")
        x = rec["input"][0, c].astype(np.float64)
        y = rec["output"][0, c].astype(np.float64)
        safe = np.abs(x) > RATIO_EPS
        ratio = np.ones_like(x)
        ratio[safe] = y[safe] / x[safe]
        out[c] = {
            "input": x, "output": y, "difference": y - x, "ratio": ratio,
            "g": float(rec["g"][0, c]), "s": float(rec["s"][0, c]), "site": site,
        }
    return out


def _to_png(arr: np.ndarray, path: Path) -> None:
    lo, hi = float(arr.min()), float(arr.max())
    scaled = np.zeros_like(arr) if hi <= lo else (arr - lo) / (hi - lo)
    Image.fromarray(np.rint(scaled * 255).astype(np.uint8), mode="L").save(path)


def export_excitation_maps(model: SegmentationNet, sample: SegmentationSample, module_id: str,
                           channels: Sequence[int], out_dir) -> dict[int, dict]:
    """Write normalised grayscale PNGs plus raw CSV dumps and an (g, s) annotation table."""
    maps = excitation_maps(model, sample, module_id, channels)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    site = next(iter(maps.values()))["site"] if maps else resolve_site(model, module_id)
    with open(out_dir / f"{site}_annotations.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["site", "sample", "channel", "threshold_g", "activation_s"])
        for c, m in maps.items():
            writer.writerow([site, sample.id, c, f"{m['g']:.9g}", f"{m['s']:.9g}"])
    for c, m in maps.items():
        for kind in ("input", "output", "difference", "ratio"):
            stem = out_dir / f"{site}_c{c}_{kind}"
            _to_png(m[kind], stem.with_suffix(".png"))
            np.savetxt(stem.with_suffix(".csv"), m[kind], delimiter=",", fmt="%.9g")
    return maps
