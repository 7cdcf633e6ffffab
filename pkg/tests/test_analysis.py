import csv

import numpy as np
import pytest

from fanet.analysis import (QUANTILES, collect_attention_stats, excitation_maps, export_excitation_maps,
                            resolve_site, write_stats_csv)
from fanet.attention import ExcitationParams
from fanet.autograd import Tensor
from fanet.data import synth_orange
from fanet.errors import ConfigError
from fanet.models import ArchitectureSpec, build


def small(variant="fanet", seed=0):
    return build(ArchitectureSpec(variant=variant, base_width=4, input_size=32), seed=seed)


def attention_weights(model):
    return [p for n, p in model.named_parameters() if n.startswith(("fiam.w", "fsam"))]


def test_zero_attention_weights_give_half():
    model = small()
    for p in attention_weights(model):
        p.data[...] = 0.0
    stats = collect_attention_stats(model, synth_orange(0, 3, 32))
    assert len(stats) == 8
    for st in stats.values():
        for which in ("s", "g"):
            for key, arr in st.summary(which).items():
                expect = 0.0 if key == "std" else 0.5
                np.testing.assert_array_equal(arr, expect)


def test_single_sample_std_zero():
    stats = collect_attention_stats(small(), synth_orange(0, 1, 32))
    for st in stats.values():
        assert st.count == 1 and np.all(st.summary("s")["std"] == 0) and np.all(st.summary("g")["std"] == 0)


def test_streaming_matches_two_pass():
    stats = collect_attention_stats(small(seed=3), synth_orange(0, 7, 32), batch_size=3)
    for st in stats.values():
        for which, vals in (("s", st.s_values), ("g", st.g_values)):
            summ = st.summary(which)
            np.testing.assert_allclose(summ["mean"], vals.mean(axis=0), atol=1e-6)
            np.testing.assert_allclose(summ["std"], vals.std(axis=0), atol=1e-6)
            np.testing.assert_allclose(summ["min"], vals.min(axis=0), atol=1e-6)
            np.testing.assert_allclose(summ["max"], vals.max(axis=0), atol=1e-6)
            assert np.all((vals > 0) & (vals < 1))
        assert st.count == 7


def test_stats_csv_round_trip(tmp_path):
    stats = collect_attention_stats(small(seed=1), synth_orange(0, 4, 32))
    site = "FSAM4_4"
    write_stats_csv(tmp_path / "s.csv", [stats[site]])
    rows = list(csv.DictReader(open(tmp_path / "s.csv")))
    assert len(rows) == 4 and rows[0]["site"] == site
    assert {f"s_q{q}" for q in QUANTILES} <= set(rows[0])
    np.testing.assert_allclose([float(r["g_mean"]) for r in rows], stats[site].g_values.mean(axis=0), atol=1e-6)


def test_no_attention_variant_gives_empty():
    assert collect_attention_stats(small("unet"), synth_orange(0, 2, 32)) == {}
    assert collect_attention_stats(small("unet-se"), synth_orange(0, 2, 32)) == {}


def test_site_aliases():
    model = small()
    assert resolve_site(model, "FSAM4") == "FSAM4_4"
    assert resolve_site(model, "FIAM4") == resolve_site(model, "Merge-Conv4") == "Merge-Conv4_4"
    with pytest.raises(ConfigError):
        resolve_site(model, "FSAM9")


@pytest.mark.parametrize("site", ["FSAM4", "FIAM4", "FSAM1", "FIAM2"])
def test_ratio_two_values_and_suppression(site):
    model = small(seed=4)
    sample = synth_orange(0, 1, 32)[0]
    maps = excitation_maps(model, sample, site, range(4))
    for m in maps.values():
        vals = m["ratio"]
        two = np.isclose(vals, 1.0, atol=1e-6) | np.isclose(vals, m["s"], atol=1e-6)
        assert two.all()
        nonneg = m["input"] >= 0
        assert np.all(m["difference"][nonneg] <= 1e-7)


def test_threshold_above_max_gives_unit_ratio():
    model = small()
    fsam = model.fsam4
    original = fsam.forward

    def high_threshold(x):
        params = original(x)
        return ExcitationParams(params.s, Tensor(np.full(params.g.shape, 1e9, dtype=params.g.dtype)))

    fsam.forward = high_threshold
    maps = excitation_maps(model, synth_orange(0, 1, 32)[0], "FSAM4", range(4))
    for m in maps.values():
        assert np.all(m["difference"] == 0) and np.all(m["ratio"] == 1)


def test_export_writes_files(tmp_path):
    model = small(seed=2)
    sample = synth_orange(0, 1, 32)[0]
    export_excitation_maps(model, sample, "FSAM4", [0, 3], tmp_path)
    names = {p.name for p in tmp_path.iterdir()}
    assert "FSAM4_4_annotations.csv" in names
    for c in (0, 3):
        for kind in ("input", "output", "difference", "ratio"):
            assert f"FSAM4_4_c{c}_{kind}.png" in names and f"FSAM4_4_c{c}_{kind}.csv" in names
    with pytest.raises(ConfigError):
        excitation_maps(model, sample, "FSAM4", [7])
