import numpy as np
import pytest

from fanet import functional as F
from fanet.autograd import Tensor, backward, precision
from fanet.errors import ConfigError, ShapeError
from fanet.gradcheck import finite_diff_check
from fanet.models import ATTENTION_FLAGS, VARIANTS, ArchitectureSpec, build


def tiny(variant="fanet", **kw):
    return ArchitectureSpec(variant=variant, base_width=2, input_size=16, **kw)


def batch(spec, n=2, seed=0, dtype=np.float32):
    rng = np.random.default_rng(seed)
    return (rng.uniform(0, 1, (n, 3, spec.input_size, spec.input_size)).astype(dtype),
            rng.integers(0, spec.num_classes, (n, spec.input_size, spec.input_size)))


def test_spec_validation():
    with pytest.raises(ConfigError):
        ArchitectureSpec(variant="fanet-x").validate()
    with pytest.raises(ConfigError):
        ArchitectureSpec(input_size=100).validate()
    with pytest.raises(ConfigError):
        ArchitectureSpec(depth=3).validate()
    spec = ArchitectureSpec.desk("unet-se")
    assert ArchitectureSpec.from_dict(spec.to_dict()) == spec


def test_defaults():
    spec = ArchitectureSpec()
    assert (spec.base_width, spec.input_size, spec.fsam_r, spec.fiam_factor, spec.num_classes) == (64, 288, 3, 1.2, 5)
    assert spec.grad_mode == "surrogate" and spec.tau == 0.1


def test_base64_structure():
    spec = ArchitectureSpec()
    assert spec.decoder_widths == [512, 256, 128, 64]
    assert spec.encoder_widths[-1] == 1024
    model = build(spec)
    assert model.fiam.d0 == 1228
    assert model.fiam.conv.weight.shape == (1228, 1024, 3, 3)
    assert [getattr(model, f"fsam{n}").hidden for n in range(1, 5)] == [170, 85, 42, 21]
    assert list(model.attention_modules()) == ["FIAM", "FSAM1_512", "FSAM2_256", "FSAM3_128", "FSAM4_64"]
    assert model.attention_modules()["FIAM"] == ["Merge-Conv1_512", "Merge-Conv2_256", "Merge-Conv3_128",
                                                 "Merge-Conv4_64"]


def test_fiam_levels_match_merge_intermediate_widths():
    model = build(ArchitectureSpec.desk())
    model.recorder = {}
    model.predict(batch(model.spec, n=1)[0])
    for site, rec in model.recorder.items():
        assert rec["s"].shape[1] == rec["input"].shape[1], site


def test_desk_shape():
    spec = ArchitectureSpec.desk()
    model = build(spec)
    assert model(batch(spec)[0]).shape == (2, 5, 96, 96)


def test_wrong_input_size():
    model = build(tiny())
    with pytest.raises(ShapeError):
        model(np.zeros((1, 3, 32, 32), np.float32))


def test_parameter_names_unique_and_ordered():
    names = [n for n, _ in build(ArchitectureSpec.desk()).named_parameters()]
    assert len(names) == len(set(names))
    assert names[0].startswith("inc.") and names.index("outc.conv.weight") < names.index("fiam.conv.weight")


def test_param_count_order():
    counts = {v: build(ArchitectureSpec.desk(v)).param_count() for v in VARIANTS}
    assert counts["fanet"] > counts["fanet-s"] > counts["unet"]
    assert counts["fanet"] > counts["fanet-i"] > counts["unet"]
    assert counts["unet-se"] > counts["unet"]


def test_attention_flags():
    assert ATTENTION_FLAGS["fanet-i"] == (True, False)
    assert ATTENTION_FLAGS["fanet-s"] == (False, True)
    for v in VARIANTS:
        model = build(ArchitectureSpec.desk(v))
        fiam, fsam = ATTENTION_FLAGS[v]
        assert hasattr(model, "fiam") == fiam
        assert hasattr(model, "fsam1") == fsam
        assert hasattr(model, "se1") == (v == "unet-se")


def test_backbone_shared_across_variants():
    ref = dict(build(ArchitectureSpec.desk("unet"), seed=5).named_parameters())
    for v in VARIANTS:
        for name, p in build(ArchitectureSpec.desk(v), seed=5).named_parameters():
            if name in ref:
                np.testing.assert_array_equal(p.data, ref[name].data)


def test_disabled_excitation_equals_unet():
    x, _ = batch(ArchitectureSpec.desk(), n=2)
    unet = build(ArchitectureSpec.desk("unet"), seed=3)
    unet.eval()
    for v in ("fanet", "fanet-i", "fanet-s", "unet-se"):
        model = build(ArchitectureSpec.desk(v), seed=3)
        model.eval()
        model.excitation_enabled = False
        np.testing.assert_array_equal(model(x).data, unet(x).data)


def test_forward_deterministic():
    spec = ArchitectureSpec.desk()
    x, _ = batch(spec)
    a = build(spec, seed=1)(x).data
    b = build(spec, seed=1)(x).data
    assert a.tobytes() == b.tobytes()


def _grads(spec, seed=0):
    model = build(spec, seed=seed)
    x, y = batch(spec, seed=seed)
    backward(F.softmax_cross_entropy(model(x), y))
    return model


def test_hard_mode_thresholds_get_zero_gradient():
    model = _grads(ArchitectureSpec.desk(grad_mode="hard"))
    params = dict(model.named_parameters())
    names = model.threshold_parameters()
    assert len(names) == 4 * 2 + 4
    for name in names:
        assert params[name].grad is None or np.all(params[name].grad == 0), name


def test_surrogate_mode_thresholds_get_gradient():
    model = _grads(ArchitectureSpec.desk())
    params = dict(model.named_parameters())
    for name in model.threshold_parameters():
        assert params[name].grad is not None and np.any(params[name].grad != 0), name


def test_one_step_moves_every_unet_parameter():
    from fanet.train import SGD
    model = _grads(ArchitectureSpec.desk("unet"))
    before = [p.data.copy() for p in model.parameters()]
    SGD(model, momentum=0.9, weight_decay=0.0).step(0.1)
    for (name, p), b in zip(model.named_parameters(), before):
        assert np.any(p.data != b), name


def _threshold_margin(model, x):
    model.recorder = {}
    model(x)
    margin = min(np.min(np.abs(r["input"] - r["g"][:, :, None, None])) for r in model.recorder.values())
    model.recorder = None
    return margin


def test_end_to_end_gradcheck_tiny_fanet():
    # hard mode is the literal derivative of the forward map; train-mode batch
    # norm avoids the exact-zero ReLU inputs that fresh eval statistics produce
    with precision("double"):
        spec = tiny(grad_mode="hard")
        model = build(spec, seed=0, dtype="double")
        x, y = batch(spec, n=2, dtype=np.float64)
        # a 1e-7 step moves features by far less than the closest threshold gap
        assert _threshold_margin(model, Tensor(x)) > 1e-5
        err = finite_diff_check(lambda: F.softmax_cross_entropy(model(Tensor(x)), y), model.parameters(),
                                eps=1e-7, max_entries=3, seed=0)
    assert err < 1e-3
