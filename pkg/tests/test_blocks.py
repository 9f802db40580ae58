import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from emnet.blocks import (Backbone, BackboneSpec, Bneck, BneckConfig, Conv2d, GamMarker, Linear, MlpSpec, SEBlock,
                          build_backbone, count_flops, count_macs, count_params, mac_table, param_table)
from emnet.errors import ConfigError
from emnet.oracles import conv2d_mac_count


def test_se_identity_gating():
    se = SEBlock(8)
    with torch.no_grad():
        se.fc2.weight.zero_()
        se.fc2.bias.fill_(10.0)  # h_sigmoid saturates at 1
    x = torch.randn(2, 8, 4, 4)
    assert torch.equal(se(x), x)


def test_se_zero_gating():
    se = SEBlock(8)
    with torch.no_grad():
        se.fc2.weight.zero_()
        se.fc2.bias.fill_(-10.0)
    assert torch.equal(se(torch.randn(2, 8, 4, 4)), torch.zeros(2, 8, 4, 4))


def test_se_channels_scaled_by_gate():
    torch.manual_seed(0)
    se = SEBlock(8)
    x = torch.rand(2, 8, 4, 4) + 0.1
    gate = se.gate(x)
    ratio = se(x) / x
    assert torch.allclose(ratio, gate[:, :, None, None].expand_as(x), atol=1e-6)
    assert (gate > 0).all() and (gate <= 1).all()


def test_se_reduction_must_divide():
    with pytest.raises(ConfigError):
        SEBlock(10, 4)


def test_first_bneck_has_no_expand_conv():
    b = Bneck(16, BneckConfig(3, 16, 16, False, "RE", 1))
    assert b.expand is None
    assert Bneck(16, BneckConfig(3, 64, 24, False, "RE", 2)).expand is not None


def test_stride2_bneck_halves_side():
    b = Bneck(24, BneckConfig(5, 72, 40, True, "RE", 2))
    assert b(torch.randn(2, 24, 56, 56)).shape == (2, 40, 28, 28)


def test_zero_branch_bneck_is_pure_residual():
    b = Bneck(24, BneckConfig(3, 72, 24, True, "HS", 1)).eval()
    with torch.no_grad():
        for name, p in b.named_parameters():
            if "conv" in name:
                p.zero_()
    x = torch.randn(2, 24, 8, 8)
    assert b.use_residual
    assert torch.equal(b(x), x)


def test_bneck_channel_mismatch():
    with pytest.raises(ConfigError, match="input channels"):
        Bneck(16, BneckConfig(3, 16, 16, False, "RE", 1))(torch.randn(2, 8, 4, 4))


@given(st.sampled_from([3, 5]), st.integers(1, 64), st.integers(1, 64), st.sampled_from([1, 2]), st.integers(1, 64))
def test_residual_rule(k, exp, out, stride, cin):
    cfg = BneckConfig(k, exp, out, False, "RE", stride)
    assert cfg.has_residual(cin) == (stride == 1 and cin == out)


@pytest.mark.parametrize("kw", [dict(kernel=7), dict(stride=3), dict(activation="GELU"), dict(exp_size=0)])
def test_bneck_config_validation(kw):
    base = dict(kernel=3, exp_size=16, out_channels=16, use_se=False, activation="RE", stride=1)
    base.update(kw)
    with pytest.raises(ConfigError):
        BneckConfig(**base)


def test_improved_spec_structure():
    imp, orig = BackboneSpec.canned("improved"), BackboneSpec.canned("original")
    assert imp.gam_positions() == [3, 6, 9]
    assert len(imp.bneck_rows()) == 13 and len(orig.bneck_rows()) == 15
    assert sum(r.exp_size == 184 for r in imp.bneck_rows()) == 1
    assert sum(r.exp_size == 184 for r in orig.bneck_rows()) == 2
    assert sum(r.exp_size == 960 for r in imp.bneck_rows()) == 1
    assert sum(r.exp_size == 960 for r in orig.bneck_rows()) == 2
    assert not any(isinstance(r, MlpSpec) for r in imp.layers)
    assert isinstance(orig.layers[-1], MlpSpec)
    assert orig.gam_positions() == []


def test_spec_dump_parse_round_trip():
    spec = BackboneSpec.canned("improved")
    again = BackboneSpec.parse(spec.dumps(), "again")
    assert again.layers == spec.layers


def test_spec_error_names_line():
    text = "conv k=3 s=2 c=16 act=HS\nbneck k=3 exp=16 c=16 se=F act=RE\n"
    with pytest.raises(ConfigError, match=r"bad:2"):
        BackboneSpec.parse(text, "bad")
    with pytest.raises(ConfigError, match=r"bad:2"):
        BackboneSpec.parse("conv k=3 s=2 c=16\nwidget a=1\n", "bad")
    with pytest.raises(ConfigError, match="stem"):
        BackboneSpec.parse("bneck k=3 exp=16 c=16 se=F act=RE s=1\n")


def test_spec_load_from_file(tmp_path):
    p = tmp_path / "tiny.txt"
    p.write_text("# comment\nconv k=3 s=2 c=8\nbneck k=3 exp=8 c=8 se=T act=RE s=1 repeat=2\ngam window=4 heads=2\n")
    spec = BackboneSpec.load(p)
    assert spec.name == "tiny" and len(spec.bneck_rows()) == 2 and spec.gam_positions() == [2]
    net = build_backbone(spec, "gam", 16)
    assert net(torch.randn(2, 3, 16, 16)).shape == (2, 8, 8, 8)


def test_improved_backbone_trace():
    net = build_backbone(BackboneSpec.canned("improved"), "gam", 224)
    assert net.shapes["bneck13"] == (160, 7, 7)
    assert [net.shapes[f"bneck{i}"][0] for i in (1, 2, 3)] == [16, 24, 24]
    assert [net.shapes[f"gam{i}"] for i in (1, 2, 3)] == [(24, 56, 56), (40, 28, 28), (80, 14, 14)]
    out = net.eval()(torch.randn(1, 3, 224, 224))
    assert out.shape == (1, 160, 7, 7)


def test_original_backbone_ends_with_tail_conv_and_mlp():
    net = build_backbone(BackboneSpec.canned("original"), "none", 224)
    names = net.stage_names()
    assert names[-2:] == ["conv2", "mlp"]
    assert net.shapes["conv2"] == (960, 7, 7)


def test_gam_window_must_divide_site():
    with pytest.raises(ConfigError, match="not divisible by GAM window"):
        Backbone(BackboneSpec.canned("improved"), "gam", 64)


def test_count_params_closed_forms():
    assert count_params(Conv2d(3, 16, 3, bias=False)) == 432
    assert count_params(Linear(960, 1280)) == 1_230_080


def test_count_params_equals_named_parameter_sum():
    net = build_backbone(BackboneSpec.canned("improved"), "gam", 224)
    assert count_params(net) == sum(p.numel() for _, p in net.named_parameters())
    assert sum(n for _, n in param_table(net)) == count_params(net)


def test_original_has_more_params_than_improved():
    imp = count_params(build_backbone(BackboneSpec.canned("improved"), "none", 224))
    orig = count_params(build_backbone(BackboneSpec.canned("original"), "none", 224))
    assert orig > imp


def test_flops_closed_form_1x1():
    conv = torch.nn.Sequential(Conv2d(16, 16, 1, bias=False))
    assert count_flops(conv, (1, 16, 112, 112)) == 6_422_528


@pytest.mark.parametrize("k,stride,groups", [(3, 2, 1), (5, 2, 4), (3, 1, 2)])
def test_mac_count_matches_instrumented_oracle(k, stride, groups):
    conv = torch.nn.Sequential(Conv2d(8, 8, k, stride, k // 2, groups=groups, bias=False))
    oracle = conv2d_mac_count((1, 8, 15, 15), (8, 8 // groups, k, k), stride, k // 2)
    assert count_macs(conv, (1, 8, 15, 15)) == oracle


def test_mac_table_counts_attention():
    net = build_backbone(BackboneSpec.canned("improved"), "gam", 224)
    rows = dict(mac_table(net))
    # projections (3C + C outputs per token) plus q k^T and attn v over 64 windows of 49 tokens
    assert rows["layers.gam1.attn"] == 64 * 49 * 24 * 96 + 2 * 64 * 49 * 49 * 24
    assert "layers.gam1.attn.qkv" not in rows


def test_gam_marker_defaults():
    assert GamMarker() == GamMarker(7, 4, 4)
