import pytest
import torch

from irispad.backbone import Backbone, BackboneConfig, build_backbone, extract_multilevel
from irispad.errors import ConfigError, InitializationError, ShapeError


def stride_oracle(r):
    # stem conv /2, max-pool /2, each transition avg-pool /2
    low = r // 2 // 2
    return low, low // 2, low // 4


@pytest.mark.parametrize("r", [224, 160])
def test_tap_sizes_follow_stride_arithmetic(r):
    torch.manual_seed(0)
    bb = build_backbone(BackboneConfig(input_resolution=r)).eval()
    with torch.no_grad():
        taps = extract_multilevel(bb, torch.randn(1, 3, r, r))
    assert tuple(t.shape[-1] for t in taps) == stride_oracle(r)
    assert tuple(t.shape[-2] for t in taps) == stride_oracle(r)
    assert bb.config.tap_sizes() == stride_oracle(r)


def test_default_224_has_14x14_high_tap():
    assert stride_oracle(224) == (56, 28, 14)
    assert BackboneConfig().tap_sizes()[2] == 14


def test_tap_channels_are_read_from_the_network():
    bb = build_backbone(BackboneConfig(input_resolution=32))
    low, mid, high = bb(torch.randn(2, 3, 32, 32))
    assert bb.tap_channels == (low.shape[1], mid.shape[1], high.shape[1]) == (64, 128, 256)
    assert bb.config.tap_channels == bb.tap_channels


def test_densenet161_layout_gives_384_high_channels():
    bb = build_backbone(BackboneConfig(input_resolution=32, arch="densenet161"))
    assert bb.tap_channels == (96, 192, 384)


def test_random_init_differs_across_seeds():
    torch.manual_seed(1)
    a = build_backbone(BackboneConfig(input_resolution=32))
    torch.manual_seed(2)
    b = build_backbone(BackboneConfig(input_resolution=32))
    wa, wb = a.stem.conv0.weight, b.stem.conv0.weight
    assert wa.shape == wb.shape
    assert not torch.equal(wa, wb)


def test_batch_extent_preserved():
    bb = build_backbone(BackboneConfig(input_resolution=32)).eval()
    taps = bb(torch.randn(5, 3, 32, 32))
    assert all(t.shape[0] == 5 for t in taps)


def test_zero_input_zero_bias_gives_zero_taps():
    bb = build_backbone(BackboneConfig(input_resolution=32)).eval()
    with torch.no_grad():
        for m in bb.modules():
            if isinstance(m, torch.nn.BatchNorm2d):
                m.bias.zero_()
                m.running_mean.zero_()
    taps = bb(torch.zeros(1, 3, 32, 32))
    assert all(torch.count_nonzero(t) == 0 for t in taps)


def test_inference_is_bit_identical():
    bb = build_backbone(BackboneConfig(input_resolution=32)).eval()
    x = torch.randn(2, 3, 32, 32)
    with torch.no_grad():
        a, b = bb(x), bb(x)
    assert all(torch.equal(u, v) for u, v in zip(a, b))


def test_every_parameter_gets_gradient():
    torch.manual_seed(0)
    bb = build_backbone(BackboneConfig(input_resolution=32)).train()
    taps = bb(torch.randn(4, 3, 32, 32))
    loss = sum((t**2).mean() for t in taps)
    loss.backward()
    for name, p in bb.named_parameters():
        assert p.grad is not None and p.grad.norm() > 0, name


def test_wrong_input_size_names_expected_resolution():
    bb = build_backbone(BackboneConfig(input_resolution=32))
    with pytest.raises(ShapeError, match="32, 32"):
        bb(torch.randn(1, 3, 48, 48))


@pytest.mark.parametrize(
    "kwargs",
    [dict(input_resolution=100), dict(block_layout=(6, 12, 24)), dict(arch="resnet50"), dict(input_resolution=0)],
)
def test_invalid_config(kwargs):
    with pytest.raises(ConfigError):
        BackboneConfig(**kwargs)


def test_missing_weight_file(tmp_path):
    with pytest.raises(InitializationError, match="not found"):
        build_backbone(BackboneConfig(input_resolution=32, pretrained_source=str(tmp_path / "nope.pth")))


def test_corrupt_weight_file(tmp_path):
    p = tmp_path / "bad.pth"
    p.write_bytes(b"not a torch file")
    with pytest.raises(InitializationError, match="bad.pth"):
        build_backbone(BackboneConfig(input_resolution=32, pretrained_source=str(p)))


def test_load_full_densenet_state_dict(tmp_path):
    from torchvision.models import densenet121

    torch.manual_seed(5)
    full = densenet121(weights=None)
    p = tmp_path / "dn121.pth"
    torch.save(full.state_dict(), p)
    bb = build_backbone(BackboneConfig(input_resolution=32, pretrained_source=str(p)))
    assert torch.equal(bb.stem.conv0.weight, full.features.conv0.weight)
    assert torch.equal(
        bb.block2.transition2.conv.weight, full.features.transition2.conv.weight
    )


def test_legacy_key_names_are_accepted(tmp_path):
    from torchvision.models import densenet121

    full = densenet121(weights=None)
    state = {}
    for k, v in full.state_dict().items():
        if k.endswith("num_batches_tracked"):
            continue
        # old checkpoints spell denselayer sub-modules as norm.1, conv.2, ...
        for sub in ("norm", "relu", "conv"):
            for i in ("1", "2"):
                k = k.replace(f".{sub}{i}.", f".{sub}.{i}.")
        state[k] = v
    p = tmp_path / "legacy.pth"
    torch.save(state, p)
    bb = build_backbone(BackboneConfig(input_resolution=32, pretrained_source=str(p)))
    assert torch.equal(bb.block1.denseblock1.denselayer1.conv1.weight, full.features.denseblock1.denselayer1.conv1.weight)


def test_layout_mismatch_is_config_error(tmp_path):
    from torchvision.models import densenet121

    p = tmp_path / "dn121.pth"
    torch.save(densenet121(weights=None).state_dict(), p)
    with pytest.raises(ConfigError):
        build_backbone(BackboneConfig(input_resolution=32, arch="densenet161", pretrained_source=str(p)))


def test_grayscale_stem():
    bb = Backbone(BackboneConfig(input_resolution=32, in_channels=1, mean=(0.5,), std=(0.25,)))
    assert bb(torch.randn(1, 1, 32, 32))[2].shape[-1] == 2
