import pytest
import torch

from dvanet.model import (
    CheckpointError,
    DVANet,
    ModelConfig,
    count_parameters,
    load_checkpoint,
    save_checkpoint,
)


def micro(**kw):
    torch.manual_seed(0)
    return DVANet(ModelConfig.micro(**kw)).eval()


def pair(b=1, h=32, w=64, seed=1):
    g = torch.Generator().manual_seed(seed)
    return torch.rand(b, 3, h, w, generator=g), torch.rand(b, 3, h, w, generator=g)


def test_full_resolution_outputs_and_bounds():
    model = micro()
    left, right = pair(2)
    with torch.no_grad():
        out = model(left, right, return_attention=True)
    assert out.disp.shape == (2, 32, 64)
    assert out.disp_prior.shape == (2, 32, 64)
    assert out.depth.shape == (2, 32, 64)
    assert out.channel_attention.shape == (2, 32, 8, 16)
    assert out.disparity_attention.shape == (2, 1, 4, 8, 16)
    assert out.disp.min() >= 0 and out.disp.max() <= 15


def test_attention_dropped_unless_requested():
    with torch.no_grad():
        out = micro()(*pair())
    assert out.channel_attention is None and out.disparity_attention is None


def test_reproducible_checksum():
    left, right = pair()
    with torch.no_grad():
        a = micro()(left, right).disp
        b = micro()(left, right).disp
    assert torch.equal(a, b)


@pytest.mark.parametrize("kw", [dict(hierarchy_attention=False), dict(disparity_attention=False),
                                dict(volume="correlation")])
def test_ablation_variants_run(kw):
    model = micro(**kw)
    with torch.no_grad():
        out = model(*pair())
    assert out.disp.shape == (1, 32, 64)
    assert (out.depth is None) == (not model.config.hierarchy_attention)
    assert (out.disp_prior is None) == (not model.config.disparity_attention)


def test_parameter_budget_full():
    n = count_parameters(DVANet(ModelConfig.full()))
    assert 0.8 * 5.1e6 <= n <= 1.2 * 5.1e6


def test_config_validation():
    with pytest.raises(ValueError):
        ModelConfig.micro(max_disp=18)
    with pytest.raises(ValueError):
        ModelConfig.micro(volume="concat")


def test_config_dict_roundtrip():
    cfg = ModelConfig.toy(max_disp=32, volume="correlation")
    assert ModelConfig.from_dict(cfg.to_dict()) == cfg


def test_checkpoint_roundtrip(tmp_path):
    model = micro()
    save_checkpoint(tmp_path / "m.pt", model, note="x")
    back, extra = load_checkpoint(tmp_path / "m.pt")
    assert extra == {"note": "x"}
    left, right = pair()
    back.eval()
    with torch.no_grad():
        assert torch.equal(model(left, right).disp, back(left, right).disp)


def test_checkpoint_tamper_detected(tmp_path):
    p = tmp_path / "m.pt"
    save_checkpoint(p, micro())
    box = torch.load(p, weights_only=True)
    payload = bytearray(box["payload"])
    payload[len(payload) // 2] ^= 0xFF
    box["payload"] = bytes(payload)
    torch.save(box, p)
    with pytest.raises(CheckpointError):
        load_checkpoint(p)


def test_checkpoint_rejects_foreign_file(tmp_path):
    p = tmp_path / "x.pt"
    torch.save({"weights": torch.zeros(2)}, p)
    with pytest.raises(CheckpointError):
        load_checkpoint(p)
