import numpy as np
import pytest
import torch

from hepacascade.compnet_models import (
    ArchitectureError,
    CompNet2DSpec,
    CompNet3DSpec,
    build_compnet2d,
    build_compnet3d,
    count_parameters,
    forward,
    load_checkpoint,
    save_checkpoint,
    transition_size,
)

TOY2D = CompNet2DSpec(input_hw=(64, 64), block_widths=(8, 8, 16), transition_width=32)
TOY3D = CompNet3DSpec(input_dhw=(16, 16, 16), block_widths=(4, 8, 16), transition_width=32)


def test_toy2d_shapes():
    torch.manual_seed(0)
    m = build_compnet2d(TOY2D).eval()
    out = forward(m, torch.zeros(2, 64, 64))
    assert m.transition_spatial == (8, 8) == transition_size(TOY2D)
    for t in out:
        assert t.shape == (2, 1, 64, 64)
        assert torch.isfinite(t).all()
    assert 0 <= out.seg.min() and out.seg.max() <= 1
    assert 0 <= out.comp.min() and out.comp.max() <= 1


def test_toy3d_shapes_and_batch_order():
    torch.manual_seed(0)
    m = build_compnet3d(TOY3D).eval()
    x = torch.randn(3, 1, 16, 16, 16)
    out = m(x)
    assert m.transition_spatial == (2, 2, 2)
    assert out.seg.shape == out.recon.shape == (3, 1, 16, 16, 16)
    with torch.no_grad():
        singles = torch.cat([m(x[i : i + 1]).seg for i in range(3)])
    torch.testing.assert_close(out.seg, singles, rtol=1e-5, atol=1e-6)


def test_recon_within_input_range():
    torch.manual_seed(1)
    m = build_compnet3d(TOY3D).eval()
    x = torch.rand(2, 1, 16, 16, 16) * 3 - 1
    r = m(x).recon
    for i in range(2):
        assert x[i].min() <= r[i].min() and r[i].max() <= x[i].max()


def test_default_specs_match_published_widths():
    s2, s3 = CompNet2DSpec(), CompNet3DSpec()
    assert s2.block_widths == (32, 32, 64, 128, 256) and s2.transition_width == 512
    assert s2.kernel == 3 and s2.dropout_rate == 0.3 and s2.l2 == 2e-4
    assert transition_size(s2) == (16, 16)
    assert s3.block_widths == (64, 128, 256) and s3.transition_width == 512
    assert transition_size(s3) == (4, 4, 4)


@pytest.mark.parametrize(
    "spec",
    [
        CompNet2DSpec(input_hw=(60, 64)),
        CompNet3DSpec(input_dhw=(32, 32, 20)),
        CompNet2DSpec(block_widths=()),
        CompNet2DSpec(input_hw=(64, 64), block_widths=(8, -1)),
        CompNet2DSpec(input_hw=(64, 64), output_prior=1.0),
    ],
)
def test_invalid_specs(spec):
    with pytest.raises(ArchitectureError):
        (build_compnet2d if spec.ndim == 2 else build_compnet3d)(spec)


def test_output_prior_sets_initial_probabilities():
    from dataclasses import replace

    torch.manual_seed(0)
    m = build_compnet2d(replace(TOY2D, output_prior=0.02))
    assert float(m.seg_head.bias.detach()) == pytest.approx(np.log(0.02 / 0.98))
    assert float(m.comp_head.bias.detach()) == pytest.approx(-np.log(0.02 / 0.98))
    with torch.no_grad():
        m.seg_head.weight.zero_()
        m.comp_head.weight.zero_()
        out = m.eval()(torch.rand(2, 1, 64, 64))
    np.testing.assert_allclose(out.seg.numpy(), 0.02, rtol=1e-5)
    np.testing.assert_allclose(out.comp.numpy(), 0.98, rtol=1e-5)


def test_input_shape_mismatch():
    m = build_compnet2d(TOY2D)
    with pytest.raises(ArchitectureError):
        m(torch.zeros(1, 1, 32, 32))


def test_eval_forward_is_deterministic(rng):
    torch.manual_seed(0)
    m = build_compnet2d(TOY2D).eval()
    x = rng.random((2, 64, 64)).astype(np.float32)
    with torch.no_grad():
        a, b = forward(m, x), forward(m, x)
    for u, v in zip(a, b):
        assert torch.equal(u, v)


def test_seeded_training_forward_is_reproducible(rng):
    x = torch.from_numpy(rng.random((2, 1, 16, 16, 16)).astype(np.float32))
    outs = []
    for _ in range(2):
        torch.manual_seed(5)
        m = build_compnet3d(TOY3D).train()
        outs.append(m(x))
    for u, v in zip(*outs):
        assert torch.equal(u, v)
    torch.manual_seed(5)
    m = build_compnet3d(TOY3D).train()
    torch.manual_seed(6)
    other = m(x)
    assert not torch.equal(other.seg, outs[0].seg)  # dropout active in train mode


def test_checkpoint_round_trip(tmp_path):
    torch.manual_seed(0)
    m = build_compnet3d(TOY3D).eval()
    save_checkpoint(m, tmp_path / "m.pt")
    back = load_checkpoint(tmp_path / "m.pt")
    assert back.spec == TOY3D
    assert count_parameters(back) == count_parameters(m)
    x = torch.randn(1, 1, 16, 16, 16)
    with torch.no_grad():
        torch.testing.assert_close(back(x).seg, m(x).seg)
