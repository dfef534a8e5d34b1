"""Network shapes, wiring contracts, ablation switches, and gradient flow."""

import math

import pytest
import torch

from _gradcheck import directional_grad_errs
from hybridseg.losses import BranchTargets, total_loss
from hybridseg.network import (
    DualDecoderNet,
    NetConfig,
    SingleDecoderNet,
    uncertainty_from_background,
)


def make_net(**kwargs):
    return DualDecoderNet(NetConfig(**kwargs))


@pytest.fixture(scope="module")
def net():
    return make_net()


@pytest.fixture(scope="module")
def image():
    gen = torch.Generator().manual_seed(0)
    return torch.rand(2, 1, 64, 64, generator=gen)


class TestNetConfig:
    def test_too_few_stages_rejected(self):
        with pytest.raises(ValueError):
            NetConfig(stage_widths=(16, 32))

    def test_odd_widths_rejected(self):
        with pytest.raises(ValueError):
            NetConfig(stage_widths=(15, 32, 64))

    def test_non_increasing_widths_rejected(self):
        with pytest.raises(ValueError):
            NetConfig(stage_widths=(16, 32, 32, 64))


class TestEncoder:
    def test_stage_shapes(self, net, image):
        feats = net.encode(image)
        assert [tuple(f.shape) for f in feats] == [
            (2, 16, 32, 32), (2, 32, 16, 16), (2, 64, 8, 8), (2, 128, 4, 4)]

    def test_deterministic(self, net, image):
        a = net.encode(image)
        b = net.encode(image)
        assert all(torch.equal(x, y) for x, y in zip(a, b))

    def test_zero_input_finite(self, net):
        feats = net.encode(torch.zeros(1, 1, 64, 64))
        assert all(torch.isfinite(f).all() for f in feats)

    def test_indivisible_size_rejected(self, net):
        with pytest.raises(ValueError):
            net.encode(torch.zeros(1, 1, 56, 56))


class TestDisentangle:
    def test_shapes_preserved(self, net, image):
        feats = net.encode(image)
        f_r, f_o = net.disentangle(feats)
        assert [f.shape for f in f_r] == [f.shape for f in feats]
        assert [f.shape for f in f_o] == [f.shape for f in feats]

    def test_ablation_passes_features_through(self, image):
        ablated = make_net(ablate_fd=True)
        feats = ablated.encode(image)
        f_r, f_o = ablated.disentangle(feats)
        assert all(r is f and o is f for r, o, f in zip(f_r, f_o, feats))

    def test_streams_are_parameter_separated(self, net, image):
        feats = net.encode(image)
        f_r, _ = net.disentangle(feats)
        with torch.no_grad():
            for p in net.proj_o.parameters():
                p.add_(1.0)
        f_r2, f_o2 = net.disentangle(feats)
        with torch.no_grad():   # restore
            for p in net.proj_o.parameters():
                p.add_(-1.0)
        assert all(torch.equal(a, b) for a, b in zip(f_r, f_r2))
        assert not all(torch.equal(a, b) for a, b in zip(f_o2, net.disentangle(feats)[1]))


class TestUncertainty:
    def test_zero_logit(self):
        u = uncertainty_from_background(torch.zeros(3, 3))
        assert torch.equal(u, torch.full((3, 3), 0.5))

    def test_confident_background_suppressed(self):
        assert uncertainty_from_background(torch.tensor(30.0)).item() < 1e-12

    def test_negative_two_logit(self):
        expected = 1.0 / (1.0 + math.exp(-2.0))  # sigmoid(2) ~ 0.8808
        u = uncertainty_from_background(torch.tensor(-2.0, dtype=torch.float64))
        assert abs(u.item() - expected) < 1e-12

    def test_open_unit_range(self):
        # |logit| <= 15 keeps sigmoid away from float32 saturation
        logits = torch.tensor([-15.0, -1.0, 0.0, 1.0, 15.0])
        u = uncertainty_from_background(logits)
        assert (u > 0).all() and (u < 1).all()


class TestPrompt:
    def test_identity_gate(self, net, image):
        f_r, _ = net.disentangle(net.encode(image))
        out = net.prompt(f_r, torch.ones(2, 64, 64))
        assert all(torch.allclose(a, b) for a, b in zip(out, f_r))

    def test_zero_gate_annihilates(self, net, image):
        f_r, _ = net.disentangle(net.encode(image))
        out = net.prompt(f_r, torch.zeros(2, 64, 64))
        assert all((o == 0).all() for o in out)

    def test_uniform_half_gate_scales(self, net, image):
        f_r, _ = net.disentangle(net.encode(image))
        out = net.prompt(f_r, torch.full((2, 64, 64), 0.5))
        assert all(torch.allclose(o, 0.5 * f) for o, f in zip(out, f_r))

    def test_spm_ablation_is_identity(self, image):
        ablated = make_net(ablate_spm=True)
        f_r, _ = ablated.disentangle(ablated.encode(image))
        out = ablated.prompt(f_r, torch.zeros(2, 64, 64))
        assert all(o is f for o, f in zip(out, f_r))


class TestForward:
    def test_output_shapes_and_uncertainty_identity(self, net, image):
        out = net(image)
        assert out.seg_logits.shape == (2, 64, 64)
        assert out.bg_logits.shape == (2, 64, 64)
        assert torch.equal(out.uncertainty, 1.0 - torch.sigmoid(out.bg_logits))

    def test_accepts_unsqueezed_and_squeezed_input(self, net, image):
        assert torch.equal(net(image).seg_logits, net(image[:, 0]).seg_logits)

    def test_deterministic(self, net, image):
        assert torch.equal(net(image).seg_logits, net(image).seg_logits)

    def test_init_seed_reproducible(self):
        a, b = make_net(init_seed=3), make_net(init_seed=3)
        assert all(torch.equal(p, q) for p, q in zip(a.parameters(), b.parameters()))
        c = make_net(init_seed=4)
        assert not all(torch.equal(p, q) for p, q in zip(a.parameters(), c.parameters()))

    def test_single_decoder_baseline(self, image):
        out = SingleDecoderNet(NetConfig())(image)
        assert out.seg_logits.shape == (2, 64, 64)
        assert out.bg_logits is None and out.uncertainty is None

    def test_bottleneck_only_variant_runs(self, image):
        net = make_net(split_all_stages=False)
        out = net(image)
        assert out.seg_logits.shape == (2, 64, 64)
        assert len(net.split_stages) == 1

    def test_detach_flag_blocks_gate_gradient(self, image):
        net = make_net(detach_uncertainty=True)
        net.zero_grad()
        net(image).seg_logits.sum().backward()
        assert all(p.grad is None or (p.grad == 0).all() for p in net.dec_bg.parameters())


def perturb(params, delta=0.5):
    with torch.no_grad():
        for p in params:
            p.add_(delta)


class TestWiring:
    def test_spm_off_makes_seg_independent_of_background_decoder(self, image):
        net = make_net(ablate_spm=True)
        before = net(image)
        perturb(net.dec_bg.parameters())
        after = net(image)
        assert (after.seg_logits - before.seg_logits).abs().max().item() == 0.0
        assert not torch.equal(after.bg_logits, before.bg_logits)

    def test_spm_on_makes_seg_depend_on_background_decoder(self, image):
        net = make_net()
        before = net(image).seg_logits
        perturb(net.dec_bg.parameters())
        assert not torch.equal(net(image).seg_logits, before)

    def test_bg_logits_independent_of_lesion_projection(self, image):
        net = make_net()
        before = net(image).bg_logits
        perturb(net.proj_r.parameters())
        assert (net(image).bg_logits - before).abs().max().item() == 0.0

    def test_pre_prompt_features_independent_of_other_projection(self, image):
        net = make_net()
        feats = net.encode(image)
        before = net.disentangle(feats)[0]
        perturb(net.proj_o.parameters())
        after = net.disentangle(feats)[0]
        assert all((a - b).abs().max().item() == 0.0 for a, b in zip(after, before))

    def test_fd_and_spm_off_shares_features_between_decoders(self, image):
        net = make_net(ablate_fd=True, ablate_spm=True)
        feats = net.encode(image)
        f_r, f_o = net.disentangle(feats)
        assert all(r is o for r, o in zip(net.prompt(f_r, torch.ones(2, 64, 64)), f_o))

    def test_weak_only_batch_gives_zero_seg_head_gradient(self, image):
        # aux-only targets must not touch the segmentation head's output layer
        net = make_net().double()
        gen = torch.Generator().manual_seed(1)
        aux = (torch.rand(2, 64, 64, generator=gen) > 0.2).double()
        report = total_loss(net(image.double()),
                            [BranchTargets(aux=aux[0]), BranchTargets(aux=aux[1])],
                            kernel=7)
        net.zero_grad()
        report.total.backward()
        assert all(p.grad is None or (p.grad == 0).all()
                   for p in net.dec_seg.head.parameters())


class TestGradientCheck:
    @staticmethod
    def loss_builder(image):
        gen = torch.Generator().manual_seed(2)
        seg = (torch.rand(2, 64, 64, generator=gen) > 0.7).double()
        aux = (torch.rand(2, 64, 64, generator=gen) > 0.2).double()

        def build(m):
            dtype = next(m.parameters()).dtype
            targets = [BranchTargets(seg=seg[0].to(dtype), aux=aux[0].to(dtype)),
                       BranchTargets(aux=aux[1].to(dtype))]
            return total_loss(m(image.to(dtype)), targets, kernel=7).total

        return build

    def test_directional_derivatives_match_fd_float64(self, image):
        net = make_net().double()
        errs = directional_grad_errs(net, self.loss_builder(image),
                                     n_checks=8, h=1e-7, seed=0)
        assert max(errs) < 1e-4

    def test_directional_derivatives_match_fd_float32(self, image):
        net = make_net()
        errs = directional_grad_errs(net, self.loss_builder(image),
                                     n_checks=8, h=1e-7, seed=0, fd_in_double=True)
        assert max(errs) < 1e-2
