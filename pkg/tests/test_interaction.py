import numpy as np
import pytest
import torch

from anymotion.errors import ValidationError
from anymotion.generation import ModelDims, init_gen_params
from anymotion.interaction import (
    InteractionNet,
    init_from_generation,
    init_inter_params,
)
from anymotion.motion import SpatialSignal

TINY = ModelDims(feature_dim=16, hidden=8, heads=2, blocks=2, max_frames=8)


def _randomize(net: InteractionNet, seed: int) -> InteractionNet:
    """Fill every parameter (including the zero-init projections) randomly."""
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for _, p in sorted(net.named_parameters()):
            p.copy_(torch.randn(p.shape, generator=g, dtype=torch.float64).to(p.dtype) * 0.1)
    return net


class TestEncodeInputs:
    def setup_method(self):
        self.net = init_inter_params(0, TINY, spatial_joints=4)

    def test_zero_init_spatial_is_noop(self):
        x = torch.randn(4, 16, generator=torch.Generator().manual_seed(1))
        spatial = SpatialSignal(np.ones((4, 4, 3)), np.ones((4, 4)))
        a, _ = self.net.encode_inputs(x, [])
        b, _ = self.net.encode_inputs(x, [], spatial)
        assert torch.equal(a, b)

    def test_empty_conditions(self):
        _, conds = self.net.encode_inputs(torch.randn(4, 16), [])
        assert conds == []

    def test_identical_conditions_identical_states(self):
        x = torch.randn(4, 16, generator=torch.Generator().manual_seed(2))
        c = torch.randn(4, 16, generator=torch.Generator().manual_seed(3))
        _, conds = self.net.encode_inputs(x, [c, c.clone()])
        assert torch.equal(conds[0], conds[1])

    def test_frame_mismatch_rejected(self):
        with pytest.raises(ValidationError):
            self.net.encode_inputs(torch.randn(4, 16), [torch.randn(5, 16)])


class TestZeroInit:
    def test_fresh_random_params_give_zero_residuals(self):
        net = init_inter_params(3, TINY, spatial_joints=4)
        x = torch.randn(2, 4, 16, generator=torch.Generator().manual_seed(4))
        conds = [torch.randn(2, 4, 16, generator=torch.Generator().manual_seed(5))]
        res, _ = net.im_residuals(x, conds, None, 7, None)
        assert len(res) == TINY.blocks
        for r in res:
            assert r.shape == (2, 4, 8)
            assert torch.count_nonzero(r) == 0

    def test_init_from_generation_zero_residuals(self):
        gm = init_gen_params(0, TINY)
        net = init_from_generation(gm, 1, spatial_joints=4)
        spatial = SpatialSignal(
            np.random.default_rng(0).normal(size=(4, 4, 3)), np.ones((4, 4))
        )
        x = torch.randn(1, 4, 16, generator=torch.Generator().manual_seed(6))
        res, _ = net.im_residuals(x, [x.clone()], spatial, 9, np.ones(8))
        assert all(torch.count_nonzero(r) == 0 for r in res)

    def test_full_model_unchanged_at_init(self):
        gm = init_gen_params(2, TINY)
        im = init_from_generation(gm, 3)
        x = torch.randn(2, 4, 16, generator=torch.Generator().manual_seed(7))
        conds = [torch.randn(2, 4, 16, generator=torch.Generator().manual_seed(8))]
        res, _ = im.im_residuals(x, conds, None, 5, None)
        with torch.no_grad():
            with_im, _ = gm(x, 5, None, residuals=res)
            without, _ = gm(x, 5, None)
        assert torch.equal(with_im, without)

    def test_attention_weights_copied_bit_exact(self):
        gm = init_gen_params(4, TINY)
        im = init_from_generation(gm, 5)
        for blk, gblk in zip(im.blocks, gm.blocks):
            assert torch.equal(blk.sa1.qkv.weight, gblk.attn.qkv.weight)
            assert torch.equal(blk.sa2.qkv.weight, gblk.attn.qkv.weight)
            assert torch.equal(blk.sa1.out.weight, gblk.attn.out.weight)
            assert torch.equal(blk.mod_sa1.map.weight, gblk.mod_attn.map.weight)
            assert torch.equal(blk.mod_sa2.map.weight, gblk.mod_ffn.map.weight)
        assert torch.equal(im.input_proj.weight, gm.input_proj.weight)


class TestConditionHandling:
    def setup_method(self):
        self.net = _randomize(InteractionNet(TINY, spatial_joints=4), 11)
        self.x = torch.randn(1, 4, 16, generator=torch.Generator().manual_seed(12))
        g = torch.Generator().manual_seed(13)
        self.conds = [torch.randn(1, 4, 16, generator=g) for _ in range(3)]

    def _residuals(self, conds, keep=None):
        res, _ = self.net.im_residuals(self.x, conds, None, 3, np.ones(8), keep_mask=keep)
        return res

    @pytest.mark.parametrize("count", [0, 1, 2, 3])
    def test_condition_count_generality(self, count):
        res = self._residuals(self.conds[:count])
        assert len(res) == TINY.blocks
        for r in res:
            assert r.shape == (1, 4, 8)
            assert torch.isfinite(r).all()

    def test_permutation_invariance(self):
        base = self._residuals(self.conds)
        permuted = self._residuals([self.conds[2], self.conds[0], self.conds[1]])
        for a, b in zip(base, permuted):
            assert float((a - b).abs().max()) < 1e-6

    def test_permutation_of_condition_outputs(self):
        _, states = self.net.im_residuals(self.x, self.conds, None, 3, np.ones(8))
        _, states_p = self.net.im_residuals(
            self.x, [self.conds[1], self.conds[0], self.conds[2]], None, 3, np.ones(8)
        )
        assert float((states[0] - states_p[1]).abs().max()) < 1e-6
        assert float((states[1] - states_p[0]).abs().max()) < 1e-6

    def test_mask_equals_removal(self):
        masked = self._residuals(self.conds, keep=[True, False, True])
        removed = self._residuals([self.conds[0], self.conds[2]])
        for a, b in zip(masked, removed):
            assert float((a - b).abs().max()) < 1e-6

    def test_all_masked_equals_no_conditions(self):
        masked = self._residuals(self.conds, keep=[False, False, False])
        empty = self._residuals([])
        for a, b in zip(masked, empty):
            assert float((a - b).abs().max()) < 1e-6

    def test_masked_condition_state_bypasses_block(self):
        _, states = self.net.im_residuals(
            self.x, self.conds, None, 3, np.ones(8), keep_mask=[True, False, True]
        )
        expected, _ = self.net.encode_inputs(self.x, [self.conds[1]])
        # the dropped condition leaves every block unchanged, so its final
        # state is exactly its encoding
        _, enc = self.net.encode_inputs(self.x, self.conds)
        assert torch.equal(states[1], enc[1])

    def test_per_sample_keep_mask(self):
        x = torch.randn(2, 4, 16, generator=torch.Generator().manual_seed(14))
        c = torch.randn(2, 4, 16, generator=torch.Generator().manual_seed(15))
        keep = torch.tensor([[True], [False]])
        res, _ = self.net.im_residuals(x, [c], None, 3, np.ones(8), keep_mask=keep)
        kept, _ = self.net.im_residuals(x[:1], [c[:1]], None, 3, np.ones(8))
        dropped, _ = self.net.im_residuals(x[1:], [], None, 3, np.ones(8))
        for r, rk, rd in zip(res, kept, dropped):
            assert float((r[0] - rk[0]).abs().max()) < 1e-6
            assert float((r[1] - rd[0]).abs().max()) < 1e-6


class TestSpatialPathway:
    def test_spatial_signal_changes_target_when_trained(self):
        net = _randomize(InteractionNet(TINY, spatial_joints=4), 21)
        x = torch.randn(1, 4, 16, generator=torch.Generator().manual_seed(22))
        spatial = SpatialSignal(np.ones((4, 4, 3)), np.ones((4, 4)))
        a, _ = net.im_residuals(x, [], None, 3, None)
        b, _ = net.im_residuals(x, [], spatial, 3, None)
        assert any(not torch.equal(ra, rb) for ra, rb in zip(a, b))

    def test_no_pathway_raises(self):
        net = init_inter_params(0, TINY, spatial_joints=None)
        spatial = SpatialSignal(np.ones((4, 4, 3)), np.ones((4, 4)))
        with pytest.raises(ValidationError):
            net.im_residuals(torch.randn(1, 4, 16), [], spatial, 3, None)


class TestGradients:
    def test_residual_gradients_match_finite_differences(self):
        dims = ModelDims(feature_dim=6, hidden=8, heads=2, blocks=1, max_frames=4)
        net = _randomize(InteractionNet(dims, spatial_joints=None), 31).double()
        x = torch.randn(1, 4, 6, dtype=torch.float64,
                        generator=torch.Generator().manual_seed(32))
        cond = torch.randn(1, 4, 6, dtype=torch.float64,
                           generator=torch.Generator().manual_seed(33))
        emb = torch.randn(8, dtype=torch.float64,
                          generator=torch.Generator().manual_seed(34))

        def loss_fn():
            res, _ = net.im_residuals(x, [cond], None, 2, emb)
            return sum((r**2).mean() for r in res)

        loss = loss_fn()
        net.zero_grad()
        loss.backward()
        h = 1e-6
        rng = np.random.default_rng(35)
        params = [p for _, p in sorted(net.named_parameters())]
        for p in params:
            flat = p.data.reshape(-1)
            grad = p.grad.reshape(-1)
            for idx in rng.choice(flat.numel(), size=min(8, flat.numel()), replace=False):
                orig = flat[idx].item()
                flat[idx] = orig + h
                up = loss_fn().item()
                flat[idx] = orig - h
                down = loss_fn().item()
                flat[idx] = orig
                fd = (up - down) / (2 * h)
                an = grad[idx].item()
                assert abs(fd - an) / max(abs(fd), abs(an), 1e-6) < 1e-4
