import numpy as np
import pytest
import torch

from crgan.conditioning import sample_distinct_pairs
from crgan.discriminator import (
    BranchTwo,
    DiscriminatorConfig,
    ParameterBudgetError,
    Discriminator,
    branch1_forward,
    branch2_forward,
    count_parameters,
    discriminator_forward,
    init_discriminator,
    to_batch_volume,
)
from crgan.generator import GeneratorConfig, generate, init_generator


def _conds(n, seed=0):
    return sample_distinct_pairs(np.random.default_rng(seed), n)


@pytest.fixture(scope="module")
def gen():
    return init_generator(GeneratorConfig(), seed=0)


@pytest.fixture(scope="module")
def disc():
    return init_discriminator(DiscriminatorConfig(), seed=0)


class TestGenerator:
    def test_config_validation(self):
        with pytest.raises(ValueError):
            GeneratorConfig(noise_dim=0)
        with pytest.raises(ValueError):
            GeneratorConfig(base_channels=4)

    def test_init_deterministic(self):
        a = init_generator(GeneratorConfig(), seed=3).state_dict()
        b = init_generator(GeneratorConfig(), seed=3).state_dict()
        for k in a:
            assert a[k].numpy().tobytes() == b[k].numpy().tobytes()

    def test_batchnorm_init(self, gen):
        for m in gen.modules():
            if isinstance(m, torch.nn.BatchNorm2d):
                assert torch.all(m.bias == 0) and torch.all(m.weight == 1)

    def test_weight_std(self, gen):
        w = torch.cat([m.weight.detach().flatten() for m in gen.modules() if isinstance(m, torch.nn.ConvTranspose2d)])
        assert w.numel() >= 10_000
        assert abs(float(w.std()) - 0.02) <= 0.002
        assert abs(float(w.mean())) < 0.002

    def test_shape_and_range(self, gen):
        out = generate(gen, torch.randn(64, 100), _conds(64), mode="train")
        assert out.shape == (64, 1, 28, 56)
        assert out.min() > -1 and out.max() < 1

    def test_untrained_mean(self, gen):
        out = generate(gen, torch.randn(64, 100, generator=torch.Generator().manual_seed(0)), _conds(64), mode="eval")
        assert -0.5 < float(out.mean()) < 0.5

    def test_eval_identical_rows(self, gen):
        z = torch.randn(1, 100).repeat(3, 1)
        c = np.repeat(_conds(1), 3, axis=0)
        out = generate(gen, z, c, mode="eval")
        assert torch.equal(out[0], out[1]) and torch.equal(out[1], out[2])

    def test_eval_no_cross_sample_flow(self, gen):
        z = torch.randn(8, 100)
        c = _conds(8)
        before = generate(gen, z, c, mode="eval")
        c2 = c.copy()
        c2[3] = 0
        c2[3, [0, 9]] = 1
        after = generate(gen, z, c2, mode="eval")
        changed = [i for i in range(8) if not torch.equal(before[i], after[i])]
        assert changed == [3]

    def test_mismatched_batch(self, gen):
        with pytest.raises(ValueError):
            generate(gen, torch.randn(4, 100), _conds(5))

    def test_train_mode_needs_two(self, gen):
        with pytest.raises(ValueError):
            generate(gen, torch.randn(1, 100), _conds(1), mode="train")


class TestBranches:
    def test_branch1_shape(self, disc):
        out = branch1_forward(disc, torch.rand(64, 1, 28, 56) * 2 - 1, _conds(64), mode="train")
        assert out.shape == (64,)

    def test_branch1_permutation(self, disc):
        x, c = torch.rand(10, 1, 28, 56) * 2 - 1, _conds(10)
        perm = np.random.default_rng(1).permutation(10)
        with torch.no_grad():
            a = branch1_forward(disc, x, c, mode="eval")
            b = branch1_forward(disc, x[perm], c[perm], mode="eval")
        torch.testing.assert_close(a[perm], b, rtol=0, atol=1e-6)

    def test_branch1_duplicate_row(self, disc):
        x, c = torch.rand(4, 1, 28, 56), _conds(4)
        x[2], c[2] = x[0], c[0]
        with torch.no_grad():
            out = branch1_forward(disc, x, c, mode="eval")
        torch.testing.assert_close(out[0], out[2], rtol=0, atol=1e-6)

    def test_branch1_bad_condition(self, disc):
        with pytest.raises(ValueError):
            branch1_forward(disc, torch.rand(4, 1, 28, 56), np.zeros((4, 9), np.uint8))

    def test_branch1_couples_left_and_right(self):
        # s(a, b) + s(a', b') - s(a, b') - s(a', b) is zero for any score that is a sum of
        # a left term and a right term; such a critic cannot tell "3 7" from "3 3"
        g = torch.Generator().manual_seed(0)
        left = torch.rand(2, 1, 28, 8, generator=g) * 2 - 1
        right = torch.rand(2, 1, 28, 8, generator=g) * 2 - 1
        x = torch.zeros(4, 1, 28, 56)
        # patches 28 columns apart, one in the middle of each digit cell
        for k, (i, j) in enumerate([(0, 0), (1, 1), (0, 1), (1, 0)]):
            x[k, ..., 8:16], x[k, ..., 36:44] = left[i], right[j]
        c = np.repeat(_conds(1), 4, axis=0)
        disc = init_discriminator(DiscriminatorConfig(), seed=0)
        with torch.no_grad():
            s = branch1_forward(disc, x, c, mode="eval").double()
        assert abs(float(s[0] + s[1] - s[2] - s[3])) > 1e-3 * float(s.abs().max())

    def test_volume(self):
        x = torch.rand(2, 1, 28, 56)
        v = to_batch_volume(x)
        assert v.shape == (1, 2, 28, 56)
        assert torch.equal(v[0, 0], x[0, 0]) and torch.equal(v[0, 1], x[1, 0])
        assert torch.equal(v.permute(1, 0, 2, 3), x)

    def test_volume_constant_for_identical_batch(self):
        x = torch.rand(1, 1, 28, 56).repeat(5, 1, 1, 1)
        v = to_batch_volume(x)
        assert torch.all(v == v[:, :1])

    def test_volume_needs_two(self):
        with pytest.raises(ValueError):
            to_batch_volume(torch.rand(1, 1, 28, 56))

    def test_branch2_scalar_and_deterministic(self, disc):
        v = to_batch_volume(torch.rand(64, 1, 28, 56))
        with torch.no_grad():
            a = branch2_forward(disc, v, mode="eval")
            b = branch2_forward(disc, v, mode="eval")
        assert a.shape == () and torch.isfinite(a)
        assert torch.equal(a, b)

    def test_branch2_depth_order_matters(self, disc):
        # no permutation invariance: reordering the batch changes the score
        x = torch.rand(16, 1, 28, 56) * 2 - 1
        perm = torch.from_numpy(np.random.default_rng(0).permutation(16))
        with torch.no_grad():
            a = branch2_forward(disc, to_batch_volume(x), mode="eval")
            b = branch2_forward(disc, to_batch_volume(x[perm]), mode="eval")
        assert not torch.equal(a, b)


class TestBudget:
    def test_default_budget(self, disc):
        counts = disc.parameter_counts()
        assert counts["branch2"] < 0.2 * counts["branch1"]
        assert counts["fusion"] == 6

    def test_violation_fails(self):
        with pytest.raises(ParameterBudgetError):
            Discriminator(DiscriminatorConfig(base_channels=4))
        with pytest.raises(ParameterBudgetError):
            Discriminator(DiscriminatorConfig(branch2_channels=(16, 64, 128)))

    def test_branch2_narrower(self, disc):
        # layer by layer: concatenated first-layer width, then the trunk convs
        b1 = [disc.branch1.image_in[0].out_channels + disc.branch1.cond_in[0].out_channels]
        b1 += [m.out_channels for m in disc.branch1.trunk.modules() if isinstance(m, torch.nn.Conv2d)]
        b2 = [m.out_channels for m in disc.branch2.modules() if isinstance(m, torch.nn.Conv3d)]
        assert len(b1) == 4 and len(b2) == 3
        assert all(x < y for x, y in zip(b2, b1))
        assert count_parameters(BranchTwo()) == count_parameters(disc.branch2)


class TestDiscriminatorForward:
    def test_shapes(self, disc):
        out = discriminator_forward(disc, torch.rand(64, 1, 28, 56), _conds(64), mode="train")
        for t in (out.d1, out.alpha, out.beta, out.fused):
            assert t.shape == (64,)
        assert out.d2.shape == ()

    def test_eq1_identity(self, disc):
        with torch.no_grad():
            out = discriminator_forward(disc, torch.rand(32, 1, 28, 56), _conds(32), mode="train")
        expected = out.alpha.double() * out.d1.double() + out.beta.double() * out.d2.double()
        assert float((out.fused.double() - expected).abs().max()) <= 1e-6
        assert out.fusion_residual() <= 1e-6

    def test_ablation(self, disc):
        out = discriminator_forward(disc, torch.rand(8, 1, 28, 56), _conds(8), mode="train", d2_enabled=False)
        assert torch.equal(out.fused, out.d1)
        assert torch.all(out.alpha == 1) and torch.all(out.beta == 0)

    def test_ablation_leaves_branch2_without_gradients(self):
        d = init_discriminator(DiscriminatorConfig(), seed=1)
        out = discriminator_forward(d, torch.rand(8, 1, 28, 56), _conds(8), mode="train", d2_enabled=False)
        out.fused.sum().backward()
        assert all(p.grad is None for p in d.branch2.parameters())
        assert all(p.grad is None for p in d.fusion.parameters())
        assert any(p.grad is not None for p in d.branch1.parameters())

    def test_branch1_independence_with_cross_sample_fusion(self, disc):
        x, c = torch.rand(6, 1, 28, 56) * 2 - 1, _conds(6)
        with torch.no_grad():
            a = discriminator_forward(disc, x, c, mode="eval")
            x2 = x.clone()
            x2[4] = -x2[4]
            b = discriminator_forward(disc, x2, c, mode="eval")
        keep = [0, 1, 2, 3, 5]
        assert torch.equal(a.d1[keep], b.d1[keep])
        assert not torch.equal(a.d2, b.d2)

    def test_nonnegative_with_identity_fusion(self):
        d = init_discriminator(DiscriminatorConfig(), seed=2)
        with torch.no_grad():
            d.fusion.weight.copy_(torch.eye(2))
            d.fusion.bias.zero_()
        d1 = torch.rand(50) * 3
        _, _, fused = d.fusion(d1, torch.tensor(0.7))
        assert torch.all(fused >= 0)
