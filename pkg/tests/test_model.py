import numpy as np
import pytest

from gpsa_lab import attention as A
from gpsa_lab import model as M
from gpsa_lab import tensor as T
from gpsa_lab.errors import ConfigError, ContractError, ShapeError

from . import oracles
from .gradcheck_util import check_grads


def micro_config(**kw):
    base = dict(image_size=4, patch_size=2, channels=1, num_gpsa_layers=1, num_sa_layers=1,
                num_heads=4, head_dim=2, num_classes=2, ffn_ratio=2)
    base.update(kw)
    return M.ModelConfig(**base)


def randomize(model, seed=0, scale=0.5):
    rng = np.random.default_rng(seed)
    for name, p in model.parameters().items():
        if name.endswith("gain"):
            p.data[...] = 1 + rng.normal(scale=0.1, size=p.shape)
        else:
            p.data[...] = rng.normal(scale=scale, size=p.shape)


def gather_oracle(z, layer, grid):
    """Residual + hard gather of LN'd values at each head's kernel offset (interior queries)."""
    normed = np.array(oracles.layernorm(z.tolist(), [1.0] * z.shape[1], [0.0] * z.shape[1]))
    values = normed @ layer.w_val.data
    dh = layer.head_dim
    rows = []
    for q in grid.interior():
        r, c = divmod(q, grid.cols)
        parts = [values[(r + d1) * grid.cols + (c + d2), h * dh:(h + 1) * dh]
                 for h, (d1, d2) in enumerate(A.head_centers(layer.num_heads))]
        rows.append(z[q] + np.concatenate(parts) @ layer.w_out.data + layer.b_out.data)
    return np.array(rows)


class TestConfig:
    def test_indivisible_patch(self):
        with pytest.raises(ConfigError):
            micro_config(image_size=5)

    def test_non_square_heads_with_conv_init(self):
        with pytest.raises(ConfigError):
            micro_config(num_heads=3)
        micro_config(num_heads=3, conv_init=False)

    def test_needs_a_block(self):
        with pytest.raises(ConfigError):
            micro_config(num_gpsa_layers=0, num_sa_layers=0)

    @pytest.mark.parametrize("seed", range(5))
    def test_parameter_count_formula(self, seed):
        rng = np.random.default_rng(seed)
        heads = int(rng.choice([1, 4, 9]))
        patch = int(rng.choice([1, 2, 4]))
        cfg = M.ModelConfig(image_size=patch * int(rng.integers(1, 5)), patch_size=patch,
                            channels=int(rng.integers(1, 4)), num_gpsa_layers=int(rng.integers(0, 3)),
                            num_sa_layers=int(rng.integers(1, 3)), num_heads=heads,
                            head_dim=int(rng.integers(1, 5)), ffn_ratio=int(rng.integers(1, 5)),
                            num_classes=int(rng.integers(2, 11)))
        assert M.parameter_count(cfg) == M.ConViT(cfg).num_parameters()


class TestPatchEmbed:
    def test_zero_image_gives_pos_embed(self):
        m = M.ConViT(micro_config())
        out = m.patch_embed(np.zeros((1, 4, 4))).data
        np.testing.assert_array_equal(out, m.pos_embed.data)

    def test_patch_contents(self):
        img = np.arange(16.0).reshape(1, 1, 4, 4)
        patches = M.extract_patches(img, 2)
        assert patches.shape == (1, 4, 4)
        assert sorted(patches[0, 0]) == [0.0, 1.0, 4.0, 5.0]
        assert patches[0, 1].tolist() == [2.0, 3.0, 6.0, 7.0]

    def test_scalar_oracle(self):
        cfg = M.ModelConfig(image_size=6, patch_size=3, channels=2, num_gpsa_layers=1,
                            num_sa_layers=0, num_heads=1, head_dim=3, num_classes=2)
        m = M.ConViT(cfg)
        randomize(m, 1)
        img = np.random.default_rng(2).normal(size=(2, 6, 6))
        out = m.patch_embed(img).data
        for pr in range(2):
            for pc in range(2):
                flat = [img[ch, pr * 3 + i, pc * 3 + j] for ch in range(2) for i in range(3) for j in range(3)]
                ref = [sum(flat[t] * m.patch_w.data[t, k] for t in range(18)) + m.patch_b.data[k]
                       + m.pos_embed.data[pr * 2 + pc, k] for k in range(3)]
                assert np.max(np.abs(out[pr * 2 + pc] - ref)) < 1e-12

    def test_size_mismatch(self):
        with pytest.raises(ShapeError):
            M.ConViT(micro_config()).patch_embed(np.zeros((1, 6, 6)))


class TestBlock:
    def test_zero_weights_pure_residual(self):
        m = M.ConViT(micro_config())
        block = m.gpsa_blocks[0]
        for p in (block.attn.w_val, block.attn.w_out, block.attn.b_out, block.fc1_w, block.fc1_b,
                  block.fc2_w, block.fc2_b):
            p.data[...] = 0.0
        z = np.random.default_rng(0).normal(size=(4, 8))
        out, _ = M.block_forward(z, block, m.table)
        np.testing.assert_array_equal(out.data, z)

    def test_single_token_sa(self):
        m = M.ConViT(micro_config())
        _, attn = M.block_forward(np.ones((1, 8)), m.sa_blocks[0])
        assert attn.data.tolist() == [[[1.0]]] * 4

    def test_compositional_oracle(self):
        m = M.ConViT(micro_config())
        randomize(m, 3)
        block = m.sa_blocks[0]
        z = np.random.default_rng(4).normal(size=(5, 8))
        out, _ = M.block_forward(z, block)
        lst = z.tolist()
        ln1 = oracles.layernorm(lst, block.ln1_gain.data.tolist(), block.ln1_bias.data.tolist())
        a = block.attn
        attn = [oracles.content_attention(ln1, oracles.head_cols(a.w_qry.data.tolist(), h, 2),
                                          oracles.head_cols(a.w_key.data.tolist(), h, 2)) for h in range(4)]
        mh = oracles.multi_head(ln1, attn, a.w_val.data.tolist(), a.w_out.data.tolist(),
                                a.b_out.data.tolist(), 4)
        z1 = [[x + y for x, y in zip(r1, r2)] for r1, r2 in zip(lst, mh)]
        ln2 = oracles.layernorm(z1, block.ln2_gain.data.tolist(), block.ln2_bias.data.tolist())
        hid = [[oracles.gelu(v) for v in row] for row in
               (np.array(oracles.project(ln2, block.fc1_w.data.tolist())) + block.fc1_b.data).tolist()]
        ffn = np.array(oracles.project(hid, block.fc2_w.data.tolist())) + block.fc2_b.data
        ref = np.array(z1) + ffn
        assert np.max(np.abs(out.data - ref)) < 1e-10


class TestForward:
    def test_head_bias_only(self):
        m = M.ConViT(micro_config())
        m.head_w.data[...] = 0.0
        m.head_b.data[...] = [0.3, -0.3]
        for seed in range(3):
            img = np.random.default_rng(seed).normal(size=(1, 4, 4))
            np.testing.assert_array_equal(m(img).data, [0.3, -0.3])

    def test_capture_structure(self):
        cfg = micro_config(image_size=8, num_gpsa_layers=2, num_sa_layers=1)
        m = M.ConViT(cfg)
        logits, rec = m(np.zeros((1, 8, 8)), capture=True)
        assert logits.shape == (2,)
        assert rec.kinds == ["gpsa", "gpsa", "sa"]
        assert [r.shape for r in rec.maps] == [(4, 16, 16), (4, 16, 16), (4, 17, 17)]
        rec.check_rows()
        _, rec = m(np.zeros((3, 1, 8, 8)), capture=True)
        assert rec.maps[2].shape == (3, 4, 17, 17)

    def test_batch_matches_single(self):
        m = M.ConViT(micro_config())
        imgs = np.random.default_rng(0).normal(size=(3, 1, 4, 4))
        batch = m(imgs).data
        for i in range(3):
            np.testing.assert_allclose(m(imgs[i]).data, batch[i], atol=1e-13)

    def test_deterministic(self):
        img = np.random.default_rng(1).normal(size=(1, 4, 4))
        a = M.ConViT(micro_config(), seed=3)(img).data
        b = M.ConViT(micro_config(), seed=3)(img).data
        assert np.array_equal(a, b)

    def test_label_permutation(self):
        m = M.ConViT(micro_config(num_classes=3))
        img = np.random.default_rng(2).normal(size=(1, 4, 4))
        before = m(img).data
        perm = [2, 0, 1]
        m.head_w.data[...] = m.head_w.data[:, perm]
        m.head_b.data[...] = m.head_b.data[perm]
        np.testing.assert_array_equal(m(img).data, before[perm])

    def test_gradients_every_group(self):
        m = M.ConViT(micro_config())
        randomize(m, 5)
        img = np.random.default_rng(6).normal(size=(1, 4, 4))

        def loss():
            return -T.log_softmax(m(img))[1]

        params = m.parameters()
        errors = check_grads(loss, list(params.values()))
        worst = {name: e for name, e in zip(params, errors)}
        assert max(worst.values()) < 1e-4, worst


class TestMasks:
    def test_masked_pos_embed_zero(self):
        m = M.ConViT(micro_config())
        m.patch_w.data[...] = 0.0
        M.mask_abs_pos_embed(m, True)
        assert not m.patch_embed(np.ones((1, 4, 4))).data.any()

    def test_mask_round_trip(self):
        m = M.ConViT(micro_config())
        img = np.random.default_rng(0).normal(size=(1, 4, 4))
        ref = m(img).data
        M.mask_abs_pos_embed(m, True)
        assert not np.array_equal(m(img).data, ref)
        M.mask_abs_pos_embed(m, False)
        assert np.array_equal(m(img).data, ref)

    def test_mode_none_identical(self):
        m = M.ConViT(micro_config())
        img = np.random.default_rng(0).normal(size=(1, 4, 4))
        ref = m(img).data
        M.mask_attention_mode(m, "content_only")
        M.mask_attention_mode(m, "none")
        assert np.array_equal(m(img).data, ref)

    def test_position_only_ignores_content_weights(self):
        m = M.ConViT(micro_config())
        img = np.random.default_rng(0).normal(size=(1, 4, 4))
        M.mask_attention_mode(m, "position_only")
        ref = m(img).data
        layer = m.gpsa_layers()[0]
        layer.w_qry.data += 5.0
        layer.w_key.data -= 3.0
        np.testing.assert_array_equal(m(img).data, ref)

    def test_gpsa_free_rejected(self):
        m = M.ConViT(micro_config(num_gpsa_layers=0))
        with pytest.raises(ContractError):
            M.mask_attention_mode(m, "position_only")


class TestConvExpressivity:
    def _error(self, alpha):
        cfg = M.ModelConfig(image_size=7, patch_size=1, channels=1, num_gpsa_layers=1,
                            num_sa_layers=0, num_heads=4, head_dim=3, num_classes=2,
                            locality_strength=alpha, strict_conv_init=True)
        m = M.ConViT(cfg)
        block = m.gpsa_blocks[0]
        for p in (block.fc1_w, block.fc1_b, block.fc2_w, block.fc2_b):
            p.data[...] = 0.0
        z = np.random.default_rng(0).normal(size=(49, 12))
        out, _ = M.block_forward(z, block, m.table)
        ref = gather_oracle(z, block.attn, m.grid)
        return np.max(np.abs(out.data[m.grid.interior()] - ref))

    def test_error_shrinks_like_softmax_leakage(self):
        # off-center mass is ~4 exp(-alpha); the gap to the gather must follow it down
        errs = [self._error(a) for a in (5.0, 10.0, 15.0, 20.0)]
        assert all(b < a for a, b in zip(errs, errs[1:]))
        for alpha, e in zip((5.0, 10.0, 15.0, 20.0), errs):
            assert e < 4 * np.exp(-alpha)
        assert errs[-1] < 1e-6


def test_checkpoint_round_trip(tmp_path):
    m = M.ConViT(micro_config(), seed=2)
    randomize(m, 9)
    M.save_checkpoint(m, tmp_path, step=7)
    loaded, manifest = M.load_checkpoint(tmp_path)
    assert manifest["step"] == 7
    img = np.random.default_rng(0).normal(size=(1, 4, 4))
    assert np.array_equal(loaded(img).data, m(img).data)


def test_param_roles_cover_all_groups():
    roles = {M.param_role(n) for n in M.ConViT(micro_config()).parameters()}
    assert roles == {"W_qry", "W_key", "W_val", "W_out", "v_pos", "lambda", "FFN", "LN", "embed", "head"}
