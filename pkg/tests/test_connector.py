import numpy as np
import pytest

from multicond import connector as cn
from multicond import numerics as nm
from multicond.numerics import RngState, Tensor

TINY = cn.ConnectorConfig(
    n_tokens=4, d_model=8, n_heads=2, d_time=4, depth=2,
    d_cond={cn.TEXT_MODALITY: 6, cn.EXTRA_MODALITY: 5},
)


def make_text_stream(rng, cfg=TINY, n=3):
    return cn.ConditionStream(cn.TEXT_MODALITY, rng.normal((n, cfg.d_cond[cn.TEXT_MODALITY])))


def make_modal_stream(rng, cfg=TINY, n=3):
    return cn.ConditionStream(cn.EXTRA_MODALITY, rng.normal((n, cfg.d_cond[cn.EXTRA_MODALITY])))


def randomize_block(params, rng, scale=0.3):
    """Overwrite every tensor in a params dataclass tree with random values."""
    for name, value in vars(params).items():
        if isinstance(value, Tensor):
            value.data = np.asarray(scale * rng.normal(value.data.shape))
        elif isinstance(value, (cn.AdaLNParams, cn.GateParams)):
            randomize_block(value, rng, scale)


class TestTimeEmbed:
    def test_t_zero(self):
        v = cn.time_embed(0, 8).vector.data[0]
        assert np.array_equal(v[0::2], np.zeros(4))
        assert np.array_equal(v[1::2], np.ones(4))

    def test_t_zero_vs_one_differ_in_first_sin_slot(self):
        v0 = cn.time_embed(0, 8).vector.data[0]
        v1 = cn.time_embed(1, 8).vector.data[0]
        assert v0[0] != v1[0]

    def test_pure_function(self):
        a = cn.time_embed(17, 12).vector.data
        b = cn.time_embed(17, 12).vector.data
        assert np.array_equal(a, b)

    def test_odd_width_rejected(self):
        with pytest.raises(cn.ConnectorError):
            cn.time_embed(3, 7)


class TestAdaLN:
    def test_zero_init_equals_layer_norm(self):
        rng = RngState(1)
        p = cn.init_adaln(TINY, rng)
        x = Tensor(rng.normal((4, TINY.d_model)))
        te = cn.time_embed(5, TINY.d_time)
        got = cn.adaln(x, te, p).data
        assert np.array_equal(got, nm.layer_norm(x).data)

    def test_constant_shift(self):
        rng = RngState(2)
        p = cn.init_adaln(TINY, rng)
        p.b_shift.data = np.full(TINY.d_model, 0.7)
        x = Tensor(rng.normal((4, TINY.d_model)))
        te = cn.time_embed(5, TINY.d_time)
        got = cn.adaln(x, te, p).data
        assert np.allclose(got, nm.layer_norm(x).data + 0.7, atol=1e-15)

    def test_gradients_match_finite_differences(self):
        rng = RngState(3)
        p = cn.init_adaln(TINY, rng)
        randomize_block(p, rng)
        x_data = rng.normal((3, TINY.d_model))
        te = cn.time_embed(2, TINY.d_time)
        params = {
            "x": Tensor(x_data, requires_grad=True),
            "w_hidden": p.w_hidden, "b_hidden": p.b_hidden,
            "w_scale": p.w_scale, "b_scale": p.b_scale,
            "w_shift": p.w_shift, "b_shift": p.b_shift,
        }

        def loss(q):
            ada = cn.AdaLNParams(q["w_hidden"], q["b_hidden"], q["w_scale"],
                                 q["b_scale"], q["w_shift"], q["b_shift"])
            out = cn.adaln(q["x"], te, ada)
            return nm.mean(out * out)

        assert nm.grad_check(loss, params).max_rel_err < 1e-4


class TestTimeAwareAttn:
    def test_single_key_equals_projected_value(self):
        # With the output projection set to identity, the block returns the
        # attention read itself; a single key/value makes it that value row.
        rng = RngState(4)
        p = cn.init_attn(TINY, cn.EXTRA_MODALITY, rng)
        randomize_block(p, rng)
        p.wo.data = np.eye(TINY.d_model)
        p.bo.data = np.zeros(TINY.d_model)
        stream = make_modal_stream(rng, n=1)
        latents = Tensor(rng.normal((TINY.n_tokens, TINY.d_model)))
        te = cn.time_embed(1, TINY.d_time)
        got = cn.time_aware_attn(latents, stream, te, p, TINY.n_heads).data
        kv = stream.tokens.data @ p.w_in.data + p.b_in.data
        v = kv @ p.wv.data + p.bv.data
        for row in got:
            assert np.allclose(row, v[0], atol=1e-12)

    def test_zero_output_projection_returns_zeros(self):
        rng = RngState(5)
        p = cn.init_attn(TINY, cn.TEXT_MODALITY, rng)
        latents = Tensor(rng.normal((TINY.n_tokens, TINY.d_model)))
        got = cn.time_aware_attn(
            latents, make_text_stream(rng), cn.time_embed(0, TINY.d_time), p, TINY.n_heads
        ).data
        assert np.array_equal(got, np.zeros_like(got))

    def test_against_primitive_composition(self):
        cfg = cn.ConnectorConfig(
            n_tokens=2, d_model=8, n_heads=2, d_time=4, depth=1,
            d_cond={cn.TEXT_MODALITY: 6, cn.EXTRA_MODALITY: 5},
        )
        rng = RngState(6)
        p = cn.init_attn(cfg, cn.TEXT_MODALITY, rng)
        randomize_block(p, rng)
        latents = Tensor(rng.normal((2, 8)))
        stream = make_text_stream(rng, cfg, n=4)
        te = cn.time_embed(3, cfg.d_time)
        got = cn.time_aware_attn(latents, stream, te, p, cfg.n_heads).data

        x = cn.adaln(latents, te, p.adaln).data
        q = x @ p.wq.data + p.bq.data
        kv = stream.tokens.data @ p.w_in.data + p.b_in.data
        k = kv @ p.wk.data
        v = kv @ p.wv.data + p.bv.data
        dh = 8 // 2
        merged = np.zeros_like(q)
        for h in range(2):
            qs, ks, vs = (m[:, h * dh:(h + 1) * dh] for m in (q, k, v))
            expect_h = nm.scaled_dot_attention(
                Tensor(qs[None]), Tensor(ks[None]), Tensor(vs[None])
            ).data[0]
            merged[:, h * dh:(h + 1) * dh] = expect_h
        expect = merged @ p.wo.data + p.bo.data
        assert np.max(np.abs(got - expect)) < 1e-12

    def test_wrong_modality_rejected(self):
        rng = RngState(7)
        p = cn.init_attn(TINY, cn.TEXT_MODALITY, rng)
        latents = Tensor(rng.normal((TINY.n_tokens, TINY.d_model)))
        with pytest.raises(cn.ConnectorError):
            cn.time_aware_attn(
                latents, make_modal_stream(rng), cn.time_embed(0, TINY.d_time), p, TINY.n_heads
            )


class TestTimeAwareFFN:
    def test_zero_second_layer_returns_zeros(self):
        rng = RngState(8)
        p = cn.init_ffn(TINY, rng)
        latents = Tensor(rng.normal((TINY.n_tokens, TINY.d_model)))
        got = cn.time_aware_ffn(latents, cn.time_embed(1, TINY.d_time), p).data
        assert np.array_equal(got, np.zeros_like(got))

    @pytest.mark.parametrize("n_tokens", [1, 4, 16])
    def test_output_shape(self, n_tokens):
        rng = RngState(9)
        p = cn.init_ffn(TINY, rng)
        randomize_block(p, rng)
        latents = Tensor(rng.normal((n_tokens, TINY.d_model)))
        got = cn.time_aware_ffn(latents, cn.time_embed(2, TINY.d_time), p)
        assert got.data.shape == (n_tokens, TINY.d_model)

    def test_gradients_match_finite_differences(self):
        rng = RngState(10)
        p = cn.init_ffn(TINY, rng)
        randomize_block(p, rng)
        te = cn.time_embed(2, TINY.d_time)
        x = rng.normal((2, TINY.d_model))
        params = {"w1": p.w1, "b1": p.b1, "w2": p.w2, "b2": p.b2}

        def loss(q):
            ffn = cn.FFNParams(adaln=p.adaln, w1=q["w1"], b1=q["b1"], w2=q["w2"], b2=q["b2"])
            out = cn.time_aware_ffn(Tensor(x), te, ffn)
            return nm.mean(out * out)

        assert nm.grad_check(loss, params).max_rel_err < 1e-4


class TestResamplerBlock:
    def test_zero_init_is_identity(self):
        rng = RngState(11)
        block = cn.init_resampler_block(TINY, rng)
        latents = Tensor(rng.normal((TINY.n_tokens, TINY.d_model)))
        got = cn.pr_block(latents, make_text_stream(rng), cn.time_embed(0, TINY.d_time),
                          block, TINY.n_heads)
        assert np.array_equal(got.data, latents.data)

    def test_random_init_changes_latents(self):
        rng = RngState(12)
        block = cn.init_resampler_block(TINY, rng)
        randomize_block(block.attn, rng)
        randomize_block(block.ffn, rng)
        latents = Tensor(rng.normal((TINY.n_tokens, TINY.d_model)))
        got = cn.pr_block(latents, make_text_stream(rng), cn.time_embed(1, TINY.d_time),
                          block, TINY.n_heads)
        assert np.max(np.abs(got.data - latents.data)) > 0.0

    def test_gradient_flows_to_text_tokens(self):
        rng = RngState(13)
        block = cn.init_resampler_block(TINY, rng)
        randomize_block(block.attn, rng)
        randomize_block(block.ffn, rng)
        latents = Tensor(rng.normal((TINY.n_tokens, TINY.d_model)))
        te = cn.time_embed(1, TINY.d_time)
        params = {"tokens": Tensor(rng.normal((3, TINY.d_cond[cn.TEXT_MODALITY])),
                                   requires_grad=True)}

        def loss(q):
            stream = cn.ConditionStream(cn.TEXT_MODALITY, q["tokens"])
            out = cn.pr_block(latents, stream, te, block, TINY.n_heads)
            return nm.mean(out * out)

        report = nm.grad_check(loss, params)
        assert report.max_rel_err < 1e-4
        assert np.max(np.abs(params["tokens"].grad)) > 0.0

    def test_wrong_modality_tag(self):
        rng = RngState(14)
        block = cn.init_resampler_block(TINY, rng)
        latents = Tensor(rng.normal((TINY.n_tokens, TINY.d_model)))
        with pytest.raises(cn.ConnectorError):
            cn.pr_block(latents, make_modal_stream(rng), cn.time_embed(0, TINY.d_time),
                        block, TINY.n_heads)


def build_random_gated_block(rng, cfg=TINY):
    block = cn.init_gated_block(cfg, rng)
    for part in (block.attn, block.ffn):
        randomize_block(part, rng)
    block.gates.sep_attn_w.data = np.asarray(0.5 * rng.normal((cfg.d_model, 1)))
    block.gates.sep_ffn_w.data = np.asarray(0.5 * rng.normal((cfg.d_model, 1)))
    return block


class TestGatedBlock:
    def test_zero_global_gates_identity(self):
        rng = RngState(15)
        block = build_random_gated_block(rng)
        latents = Tensor(rng.normal((TINY.n_tokens, TINY.d_model)))
        out, record = cn.agpr_block(latents, make_modal_stream(rng),
                                    cn.time_embed(3, TINY.d_time), block, TINY.n_heads)
        assert np.array_equal(out.data, latents.data)
        assert np.array_equal(record.token_gates_attn, np.zeros(TINY.n_tokens))
        assert np.array_equal(record.token_gates_ffn, np.zeros(TINY.n_tokens))

    def test_zero_gate_scale_identity(self):
        rng = RngState(16)
        block = build_random_gated_block(rng)
        block.gates.gate_scale = 0.0
        block.gates.global_attn_gate.data = np.asarray(1.3)
        block.gates.global_ffn_gate.data = np.asarray(-0.7)
        latents = Tensor(rng.normal((TINY.n_tokens, TINY.d_model)))
        out, _ = cn.agpr_block(latents, make_modal_stream(rng),
                               cn.time_embed(3, TINY.d_time), block, TINY.n_heads)
        assert np.array_equal(out.data, latents.data)

    def test_scale_gate_product_invariance(self):
        rng = RngState(17)
        block = build_random_gated_block(rng)
        block.gates.global_attn_gate.data = np.asarray(0.8)
        block.gates.global_ffn_gate.data = np.asarray(-0.4)
        latents = Tensor(rng.normal((TINY.n_tokens, TINY.d_model)))
        stream = make_modal_stream(rng)
        te = cn.time_embed(2, TINY.d_time)
        out1, _ = cn.agpr_block(latents, stream, te, block, TINY.n_heads)

        block.gates.gate_scale *= 2.0
        block.gates.global_attn_gate.data = np.asarray(0.4)
        block.gates.global_ffn_gate.data = np.asarray(-0.2)
        out2, _ = cn.agpr_block(latents, stream, te, block, TINY.n_heads)
        assert np.array_equal(out1.data, out2.data)


class TestConnectorForward:
    def build(self, rng, cfg=TINY, randomize=False):
        params = cn.init_connector(cfg, rng)
        branch_blocks = [cn.init_gated_block(cfg, rng) for _ in range(cfg.depth)]
        if randomize:
            for block in params.blocks:
                randomize_block(block.attn, rng)
                randomize_block(block.ffn, rng)
            for block in branch_blocks:
                randomize_block(block.attn, rng)
                randomize_block(block.ffn, rng)
        return params, branch_blocks

    def test_empty_branches_matches_text_only_stack(self):
        rng = RngState(18)
        params, _ = self.build(rng, randomize=True)
        text = make_text_stream(rng)
        te = cn.time_embed(4, TINY.d_time)
        out, records = cn.connector_forward(TINY, params, text, [], te)
        manual = params.latents
        for block in params.blocks:
            manual = cn.pr_block(manual, text, te, block, TINY.n_heads)
        assert np.array_equal(out.data, manual.data)
        assert records == []

    def test_zero_gate_branch_equals_empty(self):
        rng = RngState(19)
        params, blocks = self.build(rng, randomize=True)
        text = make_text_stream(rng)
        stream = make_modal_stream(rng)
        te = cn.time_embed(4, TINY.d_time)
        out_empty, _ = cn.connector_forward(TINY, params, text, [], te)
        branch = cn.BranchInput(blocks=blocks, stream=stream)
        out_gated, _ = cn.connector_forward(TINY, params, text, [branch], te)
        assert np.array_equal(out_empty.data, out_gated.data)

    def test_init_identity_returns_latents(self):
        rng = RngState(20)
        params, blocks = self.build(rng, randomize=False)
        out, _ = cn.connector_forward(
            TINY, params, make_text_stream(rng),
            [cn.BranchInput(blocks=blocks, stream=make_modal_stream(rng))],
            cn.time_embed(0, TINY.d_time),
        )
        assert np.array_equal(out.data, params.latents.data)

    def test_gate_records_shape(self):
        rng = RngState(21)
        params, blocks = self.build(rng, randomize=True)
        for block in blocks:
            block.gates.global_attn_gate.data = np.asarray(0.3)
            block.gates.global_ffn_gate.data = np.asarray(0.2)
        branch = cn.BranchInput(blocks=blocks, stream=make_modal_stream(rng))
        _, records = cn.connector_forward(
            TINY, params, make_text_stream(rng), [branch],
            cn.time_embed(2, TINY.d_time), record_gates=True,
        )
        assert len(records) == 1
        assert len(records[0]) == TINY.depth
        for level, rec in enumerate(records[0]):
            assert rec.layer_index == level
            assert rec.token_gates_attn.shape == (TINY.n_tokens,)
            assert rec.token_gates_ffn.shape == (TINY.n_tokens,)

    def test_kv_pair_permutation_invariance(self):
        rng = RngState(22)
        params, _ = self.build(rng, randomize=True)
        tokens = rng.normal((5, TINY.d_cond[cn.TEXT_MODALITY]))
        te = cn.time_embed(3, TINY.d_time)
        out1, _ = cn.connector_forward(
            TINY, params, cn.ConditionStream(cn.TEXT_MODALITY, tokens), [], te
        )
        perm = [4, 2, 0, 3, 1]
        out2, _ = cn.connector_forward(
            TINY, params, cn.ConditionStream(cn.TEXT_MODALITY, tokens[perm]), [], te
        )
        assert np.max(np.abs(out1.data - out2.data)) < 1e-12

    def test_depth_mismatch_rejected(self):
        rng = RngState(23)
        params, blocks = self.build(rng)
        with pytest.raises(cn.ConnectorError):
            cn.connector_forward(
                TINY, params, make_text_stream(rng),
                [cn.BranchInput(blocks=blocks[:1], stream=make_modal_stream(rng))],
                cn.time_embed(0, TINY.d_time),
            )

    def test_end_to_end_gradients(self):
        # The K=4, d_model=16 configuration pinned by the verification harness.
        cfg = cn.ConnectorConfig(
            n_tokens=4, d_model=16, n_heads=2, d_time=4, depth=2,
            d_cond={cn.TEXT_MODALITY: 4, cn.EXTRA_MODALITY: 4},
        )
        rng = RngState(24)
        params = cn.init_connector(cfg, rng)
        blocks = [cn.init_gated_block(cfg, rng) for _ in range(cfg.depth)]
        text = make_text_stream(rng, cfg, n=2)
        stream = make_modal_stream(rng, cfg, n=2)
        te = cn.time_embed(2, cfg.d_time)

        check = {"latents": params.latents}
        for lvl, block in enumerate(params.blocks):
            check[f"t{lvl}.wq"] = block.attn.wq
            check[f"t{lvl}.wo"] = block.attn.wo
            check[f"t{lvl}.w2"] = block.ffn.w2
            check[f"t{lvl}.w_scale"] = block.attn.adaln.w_scale
        for lvl, block in enumerate(blocks):
            check[f"b{lvl}.A"] = block.gates.global_attn_gate
            check[f"b{lvl}.F"] = block.gates.global_ffn_gate
            check[f"b{lvl}.sw"] = block.gates.sep_attn_w
            check[f"b{lvl}.wo"] = block.attn.wo
        fill = RngState(25)
        for t in check.values():
            t.data = np.asarray(0.3 * fill.normal(t.data.shape))

        def loss(q):
            out, _ = cn.connector_forward(
                cfg, params, text, [cn.BranchInput(blocks=blocks, stream=stream)], te
            )
            return 1e-3 * nm.mean(out * out)

        assert nm.grad_check(loss, check).max_rel_err < 1e-4
