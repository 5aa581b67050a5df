import numpy as np
import pytest

from ditslim import model as M
from ditslim import tensor as tz
from ditslim.data import gen_condition, gen_latent_clip
from ditslim.errors import ContractError, ShapeError
from ditslim.model import DiTConfig, dit_forward, flow_matching_loss, forward_process, init_params
from ditslim.tensor import Tensor, grad_check, seeded_rng

TOY = DiTConfig(
    n_blocks=2,
    model_dim=16,
    sa_heads=2,
    ca_heads=2,
    head_dim=8,
    ffn_dim=32,
    temporal_slices=2,
    spatial_h=2,
    spatial_w=2,
    channels=4,
    cond_text_len=2,
    cond_dim=16,
    t_max=1000,
)


def toy_sample(seed=0, mode="t2v", config=TOY):
    clip = gen_latent_clip(seed, 0.6, config.temporal_slices, config.spatial_h, config.spatial_w, config.channels)
    cond = gen_condition(seed + 1, mode, config.cond_text_len, config.cond_dim, clip=clip)
    eps = seeded_rng(seed + 2).normal(size=clip.x0.shape)
    return clip, cond, eps


def perturbed_params(config=TOY, mode="t2v", seed=3, scale=0.05):
    """Params with every tensor nudged off init so no block is an identity.

    Accepts config positionally or by keyword; tests with bigger toy models
    pass their own."""
    params = init_params(config, mode, seed=seed)
    rng = seeded_rng(seed + 100)
    for _, t in params.named():
        t.data = t.data + rng.normal(scale=scale, size=t.data.shape)
    return params


class TestForwardProcess:
    def test_t_zero_is_data(self):
        x0 = np.array([1.0, 2.0])
        assert np.array_equal(forward_process(x0, np.array([5.0, 5.0]), 0, 1000), x0)

    def test_t_max_is_noise(self):
        eps = np.array([5.0, 5.0])
        assert np.array_equal(forward_process(np.array([1.0, 2.0]), eps, 1000, 1000), eps)

    def test_midpoint(self):
        assert forward_process(np.array(2.0), np.array(0.0), 500, 1000) == 1.0

    def test_out_of_range(self):
        with pytest.raises(ContractError):
            forward_process(np.zeros(2), np.zeros(2), 1001, 1000)


class TestDitForward:
    def test_identity_at_init(self):
        params = init_params(TOY, "t2v", seed=1)
        clip, cond, eps = toy_sample()
        v, taps = dit_forward(params, clip.x0, 321, cond, taps_requested=True)
        for i in range(TOY.n_blocks):
            assert np.array_equal(taps.hidden_pre[i].data, taps.hidden_post[i].data)
        # the whole network reduces to the input/output projections
        tokens = clip.x0.reshape(TOY.tokens, TOY.channels)
        direct = (tokens @ params.g1_w.data + params.g1_b.data) @ params.g2_w.data + params.g2_b.data
        assert np.allclose(v.data.reshape(TOY.tokens, TOY.channels), direct, atol=1e-12)

    def test_gates_forced_zero_gives_projection_pair(self):
        params = perturbed_params()
        for blk in params.blocks:
            blk.mod_w.data = np.zeros_like(blk.mod_w.data)
            blk.mod_b.data = np.zeros_like(blk.mod_b.data)
            for sp in blk.ca_streams.values():
                sp.wo.data = np.zeros_like(sp.wo.data)
        clip, cond, eps = toy_sample(7)
        v, _ = dit_forward(params, clip.x0, 10, cond)
        tokens = clip.x0.reshape(TOY.tokens, TOY.channels)
        direct = (tokens @ params.g1_w.data + params.g1_b.data) @ params.g2_w.data + params.g2_b.data
        assert np.allclose(v.data.reshape(TOY.tokens, TOY.channels), direct, atol=1e-12)

    def test_velocity_shape_matches_latent(self):
        params = perturbed_params()
        clip, cond, _ = toy_sample(2)
        v, _ = dit_forward(params, clip.x0, 555, cond)
        assert v.shape == clip.x0.shape

    def test_deterministic(self):
        params = perturbed_params()
        clip, cond, _ = toy_sample(3)
        a, _ = dit_forward(params, clip.x0, 77, cond)
        b, _ = dit_forward(params, clip.x0, 77, cond)
        assert a.data.tobytes() == b.data.tobytes()

    def test_attention_rows_sum_to_one(self):
        params = perturbed_params(mode="i2v")
        clip, cond, _ = toy_sample(4, mode="i2v")
        _, taps = dit_forward(params, clip.x0, 900, cond, taps_requested=True)
        for i in range(TOY.n_blocks):
            rows = taps.sa_attn[i].data.sum(axis=-1)
            assert np.abs(rows - 1.0).max() <= 1e-9
            for attn in taps.ca_attn[i].values():
                assert np.abs(attn.data.sum(axis=-1) - 1.0).max() <= 1e-9

    def test_shape_mismatch(self):
        params = perturbed_params()
        _, cond, _ = toy_sample(5)
        with pytest.raises(ShapeError):
            dit_forward(params, np.zeros((3, 2, 2, 4)), 10, cond)

    def test_rope_preserves_query_norms(self):
        cos, sin = M.rope_tables(TOY)
        q = Tensor(seeded_rng(6).normal(size=(2, TOY.tokens, TOY.head_dim)))
        q_rot = tz.rotate_pairs(q, cos, sin)
        assert np.abs(
            np.linalg.norm(q_rot.data, axis=-1) - np.linalg.norm(q.data, axis=-1)
        ).max() <= 1e-9


class TestFlowMatchingLoss:
    def test_oracle_velocity_gives_zero(self, monkeypatch):
        params = perturbed_params()
        clip, cond, eps = toy_sample(8)

        def oracle_forward(p, x_t, t, c, taps_requested=False, exec_counter=None):
            return Tensor(eps - clip.x0), None

        monkeypatch.setattr(M, "dit_forward", oracle_forward)
        loss = M.flow_matching_loss(params, [dict(x0=clip.x0, eps=eps, t=100, cond=cond)])
        assert loss.item() == 0.0

    def test_constant_offset_gives_one(self, monkeypatch):
        params = perturbed_params()
        clip, cond, eps = toy_sample(9)

        def offset_forward(p, x_t, t, c, taps_requested=False, exec_counter=None):
            return Tensor(eps - clip.x0 + 1.0), None

        monkeypatch.setattr(M, "dit_forward", offset_forward)
        loss = M.flow_matching_loss(params, [dict(x0=clip.x0, eps=eps, t=100, cond=cond)])
        assert abs(loss.item() - 1.0) <= 1e-12

    def test_empty_batch_rejected(self):
        with pytest.raises(ContractError):
            flow_matching_loss(perturbed_params(), [])

    def test_gradient_on_toy_config(self):
        from conftest import swapped_param

        params = perturbed_params(seed=10)
        clip, cond, eps = toy_sample(11)
        batch = [dict(x0=clip.x0, eps=eps, t=400, cond=cond)]
        checked = [
            ("sa.wq", params.blocks[0].sa, "wq"),
            ("w_up", params.blocks[1], "w_up"),
            ("norm_ffn", params.blocks[0], "norm_ffn"),
            ("g2_w", params, "g2_w"),
        ]
        for name, owner, attr in checked:
            f = swapped_param(owner, attr)(lambda: flow_matching_loss(params, batch))
            report = grad_check(f, Tensor(getattr(owner, attr).data.copy()), step=1e-5, tol=1e-3)
            assert report.passed, (name, report)


class TestResidualNorms:
    def test_identity_blocks_have_zero_residual(self):
        params = init_params(TOY, "t2v", seed=12)
        clip, cond, eps = toy_sample(13)
        batch = [dict(x0=clip.x0, eps=eps, cond=cond)]
        norms = M.block_residual_norms(params, batch, [0, 500, 1000])
        assert np.array_equal(norms, np.zeros_like(norms))

    def test_normalized_rows_span_unit_interval(self):
        params = perturbed_params(seed=14)
        clip, cond, eps = toy_sample(15)
        batch = [dict(x0=clip.x0, eps=eps, cond=cond)]
        norms = M.block_residual_norms(params, batch, [0, 250, 500, 750, 1000], normalize=True)
        for row in norms:
            if row.max() > row.min():
                assert row.min() == 0.0 and row.max() == 1.0


class TestCheckpointing:
    def test_save_load_round_trip(self, tmp_path):
        params = perturbed_params(mode="i2v", seed=16)
        path = tmp_path / "model.tarc"
        M.save_params(path, params, meta={"step": 3})
        loaded, meta = M.load_params(path)
        assert meta["step"] == 3
        for (na, ta), (nb, tb) in zip(params.named(), loaded.named()):
            assert na == nb
            assert ta.data.tobytes() == tb.data.tobytes()

    def test_grad_flows_through_mode_streams(self):
        params = perturbed_params(mode="i2v", seed=17)
        clip, cond, eps = toy_sample(18, mode="i2v")
        with tz.Tape() as tape:
            v, _ = dit_forward(params, clip.x0, 250, cond)
            grads = tape.backward(tz.mean_all(tz.mul(v, v)))
        assert params.blocks[0].ca_streams["image"].wq in grads
