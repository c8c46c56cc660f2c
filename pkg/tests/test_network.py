import numpy as np
import pytest
import torch

from dcp.config import ModelConfig
from dcp.errors import ConfigError, ValidationError
from dcp.matching import cosine_activation
from dcp.network import build_model, cosine_map, divide_regions, forward_episode, hard_mask, masked_pool
from dcp.pooling import masked_average_pool


def _inputs(b=2, k=1, size=64, seed=0):
    g = torch.Generator().manual_seed(seed)
    s_img = torch.randn(b, k, 3, size, size, generator=g)
    s_msk = (torch.rand(b, k, size, size, generator=g) > 0.5).float()
    q_img = torch.randn(b, 3, size, size, generator=g)
    return s_img, s_msk, q_img


def test_toy_shapes(toy_config):
    model = build_model(toy_config)
    out = model(*_inputs(b=2, k=3), details=True)
    assert out.logits.shape == (2, 2, 8, 8)
    assert out.logits_full.shape == (2, 2, 64, 64)
    assert out.support_aux_logits.shape == (2, 3, 2, 8, 8)
    assert out.query_aux_logits.shape == (2, 2, 8, 8)
    assert out.mask.dtype == torch.int64
    assert set(out.mask.unique().tolist()) <= {0, 1}
    blocks = model.extract_features(_inputs()[2]).blocks
    assert blocks[-1].shape[-2:] == (8, 8)


def test_wrong_image_size_rejected(toy_config):
    model = build_model(toy_config)
    s, m, q = _inputs(size=32)
    with pytest.raises(ValidationError):
        model(s, m, q)


def test_same_seed_same_output(toy_config):
    a = build_model(toy_config, seed=5)(*_inputs())
    b = build_model(toy_config, seed=5)(*_inputs())
    assert torch.equal(a.logits, b.logits)


def test_zero_image_is_finite(toy_config):
    model = build_model(toy_config)
    s, m, q = _inputs()
    out = model(torch.zeros_like(s), m, torch.zeros_like(q))
    assert torch.isfinite(out.logits).all()


def test_empty_support_mask_is_finite(toy_config):
    model = build_model(toy_config)
    s, m, q = _inputs()
    out = model(s, torch.zeros_like(m), q, details=True)
    assert torch.isfinite(out.logits).all()
    assert not out.details["valid"]["f"].any()


def test_argmax_ties_go_to_background():
    logits = torch.tensor([[[[0.3, 0.3]], [[0.3, 0.4]]]])
    assert hard_mask(logits).tolist() == [[[0.0, 1.0]]]


def test_regions_partition_gt(toy_config):
    model = build_model(toy_config)
    out = model(*_inputs(b=3, k=2), details=True)
    d = out.details
    r = d["regions"]
    gt = d["support_gt"]
    assert torch.equal(r["alpha"] + r["beta"], gt)
    assert torch.equal(r["gamma"] + r["delta"], 1 - gt)
    assert torch.equal(r["alpha"] + r["beta"] + r["gamma"] + r["delta"], torch.ones_like(gt))
    for v in r.values():
        assert set(v.unique().tolist()) <= {0.0, 1.0}


def test_pds_branches_are_isolated(toy_config):
    """Changing only the background prototype leaves the foreground logit untouched."""
    model = build_model(toy_config)
    s, m, q = _inputs()
    captured = {}
    orig = model.decoder_bg.forward

    def zeroed(x):
        captured["in"] = x
        return orig(torch.zeros_like(x))

    base = model(s, m, q).logits
    model.decoder_bg.forward = zeroed
    changed = model(s, m, q).logits
    assert captured["in"].shape[1] == 2 * toy_config.channels + 3
    assert torch.equal(base[:, 1], changed[:, 1])
    assert not torch.equal(base[:, 0], changed[:, 0])


def test_backbone_frozen(toy_config):
    model = build_model(toy_config)
    model.train()
    assert not model.backbone.training
    names = [n for n, _ in model.trainable_parameters()]
    assert names and not any(n.startswith("backbone.") for n in names)
    s, m, q = _inputs()
    out = model(s, m, q)
    (out.logits.sum() + out.support_aux_logits.sum() + out.query_aux_logits.sum()).backward()
    assert all(p.grad is None for p in model.backbone.parameters())


def test_torch_ops_match_numpy_kernels(rng):
    feats = rng.normal(size=(6, 5, 7))
    mask = (rng.random((5, 7)) < 0.4).astype(np.int64)
    mask[0, 0] = 1
    vec = masked_average_pool(feats, mask)
    tv, ok = masked_pool(torch.from_numpy(feats)[None], torch.from_numpy(mask).double()[None])
    assert bool(ok[0])
    np.testing.assert_allclose(tv[0].numpy(), vec.values, atol=1e-12)
    query = rng.normal(size=(6, 5, 7))
    query[:, 2, 3] = 0.0
    ref = cosine_activation(query, vec).values
    got = cosine_map(torch.from_numpy(query)[None], tv, ok)[0].numpy()
    np.testing.assert_allclose(got, ref, atol=1e-12)
    assert got[2, 3] == 0.0


def test_divide_regions_numeric():
    pred = torch.tensor([1.0, 0.0, 1.0, 0.0])
    gt = torch.tensor([1.0, 1.0, 0.0, 0.0])
    r = divide_regions(pred, gt)
    assert r["alpha"].tolist() == [1, 0, 0, 0]
    assert r["beta"].tolist() == [0, 1, 0, 0]
    assert r["gamma"].tolist() == [0, 0, 0, 1]
    assert r["delta"].tolist() == [0, 0, 1, 0]


ABLATIONS = [
    dict(enabled_guidance=("f",), use_pds=False),
    dict(enabled_guidance=("f", "b"), use_pds=False),
    dict(enabled_guidance=("f", "b"), use_pds=True),
    dict(enabled_guidance=("f", "b", "alpha", "beta"), use_pds=True),
    dict(enabled_guidance=("f", "b", "gamma", "delta"), use_pds=True),
    dict(use_pds=True),
    dict(use_pds=False, fusion_strategy="tile_concat"),
]


@pytest.mark.parametrize("overrides", ABLATIONS)
def test_ablation_configs_train_step(overrides):
    cfg = ModelConfig(backbone="toy", channels=8, aspp_rates=(1, 2), **overrides)
    model = build_model(cfg)
    out = model(*_inputs(k=2), details=True)
    loss = out.logits.square().mean() + out.support_aux_logits.square().mean()
    loss.backward()
    grads = [p.grad for _, p in model.trainable_parameters() if p.grad is not None]
    assert grads and all(torch.isfinite(g).all() for g in grads)
    for kind in ("f", "b", "alpha", "beta", "gamma", "delta"):
        if kind not in cfg.enabled_guidance:
            assert not out.details["valid"][kind].any()
            if cfg.fusion_strategy == "activation_map":
                assert torch.count_nonzero(out.details["maps"][kind]) == 0


def test_invalid_combinations_rejected():
    with pytest.raises(ConfigError):
        ModelConfig(fusion_strategy="tile_concat", use_pds=True)
    with pytest.raises(ConfigError):
        ModelConfig(use_pds=True, enabled_guidance=("f",))


def test_forward_episode(toy_config, sampler):
    model = build_model(toy_config)
    ep = sampler.sample("test", 1, 7)
    out = forward_episode(model, ep)
    assert out.mask.shape == (1, 64, 64)


def test_reference_large_parameter_count():
    from dcp.network import count_params

    n = count_params(ModelConfig(backbone="reference_large"))
    assert abs(n - 11.3e6) / 11.3e6 <= 0.15
