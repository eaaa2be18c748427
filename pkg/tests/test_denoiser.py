import pytest
import torch

from denoiser import DualBranchDenoiser, mix_conditions
from exceptions import ContractError, ShapeError
from models.training import Branch, Phase
from numerics import OptimizerState, adamw_step, gradients, mse


def _inputs(batch: int = 2, size: int = 16, seed: int = 0):
    gen = torch.Generator().manual_seed(seed)
    image = torch.rand(batch, 3, size, size, generator=gen)
    masks = (torch.rand(batch, 1, size, size, generator=gen) > 0.5).float()
    z = torch.randn(batch, 3, size, size, generator=gen)
    t = torch.tensor([3, 7][:batch])
    return image, masks, z, t


def test_initial_shape_condition_is_zero(tiny_model):
    image, masks, _, _ = _inputs()
    bundle = tiny_model.encode_conditions(image, masks, [[0], [1, 2]])
    for level in bundle.c_l:
        assert torch.count_nonzero(level) == 0
    for level in bundle.c_i:
        assert torch.count_nonzero(level) == 0


def test_initial_prediction_ignores_the_mask(tiny_model):
    _, masks, z, t = _inputs()
    ids = [[0], [1]]
    with torch.no_grad():
        a = tiny_model.predict_noise(z, t, tiny_model.encode_conditions(None, masks, ids, Phase.SAMPLING))
        b = tiny_model.predict_noise(z, t, tiny_model.encode_conditions(None, 1 - masks, ids, Phase.SAMPLING))
    assert torch.equal(a.eps_s, b.eps_s)
    assert a.eps_m is None


def test_same_seed_same_weights(tiny_model_config):
    a = DualBranchDenoiser(tiny_model_config, seed=9)
    b = DualBranchDenoiser(tiny_model_config, seed=9)
    for (_, p), (_, q) in zip(a.named_parameters(), b.named_parameters()):
        assert torch.equal(p, q)


def test_both_branches_match_single_branch(tiny_model):
    image, masks, z, t = _inputs()
    with torch.no_grad():
        bundle = tiny_model.encode_conditions(image, masks, [[0], [2]])
        bundle = bundle.model_copy(update={"c_m": mix_conditions(bundle.c_i, bundle.c_l, 1, 4)})
        both = tiny_model.predict_noise(z, t, bundle, Branch.BOTH)
        shape_only = tiny_model.predict_noise(z, t, bundle, Branch.SHAPE)
        mix_only = tiny_model.predict_noise(z, t, bundle, Branch.MIX)
    assert torch.equal(both.eps_s, shape_only.eps_s)
    assert torch.equal(both.eps_m, mix_only.eps_m)
    assert both.eps_s.shape == z.shape


def test_parameter_groups_partition_the_model(tiny_model):
    groups = tiny_model.parameter_groups()
    assert set(groups) == {"shared_encoder", "shape_decoder", "mix_decoder", "condition_encoders", "embeddings"}
    seen = [id(p) for group in groups.values() for p in group.values()]
    assert len(seen) == len(set(seen))
    assert set(seen) == {id(p) for p in tiny_model.parameters()}


def test_sampling_view_shares_parameters_and_refuses_image_path(tiny_model):
    view = tiny_model.sampling_view()
    model_params = {id(p) for p in tiny_model.parameters()}
    view_params = view.trainable()
    assert {id(p) for p in view_params.values()} <= model_params
    assert not any(name.startswith(("mix_decoder", "image_encoder")) for name in view_params)

    image, masks, z, t = _inputs()
    with pytest.raises(ContractError):
        view.encode_conditions(image, masks, [[0], [1]])
    with pytest.raises(ContractError):
        view.encode_conditions(None, masks, [[0], [1]], Phase.TRAINING)
    bundle = view.encode_conditions(None, masks, [[0], [1]])
    with pytest.raises(ContractError):
        view.predict_noise(z, t, bundle, Branch.BOTH)
    with torch.no_grad():
        assert torch.equal(
            view.predict_noise(z, t, bundle).eps_s,
            tiny_model.predict_noise(z, t, bundle).eps_s,
        )


def test_condition_contracts(tiny_model):
    image, masks, z, t = _inputs()
    with pytest.raises(ContractError):
        tiny_model.encode_conditions(None, masks, [[0], [1]], Phase.TRAINING)
    with pytest.raises(ContractError):
        tiny_model.encode_conditions(image, masks, [[0], [1]], Phase.SAMPLING)
    with pytest.raises(ContractError):
        tiny_model.encode_conditions(image, masks, [[0], [5]])
    with pytest.raises(ShapeError):
        tiny_model.encode_conditions(image, masks[:, :, :15, :15], [[0], [1]])
    bundle = tiny_model.encode_conditions(image, masks, [[0], [1]])
    with pytest.raises(ContractError):
        tiny_model.predict_noise(z, t, bundle, Branch.MIX)


def test_empty_layout_has_zero_category_vector(tiny_model):
    c_t = tiny_model.embeddings.category_vector([[], [1]])
    assert torch.count_nonzero(c_t[0]) == 0
    assert torch.count_nonzero(c_t[1]) > 0


def test_mix_conditions_weights_and_stop_gradient():
    c_i = [torch.ones(1, 2, 4, 4, requires_grad=True)]
    c_l = [torch.full((1, 2, 4, 4), 3.0, requires_grad=True)]
    assert torch.equal(mix_conditions(c_i, c_l, 0, 4)[0], c_l[0].detach())
    assert torch.equal(mix_conditions(c_i, c_l, 4, 4)[0], torch.full((1, 2, 4, 4), 4.0))
    mixed = mix_conditions(c_i, c_l, 1, 4)[0]
    assert torch.allclose(mixed, torch.full((1, 2, 4, 4), 3.25))

    mixed.sum().backward()
    assert torch.allclose(c_i[0].grad, torch.full((1, 2, 4, 4), 0.25))
    assert c_l[0].grad is None


def test_mix_conditions_contracts():
    a = [torch.zeros(1, 2, 4, 4)]
    with pytest.raises(ContractError):
        mix_conditions(a, a, 5, 4)
    with pytest.raises(ContractError):
        mix_conditions(a, a, 0, 0)
    with pytest.raises(ShapeError):
        mix_conditions(a, [torch.zeros(1, 2, 2, 2)], 1, 4)


def test_shape_condition_becomes_nonzero_after_one_step(tiny_model):
    image, masks, z, t = _inputs()
    params = dict(tiny_model.named_parameters())
    optimizer = OptimizerState(params, lr=1e-3)
    bundle = tiny_model.encode_conditions(image, masks, [[0], [1]])
    eps = torch.randn(z.shape, generator=torch.Generator().manual_seed(4))
    loss = mse(tiny_model.predict_noise(z, t, bundle).eps_s, eps)
    adamw_step(params, gradients(loss, params), optimizer)
    with torch.no_grad():
        after = tiny_model.encode_conditions(image, masks, [[0], [1]])
    assert any(torch.count_nonzero(level) > 0 for level in after.c_l)


def test_shifted_mask_changes_the_prediction_after_one_step(tiny_model):
    image, masks, z, t = _inputs()
    shifted = torch.roll(masks, shifts=3, dims=-1)
    ids = [[0], [1]]
    params = dict(tiny_model.named_parameters())
    bundle = tiny_model.encode_conditions(image, masks, ids)
    eps = torch.randn(z.shape, generator=torch.Generator().manual_seed(4))
    loss = mse(tiny_model.predict_noise(z, t, bundle).eps_s, eps)
    adamw_step(params, gradients(loss, params), OptimizerState(params, lr=1e-3))

    view = tiny_model.sampling_view()
    with torch.no_grad():
        a_bundle = view.encode_conditions(None, masks, ids)
        b_bundle = view.encode_conditions(None, shifted, ids)
        a = view.predict_noise(z, t, a_bundle).eps_s
        b = view.predict_noise(z, t, b_bundle).eps_s
    assert any(not torch.equal(x, y) for x, y in zip(a_bundle.c_l, b_bundle.c_l))
    assert not torch.equal(a, b)
