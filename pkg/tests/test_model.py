import pytest
import torch
import torch.nn as nn
from torch.func import functional_call

from rsjoint.config import EncoderSpec
from rsjoint.errors import ConfigurationError, NumericError, ShapeMismatchError
from rsjoint.model import (
    Backbone,
    assert_congruent,
    forward_pooled,
    forward_stages,
    init_encoder,
    parameter_count,
    predict_logits,
    project,
    shape_manifest,
    shuffled_forward,
)


def batch(n: int, size: int = 8, seed: int = 0, dtype: torch.dtype = torch.float32) -> torch.Tensor:
    return torch.randn(n, 3, size, size, generator=torch.Generator().manual_seed(seed), dtype=dtype)


def test_teacher_starts_bitwise_equal_to_student(tiny_spec):
    bundle = init_encoder(tiny_spec, seed=3)
    student_state = bundle.student.state_dict()
    for name, tensor in bundle.teacher.state_dict().items():
        assert torch.equal(tensor, student_state[name]), name
    assert all(not p.requires_grad for p in bundle.teacher.parameters())
    bundle.assert_congruent()


def test_init_is_seeded(tiny_spec):
    a, b = init_encoder(tiny_spec, seed=5), init_encoder(tiny_spec, seed=5)
    c = init_encoder(tiny_spec, seed=6)
    wa, wb, wc = (x.student.backbone.stem[0].weight for x in (a, b, c))
    assert torch.equal(wa, wb)
    assert not torch.equal(wa, wc)


def test_predictor_bias_starts_at_zero(tiny_spec):
    bundle = init_encoder(tiny_spec, seed=0)
    assert torch.count_nonzero(bundle.student.predictor.bias) == 0


def test_desk_pooled_feature_matches_last_stage_width():
    spec = EncoderSpec.desk()
    bundle = init_encoder(spec, seed=0)
    pooled = forward_pooled(bundle.student.backbone, batch(2, 32), "eval")
    assert pooled.shape == (2, spec.stage_widths[-1])


def test_full_scale_parameter_count():
    spec = EncoderSpec.resnet50()
    with torch.device("meta"):
        backbone = Backbone(spec)
        classifier = nn.Linear(spec.feature_dim, 1000)
    total = parameter_count(backbone) + parameter_count(classifier)
    assert abs(total - 25.6e6) / 25.6e6 < 0.02


def test_shape_manifest_matches_real_module(tiny_spec):
    bundle = init_encoder(tiny_spec, seed=0)
    real = {k: tuple(v.shape) for k, v in bundle.student.state_dict().items()}
    assert shape_manifest(tiny_spec) == real


def test_zero_input_eval_mode_is_finite(tiny_spec):
    backbone = init_encoder(tiny_spec, seed=0).student.backbone
    out = forward_pooled(backbone, torch.zeros(2, 3, 8, 8), "eval")
    assert torch.isfinite(out).all()


def test_eval_forward_is_deterministic_and_row_independent(tiny_spec):
    backbone = init_encoder(tiny_spec, seed=0).student.backbone
    x = batch(4)
    first = forward_pooled(backbone, x, "eval")
    assert torch.equal(first, forward_pooled(backbone, x, "eval"))

    duplicated = torch.cat([x, x[1:2]])
    out = forward_pooled(backbone, duplicated, "eval")
    assert torch.allclose(out[4], out[1], atol=1e-6)

    perm = torch.tensor([2, 0, 3, 1])
    assert torch.allclose(forward_pooled(backbone, x[perm], "eval"), first[perm], atol=1e-6)


def test_forward_stages_shapes_and_pooling():
    spec = EncoderSpec.desk()
    backbone = init_encoder(spec, seed=0).student.backbone
    x = batch(2, 32)
    stages = forward_stages(backbone, x, "eval")
    assert len(stages) == len(spec.stage_widths)
    for previous, current in zip(stages, stages[1:]):
        assert current.shape[-1] * 2 == previous.shape[-1]
        assert current.shape[-2] * 2 == previous.shape[-2]
    assert torch.equal(stages[-1].mean(dim=(2, 3)), forward_pooled(backbone, x, "eval"))


def test_nan_input_raises_numeric_error_with_layer(tiny_spec):
    backbone = init_encoder(tiny_spec, seed=0).student.backbone
    x = batch(2)
    x[0, 0, 0, 0] = float("nan")
    with pytest.raises(NumericError) as excinfo:
        forward_pooled(backbone, x, "eval")
    assert excinfo.value.layer == "stem"


def test_projection_rows_are_unit_norm(tiny_spec):
    student = init_encoder(tiny_spec, seed=0).student
    pooled = torch.randn(5, tiny_spec.feature_dim)
    for scale in (1.0, 1e-3, 1e3):
        z = project(student.projector, pooled * scale)
        assert torch.isfinite(z).all()
        assert torch.allclose(z.norm(dim=1), torch.ones(5), atol=1e-6)


def test_projection_of_zero_input_is_deterministic(tiny_spec):
    student = init_encoder(tiny_spec, seed=0).student
    zero = torch.zeros(2, tiny_spec.feature_dim)
    first = project(student.projector, zero)
    assert torch.isfinite(first).all()
    assert torch.equal(first, project(student.projector, zero))


def test_predictor_is_affine(tiny_spec):
    predictor = init_encoder(tiny_spec, seed=0).student.predictor
    with torch.no_grad():
        predictor.bias.copy_(torch.tensor([0.1, -0.2, 0.3]))
        a, b = torch.randn(4, tiny_spec.feature_dim), torch.randn(4, tiny_spec.feature_dim)
        assert predict_logits(predictor, a).shape == (4, tiny_spec.n_classes)
        assert torch.allclose(predict_logits(predictor, torch.zeros(1, tiny_spec.feature_dim))[0], predictor.bias)
        combined = predict_logits(predictor, a) + predict_logits(predictor, b) - predictor.bias
        assert torch.allclose(predict_logits(predictor, a + b), combined, atol=1e-5)


# --------------------------------------------------------------------------
# Shuffling BN
# --------------------------------------------------------------------------


def test_shuffled_forward_with_one_group_and_identity_equals_plain_forward(tiny_spec):
    backbone = init_encoder(tiny_spec, seed=0).student.backbone
    x = batch(8)
    shuffled = shuffled_forward(backbone, x, 1, permutation=torch.arange(8), mode="train")
    plain = forward_pooled(backbone, x, "train")
    assert torch.equal(shuffled, plain)


def test_shuffled_forward_eval_mode_matches_unshuffled(tiny_spec):
    backbone = init_encoder(tiny_spec, seed=0).student.backbone
    x = batch(8)
    plain = forward_pooled(backbone, x, "eval")
    for seed in range(5):
        g = torch.Generator().manual_seed(seed)
        assert torch.equal(shuffled_forward(backbone, x, 4, generator=g, mode="eval"), plain)


@pytest.mark.parametrize("groups", [2, 4])
def test_shuffled_forward_restores_row_provenance(groups):
    tags = torch.arange(16, dtype=torch.float32).view(16, 1)
    group_sizes = []

    def stub(x: torch.Tensor) -> torch.Tensor:
        group_sizes.append(x.shape[0])
        return x * 1.0

    for seed in range(10):
        g = torch.Generator().manual_seed(seed)
        assert torch.equal(shuffled_forward(stub, tags, groups, generator=g), tags)
    assert set(group_sizes) == {16 // groups}


def test_shuffled_forward_uses_group_statistics(tiny_spec):
    backbone = init_encoder(tiny_spec, seed=0).student.backbone
    x = batch(8)
    grouped = shuffled_forward(backbone, x, 2, permutation=torch.arange(8))
    assert torch.equal(grouped[:4], forward_pooled(backbone, x[:4], "train"))
    assert not torch.allclose(grouped, forward_pooled(backbone, x, "train"))


def test_shuffled_forward_rejects_non_dividing_groups(tiny_spec):
    backbone = init_encoder(tiny_spec, seed=0).student.backbone
    with pytest.raises(ConfigurationError):
        shuffled_forward(backbone, batch(6), 4)


def test_congruence_check_names_tensor():
    with pytest.raises(ShapeMismatchError) as excinfo:
        assert_congruent(nn.Linear(2, 3), nn.Linear(2, 4))
    assert excinfo.value.name == "weight"


def test_backbone_gradients_match_finite_differences():
    spec = EncoderSpec(stage_widths=[4, 4], blocks_per_stage=[1, 1], stem_width=4, input_size=8, bn_groups=2)
    backbone = init_encoder(spec, seed=0).student.backbone.double()
    backbone.train()
    x = batch(4, dtype=torch.float64)
    names = [n for n, _ in backbone.named_parameters()]
    params = tuple(p.detach().clone().requires_grad_(True) for p in backbone.parameters())

    def loss(*values: torch.Tensor) -> torch.Tensor:
        pooled = functional_call(backbone, dict(zip(names, values)), (x,))
        return (pooled * torch.linspace(-1.0, 1.0, pooled.shape[1], dtype=torch.float64)).pow(2).sum()

    # gradcheck defaults: a 1e-4 step crosses ReLU kinks, see DESIGN.md
    assert torch.autograd.gradcheck(loss, params)
