"""Static counting conventions, the reference descriptor, and the cost model."""
import numpy as np
import pytest

from bagfuse.complexity import (
    B0_FEATURE_DIM,
    ComplexityReport,
    CostModel,
    adaptive_ensemble_complexity,
    count_layer,
    efficientnet_b0_descriptor,
    model_complexity,
    output_combination_complexity,
    pipeline_cost,
    voting_complexity,
    weak_learner_complexity,
)
from bagfuse.errors import ContractError, ShapeError
from bagfuse.model import (
    LayerSpec,
    ScalingConfig,
    build_scaled_cnn,
    strip_head_and_freeze,
    tiny_base_stack,
)


class TestCountLayer:
    def test_conv_hand_count(self):
        spec = LayerSpec("conv", 1, 1, kernel=3, stride=1, padding=1)
        params, flops = count_layer(spec, (1, 4, 4))
        assert params == 10  # 1*1*9 weights + 1 bias
        assert flops == 144  # 9 MACs per output over a 4x4 map

    def test_linear_matches_trainable_annotation(self):
        params, flops = count_layer(LayerSpec("linear", 2560, 37), (2560,))
        assert params == 94_757
        assert flops == 94_720

    def test_activation_element_count(self):
        params, flops = count_layer(LayerSpec("activation"), (8, 4, 4))
        assert params == 0
        assert flops == 128

    def test_depthwise_grouping(self):
        spec = LayerSpec("conv", 8, 8, kernel=3, stride=1, padding=1, groups=8)
        params, flops = count_layer(spec, (8, 4, 4))
        assert params == 8 * 9 + 8
        assert flops == 8 * 9 * 16

    def test_incompatible_shape(self):
        with pytest.raises(ShapeError):
            count_layer(LayerSpec("conv", 4, 8, kernel=3), (3, 8, 8))


class TestModelComplexity:
    def test_empty_stack_is_zero(self):
        report = model_complexity([], (3, 8, 8))
        assert report.params_total == 0
        assert report.flops_fwd == 0
        assert report.flops_update == 0

    def test_backward_equals_forward(self):
        report = model_complexity(tiny_base_stack(), (3, 32, 32))
        assert report.flops_back == report.flops_fwd

    def test_update_is_twenty_per_trainable_param(self):
        report = model_complexity(tiny_base_stack(), (3, 32, 32))
        assert report.flops_update == 20 * report.params_trainable

    def test_additive_over_concatenation(self):
        stack = tiny_base_stack()
        whole = model_complexity(stack, (3, 32, 32))
        head = model_complexity(stack[:2], (3, 32, 32))
        # propagate the shape to evaluate the tail where the head left off
        from bagfuse.complexity import _propagate
        from bagfuse.model import expand_stack

        shape = (3, 32, 32)
        for spec in expand_stack(stack[:2]):
            _, _, shape = _propagate(spec, shape)
        tail = model_complexity(stack[2:], shape)
        assert whole.params_total == head.params_total + tail.params_total
        assert whole.flops_fwd == head.flops_fwd + tail.flops_fwd

    def test_frozen_mask(self):
        from bagfuse.model import expand_stack

        stack = expand_stack(tiny_base_stack())
        mask = [True] * len(stack)
        report = model_complexity(stack, (3, 32, 32), frozen_mask=mask)
        assert report.params_trainable == 0
        assert report.flops_update == 0

    def test_frozen_mask_length_checked(self):
        with pytest.raises(ContractError):
            model_complexity(tiny_base_stack(), (3, 32, 32), frozen_mask=[True])

    def test_matches_runtime_parameter_count(self):
        model = build_scaled_cnn(tiny_base_stack(), ScalingConfig(phi=1.0), classes=5, input_size=32)
        report = weak_learner_complexity(model)
        assert report.params_total == model.parameter_count()


@pytest.fixture(scope="module")
def report():
    return model_complexity(efficientnet_b0_descriptor(), (3, 224, 224))


@pytest.fixture(scope="module")
def extractors():
    models = [
        build_scaled_cnn(tiny_base_stack(), ScalingConfig(), classes=4, input_size=32, seed=i)
        for i in range(2)
    ]
    return [strip_head_and_freeze(m) for m in models]


class TestB0Descriptor:
    def test_params_window(self, report):
        assert 5.0e6 <= report.params_total <= 5.6e6

    def test_forward_flops_window(self, report):
        assert 0.37e9 <= report.flops_fwd <= 0.42e9

    def test_final_feature_dim(self):
        specs = efficientnet_b0_descriptor()
        final_linear = [s for s in specs if s.kind == "linear" and not s.branch][-1]
        assert final_linear.in_channels == B0_FEATURE_DIM == 1280

    def test_never_instantiable_as_tiny_stack(self):
        # the descriptor is counting-only; depthwise groups are not buildable
        from bagfuse.errors import BuildError
        from bagfuse.model import layers_from_specs

        specs = [s for s in efficientnet_b0_descriptor() if s.kind == "linear"]
        with pytest.raises(BuildError):
            layers_from_specs(specs, np.random.default_rng(0))


class TestEnsembleComplexity:
    def test_adaptive_trainable_is_combination_only(self, extractors):
        report = adaptive_ensemble_complexity(extractors, classes=4)
        f_total = sum(ex.feature_dim for ex in extractors)
        assert report.params_trainable == 4 * f_total + 4
        singles = [weak_learner_complexity(ex) for ex in extractors]
        assert report.params_total == sum(s.params_total for s in singles) + report.params_trainable

    def test_voting_has_no_trainable_params(self, extractors):
        reports = [weak_learner_complexity(ex) for ex in extractors]
        vote = voting_complexity(reports)
        assert vote.params_trainable == 0
        assert vote.params_total == sum(r.params_total for r in reports)

    def test_output_combiner_size(self, extractors):
        reports = [weak_learner_complexity(ex) for ex in extractors]
        out = output_combination_complexity(reports, n=2, classes=4)
        assert out.params_trainable == 4 * (2 * 4) + 4


class TestCostModel:
    def test_parallel_reference_total(self):
        model = CostModel(f_fwd=0.39e9, f_back=0.39e9, p_params=5e6, f_upd=0.1e9)
        summary = pipeline_cost(model, parallel=True)
        assert summary.total == pytest.approx(1.27e9)
        assert 1.25e9 <= summary.total <= 1.30e9

    def test_update_defaults_to_twenty_per_param(self):
        model = CostModel(f_fwd=0.39e9, f_back=0.39e9, p_params=5e6)
        assert model.update_flops == pytest.approx(0.1e9)

    def test_serial_matches_formula_transcription(self):
        model = CostModel(f_fwd=1.0, f_back=1.0, p_params=1.0, f_upd=1.0,
                          a_end_to_end=1, b_fine_tune=1, n_learners=1, head_params=1.0)
        summary = pipeline_cost(model, parallel=False)
        # A*(fwd+back+upd) + B*(N*fwd + 2*head + 20*head)
        want = 1 * (1 + 1 + 1) + 1 * (1 * 1 + 2 * 1 + 20 * 1)
        assert summary.total == pytest.approx(want)
        assert summary.terms["end_to_end"] == pytest.approx(3.0)

    @pytest.mark.parametrize("seed", range(10))
    def test_parallel_never_exceeds_serial(self, seed):
        rng = np.random.default_rng(seed)
        model = CostModel(
            f_fwd=float(rng.uniform(0.1, 5.0)),
            f_back=float(rng.uniform(0.1, 5.0)),
            p_params=float(rng.uniform(1e3, 1e7)),
            a_end_to_end=int(rng.integers(1, 5)),
            b_fine_tune=int(rng.integers(1, 8)),
            n_learners=int(rng.integers(1, 6)),
            head_params=float(rng.uniform(10, 1e5)),
        )
        assert pipeline_cost(model, True).total <= pipeline_cost(model, False).total

    def test_validation(self):
        with pytest.raises(ContractError):
            CostModel(f_fwd=1.0, f_back=1.0, p_params=1.0, a_end_to_end=0)
        with pytest.raises(ContractError):
            CostModel(f_fwd=-1.0, f_back=1.0, p_params=1.0)


def test_report_invariants_enforced():
    with pytest.raises(ContractError):
        ComplexityReport(params_total=5, params_trainable=6, flops_fwd=0, flops_back=0, flops_update=0)
    with pytest.raises(ContractError):
        ComplexityReport(params_total=5, params_trainable=5, flops_fwd=-1, flops_back=0, flops_update=0)


def test_mac_reporting_factor():
    report = model_complexity(tiny_base_stack(), (3, 32, 32))
    doubled = report.scaled_flops(mac_factor=2)
    assert doubled["flops_fwd"] == 2 * report.flops_fwd
    assert doubled["flops_update"] == report.flops_update
