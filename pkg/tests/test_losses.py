import numpy as np
import pytest

from graybox import kernels, losses, shapes
from graybox.model import activations, init_model
from tests.conftest import fd_check


class TestCrossEntropy:
    def test_one_hot(self):
        assert losses.cross_entropy(np.array([0.0, 1.0, 0.0]), 1) == 0.0

    def test_uniform_closed_form(self):
        assert losses.cross_entropy(np.full(5, 0.2), 3) == pytest.approx(np.log(5))

    def test_clamp(self):
        probs = np.array([1 - 1e-20, 1e-20])
        assert losses.cross_entropy(probs, 1) == pytest.approx(-np.log(1e-12))

    def test_bad_class(self):
        with pytest.raises(IndexError):
            losses.cross_entropy(np.array([1.0]), 3)


class TestAttrIndexLoss:
    def test_all_relevant_zero(self, tiny_model):
        assert losses.attr_index_loss(tiny_model, None, 0, np.ones(tiny_model.k)) == 0.0

    def test_direct_arithmetic(self, tiny_model):
        model = tiny_model.copy()
        model.weights[0, :] = 0.0
        model.weights[0, 0] = 1.0
        model.weights[0, 1] = -2.0
        val = losses.attr_index_loss(model, None, 0, np.zeros(model.k))
        assert val == pytest.approx(5.0)

    def test_index_permutation_changes_loss(self, tiny_model):
        mask = np.array([1.0, 0.0, 1.0, 1.0])
        base = losses.attr_index_loss(tiny_model, None, 0, mask)
        perm = np.array([1, 0, 2, 3])
        permuted = tiny_model.copy()
        permuted.prototypes = permuted.prototypes[perm]
        permuted.weights = permuted.weights[:, perm]
        permuted.owner_class = permuted.owner_class[perm]
        assert losses.attr_index_loss(permuted, None, 0, mask) != pytest.approx(base)

    def test_concept_mask_type_accepted(self, tiny_model):
        mask = losses.ConceptMask(m=np.ones(tiny_model.k), scope="train/0000")
        assert losses.attr_index_loss(tiny_model, None, 1, mask) == 0.0


class TestAggrLoss:
    def test_empty_memory_zero(self, tiny_model, tiny_ref):
        memory = kernels.Memory.for_reference(tiny_ref)
        assert losses.aggr_loss(tiny_model, None, 0, memory, "param") == 0.0

    def test_frozen_copy_limiting_case(self, tiny_model, tiny_ref):
        memory = kernels.Memory.for_reference(tiny_ref)
        kernels.insert(memory, tiny_model, 2, kernels.FeedbackScope("global"), tiny_ref)
        model = tiny_model.copy()
        model.weights[0, :] = 0.0
        model.weights[0, 2] = 2.0
        # huge sigma: kappa(frozen, live copy) ~ 1, everything else ~ 1 too,
        # but only the copied slot carries weight
        val = losses.aggr_loss(model, None, 0, memory, "param", sigma=1e6)
        assert val == pytest.approx(4.0, rel=1e-6)

    @pytest.mark.parametrize("kernel", ["act", "param", "attr"])
    def test_joint_permutation_invariance(self, tiny_model, tiny_ref, tiny_memory,
                                          kernel):
        rng = np.random.default_rng(17)
        base = losses.aggr_loss(tiny_model, None, 0, tiny_memory, kernel,
                                ref=tiny_ref)
        for _ in range(10):
            perm = rng.permutation(tiny_model.k)
            permuted = tiny_model.copy()
            permuted.prototypes = permuted.prototypes[perm]
            permuted.weights = permuted.weights[:, perm]
            permuted.owner_class = permuted.owner_class[perm]
            val = losses.aggr_loss(permuted, None, 0, tiny_memory, kernel,
                                   ref=tiny_ref)
            assert val == pytest.approx(base, abs=1e-12)

    def test_scope_resolution(self, tiny_model, tiny_ref):
        memory = kernels.Memory.for_reference(tiny_ref)
        kernels.insert(memory, tiny_model, 0, kernels.FeedbackScope("class", y=1),
                       tiny_ref)
        assert losses.aggr_loss(tiny_model, None, 0, memory, "param") == 0.0
        assert losses.aggr_loss(tiny_model, None, 1, memory, "param") > 0.0

    def test_unknown_kernel(self, tiny_model, tiny_memory):
        with pytest.raises(ValueError, match="kernel"):
            losses.aggr_loss(tiny_model, None, 0, tiny_memory, "nope")


class TestRelevancePenalty:
    def test_margin_satisfied(self, tiny_model):
        model = tiny_model.copy()
        model.weights[0, :] = 1.0
        assert losses.relevance_penalty(model, 0, {0, 1}, 0.5) == 0.0

    def test_direct_arithmetic(self, tiny_model):
        model = tiny_model.copy()
        model.weights[0, 1] = 0.0
        assert losses.relevance_penalty(model, 0, {1}, 0.5) == pytest.approx(0.25)

    def test_non_increasing_in_magnitude(self, tiny_model):
        model = tiny_model.copy()
        prev = np.inf
        for w in np.linspace(0.0, 0.2, 9):
            model.weights[0, 1] = w
            val = losses.relevance_penalty(model, 0, {1}, 0.1)
            assert val <= prev + 1e-15
            prev = val


class TestConceptLabelLoss:
    def test_match_near_zero(self, tiny_dataset, tiny_model):
        entry = tiny_dataset.split("train")[0]
        model = tiny_model.copy()
        from graybox.model import extract_patches

        patches, _ = extract_patches(entry.raster, model.patch_size, model.stride)
        model.prototypes[0] = patches[0]
        val = losses.concept_label_loss(model, entry.raster, [(0, 1.0)])
        assert val < 1e-5

    def test_half_activation_closed_form(self, tiny_dataset, tiny_model):
        entry = tiny_dataset.split("train")[0]
        acts = activations(tiny_model, entry.raster)
        j = int(np.argmin(np.abs(acts.c - 0.5)))
        cj = float(np.clip(acts.c[j], 1e-6, 1 - 1e-6))
        expected = -np.log(cj)
        val = losses.concept_label_loss(tiny_model, entry.raster, [(j, 1.0)])
        assert val == pytest.approx(expected)

    def test_symmetry_at_half(self):
        c = np.array([0.5])
        l0 = losses._concept_label_value(c, [(0, 0.0)])
        l1 = losses._concept_label_value(c, [(0, 1.0)])
        assert l0 == pytest.approx(l1) == pytest.approx(np.log(2))

    def test_empty_targets_rejected(self, tiny_dataset, tiny_model):
        with pytest.raises(ValueError):
            losses.concept_label_loss(tiny_model, tiny_dataset.split("train")[0].raster, [])


class TestConceptRegionLoss:
    def test_all_ones_region_zero(self, tiny_dataset, tiny_model):
        entry = tiny_dataset.split("train")[0]
        region = np.ones(entry.raster.shape[:2])
        assert losses.concept_region_loss(tiny_model, entry.raster, 0, region) == 0.0

    def test_all_zeros_region_positive(self, tiny_dataset, tiny_model):
        entry = tiny_dataset.split("train")[0]
        region = np.zeros(entry.raster.shape[:2])
        assert losses.concept_region_loss(tiny_model, entry.raster, 0, region) > 0.0

    def test_region_covering_field_zero(self, tiny_dataset, tiny_model):
        entry = tiny_dataset.split("train")[0]
        acts = activations(tiny_model, entry.raster)
        r, c = acts.argmax_location[1]
        a, b = tiny_model.patch_size
        region = np.zeros(entry.raster.shape[:2])
        region[r : r + a, c : c + b] = 1.0
        assert losses.concept_region_loss(tiny_model, entry.raster, 1, region) == \
            pytest.approx(0.0)

    def test_dimension_mismatch(self, tiny_dataset, tiny_model):
        entry = tiny_dataset.split("train")[0]
        with pytest.raises(ValueError, match="region"):
            losses.concept_region_loss(tiny_model, entry.raster, 0, np.ones((4, 4)))


class TestTotalLoss:
    def test_all_lambdas_zero_equals_ce(self, tiny_model, tiny_batch):
        spec = losses.LossSpec.cross_entropy_only()
        total = losses.total_loss(tiny_model, tiny_batch, spec)
        from graybox.model import activations as act_fn, predict_proba, scores

        expected = 0.0
        for image, label, _ in tiny_batch:
            acts = act_fn(tiny_model, image)
            expected += losses.cross_entropy(predict_proba(scores(tiny_model, acts)),
                                             label)
        assert total == pytest.approx(expected / len(tiny_batch), abs=1e-12)

    def test_aggr_with_empty_memory_equals_ce(self, tiny_model, tiny_batch, tiny_ref):
        memory = kernels.Memory.for_reference(tiny_ref)
        spec = losses.LossSpec(lambda_aggr=5.0, lambda_attr=0.0, lambda_offclass=0.0,
                               lambda_cluster=0.0, lambda_separation=0.0)
        with_mem = losses.total_loss(tiny_model, tiny_batch, spec, memory=memory,
                                     ref=tiny_ref)
        ce = losses.total_loss(tiny_model, tiny_batch,
                               losses.LossSpec.cross_entropy_only())
        assert with_mem == pytest.approx(ce, abs=1e-12)

    def test_total_is_sum_of_terms(self, tiny_model, tiny_batch, tiny_memory,
                                   tiny_ref, feedback_state):
        spec = losses.LossSpec(kernel="param")
        total, _, terms = losses.batch_loss_and_grads(
            tiny_model, tiny_batch, spec, memory=tiny_memory,
            feedback=feedback_state, ref=tiny_ref, want_grads=False)
        assert total == pytest.approx(sum(terms.values()), abs=1e-12)
        assert set(terms) >= {"cross_entropy", "attr_index", "aggr", "relevance",
                              "concept_label", "concept_region"}

    def test_empty_batch_rejected(self, tiny_model):
        with pytest.raises(ValueError):
            losses.total_loss(tiny_model, [], losses.LossSpec())


class TestGradients:
    @pytest.mark.parametrize("kernel", ["act", "param", "attr"])
    def test_all_terms_fd(self, tiny_model, tiny_batch, tiny_memory, tiny_ref,
                          feedback_state, kernel):
        spec = losses.LossSpec(kernel=kernel)
        _, grads, _ = losses.batch_loss_and_grads(
            tiny_model, tiny_batch[:4], spec, memory=tiny_memory,
            feedback=feedback_state, ref=tiny_ref)

        def f(m):
            return losses.total_loss(m, tiny_batch[:4], spec, memory=tiny_memory,
                                     feedback=feedback_state, ref=tiny_ref)

        assert fd_check(f, tiny_model, grads) < 1e-4

    def test_relevance_gradient_fd(self, tiny_dataset, tiny_model_config):
        model = init_model(tiny_dataset, tiny_model_config, seed=2)
        rng = np.random.default_rng(0)
        model.prototypes += 0.01 * rng.standard_normal(model.prototypes.shape)
        model.weights[1, 3] = 0.04  # inside the epsilon_rel margin
        fb = losses.FeedbackState()
        fb.relevant[1] = {3}
        batch = [(e.raster, e.scene.class_label, e.image_id)
                 for e in tiny_dataset.split("train") if e.scene.class_label == 1][:2]
        spec = losses.LossSpec(lambda_relevance=1.0, lambda_attr=0.0, lambda_aggr=0.0,
                               lambda_concept_label=0.0, lambda_concept_region=0.0,
                               lambda_offclass=0.0, lambda_cluster=0.0,
                               lambda_separation=0.0)
        _, grads, terms = losses.batch_loss_and_grads(model, batch, spec, feedback=fb)
        assert terms.get("relevance", 0.0) > 0.0

        def f(m):
            return losses.total_loss(m, batch, spec, feedback=fb)

        assert fd_check(f, model, grads) < 1e-4


def test_aggr_monotone_in_weight_magnitude(tiny_model, tiny_ref, tiny_memory):
    model = tiny_model.copy()
    vals = []
    for w in [0.0, 0.5, 1.0, 2.0]:
        model.weights[0, 1] = w
        vals.append(losses.aggr_loss(model, None, 0, tiny_memory, "act", ref=tiny_ref))
    assert vals == sorted(vals)
