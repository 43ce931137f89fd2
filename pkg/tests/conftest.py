import numpy as np
import pytest

from graybox import kernels, losses, shapes
from graybox.model import ModelConfig, init_model
from graybox.trainer import Schedule


@pytest.fixture(scope="session")
def tiny_dataset():
    """2 classes, 32px images, 8px shapes: fast enough for every unit test."""
    cfg = shapes.DataConfig(seed=3, v=2, n_train=6, n_validation=0, n_test=4,
                            image_size=32, grid=4)
    return shapes.generate(cfg)


@pytest.fixture(scope="session")
def tiny_model_config():
    return ModelConfig(patch_size=(8, 8), stride=8, slots_per_class=2)


@pytest.fixture()
def tiny_model(tiny_dataset, tiny_model_config):
    model = init_model(tiny_dataset, tiny_model_config, seed=7)
    # nudge off exact training patches so argmaxes and clamps are unambiguous
    rng = np.random.default_rng(5)
    model.prototypes = model.prototypes + 0.01 * rng.standard_normal(model.prototypes.shape)
    model.weights = model.weights + 0.05 * rng.standard_normal(model.weights.shape)
    return model


@pytest.fixture()
def tiny_ref(tiny_dataset):
    return kernels.ReferenceSet.from_dataset(tiny_dataset, "train")


@pytest.fixture()
def tiny_memory(tiny_model, tiny_ref):
    memory = kernels.Memory.for_reference(tiny_ref)
    kernels.insert(memory, tiny_model, 1, kernels.FeedbackScope("class", y=0), tiny_ref)
    kernels.insert(memory, tiny_model, 2, kernels.FeedbackScope("global"), tiny_ref)
    return memory


@pytest.fixture()
def tiny_batch(tiny_dataset):
    return [(e.raster, e.scene.class_label, e.image_id)
            for e in tiny_dataset.split("train")]


@pytest.fixture()
def fast_schedule():
    return Schedule(initial_epochs=3, refine_epochs=4, phase_length=2,
                    batch_size=4, seed=11)


def fd_check(loss_fn, model, grads, h=1e-4, rtol=1e-4, floor=1e-6):
    """Central finite differences against analytic gradients, worst rel error."""
    worst = 0.0
    for arr, g in ((model.prototypes, grads.d_prototypes),
                   (model.weights, grads.d_weights)):
        it = np.nditer(arr, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            orig = arr[idx]
            arr[idx] = orig + h
            fp = loss_fn(model)
            arr[idx] = orig - h
            fm = loss_fn(model)
            arr[idx] = orig
            fd = (fp - fm) / (2 * h)
            err = abs(fd - g[idx]) / max(abs(fd), abs(g[idx]), floor / rtol)
            worst = max(worst, err)
    return worst


@pytest.fixture()
def feedback_state(tiny_dataset, tiny_model):
    entries = tiny_dataset.split("train")
    fb = losses.FeedbackState()
    fb.class_masks[0] = np.array([1.0, 0.0, 1.0, 1.0])
    fb.relevant[1] = {3}
    fb.concept_labels[entries[0].image_id] = [(0, 1.0), (2, 0.0)]
    region = shapes.shape_mask(entries[1].scene, 0, 32, 4).astype(float)
    fb.concept_regions[entries[1].image_id] = [(1, region)]
    return fb
