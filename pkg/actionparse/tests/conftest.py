"""
Pytest configuration and shared fixtures
"""

import numpy as np
import pytest

from config import Hyperparameters, settings
from services.grammar_service import GrammarSchema, load_schema, make_tree
from services.parser_service import ParserModel
from services.template_service import load_noop_corpus, load_template_library

TOY_VOCABULARY = ["go", "take", "stop", "left", "right", "the", "cube", "twice", "now"]


@pytest.fixture(scope="session")
def reference_schema() -> GrammarSchema:
    return load_schema(settings.schema_path)


@pytest.fixture(scope="session")
def toy_schema() -> GrammarSchema:
    return load_schema(settings.DATA_DIR / "toy_schema.json")


@pytest.fixture(scope="session")
def reference_library(reference_schema):
    return load_template_library(settings.template_path, reference_schema, verify_samples=5)


@pytest.fixture(scope="session")
def noop_corpus():
    return load_noop_corpus(settings.noop_corpus_path)


@pytest.fixture
def tiny_hyper() -> Hyperparameters:
    """Dimensions small enough for finite differences and exhaustive search"""
    return Hyperparameters(dim=4, heads=2, encoder_layers=2, free_dims=2, pretrained_dims=3,
                           learning_rate=0.1, dropout=0.0, word_dropout=0.0, label_smoothing=0.0,
                           batch_size=4, steps=0, eval_interval=10, beam_width=1)


@pytest.fixture
def make_toy_model(toy_schema, tiny_hyper):
    """Factory for toy-schema models; ``scale`` widens the initial parameter range"""

    def factory(variant: str = "sentencerec", seed: int = 0, scale: float = 1.0, **kwargs) -> ParserModel:
        model = ParserModel.build(toy_schema, TOY_VOCABULARY, tiny_hyper, variant, seed, **kwargs)
        if scale != 1.0:
            for name in model.store.trainable():
                model.store[name].data = model.store[name].data * scale
        return model

    return factory


@pytest.fixture
def random_toy_model(make_toy_model):
    """Models with random parameters spread wide enough to give peaked distributions"""

    def factory(variant: str = "sentencerec", seed: int = 0, **kwargs) -> ParserModel:
        model = make_toy_model(variant, seed, **kwargs)
        rng = np.random.default_rng(1000 + seed)
        for name in model.store.trainable():
            param = model.store[name]
            param.data = rng.normal(0.0, 1.0, size=param.shape)
        return model

    return factory


@pytest.fixture
def toy_tree(toy_schema):
    """'take the cube now' style tree: verb, target with side and name, count"""
    return make_tree(toy_schema, 4,
                     categories={"cmd:verb": "Take", "target:side": "LEFT"},
                     spans={"target:name": (1, 2), "cmd:count": (3, 3)})


@pytest.fixture
def figure_tree(reference_schema):
    return make_tree(
        reference_schema, 14,
        categories={
            "action:action_type": "Build",
            "s_repeat:repeat_key": "FOR",
            "action_location:relative_direction": "LEFT",
            "action_location:location_type": "BlockObject",
        },
        spans={
            "schematic:has_block_type_": (2, 3),
            "schematic:has_name_": (4, 4),
            "s_repeat:repeat_count": (1, 1),
            "al_ref_object:has_colour_": (10, 11),
            "al_ref_object:has_name_": (12, 12),
        },
    )
