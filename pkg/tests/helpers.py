"""Small configurations shared by the pipeline, CLI and acceptance tests."""
from sparsepose.config import ModelConfig, RunConfig

TINY_MODEL = dict(num_stages=2, num_queries=5, hidden_dim=64, part_dim=32, num_heads=4, part_heads=4,
                  dynamic_dim=16, part_conv_dim=16)


def tiny_model(**overrides) -> ModelConfig:
    return ModelConfig(**{**TINY_MODEL, **overrides})


def tiny_run(**model_overrides) -> RunConfig:
    cfg = RunConfig(model=tiny_model(**model_overrides))
    cfg.data.synthetic.image_size = (64, 64)
    cfg.data.synthetic.num_images = 4
    cfg.data.synthetic.persons = (1, 2)
    cfg.train.batch_size = 2
    return cfg
