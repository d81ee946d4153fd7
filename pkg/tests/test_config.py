import pytest
import yaml

from longissl.augment import AugmentParams
from longissl.config import RunConfig, apply_overrides, config_from_dict, desk_config, load_config
from longissl.nets import ConfigError


def test_desk_defaults():
    cfg = desk_config()
    assert cfg.resolution == (32, 32, 32)
    assert cfg.encoder.feature_dim == 64
    # mean per-axis ratio against the (150, 192, 192) reference grid
    ratio = (32 / 150 + 32 / 192 + 32 / 192) / 3
    assert cfg.pretrain.augment.translation_max_vox == pytest.approx(15 * ratio)
    assert cfg.finetune.augment.translation_max_vox == pytest.approx(5 * ratio)
    assert (cfg.finetune.lr_encoder, cfg.finetune.lr_head) == (1e-5, 1e-4)
    assert cfg.pretrain.temperature == 0.5


def test_yaml_round_trip(tmp_path):
    cfg = apply_overrides(desk_config(), ["pretrain.lr=0.001", "method=topc", "pretrain.augment.scale_range=[0.95, 1.1]"])
    assert cfg.method == "TOPC" and isinstance(cfg.pretrain.augment, AugmentParams)
    assert cfg.pretrain.augment.scale_range == (0.95, 1.1)
    cfg.save(tmp_path / "c.yaml")
    back = load_config(tmp_path / "c.yaml")
    assert back == cfg and back.hash() == cfg.hash()


def test_hash_changes_with_content():
    a, b = desk_config(), desk_config(seed=1)
    assert len(a.hash()) == 12 and a.hash() != b.hash()


def test_partial_yaml_merges_over_defaults(tmp_path):
    (tmp_path / "c.yaml").write_text(yaml.safe_dump({"pretrain": {"epochs": 3}}))
    cfg = load_config(tmp_path / "c.yaml", ["finetune.epochs=2"])
    assert (cfg.pretrain.epochs, cfg.finetune.epochs, cfg.pretrain.batch_size) == (3, 2, 16)


@pytest.mark.parametrize(
    "override, field",
    [
        ("pretrain.batch_size=0", "pretrain.batch_size"),
        ("pretrain.lr=-1", "pretrain.lr"),
        ("method=BYOL", "method"),
        ("pretrain.bogus=1", "pretrain.bogus"),
        ("task.num_images=4", "task.num_images"),
        ("pretrain.epochs=abc", "pretrain.epochs"),
        ("encoder.architecture=vgg", "encoder"),
        ("data.norm_mode=minmax", "data.norm_mode"),
        ("pretrain.augment.per_transform_prob=2", "pretrain.augment"),
    ],
)
def test_errors_name_the_field(override, field):
    with pytest.raises(ConfigError, match=field.replace(".", r"\.")):
        apply_overrides(desk_config(), [override])


def test_zero_lr_allowed():
    assert apply_overrides(desk_config(), ["pretrain.lr=0"]).pretrain.lr == 0


def test_missing_file(tmp_path):
    with pytest.raises(ConfigError, match="does not exist"):
        load_config(tmp_path / "nope.yaml")


def test_bad_override_syntax():
    with pytest.raises(ConfigError):
        apply_overrides(desk_config(), ["pretrain.epochs"])


def test_from_empty_dict_is_full_scale_default():
    assert config_from_dict({}) == RunConfig()
