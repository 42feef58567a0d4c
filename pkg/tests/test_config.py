import pytest

from boxboot.config import ConfigError, load_config, parse_config
from boxboot.loss_core import RegionMode
from boxboot.trainer import LossVariant


def test_empty_config_gives_defaults():
    train, scene, pp_ratio = parse_config("")
    assert train.tau == 2.5 and train.lr == 5e-4 and train.batch_size == 8
    assert scene.width == 64 and scene.objects_min == 1 and scene.objects_max == 3
    assert pp_ratio == 0.18


def test_full_config():
    text = """
    # benchmark
    loss_variant = MultiClass
    region_mode = UncAll   # trailing comment
    tau = 3.0
    t_samples = 10
    classes = 2
    objects_per_image = 2..4
    pp_ratio = 0.5
    seed = 9
    export_masks = true
    """
    train, scene, pp_ratio = parse_config(text)
    assert train.loss_variant is LossVariant.MULTI_CLASS and train.region_mode is RegionMode.UNC_ALL
    assert train.tau == 3.0 and train.t_samples == 10 and train.export_masks is True
    assert scene.classes == 2 and (scene.objects_min, scene.objects_max) == (2, 4)
    assert train.seed == 9 and scene.seed == 9
    assert pp_ratio == 0.5


def test_single_object_count():
    _, scene, _ = parse_config("objects_per_image = 0")
    assert (scene.objects_min, scene.objects_max) == (0, 0)


@pytest.mark.parametrize(
    "text, fragment",
    [
        ("taau = 2.5", "taau"),
        ("tau 2.5", "key = value"),
        ("tau = 1\ntau = 2", "duplicate"),
        ("steps = many", "steps"),
        ("export_masks = maybe", "export_masks"),
        ("loss_variant = Focal", "loss_variant"),
        ("pp_ratio = 2", "pp_ratio"),
        ("objects_per_image = a..b", "objects_per_image"),
        ("classes = 5", "classes"),
        ("batch_size = 0", "batch_size"),
    ],
)
def test_config_errors(text, fragment):
    with pytest.raises(ConfigError, match=fragment):
        parse_config(text)


def test_error_names_line(tmp_path):
    path = tmp_path / "c.cfg"
    path.write_text("tau = 2.5\nlr = 1e-3\nbogus = 1\n")
    with pytest.raises(ConfigError, match=r"c\.cfg:3: unknown key 'bogus'"):
        load_config(path)


def test_missing_file(tmp_path):
    with pytest.raises(ConfigError, match="cannot read"):
        load_config(tmp_path / "none.cfg")
