import pytest

from config import RunConfig, SNAPSHOT_NAME, apply_overrides, load_config, write_snapshot
from errors import InvalidConfigError


def test_load_config_parses_types(tmp_path):
    path = tmp_path / 'run.cfg'
    path.write_text(
        "# tiny run\n"
        "segment_len = 16\n"
        "encoder_channels = 4, 4, 4, 4, 4, 4\n"
        "freeze_encoder = yes\n"
        "learning_rate = 5e-4  # inline comment\n"
        "\n"
        "pad_mode = zero\n"
    )
    cfg = load_config(path)
    assert cfg.segment_len == 16
    assert cfg.encoder_channels == [4, 4, 4, 4, 4, 4]
    assert cfg.freeze_encoder is True
    assert cfg.learning_rate == 5e-4
    assert cfg.pad_mode == 'zero'
    assert cfg.epochs == RunConfig().epochs


@pytest.mark.parametrize('body', [
    "unknown_key = 1\n",
    "epochs = many\n",
    "epochs 3\n",
    "seed = 1\nseed = 2\n",
    "pad_mode = mirror\n",
    "num_heads = 3\n",
])
def test_load_config_rejects_bad_files(tmp_path, body):
    path = tmp_path / 'run.cfg'
    path.write_text(body)
    with pytest.raises(InvalidConfigError):
        load_config(path)


def test_apply_overrides_skips_none():
    cfg = apply_overrides(RunConfig(), {'seed': 5, 'epochs': None, 'learning_rate': '0.01'})
    assert cfg.seed == 5
    assert cfg.epochs == RunConfig().epochs
    assert cfg.learning_rate == 0.01
    with pytest.raises(InvalidConfigError):
        apply_overrides(RunConfig(), {'bogus': 1})
    with pytest.raises(InvalidConfigError):
        apply_overrides(RunConfig(), {'workers': 0})


def test_snapshot_reloads_to_same_config(tmp_path):
    cfg = apply_overrides(RunConfig(), {'segment_len': 16, 'encoder_channels': [4] * 6, 'seed': 3})
    path = write_snapshot(cfg, tmp_path, {'corpus': 'corpus.npz'})
    assert path.name == SNAPSHOT_NAME
    assert '# corpus = corpus.npz' in path.read_text()
    assert load_config(path) == cfg


def test_run_config_builds_stage_configs():
    cfg = RunConfig(segment_len=16, embed_dim=8, num_heads=2, ffn_dim=16, encoder_channels=[4] * 6)
    model = cfg.model(num_classes=2)
    assert model.S == 16 and model.d == 8 and model.transformer.model_dim == 8
    assert cfg.segmentation().S == 16
    assert cfg.training().learning_rate == cfg.learning_rate
