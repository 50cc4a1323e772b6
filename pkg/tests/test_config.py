import pytest

from memecap.config import BASELINE_PROMPT, GridSpec, TrainConfig, load_config
from memecap.errors import ValidationError


def test_defaults_are_canonical():
    cfg = TrainConfig()
    assert (cfg.lam_ori, cfg.lam_g, cfg.lam_t) == (0.4, 0.2, 0.4)
    assert (cfg.w1, cfg.w2) == (0.4, 0.6)
    assert cfg.tau == 0.07
    assert cfg.sft_epochs == 20
    assert cfg.max_seq_len == 1024
    assert cfg.max_caption_len == 25
    assert cfg.candidates_k == 4
    assert cfg.annotation_fraction == 0.01
    assert cfg.d == 64 and cfg.d_k == 32 and cfg.patch_grid == 4


def test_empty_config_file_is_defaults(tmp_path):
    path = tmp_path / "empty.ini"
    path.write_text("")
    assert load_config(path).to_dict() == TrainConfig().to_dict()


def test_file_overrides(tmp_path):
    path = tmp_path / "c.ini"
    path.write_text(
        "[run]\nseed = 9\n\n[stage.sft]\nlam_g = 0.3\nepochs = 5\n\n[stage.rl]\npaper_literal_sign = true\n"
    )
    cfg = load_config(path)
    assert cfg.seed == 9
    assert cfg.lam_g == 0.3
    assert cfg.sft_epochs == 5
    assert cfg.paper_literal_sign is True


def test_unknown_option_rejected(tmp_path):
    path = tmp_path / "c.ini"
    path.write_text("[stage.sft]\nmystery = 1\n")
    with pytest.raises(ValidationError, match="mystery"):
        load_config(path)


def test_config_hash_sensitivity(tmp_path):
    a = load_config(None)
    b = load_config(None, {"lam_g": 0.25})
    assert a.config_hash() != b.config_hash()
    assert a.config_hash() == load_config(None).config_hash()


def test_validation_rules():
    with pytest.raises(ValidationError):
        TrainConfig(lam_g=-0.1)
    with pytest.raises(ValidationError):
        TrainConfig(sft_epochs=0)
    with pytest.raises(ValidationError):
        TrainConfig(max_seq_len=10)
    with pytest.raises(ValidationError):
        TrainConfig(prompt_mode="haiku")


def test_grid_spec_defaults():
    grid = GridSpec()
    assert (0.4, 0.4, 0.2) in grid.lambdas
    assert (0.4, 0.6) in grid.w_pairs
    combos = grid.combinations()
    assert len(combos) == 9
    first = combos[0]
    assert set(first) == {"lam_ori", "lam_t", "lam_g", "w1", "w2"}


def test_grid_validation():
    with pytest.raises(ValidationError):
        GridSpec(lambdas=[])
    with pytest.raises(ValidationError):
        GridSpec(lambdas=[(0.4, -0.1, 0.2)])


def test_baseline_prompt_shipped():
    assert BASELINE_PROMPT.startswith("What is a humorous short sentence")
