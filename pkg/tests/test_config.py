import pytest

from twincap.config import ABLATION_MODES, ConfigError, TrainConfig, load_config, parse_config


def test_desk_defaults():
    c = TrainConfig()
    assert (c.lr, c.batch_size, c.beta, c.temperature, c.label_smoothing) == (3e-4, 16, 0.95, 0.07, 0.1)
    assert (c.cycle_epochs, c.halve_every, c.early_stop_patience, c.evals_per_epoch, c.num_beams) == (4, 4, 4, 3, 4)
    assert c.ablation_mode == "full_twin" and c.twin


def test_parse_with_comments_and_blanks():
    text = """
    # desk run
    lr = 1e-3   # peak
    ablation_mode = fuser
    spec_augment = false

    data = "runs/ds.bin"
    """
    c = parse_config(text)
    assert c.lr == 1e-3 and c.ablation_mode == "fuser" and c.spec_augment is False
    assert c.data == "runs/ds.bin"
    assert c.uses_fuser and not c.uses_translator and not c.twin


def test_round_trip_through_text(tmp_path):
    c = TrainConfig(lr=2e-4, seed=5, ablation_mode="baseline", spec_augment=False)
    p = tmp_path / "c.txt"
    p.write_text(c.to_text())
    assert load_config(p) == c
    assert load_config(p).digest() == c.digest()
    assert c.replace(seed=6).digest() != c.digest()


@pytest.mark.parametrize("text,match", [
    ("learning_rate = 1", "unknown config key"),
    ("lr 1e-3", "expected key = value"),
    ("batch_size = sixteen", "bad value"),
    ("spec_augment = maybe", "bad value"),
    ("ablation_mode = twin", "ablation_mode"),
    ("batch_size = 0", "batch_size must be positive"),
    ("beta = 1.5", "beta"),
    ("label_smoothing = 0.4", "label_smoothing"),
    ("cfb_kernel = 4", "odd"),
    ("num_heads = 5", "divisible"),
    ("max_steps = -1", "non-negative"),
])
def test_config_errors(text, match):
    with pytest.raises(ConfigError, match=match):
        parse_config(text)


def test_replace_rejects_unknown_keys():
    with pytest.raises(ConfigError):
        TrainConfig().replace(gamma=1)


def test_modes_cover_four_groups():
    flags = [(TrainConfig(ablation_mode=m).uses_fuser, TrainConfig(ablation_mode=m).uses_translator,
              TrainConfig(ablation_mode=m).twin) for m in ABLATION_MODES]
    assert flags == [(False, False, False), (True, False, False), (True, True, False), (True, True, True)]
