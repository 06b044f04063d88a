import pytest

from twincap.cli import EXIT_CONFIG, EXIT_FAIL, EXIT_OK, main

TINY_CFG = """
D = 16
T = 4
L = 1
M = 1
N = 1
num_heads = 2
cfb_kernel = 3
cab_kernel = 3
decoder_layers = 1
batch_size = 8
num_val = 8
max_epochs = 1
evals_per_epoch = 1
num_beams = 2
vocab_size = 16
"""


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    data = root / "ds.bin"
    rc = main(["gen-data", "--out", str(data), "--count", "24", "--t", "4", "--d", "16",
               "--latent", "6", "--num-symbols", "5", "--vocab", "16"])
    assert rc == EXIT_OK
    cfg = root / "tiny.cfg"
    cfg.write_text(TINY_CFG + f"data = {data}\n")
    run = root / "run"
    assert main(["train", "--config", str(cfg), "--out", str(run)]) == EXIT_OK
    return root, data, cfg, run


def test_train_writes_checkpoints(workspace):
    _, _, _, run = workspace
    assert (run / "best.npz").exists() and (run / "last.npz").exists()


def test_eval_prints_metric_table(workspace, capsys):
    _, data, _, run = workspace
    assert main(["eval", "--ckpt", str(run / "last.npz"), "--data", str(data)]) == EXIT_OK
    out = capsys.readouterr().out
    assert "bleu4" in out and "rouge_l" in out and "r1_a2t" in out


def test_infer_prints_prediction(workspace, capsys):
    _, data, _, run = workspace
    assert main(["infer", "--ckpt", str(run / "last.npz"), "--data", str(data), "--sample", "3"]) == EXIT_OK
    out = capsys.readouterr().out
    assert "predicted:" in out and "reference:" in out
    assert main(["infer", "--ckpt", str(run / "last.npz"), "--data", str(data), "--sample", "99"]) == EXIT_FAIL


def test_unknown_config_key_exit_code(tmp_path):
    bad = tmp_path / "bad.cfg"
    bad.write_text("warmup = 10\n")
    assert main(["train", "--config", str(bad)]) == EXIT_CONFIG


def test_missing_dataset_exit_code(tmp_path):
    cfg = tmp_path / "c.cfg"
    cfg.write_text(TINY_CFG + f"data = {tmp_path / 'nope.bin'}\n")
    assert main(["train", "--config", str(cfg), "--out", str(tmp_path / "r")]) == EXIT_FAIL


def test_no_dataset_is_config_error(tmp_path):
    cfg = tmp_path / "c.cfg"
    cfg.write_text(TINY_CFG)
    assert main(["train", "--config", str(cfg)]) == EXIT_CONFIG


def test_gradcheck_losses(capsys):
    assert main(["gradcheck", "--module", "losses"]) == EXIT_OK
    assert "3/3 passed" in capsys.readouterr().out


def test_ablate_table(workspace, capsys):
    root, _, cfg, _ = workspace
    rc = main(["ablate", "--config", str(cfg), "--out", str(root / "abl"), "--seeds", "0", "--max-steps", "1"])
    assert rc == EXIT_OK
    out = capsys.readouterr().out
    for mode in ("baseline", "fuser", "fuser_translator", "full_twin"):
        assert mode in out
