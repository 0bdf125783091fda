import pytest

from icre.config import ConfigError, coerce, from_mapping, read_flat, read_sections
from icre.harness import LossKind, TrainConfig
from icre.metrics import Metric, ProtocolConfig, SearchMode


def test_flat_file_to_train_config(tmp_path):
    p = tmp_path / "train.cfg"
    p.write_text(
        "# desk-scale run\n"
        "epochs = 40\n"
        "P = 5\n"
        "K: 4\n"
        "loss = tri   # inline comment\n"
        "mpfr_scales = 3,4\n"
        "decay_points = 30:0.01, 90:0.001\n"
        "grad_clip = none\n"
        "sdce_on = false\n"
        "image_size = 64,32\n",
        encoding="utf-8",
    )
    cfg = from_mapping(TrainConfig, read_flat(p))
    assert cfg.epochs == 40 and cfg.P == 5 and cfg.K == 4
    assert cfg.loss is LossKind.TRI and cfg.mpfr_scales == (3, 4)
    assert cfg.decay_points == {30: 0.01, 90: 0.001}
    assert cfg.grad_clip is None and cfg.sdce_on is False and cfg.image_size == (64, 32)


def test_protocol_from_flat(tmp_path):
    p = tmp_path / "proto.cfg"
    p.write_text("mode = indoor\ntrials = 3\nmetric = euclidean\nindoor_cameras = 1,2\n")
    proto = from_mapping(ProtocolConfig, read_flat(p))
    assert proto.mode is SearchMode.INDOOR and proto.trials == 3 and proto.metric is Metric.EUCLIDEAN


def test_sections(tmp_path):
    p = tmp_path / "grid.cfg"
    p.write_text("[full]\n\n[baseline]\nmpfr_on = false\nsdce_on = false\nloss = TRI\n")
    assert read_sections(p) == {"full": {}, "baseline": {"mpfr_on": "false", "sdce_on": "false", "loss": "TRI"}}


def test_unknown_key(tmp_path):
    p = tmp_path / "bad.cfg"
    p.write_text("epochs = 3\nlearning_rate = 0.1\n")
    with pytest.raises(ConfigError, match="learning_rate"):
        from_mapping(TrainConfig, read_flat(p))


@pytest.mark.parametrize("text", ["epochs = ten\n", "sdce_on = maybe\n", "loss = HUBER\n"])
def test_bad_values(tmp_path, text):
    p = tmp_path / "bad.cfg"
    p.write_text(text)
    with pytest.raises(ConfigError):
        from_mapping(TrainConfig, read_flat(p))


def test_malformed_file(tmp_path):
    p = tmp_path / "bad.cfg"
    p.write_text("epochs = 3\nepochs = 4\n")
    with pytest.raises(ConfigError):
        read_flat(p)


def test_coerce_and_base():
    assert coerce("yes", bool) is True and coerce("0", bool) is False
    assert coerce("2.5", float) == 2.5 and coerce(3, int) == 3
    base = TrainConfig(epochs=40)
    cfg = from_mapping(TrainConfig, {"seed": "7"}, base=base)
    assert cfg.seed == 7 and cfg.epochs == 40
