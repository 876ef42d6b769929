import struct

import numpy as np
import pytest
from groupkan import checkpoint, config, model
from groupkan.checkpoint import CheckpointMetadata
from groupkan.errors import FormatVersionError, ParseError
from groupkan.tensor import Tensor


@pytest.fixture
def tiny_net():
    return model.build(config.preset_config("tiny", seed=2))


def test_tensor_blob_layout():
    blob = checkpoint.encode_tensor(np.array([[1.0, 2.0, 3.0]]))
    assert blob[:4] == b"GKTN"
    assert struct.unpack_from("<II", blob, 4) == (1, 2)
    assert struct.unpack_from("<QQ", blob, 12) == (1, 3)
    assert len(blob) == 4 + 4 + 4 + 2 * 8 + 3 * 8
    array, end = checkpoint.decode_tensor(blob)
    np.testing.assert_array_equal(array, [[1.0, 2.0, 3.0]])
    assert end == len(blob)


def test_tensor_blob_scalar():
    array, _ = checkpoint.decode_tensor(checkpoint.encode_tensor(np.array(2.5)))
    assert array.shape == ()
    assert array == 2.5


def test_tensor_blob_errors():
    blob = checkpoint.encode_tensor(np.ones(4))
    with pytest.raises(ParseError):
        checkpoint.decode_tensor(b"XXXX" + blob[4:])
    with pytest.raises(ParseError, match="bytes"):
        checkpoint.decode_tensor(blob[:-8])
    with pytest.raises(FormatVersionError):
        checkpoint.decode_tensor(blob[:4] + struct.pack("<I", 9) + blob[8:])


def test_checkpoint_round_trip(tmp_path, tiny_net):
    path = str(tmp_path / "net.gkn")
    meta = CheckpointMetadata(seed=2, best_epoch=3, best_val_iou=0.5, resolution=32)
    checkpoint.save_checkpoint(path, tiny_net, meta)
    loaded = checkpoint.load_checkpoint(path)
    assert loaded.config == tiny_net.config
    assert loaded.metadata == meta
    restored = checkpoint.restore(loaded, tiny_net.config)
    for name, value in tiny_net.state_dict().items():
        assert restored.state_dict()[name].tobytes() == value.tobytes()
    assert not restored.training


def test_restored_net_predicts_identically(tmp_path, tiny_net):
    path = str(tmp_path / "net.gkn")
    tiny_net.eval()
    checkpoint.save_checkpoint(path, tiny_net)
    restored = checkpoint.restore(checkpoint.load_checkpoint(path))
    x = Tensor(np.random.default_rng(0).uniform(size=(1, 3, 32, 32)))
    assert restored(x).data.tobytes() == tiny_net(x).data.tobytes()


def test_bad_magic(tiny_net):
    data = checkpoint.encode_checkpoint(
        checkpoint.Checkpoint(config=tiny_net.config, state=tiny_net.state_dict())
    )
    with pytest.raises(ParseError, match="magic"):
        checkpoint.decode_checkpoint(b"NOPE" + data[4:])


def test_unsupported_version(tiny_net):
    data = checkpoint.encode_checkpoint(
        checkpoint.Checkpoint(config=tiny_net.config, state=tiny_net.state_dict())
    )
    with pytest.raises(FormatVersionError):
        checkpoint.decode_checkpoint(data[:4] + struct.pack("<I", 2) + data[8:])


def test_truncated_and_trailing(tiny_net):
    data = checkpoint.encode_checkpoint(
        checkpoint.Checkpoint(config=tiny_net.config, state=tiny_net.state_dict())
    )
    with pytest.raises(ParseError):
        checkpoint.decode_checkpoint(data[:-3])
    with pytest.raises(ParseError, match="trailing"):
        checkpoint.decode_checkpoint(data + b"\x00")


def test_corrupt_file_names_path(tmp_path):
    path = tmp_path / "broken.gkn"
    path.write_bytes(b"garbage")
    with pytest.raises(ParseError, match="broken.gkn"):
        checkpoint.load_checkpoint(str(path))


def test_config_mismatch(tiny_net):
    stored = checkpoint.Checkpoint(config=tiny_net.config, state=tiny_net.state_dict())
    other = config.preset_config("tiny", gkt_layers=2)
    with pytest.raises(FormatVersionError):
        checkpoint.restore(stored, other)


def test_restore_ignores_init_seed(tiny_net):
    stored = checkpoint.Checkpoint(config=tiny_net.config, state=tiny_net.state_dict())
    restored = checkpoint.restore(stored, config.preset_config("tiny", seed=0))
    assert restored.config.seed == 2
    head = restored.state_dict()["head.weight"]
    assert head.tobytes() == tiny_net.state_dict()["head.weight"].tobytes()


def test_state_mismatch(tiny_net):
    state = tiny_net.state_dict()
    state.pop(next(iter(state)))
    stored = checkpoint.Checkpoint(config=tiny_net.config, state=state)
    with pytest.raises(FormatVersionError, match="missing"):
        checkpoint.restore(stored)
