from dataclasses import replace

import numpy as np
import pytest

from rprnet.api import FormatError, InvalidArgument
from rprnet.checkpoint import (CHECKPOINT_MAGIC, Checkpoint, decode_checkpoint, encode_checkpoint, load_checkpoint,
                               save_checkpoint)
from rprnet.config import RprConfig, model_from_checkpoint
from rprnet.network import RprNet
from rprnet.optimizer import RAdam


TINY_NETWORK = {'network.n_seeds': 32, 'network.k': 8, 'network.channels': 4, 'network.final_channels': 16,
                'network.descriptor_dim': 16, 'network.kernel_hidden': 8, 'network.attention_reduction': 4}


@pytest.fixture
def trained_parts(tiny_model):
    """Tiny model plus an optimizer that has taken one step."""
    optimizer = RAdam(tiny_model.parameters())
    for p in tiny_model.parameters():
        p.grad[...] = 0.01
    optimizer.step()
    return tiny_model, optimizer


class TestCheckpointFile:
    def test_save_load_save_is_byte_identical(self, tmp_path, trained_parts):
        model, optimizer = trained_parts
        first, second = tmp_path / "a.rprck", tmp_path / "b.rprck"
        save_checkpoint(first, model, optimizer, epoch=3, config_text=RprConfig(TINY_NETWORK).to_text())
        write_back = load_checkpoint(first)
        save_checkpoint(second, _restored(write_back), _restored_optimizer(write_back), epoch=write_back.epoch,
                        config_text=write_back.config_text)
        assert first.read_bytes() == second.read_bytes()

    def test_contents(self, tmp_path, trained_parts):
        model, optimizer = trained_parts
        path = tmp_path / "model.rprck"
        save_checkpoint(path, model, optimizer, epoch=2, config_text="echo")
        checkpoint = load_checkpoint(path)
        assert checkpoint.epoch == 2 and checkpoint.config_text == "echo"
        assert set(checkpoint.parameters) == set(model.named_parameters())
        assert all(values.dtype == np.float32 for values in checkpoint.parameters.values())
        assert checkpoint.optimizer.step == 1
        np.testing.assert_array_equal(checkpoint.optimizer.moments['gem.p'].m, optimizer.state.moments['gem.p'].m)

    def test_without_optimizer(self, tiny_model):
        checkpoint = decode_checkpoint(encode_checkpoint(Checkpoint.capture(tiny_model)))
        assert checkpoint.optimizer is None

    def test_no_temporary_file_left(self, tmp_path, tiny_model):
        save_checkpoint(tmp_path / "m.rprck", tiny_model)
        assert [p.name for p in tmp_path.iterdir()] == ["m.rprck"]


class TestCheckpointErrors:
    def test_wrong_magic(self, tiny_model):
        raw = encode_checkpoint(Checkpoint.capture(tiny_model))
        with pytest.raises(FormatError) as e:
            decode_checkpoint(b'XXXXXX' + raw[len(CHECKPOINT_MAGIC):])
        assert e.value.offset == 0

    def test_wrong_version(self, tiny_model):
        raw = bytearray(encode_checkpoint(Checkpoint.capture(tiny_model)))
        raw[len(CHECKPOINT_MAGIC)] = 9
        with pytest.raises(FormatError) as e:
            decode_checkpoint(bytes(raw))
        assert e.value.offset == len(CHECKPOINT_MAGIC)

    def test_truncation_reports_offset(self, tiny_model):
        """Test that a cut file fails at the first read that runs past its end."""
        raw = encode_checkpoint(Checkpoint.capture(tiny_model))
        with pytest.raises(FormatError) as e:
            decode_checkpoint(raw[:-3])
        assert e.value.offset is not None and e.value.offset < len(raw) - 3

    def test_trailing_bytes(self, tiny_model):
        raw = encode_checkpoint(Checkpoint.capture(tiny_model))
        with pytest.raises(FormatError) as e:
            decode_checkpoint(raw + b'\x00')
        assert e.value.offset == len(raw)

    def test_mismatched_model(self, tiny_model, tiny_config):
        checkpoint = Checkpoint.capture(tiny_model)
        other = RprNet(replace(tiny_config, attention=False))
        with pytest.raises(InvalidArgument):
            checkpoint.apply_to(other)


class TestRestoredModel:
    def test_restored_models_give_identical_descriptors(self, tmp_path, tiny_config, random_cloud):
        """Test that a model restored from a re-saved checkpoint embeds bit-for-bit like the first restore."""
        config = RprConfig(TINY_NETWORK)
        assert config.network == tiny_config
        first_path, second_path = tmp_path / "a.rprck", tmp_path / "b.rprck"
        save_checkpoint(first_path, RprNet(tiny_config, seed=3), config_text=config.to_text())
        restored, _ = model_from_checkpoint(load_checkpoint(first_path))
        save_checkpoint(second_path, restored, config_text=config.to_text())
        again, _ = model_from_checkpoint(load_checkpoint(second_path))
        descriptor = restored.embed(random_cloud)
        np.testing.assert_array_equal(descriptor.astype(np.float32), again.embed(random_cloud).astype(np.float32))
        np.testing.assert_array_equal(descriptor, again.embed(random_cloud))

    def test_weights_round_to_float32(self, tmp_path, tiny_model):
        path = tmp_path / "m.rprck"
        save_checkpoint(path, tiny_model)
        restored = RprNet(tiny_model.config, seed=99)
        load_checkpoint(path).apply_to(restored)
        for name, p in restored.named_parameters().items():
            expected = tiny_model.named_parameters()[name].data.astype(np.float32).astype(np.float64)
            np.testing.assert_array_equal(p.data, expected)


def _restored(checkpoint):
    model, _ = model_from_checkpoint(checkpoint)
    return model


def _restored_optimizer(checkpoint):
    model = _restored(checkpoint)
    optimizer = RAdam(model.parameters())
    optimizer.load_state_dict(checkpoint.optimizer)
    return optimizer
