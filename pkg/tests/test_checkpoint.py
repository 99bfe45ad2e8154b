"""
Checkpoint container: save/load, corruption and header mismatches.
"""
import hashlib

import numpy as np
import pytest

from config import dump_run_config
from errors import ArtifactMismatchError
from models.checkpoint import (MAGIC, checkpoint_bytes, checkpoint_digest, decode_checkpoint, encode_checkpoint,
                               load_model, read_checkpoint, save_checkpoint)


@pytest.fixture
def saved(tmp_path, tiny_model, tiny_run_config):
    """Path of the tiny model's checkpoint."""
    path = str(tmp_path / 'model.flc')
    save_checkpoint(tiny_model, tiny_run_config, path)
    return path


class TestRoundTrip:
    """Saved tensors load back at 32-bit precision."""

    def test_state_restored(self, saved, tiny_model, tiny_run_config):
        """Every tensor comes back equal to its f32 rounding."""
        model, cfg = load_model(saved)
        assert cfg == tiny_run_config
        loaded = model.state_dict()
        for name, values in tiny_model.state_dict().items():
            np.testing.assert_array_equal(loaded[name], values.astype(np.float32).astype(loaded[name].dtype))

    def test_loaded_model_is_in_eval_mode(self, saved):
        """load_model hands back an inference-ready model."""
        model, _ = load_model(saved)
        assert not model.training

    def test_scalar_record(self):
        """Rank-0 tensors survive encoding."""
        header, state = decode_checkpoint(encode_checkpoint({'s': np.array(2.5)}, 'seed = 1\n'))
        assert header == 'seed = 1\n'
        assert state['s'].shape == () and float(state['s']) == 2.5


class TestDigest:
    """sha256 of the serialized bytes."""

    def test_matches_file(self, saved, tiny_model, tiny_run_config):
        """The digest is the hash of the file on disk."""
        with open(saved, 'rb') as f:
            assert hashlib.sha256(f.read()).hexdigest() == checkpoint_digest(tiny_model, tiny_run_config)

    def test_stable(self, tmp_path, tiny_model, tiny_run_config):
        """Saving twice writes identical bytes."""
        first = save_checkpoint(tiny_model, tiny_run_config, str(tmp_path / 'a.flc'))
        second = save_checkpoint(tiny_model, tiny_run_config, str(tmp_path / 'b.flc'))
        assert first == second

    def test_changes_with_parameters(self, tiny_model, tiny_run_config):
        """Touching one parameter changes the digest."""
        before = checkpoint_digest(tiny_model, tiny_run_config)
        tiny_model.parameters()[0].values[...] += 1.0
        assert checkpoint_digest(tiny_model, tiny_run_config) != before


class TestCorruption:
    """Damaged files raise ArtifactMismatchError."""

    def write(self, tmp_path, data):
        path = tmp_path / 'bad.flc'
        path.write_bytes(data)
        return str(path)

    def test_bad_magic(self, tmp_path, tiny_model, tiny_run_config):
        data = b'XXXX' + checkpoint_bytes(tiny_model, tiny_run_config)[len(MAGIC):]
        with pytest.raises(ArtifactMismatchError, match='magic'):
            read_checkpoint(self.write(tmp_path, data))

    def test_truncated(self, tmp_path, tiny_model, tiny_run_config):
        data = checkpoint_bytes(tiny_model, tiny_run_config)[:-3]
        with pytest.raises(ArtifactMismatchError, match='truncated'):
            read_checkpoint(self.write(tmp_path, data))

    def test_trailing_bytes(self, tmp_path, tiny_model, tiny_run_config):
        data = checkpoint_bytes(tiny_model, tiny_run_config) + b'\x00'
        with pytest.raises(ArtifactMismatchError, match='trailing'):
            read_checkpoint(self.write(tmp_path, data))

    def test_missing_file(self, tmp_path):
        with pytest.raises(ArtifactMismatchError):
            read_checkpoint(str(tmp_path / 'absent.flc'))


class TestHeaderMismatch:
    """The header must describe the stored tensors."""

    def test_wrong_width(self, tmp_path, tiny_model, tiny_run_config):
        """A header with another k cannot load these tensors."""
        header = dump_run_config(tiny_run_config.model_copy(
            update={'network': tiny_run_config.network.model_copy(update={'k': 16})}))
        path = tmp_path / 'wide.flc'
        path.write_bytes(encode_checkpoint(tiny_model.state_dict(), header))
        with pytest.raises(ArtifactMismatchError, match='shape'):
            load_model(str(path))

    def test_wrong_modality(self, tmp_path, tiny_model, tiny_run_config):
        """A pc-only header finds unexpected image tensors."""
        header = dump_run_config(tiny_run_config.model_copy(
            update={'network': tiny_run_config.network.model_copy(update={'modality': 'pc'})}))
        path = tmp_path / 'pc.flc'
        path.write_bytes(encode_checkpoint(tiny_model.state_dict(), header))
        with pytest.raises(ArtifactMismatchError, match='unexpected'):
            load_model(str(path))

    def test_invalid_header(self, tmp_path, tiny_model):
        """A header that is not a run configuration is rejected."""
        path = tmp_path / 'junk.flc'
        path.write_bytes(encode_checkpoint(tiny_model.state_dict(), 'network.k = -1\n'))
        with pytest.raises(ArtifactMismatchError, match='header'):
            read_checkpoint(str(path))
