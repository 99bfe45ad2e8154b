"""
Command-line surface: flags, exit codes and output files.
"""
import json
import os

import pytest

TINY_NETWORK = """\
# tiny widths for a fast smoke run
network.k = 8
network.pc_channels = 4, 4, 8
network.image_channels = 4, 8
batch.initial_size = 4
batch.max_size = 8
"""


@pytest.fixture
def tiny_config(tmp_path):
    """Config file with tiny network widths."""
    path = tmp_path / 'tiny.conf'
    path.write_text(TINY_NETWORK)
    return str(path)


class TestHelp:
    """Usage text and usage errors."""

    def test_lists_commands(self, runner, cli):
        result = runner.invoke(cli, ['--help'])
        assert result.exit_code == 0
        for name in ('gen-data', 'train', 'eval', 'diagnose', 'gradcheck'):
            assert name in result.output

    def test_lists_shared_flags(self, runner, cli):
        result = runner.invoke(cli, ['train', '-h'])
        assert result.exit_code == 0
        for flag in ('--config', '--seed', '--threads', '--precision', '--out', '--epochs', '--alpha'):
            assert flag in result.output

    def test_unknown_flag(self, runner, cli):
        result = runner.invoke(cli, ['gen-data', '--bogus'])
        assert result.exit_code == 2

    def test_bad_precision(self, runner, cli):
        result = runner.invoke(cli, ['gradcheck', '--precision', 'f16'])
        assert result.exit_code == 2


class TestGenData:
    """gen-data writes a dataset directory."""

    def test_writes_index(self, runner, cli, tmp_path):
        out = str(tmp_path / 'data')
        result = runner.invoke(cli, ['gen-data', '--out', out, '--places', '4', '--traversals', '3',
                                     '--points', '64', '--image-size', '32', '--variants', '1'])
        assert result.exit_code == 0, result.output
        assert '[OK] wrote 12 elements' in result.output
        with open(os.path.join(out, 'index.json')) as f:
            assert len(json.load(f)) == 12

    def test_spacing_too_small(self, runner, cli, tmp_path):
        result = runner.invoke(cli, ['gen-data', '--out', str(tmp_path / 'd'), '--spacing', '40'])
        assert result.exit_code == 2
        assert '[ERROR]' in result.output and '50' in result.output

    def test_spurious_self_check(self, runner, cli, tmp_path):
        result = runner.invoke(cli, ['gen-data', '--out', str(tmp_path / 'd'), '--places', '4',
                                     '--traversals', '3', '--points', '64', '--image-size', '32',
                                     '--variants', '1', '--spurious-rgb'])
        assert result.exit_code == 0, result.output
        assert 'spurious-cue self-check PASS' in result.output

    def test_invalid_config_key(self, runner, cli, tmp_path):
        path = tmp_path / 'bad.conf'
        path.write_text('network.bogus = 1\n')
        result = runner.invoke(cli, ['gen-data', '--out', str(tmp_path / 'd'), '--config', str(path)])
        assert result.exit_code == 2
        assert 'bogus' in result.output

    def test_malformed_config_line(self, runner, cli, tmp_path):
        path = tmp_path / 'bad.conf'
        path.write_text('no equals sign here\n')
        result = runner.invoke(cli, ['gen-data', '--out', str(tmp_path / 'd'), '--config', str(path)])
        assert result.exit_code == 2


class TestGradcheck:
    """gradcheck exit codes."""

    def test_single_op_passes(self, runner, cli, tmp_path):
        result = runner.invoke(cli, ['gradcheck', '--op', 'gem', '--out', str(tmp_path)])
        assert result.exit_code == 0, result.output
        assert 'gradient checks passed' in result.output
        assert os.path.exists(tmp_path / 'gradcheck.tsv')

    def test_large_step_fails(self, runner, cli):
        result = runner.invoke(cli, ['gradcheck', '--op', 'elementwise', '--eps', '1e-2'])
        assert result.exit_code == 3
        assert '[WARNING]' in result.output
        assert 'elementwise/pow/base' in result.output

    def test_unknown_op(self, runner, cli):
        result = runner.invoke(cli, ['gradcheck', '--op', 'softmax'])
        assert result.exit_code == 2

    def test_max_coords_must_be_positive(self, runner, cli):
        result = runner.invoke(cli, ['gradcheck', '--op', 'gem', '--max-coords', '0'])
        assert result.exit_code == 2


class TestEvaluate:
    """eval on a trained checkpoint."""

    def args(self, trained_run, tiny_dataset, *extra):
        return ['eval', '--checkpoint', trained_run.checkpoint, '--data', tiny_dataset.root, *extra]

    def test_report(self, runner, cli, trained_run, tiny_dataset, tmp_path):
        result = runner.invoke(cli, self.args(trained_run, tiny_dataset, '--out', str(tmp_path)))
        assert result.exit_code == 0, result.output
        assert 'metric\tn\tvalue' in result.output
        assert 'recall\t1\t' in result.output
        assert os.path.exists(tmp_path / 'report.tsv')

    def test_deterministic(self, runner, cli, trained_run, tiny_dataset, tmp_path):
        """Two runs write byte-identical reports."""
        for name in ('a', 'b'):
            result = runner.invoke(cli, self.args(trained_run, tiny_dataset, '--out', str(tmp_path / name)))
            assert result.exit_code == 0, result.output
        assert (tmp_path / 'a' / 'report.tsv').read_bytes() == (tmp_path / 'b' / 'report.tsv').read_bytes()

    def test_rankings(self, runner, cli, trained_run, tiny_dataset, tmp_path):
        result = runner.invoke(cli, self.args(trained_run, tiny_dataset, '--dump-rankings', '--out', str(tmp_path)))
        assert result.exit_code == 0, result.output
        lines = (tmp_path / 'rankings.tsv').read_text().splitlines()
        assert lines[0] == 'query\trank\tid\tdistance'
        assert len(lines) == 1 + 4 * 8

    def test_single_head(self, runner, cli, trained_run, tiny_dataset):
        result = runner.invoke(cli, self.args(trained_run, tiny_dataset, '--modality', 'pc'))
        assert result.exit_code == 0, result.output
        assert '# head\tpc' in result.output

    def test_all_pairs(self, runner, cli, trained_run, tiny_dataset):
        result = runner.invoke(cli, self.args(trained_run, tiny_dataset, '--protocol', 'all-pairs'))
        assert result.exit_code == 0, result.output
        assert '# protocol\tall-pairs' in result.output

    def test_width_mismatch(self, runner, cli, trained_run, tiny_dataset):
        result = runner.invoke(cli, self.args(trained_run, tiny_dataset, '--k', '16'))
        assert result.exit_code == 4

    def test_corrupt_checkpoint(self, runner, cli, tiny_dataset, tmp_path):
        path = tmp_path / 'bad.flc'
        path.write_bytes(b'not a checkpoint')
        result = runner.invoke(cli, ['eval', '--checkpoint', str(path), '--data', tiny_dataset.root])
        assert result.exit_code == 4

    def test_missing_dataset(self, runner, cli, trained_run, tmp_path):
        result = runner.invoke(cli, ['eval', '--checkpoint', trained_run.checkpoint, '--data', str(tmp_path)])
        assert result.exit_code == 2


class TestDiagnose:
    """diagnose prints the active-triplet block."""

    def test_requires_validation_data(self, runner, cli, trained_run, tiny_dataset):
        result = runner.invoke(cli, ['diagnose', '--checkpoint', trained_run.checkpoint,
                                     '--data', tiny_dataset.root])
        assert result.exit_code == 2

    def test_block(self, runner, cli, trained_run, tiny_dataset, tmp_path):
        result = runner.invoke(cli, ['diagnose', '--checkpoint', trained_run.checkpoint,
                                     '--data', tiny_dataset.root, '--val-data', tiny_dataset.root,
                                     '--batches', '2', '--batch-size', '4', '--out', str(tmp_path)])
        assert result.exit_code == 0, result.output
        assert '[active_triplets]' in result.output
        assert (tmp_path / 'diagnostic.tsv').read_text().startswith('[active_triplets]')


class TestTrain:
    """train end to end on a generated dataset."""

    def test_smoke(self, runner, cli, tiny_config, tmp_path):
        out = str(tmp_path / 'run')
        result = runner.invoke(cli, ['train', '--config', tiny_config, '--out', out, '--epochs', '1',
                                     '--places', '4', '--traversals', '3', '--points', '256',
                                     '--image-size', '32', '--variants', '1'])
        assert result.exit_code == 0, result.output
        assert '[OK] checkpoint' in result.output
        assert os.path.exists(os.path.join(out, 'data', 'index.json'))
        with open(os.path.join(out, 'train.tsv')) as f:
            assert '# optimizer.epochs = 1' in f.read()

    def test_invalid_weights(self, runner, cli, tiny_config, tmp_path):
        result = runner.invoke(cli, ['train', '--config', tiny_config, '--out', str(tmp_path),
                                     '--alpha', '-1', '--places', '4', '--traversals', '3'])
        assert result.exit_code == 2
