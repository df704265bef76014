import os
from unittest.mock import patch

import numpy as np

from rprnet.app import main
from rprnet.checkpoint import load_checkpoint, save_checkpoint
from rprnet.config import RprConfig
from rprnet.network import RprNet, count_config_parameters
from rprnet.rif import load_rifs
from rprnet.util import read_array, read_records


def _run(capsys, *argv):
    code = main(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


class TestParams:
    def test_desk_count(self, capsys):
        code, out, _ = _run(capsys, 'params', '--desk')
        assert code == 0
        assert out.strip() == "2479609"

    def test_config_file(self, capsys, tiny_config_file, tiny_config):
        code, out, _ = _run(capsys, 'params', '--config', tiny_config_file)
        assert code == 0 and int(out.strip()) == count_config_parameters(tiny_config)


class TestErrors:
    def test_unknown_config_key(self, capsys, tmp_path):
        """Test that a config error exits 2 with a single stderr line."""
        path = tmp_path / "bad.cfg"
        path.write_text("network.depth = 3\n")
        code, _, err = _run(capsys, 'params', '--config', str(path))
        assert code == 2
        lines = err.strip().splitlines()
        assert len(lines) == 1 and lines[0].startswith("error category=config-error")

    def test_missing_subcommand(self, capsys):
        code, _, err = _run(capsys)
        assert code == 4
        assert "category=invalid-argument" in err

    def test_missing_required_path(self, capsys):
        code, _, err = _run(capsys, 'embed')
        assert code == 4 and "--checkpoint" in err

    def test_malformed_database(self, capsys, tmp_path):
        path = tmp_path / "bad.rprdb"
        path.write_bytes(b'garbage')
        code, _, err = _run(capsys, 'retrieve', '--database', str(path), '--queries', str(path))
        assert code == 3
        assert err.startswith("error category=format-error")

    def test_negative_seed(self, capsys):
        code, _, err = _run(capsys, 'params', '--seed=-1')
        assert code == 4
        assert err.startswith("error category=invalid-argument") and "--seed" in err

    def test_help_exits_cleanly(self, capsys):
        code, out, _ = _run(capsys, '--help')
        assert code == 0 and "Exit codes" in out


class TestChecks:
    def test_gradcheck(self, capsys):
        code, out, _ = _run(capsys, 'gradcheck')
        assert code == 0
        assert out.splitlines()[-1].startswith("network ")

    def test_verify_invariance(self, capsys, tmp_path, tiny_config, tiny_config_file):
        path = tmp_path / "tiny.rprck"
        save_checkpoint(path, RprNet(tiny_config), config_text=open(tiny_config_file).read())
        code, out, _ = _run(capsys, 'verify-invariance', '--checkpoint', str(path), '--trials', '2', '--mode', 'so3')
        assert code == 0
        assert "max_descriptor_deviation" in out

    def test_verify_invariance_dumps_rifs(self, capsys, tmp_path, tiny_config, tiny_config_file):
        path = tmp_path / "tiny.rprck"
        out_dir = tmp_path / "rifs"
        save_checkpoint(path, RprNet(tiny_config), config_text=open(tiny_config_file).read())
        code, _, _ = _run(capsys, 'verify-invariance', '--checkpoint', str(path), '--trials', '2', '--mode', 'so3',
                          '--out', str(out_dir))
        assert code == 0
        original, rotated = load_rifs(out_dir / "rifs.bin"), load_rifs(out_dir / "rifs_rotated.bin")
        assert original.shape == (tiny_config.n_seeds, tiny_config.k, 11)
        np.testing.assert_allclose(rotated, original, rtol=0, atol=1e-9)

    def test_verify_invariance_logs_config_once(self, capsys):
        """Test that the desk fallback model does not resolve the config a second time."""
        with patch.object(RprConfig, 'log_resolved') as mock_log_resolved:
            code, _, _ = _run(capsys, 'verify-invariance', '--trials', '1')
        assert code == 0
        mock_log_resolved.assert_called_once()


class TestPipeline:
    def test_synth_train_embed_retrieve_and_sweep(self, capsys, tmp_path, tiny_config_file):
        """Test the full command chain and that the level-0 sweep row equals retrieve."""
        data = tmp_path / "data"
        model = tmp_path / "model.rprck"
        db, queries = tmp_path / "db.rprdb", tmp_path / "queries.rprdb"
        retrieve_out, sweep_out = tmp_path / "retrieve.jsonl", tmp_path / "sweep.jsonl"
        common = ['--config', tiny_config_file, '--seed', '3']

        assert _run(capsys, 'synth', *common, '--out', str(data))[0] == 0
        assert sorted(os.listdir(data)) == ['clouds', 'database.csv', 'queries.csv', 'train.csv']

        code, out, _ = _run(capsys, 'train', *common, '--manifest', str(data / "train.csv"), '--out', str(model))
        assert code == 0 and out.count("epoch ") == 2
        assert load_checkpoint(model).epoch == 2
        assert len(read_records(f"{model}.metrics.jsonl")) == 2

        for manifest, out_path in ((data / "database.csv", db), (data / "queries.csv", queries)):
            code, _, _ = _run(capsys, 'embed', '--checkpoint', str(model), '--manifest', str(manifest), '--out', str(out_path))
            assert code == 0

        code, _, _ = _run(capsys, 'retrieve', '--database', str(db), '--queries', str(queries), '--out', str(retrieve_out))
        assert code == 0
        code, out, _ = _run(capsys, 'eval-rotation', '--checkpoint', str(model), '--database', str(data / "database.csv"),
                            '--queries', str(data / "queries.csv"), '--levels', '0,90', '--out', str(sweep_out))
        assert code == 0
        assert len(out.strip().splitlines()) == 4

        retrieved = read_records(retrieve_out)[0]
        swept = read_records(sweep_out)
        assert [r['level'] for r in swept] == [0.0, 90.0]
        assert swept[0]['recall_at_1'] == retrieved['recall_at_1']
        assert swept[0]['recall_curve'] == retrieved['recall_curve']

    def test_resume_training(self, capsys, tmp_path, tiny_config_file):
        data = tmp_path / "data"
        first, second = tmp_path / "first.rprck", tmp_path / "second.rprck"
        _run(capsys, 'synth', '--config', tiny_config_file, '--out', str(data))
        _run(capsys, 'train', '--config', tiny_config_file, '--manifest', str(data / "train.csv"), '--out', str(first),
             '--epochs', '1')
        code, _, _ = _run(capsys, 'train', '--config', tiny_config_file, '--manifest', str(data / "train.csv"),
                          '--out', str(second), '--checkpoint', str(first), '--epochs', '1')
        assert code == 0
        assert load_checkpoint(second).epoch == 2
        assert [r['epoch'] for r in read_records(f"{second}.metrics.jsonl")] == [2]


class TestFeatures:
    def test_dump_original_and_rotated(self, capsys, tmp_path, tiny_config, tiny_config_file, synth_dir):
        """Test that per-seed features of a rotated copy match the original."""
        _, manifests = synth_dir
        path = tmp_path / "tiny.rprck"
        out_dir = tmp_path / "features"
        save_checkpoint(path, RprNet(tiny_config), config_text=open(tiny_config_file).read())
        code, out, _ = _run(capsys, 'features', '--checkpoint', str(path), '--manifest', manifests['queries'],
                            '--out', str(out_dir), '--axis', 'so3')
        assert code == 0 and out.startswith("dumped features of 4 clouds")
        assert len(os.listdir(out_dir)) == 8
        for i in range(4):
            original = read_array(out_dir / f"{i:05d}.feat")
            rotated = read_array(out_dir / f"{i:05d}_rotated.feat")
            assert original.shape == (tiny_config.n_seeds, tiny_config.final_channels)
            np.testing.assert_allclose(rotated, original, rtol=0, atol=1e-6)

