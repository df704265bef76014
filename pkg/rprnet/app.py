# Copyright (c) rprnet contributors

import logging
import os
import sys

import numpy as np
from traitlets import Bool, Integer, Unicode
from traitlets.config import Application

from rprnet._version import __version__
from rprnet.api import CheckFailed, ExitCode, InvalidArgument, RotationMode, RprNetError
from rprnet.autodiff import op_grad_checks
from rprnet.checkpoint import load_checkpoint
from rprnet.config import RprConfig, model_from_checkpoint
from rprnet.dataset import load_clouds, read_manifest
from rprnet.geometry import apply_rotation, build_group_index, normalize_cloud, random_rotation
from rprnet.network import RprNet, count_config_parameters, parameter_shapes
from rprnet.retrieval import (PlaceDatabase, embed_clouds, evaluate, format_reports, load_database,
                              rotation_sweep, save_database, write_report_records)
from rprnet.rif import assemble_rifs, dump_rifs
from rprnet.synthetic import synth_generate, write_synth_dataset
from rprnet.training import Trainer, TrainingSample, network_grad_check
from rprnet.util import write_array

log = logging.getLogger(__name__)

RIF_TOLERANCE = 1e-9
SHARED_INDEX_TOLERANCE = 1e-8
RECOMPUTED_INDEX_TOLERANCE = 1e-6
OP_GRAD_TOLERANCE = 1e-6
NETWORK_GRAD_TOLERANCE = 1e-4
INVARIANCE_CLOUD_SIZE = 512

EXIT_CODES_HELP = """Exit codes:
    0  success
    1  internal-error
    2  config-error (bad config file, unknown key, bad command line)
    3  format-error (malformed cloud, manifest, checkpoint or database file)
    4  invalid-argument / invalid-cloud / shape-error
    5  numerical-error (non-finite loss or gradient)
    6  empty-batch / empty-database
    7  check-failed (verify-invariance or gradcheck out of tolerance)
On failure a single line 'error category=<category> message="<text>"' is written to stderr.
"""

class RprNetCommand(Application):
    """Shared options and config resolution of every subcommand."""

    version = __version__

    config_file = Unicode('', help="Config file of 'section.key = value' lines.", config=True)
    seed = Integer(None, allow_none=True, help="Seed for every randomized step (train.seed, synth.structure_seed).", config=True)
    out = Unicode('', help="Output path (a directory for synth, features and verify-invariance).", config=True)
    checkpoint = Unicode('', help="Checkpoint file.", config=True)
    manifest = Unicode('', help="Cloud manifest (path,northing,easting).", config=True)
    queries = Unicode('', help="Query descriptor database (.rprdb) for retrieve, query manifest (.csv) for eval-rotation.", config=True)
    database = Unicode('', help="Descriptor database (.rprdb) for retrieve, database manifest (.csv) for eval-rotation.", config=True)
    levels = Unicode('', help="Comma-separated rotation levels in degrees.", config=True)
    axis = Unicode('', help="Rotation mode of the sweep or invariance check: z or so3.", config=True)
    trials = Integer(100, help="Trials of verify-invariance.", config=True)
    epochs = Integer(None, allow_none=True, help="Training epochs (overrides train.epochs).", config=True)
    desk = Bool(False, help="Apply the desk-scale network preset.", config=True)

    aliases = {
        'config': 'RprNetCommand.config_file',
        'seed': 'RprNetCommand.seed',
        'out': 'RprNetCommand.out',
        'checkpoint': 'RprNetCommand.checkpoint',
        'manifest': 'RprNetCommand.manifest',
        'queries': 'RprNetCommand.queries',
        'database': 'RprNetCommand.database',
        'levels': 'RprNetCommand.levels',
        'axis': 'RprNetCommand.axis',
        'mode': 'RprNetCommand.axis',
        'trials': 'RprNetCommand.trials',
        'epochs': 'RprNetCommand.epochs',
    }
    flags = {
        'desk': ({'RprNetCommand': {'desk': True}}, "Desk-scale preset: n_seeds=256, k=16, channels=16, final=64."),
    }

    def build_config(self, desk: bool = None) -> RprConfig:
        overrides = {}
        if self.seed is not None:
            if self.seed < 0:
                raise InvalidArgument(f"--seed must be non-negative, got {self.seed}")
            overrides['train.seed'] = self.seed
            overrides['synth.structure_seed'] = self.seed
        if self.epochs is not None:
            overrides['train.epochs'] = self.epochs
        if self.levels:
            overrides['eval.levels'] = self.levels
        if self.axis:
            overrides['eval.axis'] = self.axis
        for name in ('out', 'checkpoint', 'manifest', 'queries', 'database'):
            if getattr(self, name):
                overrides[f"paths.{name}"] = getattr(self, name)
        return RprConfig(overrides, self.config_file or None, self.desk if desk is None else desk)

    def resolve_config(self) -> RprConfig:
        config = self.build_config()
        config.log_resolved(self.log)
        return config

    def require(self, config: RprConfig, name: str) -> str:
        value = config.path(name)
        if not value:
            raise InvalidArgument(f"'{self.name}' needs --{name}")
        return value

    def run(self, config: RprConfig) -> int:
        raise NotImplementedError

    def start(self):
        return self.run(self.resolve_config())

class SynthCommand(RprNetCommand):
    name = 'synth'
    description = "Generate a synthetic place dataset with train, database and query manifests."

    def run(self, config):
        out_dir = self.require(config, 'out')
        manifests = write_synth_dataset(out_dir, synth_generate(config.synth))
        for split, path in manifests.items():
            print(f"{split}: {path}")
        return ExitCode.Success

class TrainCommand(RprNetCommand):
    name = 'train'
    description = "Train the network on a manifest, writing a checkpoint after every epoch."

    def run(self, config):
        manifest = read_manifest(self.require(config, 'manifest'))
        out = self.require(config, 'out')
        samples = [TrainingSample(cloud, entry.position) for cloud, entry in zip(load_clouds(manifest), manifest.entries)]
        training = config.training
        model = RprNet(config.network, seed=training.seed)
        metrics_path = config.path('metrics_log') or f"{out}.metrics.jsonl"
        trainer = Trainer(model, config.triplet, config.augment, config.batch, config.optimizer, training,
                          checkpoint_path=out, metrics_path=metrics_path, config_text=config.to_text())
        if config.path('checkpoint'):
            checkpoint = load_checkpoint(config.path('checkpoint'))
            checkpoint.apply_to(model, trainer.optimizer)
            trainer.epoch = checkpoint.epoch
            self.log.info(f"Resuming from epoch {checkpoint.epoch}")
        elif os.path.exists(metrics_path):
            os.remove(metrics_path)
        result = trainer.fit(samples, training.epochs)
        for m in result.history:
            print(f"epoch {m.epoch}: loss {m.loss:.6f} active_ratio {m.active_ratio:.3f} batch_size {m.batch_size}")
        return ExitCode.Success

class EmbedCommand(RprNetCommand):
    name = 'embed'
    description = "Embed every cloud of a manifest into a descriptor database."

    def run(self, config):
        model, _ = model_from_checkpoint(load_checkpoint(self.require(config, 'checkpoint')))
        manifest = read_manifest(self.require(config, 'manifest'), split='test')
        descriptors = embed_clouds(model, load_clouds(manifest))
        save_database(self.require(config, 'out'), PlaceDatabase(descriptors, manifest.positions))
        print(f"embedded {len(manifest)} clouds")
        return ExitCode.Success

class FeaturesCommand(RprNetCommand):
    name = 'features'
    description = "Dump per-seed fusion features of every cloud and of a randomly rotated copy."

    def run(self, config):
        model, _ = model_from_checkpoint(load_checkpoint(self.require(config, 'checkpoint')))
        manifest = read_manifest(self.require(config, 'manifest'), split='test')
        out_dir = self.require(config, 'out')
        os.makedirs(out_dir, exist_ok=True)
        mode = RotationMode(config.eval_axis)
        rng = np.random.default_rng(config.training.seed)
        for i, cloud in enumerate(load_clouds(manifest)):
            rotated = apply_rotation(cloud, random_rotation(int(rng.integers(0, 2 ** 31)), mode))
            write_array(os.path.join(out_dir, f"{i:05d}.feat"), model.embed_points(cloud))
            write_array(os.path.join(out_dir, f"{i:05d}_rotated.feat"), model.embed_points(rotated))
        self.log.info(f"Wrote {2 * len(manifest)} feature blocks to {out_dir}")
        print(f"dumped features of {len(manifest)} clouds")
        return ExitCode.Success

class RetrieveCommand(RprNetCommand):
    name = 'retrieve'
    description = "Evaluate query descriptors against a descriptor database."

    def run(self, config):
        db = load_database(self.require(config, 'database'))
        queries = load_database(self.require(config, 'queries'))
        report = evaluate(db, queries.descriptors, queries.positions, config.pos_match_radius)
        print(format_reports([report]))
        self.log.debug(f"recall@N curve: {report.recall_curve}")
        if config.path('out'):
            write_report_records(config.path('out'), [report])
        return ExitCode.Success

class EvalRotationCommand(RprNetCommand):
    name = 'eval-rotation'
    description = "Recall under random rotations of increasing level."

    def run(self, config):
        model, _ = model_from_checkpoint(load_checkpoint(self.require(config, 'checkpoint')))
        db_manifest = read_manifest(self.require(config, 'database'), split='test')
        query_manifest = read_manifest(self.require(config, 'queries'), split='test')
        db_clouds, query_clouds = load_clouds(db_manifest), load_clouds(query_manifest)
        seed = config.training.seed

        modes = [False, True] if config.rotate_database else [False]
        reports = []
        for rotate_database in modes:
            reports.extend(rotation_sweep(model, db_clouds, db_manifest.positions, query_clouds, query_manifest.positions,
                                          config.eval_levels, RotationMode(config.eval_axis), seed, rotate_database,
                                          config.pos_match_radius))
        print(format_reports(reports))
        if config.path('out'):
            write_report_records(config.path('out'), reports)
        return ExitCode.Success

class VerifyInvarianceCommand(RprNetCommand):
    name = 'verify-invariance'
    description = "Measure RIF and descriptor deviation under random rotations."

    def run(self, config):
        if config.path('checkpoint'):
            model, _ = model_from_checkpoint(load_checkpoint(config.path('checkpoint')))
        else:
            model = RprNet(self.build_config(desk=True).network, seed=config.training.seed)
        mode = RotationMode(config.eval_axis)
        rng = np.random.default_rng(config.training.seed)
        n_points = max(INVARIANCE_CLOUD_SIZE, model.config.n_seeds)
        out_dir = config.path('out')

        worst_rif = worst_shared = worst_recomputed = 0.0
        for trial in range(self.trials):
            cloud = normalize_cloud(rng.normal(size=(n_points, 3)))
            rotation = random_rotation(int(rng.integers(0, 2 ** 31)), mode)
            rotated = apply_rotation(cloud, rotation)
            group = build_group_index(cloud, model.config.n_seeds, model.config.k, model.config.fps_start)
            rifs = assemble_rifs(cloud[group.seed_ids], group, model.config.ss_sigma)
            rotated_rifs = assemble_rifs(rotated[group.seed_ids], group, model.config.ss_sigma)
            worst_rif = max(worst_rif, float(np.abs(rifs - rotated_rifs).max()))
            if out_dir and trial == 0:
                os.makedirs(out_dir, exist_ok=True)
                dump_rifs(os.path.join(out_dir, 'rifs.bin'), rifs)
                dump_rifs(os.path.join(out_dir, 'rifs_rotated.bin'), rotated_rifs)
            descriptor = model.embed(cloud, group)
            worst_shared = max(worst_shared, float(np.abs(descriptor - model.embed(rotated, group)).max()))
            worst_recomputed = max(worst_recomputed, float(np.abs(descriptor - model.embed(rotated)).max()))
            self.log.debug(f"Trial {trial}: rif {worst_rif:.3e}, shared {worst_shared:.3e}, recomputed {worst_recomputed:.3e}")

        print(f"max_rif_deviation {worst_rif:.3e}")
        print(f"max_descriptor_deviation_shared {worst_shared:.3e}")
        print(f"max_descriptor_deviation {worst_recomputed:.3e}")
        if worst_rif > RIF_TOLERANCE or worst_shared > SHARED_INDEX_TOLERANCE or worst_recomputed > RECOMPUTED_INDEX_TOLERANCE:
            raise CheckFailed(f"Invariance out of tolerance over {self.trials} {mode} trials: rif {worst_rif:.3e}, "
                              f"shared {worst_shared:.3e}, recomputed {worst_recomputed:.3e}")
        return ExitCode.Success

class GradcheckCommand(RprNetCommand):
    name = 'gradcheck'
    description = "Compare backprop against central differences for every op and a tiny network loss."

    def run(self, config):
        seed = config.training.seed
        op_errors = op_grad_checks(seed)
        for op, error in op_errors.items():
            print(f"{op} {error:.3e}")
        network_error = network_grad_check(seed)
        print(f"network {network_error:.3e}")
        failing = [op for op, error in op_errors.items() if error > OP_GRAD_TOLERANCE]
        if failing or network_error > NETWORK_GRAD_TOLERANCE:
            raise CheckFailed(f"Gradient check failed for {', '.join(failing) or 'network'} "
                              f"(network error {network_error:.3e})")
        return ExitCode.Success

class ParamsCommand(RprNetCommand):
    name = 'params'
    description = "Print the trainable-parameter count of the configured network."

    def run(self, config):
        network = config.network
        blocks = {}
        for name, shape in parameter_shapes(network).items():
            block = name.split('.', 1)[0]
            blocks[block] = blocks.get(block, 0) + int(np.prod(shape))
        for block, count in blocks.items():
            self.log.debug(f"{block}: {count}")
        print(count_config_parameters(network))
        return ExitCode.Success

SUBCOMMANDS = (SynthCommand, TrainCommand, EmbedCommand, FeaturesCommand, RetrieveCommand, EvalRotationCommand,
               VerifyInvarianceCommand, GradcheckCommand, ParamsCommand)

class RprNetApp(Application):
    name = 'rprnet'
    version = __version__
    description = "Rotation-invariant place recognition descriptors for point clouds.\n\n" + EXIT_CODES_HELP
    subcommands = {cls.name: (cls, cls.description) for cls in SUBCOMMANDS}

    def start(self):
        if self.subapp is None:
            self.print_subcommands()
            raise InvalidArgument(f"Missing subcommand, expected one of {', '.join(self.subcommands)}")
        return self.subapp.start()

def _fail(error: RprNetError) -> int:
    log.debug(f"{type(error).__name__}: {error}")
    print(error.one_line(), file=sys.stderr)
    return int(error.exit_code)

def main(argv=None) -> int:
    for cls in (RprNetApp,) + SUBCOMMANDS:
        cls.clear_instance()
    app = RprNetApp.instance()
    try:
        app.initialize(argv)
        code = app.start()
    except RprNetError as e:
        return _fail(e)
    except SystemExit as e:
        if e.code in (0, None):
            return int(ExitCode.Success)
        print('error category=config-error message="invalid command line"', file=sys.stderr)
        return int(ExitCode.ConfigError)
    except Exception as e:
        log.exception("Unexpected failure")
        message = str(e).replace('\n', ' ').replace('"', "'")
        print(f'error category=internal-error message="{type(e).__name__}: {message}"', file=sys.stderr)
        return int(ExitCode.InternalError)
    return int(code or ExitCode.Success)
