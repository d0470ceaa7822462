# src/run_experiment.py

import argparse
import json
import logging
import os
import sys

from dotenv import load_dotenv

from src import experiments
from src.errors import EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC, EXIT_OK, ArtifactIOError, ConfigError, NumericalError
from src.persistence import config_utils

# --- Configure Logging ---
logging.basicConfig(level=logging.INFO, format='%(asctime)s - %(levelname)s - [%(name)s] %(message)s')
log = logging.getLogger(__name__)

# --- Load Environment Variables ---
# The project .env only holds runtime defaults; experiment configs are separate files.
script_dir = os.path.dirname(os.path.abspath(__file__))
project_root = os.path.dirname(script_dir)
dotenv_path = os.path.join(project_root, '.env')
if os.path.exists(dotenv_path):
    load_dotenv(dotenv_path=dotenv_path)

# --- Get Configuration from Environment ---
LOG_LEVEL = os.getenv("LOG_LEVEL", "INFO").upper()
DEFAULT_THREADS = int(os.getenv("DEFAULT_THREADS") or os.cpu_count() or 1)
DEFAULT_OUTPUT_DIR = os.getenv("DEFAULT_OUTPUT_DIR")


def build_parser():
    parser = argparse.ArgumentParser(prog="run_experiment",
                                     description="Malliavin weight sampling for colored-noise driven systems")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="Run an experiment and write its artifacts")
    run.add_argument("--config", required=True, help="Experiment config file (KEY=value lines)")
    run.add_argument("--threads", type=int, default=DEFAULT_THREADS, help="Worker processes (default: CPU count)")
    run.add_argument("--seed", type=int, default=None, help="Override RNG_SEED")
    run.add_argument("--out", default=None, help="Override OUTPUT_DIR")

    validate = sub.add_parser("validate", help="Check a config file without running it")
    validate.add_argument("--config", required=True)

    calibrate = sub.add_parser("calibrate", help="Print the calibrated noise parameters")
    calibrate.add_argument("--config", required=True)

    oracle = sub.add_parser("oracle", help="Write analytic and moment-oracle curves (no simulation)")
    oracle.add_argument("--config", required=True)
    oracle.add_argument("--out", default=None, help="Override OUTPUT_DIR")
    return parser


def exit_code(error):
    """Maps a failure onto the process exit status."""
    if isinstance(error, ConfigError):
        return EXIT_CONFIG
    if isinstance(error, ArtifactIOError):
        return EXIT_IO
    if isinstance(error, NumericalError):
        return EXIT_NUMERIC
    return getattr(error, 'exit_code', EXIT_NUMERIC)


def _load(args):
    config = config_utils.load_config(args.config)
    overrides = {}
    if getattr(args, 'seed', None) is not None:
        overrides['RNG_SEED'] = args.seed
    out = getattr(args, 'out', None) or (DEFAULT_OUTPUT_DIR if 'OUTPUT_DIR' not in config.explicit else None)
    if out:
        overrides['OUTPUT_DIR'] = out
    return config.with_overrides(**overrides) if overrides else config


def command_run(args):
    if args.threads < 1:
        raise ConfigError(f"--threads must be >= 1, got {args.threads}")
    config = _load(args)
    summary = experiments.process_experiment(config, threads=args.threads)
    print(json.dumps(summary, indent=2, sort_keys=True, default=float))
    return EXIT_OK


def command_validate(args):
    report = experiments.validate_experiment(args.config)
    for key in report['unknown']:
        log.warning(f"Unknown key: {key}")
    for message in report['warnings']:
        log.warning(message)
    for key in report['missing']:
        log.error(f"Missing required key: {key}")
    for message in report['errors']:
        log.error(message)
    print(json.dumps(report, indent=2))
    if report['missing'] or report['errors']:
        return EXIT_CONFIG
    log.info(f"{args.config} is valid")
    return EXIT_OK


def command_calibrate(args):
    info = experiments.describe_calibration(_load(args))
    print(json.dumps(info, indent=2, sort_keys=True, default=float))
    return EXIT_OK


def command_oracle(args):
    summary, artifacts = experiments.process_oracle(_load(args))
    log.info(f"Wrote {len(artifacts)} analytic artifacts")
    print(json.dumps(summary, indent=2, sort_keys=True, default=float))
    return EXIT_OK


COMMANDS = {'run': command_run, 'validate': command_validate, 'calibrate': command_calibrate, 'oracle': command_oracle}


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.getLogger().setLevel(LOG_LEVEL)
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, NumericalError, ArtifactIOError) as e:
        log.error(f"{args.command} failed: {e}")
        return exit_code(e)
    except Exception as e:
        log.error(f"Unexpected error during {args.command}: {e}", exc_info=True)
        return exit_code(e)


# --- Script Entry Point ---
if __name__ == "__main__":
    sys.exit(main())
