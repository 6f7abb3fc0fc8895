"""Command-line entry point: one subcommand per pipeline stage plus simulate, run and config."""
import argparse
import logging
import os
import sys
from typing import List, Optional

import numpy as np
import pandas as pd

from exceptions import DataValidationError, TailDepError
from market_data_service import market_data_service
from models import PipelineConfig, ReturnPanel, SimConfig, SimGenerator
from pipeline_service import PipelineService, dump_config, load_config
from simulation_service import simulation_service


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="taildep", description="Extremal dependence pipeline for market returns")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI configuration file; defaults apply when omitted")
    common.add_argument("--seed", type=int, help="Override the configured seed")
    common.add_argument("--out", help="Override the configured output directory")

    commands = parser.add_subparsers(dest="command", required=True)
    for name in PipelineService.STAGES:
        commands.add_parser(name, parents=[common], help=f"run the {name} stage")
    commands.add_parser("run", parents=[common], help="run every stage in order")

    simulate = commands.add_parser("simulate", parents=[common], help="run a ground-truth generator")
    simulate.add_argument("--generator", choices=[g.value for g in SimGenerator], default=SimGenerator.DEMO.value)
    simulate.add_argument("-n", type=int, default=10_000, help="Sample size")
    simulate.add_argument("--param", action="append", default=[], metavar="KEY=VALUE",
                          help="Generator parameter (repeatable)")
    simulate.add_argument("--sim-config", help="INI file with a [simulation] section; overrides the flags")

    config = commands.add_parser("config", parents=[common], help="show the effective configuration")
    config.add_argument("--dump", action="store_true", help="print the configuration as INI text")
    return parser


def resolve_config(args: argparse.Namespace) -> PipelineConfig:
    config = load_config(args.config) if args.config else PipelineConfig()
    updates = {}
    if args.seed is not None:
        updates['seed'] = args.seed
    if args.out:
        updates['output_dir'] = args.out
    if not updates:
        return config
    try:
        return PipelineConfig(**{**config.model_dump(), **updates})
    except ValueError as e:
        raise DataValidationError(f"invalid override: {str(e)}")


def run_simulate(args: argparse.Namespace, config: PipelineConfig) -> None:
    if args.sim_config:
        sim = simulation_service.read_sim_config(args.sim_config)
    else:
        params = {}
        for item in args.param:
            key, sep, value = item.partition("=")
            if not sep:
                raise DataValidationError(f"parameter '{item}' is not KEY=VALUE")
            params[key.strip()] = value.strip()
        try:
            sim = SimConfig(seed=config.seed, n=args.n, generator=SimGenerator(args.generator), params=params)
        except ValueError as e:
            raise DataValidationError(f"invalid simulation settings: {str(e)}")

    os.makedirs(config.output_dir, exist_ok=True)
    simulation_service.write_sim_config(sim, os.path.join(config.output_dir, "simulation.ini"))
    if sim.generator == SimGenerator.DEMO:
        path = os.path.join(config.output_dir, "demo_prices.csv")
        market_data_service.write_prices(simulation_service.demo_prices(sim.seed), path)
    else:
        result = simulation_service.simulate(sim)
        path = os.path.join(config.output_dir, "simulated.csv")
        if isinstance(result, ReturnPanel):
            market_data_service.write_panel(result, path)
        else:
            values = np.asarray(result)
            columns = ['x'] if values.ndim == 1 else ['x', 'y']
            pd.DataFrame(values.reshape(len(values), -1), columns=columns).to_csv(
                path, index=False, float_format='%.17g', lineterminator='\n')
    logging.info(f"Wrote {sim.generator.value} sample to {path}")


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        config = resolve_config(args)
        if args.command == "config":
            sys.stdout.write(dump_config(config))
            return 0
        if args.command == "simulate":
            run_simulate(args, config)
            return 0
        service = PipelineService(config)
        if args.command == "run":
            service.run_pipeline()
        else:
            service.run_stage(args.command)
        return 0
    except TailDepError as e:
        logging.error(str(e))
        print(f"error: {e}", file=sys.stderr)
        return e.exit_code


if __name__ == "__main__":
    sys.exit(main())
