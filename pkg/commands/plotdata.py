import argparse
from pathlib import Path
from typing import Optional

import pandas as pd

import exports
from errors import ConfigError


def plotdata_command(trajectory: Path, quantity: str, output: Optional[Path] = None) -> pd.DataFrame:
    if quantity not in exports.PLOT_QUANTITIES:
        raise ConfigError(f"unknown quantity '{quantity}', valid: {', '.join(exports.PLOT_QUANTITIES)}")
    table = exports.read_trajectory(trajectory)
    frame = exports.plot_table(table, quantity)
    if output is None:
        output = Path(trajectory).with_name(f"{quantity}.csv")
    exports.write_plot_table(output, frame, quantity)
    return frame


def _handle(args: argparse.Namespace) -> int:
    plotdata_command(args.trajectory, args.quantity, args.output)
    return 0


def register(subparsers) -> None:
    parser = subparsers.add_parser("plotdata", help="write a plot-ready table derived from a trajectory file")
    parser.add_argument("trajectory", type=Path)
    parser.add_argument("quantity", choices=exports.PLOT_QUANTITIES)
    parser.add_argument("-o", "--output", type=Path)
    parser.set_defaults(handler=_handle)
