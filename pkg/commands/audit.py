import argparse
import logging
from pathlib import Path
from typing import Dict, Optional

import exports

_log = logging.getLogger(__name__)


def audit_command(trajectory: Path, output: Optional[Path] = None) -> Dict[str, Dict[str, float]]:
    """只从轨迹文件重算各流形块的隶属误差"""
    table = exports.read_trajectory(trajectory)
    audit = table.audit()
    if output is not None:
        exports.write_audit(output, audit)
    report = exports.audit_summary(audit)
    if not report:
        print("no manifold blocks")
    for name, stats in report.items():
        print(f"{name} max={stats['max']:.17g} mean={stats['mean']:.17g}")
    return report


def _handle(args: argparse.Namespace) -> int:
    audit_command(args.trajectory, args.output)
    return 0


def register(subparsers) -> None:
    parser = subparsers.add_parser("audit", help="recompute unit-norm violations from a trajectory file")
    parser.add_argument("trajectory", type=Path)
    parser.add_argument("-o", "--output", type=Path, help="optional per-node audit csv")
    parser.set_defaults(handler=_handle)
