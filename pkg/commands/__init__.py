import argparse

from commands import audit, plotdata, run

# 子命令注册表，每个模块提供 register(subparsers)
COMMANDS = (run, audit, plotdata)


def register_all(subparsers: argparse._SubParsersAction) -> None:
    for module in COMMANDS:
        module.register(subparsers)
