"""
Command application - subcommand routers on top of argparse
Routers collect command handlers with their arguments; the application includes
routers, parses argv and turns every failure into its exit code
"""

import argparse
import logging
import traceback
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

from geowalk.core.errors import EXIT_FAILURE, EXIT_OK, EXIT_USAGE, GeoWalkError
from geowalk.core.log import setup_logging

logger = logging.getLogger(__name__)

Argument = Tuple[Tuple[str, ...], Dict]


def arg(*flags: str, **kwargs) -> Argument:
    return flags, kwargs


@dataclass
class Command:
    name: str
    handler: Callable[[argparse.Namespace], int]
    help: str
    arguments: List[Argument] = field(default_factory=list)


class CommandRouter:
    def __init__(self, common: Sequence[Argument] = ()):
        self.common = list(common)
        self.commands: List[Command] = []

    def command(self, name: str, help: str = "", arguments: Sequence[Argument] = ()):
        def register(handler):
            self.commands.append(Command(name, handler, help, self.common + list(arguments)))
            return handler

        return register


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage()
        raise _UsageError(message)


class CommandApp:
    def __init__(self, prog: str, description: str = ""):
        self.parser = _Parser(prog=prog, description=description)
        self.parser.add_argument("--log-level", default=None, help="override GEOWALK_LOG_LEVEL")
        self.subparsers = self.parser.add_subparsers(dest="command", metavar="<command>", parser_class=_Parser)
        self.commands: Dict[str, Command] = {}

    def include_router(self, router: CommandRouter):
        for command in router.commands:
            sub = self.subparsers.add_parser(command.name, help=command.help, description=command.help)
            for flags, kwargs in command.arguments:
                sub.add_argument(*flags, **kwargs)
            self.commands[command.name] = command

    def run(self, argv: Optional[Sequence[str]] = None) -> int:
        try:
            args = self.parser.parse_args(argv)
        except _UsageError as e:
            logger.error(f"usage error: {e}")
            return EXIT_USAGE
        try:
            setup_logging(args.log_level)
        except ValueError as e:
            logger.error(f"usage error: {e}")
            return EXIT_USAGE
        if not args.command:
            self.parser.print_help()
            return EXIT_USAGE

        try:
            code = self.commands[args.command].handler(args)
            return EXIT_OK if code is None else int(code)
        except GeoWalkError as e:
            logger.error(f"{args.command} failed: {e.detail}")
            return e.exit_code
        except Exception:
            logger.error(f"{args.command} failed unexpectedly:\n{traceback.format_exc()}")
            return EXIT_FAILURE
