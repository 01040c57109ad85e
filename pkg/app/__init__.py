# __init__.py
import argparse
import logging
import sys

from config import VERSION, Config, RunConfig, load_config, override
from models.errors import ConfigError

logger = logging.getLogger(__name__)

LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_FAILURE = 2


class UsageError(ConfigError):
    pass


class ArgumentParser(argparse.ArgumentParser):
    """Raises instead of exiting so run() owns the exit code"""

    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def create_app(verbose: bool = False) -> ArgumentParser:
    """Configure logging and build the command-line parser from the registered commands"""
    logging.basicConfig(level=logging.DEBUG if verbose else logging.INFO, format=LOG_FORMAT, force=True)

    from .routes import main

    parser = ArgumentParser(prog="gaot", description="Geometry-aware operator transformer for PDEs on point clouds")
    parser.add_argument("--version", action="version", version=f"%(prog)s {VERSION}")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=ArgumentParser)
    for name, (_, help_text, flags) in main.handlers.items():
        cmd = sub.add_parser(name, help=help_text)
        cmd.add_argument("--config", help="run configuration file")
        cmd.add_argument("--seed", help="top-level seed ([run] seed)")
        cmd.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                         help="override one configuration value (repeatable)")
        cmd.add_argument("--run_dir", default="", help="parent directory of the per-run output directory")
        cmd.add_argument("--verbose", action="store_true", help="debug logging")
        for option, section, key, flag_help in flags:
            cmd.add_argument(option, dest=f"{section}.{key}", help=flag_help)
    return parser


def resolve_config(args: argparse.Namespace, flags: tuple) -> RunConfig:
    rc = load_config(args.config) if args.config else RunConfig()
    for item in args.set:
        target, sep, value = item.partition("=")
        section, dot, key = target.strip().partition(".")
        if not sep or not dot:
            raise UsageError(f"--set expects SECTION.KEY=VALUE, got '{item}'")
        override(rc, section, key, value)
    if args.seed is not None:
        override(rc, "run", "seed", args.seed)
    for _, section, key, _ in flags:
        value = getattr(args, f"{section}.{key}")
        if value is not None:
            override(rc, section, key, value)
    return rc


def run(argv) -> int:
    """Parse ``argv``, run one command, return the process exit code"""
    from .routes import main, make_run_dir, write_manifest

    argv = list(argv)
    try:
        parser = create_app(verbose="--verbose" in argv)
        args = parser.parse_args(argv)
        if args.command is None:
            parser.print_help()
            raise UsageError(f"a command is required: {', '.join(main.handlers)}")
        handler, _, flags = main.handlers[args.command]
        rc = resolve_config(args, flags)
    except SystemExit as exc:
        return int(exc.code or 0)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE

    try:
        run_dir = make_run_dir(args.command, rc.run.seed, args.run_dir)
        write_manifest(run_dir, args.command, rc, argv)
        logger.info("🚀 %s -> %s", args.command, run_dir)
        handler(rc, run_dir)
        write_manifest(run_dir, args.command, rc, argv)
    except ConfigError as exc:
        logger.error("%s", exc)
        return EXIT_USAGE
    except Exception as exc:
        logger.debug("command '%s' failed", args.command, exc_info=True)
        logger.error("❌ %s failed: %s", args.command, exc)
        return EXIT_FAILURE
    return EXIT_OK


__all__ = ["create_app", "run", "Config"]
