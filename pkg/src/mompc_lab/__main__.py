import sys

from mompc_lab.runner import mompc_lab_app
from mompc_lab.settings import CliArgs, RuntimeEnv


def main():
    """Entry point of the application."""
    args = CliArgs()
    env = RuntimeEnv()

    sys.exit(mompc_lab_app(args=args, env=env))


if __name__ == "__main__":
    main()
