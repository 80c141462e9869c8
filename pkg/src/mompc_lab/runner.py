import asyncio
import logging

import open3d as o3d

from mompc_lab.constants import ExitCode
from mompc_lab.exceptions import ExperimentConfigError
from mompc_lab.experiments import EXPERIMENTS, ExperimentOutcome, JobPool
from mompc_lab.logging import log
from mompc_lab.settings import CliArgs, ExperimentConfig, RuntimeEnv, experiment_config_from_cli
from mompc_lab.utils import config_hash, write_json

O3D_VERBOSITY = {
    "DEBUG": o3d.utility.VerbosityLevel.Debug,
    "INFO": o3d.utility.VerbosityLevel.Warning,
    "WARNING": o3d.utility.VerbosityLevel.Warning,
    "ERROR": o3d.utility.VerbosityLevel.Error,
    "CRITICAL": o3d.utility.VerbosityLevel.Error,
}


class ResourceManager:
    """Manages cleanup of experiment resources."""

    def __init__(self):
        """Initialize the resource manager."""
        self.pool: JobPool | None = None

    async def cleanup(self) -> None:
        """Cancel jobs that are still running."""
        if self.pool is not None:
            log.debug("Cancelling outstanding jobs...")
            await self.pool.cancel()


class ExperimentBootstrap:
    """Handles experiment initialization."""

    def __init__(self, args: CliArgs, env: RuntimeEnv):
        """Initialize the bootstrap.

        Args:
            args: Parsed command line
            env: Process environment
        """
        self.args = args
        self.env = env

    def configure_logging(self) -> None:
        """Configure application logging."""
        log_level = getattr(logging, self.args.log_level.upper(), logging.INFO)
        log.setLevel(log_level)

        # Also quiet open3d's own console output
        o3d.utility.set_verbosity_level(O3D_VERBOSITY[self.args.log_level])

        log.debug("Log level set to: %s", self.args.log_level)

    def load_config(self) -> ExperimentConfig:
        """Load and validate the experiment file.

        Raises:
            ExperimentConfigError: If the file cannot be used
        """
        config = experiment_config_from_cli(self.args)
        log.info(
            "Running %s from %s (config %s, seed %d%s)",
            self.args.kind,
            self.args.config,
            config_hash(config),
            config.seed,
            ", reduced" if config.reduced else "",
        )
        return config


class ExperimentRunner:
    """Runs one experiment and records its resolved configuration."""

    def __init__(self, config: ExperimentConfig, resource_manager: ResourceManager):
        """Initialize the experiment runner.

        Args:
            config: Validated experiment configuration
            resource_manager: Resource manager owning the job pool
        """
        self.config = config
        self.resource_manager = resource_manager

    async def run(self, pool: JobPool) -> ExperimentOutcome:
        """Run the configured experiment."""
        self.resource_manager.pool = pool
        experiment = EXPERIMENTS[self.config.kind]
        write_json(self.config.output_dir / "config.json", self.config)
        try:
            outcome = await experiment(self.config, pool)
        except asyncio.CancelledError:
            log.info("Experiment cancelled, stopping jobs...")
            await self.resource_manager.cleanup()
            raise
        log.info(
            "%s finished: %d of %d jobs failed, %d files written to %s",
            outcome.kind,
            outcome.n_failed,
            outcome.n_jobs,
            len(outcome.outputs),
            self.config.output_dir,
        )
        return outcome


class MompcLab:
    """Experiment command of the multi-objective MPC toolkit."""

    def __init__(self):
        """Initialize the command."""
        self.resource_manager = ResourceManager()

    def __call__(self, args: CliArgs, env: RuntimeEnv) -> int:
        """Run the experiment named on the command line and return the exit code."""
        try:
            return asyncio.run(self._run(args, env))
        except KeyboardInterrupt:
            log.info("Received shutdown signal")
            return ExitCode.TOTAL_FAILURE
        except ExperimentConfigError as e:
            log.error("%s", e)
            return ExitCode.TOTAL_FAILURE
        except Exception as ex:
            log.critical("Unhandled exception occurred, exiting")
            log.exception(ex)
            return ExitCode.TOTAL_FAILURE

    async def _run(self, args: CliArgs, env: RuntimeEnv) -> int:
        """Run the main async logic."""
        bootstrap = ExperimentBootstrap(args, env)
        bootstrap.configure_logging()
        config = bootstrap.load_config()

        runner = ExperimentRunner(config, self.resource_manager)
        outcome = await runner.run(JobPool(threads=env.threads))
        return outcome.exit_code


mompc_lab_app = MompcLab()
