from __future__ import annotations

import argparse
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from pydantic import BaseModel

from core import __version__
from core.config import Settings, config_digest, load_experiment_config
from core.models.data import RngSpec
from core.schemas.experiment import ExperimentConfig
from core.schemas.report import RunManifest
from core.services.export_service import OutputDirectory, write_manifest

logger = logging.getLogger("flowlab.cli")


@dataclass
class RunContext:
    """Everything a sub-command needs besides its own flags."""

    command: str
    config: ExperimentConfig
    out: OutputDirectory
    threads: int = 1
    svg: bool = False
    stream_id: int = 0
    notes: dict[str, str] = field(default_factory=dict)
    overrides: dict[str, Any] = field(default_factory=dict)

    @property
    def seed(self) -> int:
        return self.config.seed

    def rng(self, stream_id: int) -> RngSpec:
        self.stream_id = stream_id
        return RngSpec(self.seed, stream_id)

    def override(self, key: str, value: Any) -> None:
        """Fold a command-line value into the config so that the manifest digest covers it.

        ``key`` is a dotted config path such as ``dynamics.steps``; ``None`` leaves the
        configured value in place.
        """
        if value is None:
            return
        self.config = _with_value(self.config, key.split("."), value)
        self.overrides[key] = value
        logger.debug("Override %s = %r", key, value)

    def manifest(self) -> RunManifest:
        return RunManifest(
            command=self.command,
            config_digest=config_digest(self.config),
            seed=self.seed,
            stream_id=self.stream_id,
            code_version=__version__,
            threads=self.threads,
            overrides=self.overrides,
            notes=self.notes,
        )

    def finish(self) -> Path:
        return write_manifest(self.out, self.manifest())


def _with_value(model: BaseModel, path: list[str], value: Any) -> Any:
    head, *rest = path
    if not hasattr(model, head):
        raise KeyError(head)
    new = _with_value(getattr(model, head), rest, value) if rest else value
    return model.model_copy(update={head: new})


def resolve_output_root(args: argparse.Namespace, settings: Settings) -> Path:
    """``FLOWLAB_OUT`` wins over ``--out``; the fallback is ``runs/<command>``."""
    if settings.out is not None:
        return Path(settings.out)
    if args.out is not None:
        return Path(args.out)
    return Path("runs") / args.command


def build_context(args: argparse.Namespace, settings: Settings) -> RunContext:
    config = load_experiment_config(args.config)
    seed = args.seed if args.seed is not None else settings.seed
    if seed is not None:
        config = config.model_copy(update={"seed": seed})
    threads = args.threads if args.threads is not None else settings.threads
    root = resolve_output_root(args, settings)
    logger.info("Running %s (seed %d, %d thread(s)) into %s", args.command, config.seed, threads, root)
    return RunContext(
        command=args.command,
        config=config,
        out=OutputDirectory(root),
        threads=threads,
        svg=args.svg,
    )


def positive_int(value: str) -> int:
    number = int(value)
    if number < 1:
        raise argparse.ArgumentTypeError("must be at least 1")
    return number


def non_negative_int(value: str) -> int:
    number = int(value)
    if number < 0:
        raise argparse.ArgumentTypeError("must be non-negative")
    return number
