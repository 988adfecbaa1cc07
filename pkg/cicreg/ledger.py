"""
SQLite ledger of CLI runs.

Each run's manifest is always written as a record file next to its outputs; a ledger
additionally collects manifests from many runs so that timing summaries can be drawn
from one place.
"""

import enum
import logging
import os
import pathlib
from datetime import datetime
from typing import Any, Optional, Union

from sqlalchemy import Column, DateTime
from sqlalchemy.engine import Engine
from sqlmodel import Field, Session, SQLModel, col, create_engine, select

from cicreg.timestamps import utc_now, utc_stamp

logger = logging.getLogger(__name__)

LEDGER_FILENAME = "cicreg_runs.db"


class RunCommand(str, enum.Enum):
    """CLI subcommands that produce a manifest."""

    REGISTER = "register"
    WARP = "warp"
    EVALUATE = "evaluate"
    JACOBIAN = "jacobian"
    REPORT = "report"
    SLICES = "slices"


class RunManifest(SQLModel, table=True, extend_existing=True, sqlite_autoincrement=True):
    """
    One CLI run.

    Attributes:
        id (int): Primary key, assigned by the ledger.
        command (RunCommand): Subcommand that ran.
        method (str): Method label of the outputs.
        inputs (str): Comma-joined input paths.
        output (str): Output file or directory.
        config_overrides (str): Tab-joined ``key=value`` items that differ from defaults.
        tool_version (str): Package version.
        seed (int, optional): Registration seed, when applicable.
        timestamp (datetime): Naive UTC start time.
        elapsed_seconds (float): Wall-clock time of the library call, excluding I/O.
    """

    id: Optional[int] = Field(default=None, primary_key=True)
    command: RunCommand = Field(index=True)
    method: str = Field(default="cicreg", index=True)
    inputs: str = ""
    output: str = ""
    config_overrides: str = ""
    tool_version: str = ""
    seed: Optional[int] = None
    timestamp: datetime = Field(default_factory=utc_now, sa_column=Column(DateTime(timezone=False), index=True))
    elapsed_seconds: float = Field(default=0.0, ge=0)

    def as_record(self) -> dict[str, Any]:
        """Flat record form; ``id`` is omitted since manifest files exist before any ledger insert."""
        data = self.model_dump(exclude={"id"})
        data["command"] = self.command.value
        data["timestamp"] = utc_stamp(self.timestamp)
        return data


def open_ledger(directory: Union[str, os.PathLike]) -> Engine:
    """
    Open (and create on first use) the ledger database in ``directory``.

    Raises:
        NotADirectoryError: If ``directory`` exists and is not a directory.
    """
    path = pathlib.Path(directory).resolve()
    if path.exists() and not path.is_dir():
        raise NotADirectoryError(f"Ledger location is not a directory: {path}")
    path.mkdir(parents=True, exist_ok=True)
    engine = create_engine(f"sqlite:///{path / LEDGER_FILENAME}")
    SQLModel.metadata.create_all(engine)
    return engine


def record_run(engine: Engine, manifest: RunManifest) -> RunManifest:
    """Insert a manifest and return it with its assigned id."""
    with Session(engine) as session:
        session.add(manifest)
        session.commit()
        session.refresh(manifest)
        logger.debug("Ledger run %s recorded (%s)", manifest.id, manifest.command.value)
        return manifest


def list_runs(engine: Engine, command: Optional[Union[str, RunCommand]] = None) -> list[RunManifest]:
    """Manifests ordered by id, optionally restricted to one command."""
    with Session(engine) as session:
        query = select(RunManifest)
        if command is not None:
            query = query.where(RunManifest.command == RunCommand(command))
        query = query.order_by(col(RunManifest.id))
        return list(session.exec(query).all())
