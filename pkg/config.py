#!/usr/bin/env python3
"""
fedfraud Configuration Management
Handles run configuration, port management, and the coordinator's session ledger.
"""

import json
import os
import socket
import sqlite3
from contextlib import closing, contextmanager
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional

from fedfraud.data_pipeline import PipelineConfig, SplitSpec
from fedfraud.errors import ConfigError
from fedfraud.federation import FederationConfig
from fedfraud.nn_core import TrainingConfig
from fedfraud.seeding import derive_seed

DEFAULT_PORT = 5000
DEFAULT_HOST = "127.0.0.1"


@dataclass(frozen=True)
class ServerConfig:
    """Coordinator configuration."""
    host: str = DEFAULT_HOST
    port: int = DEFAULT_PORT
    federation: FederationConfig = field(default_factory=FederationConfig)
    allow_cors: bool = True
    cors_origins: List[str] = field(default_factory=lambda: ["*"])
    poll_interval: float = 0.5
    ledger_path: Optional[str] = "data/coordinator.db"
    log_level: str = "info"

    def __post_init__(self):
        if isinstance(self.federation, dict):
            object.__setattr__(self, "federation", FederationConfig(**self.federation))
        if not 1 <= self.port <= 65535:
            raise ConfigError(f"port must lie in [1, 65535], got {self.port}")
        if self.poll_interval <= 0:
            raise ConfigError("poll_interval must be positive")

    @property
    def client_count(self) -> int:
        return self.federation.client_count


@dataclass(frozen=True)
class AgentConfig:
    """Client agent configuration."""
    client_id: str
    shard_path: str
    server_url: str = f"http://{DEFAULT_HOST}:{DEFAULT_PORT}"
    poll_interval: float = 0.5
    max_rounds: Optional[int] = None
    max_retries: int = 10
    retry_interval: float = 1.0
    timeout: float = 30.0

    def __post_init__(self):
        if not self.client_id:
            raise ConfigError("client_id must be a non-empty string")
        if self.poll_interval <= 0:
            raise ConfigError("poll_interval must be positive")
        if self.max_rounds is not None and self.max_rounds < 1:
            raise ConfigError("max_rounds must be >= 1 or null")
        if self.max_retries < 0 or self.retry_interval < 0:
            raise ConfigError("retry settings must be non-negative")


@dataclass(frozen=True)
class ExplainConfig:
    """Shapley explanation settings."""
    sampled: bool = False
    n_permutations: int = 2000
    exact_limit: int = 15
    rows: List[int] = field(default_factory=lambda: [0])
    seed: int = 0

    def __post_init__(self):
        if self.n_permutations < 1:
            raise ConfigError("n_permutations must be >= 1")
        if not 1 <= self.exact_limit <= 20:
            raise ConfigError("exact_limit must lie in [1, 20]")


def _build(cls, data: Any, section: str):
    if data is None:
        return cls()
    if not isinstance(data, Mapping):
        raise ConfigError(f"section '{section}' must be an object")
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"unknown keys in '{section}': {', '.join(unknown)}")
    try:
        return cls(**data)
    except TypeError as e:
        raise ConfigError(f"invalid '{section}' section: {e}") from e


@dataclass(frozen=True)
class RunConfig:
    """Everything one invocation needs, loaded from a single JSON file."""
    seed: int = 0
    schema_path: Optional[str] = None
    out_dir: str = "out"
    split: SplitSpec = field(default_factory=SplitSpec)
    pipeline: PipelineConfig = field(default_factory=PipelineConfig)
    federation: FederationConfig = field(default_factory=FederationConfig)
    server: ServerConfig = field(default_factory=ServerConfig)
    explain: ExplainConfig = field(default_factory=ExplainConfig)

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "RunConfig":
        sections = {"split": SplitSpec, "pipeline": PipelineConfig, "federation": FederationConfig,
                    "server": ServerConfig, "explain": ExplainConfig}
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        kwargs = {k: v for k, v in data.items() if k not in sections}
        for name, section_cls in sections.items():
            section = data.get(name)
            if name == "federation" and isinstance(section, Mapping) and isinstance(section.get("training"), Mapping):
                section = dict(section)
                section["training"] = _build(TrainingConfig, section["training"], "federation.training")
            if name == "server" and isinstance(section, Mapping) and isinstance(section.get("federation"), Mapping):
                raise ConfigError("set federation options in the top-level 'federation' section")
            kwargs[name] = _build(section_cls, section, name)
        config = cls(**kwargs)
        return replace(config, server=replace(config.server, federation=config.federation))

    @classmethod
    def load(cls, path: Optional[str]) -> "RunConfig":
        if path is None:
            return cls()
        config_path = Path(path)
        if not config_path.exists():
            raise ConfigError(f"config file not found: {config_path}")
        try:
            with open(config_path, "r", encoding="utf-8") as f:
                data = json.load(f)
        except ValueError as e:
            raise ConfigError(f"cannot parse {config_path}: {e}") from e
        if not isinstance(data, dict):
            raise ConfigError("config file must contain a JSON object")
        return cls.from_dict(data)

    def to_dict(self) -> Dict[str, Any]:
        data = asdict(self)
        data["server"].pop("federation", None)
        return data

    def save(self, path: str):
        with open(path, "w", encoding="utf-8") as f:
            json.dump(self.to_dict(), f, indent=2, ensure_ascii=False)

    def with_env(self, environ: Optional[Mapping[str, str]] = None) -> "RunConfig":
        """Apply FEDFRAUD_* environment overrides (seed, host, port)."""
        env = os.environ if environ is None else environ
        config = self
        try:
            if env.get("FEDFRAUD_SEED"):
                config = replace(config, seed=int(env["FEDFRAUD_SEED"]))
            if env.get("FEDFRAUD_PORT"):
                config = replace(config, server=replace(config.server, port=int(env["FEDFRAUD_PORT"])))
        except ValueError as e:
            raise ConfigError(f"invalid FEDFRAUD_* environment value: {e}") from e
        if env.get("FEDFRAUD_HOST"):
            config = replace(config, server=replace(config.server, host=env["FEDFRAUD_HOST"]))
        return config

    def resolved(self) -> "RunConfig":
        """Fan the global seed out to every stochastic stage."""
        federation = replace(
            self.federation,
            seed=derive_seed(self.seed, "federation"),
            training=replace(self.federation.training, shuffle_seed=derive_seed(self.seed, "train")),
        )
        return replace(
            self,
            split=replace(self.split, seed=derive_seed(self.seed, "data")),
            federation=federation,
            server=replace(self.server, federation=federation),
            explain=replace(self.explain, seed=derive_seed(self.seed, "explain")),
        )


class PortManager:
    """Port availability checks."""

    def is_port_free(self, port: int, host: str = DEFAULT_HOST) -> bool:
        """Check if a port is free."""
        try:
            with socket.socket(socket.AF_INET, socket.SOCK_STREAM) as sock:
                sock.settimeout(1)
                result = sock.connect_ex((host, port))
                return result != 0
        except Exception:
            return False

    def find_free_port(self, start_port: int = 8500, end_port: int = 9500, host: str = DEFAULT_HOST) -> int:
        """Find a free port in the given range."""
        for port in range(start_port, end_port + 1):
            if self.is_port_free(port, host):
                return port
        raise RuntimeError(f"No free port found between {start_port} and {end_port}")


class LedgerManager:
    """SQLite ledger of coordinator sessions: accepted updates and aggregations."""

    def __init__(self, db_path: str = "data/coordinator.db"):
        self.db_path = Path(db_path)
        self.db_path.parent.mkdir(parents=True, exist_ok=True)
        self.init_database()

    def init_database(self):
        """Initialize the SQLite database."""
        with self.get_connection() as conn:
            cursor = conn.cursor()

            # Sessions table
            cursor.execute("""
                CREATE TABLE IF NOT EXISTS sessions (
                    id INTEGER PRIMARY KEY AUTOINCREMENT,
                    model_config TEXT NOT NULL,
                    federation_config TEXT NOT NULL,
                    created_at TIMESTAMP DEFAULT CURRENT_TIMESTAMP
                )
            """)

            # Accepted client updates
            cursor.execute("""
                CREATE TABLE IF NOT EXISTS updates (
                    id INTEGER PRIMARY KEY AUTOINCREMENT,
                    session_id INTEGER NOT NULL,
                    round INTEGER NOT NULL,
                    client_id TEXT NOT NULL,
                    n_samples INTEGER NOT NULL,
                    params TEXT NOT NULL,
                    metrics TEXT NOT NULL,
                    created_at TIMESTAMP DEFAULT CURRENT_TIMESTAMP
                )
            """)

            # Aggregations
            cursor.execute("""
                CREATE TABLE IF NOT EXISTS aggregations (
                    id INTEGER PRIMARY KEY AUTOINCREMENT,
                    session_id INTEGER NOT NULL,
                    round INTEGER NOT NULL,
                    metrics TEXT NOT NULL,
                    created_at TIMESTAMP DEFAULT CURRENT_TIMESTAMP
                )
            """)

            conn.commit()

    @contextmanager
    def get_connection(self):
        """Yield a connection that is closed on exit."""
        with closing(sqlite3.connect(self.db_path)) as conn:
            yield conn

    def start_session(self, model_config: Dict[str, Any], federation_config: Dict[str, Any]) -> int:
        with self.get_connection() as conn:
            cursor = conn.cursor()
            cursor.execute(
                "INSERT INTO sessions (model_config, federation_config) VALUES (?, ?)",
                (json.dumps(model_config), json.dumps(federation_config)),
            )
            conn.commit()
            return cursor.lastrowid

    def record_update(self, session_id: int, round_index: int, client_id: str, n_samples: int,
                      params: Dict[str, Any], metrics: Dict[str, Any]):
        with self.get_connection() as conn:
            conn.execute("""
                INSERT INTO updates (session_id, round, client_id, n_samples, params, metrics)
                VALUES (?, ?, ?, ?, ?, ?)
            """, (session_id, round_index, client_id, n_samples, json.dumps(params), json.dumps(metrics)))
            conn.commit()

    def record_aggregation(self, session_id: int, round_index: int, metrics: Dict[str, Any]):
        with self.get_connection() as conn:
            conn.execute(
                "INSERT INTO aggregations (session_id, round, metrics) VALUES (?, ?, ?)",
                (session_id, round_index, json.dumps(metrics)),
            )
            conn.commit()

    def latest_session_id(self) -> Optional[int]:
        with self.get_connection() as conn:
            row = conn.execute("SELECT MAX(id) FROM sessions").fetchone()
            return row[0] if row else None

    def load_updates(self, session_id: int) -> List[Dict[str, Any]]:
        """Accepted updates of a session ordered by round, then client id."""
        with self.get_connection() as conn:
            cursor = conn.cursor()
            cursor.execute("""
                SELECT round, client_id, n_samples, params, metrics
                FROM updates
                WHERE session_id = ?
                ORDER BY round, client_id
            """, (session_id,))

            updates = []
            for row in cursor.fetchall():
                updates.append({
                    "round": row[0],
                    "client_id": row[1],
                    "n_samples": row[2],
                    "params": json.loads(row[3]),
                    "local_metrics": json.loads(row[4]),
                })
            return updates

    def load_aggregations(self, session_id: int) -> List[Dict[str, Any]]:
        with self.get_connection() as conn:
            cursor = conn.cursor()
            cursor.execute(
                "SELECT round, metrics, created_at FROM aggregations WHERE session_id = ? ORDER BY round",
                (session_id,),
            )
            return [{"round": r[0], "metrics": json.loads(r[1]), "created_at": r[2]} for r in cursor.fetchall()]
