"""
Run archive for SpinStab
Optional SQLite persistence of resolved scenarios and run summaries
"""
import json
import logging
import os
from datetime import datetime
from typing import Dict, List, Optional

from sqlalchemy import Column, DateTime, Integer, String, Text, create_engine, event
from sqlalchemy.orm import declarative_base, sessionmaker

logger = logging.getLogger(__name__)

Base = declarative_base()

_session_factories: Dict[str, sessionmaker] = {}


class SimulationRun(Base):
    __tablename__ = 'simulation_runs'

    id = Column(Integer, primary_key=True)
    command = Column(String(20), nullable=False)
    seed = Column(String(20), nullable=False)  # u64 does not fit a signed SQLite integer
    n_traj = Column(Integer, default=1)
    status = Column(String(20), default='ok')  # ok, failed, blowup, config_error
    scenario_json = Column(Text)
    summary_json = Column(Text)
    created_at = Column(DateTime, default=datetime.now)

    def __repr__(self):
        return f"<SimulationRun(command='{self.command}', seed='{self.seed}', status='{self.status}')>"

    def to_dict(self):
        return {
            'id': self.id,
            'command': self.command,
            'seed': int(self.seed),
            'n_traj': self.n_traj,
            'status': self.status,
            'scenario': json.loads(self.scenario_json) if self.scenario_json else None,
            'summary': json.loads(self.summary_json) if self.summary_json else None,
            'created_at': self.created_at.isoformat() if self.created_at else None,
        }


def _configure_sqlite(dbapi_connection, connection_record):
    cursor = dbapi_connection.cursor()
    cursor.execute("PRAGMA journal_mode=WAL;")
    cursor.execute("PRAGMA synchronous=FULL;")
    cursor.close()


def get_session(db_path):
    """Get a new session on the archive at db_path, creating tables on first use"""
    db_path = os.path.abspath(db_path)
    if db_path not in _session_factories:
        directory = os.path.dirname(db_path)
        if directory:
            os.makedirs(directory, exist_ok=True)
        engine = create_engine(f'sqlite:///{db_path}')
        event.listen(engine, 'connect', _configure_sqlite)
        Base.metadata.create_all(engine)
        _session_factories[db_path] = sessionmaker(bind=engine)
    return _session_factories[db_path]()


def record_run(db_path, command, scenario, seed, status='ok', summary=None, n_traj=1) -> Optional[int]:
    """Store one run; returns its id, or None when the archive is unavailable"""
    try:
        session = get_session(db_path)
    except Exception as e:
        logger.error(f"Run archive {db_path} unavailable: {str(e)}")
        return None
    try:
        run = SimulationRun(
            command=command,
            seed=str(seed),
            n_traj=n_traj,
            status=status,
            scenario_json=json.dumps(scenario, sort_keys=True),
            summary_json=json.dumps(summary, sort_keys=True) if summary is not None else None,
        )
        session.add(run)
        session.commit()
        return run.id
    except Exception as e:
        session.rollback()
        logger.error(f"Error archiving {command} run: {str(e)}")
        return None
    finally:
        session.close()


def get_run_history(db_path, command=None, limit=20) -> List[dict]:
    """Most recent archived runs first"""
    session = get_session(db_path)
    try:
        query = session.query(SimulationRun)
        if command:
            query = query.filter(SimulationRun.command == command)
        runs = query.order_by(SimulationRun.id.desc()).limit(limit).all()
        return [run.to_dict() for run in runs]
    finally:
        session.close()
