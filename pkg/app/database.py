from contextlib import contextmanager
from pathlib import Path
from sqlalchemy import create_engine
from sqlalchemy.orm import sessionmaker, DeclarativeBase, Session

RUN_DB_NAME = "run.db"


class Base(DeclarativeBase):
    pass


def make_session_factory(run_dir: Path) -> sessionmaker[Session]:
    """Session factory bound to the run.db of one run directory."""
    run_dir.mkdir(parents=True, exist_ok=True)
    engine = create_engine(
        f"sqlite:///{run_dir / RUN_DB_NAME}", connect_args={"check_same_thread": False}
    )
    Base.metadata.create_all(bind=engine)
    return sessionmaker(autocommit=False, autoflush=False, bind=engine)


@contextmanager
def get_db(run_dir: Path):
    factory = make_session_factory(run_dir)
    db = factory()
    try:
        yield db
    finally:
        db.close()
        factory.kw["bind"].dispose()
