from datetime import datetime
from sqlalchemy import ForeignKey, DateTime, Float, Integer, LargeBinary, String, Text
from sqlalchemy.orm import Mapped, mapped_column, relationship

from app.database import Base


class Run(Base):
    __tablename__ = "runs"

    id: Mapped[int] = mapped_column(Integer, primary_key=True, autoincrement=True)
    problem: Mapped[str] = mapped_column(String(40), nullable=False)
    config_json: Mapped[str] = mapped_column(Text, nullable=False)
    metadata_json: Mapped[str] = mapped_column(Text, nullable=False, default="{}")
    version: Mapped[str] = mapped_column(String(40), nullable=False)
    created_at: Mapped[datetime] = mapped_column(DateTime, default=datetime.now)

    iterations: Mapped[list["IterationRecord"]] = relationship(
        "IterationRecord", back_populates="run", cascade="all, delete-orphan",
        order_by="IterationRecord.iteration",
    )
    patches: Mapped[list["PatchState"]] = relationship(
        "PatchState", back_populates="run", cascade="all, delete-orphan",
        order_by="PatchState.patch_index",
    )
    solution: Mapped["SolutionVector | None"] = relationship(
        "SolutionVector", back_populates="run", cascade="all, delete-orphan", uselist=False
    )


class IterationRecord(Base):
    __tablename__ = "iteration_records"

    id: Mapped[int] = mapped_column(Integer, primary_key=True, autoincrement=True)
    run_id: Mapped[int] = mapped_column(Integer, ForeignKey("runs.id"), nullable=False)
    iteration: Mapped[int] = mapped_column(Integer, nullable=False)
    dofs: Mapped[int] = mapped_column(Integer, nullable=False)
    elements: Mapped[int] = mapped_column(Integer, nullable=False)
    elements_per_level: Mapped[str] = mapped_column(Text, nullable=False)  # JSON list
    l2_error: Mapped[float | None] = mapped_column(Float, nullable=True)
    relative_l2_error: Mapped[float | None] = mapped_column(Float, nullable=True)
    estimator_total: Mapped[float | None] = mapped_column(Float, nullable=True)
    seconds: Mapped[float] = mapped_column(Float, default=0.0)

    run: Mapped["Run"] = relationship("Run", back_populates="iterations")


class PatchState(Base):
    __tablename__ = "patch_states"

    id: Mapped[int] = mapped_column(Integer, primary_key=True, autoincrement=True)
    run_id: Mapped[int] = mapped_column(Integer, ForeignKey("runs.id"), nullable=False)
    patch_index: Mapped[int] = mapped_column(Integer, nullable=False)
    active_elements: Mapped[str] = mapped_column(Text, nullable=False)       # JSON list per level
    deactivated_elements: Mapped[str] = mapped_column(Text, nullable=False)  # JSON list per level

    run: Mapped["Run"] = relationship("Run", back_populates="patches")


class SolutionVector(Base):
    __tablename__ = "solution_vectors"

    id: Mapped[int] = mapped_column(Integer, primary_key=True, autoincrement=True)
    run_id: Mapped[int] = mapped_column(Integer, ForeignKey("runs.id"), nullable=False)
    n_dofs: Mapped[int] = mapped_column(Integer, nullable=False)
    coefficients: Mapped[bytes] = mapped_column(LargeBinary, nullable=False)  # little-endian float64

    run: Mapped["Run"] = relationship("Run", back_populates="solution")
