"""Run orchestration: build the problem from a RunConfig, adapt, export and persist."""
import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from sqlalchemy import select

from app.config import RUNS_DIR, THREADS
from app.database import get_db
from app.errors import ConfigurationError, ThbError
from app.models import IterationRecord, PatchState, Run, SolutionVector
from app.schemas import RunConfig
from app.services.adaptivity import AdaptiveResult, adaptive_loop, reference_solution
from app.services.assembly import DiscreteSolution, MultipatchDomain, assemble, build_dof_map
from app.services.exporters import (
    export_fields,
    export_mesh,
    write_convergence_csv,
    write_hierarchy_dump,
    write_triplets,
)
from app.services.hierarchy import from_active_elements
from app.services.physics import (
    PhysicsProblem,
    horseshoe_domain,
    magnetostatic_problem,
    poisson_peak_problem,
    postprocess_B,
    resolve_materials,
    unit_square_domain,
)
from app.version import get_version

logger = logging.getLogger(__name__)

CONVERGENCE_FILE = "convergence.csv"
FIELDS_FILE = "fields.vtk"
MESH_FILE = "mesh.txt"
FLUX_LINE_FILE = "flux_line.csv"
HIERARCHY_FILE = "hierarchy.txt"
MATRIX_FILE = "stiffness.txt"


@dataclass(frozen=True, eq=False)
class RunOutcome:
    run_dir: Path
    result: AdaptiveResult
    problem: PhysicsProblem


def hierarchy_levels(config: RunConfig) -> int:
    """Levels to allocate: the adaptive cap plus one for the estimator's fine mesh."""
    levels = config.adaptivity.max_levels + 1
    if config.adaptivity.marking == "true_error" and config.problem != "poisson_peak":
        levels = max(levels, config.reference_levels + 1)
    return levels


def build_problem(config: RunConfig) -> tuple[MultipatchDomain, PhysicsProblem]:
    levels = hierarchy_levels(config)
    if config.problem == "poisson_peak":
        domain = unit_square_domain(config.degree, config.elements, levels, truncated=config.truncated)
        return domain, poisson_peak_problem(config.alpha)
    domain = horseshoe_domain(
        config.geometry, config.degree, config.elements, levels, config.truncated
    )
    return domain, magnetostatic_problem(domain, resolve_materials(config.materials))


def run_dir_for(config: RunConfig) -> Path:
    return config.export.output_dir or RUNS_DIR / config.problem


def execute_run(config: RunConfig, workers: int = THREADS) -> RunOutcome:
    run_dir = run_dir_for(config)
    run_dir.mkdir(parents=True, exist_ok=True)
    domain, problem = build_problem(config)
    logger.info(
        "%s: %d patches, %d elements, degree %d", config.problem,
        len(domain.patches), domain.n_elements, config.degree,
    )

    reference = None
    if config.adaptivity.marking == "true_error" and problem.exact is None:
        reference = reference_solution(domain, problem, config.reference_levels, workers)

    def dump_mesh(iteration: int, solution: DiscreteSolution) -> None:
        if config.export.mesh_every_iteration:
            export_mesh(solution.domain, run_dir / f"mesh_{iteration:03d}.txt")

    result = adaptive_loop(
        domain,
        problem,
        config.adaptivity,
        reference=reference,
        workers=workers,
        record_timings=config.export.record_timings,
        on_iteration=dump_mesh,
    )
    write_convergence_csv(result.records, run_dir / CONVERGENCE_FILE)
    export_mesh(result.solution.domain, run_dir / MESH_FILE)
    export_fields(result.solution, config.export.field_resolution, run_dir / FIELDS_FILE)
    if problem.magnetization is not None:
        write_flux_line(result.solution, run_dir / FLUX_LINE_FILE)
    save_run(run_dir, config, result, problem)
    return RunOutcome(run_dir, result, problem)


def write_flux_line(solution: DiscreteSolution, path: Path, samples: int = 41) -> int:
    """B along the horizontal line through the middle of the domain's lowest air gap."""
    points = np.concatenate([p.net.points[:, :2] for p in solution.domain.patches])
    x0, x1 = points[:, 0].min(), points[:, 0].max()
    gap_y = _gap_height(solution.domain)
    xs = np.linspace(x0, x1, samples)
    line = postprocess_B(solution, np.column_stack([xs, np.full(samples, gap_y)]))
    rows = ["x,y,az,bx,by,bmag"]
    rows += [
        ",".join(format(v, ".17g") for v in (*s.point, s.az, *s.b, s.b_magnitude))
        for s in line
    ]
    path.write_text("\n".join(rows) + "\n")
    return len(line)


def _gap_height(domain: MultipatchDomain) -> float:
    """Mid-height of the first air layer above a non-air patch, or the domain middle."""
    bands = []
    for patch in domain.patches:
        ys = patch.net.points[:, 1]
        bands.append((float(ys.min()), float(ys.max()), patch.material))
    solid_tops = sorted(top for _, top, mat in bands if mat != "air")
    for lo, hi, mat in sorted(bands):
        if mat == "air" and solid_tops and lo >= solid_tops[0] and hi > lo:
            return 0.5 * (lo + hi)
    ys = np.concatenate([p.net.points[:, 1] for p in domain.patches])
    return 0.5 * (ys.min() + ys.max())


def save_run(
    run_dir: Path, config: RunConfig, result: AdaptiveResult, problem: PhysicsProblem
) -> int:
    """Store config, convergence history, final element sets and coefficients in run.db."""
    with get_db(run_dir) as db:
        for old in db.scalars(select(Run)).all():
            db.delete(old)
        run = Run(
            problem=config.problem,
            config_json=config.model_dump_json(),
            metadata_json=json.dumps({"seed": config.seed, **problem.metadata}, default=str),
            version=get_version(),
        )
        for rec in result.records:
            run.iterations.append(
                IterationRecord(
                    iteration=rec.iteration,
                    dofs=rec.dofs,
                    elements=rec.elements,
                    elements_per_level=json.dumps(rec.elements_per_level),
                    l2_error=rec.l2_error,
                    relative_l2_error=rec.relative_l2_error,
                    estimator_total=rec.estimator_total,
                    seconds=rec.seconds,
                )
            )
        for k, patch in enumerate(result.solution.domain.patches):
            run.patches.append(
                PatchState(
                    patch_index=k,
                    active_elements=json.dumps([sorted(a) for a in patch.space.active_elements]),
                    deactivated_elements=json.dumps(
                        [sorted(d) for d in patch.space.deactivated_elements]
                    ),
                )
            )
        coefficients = result.solution.coefficients.astype("<f8")
        run.solution = SolutionVector(n_dofs=coefficients.size, coefficients=coefficients.tobytes())
        db.add(run)
        db.commit()
        return run.id


def load_run(run_dir: Path) -> tuple[RunConfig, DiscreteSolution]:
    """Rebuild the adapted domain and the final solution stored in run.db."""
    if not (run_dir / "run.db").is_file():
        raise ConfigurationError(f"{run_dir} holds no run.db")
    with get_db(run_dir) as db:
        run = db.scalars(select(Run).order_by(Run.id.desc())).first()
        if run is None or run.solution is None:
            raise ConfigurationError(f"{run_dir}/run.db holds no finished run")
        config = RunConfig.model_validate_json(run.config_json)
        states = [(json.loads(s.active_elements), json.loads(s.deactivated_elements)) for s in run.patches]
        coefficients = np.frombuffer(run.solution.coefficients, dtype="<f8").astype(float)
    domain, _ = build_problem(config)
    if len(states) != len(domain.patches):
        raise ConfigurationError("stored patch states do not match the configured geometry")
    spaces = []
    for patch, (active, deactivated) in zip(domain.patches, states):
        hs = patch.space
        try:
            spaces.append(
                from_active_elements(
                    hs.levels[0].space, hs.max_levels, active, deactivated, hs.truncated, hs.patch
                )
            )
        except ThbError as exc:
            raise ConfigurationError(f"stored hierarchy of patch {hs.patch} is invalid: {exc}") from exc
    domain = domain.with_spaces(spaces)
    dof_map = build_dof_map(domain)
    if coefficients.size != dof_map.n_dofs:
        raise ConfigurationError(
            f"stored solution has {coefficients.size} coefficients, rebuilt space has {dof_map.n_dofs}"
        )
    return config, DiscreteSolution(domain, dof_map, coefficients)


def export_from_run(
    run_dir: Path, what: str, output: Path | None = None, resolution: int | None = None
) -> Path:
    if resolution is not None and resolution < 2:
        raise ConfigurationError(f"export resolution must be at least 2, got {resolution}")
    config, solution = load_run(run_dir)
    if what == "fields":
        path = output or run_dir / FIELDS_FILE
        if resolution is None:
            resolution = config.export.field_resolution
        return export_fields(solution, resolution, path)
    if what == "mesh":
        path = output or run_dir / MESH_FILE
        export_mesh(solution.domain, path)
        return path
    if what == "hierarchy":
        return write_hierarchy_dump(solution.domain, output or run_dir / HIERARCHY_FILE)
    if what == "matrix":
        _, problem = build_problem(config)
        system = assemble(solution.domain, problem, solution.dof_map)
        path = output or run_dir / MATRIX_FILE
        count = write_triplets(system.matrix, path)
        logger.info("wrote %d stiffness entries to %s", count, path)
        return path
    raise ConfigurationError(f"unknown export target {what!r}")
