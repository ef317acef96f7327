"""Experiment harness: configuration, the assembled solver stack, run and
sweep drivers, and all file outputs.

Configs are flat ``key=value`` text files with dotted keys mirroring the
nested config dataclasses.  Unknown keys are rejected so that typos fail
loudly instead of silently running defaults.
"""

import copy
import json
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .adaptive import AdaptiveConfig, adaptive_setup, write_face_csv
from .bddc import bddc_setup, build_weights, select_coarse_dofs
from .errors import ConfigError, ContractError
from .flowseq import (
    SequenceConfig,
    flow_step,
    synthetic_rhs,
    taylor_green_bc,
    taylor_green_state,
    write_fields_csv,
)
from .krylov import (
    DeflationState,
    StoppingRule,
    deflated_pcg,
    update_basis,
    write_residual_csv,
    write_ritz_csv,
)
from .meshfem import (
    BoundaryCondition,
    Partition,
    assemble_laplacian_full,
    build_grid,
    reduce_load,
    reduce_operator,
)
from .substructure import (
    build_subdomains,
    condense_rhs,
    recover_interior,
    schur_apply,
)

__all__ = [
    "ExperimentConfig",
    "parse_config",
    "parse_config_text",
    "apply_override",
    "PoissonStack",
    "StepRecord",
    "SummaryRow",
    "summarize",
    "ExperimentResult",
    "run_experiment",
    "sweep",
]

_EDGE_NAMES = ("left", "right", "bottom", "top")


@dataclass
class MeshSection:
    nx: int = 16
    ny: int = 16
    lx: float = 1.0
    ly: float = 1.0
    dirichlet: str = "all"


@dataclass
class PartitionSection:
    px: int = 2
    py: int = 2


@dataclass
class StoppingSection:
    kind: str = "relative_to_rhs"
    tol: float = 1e-6
    max_iters: int = 500


@dataclass
class DeflationSection:
    strategy: str = "none"
    R: int = 50


@dataclass
class BddcSection:
    weights: str = "card"
    adaptive: bool = False
    tau: float = 3.0
    max_vectors_per_face: int = 10


@dataclass
class SequenceSection:
    mode: str = "stationary"
    steps: int = 200
    amplitude: float = 1.0
    decay: float = 30.0
    period: int = 20


@dataclass
class FlowSection:
    nu: float = 0.01
    dt: float = 0.05


@dataclass
class StatsSection:
    first: int = 1
    last: int = 100


@dataclass
class ExperimentConfig:
    mesh: MeshSection = field(default_factory=MeshSection)
    partition: PartitionSection = field(default_factory=PartitionSection)
    stopping: StoppingSection = field(default_factory=StoppingSection)
    deflation: DeflationSection = field(default_factory=DeflationSection)
    bddc: BddcSection = field(default_factory=BddcSection)
    sequence: SequenceSection = field(default_factory=SequenceSection)
    flow: FlowSection = field(default_factory=FlowSection)
    stats: StatsSection = field(default_factory=StatsSection)
    warm_start: bool = True
    seed: int = 42
    workers: int = 1


def _parse_bool(text):
    low = text.strip().lower()
    if low in ("true", "1", "yes", "on"):
        return True
    if low in ("false", "0", "no", "off"):
        return False
    raise ConfigError(f"expected a boolean, got {text!r}")


# key -> (section attr or None for top level, field, converter)
SCHEMA = {
    "mesh.nx": ("mesh", "nx", int),
    "mesh.ny": ("mesh", "ny", int),
    "mesh.lx": ("mesh", "lx", float),
    "mesh.ly": ("mesh", "ly", float),
    "mesh.dirichlet": ("mesh", "dirichlet", str),
    "partition.px": ("partition", "px", int),
    "partition.py": ("partition", "py", int),
    "stopping.kind": ("stopping", "kind", str),
    "stopping.tol": ("stopping", "tol", float),
    "stopping.max_iters": ("stopping", "max_iters", int),
    "deflation.strategy": ("deflation", "strategy", str),
    "deflation.R": ("deflation", "R", int),
    "bddc.weights": ("bddc", "weights", str),
    "bddc.adaptive": ("bddc", "adaptive", _parse_bool),
    "bddc.tau": ("bddc", "tau", float),
    "bddc.max_vectors_per_face": ("bddc", "max_vectors_per_face", int),
    "sequence.mode": ("sequence", "mode", str),
    "sequence.steps": ("sequence", "steps", int),
    "sequence.amplitude": ("sequence", "amplitude", float),
    "sequence.decay": ("sequence", "decay", float),
    "sequence.period": ("sequence", "period", int),
    "flow.nu": ("flow", "nu", float),
    "flow.dt": ("flow", "dt", float),
    "stats.first": ("stats", "first", int),
    "stats.last": ("stats", "last", int),
    "warm_start": (None, "warm_start", _parse_bool),
    "seed": (None, "seed", int),
    "workers": (None, "workers", int),
}


def apply_override(cfg, key, raw_value):
    """Set one dotted key on the config from its textual value."""
    if key not in SCHEMA:
        raise ConfigError(f"unknown config key {key!r}")
    section, name, conv = SCHEMA[key]
    try:
        value = conv(raw_value.strip() if isinstance(raw_value, str) else raw_value)
    except (ValueError, TypeError):
        raise ConfigError(f"bad value {raw_value!r} for key {key!r}")
    target = cfg if section is None else getattr(cfg, section)
    setattr(target, name, value)
    return cfg


def parse_config_text(text):
    cfg = ExperimentConfig()
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {raw!r}")
        key, _, value = line.partition("=")
        apply_override(cfg, key.strip(), value)
    return cfg


def parse_config(path):
    return parse_config_text(Path(path).read_text())


def config_as_flat_dict(cfg):
    out = {}
    for key, (section, name, _) in SCHEMA.items():
        target = cfg if section is None else getattr(cfg, section)
        out[key] = getattr(target, name)
    return out


def _dirichlet_edges(spec_text):
    text = spec_text.strip().lower()
    if text == "all":
        return list(_EDGE_NAMES)
    edges = [e.strip() for e in text.split(",") if e.strip()]
    for e in edges:
        if e not in _EDGE_NAMES:
            raise ConfigError(f"unknown boundary edge {e!r}")
    if not edges:
        raise ConfigError("mesh.dirichlet must name at least one edge")
    return edges


class PoissonStack:
    """The assembled solver for one fixed Poisson operator.

    Construction does all the setup work exactly once: assembly,
    substructuring, coarse-space selection, optional adaptive enrichment
    and the preconditioner factorizations.  solve() then serves any number
    of load vectors against that operator, optionally warm-started from
    the previous interface solution and deflated by a recycled basis.
    """

    def __init__(self, mesh, bc, partition, weights="card", adaptive=None,
                 rule=None, deflation=None, warm_start=True, workers=1):
        self.mesh = mesh
        self.bc = bc
        self.partition = partition
        self.rule = rule or StoppingRule()
        self.deflation = deflation
        self.warm_start = warm_start
        self.workers = workers
        self.K_full = assemble_laplacian_full(mesh)
        self.K_red, self.dof_map = reduce_operator(self.K_full, bc, mesh)
        zeros = np.zeros(self.K_red.n_rows)
        self.subdomains, self.imap = build_subdomains(
            self.K_red, zeros, mesh, partition, bc
        )
        self.constraints = select_coarse_dofs(self.imap, mesh, partition)
        self.weights = build_weights(self.imap, weights, self.subdomains)
        if adaptive is not None:
            self.preconditioner = adaptive_setup(
                self.subdomains, self.imap, self.weights, self.constraints,
                adaptive, workers,
            )
        else:
            self.preconditioner = bddc_setup(
                self.subdomains, self.constraints, self.weights, workers,
                imap=self.imap,
            )
        self.setup_count = 1
        self.last_interface = None

    def apply_schur(self, x):
        return schur_apply(self.subdomains, self.imap, x, self.workers)

    def solve(self, load_full):
        """Solve for a full-node load; returns (nodal field, report)."""
        f_red = reduce_load(self.K_full, self.bc, self.mesh, load_full)
        g = condense_rhs(self.subdomains, self.imap, f_red, self.workers)
        x_prev = self.last_interface if self.warm_start else None
        xg, report = deflated_pcg(
            self.apply_schur,
            g,
            self.deflation,
            apply_M=self.preconditioner.apply,
            x_prev=x_prev,
            rule=self.rule,
        )
        self.last_interface = xg
        full_eq = recover_interior(self.subdomains, self.imap, xg, f_red)
        fld = np.zeros(self.mesh.n_nodes)
        fld[self.dof_map >= 0] = full_eq
        fld[self.bc.nodes] = self.bc.values
        return fld, report


@dataclass
class StepRecord:
    step: int
    iterations: int
    relres0: float
    relres_final: float
    time_s: float


@dataclass
class SummaryRow:
    steps: int
    first_iterations: int
    min_iterations: int
    max_iterations: int
    mean_iterations: float
    mean_step_time_s: float
    mean_iteration_time_s: float
    last_window_mean_iterations: float
    ritz_frozen_at_step: object
    its_string: str


def summarize(records, window=100, first=1, frozen_at=None):
    """Aggregate per-step statistics.

    The first ``first`` steps are excluded from the aggregates (a cold
    start is not representative) and reported through first_iterations;
    the trailing window gets its own mean for settling comparisons.
    """
    if not records:
        raise ContractError("cannot summarize an empty run")
    tail = records[first:] if len(records) > first else records
    its = [r.iterations for r in tail]
    times = [r.time_s for r in tail]
    total_iters = sum(its)
    last = records[-window:] if window else records
    mean_its = float(np.mean(its))
    return SummaryRow(
        steps=len(records),
        first_iterations=records[0].iterations,
        min_iterations=min(its),
        max_iterations=max(its),
        mean_iterations=mean_its,
        mean_step_time_s=float(np.mean(times)),
        mean_iteration_time_s=(sum(times) / total_iters) if total_iters else 0.0,
        last_window_mean_iterations=float(
            np.mean([r.iterations for r in last])
        ),
        ritz_frozen_at_step=frozen_at,
        its_string=f"{min(its)}-{max(its)}({mean_its:g})",
    )


@dataclass
class ExperimentResult:
    config: ExperimentConfig
    records: list
    reports: list
    ritz_history: list
    summary: SummaryRow
    failed: bool
    stack: PoissonStack
    final_state: object = None

    @property
    def iterations(self):
        return [r.iterations for r in self.records]


def _build_stack(cfg, mesh, bc, partition):
    rule = StoppingRule(
        cfg.stopping.kind, tol=cfg.stopping.tol, max_iters=cfg.stopping.max_iters
    )
    adaptive = (
        AdaptiveConfig(tau=cfg.bddc.tau,
                       max_vectors_per_face=cfg.bddc.max_vectors_per_face)
        if cfg.bddc.adaptive
        else None
    )
    deflation = (
        DeflationState(cfg.deflation.strategy, cfg.deflation.R)
        if cfg.deflation.strategy != "none"
        else None
    )
    return PoissonStack(
        mesh, bc, partition,
        weights=cfg.bddc.weights,
        adaptive=adaptive,
        rule=rule,
        deflation=deflation,
        warm_start=cfg.warm_start,
        workers=cfg.workers,
    )


def _record_step(records, reports, step, report, elapsed):
    b = report.b_norm or 1.0
    records.append(
        StepRecord(
            step=step,
            iterations=report.iterations,
            relres0=report.r0_norm / b,
            relres_final=float(report.residual_history[-1]) / b,
            time_s=elapsed,
        )
    )
    reports.append(report)


def _post_step(stack, step, ritz_history):
    if stack.deflation is not None:
        update_basis(stack.deflation, stack.preconditioner.apply, step=step)
        theta = stack.deflation.ritz_curr
        ritz_history.append(None if theta is None else np.array(theta))
    else:
        ritz_history.append(None)


def run_experiment(cfg, out_dir=None):
    """Run one configured experiment, optionally writing all outputs."""
    mesh = build_grid(cfg.mesh.nx, cfg.mesh.ny, cfg.mesh.lx, cfg.mesh.ly)
    partition = Partition(mesh, cfg.partition.px, cfg.partition.py)

    if cfg.sequence.mode == "flow":
        result = _run_flow(cfg, mesh, partition)
    else:
        bc = BoundaryCondition.on_edges(
            mesh, _dirichlet_edges(cfg.mesh.dirichlet), 0.0
        )
        stack = _build_stack(cfg, mesh, bc, partition)
        seq = SequenceConfig(
            mode=cfg.sequence.mode,
            steps=cfg.sequence.steps,
            amplitude=cfg.sequence.amplitude,
            decay=cfg.sequence.decay,
            period=cfg.sequence.period,
            seed=cfg.seed,
        )
        records, reports, ritz_history = [], [], []
        failed = False
        for step in range(1, cfg.sequence.steps + 1):
            f_full = synthetic_rhs(seq, mesh, step)
            t0 = time.perf_counter()
            _, report = stack.solve(f_full)
            _record_step(records, reports, step, report,
                         time.perf_counter() - t0)
            if not report.converged:
                ritz_history.append(None)
                failed = True
                break
            _post_step(stack, step, ritz_history)
        frozen = stack.deflation.frozen_at_step if stack.deflation else None
        summary = summarize(records, window=cfg.stats.last,
                            first=cfg.stats.first, frozen_at=frozen)
        result = ExperimentResult(cfg, records, reports, ritz_history,
                                  summary, failed, stack)

    if out_dir is not None:
        write_outputs(result, out_dir)
    return result


def _run_flow(cfg, mesh, partition):
    """Pressure-correction sequence on the Taylor-Green problem; the
    correction Poisson solve is pinned at one node and served by the
    domain decomposition stack."""
    pin = BoundaryCondition.at_nodes(np.array([0]), 0.0)
    stack = _build_stack(cfg, mesh, pin, partition)
    state = taylor_green_state(mesh, cfg.flow.nu, cfg.flow.dt)
    vbc = taylor_green_bc(mesh, cfg.flow.nu)
    records, reports, ritz_history = [], [], []
    failed = False
    for step in range(1, cfg.sequence.steps + 1):
        t0 = time.perf_counter()
        state, info = flow_step(state, mesh, vbc, stack)
        report = info["corrector_report"]
        _record_step(records, reports, step, report, time.perf_counter() - t0)
        if not report.converged:
            ritz_history.append(None)
            failed = True
            break
        _post_step(stack, step, ritz_history)
    frozen = stack.deflation.frozen_at_step if stack.deflation else None
    summary = summarize(records, window=cfg.stats.last,
                        first=cfg.stats.first, frozen_at=frozen)
    return ExperimentResult(cfg, records, reports, ritz_history, summary,
                            failed, stack, final_state=state)


def write_steps_csv(records, path):
    with open(path, "w") as fh:
        fh.write("step,iters,relres0,relres_final,time_s\n")
        for r in records:
            fh.write(
                f"{r.step},{r.iterations},{r.relres0:.16e},"
                f"{r.relres_final:.16e},{r.time_s:.6e}\n"
            )


def write_summary_json(result, path):
    payload = {
        "summary": asdict(result.summary),
        "converged": not result.failed,
        "config": config_as_flat_dict(result.config),
    }
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, default=str)
        fh.write("\n")


def write_outputs(result, out_dir):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_steps_csv(result.records, out / "steps.csv")
    write_residual_csv(result.reports, out / "residuals.csv")
    write_ritz_csv(result.ritz_history, result.config.deflation.R,
                   out / "ritz.csv")
    write_summary_json(result, out / "summary.json")
    with open(out / "coarse.json", "w") as fh:
        json.dump(result.stack.preconditioner.diagnostics(), fh, indent=2)
        fh.write("\n")
    face_reports = result.stack.preconditioner.face_reports
    if face_reports is not None:
        write_face_csv(face_reports, out / "faces.csv")
    if result.final_state is not None:
        write_fields_csv(result.stack.mesh, result.final_state,
                         out / "fields.csv")


def sweep(cfg, key, values, out_root=None):
    """Run the experiment once per value of one dotted config key."""
    if key not in SCHEMA:
        raise ConfigError(f"unknown config key {key!r}")
    results = []
    rows = []
    for raw in values:
        case = apply_override(copy.deepcopy(cfg), key, raw)
        sub_dir = None
        if out_root is not None:
            sub_dir = Path(out_root) / f"{key}={raw}".replace("/", "_")
        result = run_experiment(case, sub_dir)
        results.append((raw, result))
        rows.append((raw, result.summary))
    if out_root is not None:
        out = Path(out_root)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "sweep.csv", "w") as fh:
            fh.write(
                "value,steps,first_iterations,min_iterations,max_iterations,"
                "mean_iterations,mean_step_time_s,mean_iteration_time_s,"
                "last_window_mean_iterations,ritz_frozen_at_step,its_string\n"
            )
            for raw, s in rows:
                fh.write(
                    f"{raw},{s.steps},{s.first_iterations},{s.min_iterations},"
                    f"{s.max_iterations},{s.mean_iterations:.6g},"
                    f"{s.mean_step_time_s:.6e},{s.mean_iteration_time_s:.6e},"
                    f"{s.last_window_mean_iterations:.6g},"
                    f"{s.ritz_frozen_at_step},{s.its_string}\n"
                )
    return results
