"""Benchmark matrix comparing the standard and fast update schemes.

For every (resolution, scheme) cell the harness re-meshes the scene's
procedural soft box, runs warmup steps, then measures per-phase wall times
over the configured repetitions. Reported numbers are medians: the rebuild,
PGS and correction columns are per-Newton-iteration medians; building the
mapping compliance runs once per step. The update fraction is
(rebuild + correction) / per-iteration total.

Reference figures from the original GPU study (RTX 3080, cuBLAS/cuSPARSE
pipeline): per-iteration speedup 6.97x, whole-scheme speedup 3.20x, update
fractions 84-90% (standard) vs 14-15% (fast). Those are printed next to the
measured ratios for orientation only; a CPU build is not comparable
hardware.
"""

from __future__ import annotations

import csv
import os
import statistics
from dataclasses import dataclass, field, replace

import yaml

from .errors import ParseError, ValidationError
from .scene import (
    OutputConfig,
    SceneConfig,
    Simulation,
    SoftSpec,
    load_scene,
    with_box_divisions,
)

PAPER_PER_ITERATION_SPEEDUP = 6.97
PAPER_TOTAL_SPEEDUP = 3.20

BENCH_FIELDS = (
    "resolution", "dofs", "constraints", "scheme", "build_wg_ms",
    "rebuild_w_ms", "pgs_ms", "corr_ms", "newton_iter_ms", "step_total_ms",
    "update_fraction",
)


@dataclass
class BenchSpec:
    scene: str
    resolutions: list[int]
    schemes: list[str] = field(default_factory=lambda: ["standard", "fast"])
    repetitions: int = 5
    warmup: int = 3
    newton_iterations: int = 5
    pgs_iterations: int = 30

    def __post_init__(self):
        if self.repetitions < 3:
            raise ValidationError("bench repetitions must be >= 3 for timing rows")
        if list(self.resolutions) != sorted(set(self.resolutions)):
            raise ValidationError("bench resolutions must be strictly increasing")
        if not self.resolutions:
            raise ValidationError("bench needs at least one resolution")
        for scheme in self.schemes:
            if scheme not in ("standard", "fast", "single"):
                raise ValidationError(f"unknown bench scheme {scheme!r}")


def load_bench_spec(path) -> BenchSpec:
    try:
        with open(path) as fh:
            raw = yaml.safe_load(fh)
    except yaml.YAMLError as exc:
        raise ParseError(f"{path}: {exc}") from exc
    if not isinstance(raw, dict) or "scene" not in raw:
        raise ParseError(f"{path}: bench spec needs at least a 'scene' key")
    scene_path = raw["scene"]
    if not os.path.isabs(scene_path):
        scene_path = os.path.join(os.path.dirname(os.path.abspath(path)), scene_path)
    return BenchSpec(
        scene=scene_path,
        resolutions=[int(r) for r in raw.get("resolutions", [])],
        schemes=list(raw.get("schemes", ["standard", "fast"])),
        repetitions=int(raw.get("repetitions", 5)),
        warmup=int(raw.get("warmup", 3)),
        newton_iterations=int(raw.get("newton_iterations", 5)),
        pgs_iterations=int(raw.get("pgs_iterations", 30)),
    )


def _base_divisions(config: SceneConfig):
    for spec in config.objects:
        if isinstance(spec, SoftSpec) and spec.box_params is not None:
            return spec.box_params["divisions"]
    raise ValidationError("bench scene needs a procedural soft box")


def measure_cell(config: SceneConfig, scheme: str, spec: BenchSpec) -> dict:
    """Medians of the per-phase samples for one (resolution, scheme) cell."""
    cfg = replace(
        config,
        newton=replace(
            config.newton,
            scheme=scheme,
            max_iterations=spec.newton_iterations,
            # benchmark every configured iteration; no early exit
            penetration_tol=0.0,
            rotation_tol=0.0,
        ),
        pgs=replace(config.pgs, max_iterations=spec.pgs_iterations),
        output=OutputConfig(snapshots=False, metrics=False),
    )
    sim = Simulation(cfg)
    for _ in range(spec.warmup):
        sim.step()
    rebuild, pgs_t, corr, iter_total = [], [], [], []
    build_wg, step_total, constraints = [], [], []
    for _ in range(spec.repetitions):
        rep = sim.step()
        rebuild.extend(rep.rebuild_times)
        pgs_t.extend(rep.pgs_times)
        corr.extend(rep.correction_times)
        iter_total.extend(
            r + p + c
            for r, p, c in zip(rep.rebuild_times, rep.pgs_times, rep.correction_times)
        )
        build_wg.append(rep.t_build_wg)
        step_total.append(rep.t_step)
        constraints.append(rep.c_groups)
    med = lambda xs: statistics.median(xs) if xs else 0.0
    med_iter = med(iter_total)
    update_fraction = (med(rebuild) + med(corr)) / med_iter if med_iter > 0 else 0.0
    return {
        "dofs": sim.total_dofs(),
        "constraints": med(constraints),
        "scheme": scheme,
        "build_wg_ms": 1e3 * med(build_wg),
        "rebuild_w_ms": 1e3 * med(rebuild),
        "pgs_ms": 1e3 * med(pgs_t),
        "corr_ms": 1e3 * med(corr),
        "newton_iter_ms": 1e3 * med_iter,
        "step_total_ms": 1e3 * med(step_total),
        "update_fraction": update_fraction,
    }


def run_bench(spec: BenchSpec) -> tuple[list[dict], str]:
    config = load_scene(spec.scene)
    nx, _, nz = _base_divisions(config)
    rows = []
    for resolution in spec.resolutions:
        cfg_r = with_box_divisions(config, (nx, resolution, nz))
        for scheme in spec.schemes:
            row = {"resolution": resolution}
            row.update(measure_cell(cfg_r, scheme, spec))
            rows.append(row)
    return rows, summarize(rows, spec)


def summarize(rows: list[dict], spec: BenchSpec) -> str:
    lines = []
    lines.append(
        f"benchmark: {os.path.basename(spec.scene)}, "
        f"{spec.newton_iterations} Newton x {spec.pgs_iterations} PGS iterations, "
        f"median of {spec.repetitions} steps after {spec.warmup} warmup"
    )
    header = (
        f"{'res':>5} {'DOFs':>7} {'cst':>6} {'scheme':>9} {'build Wg':>10} "
        f"{'rebuild W':>10} {'PGS':>9} {'corr':>9} {'Newton it':>10} "
        f"{'step':>9} {'update':>7}"
    )
    lines.append(header)
    for row in rows:
        lines.append(
            f"{row['resolution']:>5} {row['dofs']:>7} {row['constraints']:>6.1f} "
            f"{row['scheme']:>9} {row['build_wg_ms']:>8.2f}ms {row['rebuild_w_ms']:>8.2f}ms "
            f"{row['pgs_ms']:>7.2f}ms {row['corr_ms']:>7.2f}ms {row['newton_iter_ms']:>8.2f}ms "
            f"{row['step_total_ms']:>7.2f}ms {100 * row['update_fraction']:>6.1f}%"
        )
    by_res = {}
    for row in rows:
        by_res.setdefault(row["resolution"], {})[row["scheme"]] = row
    for resolution, cell in sorted(by_res.items()):
        if "standard" in cell and "fast" in cell:
            std, fast = cell["standard"], cell["fast"]
            per_it = std["newton_iter_ms"] / max(fast["newton_iter_ms"], 1e-12)
            total = std["step_total_ms"] / max(fast["step_total_ms"], 1e-12)
            lines.append(
                f"resolution {resolution}: fast is {per_it:.2f}x faster per Newton "
                f"iteration, {total:.2f}x over the whole step"
            )
    lines.append(
        f"reference (original GPU study, RTX 3080): {PAPER_PER_ITERATION_SPEEDUP:.2f}x "
        f"per iteration, {PAPER_TOTAL_SPEEDUP:.2f}x total; not comparable to this "
        "CPU build, shown for orientation only"
    )
    return "\n".join(lines)


def write_bench_csv(rows: list[dict], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=BENCH_FIELDS)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: row[k] for k in BENCH_FIELDS})
