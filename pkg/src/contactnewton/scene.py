"""Scene description, the time-stepping loop, and state persistence.

A scene file is YAML with the keys documented in the README (objects[],
gravity, dt, threshold, mu, pgs.*, newton.*, output.*). Soft bodies take
their tet mesh from a file in the minimal ASCII format or from a procedural
box; colliders are static planes, static or scripted (kinematic) triangle
meshes, and rigid spheres.

Each step runs: detect -> linearize -> assemble -> free motion -> violation
at the free state -> correction scheme (single / standard / fast) ->
integrate. Detection happens once per step; the correction schemes never
re-pair. A failed step leaves the previous state untouched.
"""

from __future__ import annotations

import csv
import io
import os
import time
from dataclasses import dataclass, field, replace

import numpy as np
import yaml
from scipy.spatial.transform import Rotation

from . import collision
from .collision import MeshGeometry, PlaneGeometry, Pose, SphereGeometry
from .constraints import (
    MappingDelassus,
    assemble_Wg,
    assemble_direction,
    build_signed_mapping,
    compute_violation,
)
from .dynamics import (
    MechanicalState,
    RigidBody,
    SoftBody,
    compute_free_motion,
    integrate_correction,
)
from .errors import ParseError, ValidationError
from .linalg import factorize
from .mesh import TetMesh, box_mesh, load_mesh, surface_triangles, surface_vertices
from .solver import (
    NewtonConfig,
    PgsConfig,
    StepContext,
    newton_fast,
    newton_standard,
)

DEFAULT_GRAVITY = (0.0, -9.81, 0.0)
DEFAULT_DT = 0.01
DEFAULT_THRESHOLD = 0.01
DEFAULT_MU = 0.5

SNAPSHOT_MAGIC = "CONTACTNEWTON-SNAPSHOT 1"


# --- object specifications ------------------------------------------------------


@dataclass
class SoftSpec:
    name: str
    mesh: TetMesh
    young: float = 1e4
    poisson: float = 0.3
    density: float = 1000.0
    rayleigh_mass: float = 0.1
    rayleigh_stiffness: float = 0.1
    fixed_nodes: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    velocity: tuple = (0.0, 0.0, 0.0)
    node_mass: float | None = None  # uniform per-node mass for tetless bodies
    extra_force: tuple | None = None  # constant per-node force, N
    box_params: dict | None = None  # procedural box origin of the mesh, if any


@dataclass
class PlaneSpec:
    name: str
    normal: tuple = (0.0, 1.0, 0.0)
    offset: float = 0.0


@dataclass
class RigidSphereSpec:
    name: str
    mass: float
    radius: float
    position: tuple = (0.0, 0.0, 0.0)
    velocity: tuple = (0.0, 0.0, 0.0, 0.0, 0.0, 0.0)
    inertia: np.ndarray | None = None  # default: solid sphere


@dataclass
class MotionSpec:
    axis: tuple = (0.0, 0.0, 1.0)
    center: tuple = (0.0, 0.0, 0.0)
    angular_velocity: float = 0.0  # rad/s
    velocity: tuple = (0.0, 0.0, 0.0)  # m/s


@dataclass
class KinematicMeshSpec:
    """Scripted (or, with zero motion, static) triangle-mesh collider."""

    name: str
    points: np.ndarray  # (n, 3) local coordinates
    triangles: np.ndarray  # (t, 3), outward wound
    motion: MotionSpec = field(default_factory=MotionSpec)


@dataclass
class OutputConfig:
    snapshots: bool = True
    metrics: bool = True
    every: int = 1


@dataclass
class SceneConfig:
    objects: list
    gravity: tuple = DEFAULT_GRAVITY
    h: float = DEFAULT_DT
    threshold: float = DEFAULT_THRESHOLD
    pgs: PgsConfig = field(default_factory=lambda: PgsConfig(friction=DEFAULT_MU))
    newton: NewtonConfig = field(default_factory=NewtonConfig)
    output: OutputConfig = field(default_factory=OutputConfig)

    def __post_init__(self):
        if self.h <= 0:
            raise ValidationError(f"dt must be positive, got {self.h}")
        if self.threshold <= 0:
            raise ValidationError(f"threshold must be positive, got {self.threshold}")
        if not self.objects:
            raise ValidationError("scene needs at least one object")


# --- scene file parsing ---------------------------------------------------------


def _require(mapping, key, where):
    if key not in mapping:
        raise ValidationError(f"{where}: missing required key '{key}'")
    return mapping[key]


def _vec3(value, where):
    arr = np.asarray(value, dtype=np.float64).ravel()
    if arr.shape != (3,):
        raise ValidationError(f"{where}: expected 3 components, got {value!r}")
    return tuple(arr)


def _load_soft(entry, name, base_dir):
    mesh_spec = _require(entry, "mesh", name)
    box_params = None
    if "file" in mesh_spec:
        path = os.path.join(base_dir, mesh_spec["file"])
        if not os.path.exists(path):
            raise ValidationError(f"{name}: mesh file does not exist: {path}")
        mesh = load_mesh(path)
    elif "box" in mesh_spec:
        box = mesh_spec["box"]
        box_params = {
            "size": _vec3(_require(box, "size", f"{name}.mesh.box"), name),
            "divisions": tuple(int(d) for d in _require(box, "divisions", f"{name}.mesh.box")),
            "center": _vec3(box.get("center", (0, 0, 0)), name),
        }
        mesh = box_mesh(**box_params)
    else:
        raise ValidationError(f"{name}: mesh needs either 'file' or 'box'")

    material = entry.get("material", {})
    fixed = np.asarray(entry.get("fixed_nodes", []), dtype=np.int64)
    region = entry.get("fixed_region")
    if region is not None:
        axis = {"x": 0, "y": 1, "z": 2}.get(region.get("axis"), region.get("axis"))
        if axis not in (0, 1, 2):
            raise ValidationError(f"{name}: fixed_region.axis must be x, y or z")
        coords = mesh.nodes[:, axis]
        mask = np.ones(len(coords), dtype=bool)
        if "max" in region:
            mask &= coords <= float(region["max"])
        if "min" in region:
            mask &= coords >= float(region["min"])
        fixed = np.union1d(fixed, np.flatnonzero(mask))
    extra = entry.get("extra_force")
    return SoftSpec(
        name=name,
        mesh=mesh,
        young=float(material.get("young", 1e4)),
        poisson=float(material.get("poisson", 0.3)),
        density=float(material.get("density", 1000.0)),
        rayleigh_mass=float(material.get("rayleigh_mass", 0.1)),
        rayleigh_stiffness=float(material.get("rayleigh_stiffness", 0.1)),
        fixed_nodes=fixed,
        velocity=_vec3(entry.get("velocity", (0, 0, 0)), name),
        node_mass=float(entry["node_mass"]) if "node_mass" in entry else None,
        extra_force=_vec3(entry["extra_force"], name) if extra is not None else None,
        box_params=box_params,
    )


def _plate_mesh(entry, name):
    center = np.asarray(_vec3(_require(entry, "center", name), name))
    normal = np.asarray(_vec3(_require(entry, "normal", name), name))
    nn = np.linalg.norm(normal)
    if nn == 0:
        raise ValidationError(f"{name}: plate normal must be nonzero")
    normal = normal / nn
    size = entry.get("size", (0.1, 0.1))
    w, hgt = float(size[0]), float(size[1])
    u = np.cross(normal, [0.0, 0.0, 1.0])
    if np.linalg.norm(u) < 1e-6:
        u = np.cross(normal, [0.0, 1.0, 0.0])
    u /= np.linalg.norm(u)
    v = np.cross(normal, u)
    corners = np.array(
        [
            center - 0.5 * w * u - 0.5 * hgt * v,
            center + 0.5 * w * u - 0.5 * hgt * v,
            center + 0.5 * w * u + 0.5 * hgt * v,
            center - 0.5 * w * u + 0.5 * hgt * v,
        ]
    )
    tris = np.array([[0, 1, 2], [0, 2, 3]], dtype=np.int64)
    # enforce the requested facing
    n0 = np.cross(corners[1] - corners[0], corners[2] - corners[0])
    if n0 @ normal < 0:
        tris = tris[:, ::-1].copy()
    return corners, tris


def _load_kinematic(entry, name, base_dir):
    if "plate" in entry:
        points, tris = _plate_mesh(entry["plate"], name)
    elif "mesh" in entry:
        mesh_spec = entry["mesh"]
        if "file" in mesh_spec:
            path = os.path.join(base_dir, mesh_spec["file"])
            if not os.path.exists(path):
                raise ValidationError(f"{name}: mesh file does not exist: {path}")
            mesh = load_mesh(path)
        else:
            box = mesh_spec.get("box", {})
            mesh = box_mesh(
                _vec3(_require(box, "size", name), name),
                tuple(int(d) for d in _require(box, "divisions", name)),
                _vec3(box.get("center", (0, 0, 0)), name),
            )
        points, tris = mesh.nodes, surface_triangles(mesh)
    else:
        raise ValidationError(f"{name}: kinematic object needs 'plate' or 'mesh'")
    motion = entry.get("motion", {})
    spec = MotionSpec(
        axis=_vec3(motion.get("axis", (0, 0, 1)), name),
        center=_vec3(motion.get("center", (0, 0, 0)), name),
        angular_velocity=float(motion.get("angular_velocity", 0.0)),
        velocity=_vec3(motion.get("velocity", (0, 0, 0)), name),
    )
    return KinematicMeshSpec(name=name, points=points, triangles=tris, motion=spec)


def _load_rigid_sphere(entry, name):
    mass = float(_require(entry, "mass", name))
    radius = float(_require(entry, "radius", name))
    inertia = entry.get("inertia")
    if inertia is None:
        inertia_mat = (0.4 * mass * radius * radius) * np.eye(3)
    else:
        arr = np.asarray(inertia, dtype=np.float64)
        inertia_mat = np.diag(arr) if arr.ndim == 1 else arr.reshape(3, 3)
    vel = np.asarray(entry.get("velocity", np.zeros(6)), dtype=np.float64).ravel()
    if vel.shape == (3,):
        vel = np.concatenate([vel, np.zeros(3)])
    if vel.shape != (6,):
        raise ValidationError(f"{name}: rigid velocity needs 3 or 6 components")
    return RigidSphereSpec(
        name=name,
        mass=mass,
        radius=radius,
        position=_vec3(entry.get("position", (0, 0, 0)), name),
        velocity=tuple(vel),
        inertia=inertia_mat,
    )


def load_scene(path) -> SceneConfig:
    """Parse and validate a scene file; defaults are documented in the README."""
    try:
        with open(path) as fh:
            raw = yaml.safe_load(fh)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        loc = f"{path}:{mark.line + 1}" if mark is not None else str(path)
        raise ParseError(f"{loc}: {exc}") from exc
    if not isinstance(raw, dict):
        raise ParseError(f"{path}: scene file must be a mapping")
    base_dir = os.path.dirname(os.path.abspath(path))

    objects = []
    for i, entry in enumerate(raw.get("objects", [])):
        name = entry.get("name", f"object{i}")
        kind = _require(entry, "type", name)
        if kind == "soft":
            objects.append(_load_soft(entry, name, base_dir))
        elif kind == "plane":
            objects.append(
                PlaneSpec(
                    name=name,
                    normal=_vec3(entry.get("normal", (0, 1, 0)), name),
                    offset=float(entry.get("offset", 0.0)),
                )
            )
        elif kind in ("kinematic_mesh", "static_mesh"):
            spec = _load_kinematic(entry, name, base_dir)
            if kind == "static_mesh" and spec.motion != MotionSpec():
                raise ValidationError(f"{name}: static meshes cannot carry motion")
            objects.append(spec)
        elif kind == "rigid_sphere":
            objects.append(_load_rigid_sphere(entry, name))
        else:
            raise ValidationError(f"{name}: unknown object type {kind!r}")

    pgs_raw = raw.get("pgs", {})
    newton_raw = raw.get("newton", {})
    out_raw = raw.get("output", {})
    config = SceneConfig(
        objects=objects,
        gravity=_vec3(raw.get("gravity", DEFAULT_GRAVITY), "gravity"),
        h=float(raw.get("dt", DEFAULT_DT)),
        threshold=float(raw.get("threshold", DEFAULT_THRESHOLD)),
        pgs=PgsConfig(
            max_iterations=int(pgs_raw.get("iterations", 30)),
            tolerance=float(pgs_raw.get("tolerance", 1e-6)),
            friction=float(raw.get("mu", DEFAULT_MU)),
        ),
        newton=NewtonConfig(
            scheme=str(newton_raw.get("scheme", "single")),
            max_iterations=int(newton_raw.get("iterations", 5)),
            penetration_tol=float(newton_raw.get("penetration_tol", 1e-5)),
            relinearize=bool(newton_raw.get("relinearize", True)),
        ),
        output=OutputConfig(
            snapshots=bool(out_raw.get("snapshots", True)),
            metrics=bool(out_raw.get("metrics", True)),
            every=int(out_raw.get("every", 1)),
        ),
    )
    return config


def with_box_divisions(config: SceneConfig, divisions) -> SceneConfig:
    """Copy of the scene with the first procedural soft box re-meshed."""
    objects = list(config.objects)
    for i, spec in enumerate(objects):
        if isinstance(spec, SoftSpec) and spec.box_params is not None:
            params = dict(spec.box_params)
            params["divisions"] = tuple(int(d) for d in divisions)
            objects[i] = replace(
                spec, mesh=box_mesh(**params), box_params=params,
                fixed_nodes=spec.fixed_nodes,
            )
            return replace(config, objects=objects)
    raise ValidationError("scene has no procedural soft box to re-mesh")


# --- runtime objects ------------------------------------------------------------


class _SoftRuntime:
    kind = "soft"
    dynamic = True

    def __init__(self, oid, spec: SoftSpec):
        self.oid = oid
        self.spec = spec
        node_masses = None
        if spec.node_mass is not None:
            node_masses = np.full(spec.mesh.n_nodes, spec.node_mass)
        self.body = SoftBody(
            spec.mesh,
            young=spec.young,
            poisson=spec.poisson,
            density=spec.density,
            rayleigh_mass=spec.rayleigh_mass,
            rayleigh_stiffness=spec.rayleigh_stiffness,
            fixed_nodes=spec.fixed_nodes,
            node_masses=node_masses,
            extra_node_force=np.asarray(spec.extra_force) if spec.extra_force else None,
        )
        self.triangles = surface_triangles(spec.mesh)
        self.vertex_ids = surface_vertices(self.triangles) if len(self.triangles) else np.arange(spec.mesh.n_nodes)
        self.state = self.body.initial_state(spec.velocity)
        self.factorization = None  # A is constant (linear material): built once

    def geometry(self, state):
        return MeshGeometry(
            object_id=self.oid,
            points=state.q.reshape(-1, 3),
            triangles=self.triangles,
            vertex_ids=self.vertex_ids,
            deformable=True,
            dynamic=True,
        )

    def assemble(self, state, h, gravity):
        A, b = self.body.assemble(state, h, gravity)
        if self.factorization is None:
            self.factorization = factorize(A)
        return self.factorization, b

    def view_at(self, q):
        return q.reshape(-1, 3)


class _RigidRuntime:
    kind = "rigid"
    dynamic = True

    def __init__(self, oid, spec: RigidSphereSpec):
        self.oid = oid
        self.spec = spec
        self.body = RigidBody(mass=spec.mass, inertia=spec.inertia, radius=spec.radius)
        self.rotation = np.eye(3)
        q = np.concatenate([np.asarray(spec.position, dtype=np.float64), np.zeros(3)])
        self.state = MechanicalState(q, np.asarray(spec.velocity, dtype=np.float64))

    def pose_at(self, q):
        rot = Rotation.from_rotvec(q[3:]).as_matrix() @ self.rotation
        return Pose(rot, q[:3])

    def geometry(self, state):
        pose = self.pose_at(state.q)
        return SphereGeometry(
            object_id=self.oid,
            center=pose.position,
            radius=self.spec.radius,
            pose=pose,
            dynamic=True,
        )

    def assemble(self, state, h, gravity):
        A, b = self.body.assemble(self.rotation, h, gravity)
        return factorize(A), b

    def view_at(self, q):
        return self.pose_at(q)

    def commit(self, state):
        """Fold the rotation increment into the pose; quaternion re-normalized."""
        rot = Rotation.from_rotvec(state.q[3:]) * Rotation.from_matrix(self.rotation)
        quat = rot.as_quat()
        self.rotation = Rotation.from_quat(quat / np.linalg.norm(quat)).as_matrix()
        self.state = MechanicalState(
            np.concatenate([state.q[:3], np.zeros(3)]), state.v
        )


class _KinematicRuntime:
    kind = "kinematic"
    dynamic = False

    def __init__(self, oid, spec: KinematicMeshSpec):
        self.oid = oid
        self.spec = spec
        self.time = 0.0

    def pose_at(self, t):
        m = self.spec.motion
        axis = np.asarray(m.axis, dtype=np.float64)
        n = np.linalg.norm(axis)
        if n == 0 or m.angular_velocity == 0.0:
            rot = np.eye(3)
        else:
            rot = Rotation.from_rotvec(axis / n * (m.angular_velocity * t)).as_matrix()
        center = np.asarray(m.center)
        position = center - rot @ center + np.asarray(m.velocity) * t
        return Pose(rot, position)

    def geometry_at(self, t):
        pose = self.pose_at(t)
        return MeshGeometry(
            object_id=self.oid,
            points=pose.apply(self.spec.points),
            triangles=self.spec.triangles,
            vertex_ids=np.arange(len(self.spec.points)),
            deformable=False,
            dynamic=False,
            pose=pose,
        )


class _PlaneRuntime:
    kind = "plane"
    dynamic = False

    def __init__(self, oid, spec: PlaneSpec):
        self.oid = oid
        self.spec = spec

    def geometry(self):
        return PlaneGeometry(object_id=self.oid, normal=self.spec.normal, offset=self.spec.offset)


# --- step report ---------------------------------------------------------------


@dataclass
class StepReport:
    step: int
    time: float
    c_groups: int
    dofs: int
    newton_iterations: int
    pgs_iterations_total: int
    pen_before: float
    pen_after: float
    lambda_n_sum: float
    lambda_n_max: float
    lambda_t_max: float
    t_detect: float
    t_assemble: float
    t_free: float
    t_constraints: float
    t_build_wg: float
    t_rebuild_w: float
    t_pgs: float
    t_correction: float
    t_final_correction: float
    t_step: float
    rebuild_times: list = field(default_factory=list)
    pgs_times: list = field(default_factory=list)
    correction_times: list = field(default_factory=list)
    penetration_history: list = field(default_factory=list)

    CSV_FIELDS = (
        "step", "time", "c_groups", "dofs", "newton_iterations",
        "pgs_iterations_total", "pen_before", "pen_after", "lambda_n_sum",
        "lambda_n_max", "lambda_t_max", "t_detect", "t_assemble", "t_free",
        "t_constraints", "t_build_wg", "t_rebuild_w", "t_pgs", "t_correction",
        "t_final_correction", "t_step",
    )

    def csv_row(self):
        return [getattr(self, name) for name in self.CSV_FIELDS]


# --- simulation ------------------------------------------------------------------


class Simulation:
    """Owns the runtime objects and advances them step by step (transactional)."""

    def __init__(self, config: SceneConfig):
        self.config = config
        self.objects = []
        for oid, spec in enumerate(config.objects):
            if isinstance(spec, SoftSpec):
                self.objects.append(_SoftRuntime(oid, spec))
            elif isinstance(spec, RigidSphereSpec):
                self.objects.append(_RigidRuntime(oid, spec))
            elif isinstance(spec, KinematicMeshSpec):
                self.objects.append(_KinematicRuntime(oid, spec))
            elif isinstance(spec, PlaneSpec):
                self.objects.append(_PlaneRuntime(oid, spec))
            else:
                raise ValidationError(f"unsupported object spec {type(spec)!r}")
        self.time = 0.0
        self.step_index = 0
        self.last_pairs = []
        self.last_frames = []
        self.last_lam = np.zeros(0)

    @property
    def dynamic_objects(self):
        return [o for o in self.objects if o.dynamic]

    def total_dofs(self) -> int:
        return sum(o.body.n_dofs for o in self.dynamic_objects)

    def _geometries(self, states, t):
        geoms = []
        for obj in self.objects:
            if obj.kind in ("soft", "rigid"):
                geoms.append(obj.geometry(states[obj.oid]))
            elif obj.kind == "kinematic":
                geoms.append(obj.geometry_at(t))
            else:
                geoms.append(obj.geometry())
        return geoms

    def _views(self, q_by_object, t):
        views = {}
        for obj in self.objects:
            if obj.dynamic:
                views[obj.oid] = obj.view_at(q_by_object[obj.oid])
            elif obj.kind == "kinematic":
                views[obj.oid] = obj.pose_at(t)
            else:
                views[obj.oid] = None
        return views

    def prepare_step(self, build_wg: bool | None = None):
        """Run the pre-correction pipeline (detect through free violation).

        Returns the solver context plus the free motions and phase timings;
        the correction scheme and integration consume it. Exposed so the
        verification command can probe the exact operators a step would use.
        """
        cfg = self.config
        h = cfg.h
        t_next = self.time + h
        t_begin = time.perf_counter()

        states = {o.oid: o.state for o in self.dynamic_objects}
        geoms = self._geometries(states, self.time)
        pairs = collision.detect(geoms, cfg.threshold)
        frames = collision.build_frames(pairs)
        t_detect = time.perf_counter()

        factorizations = {}
        rhs = {}
        for obj in self.dynamic_objects:
            F, b = obj.assemble(states[obj.oid], h, cfg.gravity)
            factorizations[obj.oid] = F
            rhs[obj.oid] = b
        t_assemble = time.perf_counter()

        free = {}
        for obj in self.dynamic_objects:
            free[obj.oid] = compute_free_motion(
                factorizations[obj.oid], rhs[obj.oid], states[obj.oid], h,
                factorization=factorizations[obj.oid],
            )
        t_free = time.perf_counter()

        S = {
            obj.oid: build_signed_mapping(
                pairs, obj.oid, obj.body.n_dofs, obj.body.fixed_mask
            )
            for obj in self.dynamic_objects
        }

        def refresh(dv_total):
            q_by_object = {
                oid: free[oid].q_free + h * np.asarray(dv_total.get(oid, 0.0))
                for oid in free
            }
            return collision.refresh_proximity(pairs, self._views(q_by_object, t_next))

        p_a0, p_b0 = refresh({})
        free_views = self._views({oid: free[oid].q_free for oid in free}, t_next)
        pen_before = (
            float(max(0.0, -collision.signed_gaps(pairs, free_views).min()))
            if pairs
            else 0.0
        )
        t_constraints = time.perf_counter()

        wg = None
        t_wg0 = time.perf_counter()
        if build_wg if build_wg is not None else (cfg.newton.scheme == "fast"):
            wg = assemble_Wg(S, factorizations)
        t_build_wg = time.perf_counter() - t_wg0

        ctx = StepContext(
            pairs=pairs,
            detection_frames=frames,
            S_by_object=S,
            F_by_object=factorizations,
            p_a0=p_a0,
            p_b0=p_b0,
            h=h,
            refresh=refresh,
            wg=wg,
        )
        timings = {
            "detect": t_detect - t_begin,
            "assemble": t_assemble - t_detect,
            "free": t_free - t_assemble,
            "constraints": t_constraints - t_free,
            "build_wg": t_build_wg,
            "begin": t_begin,
        }
        return ctx, free, states, pen_before, timings, t_next

    def step(self) -> StepReport:
        cfg = self.config
        h = cfg.h
        ctx, free, states, pen_before, timings, t_next = self.prepare_step()
        pairs = ctx.pairs
        if cfg.newton.scheme == "fast":
            result = newton_fast(ctx, cfg.newton, cfg.pgs)
        elif cfg.newton.scheme == "standard":
            result = newton_standard(ctx, cfg.newton, cfg.pgs)
        else:  # single corrective motion: the degenerate one-iteration loop
            ncfg = replace(cfg.newton, max_iterations=1, relinearize=False)
            result = newton_standard(ctx, ncfg, cfg.pgs)

        new_states = {}
        for obj in self.dynamic_objects:
            dv = result.dv_by_object.get(obj.oid, np.zeros(obj.body.n_dofs))
            new_states[obj.oid] = integrate_correction(states[obj.oid], free[obj.oid], dv, h)

        # end-of-step interpenetration: geometric distance of the frozen pairs
        # to their supporting elements at the final state (slip-immune, so a
        # stale-direction scheme cannot grade its own leftover penetration)
        if pairs:
            q_final = {oid: new_states[oid].q for oid in new_states}
            final_views = self._views(q_final, t_next)
            pen_after = float(max(0.0, -collision.signed_gaps(pairs, final_views).min()))
        else:
            pen_after = 0.0
        t_end = time.perf_counter()

        # commit
        for obj in self.dynamic_objects:
            if obj.kind == "rigid":
                obj.commit(new_states[obj.oid])
            else:
                obj.state = new_states[obj.oid]
        for obj in self.objects:
            if obj.kind == "kinematic":
                obj.time = t_next
        self.time = t_next
        self.step_index += 1
        self.last_pairs = pairs
        self.last_frames = result.final_frames
        self.last_lam = result.state.lam

        lam_groups = result.state.lam.reshape(-1, 3) if result.state.lam.size else np.zeros((0, 3))
        lam_t = np.hypot(lam_groups[:, 1], lam_groups[:, 2]) if len(lam_groups) else np.zeros(0)
        iterations = result.iterations
        return StepReport(
            step=self.step_index - 1,
            time=self.time,
            c_groups=len(pairs),
            dofs=self.total_dofs(),
            newton_iterations=len(iterations),
            pgs_iterations_total=sum(it.pgs_iterations for it in iterations),
            pen_before=pen_before,
            pen_after=pen_after,
            lambda_n_sum=float(lam_groups[:, 0].sum()) if len(lam_groups) else 0.0,
            lambda_n_max=float(lam_groups[:, 0].max()) if len(lam_groups) else 0.0,
            lambda_t_max=float(lam_t.max()) if len(lam_t) else 0.0,
            t_detect=timings["detect"],
            t_assemble=timings["assemble"],
            t_free=timings["free"],
            t_constraints=timings["constraints"],
            t_build_wg=timings["build_wg"],
            t_rebuild_w=sum(it.rebuild_time for it in iterations),
            t_pgs=sum(it.pgs_time for it in iterations),
            t_correction=sum(it.correction_time for it in iterations),
            t_final_correction=result.final_correction_time,
            t_step=t_end - timings["begin"],
            rebuild_times=[it.rebuild_time for it in iterations],
            pgs_times=[it.pgs_time for it in iterations],
            correction_times=[it.correction_time for it in iterations],
            penetration_history=[it.penetration for it in iterations],
        )


# --- persistence -----------------------------------------------------------------


@dataclass
class Snapshot:
    step: int
    time: float
    objects: list  # (oid, kind, q, v)
    pairs: list  # (object_a, object_b, p_a, p_b, frame(3x3), lam(3))


def take_snapshot(sim: Simulation) -> Snapshot:
    objects = []
    for obj in sim.objects:
        if obj.kind == "soft":
            objects.append((obj.oid, "soft", obj.state.q.copy(), obj.state.v.copy()))
        elif obj.kind == "rigid":
            quat = Rotation.from_matrix(obj.rotation).as_quat()
            q = np.concatenate([obj.state.q[:3], quat])
            objects.append((obj.oid, "rigid", q, obj.state.v.copy()))
        else:
            objects.append((obj.oid, obj.kind, np.zeros(0), np.zeros(0)))
    pairs = []
    for i, pair in enumerate(sim.last_pairs):
        frame = sim.last_frames[i].as_matrix() if i < len(sim.last_frames) else np.eye(3)
        lam = (
            sim.last_lam[3 * i : 3 * i + 3]
            if sim.last_lam.size >= 3 * i + 3
            else np.zeros(3)
        )
        pa, pb = pair.p_a, pair.p_b
        pairs.append((pair.object_a, pair.object_b, pa, pb, frame, lam))
    return Snapshot(sim.step_index, sim.time, objects, pairs)


def save_snapshot(snap: Snapshot, path) -> None:
    """Self-describing binary: text header, float64 little-endian payload."""
    header = io.StringIO()
    header.write(SNAPSHOT_MAGIC + "\n")
    header.write(f"step {snap.step}\n")
    header.write(f"time {snap.time!r}\n")
    header.write(f"objects {len(snap.objects)}\n")
    payload = []
    for oid, kind, q, v in snap.objects:
        header.write(f"obj {oid} {kind} {len(q)} {len(v)}\n")
        payload.append(np.asarray(q, dtype="<f8"))
        payload.append(np.asarray(v, dtype="<f8"))
    header.write(f"pairs {len(snap.pairs)}\n")
    for oa, ob, pa, pb, frame, lam in snap.pairs:
        header.write(f"pair {oa} {ob}\n")
        payload.append(np.asarray(pa, dtype="<f8"))
        payload.append(np.asarray(pb, dtype="<f8"))
        payload.append(np.asarray(frame, dtype="<f8").ravel())
        payload.append(np.asarray(lam, dtype="<f8"))
    header.write("end\n")
    with open(path, "wb") as fh:
        fh.write(header.getvalue().encode("ascii"))
        for arr in payload:
            fh.write(arr.tobytes())


def load_snapshot(path) -> Snapshot:
    with open(path, "rb") as fh:
        blob = fh.read()
    end_marker = b"end\n"
    pos = blob.find(end_marker)
    if pos < 0 or not blob.startswith(SNAPSHOT_MAGIC.encode("ascii")):
        raise ParseError(f"{path}: not a snapshot file")
    header_lines = blob[:pos].decode("ascii").splitlines()[1:]
    data = np.frombuffer(blob[pos + len(end_marker):], dtype="<f8")
    it = iter(header_lines)
    step = int(next(it).split()[1])
    t = float(next(it).split()[1])
    n_objects = int(next(it).split()[1])
    cursor = 0
    objects = []
    obj_dims = []
    for _ in range(n_objects):
        _, oid, kind, nq, nv = next(it).split()
        obj_dims.append((int(oid), kind, int(nq), int(nv)))
    n_pairs = int(next(it).split()[1])
    pair_ids = []
    for _ in range(n_pairs):
        _, oa, ob = next(it).split()
        pair_ids.append((int(oa), int(ob)))
    for oid, kind, nq, nv in obj_dims:
        q = data[cursor : cursor + nq].copy()
        cursor += nq
        v = data[cursor : cursor + nv].copy()
        cursor += nv
        objects.append((oid, kind, q, v))
    pairs = []
    for oa, ob in pair_ids:
        pa = data[cursor : cursor + 3].copy(); cursor += 3
        pb = data[cursor : cursor + 3].copy(); cursor += 3
        frame = data[cursor : cursor + 9].copy().reshape(3, 3); cursor += 9
        lam = data[cursor : cursor + 3].copy(); cursor += 3
        pairs.append((oa, ob, pa, pb, frame, lam))
    return Snapshot(step, t, objects, pairs)


def run(
    sim: Simulation,
    n_steps: int,
    out_dir=None,
    on_step=None,
) -> list[StepReport]:
    """Advance ``n_steps`` steps, writing snapshots and metrics per the output config."""
    if n_steps < 1:
        raise ValidationError(f"n_steps must be >= 1, got {n_steps}")
    out = sim.config.output
    writer = None
    metrics_fh = None
    snap_dir = None
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        if out.metrics:
            metrics_fh = open(os.path.join(out_dir, "metrics.csv"), "w", newline="")
            writer = csv.writer(metrics_fh)
            writer.writerow(StepReport.CSV_FIELDS)
        if out.snapshots:
            snap_dir = os.path.join(out_dir, "snapshots")
            os.makedirs(snap_dir, exist_ok=True)
    reports = []
    try:
        for _ in range(n_steps):
            report = sim.step()
            reports.append(report)
            if writer is not None:
                writer.writerow(report.csv_row())
            if snap_dir is not None and (report.step % out.every == 0):
                save_snapshot(
                    take_snapshot(sim),
                    os.path.join(snap_dir, f"step_{report.step:06d}.bin"),
                )
            if on_step is not None:
                on_step(report)
    finally:
        if metrics_fh is not None:
            metrics_fh.close()
    return reports
