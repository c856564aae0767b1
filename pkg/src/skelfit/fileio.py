"""File formats and results persistence.

Models and configs are JSON documents; marker trajectories and results are
plain CSV. All solver artifacts written here are byte-deterministic for
identical inputs, with one deliberate exception: wall-clock timings go to
a separate ``timing.csv`` so the deterministic artifacts stay comparable
across runs. Units on disk match the internal ones (meters, radians,
dimensionless scale); summary statistics report mm where noted.
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np

from skelfit.framesolver import Observation, SolverConfig, TrialResult
from skelfit.kinmodel import (
    ROOT_PARENT,
    BodyNode,
    JointSpec,
    KinematicModel,
    MarkerAttachment,
    validate_model,
)


class DataError(Exception):
    """Malformed or inconsistent input data; maps to CLI exit code 2."""


# ---------------------------------------------------------------------------
# Model documents
# ---------------------------------------------------------------------------

def _require(obj: dict, key: str, where: str):
    if key not in obj:
        raise DataError(f"{where}: missing field {key!r}")
    return obj[key]


def load_model(path) -> KinematicModel:
    """Parse a model JSON document and validate it."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"model file not found: {path}")
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: invalid JSON ({exc})") from exc

    bodies = []
    for i, b in enumerate(_require(doc, "bodies", str(path))):
        where = f"body {i}"
        joint_doc = _require(b, "joint", where)
        offset = joint_doc.get("frame_offset", {})
        joint = JointSpec(
            kind=_require(joint_doc, "kind", f"{where}.joint"),
            axis=np.asarray(joint_doc.get("axis", [0.0, 0.0, 1.0]), float),
            offset_translation=np.asarray(offset.get("translation", [0.0, 0.0, 0.0]), float),
            offset_quaternion=np.asarray(offset.get("quaternion", [1.0, 0.0, 0.0, 0.0]), float),
        )
        bodies.append(BodyNode(
            id=int(_require(b, "id", where)),
            parent=int(_require(b, "parent", where)),
            joint=joint,
            anchor=np.asarray(b.get("anchor", [0.0, 0.0, 0.0]), float),
            scale_slot=(int(b["scale_slot"]) if b.get("scale_slot") is not None else None),
        ))
    markers = []
    for i, m in enumerate(_require(doc, "markers", str(path))):
        where = f"marker {i}"
        markers.append(MarkerAttachment(
            marker_id=str(_require(m, "marker_id", where)),
            body=int(_require(m, "body", where)),
            local_offset=np.asarray(_require(m, "local_offset", where), float),
            weight=float(m.get("weight", 1.0)),
        ))
    try:
        return KinematicModel(bodies=tuple(bodies), markers=tuple(markers))
    except ValueError as exc:
        raise DataError(f"{path}: {exc}") from exc


def model_to_doc(model: KinematicModel) -> dict:
    bodies = []
    for b in model.bodies:
        bodies.append({
            "id": b.id,
            "parent": b.parent,
            "joint": {
                "kind": b.joint.kind,
                "axis": b.joint.axis.tolist(),
                "frame_offset": {
                    "translation": b.joint.offset_translation.tolist(),
                    "quaternion": b.joint.offset_quaternion.tolist(),
                },
            },
            "anchor": b.anchor.tolist(),
            "scale_slot": b.scale_slot,
        })
    markers = [{
        "marker_id": m.marker_id,
        "body": m.body,
        "local_offset": m.local_offset.tolist(),
        "weight": m.weight,
    } for m in model.markers]
    return {"bodies": bodies, "markers": markers}


def save_model(model: KinematicModel, path) -> None:
    Path(path).write_text(json.dumps(model_to_doc(model), indent=2) + "\n")


# ---------------------------------------------------------------------------
# Marker trajectory tables
# ---------------------------------------------------------------------------

def save_markers(observations, times, model: KinematicModel, path) -> None:
    """CSV with header frame,time,<id>_x,<id>_y,<id>_z,...; blank = invisible."""
    path = Path(path)
    header = ["frame", "time"]
    for m in model.markers:
        header += [f"{m.marker_id}_x", f"{m.marker_id}_y", f"{m.marker_id}_z"]
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for t, (obs, ti) in enumerate(zip(observations, times)):
            row = [str(t), f"{ti:.9g}"]
            for k in range(model.n_markers):
                if obs.visibility[k]:
                    row += [f"{obs.x_obs[3 * k + j]:.17g}" for j in range(3)]
                else:
                    row += ["", "", ""]
            w.writerow(row)


def load_markers(path, model: KinematicModel):
    """Read a marker CSV back into per-frame Observations.

    Columns are matched to model markers by name; markers absent from the
    file are invisible in every frame. Returns (observations, times).
    """
    path = Path(path)
    if not path.exists():
        raise DataError(f"marker file not found: {path}")
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty marker file") from None
        if header[:2] != ["frame", "time"]:
            raise DataError(f"{path}: header must start with frame,time")
        known = {m.marker_id: k for k, m in enumerate(model.markers)}
        col_of: dict[int, tuple[int, int]] = {}
        for c, name in enumerate(header[2:], start=2):
            if len(name) < 3 or name[-2] != "_" or name[-1] not in "xyz":
                raise DataError(f"{path}: malformed marker column {name!r}")
            mid, axis = name[:-2], "xyz".index(name[-1])
            if mid not in known:
                raise DataError(f"{path}: unknown marker id {mid!r}")
            col_of[c] = (known[mid], axis)

        observations = []
        times = []
        prev_t = -np.inf
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise DataError(f"{path}:{lineno}: expected {len(header)} cells, got {len(row)}")
            try:
                ti = float(row[1])
            except ValueError:
                raise DataError(f"{path}:{lineno}: bad time value {row[1]!r}") from None
            if ti <= prev_t:
                raise DataError(f"{path}:{lineno}: non-monotone time column")
            prev_t = ti
            x = np.zeros(model.n_x)
            vis = np.zeros(model.n_markers, dtype=bool)
            filled = np.zeros((model.n_markers, 3), dtype=bool)
            for c, (k, axis) in col_of.items():
                cell = row[c].strip()
                if cell:
                    try:
                        x[3 * k + axis] = float(cell)
                    except ValueError:
                        raise DataError(f"{path}:{lineno}: bad cell {cell!r}") from None
                    filled[k, axis] = True
            vis = filled.all(axis=1)
            observations.append(Observation(x_obs=x, visibility=vis))
            times.append(ti)
    if not observations:
        raise DataError(f"{path}: no frames")
    return observations, np.asarray(times)


def save_states(states, times, path) -> None:
    """Ground-truth or estimated state table: frame,time,y0..yN."""
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        first = states[0]
        n = (first.as_vector() if hasattr(first, "as_vector") else np.asarray(first)).size
        w.writerow(["frame", "time"] + [f"y{j}" for j in range(n)])
        for t, (st, ti) in enumerate(zip(states, times)):
            y = st.as_vector() if hasattr(st, "as_vector") else np.asarray(st, float)
            w.writerow([str(t), f"{ti:.9g}"] + [f"{v:.17g}" for v in y])


def load_states(path) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise DataError(f"state file not found: {path}")
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        n = len(header) - 2
        rows = [np.array([float(v) for v in row[2:]]) for row in reader if row]
    if any(r.size != n for r in rows):
        raise DataError(f"{path}: ragged state rows")
    return np.stack(rows)


# ---------------------------------------------------------------------------
# Config documents
# ---------------------------------------------------------------------------

_SOLVER_FIELD_NAMES = {f.name for f in fields(SolverConfig)}


def solver_config_from_doc(doc: dict) -> SolverConfig:
    unknown = set(doc) - _SOLVER_FIELD_NAMES
    if unknown:
        raise DataError(f"unknown solver config keys: {sorted(unknown)}")
    kwargs = dict(doc)
    for key in ("y_ref", "damping_diag", "lb", "ub"):
        if kwargs.get(key) is not None:
            kwargs[key] = np.asarray(kwargs[key], float)
    try:
        return SolverConfig(**kwargs)
    except (TypeError, ValueError) as exc:
        raise DataError(f"bad solver config: {exc}") from exc


def load_config(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise DataError(f"config file not found: {path}")
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: invalid JSON ({exc})") from exc
    if not isinstance(doc, dict):
        raise DataError(f"{path}: config must be a JSON object")
    return doc


def _jsonable(value):
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, (np.floating, np.integer)):
        return value.item()
    if isinstance(value, dict):
        return {k: _jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    return value


def save_resolved_config(doc: dict, path) -> None:
    Path(path).write_text(json.dumps(_jsonable(doc), indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# Results
# ---------------------------------------------------------------------------

def write_results(trial: TrialResult, output_dir, resolved_config: dict | None = None,
                  extra_summary: str = "") -> None:
    """Emit frames.csv, timing.csv, summary.txt and config_resolved.json.

    frames.csv and summary.txt carry only run-independent values; per-frame
    wall time lives in timing.csv, which is expected to differ across runs.
    """
    out = Path(output_dir)
    out.mkdir(parents=True, exist_ok=True)

    n_y = trial.frames[0].y_est.as_vector().size if trial.frames else 0
    with (out / "frames.csv").open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["frame", "status", "iterations", "accepted_steps", "rmse_mm", "energy"]
                   + [f"y{j}" for j in range(n_y)])
        for t, f in enumerate(trial.frames):
            w.writerow([
                str(t), f.status, str(f.iterations), str(f.accepted_steps),
                f"{f.marker_rmse_mm:.17g}", f"{f.final_weighted_energy:.17g}",
            ] + [f"{v:.17g}" for v in f.y_est.as_vector()])

    with (out / "timing.csv").open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["frame", "time_us"])
        for t, f in enumerate(trial.frames):
            w.writerow([str(t), f"{f.wall_time_us:.3f}"])

    statuses: dict[str, int] = {}
    for f in trial.frames:
        statuses[f.status] = statuses.get(f.status, 0) + 1
    lines = [
        f"frames: {len(trial.frames)}",
        "statuses: " + ", ".join(f"{k}={v}" for k, v in sorted(statuses.items())),
        f"iterations p50/p90: {trial.p50_iterations:.0f}/{trial.p90_iterations:.0f}",
        f"marker rmse mm mean/p50/p90: {trial.mean_rmse_mm:.4f}/{trial.p50_rmse_mm:.4f}/{trial.p90_rmse_mm:.4f}",
        "timing: see timing.csv (run-dependent, excluded from determinism checks)",
    ]
    if extra_summary:
        lines += ["", extra_summary]
    (out / "summary.txt").write_text("\n".join(lines) + "\n")

    if resolved_config is not None:
        save_resolved_config(resolved_config, out / "config_resolved.json")


def solver_config_to_doc(config: SolverConfig) -> dict:
    return _jsonable(asdict(config))
