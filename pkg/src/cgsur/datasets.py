"""On-disk dataset formats: raw float64 blobs plus JSON manifests.

Every dataset directory carries the field manifest (grid, field parameters,
seed, count, boundary scenario) with lambda.f64 and bc.f64 blobs; labeled
and validation sets add y.f64 with the fine nodal solutions; virtual
query sets add vo.json with gamma.f64 / alpha.f64 holding the constraint
rows in sparse triplet encoding (row, col, value), or the energy marker.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np

from . import fem, field, vobs
from .errors import ConfigError
from .field import BcScenario, GrfSpec


def config_hash(text: str) -> str:
    normalized = "\n".join(line.rstrip() for line in text.strip().splitlines())
    return hashlib.sha256(normalized.encode()).hexdigest()[:16]


def _write_blob(path: Path, arr: np.ndarray) -> None:
    path.write_bytes(np.asarray(arr, dtype=np.float64).astype("<f8").tobytes())


def _read_blob(path: Path, shape) -> np.ndarray:
    return np.frombuffer(path.read_bytes(), dtype="<f8").reshape(shape).copy()


def write_labeled_dataset(
    directory, spec: GrfSpec, seed, scenario: BcScenario, lambdas, bcs, ys
) -> None:
    directory = Path(directory)
    field.write_field_dataset(directory, spec, seed, scenario, lambdas, bcs)
    ys = np.asarray(ys, dtype=np.float64)
    if ys.shape != (lambdas.shape[0], (spec.grid_size + 1) ** 2):
        raise ValueError(f"ys has shape {ys.shape}")
    _write_blob(directory / "y.f64", ys)


def read_labeled_dataset(directory):
    directory = Path(directory)
    manifest, lambdas, bcs = field.read_field_dataset(directory)
    ys = _read_blob(
        directory / "y.f64", (manifest["count"], (manifest["d_f"] + 1) ** 2)
    )
    return manifest, lambdas, bcs, ys


def write_vobs_dataset(
    directory,
    spec: GrfSpec,
    seed,
    scenario: BcScenario,
    lambdas,
    bcs,
    observables,
    vo_type: str,
    rbf_scale: float | None = None,
    source: float = 0.0,
) -> None:
    """Store built virtual observables: triplet-encoded rows per query."""
    directory = Path(directory)
    field.write_field_dataset(directory, spec, seed, scenario, lambdas, bcs)
    queries = []
    trip_rows, trip_cols, trip_vals, alphas = [], [], [], []
    trip_pos = alpha_pos = 0
    for obs in observables:
        if isinstance(obs, vobs.EnergyObservable):
            queries.append({"energy": True, "tau": obs.tau})
            continue
        sets = []
        for cs in obs:
            rows, cols = np.nonzero(cs.gamma)
            vals = cs.gamma[rows, cols]
            sets.append(
                {
                    "kind": cs.kind,
                    "m": int(cs.m),
                    "nnz": int(vals.size),
                    "triplet_offset": trip_pos,
                    "alpha_offset": alpha_pos,
                }
            )
            trip_rows.append(rows.astype(np.float64))
            trip_cols.append(cols.astype(np.float64))
            trip_vals.append(vals)
            alphas.append(cs.alpha)
            trip_pos += vals.size
            alpha_pos += cs.m
        queries.append({"energy": False, "sets": sets})
    m_counts = {}
    for obs in observables:
        if not isinstance(obs, vobs.EnergyObservable):
            for cs in obs:
                m_counts[cs.kind] = int(cs.m)
    meta = {
        "type": vo_type,
        "m_counts": m_counts,
        "rbf_scale": rbf_scale,
        "source": source,
        "seed": int(seed),
        "queries": queries,
    }
    (directory / "vo.json").write_text(json.dumps(meta, indent=2))
    if trip_vals:
        triplets = np.concatenate(
            [
                np.column_stack((r, c, v)).ravel()
                for r, c, v in zip(trip_rows, trip_cols, trip_vals)
            ]
        )
        _write_blob(directory / "gamma.f64", triplets)
        _write_blob(directory / "alpha.f64", np.concatenate(alphas))


def read_vobs_dataset(directory):
    """Rebuild observables; energy systems are reassembled from the fields."""
    directory = Path(directory)
    manifest, lambdas, bcs = field.read_field_dataset(directory)
    meta = json.loads((directory / "vo.json").read_text())
    d_f = manifest["d_f"]
    n_nodes = (d_f + 1) ** 2
    mesh = fem.build_mesh(d_f)
    source = meta.get("source", 0.0)
    triplets = alphas = None
    if (directory / "gamma.f64").exists():
        raw = np.frombuffer((directory / "gamma.f64").read_bytes(), dtype="<f8")
        triplets = raw.reshape(-1, 3)
        alphas = np.frombuffer((directory / "alpha.f64").read_bytes(), dtype="<f8")
    observables = []
    for i, q in enumerate(meta["queries"]):
        if q["energy"]:
            bc = field.BoundaryCoeffs.from_array(bcs[i])
            observables.append(
                vobs.build_energy(
                    mesh, np.exp(lambdas[i]), bc, tau=q["tau"], source=source
                )
            )
            continue
        sets = []
        for s in q["sets"]:
            t = triplets[s["triplet_offset"] : s["triplet_offset"] + s["nnz"]]
            gamma = np.zeros((s["m"], n_nodes))
            gamma[t[:, 0].astype(int), t[:, 1].astype(int)] = t[:, 2]
            alpha = alphas[s["alpha_offset"] : s["alpha_offset"] + s["m"]].copy()
            precision = (
                vobs.Learned("flux") if s["kind"] == "flux" else vobs.Exact()
            )
            sets.append(
                vobs.LinearConstraintSet(
                    gamma=gamma, alpha=alpha, precision=precision, kind=s["kind"]
                )
            )
        observables.append(sets)
    return manifest, meta, lambdas, bcs, observables


def write_run_manifest(directory, payload: dict) -> None:
    Path(directory, "manifest.json").write_text(json.dumps(payload, indent=2))


def read_run_manifest(directory) -> dict:
    path = Path(directory, "manifest.json")
    if not path.exists():
        raise ConfigError(f"no manifest.json under {directory}")
    return json.loads(path.read_text())
