"""CSV and JSON file formats.

Numbers are written in their shortest round-trip form (``repr`` of a
Python float), so files produced from identical arrays are byte-identical.
"""
from __future__ import annotations

import csv
import json
from pathlib import Path
from typing import Optional

import numpy as np

from .model import HiddenState, Kind, ModelError, ModelSpec, Parameters, state_fields, validate


def fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


def write_matrix_csv(path, M, header=None) -> None:
    M = np.atleast_2d(np.asarray(M))
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        if header is not None:
            w.writerow(header)
        for row in M:
            w.writerow([fmt(v) for v in row])


def read_matrix_csv(path, skip_header: bool = False) -> np.ndarray:
    """Read a numeric CSV; errors name the file and line."""
    rows = []
    width = None
    try:
        fh = open(path, newline="")
    except OSError as exc:
        raise ModelError(f"{path}: cannot open ({exc.strerror})") from None
    with fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if skip_header and lineno == 1:
                continue
            if not row or all(not c.strip() for c in row):
                continue
            try:
                vals = [float(c) for c in row]
            except ValueError:
                raise ModelError(f"{path}:{lineno}: non-numeric field") from None
            if width is None:
                width = len(vals)
            elif len(vals) != width:
                raise ModelError(f"{path}:{lineno}: expected {width} fields, found {len(vals)}")
            rows.append(vals)
    if not rows:
        raise ModelError(f"{path}: no data rows")
    return np.array(rows, dtype=float)


def _arr(v):
    return None if v is None else np.asarray(v, dtype=float).tolist()


def params_to_dict(spec: ModelSpec, theta: Parameters, seed: Optional[int] = None, **extra) -> dict:
    doc = {
        "model": spec.kind.value,
        "p": spec.p,
        "d": spec.d,
        "shifted": spec.shifted,
        "estimate_mu0": spec.estimate_mu0,
        "A": _arr(theta.A),
        "sigma2": float(theta.sigma2),
        "mu0": _arr(theta.mu0),
        "alpha": theta.alpha,
        "gamma": theta.gamma,
        "mu_shift": theta.mu_shift,
        "weights": _arr(theta.weights),
        "means": _arr(theta.means),
        "seed": seed,
    }
    if spec.kind is Kind.IFA:
        doc["K"] = spec.K
    doc.update(extra)
    return doc


def params_from_dict(doc: dict):
    """Inverse of :func:`params_to_dict`; returns ``(spec, theta, seed)``."""
    try:
        kind = Kind.parse(doc["model"])
        A = np.asarray(doc["A"], dtype=float)
        p, d = int(doc.get("p", A.shape[1])), int(doc.get("d", A.shape[0]))
        spec = ModelSpec(kind, p, d, shifted=bool(doc.get("shifted", False)), K=doc.get("K"),
                         estimate_mu0=doc.get("estimate_mu0"))
        opt = lambda k: None if doc.get(k) is None else np.asarray(doc[k], dtype=float)  # noqa: E731
        theta = Parameters(
            A=A,
            sigma2=float(doc["sigma2"]),
            mu0=opt("mu0"),
            alpha=doc.get("alpha"),
            gamma=doc.get("gamma"),
            mu_shift=doc.get("mu_shift"),
            weights=opt("weights"),
            means=opt("means"),
        )
    except KeyError as exc:
        raise ModelError(f"parameters document lacks field {exc.args[0]!r}") from None
    except (TypeError, ValueError) as exc:
        raise ModelError(f"malformed parameters document: {exc}") from None
    validate(spec, theta)
    return spec, theta, doc.get("seed")


def dump_json(path, doc) -> None:
    Path(path).write_text(json.dumps(doc, indent=2) + "\n")


def load_json(path) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except OSError as exc:
        raise ModelError(f"{path}: cannot open ({exc.strerror})") from None
    except json.JSONDecodeError as exc:
        raise ModelError(f"{path}:{exc.lineno}: invalid JSON ({exc.msg})") from None


def save_params(path, spec, theta, seed=None, **extra) -> None:
    dump_json(path, params_to_dict(spec, theta, seed, **extra))


def load_params(path):
    return params_from_dict(load_json(path))


def state_columns(spec: ModelSpec, z: HiddenState):
    """Flatten a batched hidden state into ``(header, matrix)``."""
    header, cols = [], []
    for name in state_fields(spec):
        v = np.asarray(getattr(z, name), dtype=float)
        if v.ndim == 1:
            header.append(name)
            cols.append(v[:, None])
        else:
            header += [f"{name}_{j}" for j in range(v.shape[1])]
            cols.append(v)
    return header, np.hstack(cols)
