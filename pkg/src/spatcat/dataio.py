"""File formats: dataset CSVs, the chain artifact container, and exports.

Datasets travel as CSV in one of two shapes: categorical rows
(x, y, class) or multinomial rows (x, y, n, count_<label>...).  Chains are
stored in a small columnar binary container -- a JSON header describing
array names, dtypes, shapes, and offsets, followed by raw little-endian
array bytes -- which round-trips byte-identically and is versioned.
"""

from __future__ import annotations

import csv
import json
import os
import struct
from dataclasses import asdict

import numpy as np

from .basis import KnotSet
from .errors import InvalidInputError
from .model import Dataset
from .sampler import ChainStore, SamplerConfig

ARTIFACT_MAGIC = b"SPCHAIN1"
ARTIFACT_VERSION = 1

CATEGORICAL_COLUMNS = ["x", "y", "class"]
MULTINOMIAL_PREFIX = "count_"


# ---------------------------------------------------------------------------
# dataset CSV


def _parse_float(value: str, line_no: int, column: str) -> float:
    try:
        return float(value)
    except (TypeError, ValueError):
        raise InvalidInputError(
            f"line {line_no}: column '{column}' is not numeric: {value!r}"
        ) from None


def _parse_count(value: str, line_no: int, column: str) -> int:
    try:
        out = int(value)
    except (TypeError, ValueError):
        raise InvalidInputError(
            f"line {line_no}: column '{column}' is not an integer: {value!r}"
        ) from None
    if out < 0:
        raise InvalidInputError(f"line {line_no}: column '{column}' is negative")
    return out


def load_dataset(path, control_label: str | None = None) -> Dataset:
    """Read a dataset CSV in categorical or multinomial shape.

    Categorical files need header columns x, y, class; labels are collected
    in first-appearance order and the control class (control_label, or the
    last label to appear when omitted) is moved to the end.  Multinomial
    files need x, y, n plus one count_<label> column per non-control class;
    the control count is n minus the row sum.  All validation failures name
    the offending line.
    """
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise InvalidInputError(f"{path}: empty file") from None
        header = [h.strip() for h in header]
        rows = list(reader)

    if set(CATEGORICAL_COLUMNS) <= set(header):
        return _load_categorical(path, header, rows, control_label)
    if {"x", "y", "n"} <= set(header) and any(
        h.startswith(MULTINOMIAL_PREFIX) for h in header
    ):
        return _load_multinomial(path, header, rows, control_label)
    raise InvalidInputError(
        f"{path}: header must contain (x, y, class) or (x, y, n, count_*); "
        f"got {header}"
    )


def _load_categorical(path, header, rows, control_label) -> Dataset:
    ix, iy, ic = (header.index(c) for c in CATEGORICAL_COLUMNS)
    labels: list[str] = []
    coords = []
    raw = []
    for offset, row in enumerate(rows):
        line_no = offset + 2  # header is line 1
        if len(row) != len(header):
            raise InvalidInputError(
                f"line {line_no}: expected {len(header)} fields, got {len(row)}"
            )
        coords.append((
            _parse_float(row[ix], line_no, "x"),
            _parse_float(row[iy], line_no, "y"),
        ))
        label = row[ic].strip()
        if not label:
            raise InvalidInputError(f"line {line_no}: empty class label")
        if label not in labels:
            labels.append(label)
        raw.append(label)
    if not raw:
        raise InvalidInputError(f"{path}: no data rows")

    if control_label is None:
        control_label = labels[-1]
    if control_label not in labels:
        raise InvalidInputError(
            f"control label {control_label!r} never appears in {path}"
        )
    ordered = [l for l in labels if l != control_label] + [control_label]
    index = {label: i for i, label in enumerate(ordered)}
    outcomes = np.array([index[l] for l in raw], dtype=np.int64)
    return Dataset.from_outcomes(outcomes, np.asarray(coords), ordered)


def _load_multinomial(path, header, rows, control_label) -> Dataset:
    ix, iy, inn = header.index("x"), header.index("y"), header.index("n")
    count_cols = [(i, h[len(MULTINOMIAL_PREFIX):]) for i, h in enumerate(header)
                  if h.startswith(MULTINOMIAL_PREFIX)]
    labels = [label for _, label in count_cols] + [control_label or "control"]
    coords = []
    Y = []
    N = []
    for offset, row in enumerate(rows):
        line_no = offset + 2
        if len(row) != len(header):
            raise InvalidInputError(
                f"line {line_no}: expected {len(header)} fields, got {len(row)}"
            )
        coords.append((
            _parse_float(row[ix], line_no, "x"),
            _parse_float(row[iy], line_no, "y"),
        ))
        n_i = _parse_count(row[inn], line_no, "n")
        if n_i < 1:
            raise InvalidInputError(f"line {line_no}: n must be >= 1")
        counts = [_parse_count(row[i], line_no, header[i]) for i, _ in count_cols]
        if sum(counts) > n_i:
            raise InvalidInputError(
                f"line {line_no}: class counts sum to {sum(counts)} > n={n_i}"
            )
        Y.append(counts)
        N.append(n_i)
    if not Y:
        raise InvalidInputError(f"{path}: no data rows")
    return Dataset(
        Y=np.asarray(Y, dtype=np.int64), N=np.asarray(N, dtype=np.int64),
        locations=np.asarray(coords), J=len(labels), class_labels=labels,
    )


def save_dataset(data: Dataset, path) -> None:
    """Write a dataset CSV; categorical shape when every row has one trial."""
    tmp = f"{os.fspath(path)}.tmp"
    with open(tmp, "w", newline="") as fh:
        writer = csv.writer(fh)
        if data.is_categorical:
            writer.writerow(CATEGORICAL_COLUMNS)
            control = data.J - 1
            for i in range(data.n):
                nz = np.nonzero(data.Y[i])[0]
                cls = int(nz[0]) if nz.size else control
                writer.writerow([
                    repr(float(data.locations[i, 0])), repr(float(data.locations[i, 1])),
                    data.class_labels[cls],
                ])
        else:
            writer.writerow(
                ["x", "y", "n"]
                + [MULTINOMIAL_PREFIX + l for l in data.class_labels[:-1]]
            )
            for i in range(data.n):
                writer.writerow([
                    repr(float(data.locations[i, 0])), repr(float(data.locations[i, 1])),
                    int(data.N[i]), *[int(c) for c in data.Y[i]],
                ])
    os.replace(tmp, path)


# ---------------------------------------------------------------------------
# chain artifact


_ARTIFACT_ARRAYS = ("mu", "W", "omega", "gamma", "phi", "pointwise_loglik")


def save_chain(chain: ChainStore, path) -> None:
    """Serialize a chain to the columnar binary container, atomically."""
    arrays = {name: np.ascontiguousarray(getattr(chain, name), dtype=np.float64)
              for name in _ARTIFACT_ARRAYS}
    arrays["knots"] = np.ascontiguousarray(chain.knots.coords, dtype=np.float64)

    entries = []
    offset = 0
    for name, arr in arrays.items():
        entries.append({
            "name": name,
            "dtype": "<f8",
            "shape": list(arr.shape),
            "offset": offset,
        })
        offset += arr.nbytes

    header = {
        "format_version": ARTIFACT_VERSION,
        "arrays": entries,
        "config": asdict(chain.config),
        "acceptance_counts": {k: list(v) for k, v in chain.acceptance_counts.items()},
        "burnin_acceptance_counts": {
            k: list(v) for k, v in chain.burnin_acceptance_counts.items()
        },
        "rng_seed": chain.rng_seed,
        "class_labels": chain.class_labels,
        "priors_snapshot": chain.priors_snapshot,
        "phi_rw_sd_final": chain.phi_rw_sd_final,
        # wall-clock timing is deliberately not persisted: artifacts from
        # identical seeds and configs must be byte-identical
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")

    tmp = f"{os.fspath(path)}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(ARTIFACT_MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for arr in arrays.values():
            fh.write(arr.tobytes(order="C"))
    os.replace(tmp, path)


def load_chain(path) -> ChainStore:
    """Read a chain artifact, checking magic and format version."""
    with open(path, "rb") as fh:
        magic = fh.read(len(ARTIFACT_MAGIC))
        if magic != ARTIFACT_MAGIC:
            raise InvalidInputError(f"{path}: not a chain artifact")
        (blob_len,) = struct.unpack("<Q", fh.read(8))
        header = json.loads(fh.read(blob_len).decode("utf-8"))
        if header.get("format_version") != ARTIFACT_VERSION:
            raise InvalidInputError(
                f"{path}: format version {header.get('format_version')} "
                f"unsupported (expected {ARTIFACT_VERSION})"
            )
        payload = fh.read()

    arrays = {}
    for entry in header["arrays"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(
            payload, dtype=np.dtype(entry["dtype"]), count=count,
            offset=entry["offset"],
        ).reshape(shape)
        arrays[entry["name"]] = arr.copy()

    config = SamplerConfig(**header["config"])
    return ChainStore(
        mu=arrays["mu"], W=arrays["W"], omega=arrays["omega"],
        gamma=arrays["gamma"], phi=arrays["phi"],
        pointwise_loglik=arrays["pointwise_loglik"],
        acceptance_counts={
            k: tuple(v) for k, v in header["acceptance_counts"].items()
        },
        burnin_acceptance_counts={
            k: tuple(v) for k, v in header["burnin_acceptance_counts"].items()
        },
        rng_seed=header["rng_seed"],
        config=config,
        knots=KnotSet(arrays["knots"]),
        class_labels=list(header["class_labels"]),
        priors_snapshot=header["priors_snapshot"],
        phi_rw_sd_final=header["phi_rw_sd_final"],
        mean_cycle_seconds=0.0,
    )


def export_chain_csv(chain: ChainStore, path) -> None:
    """Flatten draws into a plain CSV for external tooling."""
    cols = {}
    for j in range(chain.J - 1):
        cols[f"mu_{j + 1}"] = chain.mu[:, j]
    for j in range(chain.u):
        cols[f"omega_{j + 1}"] = chain.omega[:, j]
    cols["phi"] = chain.phi
    for j in range(chain.gamma.shape[1]):
        cols[f"gamma_{j + 1}"] = chain.gamma[:, j]
    for j in range(chain.u):
        for i in range(chain.k):
            cols[f"w_{j + 1}_{i + 1}"] = chain.W[:, i, j]
    tmp = f"{os.fspath(path)}.tmp"
    with open(tmp, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(cols.keys())
        for m in range(chain.n_draws):
            writer.writerow([repr(float(v[m])) for v in cols.values()])
    os.replace(tmp, path)


# ---------------------------------------------------------------------------
# other exports


def write_json(obj, path) -> None:
    tmp = f"{os.fspath(path)}.tmp"
    with open(tmp, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")
    os.replace(tmp, path)


def write_truth_json(truth, path) -> None:
    write_json(
        {
            "mu": truth.mu.tolist(),
            "W": truth.W.tolist(),
            "omega": truth.omega.tolist(),
            "gamma": truth.gamma.tolist(),
            "phi": truth.phi,
        },
        path,
    )


def write_dim_trace_json(trace, path) -> None:
    write_json(
        {
            "evaluated": [
                {"u": u, "waic": w, "seconds": s} for u, w, s in trace.evaluated
            ],
            "selected_u": trace.selected_u,
        },
        path,
    )


def write_prediction_csv(summary, path) -> None:
    """Per-location table: coordinates, mean probabilities, quantiles."""
    labels = summary.class_labels
    header = ["x", "y"] + [f"mean_{l}" for l in labels]
    if summary.occurrence_freq is not None:
        header += [f"freq_{l}" for l in labels]
    if summary.quantiles:
        for lvl in sorted(summary.quantiles):
            header += [f"q{lvl:g}_{l}" for l in labels]
    tmp = f"{os.fspath(path)}.tmp"
    with open(tmp, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for i in range(summary.locations.shape[0]):
            row = [repr(float(summary.locations[i, 0])), repr(float(summary.locations[i, 1]))]
            row += [f"{v:.10g}" for v in summary.mean_probs[i]]
            if summary.occurrence_freq is not None:
                row += [f"{v:.10g}" for v in summary.occurrence_freq[i]]
            if summary.quantiles:
                for lvl in sorted(summary.quantiles):
                    row += [f"{v:.10g}" for v in summary.quantiles[lvl][i]]
            writer.writerow(row)
    os.replace(tmp, path)


def write_area_csv(area_probs: dict, class_label: str, path) -> None:
    tmp = f"{os.fspath(path)}.tmp"
    with open(tmp, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["area_id", f"occurrence_{class_label}"])
        for area in sorted(area_probs, key=str):
            writer.writerow([area, f"{area_probs[area]:.10g}"])
    os.replace(tmp, path)
