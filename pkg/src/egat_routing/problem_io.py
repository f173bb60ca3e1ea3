"""TSPLIB/CVRPLIB parsing, checkpoints, reports, datasets and SVG rendering."""
from __future__ import annotations

import csv
import hashlib
import io
import json
import struct
import zipfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .env import CVRP, CVRP_CAPACITY, DEMAND_SCALE, TSP, Instance, opt_gap, split_routes
from .model import EGATModel, ModelConfig

# best known / optimal costs under the rounded TSPLIB metric
REFERENCE_OPTIMA = {
    "eil51": 426, "berlin52": 7542, "st70": 675, "eil76": 538, "pr76": 108159,
    "rat99": 1211, "kroA100": 21282, "kroB100": 22141, "kroC100": 20749,
    "kroD100": 21294, "kroE100": 22068, "rd100": 7910, "eil101": 629,
    "lin105": 14379, "pr107": 44303, "pr124": 59030, "bier127": 118282,
    "ch130": 6110, "pr136": 96772, "pr144": 58537, "ch150": 6528,
    "kroA150": 26524, "kroB150": 26130, "pr152": 73682, "u159": 42080,
    "A-n32-k5": 784, "A-n36-k5": 799, "A-n37-k5": 669, "A-n38-k5": 730,
    "A-n39-k5": 822, "A-n44-k6": 937, "A-n45-k6": 944, "A-n46-k7": 914,
    "A-n48-k7": 1073, "A-n63-k10": 1314, "A-n64-k9": 1401, "A-n65-k9": 1174,
    "A-n69-k9": 1159, "B-n34-k5": 788, "B-n35-k5": 955, "B-n45-k6": 678,
    "B-n50-k7": 741, "B-n51-k7": 1032, "B-n52-k7": 747, "B-n56-k7": 707,
    "B-n57-k9": 1598, "B-n63-k10": 1496, "B-n64-k9": 861, "B-n66-k9": 1316,
    "B-n68-k9": 1272, "E-n30-k3": 534, "E-n51-k5": 521, "P-n50-k8": 631,
    "P-n51-k10": 741, "P-n55-k10": 694, "P-n60-k10": 744, "P-n65-k10": 792,
    "P-n70-k10": 827, "A-n80-k10": 1763, "B-n78-k10": 1221, "E-n76-k10": 830,
    "E-n101-k14": 1067, "M-n101-k10": 820, "M-n121-k7": 1034, "M-n151-k12": 1015,
    "M-n200-k17": 1275, "P-n76-k5": 627, "P-n101-k4": 681, "X-n106-k14": 26362,
    "X-n125-k30": 55539, "X-n134-k13": 10916, "X-n148-k46": 43448,
    "X-n157-k13": 16876, "X-n181-k23": 25569, "X-n200-k36": 58578,
    "X-n223-k34": 40437, "X-n251-k28": 38684, "X-n266-k58": 75478,
    "X-n298-k31": 34231,
}


class ParseError(ValueError):
    pass


class CheckpointError(ValueError):
    pass


# -- TSPLIB / CVRPLIB ---------------------------------------------------------

_SECTIONS = ("NODE_COORD_SECTION", "DEMAND_SECTION", "DEPOT_SECTION", "EDGE_WEIGHT_SECTION")


def _read_sections(text):
    header, sections, current = {}, {}, None
    for raw in text.splitlines():
        line = raw.strip()
        if not line:
            continue
        if line == "EOF":
            break
        head = line.split(":")[0].strip() if ":" in line else line.split()[0]
        if head in _SECTIONS:
            current = head
            sections[current] = []
            rest = line[len(head):].strip()
            if rest:
                sections[current].append(rest.split())
            continue
        if current is None or (":" in line and not line[0].isdigit() and not line[0] == "-"):
            if ":" not in line:
                raise ParseError(f"unexpected line {raw!r}")
            key, _, value = line.partition(":")
            header[key.strip()] = value.strip()
            current = None
            continue
        sections[current].append(line.split())
    return header, sections


def _dimension(header):
    try:
        return int(header["DIMENSION"])
    except (KeyError, ValueError):
        raise ParseError("missing or invalid DIMENSION") from None


def _coords(rows, n):
    if len(rows) != n:
        raise ParseError(f"NODE_COORD_SECTION has {len(rows)} rows, DIMENSION is {n}")
    ids, pts = [], []
    for row in rows:
        if len(row) != 3:
            raise ParseError(f"malformed coordinate row {' '.join(row)!r}")
        try:
            ids.append(int(row[0]))
            pts.append((float(row[1]), float(row[2])))
        except ValueError:
            raise ParseError(f"malformed coordinate row {' '.join(row)!r}") from None
    if sorted(ids) != list(range(1, n + 1)):
        raise ParseError("node ids must be 1..DIMENSION")
    order = np.argsort(ids)
    return np.array(pts)[order]


def _check_edge_type(header):
    kind = header.get("EDGE_WEIGHT_TYPE")
    if kind != "EUC_2D":
        raise ParseError(f"unsupported EDGE_WEIGHT_TYPE {kind!r}; only EUC_2D is handled")


def parse_tsplib(text):
    """Parse a EUC_2D TSPLIB file; coordinates are kept in their original units."""
    header, sections = _read_sections(text)
    if header.get("TYPE", "TSP").split()[0] != "TSP":
        raise ParseError(f"not a TSP file (TYPE {header.get('TYPE')!r})")
    _check_edge_type(header)
    if "NODE_COORD_SECTION" not in sections:
        raise ParseError("NODE_COORD_SECTION missing")
    n = _dimension(header)
    coords = _coords(sections["NODE_COORD_SECTION"], n)
    return Instance(TSP, coords, name=header.get("NAME", ""), meta={"comment": header.get("COMMENT", "")})


def trained_capacity(n_customers):
    """Normalised capacity of the closest standard training size."""
    nearest = min(CVRP_CAPACITY, key=lambda s: (abs(s - n_customers), s))
    return CVRP_CAPACITY[nearest] / DEMAND_SCALE


def parse_cvrplib(text, capacity_scale=None):
    """Parse a EUC_2D CVRPLIB file.

    The depot moves to index 0. Demands are rescaled to delta / Q * D where
    Q is the file's capacity and D the normalised capacity of the nearest
    training size (or ``capacity_scale``), so the model sees the demand to
    capacity ratio it was trained on. Raw capacity/demands stay in ``meta``.
    """
    header, sections = _read_sections(text)
    if header.get("TYPE", "CVRP").split()[0] != "CVRP":
        raise ParseError(f"not a CVRP file (TYPE {header.get('TYPE')!r})")
    _check_edge_type(header)
    for sec in ("NODE_COORD_SECTION", "DEMAND_SECTION", "DEPOT_SECTION"):
        if sec not in sections:
            raise ParseError(f"{sec} missing")
    if "CAPACITY" not in header:
        raise ParseError("CAPACITY missing")
    n = _dimension(header)
    cap = float(header["CAPACITY"])
    coords = _coords(sections["NODE_COORD_SECTION"], n)
    dem_rows = sections["DEMAND_SECTION"]
    if len(dem_rows) != n or any(len(r) != 2 for r in dem_rows):
        raise ParseError("DEMAND_SECTION must have one 'id demand' row per node")
    demands = np.zeros(n)
    for node, d in dem_rows:
        demands[int(node) - 1] = float(d)
    depots = [int(tok) for row in sections["DEPOT_SECTION"] for tok in row if int(tok) != -1]
    if len(depots) != 1:
        raise ParseError(f"exactly one depot supported, found {len(depots)}")
    depot = depots[0] - 1
    if demands[depot] != 0:
        raise ParseError("depot demand must be 0")
    if np.any(demands > cap):
        raise ParseError("a customer demand exceeds the vehicle capacity")
    order = [depot] + [i for i in range(n) if i != depot]
    coords, raw = coords[order], demands[order]
    if np.any(raw[1:] <= 0):
        raise ParseError("customer demands must be positive")
    D = trained_capacity(n - 1) if capacity_scale is None else float(capacity_scale)
    meta = {"raw_capacity": cap, "raw_demands": raw.tolist(), "comment": header.get("COMMENT", "")}
    return Instance(CVRP, coords, raw / cap * D, D, name=header.get("NAME", ""), meta=meta)


def _fmt(v):
    return repr(float(v))


def serialize_tsplib(instance):
    """Write an instance back out as TSPLIB/CVRPLIB text (EUC_2D)."""
    lines = [f"NAME : {instance.name or 'instance'}"]
    if instance.kind == TSP:
        lines += ["TYPE : TSP", f"DIMENSION : {instance.n_nodes}", "EDGE_WEIGHT_TYPE : EUC_2D"]
    else:
        cap = instance.meta.get("raw_capacity", instance.capacity)
        lines += ["TYPE : CVRP", f"DIMENSION : {instance.n_nodes}",
                  "EDGE_WEIGHT_TYPE : EUC_2D", f"CAPACITY : {_fmt(cap)}"]
    lines.append("NODE_COORD_SECTION")
    lines += [f"{i + 1} {_fmt(x)} {_fmt(y)}" for i, (x, y) in enumerate(instance.coords)]
    if instance.kind == CVRP:
        raw = instance.meta.get("raw_demands")
        raw = instance.demands if raw is None else raw
        lines.append("DEMAND_SECTION")
        lines += [f"{i + 1} {_fmt(d)}" for i, d in enumerate(raw)]
        lines += ["DEPOT_SECTION", "1", "-1"]
    lines.append("EOF")
    return "\n".join(lines) + "\n"


def parse_file(path, **kwargs):
    text = Path(path).read_text()
    header, _ = _read_sections(text)
    if header.get("TYPE", "").split()[:1] == ["CVRP"]:
        return parse_cvrplib(text, **kwargs)
    return parse_tsplib(text)


def normalize_instance(instance):
    """Rescale coordinates into the unit square with one uniform factor.

    Returns (normalised instance, scale); multiply normalised lengths by
    ``scale`` to get lengths in the original units.
    """
    lo = instance.coords.min(axis=0)
    scale = float((instance.coords.max(axis=0) - lo).max()) or 1.0
    coords = (instance.coords - lo) / scale
    return Instance(instance.kind, coords, instance.demands, instance.capacity,
                    instance.name, dict(instance.meta)), scale


# -- datasets -----------------------------------------------------------------

_ZIP_EPOCH = (1980, 1, 1, 0, 0, 0)

def save_dataset(path, instances, manifest):
    """Instances to a .npz (readable by ``np.load``) with an embedded JSON manifest.

    Written entry by entry with a fixed timestamp so reruns are byte-identical.
    """
    from .env import stack_instances

    coords, demands, capacity = stack_instances(instances)
    arrays = {"coords": coords, "manifest": np.frombuffer(_canonical(manifest), dtype=np.uint8)}
    if demands is not None:
        arrays["demands"] = demands
        arrays["capacity"] = capacity
    with zipfile.ZipFile(path, "w", zipfile.ZIP_STORED) as zf:
        for name in sorted(arrays):
            buf = io.BytesIO()
            np.lib.format.write_array(buf, np.ascontiguousarray(arrays[name]), allow_pickle=False)
            zf.writestr(zipfile.ZipInfo(name + ".npy", date_time=_ZIP_EPOCH), buf.getvalue())


def load_dataset(path, kind=None, size=None):
    with np.load(path) as data:
        manifest = json.loads(bytes(data["manifest"]).decode())
        if kind is not None and manifest.get("kind") != kind:
            raise ValueError(f"dataset kind {manifest.get('kind')!r} does not match {kind!r}")
        if size is not None and manifest.get("size") != size:
            raise ValueError(f"dataset size {manifest.get('size')!r} does not match {size!r}")
        k = manifest["kind"]
        if k == TSP:
            insts = [Instance(TSP, c) for c in data["coords"]]
        else:
            insts = [Instance(CVRP, c, d, q) for c, d, q in
                     zip(data["coords"], data["demands"], data["capacity"])]
    return insts, manifest


# -- checkpoints ----------------------------------------------------------------

CHECKPOINT_MAGIC = b"EGATCKPT"
CHECKPOINT_VERSION = 1
_DTYPES = {torch.float32: "<f4", torch.float64: "<f8", torch.int64: "<i8"}
_TORCH = {v: k for k, v in _DTYPES.items()}


@dataclass
class Checkpoint:
    config: ModelConfig
    tensors: dict
    metadata: dict = field(default_factory=dict)
    version: int = CHECKPOINT_VERSION

    @classmethod
    def from_model(cls, model, metadata=None, extra=None):
        tensors = {k: v.detach().clone() for k, v in model.state_dict().items()}
        for k, v in (extra or {}).items():
            tensors["trainer." + k] = v.detach().clone()
        return cls(model.cfg, tensors, dict(metadata or {}))

    def model_tensors(self):
        return {k: v for k, v in self.tensors.items() if not k.startswith("trainer.")}

    def trainer_tensors(self):
        return {k[len("trainer."):]: v for k, v in self.tensors.items() if k.startswith("trainer.")}

    def build_model(self):
        model = EGATModel(self.config)
        apply_checkpoint(model, self)
        model.eval()
        return model


def _canonical(obj):
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()


def checkpoint_bytes(cp: Checkpoint):
    index, payloads, offset = [], [], 0
    for name in sorted(cp.tensors):
        t = cp.tensors[name].detach().cpu().contiguous()
        if t.dtype not in _DTYPES:
            raise CheckpointError(f"unsupported dtype {t.dtype} for {name}")
        raw = t.numpy().astype(_DTYPES[t.dtype], copy=False).tobytes()
        index.append({"name": name, "dtype": _DTYPES[t.dtype], "shape": list(t.shape),
                      "offset": offset, "nbytes": len(raw)})
        payloads.append(raw)
        offset += len(raw)
    header = _canonical({"version": cp.version, "config": cp.config.to_dict(),
                         "metadata": cp.metadata, "tensors": index})
    body = CHECKPOINT_MAGIC + struct.pack("<IQ", cp.version, len(header)) + header + b"".join(payloads)
    return body + hashlib.sha256(body).digest()


def save_checkpoint(cp: Checkpoint, path):
    data = checkpoint_bytes(cp)
    with open(path, "wb") as fh:
        fh.write(data)


def load_checkpoint(path, expected_config: ModelConfig | None = None):
    data = Path(path).read_bytes()
    if len(data) < len(CHECKPOINT_MAGIC) + 12 + 32 or not data.startswith(CHECKPOINT_MAGIC):
        raise CheckpointError(f"{path}: not a checkpoint file")
    body, digest = data[:-32], data[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointError(f"{path}: checksum mismatch (truncated or corrupted)")
    pos = len(CHECKPOINT_MAGIC)
    version, hlen = struct.unpack_from("<IQ", body, pos)
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    pos += 12
    header = json.loads(body[pos:pos + hlen])
    pos += hlen
    tensors = {}
    for entry in header["tensors"]:
        start = pos + entry["offset"]
        arr = np.frombuffer(body[start:start + entry["nbytes"]], dtype=entry["dtype"])
        tensors[entry["name"]] = torch.from_numpy(arr.copy()).to(_TORCH[entry["dtype"]]).reshape(entry["shape"])
    cp = Checkpoint(ModelConfig.from_dict(header["config"]), tensors, header["metadata"], version)
    if expected_config is not None:
        check_compatible(cp, expected_config)
    return cp


def check_compatible(cp, cfg: ModelConfig):
    if cp.config != cfg:
        diffs = {k: (v, getattr(cfg, k)) for k, v in cp.config.to_dict().items() if getattr(cfg, k) != v}
        raise CheckpointError(f"checkpoint config differs: {diffs}")


def apply_checkpoint(model, cp: Checkpoint):
    """Copy checkpoint tensors into ``model`` after checking names and shapes."""
    own = model.state_dict()
    saved = cp.model_tensors()
    missing = sorted(set(own) - set(saved))
    unknown = sorted(set(saved) - set(own))
    if missing or unknown:
        raise CheckpointError(f"tensor names differ: missing {missing}, unexpected {unknown}")
    for name, t in saved.items():
        if tuple(t.shape) != tuple(own[name].shape):
            raise CheckpointError(
                f"shape mismatch for {name}: checkpoint {tuple(t.shape)} vs model {tuple(own[name].shape)}"
            )
    model.load_state_dict({k: v.to(own[k].dtype) for k, v in saved.items()})
    return model


# -- reports ----------------------------------------------------------------------

REPORT_COLUMNS = ("instance", "method", "length", "reference", "gap", "seconds")
MEAN_ROW = "__mean__"


def make_row(instance, method, length, reference=None, seconds=0.0):
    gap = None if reference is None else (length - reference) / reference
    return {"instance": str(instance), "method": method, "length": float(length),
            "reference": None if reference is None else float(reference),
            "gap": gap, "seconds": float(seconds)}


def aggregate(rows):
    """One mean row per method; the gap is the mean of per-instance gaps."""
    out = []
    methods = list(dict.fromkeys(r["method"] for r in rows if r["instance"] != MEAN_ROW))
    for m in methods:
        sel = [r for r in rows if r["method"] == m and r["instance"] != MEAN_ROW]
        refs = [r["reference"] for r in sel]
        has_ref = all(x is not None for x in refs)
        out.append({
            "instance": MEAN_ROW, "method": m,
            "length": float(np.mean([r["length"] for r in sel])),
            "reference": float(np.mean(refs)) if has_ref else None,
            "gap": opt_gap([r["length"] for r in sel], refs) if has_ref else None,
            "seconds": float(np.mean([r["seconds"] for r in sel])),
        })
    return out


def write_report(rows, path, fmt=None, config_hash=None):
    """Write rows plus per-method aggregate rows as CSV or JSON."""
    if not rows:
        raise ValueError("empty report")
    path = Path(path)
    fmt = fmt or path.suffix.lstrip(".")
    body = [r for r in rows if r["instance"] != MEAN_ROW]
    full = body + aggregate(body)
    if fmt == "json":
        payload = {"config_hash": config_hash, "columns": list(REPORT_COLUMNS), "rows": full}
        path.write_text(json.dumps(payload, indent=1, sort_keys=True) + "\n")
    elif fmt == "csv":
        buf = io.StringIO()
        if config_hash:
            buf.write(f"# config_hash={config_hash}\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(REPORT_COLUMNS)
        for r in full:
            w.writerow(["" if r[c] is None else (repr(r[c]) if isinstance(r[c], float) else r[c])
                        for c in REPORT_COLUMNS])
        path.write_text(buf.getvalue())
    else:
        raise ValueError(f"unknown report format {fmt!r}")
    return full


def read_report(path):
    path = Path(path)
    if path.suffix == ".json":
        return json.loads(path.read_text())["rows"]
    lines = [ln for ln in path.read_text().splitlines() if not ln.startswith("#")]
    rows = []
    for rec in csv.DictReader(lines):
        row = {"instance": rec["instance"], "method": rec["method"]}
        for c in ("length", "reference", "gap", "seconds"):
            row[c] = float(rec[c]) if rec[c] != "" else None
        rows.append(row)
    return rows


class MetricsLog:
    """Per-epoch metrics appended to both a CSV and a JSON-lines file."""

    def __init__(self, directory, config_hash=None, stem="metrics"):
        self.csv_path = Path(directory) / f"{stem}.csv"
        self.jsonl_path = Path(directory) / f"{stem}.jsonl"
        self.config_hash = config_hash
        self.columns = None

    def reset(self):
        for p in (self.csv_path, self.jsonl_path):
            if p.exists():
                p.unlink()

    def append(self, metrics):
        row = dict(metrics)
        if self.config_hash:
            row["config_hash"] = self.config_hash
        with open(self.jsonl_path, "a") as fh:
            fh.write(json.dumps(row, sort_keys=True) + "\n")
        new = not self.csv_path.exists()
        if new:
            self.columns = sorted(row)
        elif self.columns is None:
            with open(self.csv_path) as fh:
                self.columns = next(csv.reader(fh))
        with open(self.csv_path, "a", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=self.columns, extrasaction="ignore", lineterminator="\n")
            if new:
                w.writeheader()
            w.writerow(row)


# -- SVG --------------------------------------------------------------------------

PALETTE = ("#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b",
           "#e377c2", "#7f7f7f", "#bcbd22", "#17becf")


def route_edges(instance, seq, omit_depot=False):
    """List of (color index, [(a, b), ...]) per route."""
    if instance.kind == TSP:
        s = list(seq)
        return [(0, list(zip(s, s[1:] + s[:1])))]
    out = []
    for k, route in enumerate(split_routes(seq)):
        path = route if omit_depot else [0] + route + [0]
        out.append((k, list(zip(path, path[1:]))))
    return out


def render_svg(instance, seq, path=None, omit_depot_edges=False, size=480, margin=20):
    """Draw nodes and the route(s); returns the SVG text and writes it if ``path`` is given."""
    pts = instance.coords
    lo = pts.min(axis=0)
    span = float((pts.max(axis=0) - lo).max()) or 1.0
    scale = (size - 2 * margin) / span

    def xy(i):
        x, y = (pts[i] - lo) * scale
        return margin + x, size - margin - y  # flip y so north is up

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" '
           f'viewBox="0 0 {size} {size}">', f'<rect width="{size}" height="{size}" fill="white"/>']
    for k, edges in route_edges(instance, seq, omit_depot_edges):
        color = PALETTE[k % len(PALETTE)]
        for a, b in edges:
            (x1, y1), (x2, y2) = xy(a), xy(b)
            out.append(f'<line class="edge route-{k}" x1="{x1:.2f}" y1="{y1:.2f}" x2="{x2:.2f}" '
                       f'y2="{y2:.2f}" stroke="{color}" stroke-width="1.5"/>')
    for i in range(instance.n_nodes):
        x, y = xy(i)
        if instance.kind == CVRP and i == 0:
            out.append(f'<rect class="depot" x="{x - 5:.2f}" y="{y - 5:.2f}" width="10" height="10" fill="black"/>')
        else:
            out.append(f'<circle class="node" cx="{x:.2f}" cy="{y:.2f}" r="3" fill="#333"/>')
    out.append("</svg>")
    svg = "\n".join(out) + "\n"
    if path is not None:
        Path(path).write_text(svg)
    return svg
