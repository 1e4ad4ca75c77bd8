"""Versioned binary artifacts and the ensemble directory layout.

Artifact file layout (little-endian)::

    magic      8 bytes  b"CNNINTE1"
    kind       u8       see KINDS
    version    u16
    length     u64      payload byte count
    payload    <length> bytes
    crc32      u32      over every preceding byte

Payload: u32 entry count, then per entry::

    name_len u16, name (utf-8), dtype u8 (see DTYPES), ndim u8, dims u64 x ndim, raw data

Entry order is the order written, so save -> load -> save reproduces the bytes.
Per kind, the entries are:

    model        meta (config json), training_log, <layer>.{weights,biases,m_w,v_w,m_b,v_b,step}
    activations  values (H x N float64), labels (N int64)
    factor       factor_of_neuron, train_ids, then per factor f: f<f>.centroids, f<f>.assignment,
                 f<f>.relabel, f<f>.stats ([inertia, n_iter])
    forest       meta (json of scalars + seeds), then per tree t: t<t>.{feature,threshold,left,right,histogram,depth}
    meta         features (N x K int64), labels, meta (json role)
"""
from __future__ import annotations

import json
import struct
import zlib
from pathlib import Path

import numpy as np

from . import forest as F
from .clustering import FactorModel, KMeansModel
from .cnn import ActivationMatrix, CnnConfig, CnnModel
from .errors import ArtifactError
from .meta import Ensemble, EnsembleConfig, MetaDataset
from .nn import LayerParams

MAGIC = b"CNNINTE1"
VERSION = 1
KINDS = {"model": 1, "activations": 2, "factor": 3, "tree": 4, "forest": 5, "trace": 6, "meta": 7}
DTYPES = {1: "<f8", 2: "<i8", 3: "u1", 4: "<f4", 5: "<u2"}
_DTYPE_CODE = {np.dtype(v): k for k, v in DTYPES.items()}
_HEADER = struct.Struct("<8sBHQ")


def _encode_entries(entries: list) -> bytes:
    out = [struct.pack("<I", len(entries))]
    for name, arr in entries:
        arr = np.asarray(arr)
        dt = arr.dtype.newbyteorder("<") if arr.dtype.byteorder == ">" else arr.dtype
        if np.dtype(dt) not in _DTYPE_CODE:
            if np.issubdtype(arr.dtype, np.integer) or arr.dtype == bool:
                dt = np.dtype("<i8")
            else:
                dt = np.dtype("<f8")
        arr = np.ascontiguousarray(arr, dtype=dt)
        raw_name = name.encode()
        out.append(struct.pack("<H", len(raw_name)) + raw_name)
        out.append(struct.pack("<BB", _DTYPE_CODE[np.dtype(dt)], arr.ndim))
        out.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        out.append(arr.tobytes())
    return b"".join(out)


def _decode_entries(payload: bytes) -> dict:
    entries = {}
    try:
        (count,) = struct.unpack_from("<I", payload, 0)
        pos = 4
        for _ in range(count):
            (nl,) = struct.unpack_from("<H", payload, pos)
            pos += 2
            name = payload[pos:pos + nl].decode()
            pos += nl
            code, ndim = struct.unpack_from("<BB", payload, pos)
            pos += 2
            shape = struct.unpack_from(f"<{ndim}Q", payload, pos)
            pos += 8 * ndim
            dt = np.dtype(DTYPES[code])
            size = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
            if pos + size > len(payload):
                raise ArtifactError(f"entry {name!r} overruns payload")
            entries[name] = np.frombuffer(payload, dtype=dt, count=size // dt.itemsize, offset=pos).reshape(shape).copy()
            pos += size
    except (struct.error, KeyError, UnicodeDecodeError) as exc:
        raise ArtifactError(f"malformed artifact payload: {exc}") from exc
    if pos != len(payload):
        raise ArtifactError("trailing bytes in artifact payload")
    return entries


def pack(kind: str, entries: list) -> bytes:
    payload = _encode_entries(entries)
    body = _HEADER.pack(MAGIC, KINDS[kind], VERSION, len(payload)) + payload
    return body + struct.pack("<I", zlib.crc32(body))


def unpack(data: bytes, kind: str) -> dict:
    if len(data) < _HEADER.size + 4:
        raise ArtifactError("artifact shorter than its header")
    magic, kind_code, version, length = _HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        raise ArtifactError(f"bad artifact magic {magic!r}")
    if kind_code != KINDS[kind]:
        names = {v: k for k, v in KINDS.items()}
        raise ArtifactError(f"expected a {kind} artifact, found {names.get(kind_code, kind_code)}")
    if version != VERSION:
        raise ArtifactError(f"unsupported artifact version {version}")
    if len(data) != _HEADER.size + length + 4:
        raise ArtifactError("artifact length does not match header")
    (crc,) = struct.unpack_from("<I", data, len(data) - 4)
    if zlib.crc32(data[:-4]) != crc:
        raise ArtifactError("artifact CRC mismatch")
    return _decode_entries(data[_HEADER.size:-4])


def _json_entry(obj) -> np.ndarray:
    return np.frombuffer(json.dumps(obj, sort_keys=True).encode(), dtype=np.uint8)


def _json_value(arr) -> dict:
    return json.loads(bytes(arr).decode())


# --- per-kind encoders --------------------------------------------------------

def dump_model(model: CnnModel) -> bytes:
    entries = [("meta", _json_entry(vars(model.config))),
               ("training_log", np.asarray(model.training_log, dtype=np.float64))]
    for name in CnnModel.LAYERS:
        p = getattr(model, name)
        entries += [(f"{name}.weights", p.weights), (f"{name}.biases", p.biases), (f"{name}.m_w", p.m_w),
                    (f"{name}.v_w", p.v_w), (f"{name}.m_b", p.m_b), (f"{name}.v_b", p.v_b),
                    (f"{name}.step", np.array([p.step_count], dtype=np.int64))]
    return pack("model", entries)


def load_model(data: bytes) -> CnnModel:
    e = unpack(data, "model")
    layers = {}
    for name in CnnModel.LAYERS:
        layers[name] = LayerParams(e[f"{name}.weights"], e[f"{name}.biases"], e[f"{name}.m_w"], e[f"{name}.v_w"],
                                   e[f"{name}.m_b"], e[f"{name}.v_b"], int(e[f"{name}.step"][0]))
    return CnnModel(config=CnnConfig(**_json_value(e["meta"])), training_log=e["training_log"].tolist(), **layers)


def dump_activations(act: ActivationMatrix) -> bytes:
    return pack("activations", [("values", act.values), ("labels", act.instance_labels)])


def load_activations(data: bytes) -> ActivationMatrix:
    e = unpack(data, "activations")
    return ActivationMatrix(e["values"], e["labels"])


def dump_factor(fm: FactorModel) -> bytes:
    entries = [("factor_of_neuron", fm.factor_of_neuron),
               ("train_ids", fm.train_ids if fm.train_ids is not None else np.zeros((0, 0), dtype=np.int64))]
    for f, (m, rl) in enumerate(zip(fm.instance_models, fm.canonical_relabel)):
        entries += [(f"f{f}.centroids", m.centroids), (f"f{f}.assignment", m.assignment),
                    (f"f{f}.relabel", rl), (f"f{f}.stats", np.array([m.inertia, m.n_iter], dtype=np.float64))]
    return pack("factor", entries)


def load_factor(data: bytes) -> FactorModel:
    e = unpack(data, "factor")
    models, relabels = [], []
    f = 0
    while f"f{f}.centroids" in e:
        stats = e[f"f{f}.stats"]
        c = e[f"f{f}.centroids"]
        models.append(KMeansModel(len(c), c, e[f"f{f}.assignment"], float(stats[0]), [], int(stats[1])))
        relabels.append(e[f"f{f}.relabel"])
        f += 1
    ids = e["train_ids"] if e["train_ids"].size else None
    return FactorModel(e["factor_of_neuron"], models, relabels, ids)


def dump_forest(rf: F.RandomForest) -> bytes:
    meta = {"n_trees": rf.n_trees, "max_nodes": rf.max_nodes, "seeds": [str(s) for s in rf.seeds],
            "features_per_split": rf.features_per_split, "n_classes": rf.n_classes,
            "bootstrap": rf.bootstrap, "n_samples": rf.n_samples}
    entries = [("meta", _json_entry(meta))]
    for t, tree in enumerate(rf.trees):
        entries += [(f"t{t}.feature", tree.feature), (f"t{t}.threshold", tree.threshold), (f"t{t}.left", tree.left),
                    (f"t{t}.right", tree.right), (f"t{t}.histogram", tree.histogram), (f"t{t}.depth", tree.depth),
                    (f"t{t}.shape", np.array([tree.n_features, -1 if tree.max_depth is None else tree.max_depth]))]
    return pack("forest", entries)


def load_forest(data: bytes) -> F.RandomForest:
    e = unpack(data, "forest")
    m = _json_value(e["meta"])
    trees = []
    for t in range(m["n_trees"]):
        nf, md = (int(v) for v in e[f"t{t}.shape"])
        trees.append(F.DecisionTree(e[f"t{t}.feature"], e[f"t{t}.threshold"], e[f"t{t}.left"], e[f"t{t}.right"],
                                    e[f"t{t}.histogram"], e[f"t{t}.depth"], nf, None if md < 0 else md))
    return F.RandomForest(trees, m["n_trees"], m["max_nodes"], [int(s) for s in m["seeds"]],
                          m["features_per_split"], m["n_classes"], m["bootstrap"], m["n_samples"])


def dump_meta(md: MetaDataset) -> bytes:
    return pack("meta", [("features", md.features), ("labels", md.labels), ("meta", _json_entry({"role": md.role}))])


def load_meta(data: bytes) -> MetaDataset:
    e = unpack(data, "meta")
    return MetaDataset(e["features"], e["labels"], _json_value(e["meta"])["role"])


# --- files and directories ------------------------------------------------------

def write_bytes(path, data: bytes):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(data)


def read_bytes(path) -> bytes:
    try:
        return Path(path).read_bytes()
    except OSError as exc:
        raise ArtifactError(f"cannot read {path}: {exc}") from exc


def save_ensemble(ens: Ensemble, directory):
    """Directory: config.json, factor.bin, meta_tree.txt, forest_<k>.bin, meta_train.bin."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    (d / "config.json").write_text(json.dumps(vars(ens.config), sort_keys=True, indent=1) + "\n")
    write_bytes(d / "factor.bin", dump_factor(ens.factor_model))
    (d / "meta_tree.txt").write_text(F.tree_to_text(ens.meta_learner))
    for k, rf in enumerate(ens.base_models):
        write_bytes(d / f"forest_{k:02d}.bin", dump_forest(rf))
    if ens.meta_train is not None:
        write_bytes(d / "meta_train.bin", dump_meta(ens.meta_train))


def load_ensemble(directory) -> Ensemble:
    d = Path(directory)
    if not (d / "config.json").exists():
        raise ArtifactError(f"{d} is not an ensemble directory (config.json missing)")
    config = EnsembleConfig(**json.loads((d / "config.json").read_text()))
    fm = load_factor(read_bytes(d / "factor.bin"))
    tree = F.tree_from_text((d / "meta_tree.txt").read_text())
    forests = [load_forest(read_bytes(d / f"forest_{k:02d}.bin")) for k in range(config.n_factors)]
    meta_train = load_meta(read_bytes(d / "meta_train.bin")) if (d / "meta_train.bin").exists() else None
    return Ensemble(tree, forests, fm, config, meta_train)
