"""On-disk formats: model, mapper, dataset, ensemble, query log, state.

Everything is little-endian and deterministic, so save -> load -> save
reproduces the original bytes exactly. Integers travel through struct,
floats as raw '<f8' numpy buffers.

Model snapshot (magic QNN1, mapper reuses it with magic QMP1):

    magic      4 bytes
    activation uint32, index into nn.ACTIVATIONS
    seed       int64
    n_layers   uint32
    sizes      uint32 * n_layers
    n_params   uint64
    params     float64 * n_params

Dataset file: ascii header lines (samples, dim, classes) closed by
"end", then one float64 row per sample: the features followed by the
label.

State container (magic QST1): named length-prefixed blocks holding the
serving stack (config JSON, protectee, mapper, ensemble, registry JSON,
queries served), followed by a sha256 digest of everything before it.
A truncated or bit-flipped file fails the digest check on load.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import nn, sensitivity
from .attacks import QueryLog
from .defense import DefendedServer, DefenseConfig
from .mapper import Mapper, MapperSpec
from .perturb import PerturbationConfig, ShadowEnsemble
from .util import canonical_json

MODEL_MAGIC = b"QNN1"
MAPPER_MAGIC = b"QMP1"
STATE_MAGIC = b"QST1"
STATE_SCHEMA = 1
DATA_SCHEMA = 1
QLOG_SCHEMA = 1


class CorruptFileError(ValueError):
    """Bytes on disk do not match their declared structure or checksum."""


# ------------------------------------------------------------ model files


def model_bytes(spec: nn.NetworkSpec, params, magic: bytes = MODEL_MAGIC) -> bytes:
    params = np.asarray(params, dtype=np.float64)
    if params.shape != (nn.param_count(spec),):
        raise ValueError("parameter vector does not match the spec")
    head = [
        magic,
        struct.pack("<I", nn.ACTIVATIONS.index(spec.activation)),
        struct.pack("<q", spec.seed),
        struct.pack("<I", len(spec.layer_sizes)),
        struct.pack(f"<{len(spec.layer_sizes)}I", *spec.layer_sizes),
        struct.pack("<Q", params.size),
    ]
    return b"".join(head) + params.astype("<f8").tobytes()


def model_from_bytes(blob: bytes, magic: bytes = MODEL_MAGIC):
    if blob[:4] != magic:
        raise CorruptFileError(f"bad magic {blob[:4]!r}, expected {magic!r}")
    off = 4
    act_code, = struct.unpack_from("<I", blob, off)
    off += 4
    seed, = struct.unpack_from("<q", blob, off)
    off += 8
    n_layers, = struct.unpack_from("<I", blob, off)
    off += 4
    sizes = struct.unpack_from(f"<{n_layers}I", blob, off)
    off += 4 * n_layers
    n_params, = struct.unpack_from("<Q", blob, off)
    off += 8
    if act_code >= len(nn.ACTIVATIONS):
        raise CorruptFileError(f"unknown activation code {act_code}")
    if len(blob) != off + 8 * n_params:
        raise CorruptFileError("model payload length does not match its header")
    spec = nn.NetworkSpec(sizes, activation=nn.ACTIVATIONS[act_code], seed=seed)
    if n_params != nn.param_count(spec):
        raise CorruptFileError("parameter count does not match the layer sizes")
    params = np.frombuffer(blob, dtype="<f8", count=n_params, offset=off).copy()
    return spec, params


def save_model(path, network: nn.Network) -> None:
    Path(path).write_bytes(model_bytes(network.spec, network.params))


def load_model(path) -> nn.Network:
    spec, params = model_from_bytes(Path(path).read_bytes())
    return nn.Network(spec, params)


def mapper_bytes(mapper: Mapper) -> bytes:
    return model_bytes(mapper.net_spec, mapper.params, magic=MAPPER_MAGIC)


def mapper_from_bytes(blob: bytes) -> Mapper:
    # the file stores the underlying network; temperature is a training
    # hyperparameter with no effect on the frozen map, so the default is
    # restored
    spec, params = model_from_bytes(blob, magic=MAPPER_MAGIC)
    mspec = MapperSpec(
        input_dim=spec.layer_sizes[0],
        hidden=tuple(spec.layer_sizes[1:-1]),
        seed=spec.seed,
    )
    return Mapper(mspec, params)


def save_mapper(path, mapper: Mapper) -> None:
    Path(path).write_bytes(mapper_bytes(mapper))


def load_mapper(path) -> Mapper:
    return mapper_from_bytes(Path(path).read_bytes())


# ----------------------------------------------------------- dataset files


def save_dataset(path, ds) -> None:
    """Text header then one float64 row per sample (features, label)."""
    head = (
        f"queen-data {DATA_SCHEMA}\n"
        f"samples {len(ds.X)}\n"
        f"dim {ds.X.shape[1]}\n"
        f"classes {ds.n_classes}\n"
        "end\n"
    )
    rows = np.hstack([ds.X, np.asarray(ds.y, dtype=np.float64)[:, None]])
    Path(path).write_bytes(head.encode("ascii") + rows.astype("<f8").tobytes())


def load_dataset(path):
    from .data import Dataset

    blob = Path(path).read_bytes()
    mark = blob.find(b"end\n")
    if not blob.startswith(b"queen-data") or mark < 0:
        raise CorruptFileError("not a dataset file")
    fields = {}
    for line in blob[:mark].decode("ascii").splitlines():
        key, value = line.split()
        fields[key] = value
    if int(fields["queen-data"]) != DATA_SCHEMA:
        raise CorruptFileError(f"unsupported dataset schema {fields['queen-data']}")
    n, d = int(fields["samples"]), int(fields["dim"])
    body = blob[mark + 4:]
    if len(body) != n * (d + 1) * 8:
        raise CorruptFileError("dataset payload length does not match its header")
    rows = np.frombuffer(body, dtype="<f8").reshape(n, d + 1)
    return Dataset(
        X=rows[:, :d].copy(),
        y=rows[:, d].astype(np.int64),
        n_classes=int(fields["classes"]),
    )


# -------------------------------------------------------- ensemble snapshot


def save_ensemble(directory, ensemble: ShadowEnsemble) -> None:
    """One model file per member plus a manifest with splits and seed."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    names = []
    for i, member in enumerate(ensemble.members):
        name = f"member-{i:02d}.qnn"
        (directory / name).write_bytes(model_bytes(member.spec, member.params))
        names.append(name)
    manifest = {
        "schema": 1,
        "seed": ensemble.seed,
        "members": names,
        "splits": [np.asarray(s).tolist() for s in ensemble.splits],
    }
    (directory / "manifest.json").write_text(canonical_json(manifest) + "\n")


def load_ensemble(directory) -> ShadowEnsemble:
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    if manifest.get("schema") != 1:
        raise CorruptFileError(f"unsupported ensemble schema {manifest.get('schema')!r}")
    members = [load_model(directory / name) for name in manifest["members"]]
    splits = [np.asarray(s, dtype=np.int64) for s in manifest["splits"]]
    return ShadowEnsemble(members=members, splits=splits, seed=manifest["seed"])


# ------------------------------------------------------------- query logs


def save_query_log(stem, log: QueryLog) -> None:
    """<stem>.qlog holds the binary rows, <stem>.manifest the text side."""
    stem = Path(stem)
    X, A = log.as_arrays()
    if len(log) == 0:
        raise ValueError("refusing to export an empty query log")
    rows = np.hstack([X, A]).astype("<f8")
    stem.with_suffix(".qlog").write_bytes(rows.tobytes())
    tokens = []
    for c in log.conditions:
        token = "-" if c is None else str(c)
        if "," in token or "\n" in token:
            raise ValueError(f"condition label {token!r} cannot be exported")
        tokens.append(token)
    manifest = (
        f"queen-qlog {QLOG_SCHEMA}\n"
        f"rows {len(log)}\n"
        f"query_dim {X.shape[1]}\n"
        f"answer_dim {A.shape[1]}\n"
        f"data {stem.with_suffix('.qlog').name}\n"
        f"conditions {','.join(tokens)}\n"
    )
    stem.with_suffix(".manifest").write_text(manifest)


def load_query_log(stem) -> QueryLog:
    stem = Path(stem)
    fields = {}
    for line in stem.with_suffix(".manifest").read_text().splitlines():
        key, _, value = line.partition(" ")
        fields[key] = value
    if int(fields["queen-qlog"]) != QLOG_SCHEMA:
        raise CorruptFileError(f"unsupported query log schema {fields['queen-qlog']}")
    n = int(fields["rows"])
    qd, ad = int(fields["query_dim"]), int(fields["answer_dim"])
    blob = (stem.parent / fields["data"]).read_bytes()
    if len(blob) != n * (qd + ad) * 8:
        raise CorruptFileError("query log payload length does not match its manifest")
    rows = np.frombuffer(blob, dtype="<f8").reshape(n, qd + ad)
    conditions = [None if t == "-" else t for t in fields["conditions"].split(",")]
    log = QueryLog()
    for i in range(n):
        log.record(rows[i, :qd], rows[i, qd:], conditions[i])
    return log


# ------------------------------------------------------------- config JSON


def config_to_dict(config: DefenseConfig) -> dict:
    return asdict(config)


def config_from_dict(payload: dict) -> DefenseConfig:
    payload = dict(payload)
    payload["perturbation"] = PerturbationConfig(**payload.get("perturbation", {}))
    return DefenseConfig(**payload)


def config_hash(config: DefenseConfig) -> str:
    return hashlib.sha256(canonical_json(config_to_dict(config)).encode()).hexdigest()


# ----------------------------------------------------------- state container


@dataclass
class PersistedState:
    """A serving session frozen mid-stream: models, registry, position."""

    network: nn.Network
    mapper: Mapper
    ensemble: ShadowEnsemble | None
    registry: sensitivity.QueryRegistry
    config: DefenseConfig
    n_served: int

    @classmethod
    def from_server(cls, server: DefendedServer) -> "PersistedState":
        return cls(
            network=server.network,
            mapper=server.mapper,
            ensemble=server.ensemble,
            registry=server.registry,
            config=server.config,
            n_served=server.n_served,
        )

    def to_server(self) -> DefendedServer:
        return DefendedServer(
            self.network,
            self.mapper,
            self.registry.profiles,
            self.ensemble,
            self.config,
            registry=self.registry,
            n_served=self.n_served,
        )


def _block(name: str, data: bytes) -> bytes:
    tag = name.encode("ascii")
    return struct.pack("<I", len(tag)) + tag + struct.pack("<Q", len(data)) + data


def _read_blocks(blob: bytes) -> dict[str, bytes]:
    blocks, off = {}, 0
    while off < len(blob):
        if off + 4 > len(blob):
            raise CorruptFileError("state block table is truncated")
        nlen, = struct.unpack_from("<I", blob, off)
        off += 4
        name = blob[off:off + nlen].decode("ascii")
        off += nlen
        dlen, = struct.unpack_from("<Q", blob, off)
        off += 8
        if off + dlen > len(blob):
            raise CorruptFileError("state block table is truncated")
        blocks[name] = blob[off:off + dlen]
        off += dlen
    return blocks


def state_bytes(state: PersistedState) -> bytes:
    meta = {
        "schema": STATE_SCHEMA,
        "config": config_to_dict(state.config),
        "config_hash": config_hash(state.config),
        "n_served": state.n_served,
        "n_shadow_members": 0 if state.ensemble is None else len(state.ensemble),
    }
    blocks = [
        _block("meta", canonical_json(meta).encode()),
        _block("network", model_bytes(state.network.spec, state.network.params)),
        _block("mapper", mapper_bytes(state.mapper)),
        _block("registry", sensitivity.registry_to_json(state.registry).encode()),
    ]
    if state.ensemble is not None:
        splits = canonical_json(
            {"seed": state.ensemble.seed,
             "splits": [np.asarray(s).tolist() for s in state.ensemble.splits]}
        )
        blocks.append(_block("ensemble_splits", splits.encode()))
        for i, member in enumerate(state.ensemble.members):
            blocks.append(
                _block(f"shadow{i:02d}", model_bytes(member.spec, member.params))
            )
    payload = b"".join(blocks)
    head = STATE_MAGIC + struct.pack("<IQ", STATE_SCHEMA, len(payload))
    body = head + payload
    return body + hashlib.sha256(body).digest()


def state_from_bytes(blob: bytes) -> PersistedState:
    if len(blob) < 16 + 32:
        raise CorruptFileError("state file failed its checksum (truncated)")
    if blob[:4] != STATE_MAGIC:
        raise CorruptFileError(f"bad magic {blob[:4]!r}, expected {STATE_MAGIC!r}")
    schema, plen = struct.unpack_from("<IQ", blob, 4)
    if schema != STATE_SCHEMA:
        raise CorruptFileError(f"unsupported state schema {schema}")
    body, digest = blob[:-32], blob[-32:]
    if len(body) != 16 + plen or hashlib.sha256(body).digest() != digest:
        raise CorruptFileError("state file failed its checksum (truncated or corrupted)")
    blocks = _read_blocks(body[16:])
    meta = json.loads(blocks["meta"])
    spec, params = model_from_bytes(blocks["network"])
    ensemble = None
    if meta["n_shadow_members"]:
        split_meta = json.loads(blocks["ensemble_splits"])
        members = []
        for i in range(meta["n_shadow_members"]):
            mspec, mparams = model_from_bytes(blocks[f"shadow{i:02d}"])
            members.append(nn.Network(mspec, mparams))
        ensemble = ShadowEnsemble(
            members=members,
            splits=[np.asarray(s, dtype=np.int64) for s in split_meta["splits"]],
            seed=split_meta["seed"],
        )
    return PersistedState(
        network=nn.Network(spec, params),
        mapper=mapper_from_bytes(blocks["mapper"]),
        ensemble=ensemble,
        registry=sensitivity.registry_from_json(blocks["registry"].decode()),
        config=config_from_dict(meta["config"]),
        n_served=meta["n_served"],
    )


def save_state(path, state: PersistedState) -> None:
    Path(path).write_bytes(state_bytes(state))


def load_state(path) -> PersistedState:
    return state_from_bytes(Path(path).read_bytes())
