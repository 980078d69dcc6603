"""On-disk formats: embedding files, checkpoints, datasets, metrics, loss tables.

Every writer is a pure function of its inputs (no timestamps, sorted JSON
keys), so rewriting what was read yields identical bytes.

Embedding file (little-endian)::

    b"ISAE" | u16 version | u32 N | u32 d
    N x ( u16 id_len | id ASCII bytes | d x f32 )
    [ b"META" | u32 len | canonical JSON ]      optional trailer

Checkpoint file::

    b"ISAC" | u16 version | u32 header_len | header JSON | raw <f8 blobs

The header lists each array's group, name, shape and byte offset into the
blob section, plus the run config, seed and loss history.
"""

from __future__ import annotations

import csv
import io
import json
import struct
from pathlib import Path

import numpy as np

from .datagen import DataConfig, Dataset, SyntheticImage, TripletRecord
from .retrieval import GalleryIndex
from .trainer import CHECKPOINT_VERSION, Checkpoint

EMBED_MAGIC = b"ISAE"
EMBED_VERSION = 1
META_MAGIC = b"META"
CKPT_MAGIC = b"ISAC"
DATASET_FORMAT = "isacir-dataset"
DATASET_VERSION = 1


class FormatError(ValueError):
    """A file does not match the expected layout."""


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False)


def _write_atomic(path: Path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    tmp.replace(path)


# -- embeddings ---------------------------------------------------------------

def encode_embeddings(ids: list[str], vectors: np.ndarray, meta: dict | None = None) -> bytes:
    vectors = np.asarray(vectors)
    if vectors.ndim != 2 or vectors.shape[0] != len(ids):
        raise FormatError("need one d-dim vector per id")
    n, d = vectors.shape
    out = io.BytesIO()
    out.write(EMBED_MAGIC + struct.pack("<HII", EMBED_VERSION, n, d))
    rows = vectors.astype("<f4")
    for ident, row in zip(ids, rows):
        raw = ident.encode("ascii")
        if len(raw) > 0xFFFF:
            raise FormatError(f"id too long: {ident[:20]}...")
        out.write(struct.pack("<H", len(raw)) + raw + row.tobytes())
    if meta is not None:
        blob = canonical_json(meta).encode("utf-8")
        out.write(META_MAGIC + struct.pack("<I", len(blob)) + blob)
    return out.getvalue()


def decode_embeddings(data: bytes) -> tuple[list[str], np.ndarray, dict | None]:
    view = memoryview(data)
    if len(data) < 14 or bytes(view[:4]) != EMBED_MAGIC:
        raise FormatError("not an embedding file (bad magic)")
    version, n, d = struct.unpack_from("<HII", data, 4)
    if version != EMBED_VERSION:
        raise FormatError(f"unsupported embedding format version {version}")
    pos = 14
    ids = []
    vectors = np.empty((n, d), dtype=np.float32)
    for i in range(n):
        if pos + 2 > len(data):
            raise FormatError("truncated embedding file")
        (length,) = struct.unpack_from("<H", data, pos)
        pos += 2
        end = pos + length + 4 * d
        if end > len(data):
            raise FormatError("truncated embedding file")
        ids.append(bytes(view[pos:pos + length]).decode("ascii"))
        vectors[i] = np.frombuffer(data, dtype="<f4", count=d, offset=pos + length)
        pos = end
    meta = None
    if pos < len(data):
        if bytes(view[pos:pos + 4]) != META_MAGIC or pos + 8 > len(data):
            raise FormatError("trailing bytes after embedding records")
        (length,) = struct.unpack_from("<I", data, pos + 4)
        if pos + 8 + length != len(data):
            raise FormatError("metadata trailer length mismatch")
        meta = json.loads(bytes(view[pos + 8:]).decode("utf-8"))
    return ids, vectors, meta


def write_index(path, index: GalleryIndex, config: dict | None = None) -> None:
    meta = {"seed": index.seed, "fingerprint": index.fingerprint}
    if config is not None:
        meta["config"] = config
    _write_atomic(path, encode_embeddings(index.ids, index.vectors, meta))


def read_index(path) -> tuple[GalleryIndex, dict]:
    ids, vectors, meta = decode_embeddings(Path(path).read_bytes())
    meta = meta or {}
    index = GalleryIndex(ids, vectors.astype(np.float64), int(meta.get("seed", 0)),
                         str(meta.get("fingerprint", "")))
    return index, meta


# -- checkpoints --------------------------------------------------------------

def encode_checkpoint(ckpt: Checkpoint) -> bytes:
    table, blobs, offset = [], [], 0
    for group, arrays in (("params", ckpt.params), ("teacher", ckpt.teacher)):
        for name, arr in arrays.items():
            raw = np.ascontiguousarray(arr, dtype="<f8").tobytes()
            table.append({"group": group, "name": name, "shape": list(np.shape(arr)),
                          "offset": offset, "nbytes": len(raw)})
            blobs.append(raw)
            offset += len(raw)
    header = canonical_json({"version": ckpt.version, "seed": ckpt.seed, "config": ckpt.config,
                             "history": ckpt.history, "arrays": table}).encode("utf-8")
    return CKPT_MAGIC + struct.pack("<HI", ckpt.version, len(header)) + header + b"".join(blobs)


def decode_checkpoint(data: bytes) -> Checkpoint:
    if len(data) < 10 or data[:4] != CKPT_MAGIC:
        raise FormatError("not a checkpoint file (bad magic)")
    version, hlen = struct.unpack_from("<HI", data, 4)
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    try:
        header = json.loads(data[10:10 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"corrupt checkpoint header: {exc}") from None
    base = 10 + hlen
    groups: dict[str, dict[str, np.ndarray]] = {"params": {}, "teacher": {}}
    try:
        for entry in header["arrays"]:
            start = base + entry["offset"]
            if start + entry["nbytes"] > len(data):
                raise FormatError(f"truncated array {entry['name']}")
            arr = np.frombuffer(data, dtype="<f8", count=entry["nbytes"] // 8, offset=start)
            groups[entry["group"]][entry["name"]] = arr.reshape(entry["shape"]).astype(np.float64)
        expected = base + sum(e["nbytes"] for e in header["arrays"])
        fields_ = header["config"], header["history"], header["seed"]
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, FormatError):
            raise
        raise FormatError(f"corrupt checkpoint array table: {exc!r}") from None
    if expected != len(data):
        raise FormatError("checkpoint size does not match its array table")
    return Checkpoint(groups["params"], *fields_, groups["teacher"], version)


def write_checkpoint(path, ckpt: Checkpoint) -> None:
    _write_atomic(path, encode_checkpoint(ckpt))


def read_checkpoint(path) -> Checkpoint:
    return decode_checkpoint(Path(path).read_bytes())


# -- datasets -----------------------------------------------------------------

def encode_dataset(ds: Dataset, config: dict | None = None) -> str:
    lines = [canonical_json({"format": DATASET_FORMAT, "version": DATASET_VERSION,
                             "data": ds.config.as_dict(), "config": config or {},
                             "counts": {"train": len(ds.train), "gallery": len(ds.gallery),
                                        "triplets": len(ds.triplets)}})]
    for split, images in (("train", ds.train), ("gallery", ds.gallery)):
        for img in images:
            lines.append(canonical_json({"split": split, "id": img.id, "grid": img.grid.tolist()}))
    for tr in ds.triplets:
        lines.append(canonical_json({"split": "triplet", "reference": tr.reference_id,
                                     "modifier": list(tr.modifier), "targets": list(tr.target_ids)}))
    return "\n".join(lines) + "\n"


def decode_dataset(text: str) -> tuple[Dataset, dict]:
    try:
        rows = [json.loads(line) for line in text.splitlines() if line.strip()]
    except json.JSONDecodeError as exc:
        raise FormatError(f"corrupt dataset line: {exc}") from None
    if not rows or rows[0].get("format") != DATASET_FORMAT:
        raise FormatError("not a dataset file")
    head = rows[0]
    if head.get("version") != DATASET_VERSION:
        raise FormatError(f"unsupported dataset version {head.get('version')}")
    train, gallery, triplets = [], [], []
    for n, row in enumerate(rows[1:], start=2):
        split = row.get("split")
        try:
            if split in ("train", "gallery"):
                img = SyntheticImage(row["id"], np.array(row["grid"], dtype=np.int64))
                (train if split == "train" else gallery).append(img)
            elif split == "triplet":
                triplets.append(TripletRecord(row["reference"], tuple(row["modifier"]), tuple(row["targets"])))
            else:
                raise FormatError(f"unknown dataset row kind {split!r}")
        except (KeyError, TypeError) as exc:
            raise FormatError(f"dataset line {n}: missing or malformed field {exc}") from None
    counts = head.get("counts", {})
    if counts and (counts["train"], counts["gallery"], counts["triplets"]) != (len(train), len(gallery), len(triplets)):
        raise FormatError("dataset row counts do not match header")
    return Dataset(DataConfig(**head["data"]), train, gallery, triplets), head.get("config", {})


def write_dataset(path, ds: Dataset, config: dict | None = None) -> None:
    _write_atomic(path, encode_dataset(ds, config).encode("utf-8"))


def read_dataset(path) -> tuple[Dataset, dict]:
    return decode_dataset(Path(path).read_text())


# -- metrics and loss tables --------------------------------------------------

def format_number(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def encode_metrics(metrics: dict[str, object], config: dict[str, object]) -> str:
    """``name = value`` lines, metrics first, then the config echo."""
    lines = ["# metrics"]
    lines += [f"{k} = {format_number(v)}" for k, v in metrics.items()]
    lines.append("# config")
    lines += [f"config.{k} = {format_number(v) if v is not None else 'none'}" for k, v in config.items()]
    return "\n".join(lines) + "\n"


def decode_metrics(text: str) -> tuple[dict[str, float], dict[str, str]]:
    metrics, config = {}, {}
    for line in text.splitlines():
        if not line.strip() or line.startswith("#"):
            continue
        key, _, value = (s.strip() for s in line.partition("="))
        if key.startswith("config."):
            config[key[len("config."):]] = value
        else:
            metrics[key] = float(value)
    return metrics, config


def write_metrics(path, metrics: dict, config: dict) -> None:
    _write_atomic(path, encode_metrics(metrics, config).encode("utf-8"))


LOSS_COLUMNS = ("epoch", "gcd", "lar", "total", "lr")


def encode_loss_table(history: list[dict]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(LOSS_COLUMNS)
    for row in history:
        writer.writerow([format_number(row[c]) for c in LOSS_COLUMNS])
    return buf.getvalue()


def write_loss_table(path, history: list[dict]) -> None:
    _write_atomic(path, encode_loss_table(history).encode("utf-8"))


def encode_attention(rows: np.ndarray, image_id: str, grid: int) -> str:
    """One line per sentence token, H*W weights in row-major pixel order."""
    lines = [f"# image {image_id} tokens {rows.shape[0]} pixels {rows.shape[1]} grid {grid}x{grid}"]
    lines += [" ".join(f"{w:.8e}" for w in row) for row in rows]
    return "\n".join(lines) + "\n"
