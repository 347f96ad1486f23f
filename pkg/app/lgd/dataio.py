"""
    文件格式：嵌入矩阵二进制文件、类别名清单、语义库与检查点、指标输出

    嵌入文件（全部小端、无填充）:
        magic "LGDE" | version u16 | rows u32 | cols u32 | dtype u8 (0=f32) | payload | crc32(payload) u32
"""
import json
import logging
import os
import struct
import tempfile
import zlib
from pathlib import Path
from dataclasses import dataclass
from typing import Optional

import numpy as np
import pandas as pd

from app.core.exceptions import (BadMagicError, ChecksumError, InputError, TruncatedFileError,
                                 UnsupportedDtypeError, UnsupportedVersionError)
from app.lgd.banks import InstanceQueue, TextualSemanticsBank, VisualSemanticsBank
from app.lgd.numerics import EmbeddingMatrix, as_matrix, l2_normalize_rows
from app.lgd.student import OptimizerState, ProjectionHead, StudentNet

logger = logging.getLogger(__name__)

MAGIC = b"LGDE"
VERSION = 1
DTYPE_F32 = 0
_HEADER = struct.Struct("<4sHIIB")
_CRC = struct.Struct("<I")
SIDECAR_VERSION = 1
NORM_WARN_TOL = 1e-3

METRIC_COLUMNS = ["step", "epoch", "lr", "loss_total", "loss_visual", "loss_textual",
                  "vsb_initialized_count", "zeroshot_acc"]


def atomic_write_bytes(path, data: bytes):
    """
    先写同目录下的临时文件再原子替换，读者不会看到写了一半的文件
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text: str):
    atomic_write_bytes(path, text.encode("utf-8"))


def encode_embeddings(matrix: EmbeddingMatrix) -> bytes:
    m = as_matrix(matrix, "embeddings")
    if not np.all(np.isfinite(m)):
        raise InputError("嵌入矩阵含非有限值，无法写入")
    payload = np.ascontiguousarray(m, dtype="<f4").tobytes()  # float64 → float32
    return _HEADER.pack(MAGIC, VERSION, m.shape[0], m.shape[1], DTYPE_F32) + payload + _CRC.pack(zlib.crc32(payload))


def write_embeddings(path, matrix: EmbeddingMatrix):
    """
    写入嵌入文件

    Args:
        path: 文件路径
        matrix: rows×cols 的有限值矩阵，写入时收窄为float32
    """
    data = encode_embeddings(matrix)
    try:
        atomic_write_bytes(path, data)
    except OSError as e:
        raise OSError(f"写入嵌入文件失败 {path}: {e}") from e


def decode_embeddings(data: bytes, source: str = "<bytes>") -> EmbeddingMatrix:
    if len(data) < _HEADER.size:
        raise TruncatedFileError(f"{source}: 文件长度 {len(data)} 小于文件头 {_HEADER.size}")
    magic, version, rows, cols, dtype = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise BadMagicError(f"{source}: magic {magic!r} != {MAGIC!r}")
    if version != VERSION:
        raise UnsupportedVersionError(f"{source}: 不支持的版本 {version}")
    if dtype != DTYPE_F32:
        raise UnsupportedDtypeError(f"{source}: 不支持的dtype代码 {dtype}")
    size = rows * cols * 4
    expected = _HEADER.size + size + _CRC.size
    if len(data) < expected:
        raise TruncatedFileError(f"{source}: 文件长度 {len(data)} 小于预期 {expected}")
    payload = data[_HEADER.size:_HEADER.size + size]
    (crc,) = _CRC.unpack_from(data, _HEADER.size + size)
    if zlib.crc32(payload) != crc:
        raise ChecksumError(f"{source}: CRC校验失败")
    return np.frombuffer(payload, dtype="<f4").astype(np.float64).reshape(rows, cols)


def read_embeddings(path) -> EmbeddingMatrix:
    """
    读取嵌入文件，数值扩展为float64

    Raises:
        TruncatedFileError / BadMagicError / UnsupportedVersionError / UnsupportedDtypeError / ChecksumError
    """
    return decode_embeddings(Path(path).read_bytes(), source=str(path))


def write_names(path, names):
    atomic_write_text(path, "".join(f"{n}\n" for n in names))


def read_names(path) -> list[str]:
    """类别名清单：UTF-8，每行一个，顺序有意义"""
    return [line.strip() for line in Path(path).read_text(encoding="utf-8").splitlines() if line.strip()]


def load_tsb(embeddings_path, names_path) -> TextualSemanticsBank:
    """
    从预计算的文本嵌入（C×D_text，每行一个类别）与类别名清单构造TSB

    行范数偏离1超过1e-3时给出警告，然后统一归一化。
    """
    rows = read_embeddings(embeddings_path)
    names = read_names(names_path)
    if len(names) != rows.shape[0]:
        raise InputError(f"类别名数量 {len(names)} 与嵌入行数 {rows.shape[0]} 不一致")
    norms = np.linalg.norm(rows, axis=1)
    if np.any(np.abs(norms - 1.0) > NORM_WARN_TOL):
        logger.warning(f"{embeddings_path}: 文本嵌入未归一化 (范数范围 {norms.min():.4f}–{norms.max():.4f})，已重新归一化")
    rows, zero = l2_normalize_rows(rows)
    if zero.any():
        raise InputError(f"{embeddings_path}: 第 {int(np.flatnonzero(zero)[0])} 行嵌入范数为零")
    return TextualSemanticsBank.from_rows(rows, names, source_tag=str(embeddings_path))


def save_tsb(embeddings_path, names_path, tsb: TextualSemanticsBank):
    write_embeddings(embeddings_path, tsb.anchors.T)
    write_names(names_path, tsb.category_names)


def _sidecar(path) -> Path:
    return Path(f"{path}.json")


def save_vsb(path, vsb: VisualSemanticsBank, category_names):
    """
    VSB检查点：嵌入文件（每行一个锚点）+ JSON附加信息
    """
    snap = vsb.snapshot()
    write_embeddings(path, snap.anchors.T)
    meta = {"format_version": SIDECAR_VERSION, "category_names": list(category_names),
            "initialized": [bool(x) for x in snap.initialized], "momentum": snap.momentum}
    atomic_write_text(_sidecar(path), json.dumps(meta, ensure_ascii=False, indent=2))


def load_vsb(path):
    """
    Returns:
        (VisualSemanticsBank, category_names)
    """
    meta = json.loads(_sidecar(path).read_text(encoding="utf-8"))
    if meta.get("format_version") != SIDECAR_VERSION:
        raise UnsupportedVersionError(f"{path}: 不支持的附加信息版本 {meta.get('format_version')}")
    anchors = read_embeddings(path).T
    initialized = np.array(meta["initialized"], dtype=bool)
    anchors[:, ~initialized] = 0.0
    if initialized.any():
        # float32往返后重新归一化，保持单位长度不变量
        cols, _ = l2_normalize_rows(anchors[:, initialized].T)
        anchors[:, initialized] = cols.T
    return VisualSemanticsBank(anchors, initialized, meta["momentum"]), meta["category_names"]


def _write_params(directory: Path, prefix: str, params: dict) -> dict:
    shapes = {}
    for name, value in params.items():
        matrix = value if value.ndim == 2 else value.reshape(1, -1)
        write_embeddings(directory / f"{prefix}.{name}.lgde", matrix)
        shapes[name] = list(value.shape)
    return shapes


def _read_params(directory: Path, prefix: str, shapes: dict) -> dict:
    return {name: read_embeddings(directory / f"{prefix}.{name}.lgde").reshape(shape)
            for name, shape in shapes.items()}


def save_checkpoint(directory, artifacts) -> Path:
    """
    检查点：参数、动量缓冲、VSB、实例队列各自存为嵌入文件，manifest.json 记录形状与进度

    Args:
        directory: 检查点目录
        artifacts: trainer.TrainedArtifacts

    Returns:
        manifest路径
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    manifest = {
        "format_version": SIDECAR_VERSION,
        "step": artifacts.step,
        "schedule_position": artifacts.schedule_position,
        "rng": {"seed": artifacts.seed, "counter": artifacts.step, "algorithm": artifacts.rng_algorithm},
        "student": _write_params(directory, "student", artifacts.student.parameters()),
        "student_hidden_dims": [artifacts.student.parameters()[f"layers.{i}.weight"].shape[1]
                                for i in range(artifacts.student.num_layers - 1)],
        "projection": None,
        "optimizer": {"momentum": artifacts.optimizer.momentum, "weight_decay": artifacts.optimizer.weight_decay,
                      "step": artifacts.optimizer.step,
                      "buffers": _write_params(directory, "momentum", artifacts.optimizer.buffers)},
        "category_names": list(artifacts.tsb.category_names),
        "queue": None,
    }
    if artifacts.projection is not None:
        manifest["projection"] = _write_params(directory, "projection", artifacts.projection.parameters())
    save_vsb(directory / "vsb.lgde", artifacts.vsb, artifacts.tsb.category_names)
    if artifacts.queue is not None:
        manifest["queue"] = {"capacity": artifacts.queue.capacity, "size": len(artifacts.queue)}
        if len(artifacts.queue):
            write_embeddings(directory / "queue.lgde", artifacts.queue.entries())
    path = directory / "manifest.json"
    atomic_write_text(path, json.dumps(manifest, ensure_ascii=False, indent=2))
    return path


@dataclass
class Checkpoint:
    student: StudentNet
    projection: Optional[ProjectionHead]
    vsb: VisualSemanticsBank
    category_names: list
    optimizer: OptimizerState
    queue: Optional[InstanceQueue]
    manifest: dict

    @property
    def step(self) -> int:
        return self.manifest["step"]


def load_checkpoint(directory) -> Checkpoint:
    """
    读取 save_checkpoint 写出的目录（参数经过float32往返）
    """
    directory = Path(directory)
    manifest_path = directory / "manifest.json"
    if not manifest_path.exists():
        raise FileNotFoundError(f"检查点不存在: {manifest_path}")
    manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    if manifest.get("format_version") != SIDECAR_VERSION:
        raise UnsupportedVersionError(f"{manifest_path}: 不支持的版本 {manifest.get('format_version')}")
    student = StudentNet(_read_params(directory, "student", manifest["student"]))
    projection = None
    if manifest["projection"] is not None:
        projection = ProjectionHead(_read_params(directory, "projection", manifest["projection"]))
    opt = manifest["optimizer"]
    optimizer = OptimizerState(momentum=opt["momentum"], weight_decay=opt["weight_decay"], step=opt["step"],
                               buffers=_read_params(directory, "momentum", opt["buffers"]))
    vsb, names = load_vsb(directory / "vsb.lgde")
    queue = None
    if manifest["queue"] is not None:
        queue = InstanceQueue(manifest["queue"]["capacity"], vsb.dim)
        if manifest["queue"]["size"]:
            queue.enqueue(read_embeddings(directory / "queue.lgde"))
    return Checkpoint(student=student, projection=projection, vsb=vsb, category_names=names,
                      optimizer=optimizer, queue=queue, manifest=manifest)


class MetricsSink:
    """
        指标输出：每步写一行JSON-lines，每个epoch把该epoch的行追加到CSV

        append=True（从检查点继续）时保留已有文件，只在其后追加。
    """

    def __init__(self, directory, append: bool = False):
        self.directory = Path(directory)
        self.directory.mkdir(parents=True, exist_ok=True)
        self.jsonl_path = self.directory / "metrics.jsonl"
        self.csv_path = self.directory / "metrics.csv"
        self._pending = []
        self._csv_started = append and self.csv_path.exists()
        if not append:
            self.jsonl_path.write_text("", encoding="utf-8")

    def write_step(self, row: dict):
        with self.jsonl_path.open("a", encoding="utf-8") as f:
            f.write(json.dumps(row, ensure_ascii=False, sort_keys=True) + "\n")
        self._pending.append(row)

    def flush_epoch(self):
        if not self._pending:
            return
        frame = pd.DataFrame(self._pending).reindex(columns=METRIC_COLUMNS)
        frame.to_csv(self.csv_path, mode="a" if self._csv_started else "w", header=not self._csv_started,
                     index=False, float_format="%.10g")
        self._csv_started = True
        self._pending = []

    def __call__(self, row: dict, end_of_epoch: bool):
        self.write_step(row)
        if end_of_epoch:
            self.flush_epoch()
