#!/usr/bin/env python3
"""
Formatos em disco: features (TADF), anotações e detecções (JSON lines), lista de
classes, log de métricas e checkpoints (DSSD)

Toda escrita é atômica: arquivo temporário único no mesmo diretório + rename.
"""

import json
import logging
import os
import struct
import tempfile
from dataclasses import dataclass, field
from typing import Any, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from anchor_geometry import Segment
from errors import InvalidArgumentError, ParseError, VersionMismatchError
from tensor_autodiff import ParamStore

FEATURE_MAGIC = b'TADF'
FEATURE_VERSION = 1
CHECKPOINT_MAGIC = b'DSSD'
CHECKPOINT_VERSION = 1

_FEATURE_HEADER = struct.Struct('<4sIIII')
_U32 = struct.Struct('<I')
_U64 = struct.Struct('<Q')
_WINDOW_TIMES = struct.Struct('<dd')


@dataclass
class FeatureWindow:
    """Janela de features [D x T] com instante inicial e passo entre clips (segundos)"""

    video_id: str
    start: float
    stride: float
    features: np.ndarray

    @property
    def duration(self) -> float:
        return self.features.shape[1] * self.stride

    def to_seconds(self, normalized: float) -> float:
        return self.start + normalized * self.duration

    def to_normalized(self, seconds: float) -> float:
        return (seconds - self.start) / self.duration


@dataclass
class Annotation:
    video_id: str
    t_start: float
    t_end: float
    label: str


@dataclass
class Dataset:
    """Janelas + anotações + lista de classes (ids 1..C, 0 é fundo)"""

    windows: List[FeatureWindow]
    annotations: List[Annotation]
    class_names: List[str]
    _by_video: Dict[str, List[Annotation]] = field(default=None, init=False, repr=False)

    @property
    def class_ids(self) -> Dict[str, int]:
        return {name: i + 1 for i, name in enumerate(self.class_names)}

    def annotations_for(self, video_id: str) -> List[Annotation]:
        if self._by_video is None:
            self._by_video = {}
            for ann in self.annotations:
                self._by_video.setdefault(ann.video_id, []).append(ann)
        return self._by_video.get(video_id, [])

    def ground_truths(self, window: FeatureWindow) -> List[Tuple[Segment, int]]:
        """Anotações do vídeo recortadas para a janela, em coordenadas normalizadas"""
        ids = self.class_ids
        gts = []
        for ann in self.annotations_for(window.video_id):
            start = max(0.0, window.to_normalized(ann.t_start))
            end = min(1.0, window.to_normalized(ann.t_end))
            if end > start:
                gts.append((Segment.from_bounds(start, end), ids[ann.label]))
        return gts


# ------------------------------------------------------------------ escrita

def atomic_write(path: str, data) -> None:
    """Grava bytes ou texto em path via arquivo temporário + os.replace"""
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    payload = data.encode('utf-8') if isinstance(data, str) else bytes(data)
    fd, tmp = tempfile.mkstemp(prefix=f".{os.path.basename(path)}.", suffix='.tmp', dir=directory)
    try:
        with os.fdopen(fd, 'wb') as f:
            f.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.remove(tmp)
        raise


def _read_bytes(path: str) -> bytes:
    try:
        with open(path, 'rb') as f:
            return f.read()
    except OSError as e:
        raise ParseError(f"não foi possível ler: {e}", path)


def _read_lines(path: str) -> List[str]:
    try:
        return _read_bytes(path).decode('utf-8').splitlines()
    except UnicodeDecodeError as e:
        raise ParseError(f"arquivo não é UTF-8: {e}", path)


# ---------------------------------------------------------------- features

def encode_features(windows: Sequence[FeatureWindow], dim: Optional[int] = None,
                    length: Optional[int] = None) -> bytes:
    if windows:
        dim, length = windows[0].features.shape
    if dim is None or length is None:
        raise InvalidArgumentError("arquivo de features vazio precisa de D e T explícitos")
    chunks = [_FEATURE_HEADER.pack(FEATURE_MAGIC, FEATURE_VERSION, len(windows), dim, length)]
    for window in windows:
        if window.features.shape != (dim, length):
            raise InvalidArgumentError(
                f"janela {window.video_id} com forma {window.features.shape}, esperado {(dim, length)}")
        name = window.video_id.encode('utf-8')
        chunks.append(_U32.pack(len(name)))
        chunks.append(name)
        chunks.append(_WINDOW_TIMES.pack(window.start, window.stride))
        chunks.append(np.ascontiguousarray(window.features, dtype='<f4').tobytes())
    return b''.join(chunks)


def decode_features(payload: bytes, path: Optional[str] = None) -> Tuple[List[FeatureWindow], int, int]:
    """Returns: (janelas, D, T)"""
    if len(payload) < _FEATURE_HEADER.size:
        raise ParseError("cabeçalho truncado", path)
    magic, version, count, dim, length = _FEATURE_HEADER.unpack_from(payload, 0)
    if magic != FEATURE_MAGIC:
        raise ParseError(f"magic inválido: {magic!r}", path)
    if version != FEATURE_VERSION:
        raise ParseError(f"versão de features não suportada: {version}", path)
    offset = _FEATURE_HEADER.size
    block = dim * length * 4
    windows = []
    for index in range(count):
        try:
            (name_len,) = _U32.unpack_from(payload, offset)
            offset += _U32.size
            name = payload[offset:offset + name_len]
            if len(name) != name_len:
                raise struct.error("nome truncado")
            offset += name_len
            video_id = name.decode('utf-8')
            start, stride = _WINDOW_TIMES.unpack_from(payload, offset)
            offset += _WINDOW_TIMES.size
        except struct.error as e:
            raise ParseError(f"janela {index} truncada: {e}", path)
        except UnicodeDecodeError:
            raise ParseError(f"janela {index}: video_id não é UTF-8", path)
        if offset + block > len(payload):
            raise ParseError(f"janela {index}: payload truncado", path)
        values = np.frombuffer(payload, dtype='<f4', count=dim * length, offset=offset)
        offset += block
        windows.append(FeatureWindow(video_id, start, stride,
                                     values.reshape(dim, length).astype(np.float32)))
    if offset != len(payload):
        raise ParseError(f"{len(payload) - offset} bytes excedentes após {count} janelas", path)
    return windows, dim, length


def write_features(path: str, windows: Sequence[FeatureWindow], dim: Optional[int] = None,
                   length: Optional[int] = None) -> None:
    atomic_write(path, encode_features(windows, dim, length))
    logging.info(f"{len(windows)} janelas gravadas em {path}")


def read_features(path: str) -> Tuple[List[FeatureWindow], int, int]:
    return decode_features(_read_bytes(path), path)


# ----------------------------------------------------------------- classes

def write_classes(path: str, class_names: Sequence[str]) -> None:
    atomic_write(path, ''.join(f"{name}\n" for name in class_names))


def read_classes(path: str) -> List[str]:
    names = []
    for number, line in enumerate(_read_lines(path), start=1):
        name = line.strip()
        if not name:
            continue
        if name in names:
            raise ParseError(f"classe duplicada: {name}", path, number)
        names.append(name)
    if not names:
        raise ParseError("lista de classes vazia", path)
    return names


# -------------------------------------------------------------- JSON lines

def _json_records(path: str) -> Tuple[Optional[Dict], List[Tuple[int, Dict]]]:
    """Lê JSON lines; a primeira linha {"header": ...} é opcional"""
    header = None
    records = []
    for number, line in enumerate(_read_lines(path), start=1):
        if not line.strip():
            continue
        try:
            record = json.loads(line)
        except json.JSONDecodeError as e:
            raise ParseError(f"JSON inválido: {e.msg}", path, number)
        if not isinstance(record, dict):
            raise ParseError("cada linha deve ser um objeto JSON", path, number)
        if 'header' in record:
            if records or header is not None:
                raise ParseError("cabeçalho fora da primeira linha", path, number)
            header = record['header']
            continue
        records.append((number, record))
    return header, records


def _field(record: Dict, key: str, kind, path: str, number: int):
    if key not in record:
        raise ParseError(f"campo ausente: {key}", path, number)
    value = record[key]
    if kind is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)) or not np.isfinite(value):
            raise ParseError(f"campo {key} deve ser numérico finito", path, number)
        return float(value)
    if not isinstance(value, kind):
        raise ParseError(f"campo {key} com tipo inválido", path, number)
    return value


def header_line(header: Dict[str, Any]) -> str:
    return json.dumps({'header': header}, sort_keys=True) + '\n'


def write_annotations(path: str, annotations: Iterable[Annotation]) -> None:
    lines = []
    for ann in annotations:
        lines.append('{"video_id": %s, "t_start": %.6f, "t_end": %.6f, "class": %s}\n'
                     % (json.dumps(ann.video_id), ann.t_start, ann.t_end, json.dumps(ann.label)))
    atomic_write(path, ''.join(lines))


def read_annotations(path: str, class_names: Sequence[str]) -> List[Annotation]:
    known = set(class_names)
    _, records = _json_records(path)
    annotations = []
    for number, record in records:
        ann = Annotation(_field(record, 'video_id', str, path, number),
                         _field(record, 't_start', float, path, number),
                         _field(record, 't_end', float, path, number),
                         _field(record, 'class', str, path, number))
        if not ann.t_start < ann.t_end:
            raise ParseError(f"t_start >= t_end ({ann.t_start} >= {ann.t_end})", path, number)
        if ann.label not in known:
            raise ParseError(f"classe desconhecida: {ann.label}", path, number)
        annotations.append(ann)
    return annotations


def write_detections(path: str, detections: Iterable, header: Dict[str, Any]) -> None:
    """Detecções com atributos video_id, t_start, t_end, label e score"""
    lines = [header_line(header)]
    for det in detections:
        lines.append('{"video_id": %s, "t_start": %.6f, "t_end": %.6f, "class": %s, "score": %s}\n'
                     % (json.dumps(det.video_id), det.t_start, det.t_end, json.dumps(det.label),
                        json.dumps(float(det.score))))
    atomic_write(path, ''.join(lines))


def read_detections(path: str, class_names: Sequence[str]) -> Tuple[Optional[Dict], List[Dict]]:
    """Returns: (cabeçalho, registros validados {video_id, t_start, t_end, class, score})"""
    known = set(class_names)
    header, records = _json_records(path)
    rows = []
    for number, record in records:
        row = {
            'video_id': _field(record, 'video_id', str, path, number),
            't_start': _field(record, 't_start', float, path, number),
            't_end': _field(record, 't_end', float, path, number),
            'class': _field(record, 'class', str, path, number),
            'score': _field(record, 'score', float, path, number),
        }
        if row['class'] not in known:
            raise ParseError(f"classe desconhecida: {row['class']}", path, number)
        if not row['t_start'] < row['t_end']:
            raise ParseError("t_start >= t_end", path, number)
        if not 0.0 <= row['score'] <= 1.0:
            raise ParseError(f"score fora de [0,1]: {row['score']}", path, number)
        rows.append(row)
    return header, rows


def write_metrics(path: str, header: Dict[str, Any], records: Iterable[Dict[str, Any]]) -> None:
    lines = [header_line(header)]
    lines.extend(json.dumps(record, sort_keys=True) + '\n' for record in records)
    atomic_write(path, ''.join(lines))


def read_metrics(path: str) -> Tuple[Optional[Dict], List[Dict]]:
    header, records = _json_records(path)
    return header, [record for _, record in records]


# -------------------------------------------------------------- datasets

def write_dataset(out_dir: str, dataset: Dataset, manifest: Dict[str, Any], prefix: str = '') -> Dict[str, str]:
    """Grava features, anotações, classes e manifest.json; devolve os caminhos"""
    paths = {
        'features': os.path.join(out_dir, f"{prefix}features.tadf"),
        'annotations': os.path.join(out_dir, f"{prefix}annotations.jsonl"),
        'classes': os.path.join(out_dir, 'classes.txt'),
        'manifest': os.path.join(out_dir, f"{prefix}manifest.json"),
    }
    dim = length = None
    if not dataset.windows and 'feature_dim' in manifest:
        dim, length = manifest['feature_dim'], manifest['window_length']
    write_features(paths['features'], dataset.windows, dim, length)
    write_annotations(paths['annotations'], dataset.annotations)
    write_classes(paths['classes'], dataset.class_names)
    atomic_write(paths['manifest'], json.dumps(manifest, sort_keys=True, indent=2) + '\n')
    return paths


def read_dataset(features_path: str, annotations_path: str, classes_path: str) -> Dataset:
    class_names = read_classes(classes_path)
    windows, _, _ = read_features(features_path)
    annotations = read_annotations(annotations_path, class_names)
    return Dataset(windows, annotations, class_names)


# -------------------------------------------------------------- checkpoint

def encode_checkpoint(params: ParamStore, meta: Dict[str, Any]) -> bytes:
    blob = json.dumps(meta, sort_keys=True).encode('utf-8')
    chunks = [CHECKPOINT_MAGIC, _U32.pack(CHECKPOINT_VERSION), _U32.pack(len(blob)), blob,
              _U32.pack(len(params))]
    for name, tensor in params.items():
        encoded = name.encode('utf-8')
        chunks.append(_U32.pack(len(encoded)))
        chunks.append(encoded)
        chunks.append(_U32.pack(tensor.data.ndim))
        chunks.extend(_U32.pack(d) for d in tensor.data.shape)
        for array in (tensor.data, params.m[name], params.v[name]):
            chunks.append(np.ascontiguousarray(array, dtype='<f8').tobytes())
        chunks.append(_U64.pack(params.steps[name]))
    return b''.join(chunks)


def decode_checkpoint(payload: bytes, path: Optional[str] = None) -> Tuple[Dict[str, Any], ParamStore]:
    """Returns: (metadados com a configuração resolvida, ParamStore com momentos do Adam)"""
    if payload[:4] != CHECKPOINT_MAGIC:
        raise ParseError(f"magic de checkpoint inválido: {payload[:4]!r}", path)
    try:
        (version,) = _U32.unpack_from(payload, 4)
        if version != CHECKPOINT_VERSION:
            raise VersionMismatchError(version, CHECKPOINT_VERSION)
        (blob_len,) = _U32.unpack_from(payload, 8)
        offset = 12
        meta = json.loads(payload[offset:offset + blob_len].decode('utf-8'))
        offset += blob_len
        (count,) = _U32.unpack_from(payload, offset)
        offset += 4
        params = ParamStore()
        for _ in range(count):
            (name_len,) = _U32.unpack_from(payload, offset)
            offset += 4
            name = payload[offset:offset + name_len].decode('utf-8')
            offset += name_len
            (ndim,) = _U32.unpack_from(payload, offset)
            offset += 4
            shape = struct.unpack_from(f"<{ndim}I", payload, offset)
            offset += 4 * ndim
            size = int(np.prod(shape)) if ndim else 1
            arrays = []
            for _ in range(3):
                if offset + 8 * size > len(payload):
                    raise ParseError(f"parâmetro {name} truncado", path)
                arrays.append(np.frombuffer(payload, dtype='<f8', count=size, offset=offset)
                              .reshape(shape).astype(np.float64))
                offset += 8 * size
            (step,) = _U64.unpack_from(payload, offset)
            offset += 8
            params.add(name, arrays[0])
            params.m[name] = arrays[1]
            params.v[name] = arrays[2]
            params.steps[name] = int(step)
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError) as e:
        raise ParseError(f"checkpoint corrompido: {e}", path)
    if offset != len(payload):
        raise ParseError(f"{len(payload) - offset} bytes excedentes no checkpoint", path)
    return meta, params


def save_checkpoint(path: str, params: ParamStore, meta: Dict[str, Any]) -> None:
    atomic_write(path, encode_checkpoint(params, meta))
    logging.info(f"Checkpoint gravado: {path} ({params.count()} parâmetros)")


def load_checkpoint(path: str) -> Tuple[Dict[str, Any], ParamStore]:
    return decode_checkpoint(_read_bytes(path), path)
