#!/usr/bin/env python3
"""
Inferência (decode, fusão, score, NMS) e avaliação por mAP@IoU
"""

import logging
from dataclasses import dataclass
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from anchor_geometry import BACKGROUND, AnchorSpec, Segment, anchor_arrays, decode_arrays
from errors import InvalidArgumentError, StateError
from file_formats import Annotation, FeatureWindow, read_annotations, read_classes, read_detections
from run_config import InferenceConfig, RunConfig
from worker_pool import WindowWorkerPool

INTERPOLATION = 'all-point precision envelope'


@dataclass(frozen=True)
class Detection:
    """Detecção final em segundos; class_id >= 1 (nunca fundo)"""

    video_id: str
    t_start: float
    t_end: float
    class_id: int
    score: float
    label: str = ''

    def __post_init__(self):
        if self.class_id == BACKGROUND:
            raise InvalidArgumentError("detecção não pode ser da classe de fundo")
        if not 0.0 <= self.score <= 1.0:
            raise InvalidArgumentError(f"score fora de [0,1]: {self.score}")
        if not self.t_end > self.t_start:
            raise InvalidArgumentError(f"segmento degenerado: [{self.t_start}, {self.t_end}]")

    @property
    def segment(self) -> Segment:
        return Segment.from_bounds(self.t_start, self.t_end)


@dataclass
class EvalResult:
    """AP por classe (linhas) e limiar (colunas) + mAP por limiar"""

    thresholds: Tuple[float, ...]
    ap: pd.DataFrame
    mean_ap: pd.Series
    detections_header: Optional[Dict] = None

    def table(self) -> pd.DataFrame:
        """Uma linha 'mAP' com colunas 0.3 ... 0.7"""
        row = pd.DataFrame([self.mean_ap.values], columns=[f"{t:.1f}" for t in self.thresholds])
        row.index = ['mAP']
        return row

    def map_at(self, threshold: float) -> float:
        return float(self.mean_ap[float(threshold)])

    def to_dict(self) -> Dict:
        return {
            'interpolation': INTERPOLATION,
            'thresholds': list(self.thresholds),
            'mAP': {f"{t:.1f}": float(v) for t, v in self.mean_ap.items()},
            'ap': {name: {f"{t:.1f}": float(v) for t, v in row.items()} for name, row in self.ap.iterrows()},
        }

    def format_table(self) -> str:
        return self.table().to_string(float_format=lambda v: f"{v:.4f}")

    def header(self, **extra) -> Dict:
        """Cabeçalho do relatório: configuração e semente herdadas do arquivo de detecções"""
        source = self.detections_header or {}
        header = {'kind': 'evaluation', 'interpolation': INTERPOLATION,
                  'config': source.get('config'), 'seed': source.get('seed')}
        if 'mode' in source:
            header['mode'] = source['mode']
        header.update(extra)
        return header


# ---------------------------------------------------------------- inferência

def detections_from_outputs(window: FeatureWindow, probs: np.ndarray, overlap: np.ndarray,
                            delta_c: np.ndarray, delta_w: np.ndarray, anchors, spec: AnchorSpec,
                            inference: InferenceConfig, class_names: Sequence[str]) -> List[Detection]:
    """
    Converte as saídas fundidas de uma janela em detecções (antes do NMS)

    Âncoras cujo argmax sobre todas as classes é o fundo são descartadas.
    """
    probs = np.asarray(probs, dtype=np.float64)
    overlap = np.asarray(overlap, dtype=np.float64).reshape(-1)
    centers, widths = anchor_arrays(anchors)
    phi_c, phi_w = decode_arrays(centers, widths, np.asarray(delta_c).reshape(-1),
                                 np.asarray(delta_w).reshape(-1), spec)
    starts = np.clip(phi_c - phi_w / 2.0, 0.0, 1.0)
    ends = np.clip(phi_c + phi_w / 2.0, 0.0, 1.0)
    best = np.argmax(probs, axis=1)

    detections = []
    for a in np.flatnonzero(best != BACKGROUND):
        class_id = int(best[a])
        score = float(probs[a, class_id])
        if inference.score_with_overlap:
            score *= float(overlap[a])
        score = min(max(score, 0.0), 1.0)
        if score < inference.min_score or not ends[a] > starts[a]:
            continue
        t_start, t_end = window.to_seconds(starts[a]), window.to_seconds(ends[a])
        if not t_end > t_start:
            continue
        detections.append(Detection(window.video_id, t_start, t_end, class_id, score,
                                    class_names[class_id - 1]))
    return detections


def infer(window: FeatureWindow, detector, config: RunConfig, class_names: Sequence[str]) -> List[Detection]:
    """Forward de uma janela + decode; requer parâmetros treinados carregados"""
    if detector is None or len(detector.params) == 0:
        raise StateError("inferência sem parâmetros carregados")
    outputs = detector.predict(window.features.astype(np.float64))
    fused = outputs.fused
    detections = detections_from_outputs(window, fused.probs.data, fused.overlap.data, fused.delta_c.data,
                                         fused.delta_w.data, detector.anchors, config.anchor_spec,
                                         config.inference, class_names)
    logging.debug(f"{window.video_id}: {len(detections)} detecções antes do NMS")
    return detections


def _ranking(det: Detection):
    return -det.score, det.t_start, det.class_id


def _interval_iou(a_start: float, a_end: float, b_start: float, b_end: float) -> float:
    inter = min(a_end, b_end) - max(a_start, b_start)
    if inter <= 0:
        return 0.0
    return inter / (max(a_end, b_end) - min(a_start, b_start))


def nms(detections: Iterable[Detection], overlap_threshold: float) -> List[Detection]:
    """
    NMS guloso por (vídeo, classe)

    Ordem de saída: score decrescente, empate pelo início mais cedo e depois pela menor classe.
    """
    if not 0.0 < overlap_threshold < 1.0:
        raise InvalidArgumentError(f"limiar de NMS fora de (0,1): {overlap_threshold}")
    kept: List[Detection] = []
    groups: Dict[Tuple[str, int], List[Detection]] = {}
    for det in sorted(detections, key=_ranking):
        group = groups.setdefault((det.video_id, det.class_id), [])
        if any(_interval_iou(det.t_start, det.t_end, k.t_start, k.t_end) > overlap_threshold for k in group):
            continue
        group.append(det)
        kept.append(det)
    return kept


def postprocess(detections: Iterable[Detection], inference: InferenceConfig) -> List[Detection]:
    """NMS por vídeo, corte em max_detections_per_video e ordenação (vídeo, score)"""
    by_video: Dict[str, List[Detection]] = {}
    for det in detections:
        by_video.setdefault(det.video_id, []).append(det)
    result = []
    for video_id in sorted(by_video):
        kept = nms(by_video[video_id], inference.nms_threshold)
        result.extend(kept[:inference.max_detections_per_video])
    return result


def infer_dataset(windows: Sequence[FeatureWindow], detector, config: RunConfig,
                  class_names: Sequence[str], threads: int = 1) -> List[Detection]:
    pool = WindowWorkerPool(threads)
    per_window = pool.map(lambda w: infer(w, detector, config, class_names), windows)
    raw = [det for dets in per_window for det in dets]
    final = postprocess(raw, config.inference)
    logging.info(f"Inferência: {len(windows)} janelas, {len(raw)} candidatos, {len(final)} após NMS")
    return final


# ---------------------------------------------------------------- avaliação

def precision_envelope_area(recall: np.ndarray, precision: np.ndarray) -> float:
    """Área sob a curva PR com precisão interpolada pelo envelope (todos os pontos)"""
    mrec = np.concatenate(([0.0], recall, [1.0]))
    mpre = np.concatenate(([0.0], precision, [0.0]))
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    changed = np.flatnonzero(mrec[1:] != mrec[:-1])
    return float(np.sum((mrec[changed + 1] - mrec[changed]) * mpre[changed + 1]))


def average_precision(detections: Sequence, ground_truths: Sequence, iou_threshold: float) -> float:
    """
    AP de uma classe

    Args:
        detections: objetos com video_id, t_start, t_end e score
        ground_truths: objetos com video_id, t_start e t_end
        iou_threshold: IoU mínimo para verdadeiro positivo

    Returns:
        AP em [0,1]; 0 quando não há ground truth
    """
    if not ground_truths:
        return 0.0
    gts_by_video: Dict[str, np.ndarray] = {}
    for gt in ground_truths:
        gts_by_video.setdefault(gt.video_id, []).append((gt.t_start, gt.t_end))
    gts_by_video = {k: np.array(v, dtype=np.float64) for k, v in gts_by_video.items()}
    used = {k: np.zeros(len(v), dtype=bool) for k, v in gts_by_video.items()}

    ordered = sorted(detections, key=lambda d: (-d.score, d.video_id, d.t_start, d.t_end))
    tp = np.zeros(len(ordered))
    for i, det in enumerate(ordered):
        gts = gts_by_video.get(det.video_id)
        if gts is None:
            continue
        inter = np.minimum(gts[:, 1], det.t_end) - np.maximum(gts[:, 0], det.t_start)
        union = np.maximum(gts[:, 1], det.t_end) - np.minimum(gts[:, 0], det.t_start)
        ious = np.where(inter > 0, inter / union, 0.0)
        ious[used[det.video_id]] = -1.0
        best = int(np.argmax(ious))
        if ious[best] >= iou_threshold:
            used[det.video_id][best] = True
            tp[i] = 1.0

    if not ordered:
        return 0.0
    tp_cum = np.cumsum(tp)
    fp_cum = np.cumsum(1.0 - tp)
    recall = tp_cum / len(ground_truths)
    precision = tp_cum / (tp_cum + fp_cum)
    return precision_envelope_area(recall, precision)


def evaluate(detections: Sequence[Detection], annotations: Sequence[Annotation], class_names: Sequence[str],
             thresholds: Sequence[float] = (0.3, 0.4, 0.5, 0.6, 0.7), threads: int = 1) -> EvalResult:
    """mAP por limiar; a média considera apenas classes com ground truth"""
    thresholds = tuple(float(t) for t in thresholds)
    ids = {name: i + 1 for i, name in enumerate(class_names)}
    dets_by_class: Dict[int, List[Detection]] = {}
    for det in detections:
        dets_by_class.setdefault(det.class_id, []).append(det)
    gts_by_class: Dict[int, List[Annotation]] = {}
    for ann in annotations:
        if ann.label not in ids:
            raise InvalidArgumentError(f"classe desconhecida na anotação: {ann.label}")
        gts_by_class.setdefault(ids[ann.label], []).append(ann)

    present = sorted(gts_by_class)
    tasks = [(c, t) for c in present for t in thresholds]
    pool = WindowWorkerPool(threads)
    values = pool.map(lambda task: average_precision(dets_by_class.get(task[0], []),
                                                     gts_by_class[task[0]], task[1]), tasks)

    ap = pd.DataFrame(np.array(values, dtype=np.float64).reshape(len(present), len(thresholds)),
                      index=[class_names[c - 1] for c in present], columns=list(thresholds))
    if present:
        mean_ap = ap.mean(axis=0)
    else:
        logging.warning("Nenhuma classe com ground truth: mAP definido como 0")
        mean_ap = pd.Series(0.0, index=list(thresholds))
    result = EvalResult(thresholds, ap, mean_ap)
    logging.info(f"Avaliação ({INTERPOLATION}):\n{result.format_table()}")
    return result


def rows_to_detections(rows: Sequence[Dict], class_names: Sequence[str]) -> List[Detection]:
    ids = {name: i + 1 for i, name in enumerate(class_names)}
    return [Detection(r['video_id'], r['t_start'], r['t_end'], ids[r['class']], r['score'], r['class'])
            for r in rows]


def evaluate_files(detections_path: str, annotations_path: str, classes_path: str,
                   thresholds: Sequence[float], threads: int = 1) -> EvalResult:
    class_names = read_classes(classes_path)
    header, rows = read_detections(detections_path, class_names)
    annotations = read_annotations(annotations_path, class_names)
    result = evaluate(rows_to_detections(rows, class_names), annotations, class_names, thresholds, threads)
    result.detections_header = header
    return result
