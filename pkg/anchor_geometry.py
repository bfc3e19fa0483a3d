#!/usr/bin/env python3
"""
Geometria de âncoras temporais 1d

Coordenadas normalizadas em [0, 1] sobre a janela processada. A conversão para
segundos acontece apenas na fronteira de I/O.
"""

import math
from dataclasses import dataclass
from typing import List, Sequence, Tuple

import numpy as np

from errors import InvalidArgumentError

BACKGROUND = 0


@dataclass(frozen=True)
class AnchorSpec:
    """Layout das camadas de âncoras e coeficientes do decode"""

    layer_lengths: Tuple[int, ...] = (8, 4, 2)
    ratios: Tuple[float, ...] = (0.5, 0.75, 1.0, 1.5, 2.0)
    alpha1: float = 0.1
    alpha2: float = 0.1
    match_threshold: float = 0.5

    def __post_init__(self):
        object.__setattr__(self, 'layer_lengths', tuple(int(n) for n in self.layer_lengths))
        object.__setattr__(self, 'ratios', tuple(float(r) for r in self.ratios))
        if not self.layer_lengths:
            raise InvalidArgumentError("layer_lengths precisa de ao menos uma camada")
        if any(n < 1 for n in self.layer_lengths):
            raise InvalidArgumentError(f"layer_lengths inválido: {self.layer_lengths}")
        if not self.ratios or any(r <= 0 for r in self.ratios):
            raise InvalidArgumentError(f"ratios inválido: {self.ratios}")
        if self.alpha1 <= 0 or self.alpha2 <= 0:
            raise InvalidArgumentError("alpha1 e alpha2 devem ser positivos")
        if not 0.0 < self.match_threshold < 1.0:
            raise InvalidArgumentError(f"match_threshold fora de (0,1): {self.match_threshold}")

    @property
    def num_layers(self) -> int:
        return len(self.layer_lengths)

    @property
    def num_anchors(self) -> int:
        return sum(self.layer_lengths) * len(self.ratios)


@dataclass(frozen=True)
class Anchor:
    layer: int
    cell: int
    ratio: float
    a_c: float
    a_w: float

    @property
    def segment(self) -> 'Segment':
        return Segment(self.a_c, self.a_w)


@dataclass(frozen=True)
class Segment:
    """Intervalo temporal guardado como (centro, largura)"""

    center: float
    width: float

    def __post_init__(self):
        if not self.width > 0:
            raise InvalidArgumentError(f"largura de segmento deve ser positiva: {self.width}")

    @classmethod
    def from_bounds(cls, start: float, end: float) -> 'Segment':
        return cls((start + end) / 2.0, end - start)

    @property
    def start(self) -> float:
        return self.center - self.width / 2.0

    @property
    def end(self) -> float:
        return self.center + self.width / 2.0


@dataclass
class MatchResult:
    """Rótulos por âncora: classe (0 = fundo), índice do ground truth e IoU máximo"""

    labels: np.ndarray
    matched: np.ndarray
    g_iou: np.ndarray

    @property
    def positive(self) -> np.ndarray:
        return self.labels > BACKGROUND

    @property
    def num_positives(self) -> int:
        return int(self.positive.sum())


def generate_anchors(spec: AnchorSpec) -> List[Anchor]:
    """Âncoras em ordem camada -> célula -> razão"""
    anchors = []
    for layer, length in enumerate(spec.layer_lengths):
        for cell in range(length):
            for ratio in spec.ratios:
                anchors.append(Anchor(layer, cell, ratio, (cell + 0.5) / length, ratio / length))
    return anchors


def anchor_arrays(anchors: Sequence[Anchor]) -> Tuple[np.ndarray, np.ndarray]:
    """Centros e larguras padrão como vetores"""
    centers = np.array([a.a_c for a in anchors], dtype=np.float64)
    widths = np.array([a.a_w for a in anchors], dtype=np.float64)
    return centers, widths


def iou_1d(s1: Segment, s2: Segment) -> float:
    """Interseção sobre união de dois intervalos"""
    inter = min(s1.end, s2.end) - max(s1.start, s2.start)
    if inter <= 0:
        return 0.0
    union = max(s1.end, s2.end) - min(s1.start, s2.start)
    return inter / union


def iou_matrix(starts_a: np.ndarray, ends_a: np.ndarray,
               starts_b: np.ndarray, ends_b: np.ndarray) -> np.ndarray:
    """IoU de todos os pares (a, b), forma [len(a), len(b)]"""
    inter = np.minimum(ends_a[:, None], ends_b[None, :]) - np.maximum(starts_a[:, None], starts_b[None, :])
    inter = np.maximum(inter, 0.0)
    union = np.maximum(ends_a[:, None], ends_b[None, :]) - np.minimum(starts_a[:, None], starts_b[None, :])
    return np.where(inter > 0, inter / np.where(union > 0, union, 1.0), 0.0)


def decode(anchor: Anchor, delta_c: float, delta_w: float, spec: AnchorSpec) -> Segment:
    """phi_c = a_c + alpha1 * a_w * dc; phi_w = a_w * exp(alpha2 * dw)"""
    center = anchor.a_c + spec.alpha1 * anchor.a_w * delta_c
    width = anchor.a_w * math.exp(spec.alpha2 * delta_w)
    return Segment(center, width)


def encode(anchor: Anchor, gt: Segment, spec: AnchorSpec) -> Tuple[float, float]:
    """Inverso exato de decode"""
    if not gt.width > 0:
        raise InvalidArgumentError(f"largura do ground truth deve ser positiva: {gt.width}")
    delta_c = (gt.center - anchor.a_c) / (spec.alpha1 * anchor.a_w)
    delta_w = math.log(gt.width / anchor.a_w) / spec.alpha2
    return delta_c, delta_w


def decode_arrays(centers: np.ndarray, widths: np.ndarray, delta_c: np.ndarray,
                  delta_w: np.ndarray, spec: AnchorSpec) -> Tuple[np.ndarray, np.ndarray]:
    """decode vetorizado sobre todas as âncoras"""
    return centers + spec.alpha1 * widths * delta_c, widths * np.exp(spec.alpha2 * delta_w)


def encode_arrays(centers: np.ndarray, widths: np.ndarray, gt_centers: np.ndarray,
                  gt_widths: np.ndarray, spec: AnchorSpec) -> Tuple[np.ndarray, np.ndarray]:
    if np.any(gt_widths <= 0):
        raise InvalidArgumentError("largura do ground truth deve ser positiva")
    return (gt_centers - centers) / (spec.alpha1 * widths), np.log(gt_widths / widths) / spec.alpha2


def match_anchors(anchors: Sequence[Anchor], gts: Sequence[Tuple[Segment, int]],
                  threshold: float) -> MatchResult:
    """
    Associa cada âncora ao ground truth de maior IoU (argmax puro, sem forçar bipartição)

    Args:
        anchors: âncoras na ordem de generate_anchors
        gts: pares (segmento normalizado, classe >= 1)
        threshold: IoU mínimo para positivo

    Returns:
        MatchResult alinhado às âncoras
    """
    if not 0.0 < threshold < 1.0:
        raise InvalidArgumentError(f"threshold fora de (0,1): {threshold}")
    n = len(anchors)
    labels = np.zeros(n, dtype=np.int64)
    matched = np.full(n, -1, dtype=np.int64)
    g_iou = np.zeros(n, dtype=np.float64)
    if not gts or n == 0:
        return MatchResult(labels, matched, g_iou)

    centers, widths = anchor_arrays(anchors)
    gt_starts = np.array([g.start for g, _ in gts])
    gt_ends = np.array([g.end for g, _ in gts])
    gt_classes = np.array([c for _, c in gts], dtype=np.int64)

    ious = iou_matrix(centers - widths / 2, centers + widths / 2, gt_starts, gt_ends)
    best = np.argmax(ious, axis=1)
    g_iou = ious[np.arange(n), best]
    positive = g_iou >= threshold
    labels[positive] = gt_classes[best[positive]]
    matched[positive] = best[positive]
    return MatchResult(labels, matched, g_iou)


def hard_negative_mining(matches: MatchResult, predicted_overlap: np.ndarray, ratio: float,
                         seed=0, hard_overlap: float = 0.5, fallback: int = 8) -> np.ndarray:
    """
    Seleciona índices de treino: todos os positivos + negativos na cota ratio:1

    Negativos difíceis (overlap previsto > hard_overlap) entram primeiro, em ordem
    decrescente de overlap; o restante da cota é sorteado entre os demais negativos.
    Sem positivos, usa os `fallback` negativos de maior overlap previsto.
    """
    predicted_overlap = np.asarray(predicted_overlap, dtype=np.float64)
    if predicted_overlap.shape != matches.labels.shape:
        raise InvalidArgumentError("predicted_overlap desalinhado das âncoras")

    positives = np.flatnonzero(matches.positive)
    negatives = np.flatnonzero(~matches.positive)
    # ordenação estável: empates resolvidos pelo menor índice
    by_overlap = negatives[np.argsort(-predicted_overlap[negatives], kind='stable')]

    if positives.size == 0:
        return np.sort(by_overlap[:min(negatives.size, fallback)])

    quota = min(int(round(ratio * positives.size)), negatives.size)
    hard = by_overlap[predicted_overlap[by_overlap] > hard_overlap]
    chosen = hard[:quota]
    missing = quota - chosen.size
    if missing > 0:
        rest = np.setdiff1d(negatives, chosen)
        rng = np.random.default_rng(seed)
        chosen = np.concatenate([chosen, rng.choice(rest, size=missing, replace=False)])
    return np.sort(np.concatenate([positives, chosen]))
